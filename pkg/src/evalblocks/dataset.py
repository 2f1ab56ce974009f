"""Dataset manifests, fold splits, per-model preprocessing, synthetic data.

A dataset is a JSON manifest plus tensor files referenced by relative path:

    { "name": str, "n_folds": int, "modalities": [str], "patch_shape": [int],
      "patches": [ { "patch_id": str, "patient_id": str, "label": 0|1,
                     "fold": int, "modalities": { str: relpath } } ] }

Fold assignments ship inside the manifest (they are given, not computed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorio
from .errors import DataError

PREPROCESS_MODES = ("volume3d", "central_slice", "grayscale_slice")
NORMALIZATIONS = ("none", "unit_range")


@dataclass(frozen=True)
class PreprocessSpec:
    """How a patch is transformed before entering an embedder."""

    mode: str = "volume3d"
    normalization: str = "none"

    def __post_init__(self):
        if self.mode not in PREPROCESS_MODES:
            raise DataError(f"unknown preprocess mode {self.mode!r}")
        if self.normalization not in NORMALIZATIONS:
            raise DataError(f"unknown normalization {self.normalization!r}")


@dataclass(frozen=True)
class PatchRecord:
    patch_id: str
    patient_id: str
    label: int
    fold: int
    modalities: dict[str, str]  # modality name -> tensor file relpath


@dataclass
class DatasetManifest:
    name: str
    n_folds: int
    modalities: list[str]
    patch_shape: tuple[int, ...]
    patches: list[PatchRecord]
    root: Path = field(default_factory=Path)  # directory the relpaths resolve against

    def patch_path(self, patch: PatchRecord, modality: str) -> Path:
        return self.root / patch.modalities[modality]

    def labels(self) -> dict[str, int]:
        return {p.patch_id: p.label for p in self.patches}

    def class_counts(self) -> tuple[int, int]:
        pos = sum(1 for p in self.patches if p.label == 1)
        return len(self.patches) - pos, pos


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise DataError(msg)


def load_manifest(path: str | Path, check_files: bool = True) -> DatasetManifest:
    """Load and validate a manifest JSON file.

    Structural checks always run: unique patch ids, folds in range, every
    patch listing exactly the manifest's modalities, both classes present
    in every fold's training portion. With check_files, every referenced
    tensor must exist and its header shape must match patch_shape.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}")
    except json.JSONDecodeError as e:
        raise DataError(f"manifest {path} is not valid JSON: {e}")

    for key in ("name", "n_folds", "modalities", "patch_shape", "patches"):
        _require(key in raw, f"manifest missing required field {key!r}")
    n_folds = raw["n_folds"]
    _require(isinstance(n_folds, int) and n_folds >= 2, "n_folds must be an integer >= 2")
    modalities = list(raw["modalities"])
    _require(len(modalities) >= 1, "manifest must declare at least one modality")
    _require(len(set(modalities)) == len(modalities), "duplicate modality names")
    patch_shape = tuple(int(d) for d in raw["patch_shape"])

    patches: list[PatchRecord] = []
    seen: set[str] = set()
    for entry in raw["patches"]:
        for key in ("patch_id", "patient_id", "label", "fold", "modalities"):
            _require(key in entry, f"patch entry missing field {key!r}")
        pid = entry["patch_id"]
        _require(pid not in seen, f"duplicate patch_id {pid!r}")
        seen.add(pid)
        _require(entry["label"] in (0, 1), f"patch {pid!r}: label must be 0 or 1")
        fold = entry["fold"]
        _require(
            isinstance(fold, int) and 0 <= fold < n_folds,
            f"patch {pid!r}: fold {fold} out of range [0, {n_folds})",
        )
        mods = dict(entry["modalities"])
        _require(
            set(mods) == set(modalities),
            f"patch {pid!r}: modalities {sorted(mods)} do not match manifest {sorted(modalities)}",
        )
        patches.append(
            PatchRecord(pid, entry["patient_id"], entry["label"], fold, mods)
        )

    manifest = DatasetManifest(
        name=raw["name"],
        n_folds=n_folds,
        modalities=modalities,
        patch_shape=patch_shape,
        patches=patches,
        root=path.parent,
    )

    # both classes must appear in every fold's training portion
    for fold in range(n_folds):
        train_labels = {p.label for p in patches if p.fold != fold}
        _require(
            train_labels == {0, 1},
            f"fold {fold}: training portion does not contain both classes",
        )

    if check_files:
        for patch in patches:
            for modality in modalities:
                fpath = manifest.patch_path(patch, modality)
                _require(fpath.is_file(), f"patch {patch.patch_id!r}: missing file {fpath}")
                _, shape = tensorio.read_tensor_header(fpath)
                _require(
                    shape == patch_shape,
                    f"patch {patch.patch_id!r} [{modality}]: shape {shape} != manifest {patch_shape}",
                )
    return manifest


def fold_split(manifest: DatasetManifest, fold: int) -> tuple[list[str], list[str]]:
    """Partition patch ids into (train, test) for one fold, manifest order."""
    if not 0 <= fold < manifest.n_folds:
        raise DataError(f"fold {fold} out of range [0, {manifest.n_folds})")
    train = [p.patch_id for p in manifest.patches if p.fold != fold]
    test = [p.patch_id for p in manifest.patches if p.fold == fold]
    return train, test


def central_slice(patch: np.ndarray) -> np.ndarray:
    """Extract the central depth slice of a rank-3 (H, W, D) patch.

    The center index is floor(D/2), so even depths take the upper-middle
    slice; D=16 yields index 8.
    """
    if patch.ndim != 3:
        raise DataError(f"central_slice needs rank 3, got rank {patch.ndim}")
    return np.ascontiguousarray(patch[:, :, patch.shape[2] // 2])


def to_grayscale_u8(slice2d: np.ndarray) -> np.ndarray:
    """Min-max rescale a rank-2 slice to uint8 [0, 255].

    Rounding is half away from zero to avoid platform-dependent banker's
    rounding; a constant slice maps to all-128.
    """
    if slice2d.ndim != 2:
        raise DataError(f"to_grayscale_u8 needs rank 2, got rank {slice2d.ndim}")
    values = slice2d.astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise DataError("non-finite values in slice")
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.full(values.shape, 128, dtype=np.uint8)
    scaled = (values - lo) / (hi - lo) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)  # scaled >= 0, so this is half-away


def apply_preprocess(patch: np.ndarray, spec: PreprocessSpec) -> np.ndarray:
    """Run one patch through a preprocess spec; returns the model input."""
    if spec.mode == "volume3d":
        out = patch
    elif spec.mode == "central_slice":
        out = central_slice(patch)
    else:  # grayscale_slice
        out = to_grayscale_u8(central_slice(patch))
    if spec.normalization == "unit_range":
        values = out.astype(np.float64)
        lo, hi = values.min(), values.max()
        if hi > lo:
            out = ((values - lo) / (hi - lo)).astype(np.float32)
        else:
            out = np.zeros(values.shape, dtype=np.float32)
    return out


def generate_synthetic_dataset(
    out_dir: str | Path,
    n_per_class: int = 25,
    patch_shape: tuple[int, ...] = (16, 16, 8),
    n_folds: int = 5,
    class_separation: float = 2.0,
    seed: int = 0,
    modalities: list[str] | None = None,
    name: str = "synthetic",
) -> DatasetManifest:
    """Write a deterministic two-class synthetic dataset and its manifest.

    Class-c patches are (c * class_separation) + unit-variance Gaussian
    noise per voxel, drawn independently per modality so each modality
    carries its own copy of the class signal. Folds are assigned
    round-robin within each class, keeping every fold class-balanced.
    Byte-identical output for identical arguments.
    """
    if n_per_class < n_folds:
        raise DataError(f"n_per_class ({n_per_class}) must be >= n_folds ({n_folds})")
    if class_separation < 0:
        raise DataError("class_separation must be >= 0")
    modalities = list(modalities) if modalities else ["CT"]
    out_dir = Path(out_dir)
    patches_dir = out_dir / "patches"
    patches_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    entries = []
    for label in (0, 1):
        for i in range(n_per_class):
            pid = f"patch{label}_{i:04d}"
            files = {}
            for modality in modalities:
                noise = rng.standard_normal(patch_shape)
                patch = (label * class_separation + noise).astype(np.float32)
                rel = f"patches/{pid}_{modality}.evbt"
                tensorio.write_tensor(out_dir / rel, patch)
                files[modality] = rel
            entries.append(
                {
                    "patch_id": pid,
                    "patient_id": f"case{label}_{i:04d}",
                    "label": label,
                    "fold": i % n_folds,
                    "modalities": files,
                }
            )

    manifest_doc = {
        "name": name,
        "n_folds": n_folds,
        "modalities": modalities,
        "patch_shape": list(patch_shape),
        "patches": entries,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest_doc, indent=1, sort_keys=True))
    return load_manifest(manifest_path)
