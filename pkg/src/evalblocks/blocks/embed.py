"""Embedder blocks: deterministic synthetic embedders and the
cross-process protocol for external models.

The synthetic embedders stand in for real foundation models at desk
scale: preprocess, flatten, optionally standardize, then apply a fixed
seeded random projection. External models run as one subprocess per
patch, exchanging ``.evbt`` tensor files via {input}/{output} command
placeholders; exit 0 means success and stdout is logged verbatim.
"""

from __future__ import annotations

import logging
import subprocess
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import tensorio
from ..config import EmbedderDecl
from ..dataset import DatasetManifest, PreprocessSpec, apply_preprocess
from ..errors import BlockExecutionError, DataError

log = logging.getLogger(__name__)

_projection_lock = threading.Lock()
_projection_memo: dict[tuple[int, int, int], np.ndarray] = {}


def _projection_matrix(seed: int, n_inputs: int, dim: int) -> np.ndarray:
    """Seeded standard-normal projection, memoized per (seed, size, dim)."""
    key = (seed, n_inputs, dim)
    with _projection_lock:
        mat = _projection_memo.get(key)
        if mat is None:
            rng = np.random.default_rng(seed)
            mat = rng.standard_normal((dim, n_inputs))
            _projection_memo[key] = mat
    return mat


def embed_synthetic(
    patch: np.ndarray,
    preprocess: PreprocessSpec,
    dim: int,
    seed: int,
    standardize: bool = True,
) -> np.ndarray:
    """Random-projection embedding of one preprocessed patch.

    With standardize, the flattened input is shifted/scaled to zero mean
    and unit variance first (a constant patch becomes the zero vector);
    without it the map is linear in the voxels. Output is
    projection @ input / sqrt(n_inputs), float32.
    """
    x = apply_preprocess(patch, preprocess).astype(np.float64).ravel()
    if standardize:
        std = x.std()
        if std == 0:
            x = np.zeros_like(x)
        else:
            x = (x - x.mean()) / std
    proj = _projection_matrix(seed, x.size, dim)
    return ((proj @ x) / np.sqrt(x.size)).astype(np.float32)


def embed_external(
    command: list[str],
    preprocessed: np.ndarray,
    input_path: str | Path,
    output_path: str | Path,
    timeout_s: float = 600.0,
) -> np.ndarray:
    """Run one external-embedder invocation over tensor files.

    Writes the preprocessed patch to input_path, substitutes the
    {input}/{output} placeholders into the argv template, runs it, and on
    exit 0 reads output_path back as a rank-1 float32 tensor.
    """
    input_path, output_path = Path(input_path), Path(output_path)
    joined = " ".join(command)
    if "{input}" not in joined or "{output}" not in joined:
        raise DataError("external command must contain {input} and {output} placeholders")
    tensorio.write_tensor(input_path, preprocessed)
    argv = [
        arg.replace("{input}", str(input_path)).replace("{output}", str(output_path))
        for arg in command
    ]
    try:
        proc = subprocess.run(argv, capture_output=True, text=True, timeout=timeout_s)
    except subprocess.TimeoutExpired:
        raise BlockExecutionError(f"external embedder timed out after {timeout_s}s: {argv[0]}")
    except OSError as e:
        raise BlockExecutionError(f"cannot launch external embedder {argv[0]}: {e}")
    if proc.stdout:
        log.info("external embedder stdout: %s", proc.stdout.rstrip())
    if proc.returncode != 0:
        raise BlockExecutionError(
            f"external embedder exited {proc.returncode}; stderr: {proc.stderr.strip()}"
        )
    try:
        vec = tensorio.read_tensor(output_path)
    except (OSError, DataError) as e:
        raise BlockExecutionError(f"external embedder produced no valid output tensor: {e}")
    if vec.ndim != 1 or vec.dtype != np.float32:
        raise BlockExecutionError(
            f"external embedder must return a rank-1 float32 tensor, got "
            f"rank {vec.ndim} {vec.dtype}"
        )
    return vec


@dataclass
class VectorSet:
    """Per-patch embedding vectors for one channel of one dataset.

    A channel is a modality name straight out of the embedder, or an
    aggregation id after an aggregation block.
    """

    dataset: str
    embedder: str
    channel: str
    dim: int
    ids: list[str]
    matrix: np.ndarray  # (n_patches, dim) float32, rows in ids order

    def validate(self) -> None:
        if self.matrix.shape != (len(self.ids), self.dim):
            raise DataError(
                f"vector set shape {self.matrix.shape} != ({len(self.ids)}, {self.dim})"
            )
        if not np.all(np.isfinite(self.matrix)):
            raise DataError(f"non-finite values in {self.dataset}/{self.channel} vectors")

    def vectors(self) -> dict[str, np.ndarray]:
        return {pid: self.matrix[i] for i, pid in enumerate(self.ids)}

    def rows_for(self, ids: list[str]) -> np.ndarray:
        index = {pid: i for i, pid in enumerate(self.ids)}
        return self.matrix[[index[pid] for pid in ids]]


def run_dataset_embedding(
    manifest: DatasetManifest,
    embedder: EmbedderDecl,
    work_dir: str | Path,
) -> dict[str, VectorSet]:
    """Embed every patch of every modality, in manifest order.

    Returns one VectorSet per modality. Any per-patch failure fails the
    whole node; partial embeddings are never published.
    """
    work_dir = Path(work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)
    params = embedder.params
    declared_dim = params.get("dim")
    sets: dict[str, VectorSet] = {}
    for modality in manifest.modalities:
        rows: list[np.ndarray] = []
        for idx, patch in enumerate(manifest.patches):
            tensor = tensorio.read_tensor(manifest.patch_path(patch, modality))
            if embedder.kind in ("synthetic2d", "synthetic3d"):
                vec = embed_synthetic(
                    tensor,
                    embedder.preprocess,
                    dim=params["dim"],
                    seed=params["seed"],
                    standardize=params.get("standardize", True),
                )
            else:
                vec = embed_external(
                    params["command"],
                    apply_preprocess(tensor, embedder.preprocess),
                    work_dir / f"in_{modality}_{idx:06d}.evbt",
                    work_dir / f"out_{modality}_{idx:06d}.evbt",
                    timeout_s=params.get("timeout_s", 600.0),
                )
            if declared_dim is not None and vec.size != declared_dim:
                raise BlockExecutionError(
                    f"embedder {embedder.id!r} returned dim {vec.size}, declared {declared_dim}"
                )
            if rows and vec.size != rows[0].size:
                raise BlockExecutionError(
                    f"embedder {embedder.id!r} returned inconsistent dims "
                    f"({vec.size} vs {rows[0].size})"
                )
            rows.append(np.asarray(vec, dtype=np.float32))
        vs = VectorSet(
            dataset=manifest.name,
            embedder=embedder.id,
            channel=modality,
            dim=rows[0].size if rows else int(declared_dim or 0),
            ids=[p.patch_id for p in manifest.patches],
            matrix=np.vstack(rows) if rows else np.zeros((0, int(declared_dim or 0)), np.float32),
        )
        vs.validate()
        sets[modality] = vs
    return sets
