import json

import numpy as np
import pytest

from evalblocks import tensorio


def write_manifest_fixture(
    root,
    n_benign,
    n_malignant,
    n_folds=5,
    modalities=("CT",),
    shape=(2, 2, 2),
    name="fixture",
):
    """Write a loadable manifest with tiny patch files and given class counts."""
    patches_dir = root / "patches"
    patches_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for label, count in ((0, n_benign), (1, n_malignant)):
        for i in range(count):
            pid = f"p{label}_{i:04d}"
            files = {}
            for m in modalities:
                rel = f"patches/{pid}_{m}.evbt"
                tensorio.write_tensor(
                    root / rel, np.full(shape, (label * 50 + i) % 256, dtype=np.uint8)
                )
                files[m] = rel
            entries.append(
                {
                    "patch_id": pid,
                    "patient_id": f"case_{label}_{i}",
                    "label": label,
                    "fold": i % n_folds,
                    "modalities": files,
                }
            )
    doc = {
        "name": name,
        "n_folds": n_folds,
        "modalities": list(modalities),
        "patch_shape": list(shape),
        "patches": entries,
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture
def manifest_builder(tmp_path):
    def build(n_benign, n_malignant, **kwargs):
        return write_manifest_fixture(tmp_path, n_benign, n_malignant, **kwargs)

    return build
