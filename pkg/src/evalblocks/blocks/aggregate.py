"""Aggregation blocks combining per-modality embeddings.

Strategies live in a registry keyed by kind; new ones register
(kind, version, function) and inherit caching automatically because the
kind and version enter every cache key.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import DataError
from .embed import VectorSet

AggregateFn = Callable[[list[VectorSet], str], list[VectorSet]]

_REGISTRY: dict[str, tuple[str, AggregateFn]] = {}


def register_aggregator(kind: str, version: str, fn: AggregateFn) -> None:
    _REGISTRY[kind] = (version, fn)


def get_aggregator(kind: str) -> tuple[str, AggregateFn]:
    try:
        return _REGISTRY[kind]
    except KeyError:
        raise DataError(f"no aggregator registered for kind {kind!r}")


def aggregate_identity(sets: list[VectorSet], agg_id: str = "none") -> list[VectorSet]:
    """Pass-through: one output per input modality, evaluated separately."""
    return list(sets)


def aggregate_modality_mean(sets: list[VectorSet], agg_id: str = "mean") -> list[VectorSet]:
    """Element-wise arithmetic mean of each patch's modality vectors.

    Patches align by patch_id, not row order, so modality artifacts may
    list patches in any order.
    """
    if len(sets) < 2:
        raise DataError("modality_mean needs at least 2 modalities")
    dims = {s.dim for s in sets}
    if len(dims) != 1:
        raise DataError(f"modality_mean dimension mismatch: {sorted(dims)}")
    id_sets = [set(s.ids) for s in sets]
    if any(ids != id_sets[0] for ids in id_sets[1:]):
        raise DataError("modality_mean patch-id mismatch across modalities")
    ref = sets[0]
    stacked = np.stack([s.rows_for(ref.ids) for s in sets])
    mean = stacked.mean(axis=0).astype(np.float32)
    out = VectorSet(
        dataset=ref.dataset,
        embedder=ref.embedder,
        channel=agg_id,
        dim=ref.dim,
        ids=list(ref.ids),
        matrix=mean,
    )
    out.validate()
    return [out]


register_aggregator("none", "1", aggregate_identity)
register_aggregator("modality_mean", "1", aggregate_modality_mean)
