"""Combining per-task experts into one delta.

``merge_sparse`` is the overlap-weighted average of sparse adapters; the rest are
the dense baselines (uniform averaging, LoRA averaging, task arithmetic, TIES,
Breadcrumbs). Every function is pure: inputs are never modified.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .errors import DimensionError, InputError
from .model import Adapter, LoraAdapter, Model, TaskVector
from .saliency import SparseMask, mask_union

METHODS = ("sparse-overlap", "uniform", "lora-average", "task-arithmetic", "ties", "breadcrumbs")


@dataclass(frozen=True)
class MergeSpec:
    """Which merge to run and its knobs.

    Defaults: ``lam`` 0.4 (used by task-arithmetic and breadcrumbs; TIES is
    normally run with ``lam=1.0``), ``trim`` 0.2 (TIES keeps the top 20% per
    vector), ``beta`` 0.01 and ``gamma`` 0.85 (Breadcrumbs drops the top 1% and
    bottom 85% by magnitude).
    """

    method: str = "sparse-overlap"
    lam: float = 0.4
    trim: float = 0.2
    beta: float = 0.01
    gamma: float = 0.85

    def validate(self) -> None:
        if self.method not in METHODS:
            raise InputError(f"unknown merge method {self.method!r}; expected one of {', '.join(METHODS)}")
        if not self.lam > 0:
            raise InputError(f"lambda must be positive, got {self.lam}")
        if not 0.0 < self.trim <= 1.0:
            raise InputError(f"trim fraction must be in (0, 1], got {self.trim}")
        if not (0.0 <= self.beta < 1.0 and 0.0 <= self.gamma < 1.0):
            raise InputError("breadcrumbs fractions must be in [0, 1)")
        if self.beta + self.gamma >= 1.0:
            raise InputError(f"breadcrumbs needs beta + gamma < 1, got {self.beta} + {self.gamma}")

    def to_dict(self) -> dict:
        return asdict(self)


def _check_layers(items, what: str) -> list[str]:
    if not items:
        raise InputError(f"cannot merge an empty list of {what}")
    layers = list(items[0].layers)
    for it in items[1:]:
        if set(it.layers) != set(layers):
            raise InputError(
                f"{what} target different layers: {sorted(layers)} vs {sorted(it.layers)} ({it.task_id or '?'})"
            )
    return layers


def _layer_shapes(items, get, layers) -> dict:
    shapes = {}
    for lid in layers:
        shapes[lid] = get(items[0], lid).shape
        for it in items[1:]:
            if get(it, lid).shape != shapes[lid]:
                raise DimensionError(f"{lid}: shapes {shapes[lid]} and {get(it, lid).shape} differ")
    return shapes


def overlap_factor(masks: Sequence[SparseMask]) -> np.ndarray:
    """Per-coordinate number of masks selecting it, floored at 1."""
    if not masks:
        raise InputError("overlap_factor needs at least one mask")
    shape = masks[0].shape
    counts = np.zeros(shape)
    for m in masks:
        if m.shape != shape:
            raise DimensionError(f"mask shapes {shape} and {m.shape} differ")
        counts += m.to_dense()
    return np.maximum(counts, 1.0)


def merge_sparse(adapters: Sequence[Adapter]) -> Adapter:
    """Sum the sparse deltas and divide each coordinate by its overlap factor.

    The quotient is rounded once from the exact sum, so merging N copies of one
    adapter returns it unchanged. The result mask is the union of input masks.
    """
    layers = _check_layers(list(adapters), "adapters")
    _layer_shapes(adapters, lambda a, l: a.values[l], layers)
    values, masks = {}, {}
    for lid in layers:
        shape = adapters[0].values[lid].shape
        stacked = np.stack([a.delta(lid).ravel() for a in adapters])
        selected = np.stack([a.dense_mask(lid).ravel() > 0 for a in adapters])
        values[lid] = kernels.overlap_average(stacked, selected).reshape(shape)
        masks[lid] = mask_union([a.masks[lid] for a in adapters])
    return Adapter(
        values,
        masks,
        task_id="+".join(a.task_id for a in adapters),
        meta={"method": "sparse-overlap", "sources": [a.task_id for a in adapters]},
    )


def _as_vectors(vectors) -> list[TaskVector]:
    out = []
    for v in vectors:
        if isinstance(v, TaskVector):
            out.append(v)
        elif isinstance(v, (Adapter, LoraAdapter)):
            out.append(TaskVector(v.deltas(), task_id=v.task_id))
        else:
            raise InputError(f"cannot treat {type(v).__name__} as a task vector")
    return out


def _sum_scaled(vectors: list[TaskVector], scale: float) -> TaskVector:
    layers = _check_layers(vectors, "task vectors")
    _layer_shapes(vectors, lambda v, l: v.deltas[l], layers)
    out = {}
    for lid in layers:
        acc = np.zeros_like(vectors[0].deltas[lid])
        for v in vectors:
            acc += v.deltas[lid]
        out[lid] = acc * scale
    return TaskVector(out, task_id="+".join(v.task_id for v in vectors))


def merge_uniform(vectors) -> TaskVector:
    vectors = _as_vectors(vectors)
    if not vectors:
        raise InputError("cannot merge an empty list of task vectors")
    tv = _sum_scaled(vectors, 1.0 / len(vectors))
    tv.meta["method"] = "uniform"
    return tv


def merge_lora(loras: Sequence[LoraAdapter]) -> TaskVector:
    if not loras:
        raise InputError("cannot merge an empty list of LoRA adapters")
    tv = merge_uniform([TaskVector(l.deltas(), task_id=l.task_id) for l in loras])
    tv.meta["method"] = "lora-average"
    return tv


def task_arithmetic(vectors, lam: float) -> TaskVector:
    vectors = _as_vectors(vectors)
    if not vectors:
        raise InputError("cannot merge an empty list of task vectors")
    tv = _sum_scaled(vectors, lam)
    tv.meta["method"] = "task-arithmetic"
    return tv


def _magnitude_order(flat: np.ndarray) -> np.ndarray:
    # descending |x|, ties to the lowest index
    return np.argsort(-np.abs(flat), kind="stable")


def ties(vectors, lam: float, trim_fraction: float) -> TaskVector:
    """Trim each vector to its largest entries, elect a sign, average the agreeing entries."""
    vectors = _as_vectors(vectors)
    if not 0.0 < trim_fraction <= 1.0:
        raise InputError(f"trim fraction must be in (0, 1], got {trim_fraction}")
    layers = _check_layers(vectors, "task vectors")
    _layer_shapes(vectors, lambda v, l: v.deltas[l], layers)
    out = {}
    for lid in layers:
        shape = vectors[0].deltas[lid].shape
        n = int(np.prod(shape))
        keep = int(math.floor(trim_fraction * n))
        trimmed = np.zeros((len(vectors), n))
        for i, v in enumerate(vectors):
            flat = v.deltas[lid].ravel()
            top = _magnitude_order(flat)[:keep]
            trimmed[i, top] = flat[top]
        out[lid] = kernels.sign_elect_mean(trimmed).reshape(shape) * lam
    return TaskVector(out, task_id="+".join(v.task_id for v in vectors), meta={"method": "ties"})


def breadcrumbs(vectors, lam: float, beta: float, gamma: float) -> TaskVector:
    """Drop each vector's largest ``beta`` and smallest ``gamma`` fractions, then sum and scale."""
    vectors = _as_vectors(vectors)
    if beta < 0 or gamma < 0 or beta + gamma >= 1.0:
        raise InputError(f"breadcrumbs needs beta, gamma >= 0 and beta + gamma < 1, got {beta}, {gamma}")
    layers = _check_layers(vectors, "task vectors")
    _layer_shapes(vectors, lambda v, l: v.deltas[l], layers)
    out = {}
    for lid in layers:
        shape = vectors[0].deltas[lid].shape
        n = int(np.prod(shape))
        n_top, n_bottom = int(math.floor(beta * n)), int(math.floor(gamma * n))
        acc = np.zeros(n)
        for v in vectors:
            flat = v.deltas[lid].ravel()
            order = _magnitude_order(flat)
            kept = np.zeros(n, dtype=bool)
            kept[order[n_top : n - n_bottom]] = True
            acc += np.where(kept, flat, 0.0)
        out[lid] = (acc * lam).reshape(shape)
    return TaskVector(out, task_id="+".join(v.task_id for v in vectors), meta={"method": "breadcrumbs"})


def merge(experts, spec: MergeSpec):
    """Dispatch on ``spec.method``; returns an Adapter (sparse-overlap) or a TaskVector."""
    spec.validate()
    if spec.method == "sparse-overlap":
        if not all(isinstance(a, Adapter) for a in experts):
            raise InputError("sparse-overlap merging needs sparse adapters")
        return merge_sparse(experts)
    if spec.method == "lora-average":
        if not all(isinstance(a, LoraAdapter) for a in experts):
            raise InputError("lora-average merging needs LoRA adapters")
        return merge_lora(experts)
    if spec.method == "uniform":
        return merge_uniform(experts)
    if spec.method == "task-arithmetic":
        return task_arithmetic(experts, spec.lam)
    if spec.method == "ties":
        return ties(experts, spec.lam, spec.trim)
    return breadcrumbs(experts, spec.lam, spec.beta, spec.gamma)


def merged_deltas(merged) -> dict[str, np.ndarray]:
    if isinstance(merged, TaskVector):
        return dict(merged.deltas)
    if isinstance(merged, (Adapter, LoraAdapter)):
        return merged.deltas()
    raise InputError(f"cannot apply {type(merged).__name__} as a merge result")


def apply_merge(model: Model, merged) -> Model:
    """A view of ``model`` whose effective weights are base + merged delta."""
    return model.base().with_deltas(merged_deltas(merged))
