"""Importance scores, top-k element/block masks and global layer dropping."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .errors import DimensionError, InputError

CRITERIA = ("MCS", "CS", "GM", "WM", "GD-drop", "GD-grow")


@dataclass(frozen=True, eq=False)
class SparseMask:
    """Trainable coordinates of one ``shape`` matrix.

    ``indices`` holds sorted row-major linear indices: of elements for
    ``kind == "element"``, of cells of the ``block_size`` grid for
    ``kind == "block"``.
    """

    shape: tuple[int, int]
    kind: str
    indices: np.ndarray
    block_size: int = 0

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "shape", (int(self.shape[0]), int(self.shape[1])))
        if self.kind not in ("element", "block"):
            raise InputError(f"unknown mask kind {self.kind!r}")
        if idx.ndim != 1 or (idx.size > 1 and np.any(np.diff(idx) <= 0)):
            raise InputError("mask indices must be strictly increasing")
        if self.kind == "block":
            b = self.block_size
            if b <= 0 or self.shape[0] % b or self.shape[1] % b:
                raise InputError(f"block size {b} does not tile shape {self.shape}")
            limit = (self.shape[0] // b) * (self.shape[1] // b)
        else:
            limit = self.shape[0] * self.shape[1]
        if idx.size and (idx[0] < 0 or idx[-1] >= limit):
            raise InputError("mask index out of range")

    @classmethod
    def full(cls, shape) -> "SparseMask":
        return cls(shape, "element", np.arange(shape[0] * shape[1]))

    @classmethod
    def empty(cls, shape) -> "SparseMask":
        return cls(shape, "element", np.zeros(0, dtype=np.int64))

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "SparseMask":
        dense = np.asarray(dense, dtype=bool)
        return cls(dense.shape, "element", np.flatnonzero(dense))

    @property
    def count(self) -> int:
        if self.kind == "block":
            return int(self.indices.size) * self.block_size**2
        return int(self.indices.size)

    def __len__(self) -> int:
        return self.count

    def element_indices(self) -> np.ndarray:
        """Sorted linear indices of every selected element."""
        if self.kind == "element":
            return self.indices
        return np.flatnonzero(self.to_dense())

    def block_coords(self) -> tuple[np.ndarray, np.ndarray]:
        nbc = self.shape[1] // self.block_size
        return self.indices // nbc, self.indices % nbc

    def to_dense(self) -> np.ndarray:
        if self.kind == "element":
            out = np.zeros(self.shape[0] * self.shape[1], dtype=bool)
            out[self.indices] = True
            return out.reshape(self.shape)
        b = self.block_size
        grid = np.zeros((self.shape[0] // b) * (self.shape[1] // b), dtype=bool)
        grid[self.indices] = True
        grid = grid.reshape(self.shape[0] // b, self.shape[1] // b)
        return np.kron(grid, np.ones((b, b), dtype=bool)).astype(bool)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseMask):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.kind == other.kind
            and self.block_size == other.block_size
            and np.array_equal(self.indices, other.indices)
        )

    def __repr__(self) -> str:
        extra = f", B={self.block_size}" if self.kind == "block" else ""
        return f"SparseMask({self.shape}, {self.kind}{extra}, count={self.count})"


def mask_union(masks: Sequence[SparseMask]) -> SparseMask:
    """Union of same-shaped masks; stays block-structured when every input shares one grid."""
    if not masks:
        raise InputError("no masks to combine")
    shape = masks[0].shape
    if any(m.shape != shape for m in masks):
        raise DimensionError(f"mask shapes differ: {[m.shape for m in masks]}")
    b = masks[0].block_size
    if all(m.kind == "block" and m.block_size == b for m in masks):
        return SparseMask(shape, "block", np.unique(np.concatenate([m.indices for m in masks])), b)
    return SparseMask(shape, "element", np.unique(np.concatenate([m.element_indices() for m in masks])))


@dataclass(frozen=True)
class ScoreField:
    values: np.ndarray
    criterion: str

    @property
    def shape(self):
        return self.values.shape


def score(criterion: str, weights, grads, initial_weights=None) -> ScoreField:
    """Per-entry importance of an adapter's dense values ``weights`` given ``grads``."""
    w = np.asarray(weights, dtype=np.float64)
    g = np.asarray(grads, dtype=np.float64)
    if w.shape != g.shape:
        raise DimensionError(f"weights {w.shape} and grads {g.shape} differ")
    if criterion == "MCS":
        s = w * g
    elif criterion == "CS":
        s = np.abs(w * g)
    elif criterion in ("GM", "GD-grow"):
        s = np.abs(g)
    elif criterion == "WM":
        s = np.abs(w)
    elif criterion == "GD-drop":
        if initial_weights is None:
            raise InputError("GD-drop scoring needs initial_weights")
        w0 = np.asarray(initial_weights, dtype=np.float64)
        if w0.shape != w.shape:
            raise DimensionError(f"initial weights {w0.shape} and weights {w.shape} differ")
        s = np.abs(w - w0)
    else:
        raise InputError(f"unknown criterion {criterion!r}; expected one of {CRITERIA}")
    return ScoreField(s, criterion)


def keep_count(kr: float, n: int) -> int:
    if not 0.0 < kr <= 1.0:
        raise InputError(f"keep ratio must be in (0, 1], got {kr}")
    return max(1, int(math.floor(kr * n)))


def topk_mask(scores: ScoreField | np.ndarray, kr: float) -> SparseMask:
    values = scores.values if isinstance(scores, ScoreField) else np.asarray(scores, dtype=np.float64)
    k = keep_count(kr, values.size)
    flat = np.ascontiguousarray(values, dtype=np.float64).ravel()
    return SparseMask(values.shape, "element", kernels.topk_indices(flat, k))


def num_blocks(kr: float, d1: int, d2: int, block: int) -> int:
    """Block budget kr * d1 * d2 / B^2, floored."""
    return int(math.floor(kr * (d1 * d2) / (block * block)))


def block_mask(scores: ScoreField | np.ndarray, kr: float, block: int) -> SparseMask:
    values = scores.values if isinstance(scores, ScoreField) else np.asarray(scores, dtype=np.float64)
    d1, d2 = values.shape
    if not 0.0 < kr <= 1.0:
        raise InputError(f"keep ratio must be in (0, 1], got {kr}")
    if block <= 0 or d1 % block or d2 % block:
        raise InputError(f"block size {block} must divide both dims of {values.shape}")
    n_b = num_blocks(kr, d1, d2, block)
    if n_b < 1:
        raise InputError(f"kr={kr} leaves no {block}x{block} block in a {d1}x{d2} matrix")
    sums = kernels.block_sums(np.ascontiguousarray(values, dtype=np.float64), block)
    return SparseMask(values.shape, "block", kernels.topk_indices(sums.ravel(), n_b), block)


def layer_drop(per_layer_scores: Mapping[str, ScoreField] | Sequence[ScoreField], kr: float) -> set:
    """Keys of the layers that stay active under a global top-k threshold.

    The threshold is the k-th highest score across all layers, k = floor(kr * total).
    A layer is dropped when even its best entry scores below the threshold.
    """
    items = per_layer_scores.items() if isinstance(per_layer_scores, Mapping) else enumerate(per_layer_scores)
    arrays = {key: np.asarray(s.values if isinstance(s, ScoreField) else s, dtype=np.float64) for key, s in items}
    arrays = {key: a for key, a in arrays.items() if a.size}
    if not arrays:
        raise InputError("layer_drop needs at least one non-empty score field")
    union = np.concatenate([a.ravel() for a in arrays.values()])
    k = keep_count(kr, union.size)
    threshold = np.partition(union, union.size - k)[union.size - k]
    active = {key for key, a in arrays.items() if a.max() >= threshold}
    if not active:  # pragma: no cover - the k-th score always lives in some layer
        active = {max(arrays, key=lambda key: arrays[key].max())}
    return active
