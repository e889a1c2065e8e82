"""Dense float64 arithmetic, seeded randomness and a layer-level gradient tape.

Matrices are plain 2-D ``float64`` numpy arrays. The tape records one node per
layer-level operation (matmul, add, layernorm, attention, gelu, pooling,
cross-entropy) and replays them in reverse; there is no scalar tracing.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import kernels
from .errors import DimensionError, InputError

LN_EPS = 1e-5


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


class Rng:
    """Counter-based (Philox) generator addressed by a seed plus an optional key path.

    ``Rng(seed).child("layer", 3)`` is an independent stream that depends only on
    the seed and the key path, never on how much of the parent was consumed.
    """

    def __init__(self, seed: int, *path):
        self.seed = int(seed)
        self.path = tuple(path)
        words = [self.seed & 0xFFFFFFFF, (self.seed >> 32) & 0xFFFFFFFF]
        for key in self.path:
            words.extend(_key_words(key))
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))

    def child(self, *path) -> "Rng":
        return Rng(self.seed, *self.path, *path)

    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n, size, replace=False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)


def _key_words(key) -> list[int]:
    if isinstance(key, (int, np.integer)):
        k = int(key)
        return [k & 0xFFFFFFFF, (k >> 32) & 0xFFFFFFFF]
    data = str(key).encode()
    # FNV-1a keeps string keys stable across interpreter runs (hash() is salted)
    h = 0xCBF29CE484222325
    for byte in data:
        h = ((h ^ byte) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return [h & 0xFFFFFFFF, h >> 32]


def init_matrix(rng: Rng, rows: int, cols: int, scheme: str = "scaled-normal") -> np.ndarray:
    if rows <= 0 or cols <= 0:
        raise InputError(f"matrix dims must be positive, got {rows}x{cols}")
    if scheme == "zeros":
        return np.zeros((rows, cols))
    if scheme == "scaled-normal":
        return rng.normal((rows, cols)) / math.sqrt(cols)
    raise InputError(f"unknown init scheme {scheme!r}")


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class Var:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value: np.ndarray, requires_grad: bool = False, name: str | None = None):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape


def _acc(var: Var, g: np.ndarray) -> None:
    if var.requires_grad:
        var.grad = g if var.grad is None else var.grad + g


class GradientTape:
    """Records layer-level operations and back-propagates through them.

    After :meth:`backward`, ``grads`` maps every parameter registered with
    ``requires_grad=True`` to a gradient of the same shape.
    """

    def __init__(self):
        self._ops: list[tuple[Var, Callable[[np.ndarray], None]]] = []
        self.params: dict[str, Var] = {}
        self.grads: dict[str, np.ndarray] = {}

    def param(self, name: str, value: np.ndarray, requires_grad: bool = False) -> Var:
        var = Var(value, requires_grad, name)
        if requires_grad:
            self.params[name] = var
        return var

    @staticmethod
    def const(value: np.ndarray) -> Var:
        return Var(value)

    def _record(self, value, parents, backward) -> Var:
        out = Var(value, any(p.requires_grad for p in parents))
        if out.requires_grad:
            self._ops.append((out, backward))
        return out

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        loss.grad = np.ones_like(loss.value)
        for out, fn in reversed(self._ops):
            if out.grad is not None:
                fn(out.grad)
        self.grads = {
            name: (v.grad if v.grad is not None else np.zeros_like(v.value))
            for name, v in self.params.items()
        }
        return self.grads

    # -- operations ---------------------------------------------------------

    def matmul(self, a: Var, b: Var) -> Var:
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
            raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")

        def backward(g):
            if a.requires_grad:
                _acc(a, g @ b.value.T)
            if b.requires_grad:
                _acc(b, a.value.T @ g)

        return self._record(a.value @ b.value, (a, b), backward)

    def add(self, a: Var, b: Var) -> Var:
        if a.shape != b.shape:
            raise DimensionError(f"cannot add {a.shape} and {b.shape}")

        def backward(g):
            _acc(a, g)
            _acc(b, g)

        return self._record(a.value + b.value, (a, b), backward)

    def mul_const(self, a: Var, c: np.ndarray) -> Var:
        def backward(g):
            _acc(a, g * c)

        return self._record(a.value * c, (a,), backward)

    def scale(self, a: Var, s: float) -> Var:
        def backward(g):
            _acc(a, g * s)

        return self._record(a.value * s, (a,), backward)

    def reshape(self, a: Var, shape) -> Var:
        def backward(g):
            _acc(a, g.reshape(a.shape))

        return self._record(a.value.reshape(shape), (a,), backward)

    def embed(self, table: Var, pos: Var, tokens: np.ndarray) -> Var:
        t = tokens.shape[1]

        def backward(g):
            if table.requires_grad:
                gt = np.zeros_like(table.value)
                np.add.at(gt, tokens, g)
                _acc(table, gt)
            if pos.requires_grad:
                gp = np.zeros_like(pos.value)
                gp[:t] = g.sum(axis=0)
                _acc(pos, gp)

        return self._record(table.value[tokens] + pos.value[None, :t], (table, pos), backward)

    def layernorm(self, x: Var) -> Var:
        y, inv = kernels.layernorm_fwd(x.value, LN_EPS)

        def backward(g):
            _acc(x, kernels.layernorm_bwd(np.ascontiguousarray(g), y, inv))

        return self._record(y, (x,), backward)

    def attention(self, qkv: Var, num_heads: int) -> Var:
        if qkv.value.ndim != 3 or qkv.shape[2] % (3 * num_heads):
            raise DimensionError(f"bad qkv shape {qkv.shape} for {num_heads} heads")
        xv = np.ascontiguousarray(qkv.value)
        out, p = kernels.attention_fwd(xv, num_heads)

        def backward(g):
            _acc(qkv, kernels.attention_bwd(np.ascontiguousarray(g), xv, p, num_heads))

        return self._record(out, (qkv,), backward)

    def gelu(self, x: Var) -> Var:
        xv = np.ascontiguousarray(x.value)
        y, th = kernels.gelu_fwd(xv)

        def backward(g):
            _acc(x, kernels.gelu_bwd(np.ascontiguousarray(g), xv, th))

        return self._record(y, (x,), backward)

    def mean_pool(self, x: Var) -> Var:
        t = x.shape[1]

        def backward(g):
            _acc(x, np.broadcast_to(g[:, None, :] / t, x.shape).copy())

        return self._record(x.value.mean(axis=1), (x,), backward)

    def cross_entropy(self, logits: Var, labels: np.ndarray) -> Var:
        n = logits.shape[0]
        z = logits.value - logits.value.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss = -logp[np.arange(n), labels].mean()

        def backward(g):
            d = np.exp(logp)
            d[np.arange(n), labels] -= 1.0
            _acc(logits, d * (g / n))

        return self._record(np.asarray(loss), (logits,), backward)
