"""A tiny transformer classifier with sparse / low-rank / dense delta attachment.

Every block is ``x + O(attn(LN(x) @ QKV))`` followed by ``x + gelu(LN(x) @ up) @ down``;
the classifier mean-pools the final layer-normed states into a linear head. The
base weights are read-only arrays: adapters never write into them.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import DimensionError, InputError, NumericError
from .numerics import GradientTape, Rng, init_matrix
from .saliency import SparseMask

TARGETS = {"QKV": "qkv", "O": "o", "MLP": "mlp_down"}
BLOCK_MATRICES = ("qkv", "o", "mlp_up", "mlp_down")


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    hidden_dim: int = 32
    num_heads: int = 2
    vocab_size: int = 64
    num_classes: int = 4
    seq_len: int = 12
    mlp_ratio: int = 2
    adapt_targets: tuple[str, ...] = ("QKV",)

    def validate(self) -> None:
        for name in ("num_layers", "hidden_dim", "num_heads", "vocab_size", "num_classes", "seq_len", "mlp_ratio"):
            if int(getattr(self, name)) <= 0:
                raise InputError(f"model config: {name} must be positive")
        if self.hidden_dim % self.num_heads:
            raise InputError(
                f"model config: hidden_dim={self.hidden_dim} not divisible by num_heads={self.num_heads}"
            )
        if not self.adapt_targets:
            raise InputError("model config: adapt_targets must be non-empty")
        bad = [t for t in self.adapt_targets if t not in TARGETS]
        if bad:
            raise InputError(f"model config: unknown adapt targets {bad}; expected subset of {sorted(TARGETS)}")

    def layer_shape(self, layer_id: str) -> tuple[int, int]:
        d, m = self.hidden_dim, self.hidden_dim * self.mlp_ratio
        kind = layer_id.rsplit(".", 1)[-1]
        shapes = {"qkv": (d, 3 * d), "o": (d, d), "mlp_up": (d, m), "mlp_down": (m, d)}
        if layer_id == "embed":
            return (self.vocab_size, d)
        if layer_id == "pos":
            return (self.seq_len, d)
        if layer_id == "head":
            return (d, self.num_classes)
        return shapes[kind]


@dataclass(frozen=True)
class Model:
    """Frozen base weights plus an optional read-only delta overlay.

    ``deltas`` is how merged experts are applied: the effective weight of a
    layer is ``weights[id] + deltas[id]`` while ``weights`` stays untouched.
    """

    config: ModelConfig
    weights: Mapping[str, np.ndarray]
    deltas: Mapping[str, np.ndarray] = field(default_factory=dict)

    def adapted_layers(self, targets: Iterable[str] | None = None) -> list[str]:
        targets = tuple(targets) if targets is not None else self.config.adapt_targets
        suffixes = [TARGETS[t] for t in ("QKV", "O", "MLP") if t in targets]
        return [f"layers.{i}.{s}" for i in range(self.config.num_layers) for s in suffixes]

    def block_layers(self) -> list[str]:
        return [f"layers.{i}.{s}" for i in range(self.config.num_layers) for s in BLOCK_MATRICES]

    def with_deltas(self, deltas: Mapping[str, np.ndarray]) -> "Model":
        for lid, d in deltas.items():
            if lid not in self.weights:
                raise InputError(f"unknown layer {lid!r}")
            if d.shape != self.weights[lid].shape:
                raise DimensionError(f"delta for {lid} has shape {d.shape}, layer is {self.weights[lid].shape}")
        return dataclasses.replace(self, deltas=dict(deltas))

    def base(self) -> "Model":
        return dataclasses.replace(self, deltas={})


def build_model(config: ModelConfig, rng: Rng) -> Model:
    config.validate()
    weights = {}
    for name in ("embed", "pos"):
        weights[name] = init_matrix(rng.child(name), *config.layer_shape(name))
    for i in range(config.num_layers):
        for kind in BLOCK_MATRICES:
            lid = f"layers.{i}.{kind}"
            weights[lid] = init_matrix(rng.child(lid), *config.layer_shape(lid))
    weights["head"] = init_matrix(rng.child("head"), *config.layer_shape("head"))
    for w in weights.values():
        w.flags.writeable = False
    return Model(config, weights)


# -- adapter containers -------------------------------------------------------


@dataclass
class Adapter:
    """Sparse adapter: dense per-layer values restricted by a mask, plus metadata."""

    values: dict[str, np.ndarray]
    masks: dict[str, SparseMask]
    task_id: str = ""
    config: dict | None = None
    train_loss: float = float("nan")
    val_loss: float = float("nan")
    meta: dict = field(default_factory=dict)
    _dense: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if set(self.values) != set(self.masks):
            raise InputError("adapter values and masks cover different layers")
        for lid, v in self.values.items():
            if v.shape != self.masks[lid].shape:
                raise DimensionError(f"{lid}: values {v.shape} vs mask {self.masks[lid].shape}")

    @property
    def layers(self) -> list[str]:
        return list(self.values)

    def dense_mask(self, layer_id: str) -> np.ndarray:
        m = self._dense.get(layer_id)
        if m is None or m[0] is not self.masks[layer_id]:
            m = (self.masks[layer_id], self.masks[layer_id].to_dense().astype(np.float64))
            self._dense[layer_id] = m
        return m[1]

    def set_mask(self, layer_id: str, mask: SparseMask) -> None:
        self.masks[layer_id] = mask

    def delta(self, layer_id: str) -> np.ndarray:
        return np.where(self.dense_mask(layer_id) > 0, self.values[layer_id], 0.0)

    def deltas(self) -> dict[str, np.ndarray]:
        return {lid: self.delta(lid) for lid in self.values}

    def restricted(self, masks: Mapping[str, SparseMask]) -> "Adapter":
        """Same values, different masks: the delta becomes values * new mask."""
        return Adapter(dict(self.values), dict(masks), task_id=self.task_id, config=self.config)


@dataclass
class LoraAdapter:
    a: dict[str, np.ndarray]
    b: dict[str, np.ndarray]
    rank: int
    alpha: float
    task_id: str = ""
    config: dict | None = None
    train_loss: float = float("nan")
    val_loss: float = float("nan")
    meta: dict = field(default_factory=dict)

    @property
    def layers(self) -> list[str]:
        return list(self.a)

    def delta(self, layer_id: str) -> np.ndarray:
        return lora_delta(self.a[layer_id], self.b[layer_id], self.alpha)

    def deltas(self) -> dict[str, np.ndarray]:
        return {lid: self.delta(lid) for lid in self.a}


@dataclass
class TaskVector:
    deltas: dict[str, np.ndarray]
    task_id: str = ""
    config: dict | None = None
    train_loss: float = float("nan")
    val_loss: float = float("nan")
    meta: dict = field(default_factory=dict)

    @property
    def layers(self) -> list[str]:
        return list(self.deltas)


def effective_weight(base, adapter_delta, mask: SparseMask) -> np.ndarray:
    base = np.asarray(base, dtype=np.float64)
    delta = np.asarray(adapter_delta, dtype=np.float64)
    if base.shape != delta.shape or base.shape != mask.shape:
        raise DimensionError(f"base {base.shape}, delta {delta.shape} and mask {mask.shape} must agree")
    return np.where(mask.to_dense(), base + delta, base)


def lora_delta(a, b, alpha: float) -> np.ndarray:
    """Scaled low-rank product ``(alpha / r) * A @ B``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0] or a.shape[1] == 0:
        raise DimensionError(f"LoRA factors {a.shape} and {b.shape} do not share a rank")
    return (alpha / a.shape[1]) * (a @ b)


# -- forward / backward --------------------------------------------------------


def _layer_weight(tape: GradientTape, model: Model, lid: str, adapter, trainables, masked: bool):
    w = tape.param(lid, model.weights[lid], lid in trainables)
    if lid in model.deltas:
        w = tape.add(w, tape.const(model.deltas[lid]))
    if adapter is None:
        return w
    if isinstance(adapter, Adapter):
        if lid in adapter.values:
            name = f"{lid}.delta"
            v = tape.param(name, adapter.values[lid], name in trainables)
            if masked:
                v = tape.mul_const(v, adapter.dense_mask(lid))
            w = tape.add(w, v)
    elif isinstance(adapter, LoraAdapter):
        if lid in adapter.a:
            a = tape.param(f"{lid}.lora_A", adapter.a[lid], f"{lid}.lora_A" in trainables)
            b = tape.param(f"{lid}.lora_B", adapter.b[lid], f"{lid}.lora_B" in trainables)
            ab = tape.scale(tape.matmul(a, b), adapter.alpha / adapter.rank)
            w = tape.add(w, ab)
    elif isinstance(adapter, TaskVector):
        if lid in adapter.deltas:
            name = f"{lid}.delta"
            w = tape.add(w, tape.param(name, adapter.deltas[lid], name in trainables))
    else:
        raise InputError(f"unsupported adapter type {type(adapter).__name__}")
    return w


def forward(model: Model, tokens: np.ndarray, tape: GradientTape, adapter=None, trainables=(), masked=True):
    """Logits for ``tokens`` (batch x seq) and a list of per-stage checkpoints."""
    cfg = model.config
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[1] > cfg.seq_len:
        raise DimensionError(f"tokens must be (batch, <= {cfg.seq_len}), got {tokens.shape}")
    trainables = set(trainables)
    bsz, t = tokens.shape
    d = cfg.hidden_dim
    checkpoints = []

    def weight(lid):
        return _layer_weight(tape, model, lid, adapter, trainables, masked)

    x = tape.embed(weight("embed"), weight("pos"), tokens)
    checkpoints.append(("embed", x))
    for i in range(cfg.num_layers):
        p = f"layers.{i}"
        h = tape.reshape(tape.layernorm(x), (bsz * t, d))
        qkv = tape.reshape(tape.matmul(h, weight(f"{p}.qkv")), (bsz, t, 3 * d))
        att = tape.reshape(tape.attention(qkv, cfg.num_heads), (bsz * t, d))
        x = tape.add(x, tape.reshape(tape.matmul(att, weight(f"{p}.o")), (bsz, t, d)))
        checkpoints.append((f"{p}.qkv", x))
        h = tape.reshape(tape.layernorm(x), (bsz * t, d))
        u = tape.gelu(tape.matmul(h, weight(f"{p}.mlp_up")))
        x = tape.add(x, tape.reshape(tape.matmul(u, weight(f"{p}.mlp_down")), (bsz, t, d)))
        checkpoints.append((f"{p}.mlp_down", x))
    pooled = tape.mean_pool(tape.layernorm(x))
    logits = tape.matmul(pooled, weight("head"))
    checkpoints.append(("head", logits))
    return logits, checkpoints


def _first_nonfinite(checkpoints) -> str:
    for name, var in checkpoints:
        if not np.all(np.isfinite(var.value)):
            return name
    return "loss"


def loss_and_grads(model: Model, adapter, batch, trainables=(), masked: bool = True):
    """Mean cross-entropy over ``batch = (tokens, labels)`` and a tape holding gradients.

    Only names listed in ``trainables`` receive gradients: a base layer id
    (``layers.0.qkv``), a sparse/dense delta (``layers.0.qkv.delta``) or LoRA
    factors (``layers.0.qkv.lora_A`` / ``.lora_B``). ``masked=False`` evaluates
    a sparse adapter with its full dense values, ignoring the mask.
    """
    tokens, labels = batch
    tokens = np.asarray(tokens)
    labels = np.asarray(labels)
    if tokens.shape[0] == 0:
        raise InputError("empty batch")
    if labels.shape != (tokens.shape[0],):
        raise DimensionError(f"labels {labels.shape} do not match batch of {tokens.shape[0]}")
    tape = GradientTape()
    logits, checkpoints = forward(model, tokens, tape, adapter, trainables, masked)
    loss = tape.cross_entropy(logits, labels)
    value = float(loss.value)
    if not np.isfinite(value):
        layer = _first_nonfinite(checkpoints)
        raise NumericError(f"non-finite loss (first bad activation after {layer})", layer=layer)
    missing = set(trainables) - set(tape.params)
    if missing:
        raise InputError(f"trainables not present in model/adapter: {sorted(missing)}")
    tape.backward(loss)
    return value, tape


def predict_logits(model: Model, tokens: np.ndarray, adapter=None, batch_size: int = 512) -> np.ndarray:
    out = []
    for start in range(0, len(tokens), batch_size):
        tape = GradientTape()
        logits, _ = forward(model, tokens[start : start + batch_size], tape, adapter)
        out.append(logits.value)
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes))


def batch_loss(model: Model, batch, adapter=None) -> float:
    tokens, labels = batch
    logits = predict_logits(model, np.asarray(tokens), adapter)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())
