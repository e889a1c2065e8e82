"""Training loops: sparse adapters with periodic mask refresh, LoRA, dense deltas.

Sparse training starts from zero values and a full mask. During the first
epoch, every ``mask_refresh_interval`` steps the dense (unmasked) gradient of
the adapter values is scored and a new top-k mask is built. From the second
epoch on the mask is frozen and only masked coordinates are updated. When
training ends, values outside the final mask are zeroed.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import InputError, NumericError, TrainingError
from .model import Adapter, LoraAdapter, Model, TaskVector, batch_loss, loss_and_grads
from .numerics import Rng, init_matrix
from .saliency import SparseMask, block_mask, keep_count, layer_drop, num_blocks, score, topk_mask
from .taskgen import Dataset, Split

SCORE_CRITERIA = ("MCS", "CS", "GM", "WM", "GD")


@dataclass(frozen=True)
class TrainConfig:
    kr: float = 0.1
    epochs: int = 5
    mask_refresh_interval: int = 100
    criterion: str = "MCS"
    block_size: int | None = None
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    layer_drop: bool = False
    seed: int = 0
    batch_size: int = 32
    early_stopping: bool = True
    gd_grow_fraction: float = 0.5

    def validate(self) -> None:
        if not 0.0 < self.kr <= 1.0:
            raise InputError(f"kr must be in (0, 1], got {self.kr}")
        if self.epochs < 0 or self.batch_size <= 0 or self.mask_refresh_interval <= 0:
            raise InputError("epochs must be >= 0, batch_size and mask_refresh_interval > 0")
        if self.criterion not in SCORE_CRITERIA:
            raise InputError(f"unknown criterion {self.criterion!r}; expected one of {SCORE_CRITERIA}")
        if self.optimizer not in ("adam", "sgd"):
            raise InputError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate <= 0:
            raise InputError("learning_rate must be positive")
        if self.block_size is not None and self.block_size <= 0:
            raise InputError("block_size must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class Optimizer:
    """Adam (beta 0.9/0.999, eps 1e-8) or plain SGD, with optional per-coordinate masks.

    Masked coordinates are the only ones whose parameters and moment
    estimates change; the others keep their moments across mask refreshes.
    """

    def __init__(self, kind: str = "adam", lr: float = 1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.kind, self.lr, self.beta1, self.beta2, self.eps = kind, lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict, masks: dict | None = None) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            mask = None if masks is None else masks.get(name)
            if self.kind == "sgd":
                if mask is None:
                    p -= self.lr * g
                else:
                    p[mask] -= self.lr * g[mask]
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            if mask is None:
                kernels.dense_adam(p, g, self.m[name], self.v[name], self.lr, self.beta1, self.beta2, self.eps, bc1, bc2)
            else:
                kernels.masked_adam(
                    p, g, self.m[name], self.v[name], mask, self.lr, self.beta1, self.beta2, self.eps, bc1, bc2
                )


@dataclass
class StepRecord:
    """What one optimizer step did; handed to the ``on_step`` hook."""

    epoch: int
    step: int
    loss: float
    before: dict[str, np.ndarray]
    after: dict[str, np.ndarray]
    masks: dict[str, np.ndarray]


def iter_batches(split: Split, batch_size: int, rng: Rng):
    order = rng.permutation(len(split))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield split.x[idx], split.y[idx]


def _concat(splits: Sequence[Split]) -> Split:
    return Split(np.concatenate([s.x for s in splits]), np.concatenate([s.y for s in splits]))


def _fit(
    model: Model,
    adapter,
    params: dict[str, np.ndarray],
    train: Split,
    val: Split,
    config: TrainConfig,
    masks: Callable[[], dict | None] = lambda: None,
    on_refresh: Callable | None = None,
    on_step: Callable[[StepRecord], None] | None = None,
    stream: str = "fit",
):
    """Shared epoch loop. Updates ``params`` in place; returns (train_loss, val_loss, history)."""
    opt = Optimizer(config.optimizer, config.learning_rate)
    best_val = batch_loss(model, (val.x, val.y), adapter)
    history = [{"epoch": 0, "train_loss": float("nan"), "val_loss": best_val}]
    best = {k: v.copy() for k, v in params.items()}
    last_train = float("nan")
    gstep = 0
    for epoch in range(1, config.epochs + 1):
        rng = Rng(config.seed, stream, "epoch", epoch)
        losses = []
        for step, batch in enumerate(iter_batches(train, config.batch_size, rng), start=1):
            gstep += 1
            try:
                loss, tape = loss_and_grads(model, adapter, batch, params.keys())
            except NumericError as exc:
                raise TrainingError(f"loss diverged at step {gstep} ({exc})", step=gstep) from exc
            current = masks()
            before = {k: v.copy() for k, v in params.items()} if on_step else None
            opt.step(params, tape.grads, current)
            if not all(np.all(np.isfinite(p)) for p in params.values()):
                raise TrainingError(f"non-finite parameters after step {gstep}", step=gstep)
            if on_step:
                on_step(StepRecord(epoch, step, loss, before, {k: v.copy() for k, v in params.items()}, current or {}))
            losses.append(loss)
            if on_refresh is not None and epoch == 1 and step % config.mask_refresh_interval == 0:
                on_refresh(batch)
        last_train = float(np.mean(losses)) if losses else float("nan")
        val_loss = batch_loss(model, (val.x, val.y), adapter)
        history.append({"epoch": epoch, "train_loss": last_train, "val_loss": val_loss})
        if not np.isfinite(val_loss):
            raise TrainingError(f"validation loss diverged after epoch {epoch}", step=gstep)
        # the mask is final after epoch 1, so any snapshot from here on shares it
        if val_loss < best_val or epoch == 1:
            best_val = val_loss
            best = {k: v.copy() for k, v in params.items()}
        elif config.early_stopping:
            break
    if config.early_stopping and config.epochs > 0:
        for k, v in best.items():
            np.copyto(params[k], v)
    else:
        best_val = history[-1]["val_loss"]
    return last_train, best_val, history


def _refresh_masks(model, adapter: Adapter, batch, config: TrainConfig, active: set, dense_masks: dict):
    """Rescore every active layer from the dense gradient and rebuild its mask."""
    names = [f"{lid}.delta" for lid in adapter.values]
    _, tape = loss_and_grads(model, adapter, batch, names, masked=False)
    fields = {}
    for lid, values in adapter.values.items():
        g = tape.grads[f"{lid}.delta"]
        if config.criterion == "GD":
            fields[lid] = (score("GD-drop", values, g, np.zeros_like(values)), score("GD-grow", values, g))
        else:
            fields[lid] = score(config.criterion, values, g)
    if config.layer_drop:
        main = {lid: (f[1] if isinstance(f, tuple) else f) for lid, f in fields.items() if lid in active}
        survivors = layer_drop(main, config.kr)
        for lid in list(active):
            if lid not in survivors:
                active.discard(lid)
                adapter.set_mask(lid, SparseMask.empty(adapter.values[lid].shape))
    for lid in adapter.values:
        if lid not in active:
            dense_masks[lid] = np.zeros(adapter.values[lid].shape, dtype=bool)
            continue
        f = fields[lid]
        if isinstance(f, tuple):
            mask = _grow_drop_mask(f[0].values, f[1].values, adapter.masks[lid], config)
        elif config.block_size:
            mask = block_mask(f, config.kr, config.block_size)
        else:
            mask = topk_mask(f, config.kr)
        adapter.set_mask(lid, mask)
        dense_masks[lid] = mask.to_dense()


def _grow_drop_mask(drop_scores, grow_scores, current: SparseMask, config: TrainConfig) -> SparseMask:
    """Keep the largest-drift coordinates of the current mask, then grow by gradient magnitude."""
    shape = drop_scores.shape
    b = config.block_size
    if b:
        drop_scores = kernels.block_sums(np.ascontiguousarray(drop_scores), b)
        grow_scores = kernels.block_sums(np.ascontiguousarray(grow_scores), b)
        eligible = np.zeros(drop_scores.size, dtype=bool)
        if current.kind == "block" and current.block_size == b:
            eligible[current.indices] = True
        else:
            eligible |= kernels.block_sums(current.to_dense().astype(np.float64), b).ravel() > 0
        k = num_blocks(config.kr, shape[0], shape[1], b)
        if k < 1:
            raise InputError(f"kr={config.kr} leaves no {b}x{b} block in {shape}")
    else:
        eligible = current.to_dense().ravel()
        k = keep_count(config.kr, drop_scores.size)
    n_grow = int(math.floor(k * config.gd_grow_fraction))
    n_keep = min(k - n_grow, int(eligible.sum()))
    flat_drop = np.where(eligible, drop_scores.ravel(), -np.inf)
    kept = kernels.topk_indices(flat_drop, n_keep) if n_keep else np.zeros(0, dtype=np.int64)
    taken = np.zeros(drop_scores.size, dtype=bool)
    taken[kept] = True
    flat_grow = np.where(taken, -np.inf, grow_scores.ravel())
    grown = kernels.topk_indices(flat_grow, k - n_keep)
    idx = np.union1d(kept, grown)
    if b:
        return SparseMask(shape, "block", idx, b)
    return SparseMask(shape, "element", idx)


def train_sparse(
    model: Model,
    task: Dataset,
    config: TrainConfig,
    layers: Sequence[str] | None = None,
    on_step: Callable[[StepRecord], None] | None = None,
) -> Adapter:
    """Sparse adapter training with periodic mask refresh during the first epoch."""
    config.validate()
    layers = list(layers) if layers is not None else model.adapted_layers()
    if not layers:
        raise InputError("no layers to adapt")
    values = {lid: np.zeros(model.weights[lid].shape) for lid in layers}
    adapter = Adapter(values, {lid: SparseMask.full(values[lid].shape) for lid in layers}, task_id=task.task_id)
    dense_masks = {lid: np.ones(values[lid].shape, dtype=bool) for lid in layers}
    active = set(layers)
    params = {f"{lid}.delta": values[lid] for lid in layers}

    def refresh(batch):
        _refresh_masks(model, adapter, batch, config, active, dense_masks)
        refresh.count += 1

    refresh.count = 0
    train_loss, val_loss, history = _fit(
        model,
        adapter,
        params,
        task.train,
        task.val,
        config,
        masks=lambda: {f"{lid}.delta": dense_masks[lid] for lid in layers},
        on_refresh=refresh,
        on_step=on_step,
        stream=f"sparse/{task.task_id}",
    )
    for lid in layers:
        values[lid][~dense_masks[lid]] = 0.0
    adapter.config = config.to_dict()
    adapter.train_loss, adapter.val_loss = train_loss, val_loss
    adapter.meta = {"history": history, "refreshes": refresh.count, "active_layers": sorted(active)}
    return adapter


def train_lora(
    model: Model,
    task: Dataset,
    rank: int,
    config: TrainConfig,
    alpha: float | None = None,
    layers: Sequence[str] | None = None,
) -> LoraAdapter:
    config.validate()
    if rank <= 0:
        raise InputError(f"LoRA rank must be positive, got {rank}")
    layers = list(layers) if layers is not None else model.adapted_layers()
    alpha = 2.0 * rank if alpha is None else alpha
    init = Rng(config.seed, "lora-init", task.task_id)
    a = {lid: init_matrix(init.child(lid), model.weights[lid].shape[0], rank) for lid in layers}
    b = {lid: np.zeros((rank, model.weights[lid].shape[1])) for lid in layers}
    lora = LoraAdapter(a, b, rank, alpha, task_id=task.task_id)
    params = {}
    for lid in layers:
        params[f"{lid}.lora_A"] = a[lid]
        params[f"{lid}.lora_B"] = b[lid]
    tl, vl, history = _fit(model, lora, params, task.train, task.val, config, stream=f"lora/{task.task_id}")
    lora.config = config.to_dict()
    lora.train_loss, lora.val_loss = tl, vl
    lora.meta = {"history": history}
    return lora


def _train_dense(model: Model, train: Split, val: Split, config: TrainConfig, layers, task_id: str) -> TaskVector:
    config.validate()
    layers = list(layers) if layers is not None else model.block_layers()
    tv = TaskVector({lid: np.zeros(model.weights[lid].shape) for lid in layers}, task_id=task_id)
    params = {f"{lid}.delta": tv.deltas[lid] for lid in layers}
    tl, vl, history = _fit(model, tv, params, train, val, config, stream=f"dense/{task_id}")
    tv.config = config.to_dict()
    tv.train_loss, tv.val_loss = tl, vl
    tv.meta = {"history": history}
    return tv


def train_full(model: Model, task: Dataset, config: TrainConfig, layers: Sequence[str] | None = None) -> TaskVector:
    """Dense fine-tuning of every block matrix; returns W_finetuned - W.

    The delta itself is the trained parameter, so ``W + delta`` is exactly the
    fine-tuned weight.
    """
    return _train_dense(model, task.train, task.val, config, layers, task.task_id)


def train_multitask(
    model: Model, tasks: Sequence[Dataset], config: TrainConfig, layers: Sequence[str] | None = None
) -> TaskVector:
    if not tasks:
        raise InputError("multitask training needs at least one task")
    train = _concat([t.train for t in tasks])
    val = _concat([t.val for t in tasks])
    return _train_dense(model, train, val, config, layers, "multitask")


def recycle_finetune(
    model: Model,
    merged,
    tasks: Sequence[Dataset],
    mode: str,
    epochs: int,
    config: TrainConfig,
):
    """Second-stage multitask training that starts from a merged expert.

    ``sparse-only`` keeps training the merged adapter's values on its union mask
    and returns an :class:`Adapter`. ``full`` folds the merged delta into the
    base and trains every block matrix, returning a :class:`TaskVector` measured
    from the original base.
    """
    if not tasks:
        raise InputError("recycling needs at least one task")
    cfg = dataclasses.replace(config, epochs=epochs)
    train = _concat([t.train for t in tasks])
    val = _concat([t.val for t in tasks])
    if mode == "sparse-only":
        if not isinstance(merged, Adapter):
            raise InputError("sparse-only recycling needs a sparse Adapter, got a dense delta")
        adapter = Adapter(
            {lid: v.copy() for lid, v in merged.values.items()}, dict(merged.masks), task_id="recycled"
        )
        dense = {f"{lid}.delta": adapter.masks[lid].to_dense() for lid in adapter.values}
        params = {f"{lid}.delta": adapter.values[lid] for lid in adapter.values}
        tl, vl, _ = _fit(model, adapter, params, train, val, cfg, masks=lambda: dense, stream="recycle-sparse")
        adapter.train_loss, adapter.val_loss = tl, vl
        adapter.config = cfg.to_dict()
        return adapter
    if mode == "full":
        deltas = merged.deltas if isinstance(merged, TaskVector) else merged.deltas()
        folded = model.with_deltas(deltas)
        tv = _train_dense(folded, train, val, cfg, None, "recycled")
        out = {}
        for lid, d in tv.deltas.items():
            out[lid] = deltas[lid] + d if lid in deltas else d
        return TaskVector(out, task_id="recycled", config=cfg.to_dict(), train_loss=tv.train_loss, val_loss=tv.val_loss)
    raise InputError(f"unknown recycling mode {mode!r}; expected 'sparse-only' or 'full'")


def pretrain(model: Model, tasks: Sequence[Dataset], config: TrainConfig) -> Model:
    """Train every weight (embeddings and head included) on ``tasks`` and freeze the result."""
    if not tasks:
        raise InputError("pretraining needs at least one task")
    train = _concat([t.train for t in tasks])
    val = _concat([t.val for t in tasks])
    tv = _train_dense(model, train, val, config, list(model.weights), "pretrain")
    weights = {lid: model.weights[lid] + tv.deltas[lid] for lid in model.weights}
    for w in weights.values():
        w.flags.writeable = False
    return Model(model.config, weights)
