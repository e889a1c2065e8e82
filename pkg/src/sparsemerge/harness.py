"""Experiment orchestration: evaluation, interference decomposition, sweeps and reports."""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import InputError
from .merging import MergeSpec, merge
from .model import Adapter, LoraAdapter, Model, ModelConfig, TaskVector, build_model, predict_logits
from .numerics import Rng
from .taskgen import Dataset, Split, build_suite, pretraining_suite
from .trainer import TrainConfig, pretrain, train_full, train_lora, train_multitask, train_sparse

KR_GRID = (0.01, 0.05, 0.1, 0.5, 0.8, 1.0)
N_GRID = (2, 4, 8)
BLOCK_GRID = (8, 16, 32)
LAYER_GRID = (("QKV",), ("QKV", "O"), ("MLP",))


@dataclass
class EvalResult:
    task_id: str
    value: float
    metric: str = "accuracy"
    method: str = ""
    kr: float | None = None
    rank: int | None = None
    merge: str = ""
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise InputError(f"accuracy must be in [0, 1], got {self.value}")


@dataclass
class SweepReport:
    """Per-point summaries of a sweep. ``points`` are sorted on ``x``."""

    axis: str
    points: list[dict]
    trials: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.trials < 1:
            raise InputError("a sweep needs at least one trial")
        self.points = sorted(self.points, key=lambda p: _sort_key(p["x"]))

    def means(self) -> list[float]:
        return [p["mean"] for p in self.points]

    def to_dict(self) -> dict:
        return {"axis": self.axis, "trials": self.trials, "points": self.points, "meta": self.meta}


def _sort_key(x):
    return (0, x, "") if isinstance(x, (int, float)) else (1, 0, str(x))


def _summary(x, values: Sequence[float]) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {
        "x": x,
        "mean": float(v.mean()),
        "std": float(v.std()),
        "min": float(v.min()),
        "max": float(v.max()),
        "n": int(v.size),
        "values": [float(a) for a in v],
    }


# -- evaluation ------------------------------------------------------------------


def accuracy(model: Model, delta, split: Split) -> float:
    if len(split) == 0:
        raise InputError("cannot evaluate on an empty split")
    logits = predict_logits(model, split.x, delta)
    return float(np.mean(logits.argmax(axis=1) == split.y))


def evaluate(model: Model, delta, dataset: Dataset, method: str = "", seed: int = 0, merge_name: str = "") -> EvalResult:
    """Test accuracy of ``model`` with ``delta`` (Adapter, LoraAdapter, TaskVector or None) attached."""
    kr = rank = None
    if isinstance(delta, Adapter) and delta.config:
        kr = delta.config.get("kr")
    if isinstance(delta, LoraAdapter):
        rank = delta.rank
    return EvalResult(
        dataset.task_id, accuracy(model, delta, dataset.test), method=method, kr=kr, rank=rank, merge=merge_name, seed=seed
    )


def mean_accuracy(model: Model, delta, tasks: Sequence[Dataset]) -> float:
    return float(np.mean([accuracy(model, delta, t.test) for t in tasks]))


def interference_decomposition(model: Model, merged: Adapter, adapters: Sequence[Adapter], tasks: Sequence[Dataset]):
    """Per task: (single, masked-only, full-merged) accuracy.

    ``masked-only`` evaluates the merged values restricted to the task's own mask,
    so only interference inside that mask remains.
    """
    if len(adapters) != len(tasks) or not adapters:
        raise InputError(f"{len(adapters)} adapters for {len(tasks)} tasks")
    rows = []
    for ad, task in zip(adapters, tasks):
        if ad.task_id and ad.task_id != task.task_id:
            raise InputError(f"adapter {ad.task_id!r} paired with task {task.task_id!r}")
        if set(ad.layers) != set(merged.layers):
            raise InputError(f"adapter {ad.task_id!r} and merged adapter cover different layers")
        single = accuracy(model, ad, task.test)
        masked = accuracy(model, merged.restricted(ad.masks), task.test)
        full = accuracy(model, merged, task.test)
        rows.append(
            {
                "task_id": task.task_id,
                "single": single,
                "masked_only": masked,
                "full_merged": full,
                "masked_gap": single - masked,
                "unmasked_gap": masked - full,
                "total_gap": single - full,
            }
        )
    return rows


def scaling_sweep(
    model: Model,
    experts: Mapping[str, Sequence],
    tasks: Sequence[Dataset],
    specs: Mapping[str, MergeSpec],
    n_values: Sequence[int] = N_GRID,
    trials: int = 10,
    seed: int = 0,
) -> dict[str, SweepReport]:
    """Mean accuracy of merging N randomly drawn experts, evaluated on those N tasks.

    ``experts[name][i]`` is the expert for ``tasks[i]``; every merge method sees
    the same draws for a given (N, trial).
    """
    if not n_values:
        raise InputError("empty N grid")
    for name, lst in experts.items():
        if len(lst) != len(tasks):
            raise InputError(f"{name}: {len(lst)} experts for {len(tasks)} tasks")
    too_big = [n for n in n_values if n > len(tasks) or n < 1]
    if too_big:
        raise InputError(f"N values {too_big} exceed the {len(tasks)} available experts")
    scores = {name: {n: [] for n in n_values} for name in experts}
    for n in n_values:
        for trial in range(trials):
            pick = np.sort(Rng(seed, "scaling", n, trial).choice(len(tasks), n, replace=False))
            chosen = [tasks[i] for i in pick]
            for name, lst in experts.items():
                merged = merge([lst[i] for i in pick], specs[name])
                scores[name][n].append(mean_accuracy(model, merged, chosen))
    return {
        name: SweepReport("experts", [_summary(n, v) for n, v in per.items()], trials, {"method": name})
        for name, per in scores.items()
    }


def train_sweep(
    axis: str,
    values: Sequence,
    model: Model,
    tasks: Sequence[Dataset],
    config: TrainConfig,
    spec: MergeSpec | None = None,
) -> dict[str, SweepReport]:
    """Train one sparse adapter per task at each grid point; report single-task and merged accuracy.

    ``axis`` is ``kr``, ``block-size`` or ``layers`` (a tuple of targets per point).
    """
    if not values:
        raise InputError(f"empty {axis} grid")
    if axis not in ("kr", "block-size", "layers"):
        raise InputError(f"unknown sweep axis {axis!r}")
    spec = spec or MergeSpec("sparse-overlap")
    single, merged = [], []
    for v in values:
        cfg, layers = config, None
        if axis == "kr":
            cfg = dataclasses.replace(config, kr=float(v))
        elif axis == "block-size":
            cfg = dataclasses.replace(config, block_size=int(v))
        else:
            layers = model.adapted_layers(tuple(v))
        adapters = [train_sparse(model, t, cfg, layers) for t in tasks]
        single.append(_summary(_axis_value(v), [accuracy(model, a, t.test) for a, t in zip(adapters, tasks)]))
        m = merge(adapters, spec)
        merged.append(_summary(_axis_value(v), [accuracy(model, m, t.test) for t in tasks]))
    return {
        "single": SweepReport(axis, single, len(tasks), {"what": "single-task"}),
        "merged": SweepReport(axis, merged, len(tasks), {"what": "merged", "merge": spec.to_dict()}),
    }


def kr_sweep(model, tasks, config: TrainConfig, kr_values: Sequence[float] = KR_GRID, spec=None):
    return train_sweep("kr", kr_values, model, tasks, config, spec)


def _axis_value(v):
    return "+".join(v) if isinstance(v, (tuple, list)) else v


# -- output ------------------------------------------------------------------------


def write_results_csv(results: Sequence[EvalResult], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = [f.name for f in dataclasses.fields(EvalResult)]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=names)
        w.writeheader()
        for r in results:
            w.writerow(dataclasses.asdict(r))


def write_json(obj, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = obj.to_dict() if hasattr(obj, "to_dict") else obj
    if isinstance(data, dict):
        data = {k: (v.to_dict() if hasattr(v, "to_dict") else v) for k, v in data.items()}
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=float) + "\n")


# -- desk-scale experiment bundle -------------------------------------------------------


@dataclass(frozen=True)
class DeskConfig:
    """Sizes and budgets for one seed bundle of the desk-scale replication."""

    n_held_in: int = 8
    n_held_out: int = 4
    n_pretrain: int = 16
    n_train: int = 1024
    n_val: int = 128
    n_test: int = 256
    margin_quantile: float = 0.5
    warmup_examples: int = 256
    pretrain_epochs: int = 5
    pretrain_lr: float = 3e-3
    gate_threshold: float = 0.9
    gate_lr: float = 3e-3
    gate_attempts: int = 3
    epochs: int = 5
    refresh_interval: int = 8
    lora_rank: int = 4
    kr: float = 0.1
    model: ModelConfig = ModelConfig()
    learning_rates: tuple = (
        ("sparse-0.1", 1e-2),
        ("sparse-0.5", 3e-3),
        ("sparse-1.0", 3e-3),
        ("full", 1e-3),
        ("lora", 3e-3),
    )

    def lr(self, method: str) -> float:
        return dict(self.learning_rates)[method]

    def train_config(self, method: str, seed: int, **kw) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            mask_refresh_interval=self.refresh_interval,
            learning_rate=self.lr(method),
            seed=seed,
            **kw,
        )


DESK_MERGES = {
    "sparse-overlap": MergeSpec("sparse-overlap"),
    "uniform": MergeSpec("uniform"),
    "lora-average": MergeSpec("lora-average"),
    "task-arithmetic": MergeSpec("task-arithmetic", lam=0.4),
    "ties": MergeSpec("ties", lam=1.0, trim=0.2),
    "breadcrumbs": MergeSpec("breadcrumbs", lam=0.4, beta=0.01, gamma=0.85),
}


def learnability_gate(desk: DeskConfig, seed: int):
    """``gate(dataset)``: dense fine-tuning from a fresh base must clear ``desk.gate_threshold``."""
    fresh = build_model(desk.model, Rng(seed, "gate-base"))
    cfg = TrainConfig(epochs=desk.epochs, learning_rate=desk.gate_lr, seed=seed)

    def gate(ds: Dataset) -> bool:
        acc = accuracy(fresh, train_full(fresh, ds, cfg), ds.test)
        ds.meta["gate_accuracy"] = acc
        return acc > desk.gate_threshold

    return gate


def prepare_bundle(desk: DeskConfig, seed: int):
    """Suite plus a base model pretrained on extra tasks of the same families.

    The pretraining mix also holds the first ``warmup_examples`` training rows of
    every held-in task, so the base starts partly competent on them.
    """
    kw = dict(n_train=desk.n_train, n_val=desk.n_val, n_test=desk.n_test, margin_quantile=desk.margin_quantile)
    gate = learnability_gate(desk, seed) if desk.gate_threshold > 0 else None
    held_in, held_out = build_suite(desk.n_held_in, desk.n_held_out, seed=seed, gate=gate, max_attempts=desk.gate_attempts, **kw)
    base = build_model(desk.model, Rng(seed, "base"))
    mix = []
    if desk.n_pretrain:
        mix += pretraining_suite(held_in, desk.n_pretrain, desk.n_held_out, seed=seed, **kw)
    if desk.warmup_examples:
        w = desk.warmup_examples
        mix += [Dataset(t.spec, Split(t.train.x[:w], t.train.y[:w]), t.val, t.test) for t in held_in]
    if mix:
        cfg = TrainConfig(epochs=desk.pretrain_epochs, learning_rate=desk.pretrain_lr, seed=seed)
        base = pretrain(base, mix, cfg)
    return base, held_in, held_out


def _train_method(method: str, base: Model, task: Dataset, desk: DeskConfig, seed: int):
    if method.startswith("sparse-"):
        kr = float(method.split("-", 1)[1])
        return train_sparse(base, task, desk.train_config(method, seed, kr=kr))
    if method == "full":
        return train_full(base, task, desk.train_config(method, seed))
    if method == "lora":
        return train_lora(base, task, desk.lora_rank, desk.train_config(method, seed))
    raise InputError(f"unknown training method {method!r}")


def calibrate_learning_rates(
    desk: DeskConfig,
    seed: int,
    grid: Sequence[float] = (3e-3, 1e-2, 3e-2),
    methods: Sequence[str] | None = None,
    n_tasks: int = 4,
) -> DeskConfig:
    """Pick each method's learning rate by mean validation loss on a calibration bundle."""
    methods = methods or [m for m, _ in desk.learning_rates]
    base, held_in, _ = prepare_bundle(desk, seed)
    chosen = dict(desk.learning_rates)
    for method in methods:
        losses = {}
        for lr in grid:
            trial = dataclasses.replace(desk, learning_rates=tuple({**chosen, method: lr}.items()))
            losses[lr] = float(np.mean([_train_method(method, base, t, trial, seed).val_loss for t in held_in[:n_tasks]]))
        chosen[method] = min(grid, key=lambda lr: (losses[lr], lr))
    return dataclasses.replace(desk, learning_rates=tuple(chosen.items()))


def run_bundle(desk: DeskConfig, seed: int, n_values: Sequence[int] = N_GRID, trials: int = 10, log: Callable | None = None):
    """Train every expert family on one suite, merge them, and collect all desk metrics."""
    t0 = time.perf_counter()
    base, held_in, held_out = prepare_bundle(desk, seed)
    experts = {}
    for method in ("sparse-0.1", "sparse-0.5", "sparse-1.0", "full", "lora"):
        experts[method] = [_train_method(method, base, t, desk, seed) for t in held_in]
    multitask = train_multitask(base, held_in, desk.train_config("full", seed))

    single = {m: [accuracy(base, e, t.test) for e, t in zip(lst, held_in)] for m, lst in experts.items()}
    sources = {
        "sparse-overlap": experts[f"sparse-{desk.kr:g}"],
        "lora-average": experts["lora"],
        "uniform": experts["full"],
        "task-arithmetic": experts["full"],
        "ties": experts["full"],
        "breadcrumbs": experts["full"],
    }
    merged = {name: merge(src, DESK_MERGES[name]) for name, src in sources.items()}
    held_in_acc = {name: mean_accuracy(base, m, held_in) for name, m in merged.items()}
    held_out_acc = {name: mean_accuracy(base, m, held_out) for name, m in merged.items()}
    held_in_acc["multitask"] = mean_accuracy(base, multitask, held_in)
    held_out_acc["multitask"] = mean_accuracy(base, multitask, held_out)
    decomposition = interference_decomposition(base, merged["sparse-overlap"], sources["sparse-overlap"], held_in)
    scaling = scaling_sweep(
        base,
        {"sparse-overlap": sources["sparse-overlap"], "uniform": experts["full"]},
        held_in,
        DESK_MERGES,
        n_values=n_values,
        trials=trials,
        seed=seed,
    )
    out = {
        "seed": seed,
        "single": {m: float(np.mean(v)) for m, v in single.items()},
        "single_per_task": single,
        "held_in": held_in_acc,
        "held_out": held_out_acc,
        "decomposition": decomposition,
        "scaling": {k: v.to_dict() for k, v in scaling.items()},
        "seconds": time.perf_counter() - t0,
    }
    if log:
        log(out)
    return out
