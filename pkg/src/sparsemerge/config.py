"""Flat ``key = value`` experiment configs.

One setting per line; ``#`` starts a comment. Unknown keys are rejected. Every
key and its default::

    seed = 0                      # bundle seed (suite, base model, training order)
    out_dir = runs                # where commands write files
    workers = 1                   # processes for per-task training

    model.num_layers = 4          model.hidden_dim = 32      model.num_heads = 2
    model.vocab_size = 64         model.num_classes = 4      model.seq_len = 12
    model.mlp_ratio = 2           model.adapt_targets = QKV  (comma list of QKV, O, MLP)

    train.kr = 0.1                train.epochs = 5           train.mask_refresh_interval = 8
    train.criterion = MCS         train.block_size = 0       (0 = element-wise masks)
    train.learning_rate = 0.01    train.optimizer = adam     train.layer_drop = false
    train.batch_size = 32         train.early_stopping = true
    lora.rank = 4                 lora.learning_rate = 0.003
    full.learning_rate = 0.001

    suite.n_held_in = 8           suite.n_held_out = 4       suite.n_pretrain = 16
    suite.n_train = 1024          suite.n_val = 128          suite.n_test = 256
    suite.margin_quantile = 0.5   suite.warmup_examples = 256
    suite.pretrain_epochs = 5     suite.pretrain_lr = 0.003  suite.gate_threshold = 0.9

    merge.method = sparse-overlap merge.lambda = 0.4         merge.trim = 0.2
    merge.beta = 0.01             merge.gamma = 0.85

    sweep.n_grid = 2,4,8          sweep.trials = 10
    sweep.kr_grid = 0.01,0.05,0.1,0.5,0.8,1.0
    sweep.block_grid = 8,16,32    sweep.layer_grid = QKV;QKV,O;MLP
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .errors import InputError
from .harness import DeskConfig
from .merging import MergeSpec
from .model import ModelConfig
from .trainer import TrainConfig

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "out_dir": "runs",
    "workers": 1,
    "model.num_layers": 4,
    "model.hidden_dim": 32,
    "model.num_heads": 2,
    "model.vocab_size": 64,
    "model.num_classes": 4,
    "model.seq_len": 12,
    "model.mlp_ratio": 2,
    "model.adapt_targets": ("QKV",),
    "train.kr": 0.1,
    "train.epochs": 5,
    "train.mask_refresh_interval": 8,
    "train.criterion": "MCS",
    "train.block_size": 0,
    "train.learning_rate": 1e-2,
    "train.optimizer": "adam",
    "train.layer_drop": False,
    "train.batch_size": 32,
    "train.early_stopping": True,
    "lora.rank": 4,
    "lora.learning_rate": 3e-3,
    "full.learning_rate": 1e-3,
    "suite.n_held_in": 8,
    "suite.n_held_out": 4,
    "suite.n_pretrain": 16,
    "suite.n_train": 1024,
    "suite.n_val": 128,
    "suite.n_test": 256,
    "suite.margin_quantile": 0.5,
    "suite.warmup_examples": 256,
    "suite.pretrain_epochs": 5,
    "suite.pretrain_lr": 3e-3,
    "suite.gate_threshold": 0.9,
    "merge.method": "sparse-overlap",
    "merge.lambda": 0.4,
    "merge.trim": 0.2,
    "merge.beta": 0.01,
    "merge.gamma": 0.85,
    "sweep.n_grid": (2, 4, 8),
    "sweep.trials": 10,
    "sweep.kr_grid": (0.01, 0.05, 0.1, 0.5, 0.8, 1.0),
    "sweep.block_grid": (8, 16, 32),
    "sweep.layer_grid": (("QKV",), ("QKV", "O"), ("MLP",)),
}


class ConfigError(InputError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


def _parse_value(key: str, raw: str):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if key == "sweep.layer_grid":
            return tuple(tuple(t.strip() for t in grp.split(",") if t.strip()) for grp in raw.split(";") if grp.strip())
        if key == "model.adapt_targets":
            return tuple(t.strip() for t in raw.split(",") if t.strip())
        if isinstance(default, tuple):
            kind = type(default[0])
            return tuple(kind(t) for t in raw.split(",") if t.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}", key) from exc


def parse_config(text: str, source: str = "<config>") -> dict:
    values = dict(DEFAULTS)
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}", key)
        values[key] = _parse_value(key, raw)
    return values


def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    return parse_config(path.read_text(), str(path))


def model_config(cfg: dict) -> ModelConfig:
    fields = {f.name for f in dataclasses.fields(ModelConfig)}
    return ModelConfig(**{k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith("model.") and k[6:] in fields})


def train_config(cfg: dict, **overrides) -> TrainConfig:
    kw = {k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith("train.")}
    kw["block_size"] = kw["block_size"] or None
    kw["seed"] = cfg["seed"]
    kw.update(overrides)
    return TrainConfig(**kw)


def merge_spec(cfg: dict, **overrides) -> MergeSpec:
    kw = dict(
        method=cfg["merge.method"], lam=cfg["merge.lambda"], trim=cfg["merge.trim"], beta=cfg["merge.beta"], gamma=cfg["merge.gamma"]
    )
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return MergeSpec(**kw)


def desk_config(cfg: dict) -> DeskConfig:
    return DeskConfig(
        n_held_in=cfg["suite.n_held_in"],
        n_held_out=cfg["suite.n_held_out"],
        n_pretrain=cfg["suite.n_pretrain"],
        n_train=cfg["suite.n_train"],
        n_val=cfg["suite.n_val"],
        n_test=cfg["suite.n_test"],
        margin_quantile=cfg["suite.margin_quantile"],
        warmup_examples=cfg["suite.warmup_examples"],
        pretrain_epochs=cfg["suite.pretrain_epochs"],
        pretrain_lr=cfg["suite.pretrain_lr"],
        gate_threshold=cfg["suite.gate_threshold"],
        epochs=cfg["train.epochs"],
        refresh_interval=cfg["train.mask_refresh_interval"],
        lora_rank=cfg["lora.rank"],
        kr=cfg["train.kr"],
        model=model_config(cfg),
    )


def dump_config(cfg: dict) -> str:
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, tuple):
            if v and isinstance(v[0], tuple):
                return ";".join(",".join(g) for g in v)
            return ",".join(str(x) for x in v)
        return str(v)

    return "".join(f"{k} = {fmt(v)}\n" for k, v in cfg.items())
