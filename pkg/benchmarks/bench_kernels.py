"""Time each hot kernel in its numba and numpy flavours.

    python3 benchmarks/bench_kernels.py [--repeat 50] [--train]

``--train`` also times a short sparse training run in a subprocess per backend,
selected with ``SPARSEMERGE_NUMBA``.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from sparsemerge import kernels


def cases(r):
    d = 32
    flat = r.normal(size=d * 3 * d)
    scores = np.abs(r.normal(size=(d, 3 * d)))
    shape = (d, 3 * d)
    p, g = r.normal(size=shape), r.normal(size=shape)
    mask = r.random(shape) < 0.1
    deltas = r.normal(size=(8, d * 3 * d))
    masks = r.random(deltas.shape) < 0.1
    deltas = np.where(masks, deltas, 0.0)
    trimmed = np.where(r.random(deltas.shape) < 0.2, r.normal(size=deltas.shape), 0.0)
    x = r.normal(size=(32, 12, d))
    qkv = r.normal(size=(32, 12, 3 * d))
    up = r.normal(size=(32 * 12, 2 * d))
    _, p_att = kernels.np_attention_fwd(qkv, 2)
    y, inv = kernels.np_layernorm_fwd(x, 1e-5)
    _, th = kernels.np_gelu_fwd(up)
    adam = lambda fn: lambda: fn(p.copy(), g, np.zeros(shape), np.zeros(shape), mask, 1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001)
    dadam = lambda fn: lambda: fn(p.copy(), g, np.zeros(shape), np.zeros(shape), 1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001)
    return {
        "topk (3072, k=307)": lambda fl: lambda: fl("topk_indices")(flat, 307),
        "block_sums (32x96, B=8)": lambda fl: lambda: fl("block_sums")(scores, 8),
        "masked_adam (32x96)": lambda fl: adam(fl("masked_adam")),
        "dense_adam (32x96)": lambda fl: dadam(fl("dense_adam")),
        "overlap_average (8 x 3072)": lambda fl: lambda: fl("overlap_average")(deltas, masks),
        "sign_elect_mean (8 x 3072)": lambda fl: lambda: fl("sign_elect_mean")(trimmed),
        "gelu fwd (384x64)": lambda fl: lambda: fl("gelu_fwd")(up),
        "gelu bwd (384x64)": lambda fl: lambda: fl("gelu_bwd")(up, up, th),
        "layernorm fwd (32x12x32)": lambda fl: lambda: fl("layernorm_fwd")(x, 1e-5),
        "layernorm bwd (32x12x32)": lambda fl: lambda: fl("layernorm_bwd")(x, y, inv),
        "attention fwd (32x12x96)": lambda fl: lambda: fl("attention_fwd")(qkv, 2),
        "attention bwd (32x12x96)": lambda fl: lambda: fl("attention_bwd")(x, qkv, p_att, 2),
    }


def flavour(prefix):
    return lambda name: getattr(kernels, f"{prefix}_{name}")


def best_ms(fn, repeat):
    fn()  # warm-up (and JIT compile)
    return 1e3 * min(timeit.repeat(fn, number=1, repeat=repeat))


TRAIN_SCRIPT = """
import time
from sparsemerge import *
from sparsemerge.model import ModelConfig, build_model
from sparsemerge.taskgen import TaskSpec, generate_task
m = build_model(ModelConfig(), Rng(0))
t = generate_task(TaskSpec("t", n_train=512, n_val=64, n_test=64))
cfg = TrainConfig(epochs=1, mask_refresh_interval=8, learning_rate=1e-2)
train_sparse(m, t, cfg)  # warm-up
t0 = time.perf_counter()
train_sparse(m, t, TrainConfig(epochs=2, mask_refresh_interval=8, learning_rate=1e-2))
print(time.perf_counter() - t0)
"""


def train_seconds(flag):
    env = dict(os.environ, SPARSEMERGE_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", TRAIN_SCRIPT], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--train", action="store_true", help="also time sparse training under each backend")
    args = ap.parse_args(argv)
    r = np.random.default_rng(0)
    print(f"{'kernel':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, make in cases(r).items():
        t_np = best_ms(make(flavour("np")), args.repeat)
        t_nb = best_ms(make(flavour("nb")), args.repeat)
        print(f"{name:32s} {t_np:10.3f} {t_nb:10.3f} {t_np / t_nb:8.2f}")
    if args.train:
        a, b = train_seconds("0"), train_seconds("1")
        print(f"{'train_sparse, 2 epochs x 512':32s} {a * 1e3:10.0f} {b * 1e3:10.0f} {a / b:8.2f}")


if __name__ == "__main__":
    main()
