"""The numba and numpy kernel flavours must agree: bitwise for selection, optimizer
and merge kernels, to rounding for the layer kernels."""

import os
import subprocess
import sys
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sparsemerge import kernels

seeds = st.integers(0, 2**32 - 1)


def bits(a):
    return np.asarray(a).view(np.uint64)


@given(seeds, st.integers(1, 200), st.booleans())
def test_topk_parity(seed, n, ties):
    r = np.random.default_rng(seed)
    flat = r.integers(0, 4, size=n).astype(float) if ties else r.normal(size=n)
    k = int(r.integers(1, n + 1))
    a, b = kernels.np_topk_indices(flat, k), kernels.nb_topk_indices(flat, k)
    assert np.array_equal(a, b)
    # full-sort oracle: ties go to the lower index
    oracle = sorted(sorted(range(n), key=lambda i: (-flat[i], i))[:k])
    assert a.tolist() == oracle


@given(seeds, st.sampled_from([1, 2, 4]), st.integers(1, 4), st.integers(1, 4))
def test_block_sums_parity(seed, block, nbr, nbc):
    s = np.random.default_rng(seed).normal(size=(nbr * block, nbc * block))
    a, b = kernels.np_block_sums(s, block), kernels.nb_block_sums(s, block)
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-13)
    for i in range(nbr):
        for j in range(nbc):
            assert a[i, j] == pytest.approx(s[i * block : (i + 1) * block, j * block : (j + 1) * block].sum(), abs=1e-12)


@given(seeds, st.integers(1, 6))
def test_adam_parity(seed, steps):
    r = np.random.default_rng(seed)
    shape = (5, 7)
    p1, m1, v1 = r.normal(size=shape), np.zeros(shape), np.zeros(shape)
    p2, m2, v2 = p1.copy(), m1.copy(), v1.copy()
    p3, m3, v3 = p1.copy(), m1.copy(), v1.copy()
    p4, m4, v4 = p1.copy(), m1.copy(), v1.copy()
    mask = r.random(shape) < 0.4
    for t in range(1, steps + 1):
        g = r.normal(size=shape)
        bc1, bc2 = 1 - 0.9**t, 1 - 0.999**t
        kernels.np_masked_adam(p1, g, m1, v1, mask, 1e-2, 0.9, 0.999, 1e-8, bc1, bc2)
        kernels.nb_masked_adam(p2, g, m2, v2, mask, 1e-2, 0.9, 0.999, 1e-8, bc1, bc2)
        kernels.np_dense_adam(p3, g, m3, v3, 1e-2, 0.9, 0.999, 1e-8, bc1, bc2)
        kernels.nb_dense_adam(p4, g, m4, v4, 1e-2, 0.9, 0.999, 1e-8, bc1, bc2)
    for a, b in ((p1, p2), (m1, m2), (v1, v2), (p3, p4), (m3, m4), (v3, v4)):
        assert np.array_equal(bits(a), bits(b))


def test_masked_adam_leaves_unmasked_untouched():
    p, m, v = np.ones((3, 3)), np.full((3, 3), 0.5), np.full((3, 3), 0.25)
    mask = np.eye(3, dtype=bool)
    kernels.masked_adam(p, np.ones((3, 3)), m, v, mask, 0.1, 0.9, 0.999, 1e-8, 0.1, 0.001)
    assert np.all(p[~mask] == 1.0) and np.all(m[~mask] == 0.5) and np.all(v[~mask] == 0.25)
    assert np.all(p[mask] < 1.0)


def exact_average(deltas, masks):
    out = np.zeros(deltas.shape[1])
    for j in range(deltas.shape[1]):
        count = max(int(masks[:, j].sum()), 1)
        out[j] = float(sum((Fraction(float(x)) for x in deltas[:, j]), Fraction(0)) / count)
    return out


@given(seeds, st.integers(1, 6), st.integers(1, 40), st.booleans())
def test_overlap_average_parity_and_rounding(seed, n, width, wide):
    r = np.random.default_rng(seed)
    masks = r.random((n, width)) < 0.6
    scale = np.exp(r.uniform(-30, 30, size=(n, width))) if wide else 1.0
    deltas = np.where(masks, r.normal(size=(n, width)) * scale, 0.0)
    a, b = kernels.np_overlap_average(deltas, masks), kernels.nb_overlap_average(deltas, masks)
    assert np.array_equal(bits(a), bits(b))
    assert np.array_equal(bits(a), bits(exact_average(deltas, masks)))


def test_overlap_average_cancellation():
    deltas = np.array([[1e16, 1.0], [-1e16, 1.0], [3.0, 1.0]])
    masks = np.ones_like(deltas, dtype=bool)
    for fn in (kernels.np_overlap_average, kernels.nb_overlap_average):
        out = fn(deltas, masks)
        assert out[0] == 1.0 and out[1] == 1.0


def test_overlap_average_ties_round_to_even():
    # (1 + 2**-52) + 1 + 1 = 3 + 2**-52; divided by 3 the exact quotient is not representable
    x = 1.0 + 2.0**-52
    deltas = np.array([[x], [1.0], [1.0]])
    masks = np.ones_like(deltas, dtype=bool)
    want = float((Fraction(x) + 2) / 3)
    assert kernels.np_overlap_average(deltas, masks)[0] == want
    assert kernels.nb_overlap_average(deltas, masks)[0] == want


@given(seeds, st.integers(1, 6), st.integers(1, 30))
def test_sign_elect_parity(seed, n, width):
    r = np.random.default_rng(seed)
    trimmed = np.where(r.random((n, width)) < 0.5, r.normal(size=(n, width)), 0.0)
    a, b = kernels.np_sign_elect_mean(trimmed), kernels.nb_sign_elect_mean(trimmed)
    assert np.array_equal(bits(a), bits(b))


@given(seeds)
def test_layer_kernel_parity(seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(3, 5, 12)) * 2
    g = r.normal(size=x.shape)
    y1, th1 = kernels.np_gelu_fwd(x)
    y2, th2 = kernels.nb_gelu_fwd(x)
    np.testing.assert_allclose(y1, y2, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(kernels.np_gelu_bwd(g, x, th1), kernels.nb_gelu_bwd(g, x, th2), rtol=1e-12, atol=1e-14)
    y1, inv1 = kernels.np_layernorm_fwd(x, 1e-5)
    y2, inv2 = kernels.nb_layernorm_fwd(x, 1e-5)
    np.testing.assert_allclose(y1, y2, rtol=1e-12, atol=1e-13)
    np.testing.assert_allclose(kernels.np_layernorm_bwd(g, y1, inv1), kernels.nb_layernorm_bwd(g, y2, inv2), atol=1e-12)
    o1, p1 = kernels.np_attention_fwd(x, 2)
    o2, p2 = kernels.nb_attention_fwd(x, 2)
    np.testing.assert_allclose(o1, o2, atol=1e-12)
    np.testing.assert_allclose(p1, p2, atol=1e-13)
    go = r.normal(size=o1.shape)
    np.testing.assert_allclose(kernels.np_attention_bwd(go, x, p1, 2), kernels.nb_attention_bwd(go, x, p2, 2), atol=1e-12)


@pytest.mark.parametrize("flag,expected", [("0", "numpy"), ("off", "numpy"), ("1", "numba")])
def test_env_flag_selects_backend(flag, expected):
    env = dict(os.environ, SPARSEMERGE_NUMBA=flag)
    out = subprocess.run(
        [sys.executable, "-c", "import sparsemerge; print(sparsemerge.backend_name())"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == expected


def test_numpy_backend_trains_identically(tmp_path):
    """A short sparse run gives matching adapters under both backends."""
    script = (
        "import sys, numpy as np\n"
        "from sparsemerge import *\n"
        "from sparsemerge.taskgen import TaskSpec, generate_task\n"
        "from sparsemerge.model import ModelConfig, build_model\n"
        "m = build_model(ModelConfig(num_layers=1, hidden_dim=8, num_heads=2, seq_len=12), Rng(0))\n"
        "t = generate_task(TaskSpec('t', n_train=64, n_val=16, n_test=16))\n"
        "a = train_sparse(m, t, TrainConfig(epochs=2, mask_refresh_interval=1, learning_rate=1e-2))\n"
        "np.save(sys.argv[1], a.values['layers.0.qkv'])\n"
    )
    outs = []
    for flag in ("0", "1"):
        path = tmp_path / f"v{flag}.npy"
        subprocess.run([sys.executable, "-c", script, str(path)], env=dict(os.environ, SPARSEMERGE_NUMBA=flag), check=True)
        outs.append(np.load(path))
    # layer kernels agree to rounding, so trajectories agree closely but not bitwise
    np.testing.assert_allclose(outs[0], outs[1], atol=1e-9)


def test_benchmark_script_runs():
    bench = os.path.join(os.path.dirname(__file__), os.pardir, "benchmarks", "bench_kernels.py")
    out = subprocess.run([sys.executable, bench, "--repeat", "1"], capture_output=True, text=True, check=True)
    assert "overlap_average" in out.stdout and "speedup" in out.stdout
