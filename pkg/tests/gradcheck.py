"""Central finite-difference checks for the tape's layer operations."""

import numpy as np

from sparsemerge.model import ModelConfig, build_model, loss_and_grads
from sparsemerge.numerics import GradientTape, Rng

H = 1e-4


def numeric_grad(f, x, h=H):
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_error(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def _weighted(tape, out, weights):
    """Scalar sum(out * weights), recorded on the tape."""
    flat = tape.reshape(out, (1, out.value.size))
    return tape.matmul(flat, tape.const(weights.reshape(-1, 1)))


def check_op(build, inputs, seed, scalar_output=False):
    """Max relative error over ``inputs`` between tape gradients and finite differences.

    ``build(tape, vars)`` returns the op's output Var.
    """
    weights = None
    if not scalar_output:
        probe = build(GradientTape(), [GradientTape.const(x) for x in inputs])
        weights = np.random.default_rng(seed).normal(size=probe.value.shape)

    def value():
        tape = GradientTape()
        out = build(tape, [tape.const(x) for x in inputs])
        return float(out.value) if scalar_output else float(np.sum(out.value * weights))

    tape = GradientTape()
    vs = [tape.param(f"x{i}", x, True) for i, x in enumerate(inputs)]
    out = build(tape, vs)
    tape.backward(out if scalar_output else _weighted(tape, out, weights))
    return max(rel_error(tape.grads[f"x{i}"], numeric_grad(value, x)) for i, x in enumerate(inputs))


def layer_cases(seed):
    """(name, build, inputs, scalar) for every operation the model uses."""
    r = np.random.default_rng(seed)
    n, t, d, heads = 2, 4, 6, 2
    tokens = r.integers(0, 7, size=(n, t))
    labels = r.integers(0, 3, size=5)
    c = r.normal(size=(3, 4))
    return [
        ("matmul", lambda tp, v: tp.matmul(v[0], v[1]), [r.normal(size=(3, 4)), r.normal(size=(4, 5))], False),
        ("add", lambda tp, v: tp.add(v[0], v[1]), [r.normal(size=(3, 4)), r.normal(size=(3, 4))], False),
        ("mul_const", lambda tp, v: tp.mul_const(v[0], c), [r.normal(size=(3, 4))], False),
        ("scale", lambda tp, v: tp.scale(v[0], 0.37), [r.normal(size=(3, 4))], False),
        ("reshape", lambda tp, v: tp.reshape(v[0], (4, 3)), [r.normal(size=(3, 4))], False),
        ("embed", lambda tp, v: tp.embed(v[0], v[1], tokens), [r.normal(size=(7, d)), r.normal(size=(5, d))], False),
        ("layernorm", lambda tp, v: tp.layernorm(v[0]), [r.normal(size=(n, t, d))], False),
        ("attention", lambda tp, v: tp.attention(v[0], heads), [r.normal(size=(n, t, 3 * d))], False),
        ("gelu", lambda tp, v: tp.gelu(v[0]), [r.normal(size=(3, 5)) * 2], False),
        ("mean_pool", lambda tp, v: tp.mean_pool(v[0]), [r.normal(size=(n, t, d))], False),
        ("cross_entropy", lambda tp, v: tp.cross_entropy(v[0], labels), [r.normal(size=(5, 3))], True),
    ]


TINY = ModelConfig(num_layers=1, hidden_dim=8, num_heads=2, vocab_size=10, num_classes=3, seq_len=5, mlp_ratio=2)


def check_model(seed):
    """Whole-network gradient of a few weight matrices against finite differences."""
    model = build_model(TINY, Rng(seed, "gradcheck"))
    r = np.random.default_rng(seed)
    batch = (r.integers(0, 10, size=(3, 5)), r.integers(0, 3, size=3))
    weights = {k: np.array(v) for k, v in model.weights.items()}
    names = ["layers.0.qkv", "layers.0.mlp_down", "head"]
    m = type(model)(model.config, weights)
    _, tape = loss_and_grads(m, None, batch, names)

    def value():
        return loss_and_grads(m, None, batch)[0]

    return max(rel_error(tape.grads[k], numeric_grad(value, weights[k])) for k in names)
