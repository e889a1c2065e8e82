import math

import numpy as np
import pytest
from hypothesis import example, given
from hypothesis import strategies as st

from sparsemerge.errors import DimensionError, InputError
from sparsemerge.saliency import (
    ScoreField,
    SparseMask,
    block_mask,
    keep_count,
    layer_drop,
    mask_union,
    num_blocks,
    score,
    topk_mask,
)

seeds = st.integers(0, 2**32 - 1)
krs = st.floats(0.001, 1.0)


def sort_oracle(values, k):
    flat = values.ravel()
    return sorted(sorted(range(flat.size), key=lambda i: (-flat[i], i))[:k])


@given(seeds, st.integers(1, 12), st.integers(1, 12), krs, st.booleans())
@example(0, 7, 3, 1 / 3, False)
def test_topk_count_and_oracle(seed, d1, d2, kr, ties):
    r = np.random.default_rng(seed)
    s = r.integers(-2, 3, size=(d1, d2)).astype(float) if ties else r.normal(size=(d1, d2))
    m = topk_mask(s, kr)
    assert m.count == max(1, math.floor(kr * (d1 * d2)))
    assert m.indices.tolist() == sort_oracle(s, m.count)


def block_oracle(s, kr, b):
    d1, d2 = s.shape
    sums = {}
    for br in range(d1 // b):
        for bc in range(d2 // b):
            sums[br * (d2 // b) + bc] = s[br * b : (br + 1) * b, bc * b : (bc + 1) * b].sum()
    n_b = math.floor(kr * (d1 * d2) / (b * b))
    return sorted(sorted(sums, key=lambda i: (-sums[i], i))[:n_b])


@given(seeds, st.sampled_from([1, 2, 4]), st.integers(1, 4), st.integers(1, 4), krs)
def test_block_mask_against_exhaustive_sums(seed, b, nbr, nbc, kr):
    s = np.random.default_rng(seed).integers(0, 50, size=(nbr * b, nbc * b)).astype(float)
    if num_blocks(kr, *s.shape, b) < 1:
        with pytest.raises(InputError):
            block_mask(s, kr, b)
        return
    m = block_mask(s, kr, b)
    assert m.indices.tolist() == block_oracle(s, kr, b)
    dense = m.to_dense()
    # grid aligned: each B x B cell is all-in or all-out
    cells = dense.reshape(nbr, b, nbc, b).transpose(0, 2, 1, 3).reshape(nbr, nbc, b * b)
    assert np.all(cells.all(axis=2) | ~cells.any(axis=2))
    assert dense.sum() == m.count == len(m.indices) * b * b


def test_keep_count_rules():
    assert keep_count(0.1, 100) == 10
    assert keep_count(0.001, 100) == 1
    assert keep_count(1.0, 7) == 7
    for bad in (0.0, -0.1, 1.5):
        with pytest.raises(InputError):
            keep_count(bad, 10)


def test_num_blocks():
    assert num_blocks(0.1, 32, 96, 8) == 4
    assert num_blocks(1.0, 16, 16, 8) == 4


def test_block_mask_rejects_untileable():
    with pytest.raises(InputError):
        block_mask(np.zeros((6, 8)), 0.5, 4)


def test_scores():
    w = np.array([[1.0, -2.0], [3.0, 0.5]])
    g = np.array([[-1.0, -1.0], [2.0, 4.0]])
    assert np.array_equal(score("MCS", w, g).values, w * g)
    assert np.array_equal(score("CS", w, g).values, np.abs(w * g))
    assert np.array_equal(score("GM", w, g).values, np.abs(g))
    assert np.array_equal(score("WM", w, g).values, np.abs(w))
    assert np.array_equal(score("GD-grow", w, g).values, np.abs(g))
    assert np.array_equal(score("GD-drop", w, g, np.ones_like(w)).values, np.abs(w - 1))
    with pytest.raises(InputError):
        score("GD-drop", w, g)
    with pytest.raises(InputError):
        score("nope", w, g)
    with pytest.raises(DimensionError):
        score("MCS", w, g[:1])


def test_mcs_prefers_sign_agreement():
    # MCS is signed: a weight moving against its gradient scores below one of equal |w g|
    m = topk_mask(score("MCS", np.array([[1.0, 1.0]]), np.array([[-3.0, 2.0]])), 0.5)
    assert m.indices.tolist() == [1]
    m = topk_mask(score("CS", np.array([[1.0, 1.0]]), np.array([[-3.0, 2.0]])), 0.5)
    assert m.indices.tolist() == [0]


def drop_oracle(fields, kr):
    union = np.sort(np.concatenate([f.ravel() for f in fields.values()]))[::-1]
    k = max(1, math.floor(kr * union.size))
    threshold = union[k - 1]
    return {key for key, f in fields.items() if f.max() >= threshold}


@given(seeds, st.integers(1, 6), krs)
def test_layer_drop_against_concatenate_and_sort(seed, n_layers, kr):
    r = np.random.default_rng(seed)
    fields = {f"l{i}": r.normal(loc=r.normal() * 3, size=tuple(r.integers(1, 6, size=2))) for i in range(n_layers)}
    assert layer_drop(fields, kr) == drop_oracle(fields, kr)
    assert layer_drop(fields, 1.0) == set(fields)


def test_layer_drop_accepts_sequences_and_score_fields():
    fields = [ScoreField(np.array([[5.0, 4.0]]), "GM"), ScoreField(np.array([[1.0, 0.0]]), "GM")]
    assert layer_drop(fields, 0.5) == {0}
    with pytest.raises(InputError):
        layer_drop({}, 0.5)


def test_sparse_mask_validation():
    with pytest.raises(InputError):
        SparseMask((2, 2), "element", [1, 0])
    with pytest.raises(InputError):
        SparseMask((2, 2), "element", [4])
    with pytest.raises(InputError):
        SparseMask((4, 6), "block", [0], 4)
    with pytest.raises(InputError):
        SparseMask((2, 2), "diagonal", [0])
    assert SparseMask.full((2, 3)).count == 6
    assert SparseMask.empty((2, 3)).count == 0


@given(seeds, st.integers(1, 5))
def test_mask_union(seed, n):
    r = np.random.default_rng(seed)
    dense = [r.random((4, 4)) < 0.3 for _ in range(n)]
    u = mask_union([SparseMask.from_dense(d) for d in dense])
    assert np.array_equal(u.to_dense(), np.logical_or.reduce(dense))
    blocks = [SparseMask((4, 4), "block", np.flatnonzero(r.random(4) < 0.5), 2) for _ in range(n)]
    ub = mask_union(blocks)
    assert ub.kind == "block"
    assert np.array_equal(ub.to_dense(), np.logical_or.reduce([b.to_dense() for b in blocks]))


def test_mask_union_errors():
    with pytest.raises(InputError):
        mask_union([])
    with pytest.raises(DimensionError):
        mask_union([SparseMask.full((2, 2)), SparseMask.full((2, 3))])
