import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cstwa.errors import ConfigError, DataError, ShapeError
from cstwa.features import EmbeddingTable
from cstwa.nn import make_rng
from cstwa.structure import (RepMatrix, SparseGraph, StructureConfig, assemble_reps, ema_blend, epoch_refresh,
                             normalize_graph, propagate, topk_similarity_graph)


def brute_force_topk(x, K):
    """All-pairs cosine with explicit sorting, used as an oracle."""
    n = len(x)
    norms = np.linalg.norm(x, axis=1)
    dense = np.zeros((n, n))
    for i in range(n):
        if norms[i] == 0:
            continue
        cand = []
        for j in range(n):
            if j == i or norms[j] == 0:
                continue
            s = min(1.0, max(0.0, float(x[i] @ x[j]) / (norms[i] * norms[j])))
            if s > 0:
                cand.append((-s, j))
        for negs, j in sorted(cand)[:K]:
            dense[i, j] = -negs
    return dense


def dense_normalize(a):
    deg = a.sum(axis=1)
    with np.errstate(divide="ignore"):
        inv = np.where(deg > 0, 1.0 / np.sqrt(deg), 0.0)
    return inv[:, None] * a * inv[None, :]


def test_topk_worked_example():
    g = topk_similarity_graph(np.array([[1.0, 0], [1, 0], [0, 1]]), 1)
    assert g.to_dense().tolist() == [[0, 1, 0], [1, 0, 0], [0, 0, 0]]
    assert g.row_nnz().tolist() == [1, 1, 0]


def test_topk_orthogonal_and_identical():
    assert topk_similarity_graph(np.eye(4), 2).nnz == 0
    g = topk_similarity_graph(np.array([[2.0, 1.0], [2.0, 1.0]]), 3)
    np.testing.assert_allclose(g.weight, [1.0, 1.0])


def test_topk_ties_prefer_smaller_column():
    # node 0 is equally similar to 1, 2 and 3
    x = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
    g = topk_similarity_graph(x, 2)
    assert g.col_idx[g.row_ptr[0]:g.row_ptr[1]].tolist() == [1, 2]
    assert g.col_idx[g.row_ptr[3]:g.row_ptr[4]].tolist() == [0, 1]


def test_topk_zero_row_has_no_edges(caplog):
    g = topk_similarity_graph(np.array([[1.0, 0], [0, 0], [1, 0.1]]), 2)
    assert g.row_nnz()[1] == 0 and 1 not in g.col_idx.tolist()
    assert "zero norm" in caplog.text


@pytest.mark.parametrize("n,dim,K,block", [(50, 4, 3, 7), (300, 6, 8, 64), (2000, 10, 8, 512)])
def test_topk_matches_brute_force(n, dim, K, block):
    rng = make_rng(n)
    # rounded values create exact ties and duplicate rows
    x = np.round(rng.standard_normal((n, dim)), 1)
    g = topk_similarity_graph(x, K, block_size=block)
    if n <= 300:
        oracle = brute_force_topk(x, K)
    else:
        oracle = _vector_oracle(x, K)
    np.testing.assert_allclose(g.to_dense(), oracle, rtol=0, atol=1e-12)
    assert np.array_equal(g.to_dense() > 0, oracle > 0)
    assert np.all(g.row_nnz() <= K)
    assert np.all((g.weight > 0) & (g.weight <= 1))


def _vector_oracle(x, K):
    # same definition as brute_force_topk, vectorised per row with a stable sort
    norms = np.linalg.norm(x, axis=1)
    xn = x / np.where(norms > 0, norms, 1)[:, None]
    out = np.zeros((len(x), len(x)))
    for i in range(len(x)):
        s = np.clip(xn @ xn[i], 0, 1)
        s[i] = 0
        order = np.argsort(-s, kind="stable")[:K]
        order = order[s[order] > 0]
        out[i, order] = s[order]
    return out


def test_topk_block_size_invariance():
    x = make_rng(1).standard_normal((123, 5))
    a, b = topk_similarity_graph(x, 4, 1024), topk_similarity_graph(x, 4, 10)
    # gemm rounding can depend on block shape, so weights are compared to 1e-12
    assert np.array_equal(a.row_ptr, b.row_ptr) and np.array_equal(a.col_idx, b.col_idx)
    np.testing.assert_allclose(a.weight, b.weight, rtol=0, atol=1e-12)
    assert topk_similarity_graph(x, 4, 10) == b


def test_csr_invariants():
    g = topk_similarity_graph(make_rng(2).standard_normal((80, 3)), 5)
    for i in range(g.n):
        cols = g.col_idx[g.row_ptr[i]:g.row_ptr[i + 1]]
        assert np.all(np.diff(cols) > 0) and i not in cols


def test_normalize_examples():
    g = normalize_graph(SparseGraph.from_dense(np.array([[0, 2.0], [2.0, 0]])))
    assert g.to_dense().tolist() == [[0, 1], [1, 0]] and g.normalized
    assert normalize_graph(SparseGraph.from_dense(np.zeros((3, 3)))).nnz == 0
    assert normalize_graph(SparseGraph.from_dense(np.array([[0, 1.0], [0, 0]]))).nnz == 0


def test_double_normalization_forbidden():
    g = normalize_graph(SparseGraph.from_dense(np.array([[0, 2.0], [2.0, 0]])))
    with pytest.raises(ConfigError):
        normalize_graph(g)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(0, 10_000), st.floats(0.0, 0.9))
def test_normalize_matches_dense_oracle(n, seed, sparsity):
    rng = make_rng(seed)
    a = rng.random((n, n)) * (rng.random((n, n)) > sparsity)
    np.fill_diagonal(a, 0)
    g = SparseGraph.from_dense(a, K=n)
    out = normalize_graph(g)
    np.testing.assert_allclose(out.to_dense(), dense_normalize(a), rtol=0, atol=1e-12)
    assert np.all(out.weight >= 0)
    assert np.all(out.row_nnz() <= g.row_nnz())


def test_propagate_examples():
    cyc = normalize_graph(SparseGraph.from_dense(np.array([[0, 1.0], [1, 0]])))
    r = np.array([[1.0, 2], [3, 4]])
    assert propagate(cyc, r, 1).tolist() == [[3, 4], [1, 2]]
    assert np.array_equal(propagate(cyc, r, 0), r)
    empty = normalize_graph(SparseGraph.from_dense(np.zeros((2, 2))))
    assert not propagate(empty, r, 3).any()
    with pytest.raises(ShapeError):
        propagate(cyc, np.ones((3, 2)), 1)
    with pytest.raises(ConfigError):
        propagate(SparseGraph.from_dense(np.zeros((2, 2))), r, 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 10), st.integers(0, 3), st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_propagate_dense_oracle_and_linearity(n, L, seed, a, b):
    rng = make_rng(seed)
    adj = rng.random((n, n)) * (rng.random((n, n)) > 0.5)
    np.fill_diagonal(adj, 0)
    g = normalize_graph(SparseGraph.from_dense(adj))
    X, Y = rng.standard_normal((n, 3)), rng.standard_normal((n, 3))
    dense = np.linalg.matrix_power(g.to_dense(), L)
    np.testing.assert_allclose(propagate(g, X, L), dense @ X, rtol=0, atol=1e-12)
    lhs = propagate(g, a * X + b * Y, L)
    rhs = a * propagate(g, X, L) + b * propagate(g, Y, L)
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-10)


def test_ema_blend_examples():
    f, p = np.array([[1.0]]), np.array([[0.0]])
    assert ema_blend(f, p, 1.0)[0, 0] == 1.0
    assert ema_blend(f, p, 0.0)[0, 0] == 0.0
    assert ema_blend(f, p, 0.3)[0, 0] == pytest.approx(0.3, abs=1e-15)
    with pytest.raises(ShapeError):
        ema_blend(np.ones((2, 1)), np.ones((1, 2)), 0.5)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=1, max_size=20),
       st.floats(0, 1))
def test_ema_blend_is_convex(pairs, alpha):
    f = np.array([p[0] for p in pairs])
    prev = np.array([p[1] for p in pairs])
    out = ema_blend(f, prev, alpha)
    tol = 1e-9 * (1 + np.abs(f) + np.abs(prev))
    assert np.all(out >= np.minimum(f, prev) - tol) and np.all(out <= np.maximum(f, prev) + tol)


def test_epoch_refresh_examples():
    rng = make_rng(3)
    r = RepMatrix("user", rng.standard_normal((4, 2)))
    r.m[:] = 0.5
    before = r.values.copy()
    adj = rng.random((4, 4))
    np.fill_diagonal(adj, 0)
    g = normalize_graph(SparseGraph.from_dense(adj))
    epoch_refresh(r, g, StructureConfig(K=3, L=1, alpha=0.0))
    assert np.array_equal(r.values, before)
    empty = normalize_graph(SparseGraph.from_dense(np.zeros((4, 4))))
    epoch_refresh(r, empty, StructureConfig(alpha=0.3))
    np.testing.assert_allclose(r.values, 0.7 * before, rtol=0, atol=1e-15)
    assert np.all(r.m == 0.5)


def test_epoch_refresh_fixed_point_on_duplicated_rows():
    r = RepMatrix("item", np.array([[1.0, -2.0], [1.0, -2.0]]))
    g = normalize_graph(topk_similarity_graph(r.values, 1))
    epoch_refresh(r, g, StructureConfig(K=1, L=1, alpha=0.3))
    np.testing.assert_allclose(r.values, [[1.0, -2.0], [1.0, -2.0]], rtol=0, atol=1e-15)


def test_assemble_reps():
    t = EmbeddingTable("T", [2, 2], np.array([[1.0, 2], [5, 6], [3, 4], [7, 8]]))
    reps = assemble_reps(t, "user", np.array([[0, 2]]))
    assert reps.values.tolist() == [[1, 2, 3, 4]]
    zero = EmbeddingTable("T", [2, 2], np.zeros((4, 2)))
    assert not assemble_reps(zero, "user", np.array([[0, 2], [1, 3]])).values.any()
    fmap = np.array([[0, 2], [1, 3], [1, 2]])
    perm = np.array([2, 0, 1])
    assert np.array_equal(assemble_reps(t, "item", fmap[perm]).values, assemble_reps(t, "item", fmap).values[perm])
    with pytest.raises(DataError, match="entity 1"):
        assemble_reps(t, "user", np.array([[0, 2], [-1, 2]]))


def test_structure_config_validation():
    for kw in ({"K": 0}, {"L": -1}, {"alpha": 3.0}):
        with pytest.raises(ConfigError):
            StructureConfig(**kw)
