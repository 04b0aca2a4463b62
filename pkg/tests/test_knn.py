"""KNN graph construction: oracle comparisons, tie rules, properties."""

import numpy as np
import pytest

from meshseg.errors import ContractViolation, NonFiniteError
from meshseg.knn import KnnGraph, build_knn


def brute_force_knn(X, K):
    """Independent O(M^2) reference: ascending distance, then ascending index."""
    X = np.asarray(X, dtype=np.float64)
    m = X.shape[0]
    out = np.empty((m, K), dtype=np.int64)
    for i in range(m):
        d = ((X - X[i]) ** 2).sum(axis=1)
        d[i] = np.inf
        order = np.lexsort((np.arange(m), d))
        out[i] = order[:K]
    return out


def test_line_points_k1():
    X = np.array([[0.0], [1.0], [3.0], [7.0]])
    g = build_knn(X, K=1)
    np.testing.assert_array_equal(g.neighbor_indices, [[1], [0], [1], [2]])


def test_tie_broken_by_ascending_index():
    # three points equidistant from the center, indices 1..3
    X = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]])
    g = build_knn(X, K=3)
    np.testing.assert_array_equal(g.neighbor_indices[0], [1, 2, 3])


def test_duplicate_points_tie():
    X = np.array([[5.0], [5.0], [5.0], [9.0]])
    g = build_knn(X, K=2)
    np.testing.assert_array_equal(g.neighbor_indices[0], [1, 2])
    np.testing.assert_array_equal(g.neighbor_indices[2], [0, 1])


@pytest.mark.parametrize("method", ["gram", "exact"])
def test_matches_brute_force(method):
    rng = np.random.default_rng(42)
    X = rng.normal(size=(128, 64))
    g = build_knn(X, K=32, method=method)
    np.testing.assert_array_equal(g.neighbor_indices, brute_force_knn(X, 32))


def test_gram_and_exact_agree():
    rng = np.random.default_rng(9)
    X = rng.normal(size=(300, 12))
    a = build_knn(X, K=10, method="gram")
    b = build_knn(X, K=10, method="exact")
    np.testing.assert_array_equal(a.neighbor_indices, b.neighbor_indices)


def test_translation_invariance():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(60, 3))
    a = build_knn(X, K=7)
    b = build_knn(X + np.array([100.0, -50.0, 3.0]), K=7)
    np.testing.assert_array_equal(a.neighbor_indices, b.neighbor_indices)


def test_permutation_consistency():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(40, 4))
    perm = rng.permutation(40)
    inv = np.empty(40, dtype=int)
    inv[perm] = np.arange(40)
    a = build_knn(X, K=5)
    b = build_knn(X[perm], K=5)
    # neighbor sets (not orders: index tie-breaks are permutation-dependent)
    for new_i, old_i in enumerate(perm):
        assert set(perm[b.neighbor_indices[new_i]]) == \
            set(a.neighbor_indices[old_i])


def test_never_own_neighbor_and_validate():
    rng = np.random.default_rng(7)
    g = build_knn(rng.normal(size=(50, 3)), K=10)
    g.validate()
    rows = np.arange(50)[:, None]
    assert not np.any(g.neighbor_indices == rows)


def test_contract_errors():
    X = np.zeros((5, 2))
    with pytest.raises(ContractViolation):
        build_knn(X, K=5)  # K must be < M
    with pytest.raises(ContractViolation):
        build_knn(X, K=0)
    with pytest.raises(ContractViolation):
        build_knn(np.zeros(5), K=1)
    with pytest.raises(ContractViolation):
        build_knn(X, K=2, method="approximate")
    X[0, 0] = np.nan
    with pytest.raises(NonFiniteError):
        build_knn(X, K=2)


def test_validate_rejects_bad_tables():
    g = KnnGraph(neighbor_indices=np.array([[1], [0], [1]]), K=2)
    with pytest.raises(ContractViolation):
        g.validate()  # K disagrees with width
    g = KnnGraph(neighbor_indices=np.array([[0], [0], [1]]), K=1)
    with pytest.raises(ContractViolation):
        g.validate()  # self neighbor
    g = KnnGraph(neighbor_indices=np.array([[1, 1], [0, 2], [0, 1]]), K=2)
    with pytest.raises(ContractViolation):
        g.validate()  # duplicate neighbor


def test_segment_sum_matches_add_at():
    rng = np.random.default_rng(8)
    g = build_knn(rng.normal(size=(30, 3)), K=6)
    vals = rng.normal(size=(30 * 6, 4))
    expect = np.zeros((30, 4))
    np.add.at(expect, g.neighbor_indices.ravel(), vals)
    np.testing.assert_allclose(g.segment_sum(vals), expect, atol=1e-12)


def test_dump_format(tmp_path):
    g = build_knn(np.array([[0.0], [1.0], [3.0]]), K=2)
    path = tmp_path / "graph.txt"
    g.dump(path)
    lines = path.read_text().splitlines()
    assert lines == ["1 2", "0 2", "1 0"]
