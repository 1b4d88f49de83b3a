import numpy as np
import pytest

from dpfa import kernels
from dpfa.knn_graph import knn, neighbor_geometry


def brute_force(X, K):
    """All-pairs oracle: self first, then (squared distance, index) order."""
    X = np.asarray(X, dtype=np.float64)
    N = len(X)
    out = np.empty((N, K), dtype=np.int64)
    for i in range(N):
        d = ((X - X[i]) ** 2).sum(axis=1)
        others = [j for j in sorted(range(N), key=lambda j: (d[j], j)) if j != i]
        row = [i] + others[: K - 1]
        row += [i] * (K - len(row))
        out[i] = row
    return out


def test_three_points_on_a_line():
    g = knn(np.array([[0.0], [1.0], [3.0]]), 2)
    assert g.indices.tolist() == [[0, 1], [1, 0], [2, 1]]


def test_tie_goes_to_lower_index():
    X = np.array([[0.0], [-1.0], [1.0]])
    assert knn(X, 2).indices[0].tolist() == [0, 1]


def test_padding_when_fewer_points_than_k():
    g = knn(np.array([[0.0, 0.0], [1.0, 0.0]]), 4)
    assert g.indices.tolist() == [[0, 1, 0, 0], [1, 0, 1, 1]]


def test_errors():
    with pytest.raises(ValueError):
        knn(np.zeros((0, 3)), 2)
    with pytest.raises(ValueError):
        knn(np.zeros((3, 3)), 0)
    with pytest.raises(ValueError):
        knn(np.array([[np.nan, 0.0]]), 1)


def _instances(count=100):
    rng = np.random.default_rng(2024)
    for t in range(count):
        D = (3, 64)[t % 2]
        N = int(rng.integers(1, 513))
        K = int(rng.integers(1, 33))
        if t % 5 == 0:
            # quantised coordinates create many exact distance ties
            X = rng.integers(0, 4, size=(N, D)).astype(np.float64)
        else:
            X = rng.normal(size=(N, D)) * rng.uniform(0.1, 100.0)
        yield t, X, K


def test_matches_brute_force_oracle():
    checked = 0
    for t, X, K in _instances(100):
        expect = brute_force(X, K)
        got = knn(X, K).indices
        assert np.array_equal(got, expect), f"instance {t}: N={len(X)} D={X.shape[1]} K={K}"
        checked += 1
    assert checked >= 100


@pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba not installed")
def test_backends_agree():
    for _, X, K in _instances(30):
        assert np.array_equal(kernels.knn_numpy(X, K), kernels.knn_numba(X, K))


@pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba not installed")
def test_scatter_backends_agree():
    rng = np.random.default_rng(0)
    g = rng.normal(size=(40, 6, 5))
    idx = rng.integers(0, 40, size=(40, 6))
    a = kernels.scatter_add_rows_numpy(g, idx, 40)
    b = kernels.scatter_add_rows_numba(g, idx, 40)
    assert np.allclose(a, b, rtol=0, atol=1e-12)


def test_permutation_consistency():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(200, 8))
    perm = rng.permutation(200)
    g = knn(X, 12).indices
    gp = knn(X[perm], 12).indices
    inv = np.argsort(perm)
    # row r of the permuted graph describes point perm[r]; relabel back
    assert np.array_equal(perm[gp], g[perm])
    assert np.array_equal(inv[perm], np.arange(200))


def test_self_first_column():
    X = np.random.default_rng(1).normal(size=(64, 3))
    assert np.array_equal(knn(X, 7).indices[:, 0], np.arange(64))


def test_geometry_examples():
    P = np.array([[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]])
    geom = neighbor_geometry(P, knn(P, 2))
    assert np.array_equal(geom.rel_pos[0, 1], [3.0, 4.0, 0.0])
    assert geom.dist[0, 1, 0] == 5.0
    assert np.all(geom.rel_pos[:, 0] == 0) and np.all(geom.dist[:, 0] == 0)
    assert geom.encoder_input().shape == (2, 2, 10)


def test_geometry_translation_and_rotation():
    rng = np.random.default_rng(2)
    P = rng.normal(size=(50, 3))
    g = knn(P, 6)
    base = neighbor_geometry(P, g)
    moved = neighbor_geometry(P + np.array([10.0, -3.0, 2.5]), g)
    assert np.allclose(base.rel_pos, moved.rel_pos, atol=1e-12)
    assert np.allclose(base.dist, moved.dist, atol=1e-12)
    Q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    rot = neighbor_geometry(P @ Q.T, g)
    assert np.allclose(rot.rel_pos, base.rel_pos @ Q.T, atol=1e-5)
    assert np.allclose(rot.dist, base.dist, atol=1e-5)
    assert np.allclose(base.dist[..., 0], np.linalg.norm(base.rel_pos, axis=-1), atol=1e-6)


def test_geometry_rejects_bad_indices():
    from dpfa.knn_graph import NeighborGraph

    with pytest.raises(IndexError):
        neighbor_geometry(np.zeros((2, 3)), NeighborGraph(np.array([[0, 2], [1, 0]]), 2, 3))
