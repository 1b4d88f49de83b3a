"""Hot loops: exact k-nearest-neighbour selection and gather scatter-add.

Each kernel has two implementations with identical results:

* a numba ``@njit`` version (default when numba is importable), and
* a vectorised pure-numpy version.

Set ``DPFA_DISABLE_NUMBA=1`` in the environment before import to force the
numpy path.  Both implementations stay importable under explicit names
(``knn_numpy``, ``knn_numba``, ...) so they can be benchmarked and
cross-checked against each other.
"""

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is an optional extra
    numba = None

_DISABLED = os.environ.get("DPFA_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")
HAVE_NUMBA = numba is not None
if HAVE_NUMBA:
    # probe OpenMP before TBB; an outdated system TBB only yields a warning
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
USE_NUMBA = HAVE_NUMBA and not _DISABLED
BACKEND = "numba" if USE_NUMBA else "numpy"

# Rows of the query block processed per Gram-matrix product.
_BLOCK_ROWS = 512
_EPS = np.finfo(np.float64).eps


def _slack(D, sq_i, sq_max):
    # Bound on |(|x|^2 + |y|^2 - 2 x.y) - sum((x - y)^2)|, doubled.
    return 8.0 * (D + 2) * _EPS * (sq_i + sq_max)


# ---------------------------------------------------------------------------
# numpy path
# ---------------------------------------------------------------------------


def knn_numpy(X, K):
    """Exact K nearest neighbours of every row of ``X`` (self first).

    Ranking uses squared Euclidean distance computed as a direct sum of
    squared differences; ties go to the lower index.  Candidates are
    shortlisted with a Gram-matrix expansion whose rounding error is bounded,
    so the shortlist always contains the exact top-K.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    N, D = X.shape
    out = np.repeat(np.arange(N, dtype=np.int64)[:, None], K, axis=1)
    m = min(K - 1, N - 1)
    if m <= 0:
        return out
    sq = np.einsum("ij,ij->i", X, X)
    sq_max = sq.max()
    for r0 in range(0, N, _BLOCK_ROWS):
        rows = np.arange(r0, min(N, r0 + _BLOCK_ROWS))
        B = len(rows)
        approx = sq[rows, None] + sq[None, :] - 2.0 * (X[rows] @ X.T)
        approx[np.arange(B), rows] = np.inf
        kth = np.partition(approx, m - 1, axis=1)[:, m - 1]
        bound = kth + _slack(D, sq[rows], sq_max)
        r, c = np.nonzero(approx <= bound[:, None])
        exact = ((X[rows[r]] - X[c]) ** 2).sum(axis=1)
        order = np.lexsort((c, exact, r))
        r, c = r[order], c[order]
        starts = np.searchsorted(r, np.arange(B))
        out[rows, 1 : m + 1] = c[starts[:, None] + np.arange(m)]
    return out


def scatter_add_rows_numpy(grad, idx, n_rows):
    """Inverse of ``x[idx]``: accumulate ``grad[..., :]`` into row ``idx``."""
    D = grad.shape[-1]
    out = np.zeros((n_rows, D), dtype=grad.dtype)
    np.add.at(out, idx.reshape(-1), grad.reshape(-1, D))
    return out


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @numba.njit(parallel=True, cache=True)
    def _knn_select_nb(X, sq, gram, row0, m, slack_scale, sq_max, out):
        B, N = gram.shape
        D = X.shape[1]
        for b in numba.prange(B):
            i = row0 + b
            approx = np.empty(N)
            # m smallest approximate distances, ascending
            best = np.full(m, np.inf)
            for j in range(N):
                a = sq[i] + sq[j] - 2.0 * gram[b, j]
                approx[j] = a
                if j != i and a < best[m - 1]:
                    p = m - 1
                    while p > 0 and best[p - 1] > a:
                        best[p] = best[p - 1]
                        p -= 1
                    best[p] = a
            bound = best[m - 1] + slack_scale * (sq[i] + sq_max)
            # exact re-rank of the shortlist, ties to the lower index
            ed = np.full(m, np.inf)
            ei = np.full(m, -1, dtype=np.int64)
            for j in range(N):
                if j == i or approx[j] > bound:
                    continue
                e = 0.0
                for d in range(D):
                    t = X[i, d] - X[j, d]
                    e += t * t
                if e < ed[m - 1]:
                    p = m - 1
                    while p > 0 and ed[p - 1] > e:
                        ed[p] = ed[p - 1]
                        ei[p] = ei[p - 1]
                        p -= 1
                    ed[p] = e
                    ei[p] = j
            for p in range(m):
                out[i, p + 1] = ei[p]

    @numba.njit(cache=True)
    def _scatter_add_nb(grad2, flat_idx, out):
        # sequential on purpose: fixed accumulation order
        n, D = grad2.shape
        for r in range(n):
            dst = flat_idx[r]
            for d in range(D):
                out[dst, d] += grad2[r, d]

    def knn_numba(X, K):
        """numba twin of :func:`knn_numpy`."""
        X = np.ascontiguousarray(X, dtype=np.float64)
        N, D = X.shape
        out = np.repeat(np.arange(N, dtype=np.int64)[:, None], K, axis=1)
        m = min(K - 1, N - 1)
        if m <= 0:
            return out
        sq = np.einsum("ij,ij->i", X, X)
        scale = 8.0 * (D + 2) * _EPS
        for r0 in range(0, N, _BLOCK_ROWS):
            gram = X[r0 : r0 + _BLOCK_ROWS] @ X.T
            _knn_select_nb(X, sq, gram, r0, m, scale, sq.max(), out)
        return out

    def scatter_add_rows_numba(grad, idx, n_rows):
        """numba twin of :func:`scatter_add_rows_numpy`."""
        D = grad.shape[-1]
        out = np.zeros((n_rows, D), dtype=grad.dtype)
        _scatter_add_nb(
            np.ascontiguousarray(grad.reshape(-1, D)),
            np.ascontiguousarray(idx.reshape(-1), dtype=np.int64),
            out,
        )
        return out

else:  # pragma: no cover
    knn_numba = None
    scatter_add_rows_numba = None


if USE_NUMBA:
    knn_indices = knn_numba
    scatter_add_rows = scatter_add_rows_numba
else:
    knn_indices = knn_numpy
    scatter_add_rows = scatter_add_rows_numpy
