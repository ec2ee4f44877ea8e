"""Brute-force cosine scan over the descriptor store."""

import numpy as np

from .._jit import njit


@njit(fastmath={"reassoc", "contract"})
def _scan_jit(vecs, norms, ids, n, q, qn, query_id, gap, tau):
    idx = np.empty(n, np.int64)
    sim = np.empty(n)
    m = 0
    dim = q.shape[0]
    # every stored row is scored, as in a plain brute-force search; the gap test comes after
    for r in range(n):
        acc = 0.0
        for c in range(dim):
            acc += np.float64(vecs[r, c]) * q[c]
        s = acc / (norms[r] * qn)
        if s > tau and abs(ids[r] - query_id) >= gap:
            idx[m] = r
            sim[m] = min(s, 1.0)
            m += 1
    return idx[:m], sim[:m]


def _scan_numpy(vecs, norms, ids, n, q, qn, query_id, gap, tau):
    # float32 prefilter, then exact float64 on the survivors
    approx = (vecs[:n] @ q.astype(np.float32)).astype(float) / np.maximum(norms[:n] * qn, 1e-300)
    keep = np.abs(ids[:n] - query_id) >= gap
    pre = np.flatnonzero(keep & (approx > tau - 1e-4))
    if len(pre) == 0:
        return pre, np.empty(0)
    exact = (vecs[pre].astype(float) @ q) / (norms[pre] * qn)
    ok = exact > tau
    return pre[ok], np.minimum(exact[ok], 1.0)


def scan(vecs, norms, ids, n, q, qn, query_id, gap, tau, backend="jit"):
    """Rows (< n) with cosine similarity above ``tau`` and ``|id - query_id| >= gap``."""
    if backend == "jit":
        return _scan_jit(vecs, norms, ids, n, q, qn, query_id, gap, tau)
    return _scan_numpy(vecs, norms, ids, n, q, qn, query_id, gap, tau)
