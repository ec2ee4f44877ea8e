"""Constrained power-set enumeration and subset scoring for one sampling window.

Both backends work on the window's descriptor Gram matrix ``P = D D^T`` rather
than on the raw descriptors: the difference Gram ``J J^T`` and the projections
``J d_i`` needed for the principal-direction transform are linear combinations
of entries of ``P``, so the per-subset cost does not depend on the descriptor
dimension.

Returned arrays are aligned: ``masks[k]`` is a bitmask over window positions,
``rho[k]``, ``pi[k]`` and ``score[k]`` its redundancy, information term and
objective.
"""

from itertools import combinations

import numpy as np

from .._jit import njit, resolve_backend

PAPER_LITERAL = 0
INFO_MAX = 1

EIG_RTOL = 1e-12
EIG_ATOL = 1e-13


@njit
def _members_if_feasible(mask, n_win, dist, adist, has_anchor, dl, du, out):
    n = 0
    prev = -1
    for i in range(n_win):
        if (mask >> i) & 1:
            if prev >= 0:
                g = dist[prev, i]
                if g < dl or g > du:
                    return -1
            elif has_anchor:
                g = adist[i]
                if g < dl or g > du:
                    return -1
            out[n] = i
            n += 1
            prev = i
    return n


@njit
def _subset_terms(P, dist, members, n, rtol, atol):
    if n < 2:
        return 0.0, 0.0
    m = n - 1
    rho = 0.0
    gaps = np.empty(m)
    dmax = 0.0
    gmin = np.inf
    for a in range(m):
        i = members[a]
        j = members[a + 1]
        c = P[i, j] / np.sqrt(P[i, i] * P[j, j])
        if c < 0.0:
            c = 0.0
        elif c > 1.0:
            c = 1.0
        rho += c
        gaps[a] = dist[i, j]
        if gaps[a] < gmin:
            gmin = gaps[a]
    rho /= m
    for a in range(n):
        v = P[members[a], members[a]]
        if v > dmax:
            dmax = v

    G = np.empty((m, m))
    for a in range(m):
        ia = members[a]
        ia1 = members[a + 1]
        for b in range(m):
            ib = members[b]
            ib1 = members[b + 1]
            G[a, b] = (P[ia1, ib1] - P[ia1, ib] - P[ia, ib1] + P[ia, ib]) / (gaps[a] * gaps[b])
    w, U = np.linalg.eigh(G)
    thr = rtol * w[m - 1]
    floor = atol * dmax / (gmin * gmin)
    if floor > thr:
        thr = floor

    # difference of consecutive projected descriptors: (J d_{i+1} - J d_i)[a]
    step = np.empty((m, m))
    for a in range(m):
        ia = members[a]
        ia1 = members[a + 1]
        for i in range(m):
            mi = members[i]
            mi1 = members[i + 1]
            step[a, i] = ((P[ia1, mi1] - P[ia, mi1]) - (P[ia1, mi] - P[ia, mi])) / gaps[a]

    dists = np.zeros(m)
    for k in range(m):
        if w[k] > thr:
            for i in range(m):
                comp = 0.0
                for a in range(m):
                    comp += U[a, k] * step[a, i]
                dists[i] += comp * comp
    top = 0.0
    for i in range(m):
        dists[i] = np.sqrt(dists[i])
        if dists[i] > top:
            top = dists[i]
    if top <= 0.0:
        return rho, 0.0
    acc = 0.0
    for i in range(m):
        acc += dists[i] / top
    return rho, -acc / m


@njit
def _objective(rho, pi, alpha, beta, mode):
    if mode == PAPER_LITERAL:
        return (rho + alpha) / (pi - beta)
    return (rho + alpha) * (1.0 - pi)


@njit
def _score_window_jit(P, dist, adist, has_anchor, dl, du, alpha, beta, mode, rtol, atol):
    n_win = P.shape[0]
    total = (1 << n_win) - 1
    masks = np.empty(total, dtype=np.int64)
    rho = np.empty(total)
    pi = np.empty(total)
    score = np.empty(total)
    members = np.empty(n_win, dtype=np.int64)
    k = 0
    for mask in range(1, total + 1):
        n = _members_if_feasible(mask, n_win, dist, adist, has_anchor, dl, du, members)
        if n <= 0:
            continue
        r, p = _subset_terms(P, dist, members, n, rtol, atol)
        masks[k] = mask
        rho[k] = r
        pi[k] = p
        score[k] = _objective(r, p, alpha, beta, mode)
        k += 1
    return masks[:k], rho[:k], pi[:k], score[:k]


def _score_window_numpy(P, dist, adist, has_anchor, dl, du, alpha, beta, mode, rtol, atol):
    n_win = P.shape[0]
    out_masks, out_rho, out_pi = [], [], []
    for n in range(1, n_win + 1):
        combos = np.array(list(combinations(range(n_win), n)), dtype=np.int64)
        ok = np.ones(len(combos), dtype=bool)
        if n > 1:
            g = dist[combos[:, :-1], combos[:, 1:]]
            ok &= np.all((g >= dl) & (g <= du), axis=1)
        if has_anchor:
            g0 = adist[combos[:, 0]]
            ok &= (g0 >= dl) & (g0 <= du)
        combos = combos[ok]
        if len(combos) == 0:
            continue
        out_masks.append(np.sum(np.left_shift(1, combos), axis=1))
        if n == 1:
            out_rho.append(np.zeros(len(combos)))
            out_pi.append(np.zeros(len(combos)))
            continue
        lo, hi = combos[:, :-1], combos[:, 1:]
        diag = np.diagonal(P)
        cos = P[lo, hi] / np.sqrt(diag[lo] * diag[hi])
        out_rho.append(np.clip(cos, 0.0, 1.0).mean(axis=1))

        gaps = dist[lo, hi]
        # P[x[:, a], y[:, b]] for all (a, b) pairs of the subset
        def block(x, y):
            return P[x[:, :, None], y[:, None, :]]

        G = (block(hi, hi) - block(hi, lo) - block(lo, hi) + block(lo, lo)) / (
            gaps[:, :, None] * gaps[:, None, :]
        )
        w, U = np.linalg.eigh(G)
        floor = atol * diag[combos].max(axis=1) / gaps.min(axis=1) ** 2
        thr = np.maximum(rtol * w[:, -1], floor)
        keep = w > thr[:, None]
        proj = (block(hi, hi) - block(lo, hi) - block(hi, lo) + block(lo, lo)) / gaps[:, :, None]
        comp = np.einsum("cak,cai->cki", U, proj) * keep[:, :, None]
        dists = np.sqrt(np.sum(comp * comp, axis=1))
        top = dists.max(axis=1)
        safe = np.where(top > 0, top, 1.0)
        pi = np.where(top > 0, -(dists / safe[:, None]).mean(axis=1), 0.0)
        out_pi.append(pi)

    if not out_masks:
        empty = np.empty(0)
        return np.empty(0, dtype=np.int64), empty, empty.copy(), empty.copy()
    masks = np.concatenate(out_masks).astype(np.int64)
    rho = np.concatenate(out_rho)
    pi = np.concatenate(out_pi)
    if mode == PAPER_LITERAL:
        score = (rho + alpha) / (pi - beta)
    else:
        score = (rho + alpha) * (1.0 - pi)
    return masks, rho, pi, score


def score_window(descriptors, positions, anchor, dl, du, alpha, beta, mode, backend=None):
    """Enumerate the constrained power set of a window and score every member.

    ``anchor`` is a 3-vector position or None. Returns ``(masks, rho, pi, score)``.
    """
    D = np.ascontiguousarray(descriptors, dtype=float)
    X = np.ascontiguousarray(positions, dtype=float)
    P = D @ D.T
    P = np.ascontiguousarray(0.5 * (P + P.T))
    dist = np.ascontiguousarray(np.linalg.norm(X[:, None, :] - X[None, :, :], axis=2))
    has_anchor = anchor is not None
    if has_anchor:
        adist = np.linalg.norm(X - np.asarray(anchor, float)[None, :], axis=1)
    else:
        adist = np.zeros(len(X))
    args = (P, dist, adist, has_anchor, float(dl), float(du), float(alpha), float(beta), int(mode),
            EIG_RTOL, EIG_ATOL)
    if resolve_backend(backend) == "jit":
        return _score_window_jit(*args)
    return _score_window_numpy(*args)
