"""Per-edge residuals and Jacobians for SE(3) pose-graph optimisation.

Residual of edge (i, j) with measurement z: ``e = log(z^-1 x_i^-1 x_j)``, twist
ordered (rho, phi). States are perturbed on the right, ``x <- x exp(d)``, which
gives ``de/dd_j = Jr^-1(e)`` and ``de/dd_i = -Jr^-1(e) Ad(x_j^-1 x_i)``.

Inputs are stacked rotation matrices ``R (n, 3, 3)`` and translations
``t (n, 3)`` for the nodes, edge endpoint indices, and the measurement
rotations/translations per edge.
"""

import numpy as np

from .._jit import njit, resolve_backend

SMALL = 1e-4


# -- compiled backend --------------------------------------------------------------------
# Every 3x3 product is written into caller-owned scratch: small temporaries and
# BLAS dispatch on tiny blocks would otherwise dominate the per-edge cost.


@njit
def _mm3(A, B, C):
    for r in range(3):
        for c in range(3):
            C[r, c] = A[r, 0] * B[0, c] + A[r, 1] * B[1, c] + A[r, 2] * B[2, c]


@njit
def _mtm3(A, B, C):
    """C = A^T B"""
    for r in range(3):
        for c in range(3):
            C[r, c] = A[0, r] * B[0, c] + A[1, r] * B[1, c] + A[2, r] * B[2, c]


@njit
def _skew_into(v0, v1, v2, S):
    S[0, 0] = 0.0
    S[0, 1] = -v2
    S[0, 2] = v1
    S[1, 0] = v2
    S[1, 1] = 0.0
    S[1, 2] = -v0
    S[2, 0] = -v1
    S[2, 1] = v0
    S[2, 2] = 0.0


@njit
def _so3_log(R, out):
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr >= R[0, 0] and tr >= R[1, 1] and tr >= R[2, 2]:
        s = 2.0 * np.sqrt(max(1.0 + tr, 0.0))
        w = 0.25 * s
        x = (R[2, 1] - R[1, 2]) / s
        y = (R[0, 2] - R[2, 0]) / s
        z = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = 2.0 * np.sqrt(max(1.0 + R[0, 0] - R[1, 1] - R[2, 2], 0.0))
        w = (R[2, 1] - R[1, 2]) / s
        x = 0.25 * s
        y = (R[0, 1] + R[1, 0]) / s
        z = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] >= R[2, 2]:
        s = 2.0 * np.sqrt(max(1.0 - R[0, 0] + R[1, 1] - R[2, 2], 0.0))
        w = (R[0, 2] - R[2, 0]) / s
        x = (R[0, 1] + R[1, 0]) / s
        y = 0.25 * s
        z = (R[1, 2] + R[2, 1]) / s
    else:
        s = 2.0 * np.sqrt(max(1.0 - R[0, 0] - R[1, 1] + R[2, 2], 0.0))
        w = (R[1, 0] - R[0, 1]) / s
        x = (R[0, 2] + R[2, 0]) / s
        y = (R[1, 2] + R[2, 1]) / s
        z = 0.25 * s
    if w < 0.0:
        w, x, y, z = -w, -x, -y, -z
    nv = np.sqrt(x * x + y * y + z * z)
    if nv < 1e-12:
        f = 2.0 / w
    else:
        f = 2.0 * np.arctan2(nv, w) / nv
    out[0] = f * x
    out[1] = f * y
    out[2] = f * z


@njit
def _jl_inv_coeff(theta):
    if theta < SMALL:
        return 1.0 / 12.0 + theta * theta / 720.0
    return (1.0 - 0.5 * theta / np.tan(0.5 * theta)) / (theta * theta)


@njit
def _q_coeffs(theta):
    if theta < SMALL:
        t2 = theta * theta
        return 1.0 / 6.0 - t2 / 120.0, 1.0 / 24.0 - t2 / 720.0, 1.0 / 120.0 - t2 / 2520.0
    s = np.sin(theta)
    c = np.cos(theta)
    c1 = (theta - s) / theta**3
    c2 = (theta * theta - 4.0 * np.sin(0.5 * theta) ** 2) / (2.0 * theta**4)
    c3 = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * theta**5)
    return c1, c2, c3


# scratch slots
_P, _RH, _PP, _PR, _RP, _PRP, _T1, _T2, _JI, _Q, _RIJ, _RE, _AD = range(13)


@njit
def _edge(Ri, ti, Rj, tj, Rz, tz, S, e, tij):
    """Residual into ``e`` (6,), and ``Rij`` / ``tij`` of x_i^-1 x_j into scratch."""
    Rij = S[_RIJ]
    _mtm3(Ri, Rj, Rij)
    d0, d1, d2 = tj[0] - ti[0], tj[1] - ti[1], tj[2] - ti[2]
    for r in range(3):
        tij[r] = Ri[0, r] * d0 + Ri[1, r] * d1 + Ri[2, r] * d2
    Re = S[_RE]
    _mtm3(Rz, Rij, Re)
    u0, u1, u2 = tij[0] - tz[0], tij[1] - tz[1], tij[2] - tz[2]
    te0 = Rz[0, 0] * u0 + Rz[1, 0] * u1 + Rz[2, 0] * u2
    te1 = Rz[0, 1] * u0 + Rz[1, 1] * u1 + Rz[2, 1] * u2
    te2 = Rz[0, 2] * u0 + Rz[1, 2] * u1 + Rz[2, 2] * u2
    _so3_log(Re, e[3:])
    p0, p1, p2 = e[3], e[4], e[5]
    theta = np.sqrt(p0 * p0 + p1 * p1 + p2 * p2)
    P = S[_P]
    _skew_into(p0, p1, p2, P)
    PP = S[_PP]
    _mm3(P, P, PP)
    c = _jl_inv_coeff(theta)
    for r in range(3):
        acc = 0.0
        for k in range(3):
            v = c * PP[r, k] - 0.5 * P[r, k]
            if r == k:
                v += 1.0
            acc += v * (te0 if k == 0 else (te1 if k == 1 else te2))
        e[r] = acc


@njit
def _jr_inv(e, S, out):
    """Inverse right Jacobian at twist ``e``: Jl^-1 evaluated at the negated twist, into ``out``."""
    p0, p1, p2 = -e[3], -e[4], -e[5]
    theta = np.sqrt(p0 * p0 + p1 * p1 + p2 * p2)
    P, Rh, PP, PR, RP, PRP = S[_P], S[_RH], S[_PP], S[_PR], S[_RP], S[_PRP]
    T1, T2, Jinv, Q = S[_T1], S[_T2], S[_JI], S[_Q]
    _skew_into(p0, p1, p2, P)
    _skew_into(-e[0], -e[1], -e[2], Rh)
    _mm3(P, P, PP)
    _mm3(P, Rh, PR)
    _mm3(Rh, P, RP)
    _mm3(PR, P, PRP)
    cj = _jl_inv_coeff(theta)
    c1, c2, c3 = _q_coeffs(theta)
    for r in range(3):
        for k in range(3):
            Jinv[r, k] = (1.0 if r == k else 0.0) - 0.5 * P[r, k] + cj * PP[r, k]
            Q[r, k] = 0.5 * Rh[r, k] + c1 * (PR[r, k] + RP[r, k] + PRP[r, k])
    _mm3(PP, Rh, T1)
    _mm3(RP, P, T2)
    for r in range(3):
        for k in range(3):
            Q[r, k] += c2 * (T1[r, k] + T2[r, k] - 3.0 * PRP[r, k])
    _mm3(PRP, P, T1)
    _mm3(P, PRP, T2)
    for r in range(3):
        for k in range(3):
            Q[r, k] += c3 * (T1[r, k] + T2[r, k])
    _mm3(Jinv, Q, T1)
    _mm3(T1, Jinv, T2)
    for r in range(6):
        for k in range(6):
            out[r, k] = 0.0
    for r in range(3):
        for k in range(3):
            out[r, k] = Jinv[r, k]
            out[r + 3, k + 3] = Jinv[r, k]
            out[r, k + 3] = -T2[r, k]


@njit
def _residuals_jit(R, t, ii, jj, Rz, tz):
    E = len(ii)
    out = np.empty((E, 6))
    S = np.empty((13, 3, 3))
    tij = np.empty(3)
    for k in range(E):
        _edge(R[ii[k]], t[ii[k]], R[jj[k]], t[jj[k]], Rz[k], tz[k], S, out[k], tij)
    return out


@njit
def _linearize_jit(R, t, ii, jj, Rz, tz):
    E = len(ii)
    res = np.empty((E, 6))
    Ji = np.empty((E, 6, 6))
    Jj = np.empty((E, 6, 6))
    S = np.empty((13, 3, 3))
    tij = np.empty(3)
    Ad = np.zeros((6, 6))
    for k in range(E):
        _edge(R[ii[k]], t[ii[k]], R[jj[k]], t[jj[k]], Rz[k], tz[k], S, res[k], tij)
        A = Jj[k]
        _jr_inv(res[k], S, A)
        # Ad(x_j^-1 x_i): rotation Rij^T, translation -Rij^T tij
        Rij = S[_RIJ]
        Rji = S[_T1]
        for r in range(3):
            for c in range(3):
                Rji[r, c] = Rij[c, r]
        a0 = -(Rji[0, 0] * tij[0] + Rji[0, 1] * tij[1] + Rji[0, 2] * tij[2])
        a1 = -(Rji[1, 0] * tij[0] + Rji[1, 1] * tij[1] + Rji[1, 2] * tij[2])
        a2 = -(Rji[2, 0] * tij[0] + Rji[2, 1] * tij[1] + Rji[2, 2] * tij[2])
        _skew_into(a0, a1, a2, S[_T2])
        _mm3(S[_T2], Rji, S[_AD])
        for r in range(3):
            for c in range(3):
                Ad[r, c] = Rji[r, c]
                Ad[r + 3, c + 3] = Rji[r, c]
                Ad[r, c + 3] = S[_AD][r, c]
        Jik = Ji[k]
        for r in range(6):
            for c in range(6):
                acc = 0.0
                for m in range(6):
                    acc += A[r, m] * Ad[m, c]
                Jik[r, c] = -acc
    return res, Ji, Jj


# -- numpy backend ---------------------------------------------------------------------


def _skew_b(v):
    S = np.zeros(v.shape[:-1] + (3, 3))
    S[..., 0, 1] = -v[..., 2]
    S[..., 0, 2] = v[..., 1]
    S[..., 1, 0] = v[..., 2]
    S[..., 1, 2] = -v[..., 0]
    S[..., 2, 0] = -v[..., 1]
    S[..., 2, 1] = v[..., 0]
    return S


def _so3_log_b(R):
    tr = np.trace(R, axis1=1, axis2=2)
    d = np.stack([tr, R[:, 0, 0], R[:, 1, 1], R[:, 2, 2]], axis=1)
    case = np.argmax(d, axis=1)
    q = np.empty((len(R), 4))
    for c in range(4):
        m = case == c
        if not np.any(m):
            continue
        Rm = R[m]
        if c == 0:
            s = 2.0 * np.sqrt(np.maximum(1.0 + tr[m], 0.0))
            q[m] = np.column_stack([0.25 * s, (Rm[:, 2, 1] - Rm[:, 1, 2]) / s,
                                    (Rm[:, 0, 2] - Rm[:, 2, 0]) / s, (Rm[:, 1, 0] - Rm[:, 0, 1]) / s])
        elif c == 1:
            s = 2.0 * np.sqrt(np.maximum(1.0 + Rm[:, 0, 0] - Rm[:, 1, 1] - Rm[:, 2, 2], 0.0))
            q[m] = np.column_stack([(Rm[:, 2, 1] - Rm[:, 1, 2]) / s, 0.25 * s,
                                    (Rm[:, 0, 1] + Rm[:, 1, 0]) / s, (Rm[:, 0, 2] + Rm[:, 2, 0]) / s])
        elif c == 2:
            s = 2.0 * np.sqrt(np.maximum(1.0 - Rm[:, 0, 0] + Rm[:, 1, 1] - Rm[:, 2, 2], 0.0))
            q[m] = np.column_stack([(Rm[:, 0, 2] - Rm[:, 2, 0]) / s, (Rm[:, 0, 1] + Rm[:, 1, 0]) / s,
                                    0.25 * s, (Rm[:, 1, 2] + Rm[:, 2, 1]) / s])
        else:
            s = 2.0 * np.sqrt(np.maximum(1.0 - Rm[:, 0, 0] - Rm[:, 1, 1] + Rm[:, 2, 2], 0.0))
            q[m] = np.column_stack([(Rm[:, 1, 0] - Rm[:, 0, 1]) / s, (Rm[:, 0, 2] + Rm[:, 2, 0]) / s,
                                    (Rm[:, 1, 2] + Rm[:, 2, 1]) / s, 0.25 * s])
    q[q[:, 0] < 0] *= -1.0
    nv = np.linalg.norm(q[:, 1:], axis=1)
    tiny = nv < 1e-12
    f = np.where(tiny, 2.0 / q[:, 0], 2.0 * np.arctan2(nv, q[:, 0]) / np.where(tiny, 1.0, nv))
    return f[:, None] * q[:, 1:]


def _jl_inv_coeff_b(theta):
    small = theta < SMALL
    ts = np.where(small, 1.0, theta)
    exact = (1.0 - 0.5 * ts / np.tan(0.5 * ts)) / ts**2
    return np.where(small, 1.0 / 12.0 + theta**2 / 720.0, exact)


def _residual_parts_b(R, t, ii, jj, Rz, tz):
    Ri, Rj = R[ii], R[jj]
    RiT = np.swapaxes(Ri, 1, 2)
    Rij = RiT @ Rj
    tij = np.einsum("eab,eb->ea", RiT, t[jj] - t[ii])
    Re = np.swapaxes(Rz, 1, 2) @ Rij
    te = np.einsum("eba,eb->ea", Rz, tij - tz)
    phi = _so3_log_b(Re)
    theta = np.linalg.norm(phi, axis=1)
    P = _skew_b(phi)
    Vinv = np.eye(3) - 0.5 * P + _jl_inv_coeff_b(theta)[:, None, None] * (P @ P)
    e = np.concatenate([np.einsum("eab,eb->ea", Vinv, te), phi], axis=1)
    return e, Rij, tij


def _residuals_numpy(R, t, ii, jj, Rz, tz):
    return _residual_parts_b(R, t, ii, jj, Rz, tz)[0]


def _jr_inv_b(e):
    r, p = -e[:, :3], -e[:, 3:]
    theta = np.linalg.norm(p, axis=1)
    P = _skew_b(p)
    Rh = _skew_b(r)
    PP = P @ P
    Jinv = np.eye(3) - 0.5 * P + _jl_inv_coeff_b(theta)[:, None, None] * PP
    small = theta < SMALL
    ts = np.where(small, 1.0, theta)
    s, c = np.sin(ts), np.cos(ts)
    t2 = theta**2
    c1 = np.where(small, 1 / 6 - t2 / 120, (ts - s) / ts**3)[:, None, None]
    c2 = np.where(small, 1 / 24 - t2 / 720, (ts**2 - 4 * np.sin(0.5 * ts) ** 2) / (2 * ts**4))[:, None, None]
    c3 = np.where(small, 1 / 120 - t2 / 2520, (2 * ts - 3 * s + ts * c) / (2 * ts**5))[:, None, None]
    PR, RP = P @ Rh, Rh @ P
    PRP = PR @ P
    Q = 0.5 * Rh + c1 * (PR + RP + PRP) + c2 * (PP @ Rh + RP @ P - 3 * PRP) + c3 * (PRP @ P + P @ PRP)
    out = np.zeros((len(e), 6, 6))
    out[:, :3, :3] = Jinv
    out[:, 3:, 3:] = Jinv
    out[:, :3, 3:] = -(Jinv @ Q @ Jinv)
    return out


def _linearize_numpy(R, t, ii, jj, Rz, tz):
    e, Rij, tij = _residual_parts_b(R, t, ii, jj, Rz, tz)
    A = _jr_inv_b(e)
    Rji = np.swapaxes(Rij, 1, 2)
    tji = -np.einsum("eab,eb->ea", Rji, tij)
    Ad = np.zeros((len(e), 6, 6))
    Ad[:, :3, :3] = Rji
    Ad[:, 3:, 3:] = Rji
    Ad[:, :3, 3:] = _skew_b(tji) @ Rji
    return e, -(A @ Ad), A


# -- dispatch ---------------------------------------------------------------------------


def _prep(R, t, ii, jj, Rz, tz):
    return (np.ascontiguousarray(R, dtype=float), np.ascontiguousarray(t, dtype=float),
            np.ascontiguousarray(ii, dtype=np.int64), np.ascontiguousarray(jj, dtype=np.int64),
            np.ascontiguousarray(Rz, dtype=float), np.ascontiguousarray(tz, dtype=float))


def residuals(R, t, ii, jj, Rz, tz, backend=None):
    args = _prep(R, t, ii, jj, Rz, tz)
    if len(args[2]) == 0:
        return np.zeros((0, 6))
    if resolve_backend(backend) == "jit":
        return _residuals_jit(*args)
    return _residuals_numpy(*args)


def linearize(R, t, ii, jj, Rz, tz, backend=None):
    """Residuals ``(E, 6)`` and Jacobians w.r.t. both endpoints, each ``(E, 6, 6)``."""
    args = _prep(R, t, ii, jj, Rz, tz)
    if len(args[2]) == 0:
        return np.zeros((0, 6)), np.zeros((0, 6, 6)), np.zeros((0, 6, 6))
    if resolve_backend(backend) == "jit":
        return _linearize_jit(*args)
    return _linearize_numpy(*args)
