"""SE(3) pose algebra.

Rotations are Hamilton unit quaternions stored as ``(w, x, y, z)``; tangent
vectors are ordered ``(rho, phi)`` with the translational part first.
Poses compose as ``a @ b`` (apply ``b`` then ``a``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateGeometry, NearPiRotation, TooFewPoses

NEAR_PI_MARGIN = 1e-6
SMALL_ANGLE = 1e-4
_NORM_SLACK = 1e-12


def skew(v):
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]], dtype=float
    )


def _readonly(a):
    a.setflags(write=False)
    return a


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R):
    """Shepperd's method; returns a unit quaternion with ``w >= 0``."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    diag = (tr, R[0, 0], R[1, 1], R[2, 2])
    k = int(np.argmax(diag))
    if k == 0:
        s = 2.0 * math.sqrt(max(1.0 + tr, 0.0))
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif k == 1:
        s = 2.0 * math.sqrt(max(1.0 + R[0, 0] - R[1, 1] - R[2, 2], 0.0))
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif k == 2:
        s = 2.0 * math.sqrt(max(1.0 - R[0, 0] + R[1, 1] - R[2, 2], 0.0))
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(max(1.0 - R[0, 0] - R[1, 1] + R[2, 2], 0.0))
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform with a unit quaternion ``q = (w, x, y, z)`` and translation ``t`` in meters."""

    q: np.ndarray
    t: np.ndarray
    # exact source matrix when built from one, so file round-trips reproduce it bit for bit
    _matrix: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        q = np.array(self.q, dtype=float).reshape(4)
        t = np.array(self.t, dtype=float).reshape(3)
        n = math.sqrt(float(q @ q))
        if n == 0.0 or not np.isfinite(n):
            raise ValueError("quaternion must be finite and nonzero")
        if abs(n - 1.0) > _NORM_SLACK:
            q = q / n
        object.__setattr__(self, "q", _readonly(q))
        object.__setattr__(self, "t", _readonly(t))

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_translation(cls, x: float, y: float = 0.0, z: float = 0.0) -> Pose:
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.array([x, y, z], dtype=float))

    @classmethod
    def from_yaw(cls, yaw: float, t=(0.0, 0.0, 0.0)) -> Pose:
        return cls(np.array([math.cos(yaw / 2), 0.0, 0.0, math.sin(yaw / 2)]), np.asarray(t, float))

    @classmethod
    def from_matrix(cls, T) -> Pose:
        """Build from a 4x4 or 3x4 homogeneous matrix."""
        T = np.asarray(T, dtype=float)
        R = T[:3, :3]
        m = np.eye(4)
        m[:3, :4] = T[:3, :4]
        return cls(matrix_to_quat(R), T[:3, 3].copy(), _readonly(m))

    @property
    def rotation(self) -> np.ndarray:
        if self._matrix is not None:
            return self._matrix[:3, :3]
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        if self._matrix is not None:
            return self._matrix.copy()
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.q)
        m[:3, 3] = self.t
        return m

    def inverse(self) -> Pose:
        qc = np.array([self.q[0], -self.q[1], -self.q[2], -self.q[3]])
        return Pose(qc, -(quat_to_matrix(qc) @ self.t))

    def compose(self, other: Pose) -> Pose:
        q = quat_multiply(self.q, other.q)
        q = q / np.linalg.norm(q)
        return Pose(q, self.t + quat_to_matrix(self.q) @ other.t)

    def __matmul__(self, other: Pose) -> Pose:
        return self.compose(other)

    def transform_point(self, p) -> np.ndarray:
        return quat_to_matrix(self.q) @ np.asarray(p, float) + self.t

    def allclose(self, other: Pose, atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.t, other.t, atol=atol, rtol=0)
            and quaternion_distance(self.q, other.q) <= atol
        )

    def __repr__(self):
        return f"Pose(q={np.round(self.q, 6).tolist()}, t={np.round(self.t, 6).tolist()})"


@dataclass(frozen=True)
class Twist:
    """Tangent vector of SE(3): translational part ``rho`` (m) and rotational part ``phi`` (rad)."""

    rho: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rho", _readonly(np.array(self.rho, dtype=float).reshape(3)))
        object.__setattr__(self, "phi", _readonly(np.array(self.phi, dtype=float).reshape(3)))

    @classmethod
    def from_vector(cls, v) -> Twist:
        v = np.asarray(v, dtype=float)
        return cls(v[:3], v[3:6])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rho, self.phi])


def quaternion_distance(a, b) -> float:
    """Distance between unit quaternions that treats ``q`` and ``-q`` as the same rotation."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    return float(min(np.linalg.norm(a - b), np.linalg.norm(a + b)))


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def inverse(a: Pose) -> Pose:
    return a.inverse()


def relative(a: Pose, b: Pose) -> Pose:
    """Transform taking frame ``a`` to frame ``b``: ``inverse(a) @ b``."""
    return a.inverse().compose(b)


def translation_distance(a: Pose, b: Pose) -> float:
    return float(np.linalg.norm(a.t - b.t))


def rotation_angle(p: Pose) -> float:
    """Geodesic angle of the rotation part, in [0, pi]."""
    w = abs(float(p.q[0]))
    v = float(np.linalg.norm(p.q[1:]))
    return 2.0 * math.atan2(v, w)


def _so3_coeffs(theta):
    """(1 - cos)/theta^2 and (theta - sin)/theta^3 with series near zero."""
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    # 1 - cos written as 2 sin^2(theta/2) to avoid cancellation just above the series switch
    return 2.0 * math.sin(0.5 * theta) ** 2 / theta**2, (theta - math.sin(theta)) / theta**3


def se3_exp(tw: Twist) -> Pose:
    phi = tw.phi
    theta = float(np.linalg.norm(phi))
    if theta < SMALL_ANGLE:
        half = 0.5 - theta * theta / 48.0
    else:
        half = math.sin(theta / 2) / theta
    q = np.array([math.cos(theta / 2), *(half * phi)])
    b, c = _so3_coeffs(theta)
    K = skew(phi)
    V = np.eye(3) + b * K + c * (K @ K)
    return Pose(q / np.linalg.norm(q), V @ tw.rho)


def so3_log_quat(q) -> np.ndarray:
    """Rotation vector of a unit quaternion; raises NearPiRotation near pi."""
    q = np.asarray(q, float)
    if q[0] < 0:
        q = -q
    w = float(q[0])
    v = q[1:]
    nv = float(np.linalg.norm(v))
    theta = 2.0 * math.atan2(nv, w)
    if theta > math.pi - NEAR_PI_MARGIN:
        raise NearPiRotation(f"rotation angle {theta:.9f} is within {NEAR_PI_MARGIN} of pi")
    if nv < 1e-12:
        return (2.0 / w) * v
    return (theta / nv) * v


def se3_log(p: Pose) -> Twist:
    phi = so3_log_quat(p.q)
    theta = float(np.linalg.norm(phi))
    if theta < SMALL_ANGLE:
        d = 1.0 / 12.0 + theta * theta / 720.0
    else:
        d = (1.0 - 0.5 * theta / math.tan(0.5 * theta)) / theta**2
    K = skew(phi)
    V_inv = np.eye(3) - 0.5 * K + d * (K @ K)
    return Twist(V_inv @ p.t, phi)


def umeyama_align(reference: Sequence[Pose], estimate: Sequence[Pose]) -> Pose:
    """Rigid transform ``T`` minimising ``sum |ref_i - T(est_i)|^2`` over translations (no scale)."""
    if len(reference) != len(estimate):
        raise ValueError("sequences must have equal length")
    if len(reference) < 3:
        raise TooFewPoses("alignment needs at least 3 poses")
    ref = np.array([p.t for p in reference])
    est = np.array([p.t for p in estimate])
    return align_points(ref, est)


def align_points(ref: np.ndarray, est: np.ndarray) -> Pose:
    mu_r = ref.mean(axis=0)
    mu_e = est.mean(axis=0)
    cr = ref - mu_r
    ce = est - mu_e
    for pts in (cr, ce):
        s = np.linalg.svd(pts, compute_uv=False)
        if s[0] <= 1e-12 or s[1] <= 1e-9 * s[0]:
            raise DegenerateGeometry("points are coincident or collinear")
    H = ce.T @ cr
    U, _, Vt = np.linalg.svd(H)
    S = np.eye(3)
    if np.linalg.det(Vt.T @ U.T) < 0:
        S[2, 2] = -1.0
    R = Vt.T @ S @ U.T
    t = mu_r - R @ mu_e
    return Pose(matrix_to_quat(R), t)


# -- batched helpers used by the optimiser ---------------------------------------------


def quats_to_matrices(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((len(q), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def retract(q: np.ndarray, t: np.ndarray, delta: np.ndarray):
    """Right-perturb every pose: ``x_k <- x_k @ exp(delta_k)`` for stacked states."""
    rho, phi = delta[:, :3], delta[:, 3:]
    theta = np.linalg.norm(phi, axis=1)
    small = theta < SMALL_ANGLE
    ts = np.where(small, 1.0, theta)
    half = np.where(small, 0.5 - theta**2 / 48.0, np.sin(theta / 2) / ts)
    b = np.where(small, 0.5 - theta**2 / 24.0, 2.0 * np.sin(0.5 * ts) ** 2 / ts**2)
    c = np.where(small, 1 / 6 - theta**2 / 120.0, (theta - np.sin(theta)) / ts**3)
    dq = np.column_stack([np.cos(theta / 2), half[:, None] * phi])
    cross1 = np.cross(phi, rho)
    cross2 = np.cross(phi, cross1)
    dt = rho + b[:, None] * cross1 + c[:, None] * cross2
    R = quats_to_matrices(q)
    w1, v1 = q[:, :1], q[:, 1:]
    w2, v2 = dq[:, :1], dq[:, 1:]
    new_q = np.column_stack(
        [w1[:, 0] * w2[:, 0] - np.sum(v1 * v2, axis=1), w1 * v2 + w2 * v1 + np.cross(v1, v2)]
    )
    new_q /= np.linalg.norm(new_q, axis=1, keepdims=True)
    new_t = t + np.einsum("nij,nj->ni", R, dt)
    return new_q, new_t
