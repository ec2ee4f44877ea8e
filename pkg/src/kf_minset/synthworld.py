"""Deterministic synthetic datasets: planar trajectories with revisits, drifting odometry,
descriptors from the synthetic field and the scalar channels used by baseline samplers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .descriptors import DescriptorFieldParams, field_eval_many, histogram_entropy
from .geometry import Pose, Twist, relative, se3_exp
from .sampling import Keyframe

FRAME_PERIOD = 0.1
TRAJECTORY_KINDS = ("circle", "figure_eight", "grid_walk", "line")


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str = "circle"
    radius: float = 50.0
    laps: int = 2
    scale: float = 40.0
    blocks: int = 4
    block_length: float = 20.0
    revisit_prob: float = 0.5
    length: float = 200.0

    def __post_init__(self):
        if self.kind not in TRAJECTORY_KINDS:
            raise ValueError(f"trajectory kind must be one of {TRAJECTORY_KINDS}")


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    keyframe_spacing: float = 1.0
    odom_sigma_t: float = 0.05
    odom_sigma_r: float = 0.002
    field: DescriptorFieldParams = field(default_factory=DescriptorFieldParams)
    spaciousness_field_scale: float = 6.0
    gt_radius: float = 1.0
    exclusion_gap: int = 50

    def __post_init__(self):
        if not self.keyframe_spacing > 0:
            raise ValueError("keyframe_spacing must be positive")
        if self.odom_sigma_t < 0 or self.odom_sigma_r < 0:
            raise ValueError("odometry sigmas must be nonnegative")


@dataclass
class Dataset:
    gt_poses: list
    odom_poses: list
    keyframes: list
    gt_loop_pairs: set
    no_drift: bool = False

    def __len__(self):
        return len(self.keyframes)

    @property
    def gt_positions(self) -> np.ndarray:
        return np.array([p.t for p in self.gt_poses])


# -- paths ---------------------------------------------------------------------------------


def _resample(points: np.ndarray, spacing: float):
    """Points every ``spacing`` meters of arc length along a dense polyline, with headings."""
    seg = np.diff(points, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    keep = seg_len > 0
    points = np.vstack([points[:1], points[1:][keep]])
    seg, seg_len = seg[keep], seg_len[keep]
    s = np.concatenate([[0.0], np.cumsum(seg_len)])
    n = int(math.floor(s[-1] / spacing + 1e-9)) + 1
    targets = np.arange(n) * spacing
    idx = np.clip(np.searchsorted(s, targets, side="right") - 1, 0, len(seg) - 1)
    frac = (targets - s[idx]) / seg_len[idx]
    xy = points[idx] + frac[:, None] * seg[idx]
    yaw = np.arctan2(seg[idx, 1], seg[idx, 0])
    return xy, yaw


def _circle(spec: TrajectorySpec, spacing: float):
    total = 2 * math.pi * spec.radius * spec.laps
    n = int(math.floor(total / spacing + 1e-9)) + 1
    ang = np.arange(n) * spacing / spec.radius
    xy = spec.radius * np.column_stack([np.cos(ang), np.sin(ang)])
    return xy, ang + math.pi / 2


def _figure_eight(spec: TrajectorySpec, spacing: float):
    t = np.linspace(0.0, 2 * math.pi * spec.laps, 20000 * spec.laps + 1)
    pts = spec.scale * np.column_stack([np.sin(t), np.sin(t) * np.cos(t)])
    return _resample(pts, spacing)


def _line(spec: TrajectorySpec, spacing: float):
    return _resample(np.array([[0.0, 0.0], [spec.length, 0.0]]), spacing)


def _grid_walk(spec: TrajectorySpec, spacing: float, rng: np.random.Generator):
    b = spec.blocks
    node = (0, 0)
    visited = {node}
    nodes = [node]
    for _ in range(2 * b * b):
        x, y = node
        nbrs = [(x + dx, y + dy) for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1))
                if 0 <= x + dx <= b and 0 <= y + dy <= b]
        if len(nodes) > 1:
            back = [m for m in nbrs if m != nodes[-2]]
            nbrs = back or nbrs
        seen = [m for m in nbrs if m in visited]
        fresh = [m for m in nbrs if m not in visited]
        if seen and (not fresh or rng.random() < spec.revisit_prob):
            pool = seen
        else:
            pool = fresh or nbrs
        node = pool[int(rng.integers(len(pool)))]
        visited.add(node)
        nodes.append(node)
    pts = np.array(nodes, dtype=float) * spec.block_length
    return _resample(pts, spacing)


def ground_truth_path(cfg: WorldConfig):
    spec = cfg.trajectory
    if spec.kind == "circle":
        return _circle(spec, cfg.keyframe_spacing)
    if spec.kind == "figure_eight":
        return _figure_eight(spec, cfg.keyframe_spacing)
    if spec.kind == "line":
        return _line(spec, cfg.keyframe_spacing)
    return _grid_walk(spec, cfg.keyframe_spacing, np.random.default_rng([cfg.seed, 7]))


# -- channels ------------------------------------------------------------------------------


def spaciousness_at(cfg: WorldConfig, xy: np.ndarray) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, 11])
    ph = rng.uniform(0, 2 * math.pi, 2)
    return cfg.spaciousness_field_scale * (
        1.0 + 0.5 * np.sin(xy[:, 0] / 20.0 + ph[0]) * np.cos(xy[:, 1] / 20.0 + ph[1])
    )


# -- generation ----------------------------------------------------------------------------


def gt_loop_pairs(positions, radius: float = 1.0, exclusion_gap: int = 50) -> set:
    """All pairs ``(i, j)``, ``j - i >= exclusion_gap``, closer than ``radius`` (strict)."""
    if hasattr(positions, "gt_poses"):
        positions = positions.gt_positions
    X = np.asarray(positions, dtype=float)
    out = set()
    for i in range(len(X)):
        j0 = i + max(exclusion_gap, 1)
        if j0 >= len(X):
            break
        d = np.linalg.norm(X[j0:] - X[i], axis=1)
        for j in np.flatnonzero(d < radius):
            out.add((i, int(j0 + j)))
    return out


def drift_odometry(gt: list, sigma_t: float, sigma_r: float, rng: np.random.Generator) -> list:
    """Dead reckoning from noisy relative motions; exact copy of ``gt`` when both sigmas are zero."""
    if sigma_t == 0 and sigma_r == 0:
        return list(gt)
    odom = [gt[0]]
    for a, b in zip(gt, gt[1:]):
        noise = se3_exp(Twist(rng.normal(0, sigma_t, 3), rng.normal(0, sigma_r, 3)))
        odom.append(odom[-1].compose(relative(a, b).compose(noise)))
    return odom


def generate(cfg: WorldConfig) -> Dataset:
    xy, yaw = ground_truth_path(cfg)
    gt = [Pose.from_yaw(float(a), (float(x), float(y), 0.0)) for (x, y), a in zip(xy, yaw)]
    odom = drift_odometry(gt, cfg.odom_sigma_t, cfg.odom_sigma_r, np.random.default_rng([cfg.seed, 1]))
    pos3 = np.column_stack([xy, np.zeros(len(xy))])
    noise_rng = np.random.default_rng([cfg.seed, 3]) if cfg.field.noise_sigma > 0 else None
    desc = field_eval_many(cfg.field, pos3, noise_rng)
    spac = spaciousness_at(cfg, xy)
    kfs = [
        Keyframe(i, i * FRAME_PERIOD, odom[i], desc[i], float(spac[i]), histogram_entropy(desc[i]))
        for i in range(len(gt))
    ]
    pairs = gt_loop_pairs(pos3, cfg.gt_radius, cfg.exclusion_gap)
    return Dataset(gt, odom, kfs, pairs, no_drift=cfg.odom_sigma_t == 0 and cfg.odom_sigma_r == 0)
