"""Trajectory and detection metrics, and the benchmark report."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import TooFewPoses, ZeroBaseline
from .geometry import Pose, align_points, quats_to_matrices, relative, rotation_angle
from .loopclosure import FALSE_POSITIVE, TRUE_POSITIVE

SUMMARY_HEADER = ["method", "kept", "ate_t_impr", "ate_r_impr", "fpr", "peak_mem", "total_time"]


@dataclass(frozen=True)
class TrajectoryMetrics:
    ate_trans: float
    ate_rot: float
    rpe_trans: float
    rpe_rot: float
    n_poses: int


@dataclass(frozen=True)
class DetectionMetrics:
    candidates: int
    true_positives: int
    false_positives: int
    verified_edges: int
    fpr: float


def associate(gt, est):
    """Pair poses by id when both are mappings, by position when both are sequences."""
    if isinstance(gt, Mapping) and isinstance(est, Mapping):
        ids = [k for k in est if k in gt]
        return [gt[k] for k in ids], [est[k] for k in ids]
    if isinstance(gt, Mapping) or isinstance(est, Mapping):
        raise TypeError("pass two mappings or two sequences")
    if len(gt) != len(est):
        raise ValueError("trajectories differ in length")
    return list(gt), list(est)


def _rot_angles(Ra: np.ndarray, Rb: np.ndarray) -> np.ndarray:
    """Geodesic angles between stacked rotation matrices."""
    c = (np.einsum("nij,nij->n", Ra, Rb) - 1.0) / 2.0
    ang = np.arccos(np.clip(c, -1.0, 1.0))
    # arccos loses precision near zero; use the skew part there
    small = ang < 1e-3
    if np.any(small):
        M = np.einsum("nji,njk->nik", Ra[small], Rb[small])
        v = np.stack([M[:, 2, 1] - M[:, 1, 2], M[:, 0, 2] - M[:, 2, 0], M[:, 1, 0] - M[:, 0, 1]], 1)
        ang[small] = np.arcsin(np.clip(np.linalg.norm(v, axis=1) / 2.0, 0.0, 1.0))
    return ang


def ate(gt, est, align: bool = True) -> tuple:
    """(translational RMSE [m], rotational RMSE [rad]) after rigid alignment of ``est`` onto ``gt``."""
    g, e = associate(gt, est)
    if len(g) < 3:
        raise TooFewPoses("ATE needs at least 3 associated poses")
    G = np.array([p.t for p in g])
    E = np.array([p.t for p in e])
    if align:
        T = align_points(G, E)
    else:
        T = Pose.identity()
    R = T.rotation
    E_al = E @ R.T + T.t
    t_rmse = float(np.sqrt(np.mean(np.sum((G - E_al) ** 2, axis=1))))
    Rg = quats_to_matrices(np.array([p.q for p in g]))
    Re = np.einsum("ij,njk->nik", R, quats_to_matrices(np.array([p.q for p in e])))
    r_rmse = float(np.sqrt(np.mean(_rot_angles(Rg, Re) ** 2)))
    return t_rmse, r_rmse


def rpe(gt, est, delta: int = 1) -> tuple:
    """(translational RMSE, rotational RMSE) of relative-motion errors over ``delta`` steps."""
    g, e = associate(gt, est)
    if delta < 1:
        raise ValueError("delta must be >= 1")
    if len(g) <= delta:
        raise TooFewPoses(f"RPE with delta={delta} needs more than {delta} poses")
    tr, rot = [], []
    for i in range(len(g) - delta):
        err = relative(relative(g[i], g[i + delta]), relative(e[i], e[i + delta]))
        tr.append(float(err.t @ err.t))
        rot.append(rotation_angle(err) ** 2)
    return math.sqrt(np.mean(tr)), math.sqrt(np.mean(rot))


def ate_improvement(before: float, after: float) -> float:
    """Percent reduction from ``before`` to ``after``; negative when the error grew."""
    if not before > 0:
        raise ZeroBaseline("ATE improvement needs a positive baseline")
    return 100.0 * (before - after) / before


def fpr(candidates: Sequence) -> float:
    """False positives over all candidates above threshold; 0 for no candidates."""
    if not candidates:
        return 0.0
    fp = sum(1 for c in candidates if c.classification == FALSE_POSITIVE)
    return fp / len(candidates)


def detection_metrics(records) -> DetectionMetrics:
    cands = [r.candidate for r in records]
    tp = sum(1 for c in cands if c.classification == TRUE_POSITIVE)
    fp = len(cands) - tp
    return DetectionMetrics(len(cands), tp, fp, sum(1 for r in records if r.verified),
                            fp / max(1, len(cands)))


def trajectory_metrics(gt, est, delta: int = 1) -> TrajectoryMetrics:
    g, e = associate(gt, est)
    at, ar = ate(g, e)
    rt, rr = rpe(g, e, delta)
    return TrajectoryMetrics(at, ar, rt, rr, len(g))


# -- report --------------------------------------------------------------------------------


@dataclass
class MethodResult:
    method: str
    kept: int
    before: TrajectoryMetrics
    after: TrajectoryMetrics
    detection: DetectionMetrics
    peak_mem: int
    total_time: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def ate_t_impr(self) -> float:
        return ate_improvement(self.before.ate_trans, self.after.ate_trans)

    @property
    def ate_r_impr(self) -> float:
        return ate_improvement(self.before.ate_rot, self.after.ate_rot)


def _fmt(v) -> str:
    if v is None:
        return "nan"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _safe_impr(before, after):
    try:
        return ate_improvement(before, after)
    except ZeroBaseline:
        return float("nan")


@dataclass
class Report:
    metadata: dict
    rows: list

    def summary_rows(self) -> list:
        out = []
        for r in self.rows:
            out.append([r.method, r.kept, _safe_impr(r.before.ate_trans, r.after.ate_trans),
                        _safe_impr(r.before.ate_rot, r.after.ate_rot), r.detection.fpr,
                        r.peak_mem, r.total_time])
        return out

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for row in self.summary_rows():
            w.writerow([_fmt(v) for v in row])
        return buf.getvalue()

    def render(self) -> str:
        lines = ["[metadata]"]
        for k in sorted(self.metadata):
            v = self.metadata[k]
            if isinstance(v, (dict, list)):
                v = json.dumps(v, sort_keys=True)
            lines.append(f"{k} = {v}")
        lines += ["", "[summary]", " | ".join(SUMMARY_HEADER)]
        for row in self.summary_rows():
            lines.append(" | ".join(_fmt(v) for v in row))
        lines += ["", "[details]"]
        for r in self.rows:
            lines.append(f"method = {r.method}")
            for label, m in (("before", r.before), ("after", r.after)):
                for k, v in asdict(m).items():
                    lines.append(f"  {label}.{k} = {_fmt(v)}")
            for k, v in asdict(r.detection).items():
                lines.append(f"  detection.{k} = {_fmt(v)}")
            for k in sorted(r.extra):
                lines.append(f"  {k} = {_fmt(r.extra[k])}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(self.render())
        (out / "summary.csv").write_text(self.summary_csv())


def build_report(results: Sequence[MethodResult], metadata: dict) -> Report:
    if not results:
        raise ValueError("report needs at least one method result")
    return Report(dict(metadata), list(results))


def write_series_csv(path, header: tuple, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for a, b in rows:
            w.writerow([a, _fmt(b)])
