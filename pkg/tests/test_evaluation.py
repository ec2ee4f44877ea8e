import math

import numpy as np
import pytest

from kf_minset.errors import TooFewPoses, ZeroBaseline
from kf_minset.evaluation import (DetectionMetrics, MethodResult, TrajectoryMetrics, ate, ate_improvement,
                                  build_report, detection_metrics, fpr, rpe)
from kf_minset.geometry import Pose, Twist, se3_exp
from kf_minset.loopclosure import FALSE_POSITIVE, TRUE_POSITIVE, CandidateRecord, LoopCandidate


def wavy(n=100, rng=None):
    rng = rng or np.random.default_rng(0)
    return [Pose.from_yaw(0.05 * k, (k * 0.5, 3 * math.sin(0.1 * k), 0.2 * math.cos(0.07 * k))) for k in range(n)]


def brute_ate(gt, est):
    """RMSE after an SVD alignment written from scratch."""
    G = np.array([p.t for p in gt])
    E = np.array([p.t for p in est])
    mg, me = G.mean(0), E.mean(0)
    U, _, Vt = np.linalg.svd((E - me).T @ (G - mg))
    D = np.diag([1, 1, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    t = mg - R @ me
    return float(np.sqrt(np.mean(np.sum((G - (E @ R.T + t)) ** 2, axis=1))))


class TestAte:
    def test_identity(self):
        gt = wavy()
        assert ate(gt, gt) == pytest.approx((0.0, 0.0), abs=1e-12)

    def test_shift_removed(self):
        gt = wavy()
        est = [Pose.from_translation(1, 0, 0) @ p for p in gt]
        t, r = ate(gt, est)
        assert t < 1e-9 and r < 1e-9

    def test_one_displaced_pose(self):
        gt = wavy()
        est = list(gt)
        est[40] = Pose(gt[40].q, gt[40].t + [1.0, 0, 0])
        assert abs(ate(gt, est)[0] - brute_ate(gt, est)) < 1e-12

    def test_rotation_error(self):
        gt = wavy(20)
        # a constant extra yaw on orientations only; positions untouched
        est = [Pose((p @ Pose.from_yaw(0.1)).q, p.t) for p in gt]
        assert abs(ate(gt, est)[1] - 0.1) < 1e-9

    def test_joint_rigid_invariance(self, rng):
        gt = wavy()
        est = [p @ se3_exp(Twist.from_vector(rng.normal(0, 0.05, 6))) for p in gt]
        G = se3_exp(Twist.from_vector(rng.normal(size=6)))
        a = ate(gt, est)
        b = ate([G @ p for p in gt], [G @ p for p in est])
        assert abs(a[0] - b[0]) < 1e-9 and abs(a[1] - b[1]) < 1e-9

    def test_by_id(self):
        gt = dict(enumerate(wavy(10)))
        est = {k: gt[k] for k in (2, 5, 7, 9)}
        assert ate(gt, est)[0] < 1e-12

    def test_too_few(self):
        with pytest.raises(TooFewPoses):
            ate(wavy(2), wavy(2))


class TestImprovement:
    def test_values(self):
        assert ate_improvement(2.0, 0.5) == 75.0
        assert ate_improvement(1.0, 1.0) == 0.0
        assert ate_improvement(1.0, 1.1) == pytest.approx(-10.0)

    def test_zero_baseline(self):
        with pytest.raises(ZeroBaseline):
            ate_improvement(0.0, 0.0)


class TestRpe:
    def test_identity(self):
        gt = wavy()
        assert rpe(gt, gt) == (0.0, 0.0)

    def test_constant_drift(self):
        gt = [Pose.from_translation(k, 0, 0) for k in range(50)]
        est = [Pose.from_translation(k * 1.03, 0, 0) for k in range(50)]
        t, r = rpe(gt, est, 1)
        assert abs(t - 0.03) < 1e-12 and r == 0.0

    def test_full_span(self):
        gt = [Pose.from_translation(k, 0, 0) for k in range(5)]
        est = list(gt)
        est[-1] = Pose.from_translation(4.5, 0, 0)
        assert rpe(gt, est, 4)[0] == pytest.approx(0.5)

    def test_exact_odometry_zero(self, rng):
        gt = [Pose.identity()]
        for _ in range(30):
            gt.append(gt[-1] @ se3_exp(Twist.from_vector(rng.normal(size=6) * 0.3)))
        G = se3_exp(Twist.from_vector(rng.normal(size=6)))
        t, r = rpe(gt, [G @ p for p in gt], 1)
        assert t < 1e-9 and r < 1e-9

    def test_too_few(self):
        with pytest.raises(TooFewPoses):
            rpe(wavy(3), wavy(3), 3)


def _cands(n_tp, n_fp):
    return ([LoopCandidate(100 + i, i, 0.9, 0.1, TRUE_POSITIVE) for i in range(n_tp)]
            + [LoopCandidate(200 + i, i, 0.9, 30.0, FALSE_POSITIVE) for i in range(n_fp)])


class TestFpr:
    def test_empty(self):
        assert fpr([]) == 0.0

    def test_hand_count(self):
        assert fpr(_cands(17, 3)) == 0.15

    def test_all_true(self):
        assert fpr(_cands(5, 0)) == 0.0

    def test_detection_metrics(self, rng):
        cands = _cands(11, 4)
        recs = [CandidateRecord(c, bool(rng.random() < 0.5), 0.1) for c in cands]
        m = detection_metrics(recs)
        assert (m.candidates, m.true_positives, m.false_positives) == (15, 11, 4)
        assert m.verified_edges == sum(r.verified for r in recs)
        assert m.fpr == fpr(cands)


def _result(name="all", kept=10):
    tm = TrajectoryMetrics(2.0, 0.02, 0.1, 0.001, kept)
    tm2 = TrajectoryMetrics(0.5, 0.01, 0.05, 0.0005, kept)
    return MethodResult(name, kept, tm, tm2, DetectionMetrics(4, 3, 1, 3, 0.25), kept * 1088, 1.5)


class TestReport:
    def test_single_row(self, tmp_path):
        r = build_report([_result()], {"seed": 1})
        r.write(tmp_path)
        lines = (tmp_path / "summary.csv").read_text().splitlines()
        assert lines == ["method,kept,ate_t_impr,ate_r_impr,fpr,peak_mem,total_time", "all,10,75.0,50.0,0.25,10880,1.5"]
        assert "[summary]" in (tmp_path / "report.txt").read_text()

    def test_deterministic(self):
        a = build_report([_result(), _result("msa", 5)], {"seed": 1, "cfg": {"b": 1, "a": 2}})
        b = build_report([_result(), _result("msa", 5)], {"cfg": {"a": 2, "b": 1}, "seed": 1})
        assert a.render() == b.render() and a.summary_csv() == b.summary_csv()

    def test_zero_baseline_is_nan(self):
        tm = TrajectoryMetrics(0.0, 0.0, 0.0, 0.0, 3)
        r = build_report([MethodResult("all", 3, tm, tm, DetectionMetrics(0, 0, 0, 0, 0.0), 0)], {})
        assert r.summary_csv().splitlines()[1] == "all,3,nan,nan,0.0,0,nan"

    def test_empty(self):
        with pytest.raises(ValueError):
            build_report([], {})
