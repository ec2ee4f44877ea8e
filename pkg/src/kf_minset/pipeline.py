"""Orchestration: load data, sample, detect loops, optimise, evaluate.

Each per-method stage reads and writes the files of one method directory, so
the stages can be run one at a time from the command line and ``run_batch``
is just all of them in sequence.
"""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import io
from .descriptors import histogram_entropy
from .errors import CountMismatch, KfMinsetError, MissingChannel, StageError
from .evaluation import (MethodResult, Report, build_report, detection_metrics,
                         trajectory_metrics, write_series_csv)
from .geometry import relative
from .loopclosure import (ENTRY_OVERHEAD_BYTES, CandidateRecord, LoopDetector,
                          read_candidates_csv, write_candidates_csv)
from .posegraph import IncrementalOptimizer, PoseGraph, diagonal_information, optimize
from .sampling import Keyframe, MsaSampler, make_sampler
from .synthworld import Dataset, generate, gt_loop_pairs

log = logging.getLogger(__name__)

THREADS_ENV = "KF_MINSET_THREADS"

KEPT_FILE = "kept_ids.txt"
CANDIDATES_FILE = "candidates.csv"
GRAPH_FILE = "graph.txt"
OPTIMIZED_FILE = "optimized.txt"
LM_LOG_FILE = "lm_log.csv"
TIMING_FILE = "timing.csv"
WINDOWS_FILE = "windows.csv"

DESIGN_FLAGS = {
    "alignment": "rigid (no scale), est aligned onto gt",
    "ate_poses": "kept poses only",
    "fpr_denominator": "all candidates above threshold",
    "odometry_edges": "composed relative motion between consecutive kept keyframes",
    "pi_normalization": "consecutive distances divided by the subset maximum",
    "memory_accounting": f"logical, M*4 + {ENTRY_OVERHEAD_BYTES} bytes per stored keyframe",
}


# -- dataset ---------------------------------------------------------------------------------


def load_dataset(cfg: cfgmod.RunConfig) -> Dataset:
    ds_cfg = cfg.dataset
    if ds_cfg.type == "synthetic":
        return generate(cfg.world_config())
    f = ds_cfg.files
    ts, gt = io.read_poses(f.poses, f.format)
    if f.odometry:
        _, odom = io.read_poses(f.odometry, f.format)
        if len(odom) != len(gt):
            raise CountMismatch(f"{len(odom)} odometry poses vs {len(gt)} ground-truth poses")
        no_drift = False
    else:
        odom, no_drift = list(gt), True
    D = io.read_kfd1(f.descriptors)
    if len(D) != len(gt):
        raise CountMismatch(f"{len(D)} descriptors vs {len(gt)} poses")
    chans = io.read_channels(f.channels) if f.channels else None
    kfs = []
    for i, (t, p, d) in enumerate(zip(ts, odom, D)):
        if chans is not None:
            if i not in chans:
                raise MissingChannel(f"channels file has no row for id {i}")
            s, e = chans[i]
        else:
            s, e = None, histogram_entropy(d)
        kfs.append(Keyframe(i, t, p, d.astype(float), s, e))
    pairs = gt_loop_pairs(np.array([p.t for p in gt]), cfg.loop.gt_radius, cfg.loop.exclusion_gap)
    return Dataset(gt, odom, kfs, pairs, no_drift)


def export_dataset(ds: Dataset, out_dir, fmt: str = "kitti") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ts = [k.timestamp for k in ds.keyframes]
    io.write_poses(out / f"gt.{fmt}", fmt, ts, ds.gt_poses)
    io.write_poses(out / f"odom.{fmt}", fmt, ts, ds.odom_poses)
    io.write_kfd1(out / "descriptors.kfd1", np.array([k.descriptor for k in ds.keyframes]))
    io.write_channels(out / "channels.csv", ds.keyframes)


# -- stages ----------------------------------------------------------------------------------


def threads_cap(n_tasks: int) -> int:
    raw = os.environ.get(THREADS_ENV, "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise cfgmod.ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 0:
        raise cfgmod.ConfigError(f"{THREADS_ENV} must be >= 0")
    if n == 0:
        n = os.cpu_count() or 1
    return max(1, min(n, n_tasks))


def method_dir(cfg: cfgmod.RunConfig, m: cfgmod.MethodConfig) -> Path:
    return Path(cfg.output_dir) / m.label


def sample(ds: Dataset, m: cfgmod.MethodConfig, backend=None):
    """Kept keyframes in stream order, plus the window solutions for MSA."""
    sampler = make_sampler(m.name, m.sampler_config(), m.distance, backend)
    kept = []
    for kf in ds.keyframes:
        kept.extend(sampler.push(kf))
    kept.extend(sampler.flush())
    sols = sampler.solutions if isinstance(sampler, MsaSampler) else []
    return kept, sols


def odometry_information(cfg: cfgmod.RunConfig, steps: int) -> np.ndarray:
    """Inverse of the summed per-step covariance over ``steps`` frames."""
    o = cfg.odometry_info
    k = max(1, steps)
    return diagonal_information(o.sigma_t * np.sqrt(k), o.sigma_r * np.sqrt(k), cfg.loop.info_sigma_floor)


def build_graph(ds: Dataset, kept_ids, cfg: cfgmod.RunConfig, loop_edges=()) -> PoseGraph:
    g = PoseGraph()
    prev = None
    for nid in kept_ids:
        g.add_node(nid, ds.odom_poses[nid], fixed=prev is None)
        if prev is not None:
            z = relative(ds.odom_poses[prev], ds.odom_poses[nid])
            g.add_odometry_edge(prev, nid, z, odometry_information(cfg, nid - prev))
        prev = nid
    for e in loop_edges:
        g.add_loop_edge(e.i, e.j, e.z, e.info)
    return g


def evaluate(ds: Dataset, label: str, kept_ids, records, optimized: dict, dim: int,
             rpe_delta: int = 1, total_time=None, extra=None) -> MethodResult:
    """Summary row for one method, from values that are all recoverable from the artifacts."""
    gt = {i: ds.gt_poses[i] for i in kept_ids}
    odom = {i: ds.odom_poses[i] for i in kept_ids}
    before = trajectory_metrics(gt, odom, rpe_delta)
    after = trajectory_metrics(gt, optimized, rpe_delta)
    peak = len(kept_ids) * (dim * 4 + ENTRY_OVERHEAD_BYTES)
    return MethodResult(label, len(kept_ids), before, after, detection_metrics(records), peak,
                        total_time, dict(extra or {}))


@dataclass
class MethodRun:
    result: MethodResult
    kept_ids: list
    optimized: dict
    graph: PoseGraph
    series: dict


def _stage(name, label, fn, *args):
    try:
        return fn(*args)
    except Exception as exc:
        _reraise(name, label, exc)


def _write_timing(path, timing: dict) -> None:
    write_series_csv(path, ("stage", "seconds"), timing.items())


def _batch_method(ds: Dataset, cfg: cfgmod.RunConfig, m: cfgmod.MethodConfig, backend=None) -> MethodRun:
    label = m.label
    out = method_dir(cfg, m)
    out.mkdir(parents=True, exist_ok=True)
    timing = {}

    t0 = time.perf_counter()
    kept, sols = _stage("sample", label, sample, ds, m, backend)
    timing["sample"] = time.perf_counter() - t0
    kept_ids = [k.id for k in kept]
    io.write_ids(out / KEPT_FILE, kept_ids)
    if sols:
        _write_windows(out / WINDOWS_FILE, sols)

    t0 = time.perf_counter()
    det = LoopDetector(cfg.loop_params(), ds.gt_poses)
    _stage("loops", label, lambda: [det.process(k) for k in kept])
    timing["loops"] = time.perf_counter() - t0
    write_candidates_csv(out / CANDIDATES_FILE, det.result.records)

    g = _stage("graph", label, build_graph, ds, kept_ids, cfg, det.result.edges)
    io.write_graph(out / GRAPH_FILE, g)

    t0 = time.perf_counter()
    res = _stage("pgo", label, optimize, g, cfg.lm, backend)
    timing["pgo"] = time.perf_counter() - t0
    optimized = {i: res.poses[i] for i in kept_ids}
    io.write_trajectory(out / OPTIMIZED_FILE, optimized)
    _write_lm_log(out / LM_LOG_FILE, res)

    total = sum(timing.values())
    timing["total"] = total
    if cfg.record_timing:
        _write_timing(out / TIMING_FILE, timing)
    dim = len(ds.keyframes[0].descriptor)
    result = _stage("eval", label, evaluate, ds, label, kept_ids, det.result.records, optimized, dim,
                    cfg.rpe_delta, total if cfg.record_timing else None)
    return MethodRun(result, kept_ids, optimized, g, {})


def _write_windows(path, sols) -> None:
    rows = []
    for s in sols:
        rows.append(" ".join(str(i) for i in s.ids))
    with open(path, "w") as fh:
        fh.write("selected,rho,pi,objective,candidates_evaluated,feasible\n")
        for s, ids in zip(sols, rows):
            fh.write(f"{ids},{s.rho!r},{s.pi!r},{s.objective!r},{s.candidates_evaluated},{int(s.feasible)}\n")


def _write_lm_log(path, res) -> None:
    with open(path, "w") as fh:
        fh.write("iteration,error,lambda\n")
        for h in res.log:
            fh.write(f"{h['iteration']},{h['error']!r},{h['lambda']!r}\n")
        fh.write(f"# {res.reason} after {res.iterations} iterations\n")


def _metadata(cfg: cfgmod.RunConfig, mode: str, ds: Dataset) -> dict:
    md = dict(DESIGN_FLAGS)
    md.update({
        "mode": mode,
        "seed": cfg.seed,
        "dataset": cfg.dataset.type,
        "no_drift": ds.no_drift,
        "keyframes": len(ds.keyframes),
        "scoring_mode": {m.label: m.scoring_mode for m in cfg.methods if m.name == "msa"},
        "config": {k: v for k, v in json.loads(cfgmod.dumps(cfg)).items() if k != "output_dir"},
        "timing_recorded": cfg.record_timing,
    })
    return md


def _run_methods(fn, cfg, ds, backend):
    n = threads_cap(len(cfg.methods))
    if n == 1:
        return [fn(ds, cfg, m, backend) for m in cfg.methods]
    with ThreadPoolExecutor(max_workers=n) as ex:
        futs = [ex.submit(fn, ds, cfg, m, backend) for m in cfg.methods]
        return [f.result() for f in futs]


def _finish(cfg, ds, mode, runs) -> Report:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfgmod.dumps(cfg))
    report = build_report([r.result for r in runs], _metadata(cfg, mode, ds))
    report.write(out)
    return report


def run_batch(cfg: cfgmod.RunConfig, backend=None, dataset: Dataset | None = None):
    """Sample, detect, optimise and evaluate every method; returns (report, runs)."""
    ds = dataset if dataset is not None else _stage("load", "-", load_dataset, cfg)
    runs = _run_methods(_batch_method, cfg, ds, backend)
    return _finish(cfg, ds, "batch", runs), runs


# -- online ----------------------------------------------------------------------------------


class OnlineMethod:
    """Streaming pipeline of one method: sample, query, verify, insert, append, re-optimise.

    ``elapsed`` accumulates only the time spent inside this method, so several
    methods can share one stream in lockstep.
    """

    def __init__(self, ds: Dataset, cfg: cfgmod.RunConfig, m: cfgmod.MethodConfig, backend=None):
        self.ds, self.cfg, self.m = ds, cfg, m
        self.sampler = make_sampler(m.name, m.sampler_config(), m.distance, backend)
        self.det = LoopDetector(cfg.loop_params(), ds.gt_poses)
        self.opt = IncrementalOptimizer(cfg.lm, cfg.reopt_every, backend)
        self.memory, self.query_time, self.pgo_time = [], [], []
        self.kept_ids: list = []
        self.elapsed = 0.0
        self.step = 0
        self._final = None

    def _handle(self, kf):
        det, opt = self.det, self.opt
        n_edges = len(det.result.edges)
        det.process(kf)
        self.memory.append((self.step, det.result.memory[-1][1]))
        self.query_time.append((self.step, det.result.query_times[-1][1]))
        loops = [(e.i, e.j, e.z, e.info) for e in det.result.edges[n_edges:]]
        prev = self.kept_ids[-1] if self.kept_ids else None
        info = None if prev is None else odometry_information(self.cfg, kf.id - prev)
        n_solves = len(opt.solve_times)
        opt.add_keyframe(kf.id, kf.pose, info, loops)
        self.kept_ids.append(kf.id)
        if len(opt.solve_times) > n_solves:
            self.pgo_time.append((self.step, opt.solve_times[-1][1]))

    def push(self, step: int, kf) -> None:
        t0 = time.perf_counter()
        self.step = step
        try:
            for k in self.sampler.push(kf):
                self._handle(k)
        except Exception as exc:
            _reraise("online", self.m.label, exc)
        self.elapsed += time.perf_counter() - t0

    def close(self) -> None:
        t0 = time.perf_counter()
        try:
            for k in self.sampler.flush():
                self._handle(k)
            n_solves = len(self.opt.solve_times)
            self._final = self.opt.finish()
        except Exception as exc:
            _reraise("online", self.m.label, exc)
        if len(self._final.solve_times) > n_solves:
            self.pgo_time.append((self.step, self._final.solve_times[-1][1]))
        self.elapsed += time.perf_counter() - t0

    def write(self) -> MethodRun:
        cfg, m, ds = self.cfg, self.m, self.ds
        res = self._final
        out = method_dir(cfg, m)
        out.mkdir(parents=True, exist_ok=True)
        optimized = {i: res.final[i] for i in self.kept_ids}
        io.write_ids(out / KEPT_FILE, self.kept_ids)
        write_candidates_csv(out / CANDIDATES_FILE, self.det.result.records)
        io.write_graph(out / GRAPH_FILE, res.graph)
        io.write_trajectory(out / OPTIMIZED_FILE, optimized)
        write_series_csv(out / "memory.csv", ("step", "bytes"), self.memory)
        timed = cfg.record_timing
        nan = float("nan")
        for name, ser in (("query_time.csv", self.query_time), ("pgo_time.csv", self.pgo_time)):
            write_series_csv(out / name, ("step", "seconds"), ser if timed else [(s, nan) for s, _ in ser])
        if timed:
            _write_timing(out / TIMING_FILE, {"total": self.elapsed})
        dim = len(ds.keyframes[0].descriptor)
        result = _stage("eval", m.label, evaluate, ds, m.label, self.kept_ids, self.det.result.records,
                        optimized, dim, cfg.rpe_delta, self.elapsed if timed else None)
        series = {"memory": self.memory, "query_time": self.query_time, "pgo_time": self.pgo_time}
        return MethodRun(result, list(self.kept_ids), optimized, res.graph, series)


def _reraise(stage, label, exc):
    if isinstance(exc, StageError):
        raise exc
    if isinstance(exc, (KfMinsetError, OSError, ValueError, KeyError, ArithmeticError, np.linalg.LinAlgError)):
        raise StageError(stage, label, exc) from exc
    raise exc


def _online_method(ds: Dataset, cfg: cfgmod.RunConfig, m: cfgmod.MethodConfig, backend=None) -> MethodRun:
    p = OnlineMethod(ds, cfg, m, backend)
    for step, kf in enumerate(ds.keyframes):
        p.push(step, kf)
    p.close()
    return p.write()


def run_online(cfg: cfgmod.RunConfig, backend=None, dataset: Dataset | None = None):
    """Stream keyframes, maintain the database and graph incrementally; returns (report, runs).

    With timing recorded, all methods consume the stream in lockstep on one
    thread, so machine load affects every method's timings alike. Otherwise
    methods run in parallel.
    """
    ds = dataset if dataset is not None else _stage("load", "-", load_dataset, cfg)
    if cfg.record_timing:
        pipes = [OnlineMethod(ds, cfg, m, backend) for m in cfg.methods]
        for step, kf in enumerate(ds.keyframes):
            for p in pipes:
                p.push(step, kf)
        for p in pipes:
            p.close()
        runs = [p.write() for p in pipes]
    else:
        runs = _run_methods(_online_method, cfg, ds, backend)
    return _finish(cfg, ds, "online", runs), runs


# -- single stages for the command line ------------------------------------------------------


def stage_synth(cfg: cfgmod.RunConfig, fmt: str = "kitti") -> Path:
    ds = _stage("load", "-", load_dataset, cfg)
    out = Path(cfg.output_dir)
    export_dataset(ds, out, fmt)
    return out


def stage_sample(cfg: cfgmod.RunConfig, backend=None) -> None:
    ds = _stage("load", "-", load_dataset, cfg)
    for m in cfg.methods:
        kept, sols = _stage("sample", m.label, sample, ds, m, backend)
        out = method_dir(cfg, m)
        out.mkdir(parents=True, exist_ok=True)
        io.write_ids(out / KEPT_FILE, [k.id for k in kept])
        if sols:
            _write_windows(out / WINDOWS_FILE, sols)


def _read_kept(cfg, m) -> list:
    path = method_dir(cfg, m) / KEPT_FILE
    if not path.exists():
        raise StageError("load", m.label, FileNotFoundError(f"{path} missing; run 'sample' first"))
    return io.read_ids(path)


def stage_loops(cfg: cfgmod.RunConfig) -> None:
    """Detect and verify loops over the kept ids, then write candidates and the initial graph."""
    ds = _stage("load", "-", load_dataset, cfg)
    for m in cfg.methods:
        kept_ids = _read_kept(cfg, m)
        det = LoopDetector(cfg.loop_params(), ds.gt_poses)
        _stage("loops", m.label, lambda: [det.process(ds.keyframes[i]) for i in kept_ids])
        out = method_dir(cfg, m)
        write_candidates_csv(out / CANDIDATES_FILE, det.result.records)
        g = _stage("graph", m.label, build_graph, ds, kept_ids, cfg, det.result.edges)
        io.write_graph(out / GRAPH_FILE, g)


def stage_pgo(cfg: cfgmod.RunConfig, backend=None) -> None:
    for m in cfg.methods:
        out = method_dir(cfg, m)
        g = _stage("pgo", m.label, io.read_graph, out / GRAPH_FILE)
        res = _stage("pgo", m.label, optimize, g, cfg.lm, backend)
        io.write_trajectory(out / OPTIMIZED_FILE, {i: res.poses[i] for i in g.order})
        _write_lm_log(out / LM_LOG_FILE, res)


def _read_total_time(path):
    if not path.exists():
        return None
    for line in path.read_text().splitlines()[1:]:
        stage, secs = line.split(",")
        if stage == "total":
            return float(secs)
    return None


def evaluate_artifacts(cfg: cfgmod.RunConfig, m: cfgmod.MethodConfig, ds: Dataset) -> MethodResult:
    out = method_dir(cfg, m)
    kept_ids = _read_kept(cfg, m)
    records: list[CandidateRecord] = read_candidates_csv(out / CANDIDATES_FILE)
    optimized = io.read_trajectory(out / OPTIMIZED_FILE)
    total = _read_total_time(out / TIMING_FILE) if cfg.record_timing else None
    dim = len(ds.keyframes[0].descriptor)
    return evaluate(ds, m.label, kept_ids, records, optimized, dim, cfg.rpe_delta, total)


def stage_eval(cfg: cfgmod.RunConfig, mode: str = "batch") -> Report:
    ds = _stage("load", "-", load_dataset, cfg)
    rows = [_stage("eval", m.label, evaluate_artifacts, cfg, m, ds) for m in cfg.methods]
    report = build_report(rows, _metadata(cfg, mode, ds))
    out = Path(cfg.output_dir)
    (out / "config.json").write_text(cfgmod.dumps(cfg))
    report.write(out)
    return report


__all__ = [
    "load_dataset", "export_dataset", "sample", "build_graph", "evaluate", "run_batch", "run_online",
    "stage_synth", "stage_sample", "stage_loops", "stage_pgo", "stage_eval", "evaluate_artifacts",
    "threads_cap", "odometry_information", "MethodRun",
]
