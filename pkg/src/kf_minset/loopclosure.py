"""Descriptor database, loop candidate search and simulated registration."""

from __future__ import annotations

import csv
import math
import threading
import time
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from ._jit import resolve_backend
from .errors import DuplicateId, MissingGroundTruth
from .geometry import Pose, Twist, relative, se3_exp, translation_distance
from .kernels import search as _search
from .posegraph import diagonal_information

TRUE_POSITIVE = "true_positive"
FALSE_POSITIVE = "false_positive"
CANDIDATE_HEADER = ["query_id", "match_id", "similarity", "gt_distance", "class", "verified", "residual"]

# id (int64) + pose (7 float64) stored next to each descriptor
ENTRY_OVERHEAD_BYTES = 64


@dataclass(frozen=True)
class LoopCandidate:
    query_id: int
    match_id: int
    similarity: float
    gt_distance: float
    classification: str


@dataclass(frozen=True, eq=False)
class LoopEdge:
    i: int
    j: int
    z: Pose
    info: np.ndarray
    residual: float


@dataclass(frozen=True)
class Rejection:
    candidate: LoopCandidate
    residual: float


@dataclass(frozen=True)
class RegistrationSim:
    """Stand-in for scan registration: noise on the true relative pose plus a residual draw."""

    sigma_t: float = 0.1
    sigma_r: float = 0.01
    sigma_res: float = 0.05
    fp_residual_low: float = 0.2
    fp_residual_high: float = 5.0
    threshold: float = 0.3
    seed: int = 0


@dataclass(frozen=True)
class LoopParams:
    tau: float = 0.8
    k: int = 1
    exclusion_gap: int = 50
    gt_radius: float = 1.0
    registration: RegistrationSim = field(default_factory=RegistrationSim)
    info_sigma_floor: float = 1e-3
    timing_repeats: int = 1

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if self.k < 1 or self.exclusion_gap < 0 or self.timing_repeats < 1:
            raise ValueError("k and timing_repeats must be >= 1, exclusion_gap >= 0")
        if not self.gt_radius > 0:
            raise ValueError("gt_radius must be positive")


class DescriptorDatabase:
    """Append-only brute-force cosine index.

    Descriptors are stored as float32. Queries read a consistent prefix without
    locking; inserts are serialised by a lock and publish the new row last.
    """

    def __init__(self, dim: int | None = None, capacity: int = 256, backend: str | None = None):
        self.dim = dim
        self.backend = resolve_backend(backend)
        self._cap = capacity
        self._vecs = None
        self._norms = None
        self._ids = None
        self._n = 0
        self._index: dict = {}
        self._lock = threading.Lock()

    def __len__(self):
        return self._n

    @property
    def memory_bytes(self) -> int:
        if self._n == 0:
            return 0
        return self._n * (self.dim * 4 + ENTRY_OVERHEAD_BYTES)

    def _grow(self, need):
        cap = max(self._cap, 2 * need)
        vecs = np.zeros((cap, self.dim), dtype=np.float32)
        norms = np.zeros(cap)
        ids = np.zeros(cap, dtype=np.int64)
        if self._vecs is not None:
            vecs[: self._n] = self._vecs[: self._n]
            norms[: self._n] = self._norms[: self._n]
            ids[: self._n] = self._ids[: self._n]
        self._vecs, self._norms, self._ids, self._cap = vecs, norms, ids, cap

    def insert(self, kf_id: int, descriptor) -> None:
        d = np.asarray(descriptor, dtype=np.float32).reshape(-1)
        with self._lock:
            if kf_id in self._index:
                raise DuplicateId(f"keyframe {kf_id} already in the database")
            if self.dim is None:
                self.dim = d.shape[0]
            if d.shape[0] != self.dim:
                raise ValueError(f"descriptor dimension {d.shape[0]} != {self.dim}")
            if self._vecs is None or self._n >= self._cap:
                self._grow(self._n + 1)
            k = self._n
            self._vecs[k] = d
            d64 = d.astype(float)
            self._norms[k] = math.sqrt(float(d64 @ d64))
            self._ids[k] = kf_id
            self._index[kf_id] = k
            self._n = k + 1

    def query(self, descriptor, query_id: int, tau: float, k: int, exclusion_gap: int) -> list:
        """Up to ``k`` (id, similarity) pairs with similarity > tau, best first.

        Stored ids with ``|query_id - id| < exclusion_gap`` are skipped.
        """
        n = self._n
        if n == 0:
            return []
        vecs, norms, ids = self._vecs, self._norms, self._ids
        # the query sees the same float32 rounding as stored entries
        q = np.asarray(descriptor, dtype=np.float32).astype(np.float64)
        qn = math.sqrt(q @ q)
        pre, exact = _search.scan(vecs, norms, ids, n, q, qn, query_id, exclusion_gap, tau, self.backend)
        if len(pre) == 0:
            return []
        if len(pre) == 1:
            return [(int(ids[pre[0]]), float(exact[0]))]
        order = np.lexsort((ids[pre], -exact))[:k]
        return [(int(ids[pre[o]]), float(exact[o])) for o in order]


def _gt_pose(gt_poses, kf_id):
    try:
        return gt_poses[kf_id]
    except (KeyError, IndexError):
        raise MissingGroundTruth(f"no ground-truth pose for keyframe {kf_id}") from None


def classify(gt_distance: float, gt_radius: float) -> str:
    return TRUE_POSITIVE if gt_distance < gt_radius else FALSE_POSITIVE


def query_candidates(db: DescriptorDatabase, query, tau: float, k: int, exclusion_gap: int,
                     gt_poses, gt_radius: float = 1.0) -> list:
    """Loop candidates for keyframe ``query`` classified against ground truth."""
    return _classify_hits(db.query(query.descriptor, query.id, tau, k, exclusion_gap), query.id,
                          gt_poses, gt_radius)


def _classify_hits(hits, query_id, gt_poses, gt_radius):
    out = []
    for mid, sim in hits:
        d = translation_distance(_gt_pose(gt_poses, query_id), _gt_pose(gt_poses, mid))
        out.append(LoopCandidate(query_id, mid, sim, d, classify(d, gt_radius)))
    return out


def verify_candidate(c: LoopCandidate, gt_poses, sim: RegistrationSim = RegistrationSim(),
                     info_floor: float = 1e-3):
    """Simulated registration: a ``LoopEdge`` when the residual is below threshold, else ``Rejection``.

    Draws come from a generator keyed by (seed, query_id, match_id) so the outcome
    does not depend on processing order.
    """
    gi = _gt_pose(gt_poses, c.match_id)
    gj = _gt_pose(gt_poses, c.query_id)
    rng = np.random.default_rng([sim.seed, c.query_id, c.match_id])
    if c.classification == TRUE_POSITIVE:
        residual = abs(rng.normal(0.0, sim.sigma_res))
        st = sim.sigma_t
    else:
        residual = rng.uniform(sim.fp_residual_low, sim.fp_residual_high)
        # a wrong match that still converges is off by about its residual
        st = max(sim.sigma_t, residual / math.sqrt(3.0))
    noise = Twist(rng.normal(0.0, st, 3), rng.normal(0.0, sim.sigma_r, 3))
    if residual >= sim.threshold:
        return Rejection(c, residual)
    z = relative(gi, gj).compose(se3_exp(noise))
    info = diagonal_information(sim.sigma_t, sim.sigma_r, info_floor)
    return LoopEdge(c.match_id, c.query_id, z, info, residual)


@dataclass
class CandidateRecord:
    candidate: LoopCandidate
    verified: bool
    residual: float


@dataclass
class DetectionResult:
    edges: list
    records: list
    query_times: list  # (query id, seconds)
    memory: list  # (query id, bytes after insert)

    @property
    def candidates(self) -> list:
        return [r.candidate for r in self.records]


class LoopDetector:
    """Query-verify-insert for a stream of kept keyframes."""

    def __init__(self, params: LoopParams, gt_poses):
        self.params = params
        self.gt = gt_poses
        self.db = DescriptorDatabase()
        self.result = DetectionResult([], [], [], [])

    def process(self, kf) -> list:
        p = self.params
        # only the database search is timed; classification against ground truth is bookkeeping
        best = math.inf
        for _ in range(p.timing_repeats):
            t0 = time.perf_counter()
            hits = self.db.query(kf.descriptor, kf.id, p.tau, p.k, p.exclusion_gap)
            best = min(best, time.perf_counter() - t0)
        cands = _classify_hits(hits, kf.id, self.gt, p.gt_radius)
        new_edges = []
        for c in cands:
            out = verify_candidate(c, self.gt, p.registration, p.info_sigma_floor)
            ok = isinstance(out, LoopEdge)
            self.result.records.append(CandidateRecord(c, ok, out.residual))
            if ok:
                new_edges.append(out)
        self.db.insert(kf.id, kf.descriptor)
        self.result.edges.extend(new_edges)
        self.result.query_times.append((kf.id, best))
        self.result.memory.append((kf.id, self.db.memory_bytes))
        return new_edges


def detect_all(kept: Iterable, gt_poses, params: LoopParams = LoopParams()) -> DetectionResult:
    det = LoopDetector(params, gt_poses)
    for kf in kept:
        det.process(kf)
    return det.result


def write_candidates_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CANDIDATE_HEADER)
        for r in records:
            c = r.candidate
            w.writerow([c.query_id, c.match_id, repr(c.similarity), repr(c.gt_distance),
                        c.classification, int(r.verified), repr(float(r.residual))])


def read_candidates_csv(path) -> list:
    out = []
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows)
        if header != CANDIDATE_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        for row in rows:
            c = LoopCandidate(int(row[0]), int(row[1]), float(row[2]), float(row[3]), row[4])
            out.append(CandidateRecord(c, bool(int(row[5])), float(row[6])))
    return out
