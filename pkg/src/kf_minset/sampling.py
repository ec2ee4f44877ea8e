"""Keyframe samplers.

The minimal-subset sampler buffers ``N`` keyframes, scores every subset that
respects the spacing limits and keeps the best one; the baselines (constant
distance, entropy, spaciousness, keep-all) share the same streaming interface.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .descriptors import ZERO_NORM, cosine_similarity
from .errors import CoincidentPoses, DimensionMismatch, MissingChannel, WindowTooLarge, ZeroVector
from .geometry import Pose, translation_distance
from .kernels import window as _wk

MAX_WINDOW = 16
COINCIDENT_GAP = 1e-9
TIE_RTOL = 1e-12
SCORING_MODES = ("paper-literal", "info-max")


@dataclass(frozen=True, eq=False)
class Keyframe:
    id: int
    timestamp: float
    pose: Pose
    descriptor: np.ndarray
    spaciousness: float | None = None
    entropy_proxy: float | None = None

    def __post_init__(self):
        d = np.array(self.descriptor, dtype=float).reshape(-1)
        if not np.all(np.isfinite(d)):
            raise ValueError(f"keyframe {self.id}: descriptor has non-finite entries")
        d.setflags(write=False)
        object.__setattr__(self, "descriptor", d)

    @property
    def position(self) -> np.ndarray:
        return self.pose.t


@dataclass(frozen=True)
class SamplerConfig:
    window_size: int = 10
    alpha: float = 1.0
    beta: float = 1.0
    delta_lower: float = 1.0
    delta_upper: float = 5.0
    scoring_mode: str = "paper-literal"

    def __post_init__(self):
        if not 2 <= self.window_size <= MAX_WINDOW:
            raise ValueError(f"window_size must be in [2, {MAX_WINDOW}]")
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError("alpha and beta must be positive")
        if not 0 < self.delta_lower < self.delta_upper:
            raise ValueError("need 0 < delta_lower < delta_upper")
        if self.scoring_mode not in SCORING_MODES:
            raise ValueError(f"scoring_mode must be one of {SCORING_MODES}")

    @property
    def mode_code(self) -> int:
        return _wk.PAPER_LITERAL if self.scoring_mode == "paper-literal" else _wk.INFO_MAX


@dataclass(frozen=True)
class PrincipalTransform:
    jacobian: np.ndarray
    eigenvalues: np.ndarray  # descending, one per row of the jacobian
    eigenvectors: np.ndarray  # M x r, columns for the nonzero eigenvalues
    transformed: np.ndarray  # n x r


@dataclass(frozen=True)
class WindowSolution:
    selected: tuple
    rho: float
    pi: float
    objective: float
    candidates_evaluated: int
    solve_time: float
    feasible: bool = True
    scoring_mode: str = "paper-literal"

    @property
    def ids(self) -> tuple:
        return tuple(k.id for k in self.selected)


# -- subset enumeration ------------------------------------------------------------------


def _check_window(window):
    if len(window) > MAX_WINDOW:
        raise WindowTooLarge(f"window of {len(window)} keyframes exceeds {MAX_WINDOW}")


def _gap_ok(gap, cfg):
    return cfg.delta_lower <= gap <= cfg.delta_upper


def constrained_power_set(window: Sequence[Keyframe], anchor: Pose | None, cfg: SamplerConfig) -> list:
    """Order-preserving subsets whose consecutive gaps lie in ``[delta_lower, delta_upper]``.

    The first kept keyframe is measured from ``anchor`` when one is given.
    Subsets come back sorted lexicographically by member ids.
    """
    _check_window(window)
    n = len(window)
    out = []
    for mask in range(1, 1 << n):
        members = []
        prev = anchor
        ok = True
        for i in range(n):
            if not (mask >> i) & 1:
                continue
            kf = window[i]
            if prev is not None and not _gap_ok(translation_distance(prev, kf.pose), cfg):
                ok = False
                break
            members.append(kf)
            prev = kf.pose
        if ok:
            out.append(tuple(members))
    out.sort(key=lambda s: tuple(k.id for k in s))
    return out


# -- scoring terms -----------------------------------------------------------------------


def numeric_jacobian(subset: Sequence[Keyframe]) -> np.ndarray:
    """Finite-difference rate of descriptor change per meter between consecutive keyframes."""
    if len(subset) < 2:
        raise ValueError("jacobian needs at least two keyframes")
    D = np.array([k.descriptor for k in subset])
    X = np.array([k.position for k in subset])
    gaps = np.linalg.norm(np.diff(X, axis=0), axis=1)
    if np.any(gaps < COINCIDENT_GAP):
        raise CoincidentPoses("consecutive keyframes closer than 1e-9 m")
    return np.diff(D, axis=0) / gaps[:, None]


def principal_transform(subset: Sequence[Keyframe]) -> PrincipalTransform:
    J = numeric_jacobian(subset)
    D = np.array([k.descriptor for k in subset])
    m, M = J.shape
    gaps = np.linalg.norm(np.diff([k.position for k in subset], axis=0), axis=1)
    floor = _wk.EIG_ATOL * float(np.max(np.sum(D * D, axis=1))) / float(gaps.min()) ** 2
    if m < M:
        # nonzero spectrum of J^T J equals that of the small Gram matrix J J^T
        w, U = np.linalg.eigh(J @ J.T)
        w, U = w[::-1], U[:, ::-1]
        thr = max(_wk.EIG_RTOL * w[0], floor)
        nz = w > thr
        V = (J.T @ U[:, nz]) / np.sqrt(w[nz])
    else:
        w, V = np.linalg.eigh(J.T @ J)
        w, V = w[::-1], V[:, ::-1]
        thr = max(_wk.EIG_RTOL * w[0], floor)
        nz = w > thr
        V = V[:, nz]
        w = w[:m]
    transformed = (D @ V) * np.sqrt(w[: V.shape[1]])
    return PrincipalTransform(J, w, V, transformed)


def redundancy(subset: Sequence[Keyframe]) -> float:
    """Mean clamped cosine similarity of consecutive descriptors."""
    if len(subset) < 2:
        raise ValueError("redundancy needs at least two keyframes")
    sims = [cosine_similarity(a.descriptor, b.descriptor) for a, b in zip(subset, subset[1:])]
    return float(np.mean(sims))


def info_preservation(pt: PrincipalTransform) -> float:
    """Negated mean consecutive distance of transformed descriptors, each scaled by the largest."""
    Dp = pt.transformed
    if Dp.shape[1] == 0:
        return 0.0
    d = np.linalg.norm(np.diff(Dp, axis=0), axis=1)
    top = d.max()
    if top <= 0:
        return 0.0
    return float(-np.mean(d / top))


def objective(rho: float, pi: float, cfg: SamplerConfig) -> float:
    if cfg.scoring_mode == "paper-literal":
        return (rho + cfg.alpha) / (pi - cfg.beta)
    return (rho + cfg.alpha) * (1.0 - pi)


def subset_terms(subset: Sequence[Keyframe]) -> tuple:
    """(rho, pi) of a subset; a single keyframe has no consecutive pairs and scores (0, 0)."""
    if len(subset) < 2:
        return 0.0, 0.0
    return redundancy(subset), info_preservation(principal_transform(subset))


def msa_score(subset: Sequence[Keyframe], cfg: SamplerConfig) -> float:
    rho, pi = subset_terms(subset)
    return objective(rho, pi, cfg)


def pick_best(scores, sizes, keys) -> int:
    """Index of the minimum score; near-ties go to fewer members, then smaller ids."""
    scores = np.asarray(scores, dtype=float)
    best = scores.min()
    tied = np.flatnonzero(scores <= best + TIE_RTOL * max(1.0, abs(best)))
    return int(min(tied, key=lambda i: (sizes[i], keys[i])))


def _validate_descriptors(window):
    dims = {k.descriptor.shape[0] for k in window}
    if len(dims) > 1:
        raise DimensionMismatch(f"mixed descriptor dimensions in window: {sorted(dims)}")
    for k in window:
        if np.linalg.norm(k.descriptor) < ZERO_NORM:
            raise ZeroVector(f"keyframe {k.id} has a zero descriptor")


def msa_select_window(window: Sequence[Keyframe], anchor: Pose | None, cfg: SamplerConfig,
                      backend: str | None = None) -> WindowSolution:
    """Exhaustively pick the best constrained subset of one window."""
    _check_window(window)
    if not window:
        raise ValueError("empty window")
    _validate_descriptors(window)
    t0 = time.perf_counter()
    D = np.array([k.descriptor for k in window])
    X = np.array([k.position for k in window])
    masks, rho, pi, score = _wk.score_window(
        D, X, None if anchor is None else anchor.t,
        cfg.delta_lower, cfg.delta_upper, cfg.alpha, cfg.beta, cfg.mode_code, backend=backend,
    )
    n = len(window)
    if len(masks) == 0:
        sel = (window[0], window[-1]) if n > 1 else (window[0],)
        r, p = subset_terms(sel)
        return WindowSolution(sel, r, p, objective(r, p, cfg), 0,
                              time.perf_counter() - t0, False, cfg.scoring_mode)
    members = [[i for i in range(n) if (int(m) >> i) & 1] for m in masks]
    sizes = [len(mm) for mm in members]
    keys = [tuple(window[i].id for i in mm) for mm in members]
    best = pick_best(score, sizes, keys)
    sel = tuple(window[i] for i in members[best])
    r, p = float(rho[best]), float(pi[best])
    return WindowSolution(sel, r, p, objective(r, p, cfg), len(masks),
                          time.perf_counter() - t0, True, cfg.scoring_mode)


# -- streaming samplers ------------------------------------------------------------------


class Sampler:
    """Streaming sampler: ``push`` one keyframe, get back the keyframes decided so far."""

    name = "base"

    def push(self, kf: Keyframe) -> list:
        raise NotImplementedError

    def flush(self) -> list:
        return []


class AllSampler(Sampler):
    name = "all"

    def push(self, kf):
        return [kf]


class ConstantSampler(Sampler):
    def __init__(self, distance: float):
        if not distance > 0:
            raise ValueError("constant interval must be positive")
        self.distance = float(distance)
        self.name = f"constant-{distance:g}m"
        self._prev = None
        self._acc = 0.0
        self._started = False

    def push(self, kf):
        if self._prev is not None:
            self._acc += translation_distance(self._prev, kf.pose)
        self._prev = kf.pose
        if not self._started or self._acc >= self.distance:
            self._started = True
            self._acc = 0.0
            return [kf]
        return []


class EntropySampler(Sampler):
    """Keeps a keyframe once its entropy channel moves away from the last kept value by more
    than mean + 1 std of the recent frame-to-frame entropy changes."""

    name = "entropy"

    def __init__(self, history: int = 50):
        self._deltas = deque(maxlen=history)
        self._last_kept = None
        self._prev = None

    def push(self, kf):
        e = kf.entropy_proxy
        if e is None:
            raise MissingChannel(f"keyframe {kf.id} has no entropy_proxy channel")
        if self._prev is not None:
            self._deltas.append(abs(e - self._prev))
        self._prev = e
        if self._last_kept is None:
            self._last_kept = e
            return [kf]
        if self._deltas:
            d = np.asarray(self._deltas)
            threshold = d.mean() + d.std()
        else:
            threshold = 0.0
        if abs(e - self._last_kept) > threshold:
            self._last_kept = e
            return [kf]
        return []


class SpaciousnessSampler(Sampler):
    """Adaptive interval ``clamp(0.5 * spaciousness, delta_lower, delta_upper)``."""

    name = "spaciousness"

    def __init__(self, delta_lower: float, delta_upper: float):
        self.lo = delta_lower
        self.hi = delta_upper
        self._prev = None
        self._acc = 0.0
        self._started = False

    def push(self, kf):
        s = kf.spaciousness
        if s is None:
            raise MissingChannel(f"keyframe {kf.id} has no spaciousness channel")
        if self._prev is not None:
            self._acc += translation_distance(self._prev, kf.pose)
        self._prev = kf.pose
        interval = min(max(0.5 * s, self.lo), self.hi)
        if not self._started or self._acc >= interval:
            self._started = True
            self._acc = 0.0
            return [kf]
        return []


class MsaSampler(Sampler):
    """Non-overlapping windows of ``window_size``; each solution anchors the next window."""

    name = "msa"

    def __init__(self, cfg: SamplerConfig, flush_partial: bool = True, backend: str | None = None):
        self.cfg = cfg
        self.flush_partial = flush_partial
        self.backend = backend
        self.buffer: list = []
        self.anchor: Pose | None = None
        self.solutions: list = []

    def _solve(self):
        sol = msa_select_window(self.buffer, self.anchor, self.cfg, backend=self.backend)
        self.solutions.append(sol)
        self.anchor = sol.selected[-1].pose
        self.buffer = []
        return list(sol.selected)

    def push(self, kf):
        self.buffer.append(kf)
        if len(self.buffer) == self.cfg.window_size:
            return self._solve()
        return []

    def flush(self):
        if self.buffer and self.flush_partial:
            return self._solve()
        self.buffer = []
        return []


def make_sampler(method: str, cfg: SamplerConfig | None = None, distance: float | None = None,
                 backend: str | None = None) -> Sampler:
    cfg = cfg or SamplerConfig()
    if method == "all":
        return AllSampler()
    if method == "msa":
        return MsaSampler(cfg, backend=backend)
    if method == "constant":
        if distance is None:
            raise ValueError("constant sampler needs a distance")
        return ConstantSampler(distance)
    if method == "entropy":
        return EntropySampler()
    if method == "spaciousness":
        return SpaciousnessSampler(cfg.delta_lower, cfg.delta_upper)
    raise ValueError(f"unknown sampling method {method!r}")


def stream_sample(keyframes: Iterable[Keyframe], method: str | Sampler, cfg: SamplerConfig | None = None,
                  distance: float | None = None) -> Iterator[Keyframe]:
    """Run a sampler over a keyframe stream, yielding kept keyframes in stream order."""
    sampler = method if isinstance(method, Sampler) else make_sampler(method, cfg, distance)
    last_id = None
    for kf in keyframes:
        if last_id is not None and kf.id <= last_id:
            raise ValueError(f"keyframe ids must increase (got {kf.id} after {last_id})")
        last_id = kf.id
        yield from sampler.push(kf)
    yield from sampler.flush()
