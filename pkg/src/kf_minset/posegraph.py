"""Pose graph over kept keyframes and its Levenberg-Marquardt solver on SE(3)."""

from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SingularSystem
from .geometry import Pose, Twist, quats_to_matrices, relative, retract, se3_log
from .kernels import edges as _ek

log = logging.getLogger(__name__)

DENSE_MAX_NODES = 500
ODOM = "ODOM"
LOOP = "LOOP"


def diagonal_information(sigma_t: float, sigma_r: float, floor: float = 0.0) -> np.ndarray:
    st = max(sigma_t, floor)
    sr = max(sigma_r, floor)
    if st <= 0 or sr <= 0:
        raise ValueError("information needs positive sigmas")
    return np.diag([1 / st**2] * 3 + [1 / sr**2] * 3)


@dataclass(frozen=True, eq=False)
class Edge:
    i: int
    j: int
    z: Pose
    info: np.ndarray
    kind: str = ODOM

    def __post_init__(self):
        info = np.array(self.info, dtype=float).reshape(6, 6)
        if not np.allclose(info, info.T, atol=1e-9, rtol=0):
            raise ValueError(f"information of edge ({self.i}, {self.j}) is not symmetric")
        info.setflags(write=False)
        object.__setattr__(self, "info", info)


@dataclass
class PoseGraph:
    nodes: dict = field(default_factory=dict)
    odometry_edges: list = field(default_factory=list)
    loop_edges: list = field(default_factory=list)
    fixed: set = field(default_factory=set)
    order: list = field(default_factory=list)

    def __post_init__(self):
        self._pos = {n: k for k, n in enumerate(self.order)}
        self._pairs = {(e.i, e.j) for e in self.odometry_edges + self.loop_edges}

    def add_node(self, node_id: int, pose: Pose, fixed: bool = False):
        if node_id in self.nodes:
            raise ValueError(f"node {node_id} already present")
        self.nodes[node_id] = pose
        self._pos[node_id] = len(self.order)
        self.order.append(node_id)
        if fixed:
            self.fixed.add(node_id)

    def add_odometry_edge(self, i: int, j: int, z: Pose, info):
        pos = self._pos
        if i not in pos or j not in pos or pos[j] != pos[i] + 1:
            raise ValueError(f"odometry edge ({i}, {j}) must join consecutive nodes")
        if (i, j) in self._pairs:
            raise ValueError(f"edge ({i}, {j}) already present")
        self.odometry_edges.append(Edge(i, j, z, info, ODOM))
        self._pairs.add((i, j))

    def add_loop_edge(self, i: int, j: int, z: Pose, info) -> bool:
        """Add a loop edge; returns False when the pair already has an edge."""
        if i not in self.nodes or j not in self.nodes:
            raise KeyError(f"loop edge ({i}, {j}) references unknown nodes")
        if (i, j) in self._pairs or (j, i) in self._pairs:
            return False
        self.loop_edges.append(Edge(i, j, z, info, LOOP))
        self._pairs.add((i, j))
        return True

    @property
    def edges(self) -> list:
        return self.odometry_edges + self.loop_edges

    def check_partition(self):
        odo = {(e.i, e.j) for e in self.odometry_edges}
        loop = {(e.i, e.j) for e in self.loop_edges}
        if odo & loop:
            raise AssertionError("odometry and loop edge sets overlap")
        if len(odo) != len(self.odometry_edges) or len(loop) != len(self.loop_edges):
            raise AssertionError("duplicate edges")

    def copy_with(self, poses: dict) -> PoseGraph:
        g = PoseGraph(dict(poses), list(self.odometry_edges), list(self.loop_edges),
                      set(self.fixed), list(self.order))
        return g


@dataclass(frozen=True)
class LmParams:
    max_iterations: int = 100
    initial_lambda: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    convergence_tol: float = 1e-9
    gradient_tol: float = 1e-8
    max_lambda: float = 1e12

    def __post_init__(self):
        if self.max_iterations <= 0 or self.initial_lambda <= 0:
            raise ValueError("max_iterations and initial_lambda must be positive")
        if not (self.lambda_up > 1 > self.lambda_down > 0):
            raise ValueError("need lambda_up > 1 > lambda_down > 0")
        if self.convergence_tol <= 0 or self.gradient_tol <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class OptimizeResult:
    poses: dict
    log: list
    iterations: int
    reason: str
    initial_error: float
    final_error: float


# -- residuals and cost ------------------------------------------------------------------


def edge_residual(z: Pose, xi: Pose, xj: Pose) -> Twist:
    """Manifold residual ``log(z^-1 (xi^-1 xj))``."""
    return se3_log(relative(z, relative(xi, xj)))


def total_error(g: PoseGraph) -> float:
    total = 0.0
    for e in g.edges:
        r = edge_residual(e.z, g.nodes[e.i], g.nodes[e.j]).as_vector()
        total += float(r @ e.info @ r)
    return total


class _Problem:
    """Stacked arrays for one graph: node states, edge endpoints, measurements, weights."""

    def __init__(self, g: PoseGraph, backend=None):
        if not g.fixed:
            raise SingularSystem("no gauge-fixed node")
        self.ids = list(g.order)
        index = {n: k for k, n in enumerate(self.ids)}
        self.q = np.array([g.nodes[n].q for n in self.ids])
        self.t = np.array([g.nodes[n].t for n in self.ids])
        edges = g.edges
        self.ii = np.array([index[e.i] for e in edges], dtype=np.int64)
        self.jj = np.array([index[e.j] for e in edges], dtype=np.int64)
        self.Rz = np.array([e.z.rotation for e in edges]).reshape(-1, 3, 3)
        self.tz = np.array([e.z.t for e in edges]).reshape(-1, 3)
        self.info = np.array([e.info for e in edges]).reshape(-1, 6, 6)
        fixed = np.array([n in g.fixed for n in self.ids])
        self.free_index = np.full(len(self.ids), -1, dtype=np.int64)
        self.free_index[~fixed] = np.arange(int((~fixed).sum()))
        self.n_free = int((~fixed).sum())
        self.backend = backend
        _check_connected(self.ids, self.ii, self.jj, fixed)

    def error(self, q, t) -> float:
        e = _ek.residuals(quats_to_matrices(q), t, self.ii, self.jj, self.Rz, self.tz, self.backend)
        return float(np.einsum("ea,eab,eb->", e, self.info, e))

    def linear_system(self, q, t):
        e, Ji, Jj = _ek.linearize(quats_to_matrices(q), t, self.ii, self.jj, self.Rz, self.tz,
                                  self.backend)
        return assemble(e, Ji, Jj, self.info, self.ii, self.jj, self.free_index, self.n_free)


def _check_connected(ids, ii, jj, fixed):
    adj = [[] for _ in ids]
    for a, b in zip(ii, jj):
        adj[a].append(b)
        adj[b].append(a)
    seen = np.zeros(len(ids), dtype=bool)
    queue = deque(np.flatnonzero(fixed).tolist())
    seen[list(queue)] = True
    while queue:
        k = queue.popleft()
        for m in adj[k]:
            if not seen[m]:
                seen[m] = True
                queue.append(m)
    if not seen.all():
        missing = [ids[k] for k in np.flatnonzero(~seen)[:5]]
        raise SingularSystem(f"nodes not connected to a fixed node, e.g. {missing}")


def assemble(e, Ji, Jj, info, ii, jj, free_index, n_free):
    """Normal equations ``H`` (sparse CSR over free nodes) and gradient ``b = J^T Omega e``."""
    n = 6 * n_free
    b = np.zeros(n)
    if len(e) == 0:
        return sp.csr_matrix((n, n)), b
    OJi = info @ Ji
    OJj = info @ Jj
    Oe = np.einsum("eab,eb->ea", info, e)
    blocks = {
        (0, 0): np.swapaxes(Ji, 1, 2) @ OJi,
        (0, 1): np.swapaxes(Ji, 1, 2) @ OJj,
        (1, 0): np.swapaxes(Jj, 1, 2) @ OJi,
        (1, 1): np.swapaxes(Jj, 1, 2) @ OJj,
    }
    ends = (free_index[ii], free_index[jj])
    grads = (np.einsum("eba,eb->ea", Ji, Oe), np.einsum("eba,eb->ea", Jj, Oe))
    rows, cols, vals = [], [], []
    r6 = np.arange(6)
    for (a, c), blk in blocks.items():
        ra, rc = ends[a], ends[c]
        keep = (ra >= 0) & (rc >= 0)
        if not np.any(keep):
            continue
        base_r = (6 * ra[keep])[:, None, None] + r6[None, :, None]
        base_c = (6 * rc[keep])[:, None, None] + r6[None, None, :]
        rows.append(np.broadcast_to(base_r, blk[keep].shape).ravel())
        cols.append(np.broadcast_to(base_c, blk[keep].shape).ravel())
        vals.append(blk[keep].ravel())
    for a in (0, 1):
        keep = ends[a] >= 0
        idx = (6 * ends[a][keep])[:, None] + r6[None, :]
        np.add.at(b, idx.ravel(), grads[a][keep].ravel())
    if rows:
        H = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n, n)).tocsr()
    else:
        H = sp.csr_matrix((n, n))
    return H, b


def linearize(g: PoseGraph, backend=None):
    """Gauss-Newton normal matrix and gradient over the free (non-fixed) nodes, in ``g.order``."""
    prob = _Problem(g, backend)
    return prob.linear_system(prob.q, prob.t)


def _solve(H, b, lam, dense):
    d = H.diagonal()
    damp = lam * np.maximum(d, 1e-12 * max(float(d.max(initial=0.0)), 1.0))
    if dense:
        A = H.toarray()
        A[np.diag_indices_from(A)] += damp
        try:
            c = scipy.linalg.cho_factor(A, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise SingularSystem(str(exc)) from exc
        x = scipy.linalg.cho_solve(c, -b, check_finite=False)
    else:
        A = (H + sp.diags(damp)).tocsc()
        try:
            x = spla.splu(A).solve(-b)
        except RuntimeError as exc:
            raise SingularSystem(str(exc)) from exc
    if not np.all(np.isfinite(x)):
        raise SingularSystem("non-finite solution of the damped normal equations")
    return x


def optimize(g: PoseGraph, p: LmParams = LmParams(), backend=None) -> OptimizeResult:
    """Levenberg-Marquardt with Marquardt diagonal scaling. Accepted steps never raise the error."""
    prob = _Problem(g, backend)
    q, t = prob.q, prob.t
    err = prob.error(q, t)
    initial = err
    lam = p.initial_lambda
    dense = len(prob.ids) <= DENSE_MAX_NODES
    history = [{"iteration": 0, "error": err, "lambda": lam}]
    reason = "max_iterations"
    it = 0
    free = prob.free_index >= 0
    if prob.n_free == 0:
        reason = "no_free_nodes"
    else:
        for it in range(1, p.max_iterations + 1):
            H, b = prob.linear_system(q, t)
            if np.max(np.abs(b)) < p.gradient_tol:
                it -= 1
                reason = "gradient"
                break
            while True:
                x = _solve(H, b, lam, dense)
                delta = np.zeros((len(prob.ids), 6))
                delta[free] = x.reshape(-1, 6)
                nq, nt = retract(q, t, delta)
                new_err = prob.error(nq, nt)
                if new_err <= err:
                    break
                lam *= p.lambda_up
                if lam > p.max_lambda:
                    break
            if lam > p.max_lambda:
                it -= 1
                reason = "lambda"
                break
            rel = (err - new_err) / err if err > 0 else 0.0
            q, t, err = nq, nt, new_err
            lam = max(lam * p.lambda_down, 1e-15)
            history.append({"iteration": it, "error": err, "lambda": lam})
            if rel < p.convergence_tol:
                reason = "converged"
                break
    poses = {n: Pose(q[k], t[k]) for k, n in enumerate(prob.ids)}
    for n in g.fixed:
        poses[n] = g.nodes[n]
    log.debug("LM stopped after %d iterations (%s): %.6g -> %.6g", it, reason, initial, err)
    return OptimizeResult(poses, history, it, reason, initial, err)


# -- incremental emulation ---------------------------------------------------------------


@dataclass
class IncrementalResult:
    snapshots: list  # (number of nodes, {id: Pose}) after each re-optimisation
    solve_times: list  # (number of nodes, seconds)
    graph: PoseGraph
    final: dict


class IncrementalOptimizer:
    """Appends nodes and edges as they arrive and re-optimises every ``reopt_every`` insertions.

    New nodes start at their odometry pose until the first solve; after that they
    are initialised by chaining their odometry edge onto the latest estimate of
    the previous node, so earlier corrections carry forward.
    """

    def __init__(self, params: LmParams = LmParams(), reopt_every: int = 10, backend=None):
        if reopt_every < 1:
            raise ValueError("reopt_every must be >= 1")
        self.params = params
        self.reopt_every = reopt_every
        self.backend = backend
        self.graph = PoseGraph()
        self.estimate: dict = {}
        self.pending = 0
        self.snapshots: list = []
        self.solve_times: list = []
        self._last_odom: Pose | None = None

    def add_keyframe(self, node_id: int, odom_pose: Pose, odom_info=None, loops=()):
        """Append a node (and the loop edges ``(i, j, z, info)`` that arrive with it)."""
        if not self.graph.order:
            self.graph.add_node(node_id, odom_pose, fixed=True)
            self.estimate[node_id] = odom_pose
        else:
            prev = self.graph.order[-1]
            z = relative(self._last_odom, odom_pose)
            # before the first solve the estimate is the odometry itself
            init = self.estimate[prev].compose(z) if self.snapshots else odom_pose
            self.graph.add_node(node_id, init)
            self.graph.add_odometry_edge(prev, node_id, z, odom_info)
            self.estimate[node_id] = init
        self._last_odom = odom_pose
        for i, j, z, info in loops:
            self.graph.add_loop_edge(i, j, z, info)
        self.pending += 1
        if self.pending >= self.reopt_every:
            self.reoptimize()

    def reoptimize(self):
        if not self.pending:
            return
        g = self.graph.copy_with(self.estimate)
        t0 = time.perf_counter()
        res = optimize(g, self.params, self.backend)
        dt = time.perf_counter() - t0
        self.estimate = dict(res.poses)
        self.graph.nodes = dict(res.poses)
        self.solve_times.append((len(self.graph.order), dt))
        self.snapshots.append((len(self.graph.order), dict(res.poses)))
        self.pending = 0

    def finish(self) -> IncrementalResult:
        self.reoptimize()
        return IncrementalResult(self.snapshots, self.solve_times, self.graph, dict(self.estimate))


def incremental_run(kept_ids, odom_poses, loops_by_step, reopt_every: int,
                    params: LmParams = LmParams(), odom_info_fn=None, backend=None) -> IncrementalResult:
    """Feed kept keyframes in order and re-optimise every ``reopt_every`` insertions.

    ``loops_by_step[k]`` lists the loop edges ``(i, j, z, info)`` that arrive with
    the k-th kept keyframe; ``odom_info_fn(prev_id, id)`` gives the odometry
    information for the edge into each new node.
    """
    opt = IncrementalOptimizer(params, reopt_every, backend)
    prev = None
    for k, (nid, pose) in enumerate(zip(kept_ids, odom_poses)):
        info = None if prev is None else odom_info_fn(prev, nid)
        opt.add_keyframe(nid, pose, info, loops_by_step.get(k, ()))
        prev = nid
    return opt.finish()
