"""Compare the numba and numpy backends of the hot kernels.

    python3 benchmarks/bench_kernels.py [--windows 50] [--edges 2000] [--db 5000]

Prints one line per kernel with mean wall time per call and the speedup.
Both backends are timed in the same process; JIT compilation is excluded by a
warm-up call.
"""

import argparse
import time

import numpy as np

from kf_minset._jit import JIT_AVAILABLE
from kf_minset.descriptors import DescriptorFieldParams, field_eval_many
from kf_minset.geometry import quats_to_matrices
from kf_minset.kernels import edges, search, window


def _timeit(fn, repeats):
    fn()
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def _windows(n_windows, n=10, spacing=(0.5, 1.0), seed=0):
    rng = np.random.default_rng(seed)
    params = DescriptorFieldParams(seed=seed)
    out = []
    for _ in range(n_windows):
        steps = rng.uniform(*spacing, n)
        heading = rng.uniform(0, 2 * np.pi)
        x = np.cumsum(steps)
        pos = np.column_stack([x * np.cos(heading), x * np.sin(heading), np.zeros(n)]) + rng.uniform(-200, 200, 3) * [1, 1, 0]
        out.append((field_eval_many(params, pos), pos))
    return out


def bench_window(n_windows):
    ws = _windows(n_windows)
    res = {}
    for backend in ("numpy", "jit"):
        def run():
            for D, X in ws:
                window.score_window(D, X, None, 1.0, 5.0, 1.0, 1.0, window.PAPER_LITERAL, backend=backend)
        res[backend] = _timeit(run, 1) / n_windows
    return res


def bench_edges(n_edges, n_nodes=500, seed=1):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(n_nodes, 4))
    q /= np.linalg.norm(q, axis=1)[:, None]
    R = quats_to_matrices(q)
    t = rng.normal(size=(n_nodes, 3)) * 10
    ii = rng.integers(0, n_nodes, n_edges)
    jj = (ii + 1 + rng.integers(0, n_nodes - 1, n_edges)) % n_nodes
    qz = rng.normal(size=(n_edges, 4))
    qz /= np.linalg.norm(qz, axis=1)[:, None]
    Rz, tz = quats_to_matrices(qz), rng.normal(size=(n_edges, 3))
    return {b: _timeit(lambda b=b: edges.linearize(R, t, ii, jj, Rz, tz, backend=b), 20)
            for b in ("numpy", "jit")}


def bench_search(n_db, dim=256, seed=2):
    rng = np.random.default_rng(seed)
    vecs = rng.normal(size=(n_db, dim)).astype(np.float32)
    norms = np.linalg.norm(vecs.astype(float), axis=1)
    ids = np.arange(n_db, dtype=np.int64)
    q = vecs[n_db // 2].astype(float)
    qn = float(np.linalg.norm(q))
    return {b: _timeit(lambda b=b: search.scan(vecs, norms, ids, n_db, q, qn, n_db, 50, 0.8, b), 200)
            for b in ("numpy", "jit")}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--windows", type=int, default=50)
    ap.add_argument("--edges", type=int, default=2000)
    ap.add_argument("--db", type=int, default=5000)
    args = ap.parse_args()
    if not JIT_AVAILABLE:
        raise SystemExit("numba is not installed; nothing to compare")
    rows = [
        (f"window N=10 M=256 ({args.windows} windows)", bench_window(args.windows)),
        (f"edge linearize ({args.edges} edges)", bench_edges(args.edges)),
        (f"descriptor scan ({args.db} entries)", bench_search(args.db)),
    ]
    print(f"{'kernel':45s} {'numpy [ms]':>12s} {'jit [ms]':>12s} {'speedup':>8s}")
    for name, r in rows:
        print(f"{name:45s} {1e3 * r['numpy']:12.3f} {1e3 * r['jit']:12.3f} {r['numpy'] / r['jit']:8.2f}")


if __name__ == "__main__":
    main()
