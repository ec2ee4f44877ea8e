import os
import subprocess
import sys

import numpy as np
import pytest

from kf_minset import _jit
from kf_minset.descriptors import DescriptorFieldParams, field_eval_many
from kf_minset.geometry import quats_to_matrices
from kf_minset.kernels import edges, search, window

pytestmark = pytest.mark.skipif(not _jit.JIT_AVAILABLE, reason="numba not installed")


def random_window(rng, n):
    x = np.cumsum(rng.uniform(0.5, 1.5, n))
    X = np.column_stack([x, rng.normal(0, 0.3, n), np.zeros(n)])
    return field_eval_many(DescriptorFieldParams(seed=int(rng.integers(1 << 31))), X), X


@pytest.mark.parametrize("mode", [window.PAPER_LITERAL, 1])
def test_window_backends_agree(rng, mode):
    for n in (1, 2, 5, 10):
        D, X = random_window(rng, n)
        anchor = X[0] - [0.8, 0, 0]
        a = window.score_window(D, X, anchor, 1.0, 5.0, 1.0, 1.0, mode, backend="jit")
        b = window.score_window(D, X, anchor, 1.0, 5.0, 1.0, 1.0, mode, backend="numpy")
        # enumeration order is backend specific, so compare keyed by mask
        oa, ob = np.argsort(a[0]), np.argsort(b[0])
        assert np.array_equal(a[0][oa], b[0][ob])
        for u, v in zip(a[1:], b[1:]):
            assert np.allclose(u[oa], v[ob], rtol=1e-10, atol=1e-12)


def test_edge_backends_agree(rng):
    n, m = 40, 120
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1)[:, None]
    t = rng.normal(size=(n, 3)) * 5
    ii = rng.integers(0, n, m)
    jj = (ii + 1 + rng.integers(0, n - 1, m)) % n
    qz = rng.normal(size=(m, 4))
    qz /= np.linalg.norm(qz, axis=1)[:, None]
    # include near-identity measurements to cover the series branch
    qz[:10] = [1, 0, 0, 0]
    args = (quats_to_matrices(q), t, ii, jj, quats_to_matrices(qz), rng.normal(size=(m, 3)))
    ea, Ja, Ka = edges.linearize(*args, backend="jit")
    eb, Jb, Kb = edges.linearize(*args, backend="numpy")
    assert np.allclose(ea, eb, atol=1e-12)
    assert np.allclose(Ja, Jb, atol=1e-10) and np.allclose(Ka, Kb, atol=1e-10)
    assert np.allclose(edges.residuals(*args, backend="jit"), ea, atol=1e-14)


def test_scan_backends_agree(rng):
    n, dim = 3000, 64
    base = rng.normal(size=dim)
    vecs = (base + rng.normal(0, 0.6, size=(n, dim))).astype(np.float32)
    norms = np.linalg.norm(vecs.astype(float), axis=1)
    ids = np.arange(n, dtype=np.int64)
    q = base + rng.normal(0, 0.1, dim)
    qn = float(np.linalg.norm(q))
    ra = search.scan(vecs, norms, ids, n, q, qn, n // 2, 50, 0.8, "jit")
    rb = search.scan(vecs, norms, ids, n, q, qn, n // 2, 50, 0.8, "numpy")
    assert len(rb[0]) > 10
    assert np.array_equal(np.asarray(ra[0]), np.asarray(rb[0]))
    assert np.allclose(ra[1], rb[1], atol=1e-12)


def test_resolve_backend():
    assert _jit.resolve_backend("numpy") == "numpy"
    assert _jit.resolve_backend("jit") == "jit"
    with pytest.raises(ValueError):
        _jit.resolve_backend("cuda")


@pytest.mark.parametrize("value,expected", [("1", "numpy"), ("0", "jit"), ("", "jit")])
def test_env_switch(value, expected):
    env = dict(os.environ, KF_MINSET_NO_JIT=value)
    code = "from kf_minset._jit import resolve_backend; print(resolve_backend())"
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, env=env, check=True)
    assert out.stdout.strip() == expected
