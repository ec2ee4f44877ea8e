"""Place-recognition descriptors: similarity functions and a synthetic descriptor field."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DimensionMismatch, ZeroVector

ZERO_NORM = 1e-12
DEFAULT_DIM = 256


def _pair(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatch(f"descriptor shapes differ: {a.shape} vs {b.shape}")
    return a, b


def cosine_similarity(a, b) -> float:
    """Clamped cosine similarity ``max(0, cos(a, b))`` in [0, 1]."""
    a, b = _pair(a, b)
    na = math.sqrt(float(a @ a))
    nb = math.sqrt(float(b @ b))
    if na < ZERO_NORM or nb < ZERO_NORM:
        raise ZeroVector("cosine similarity of a zero vector is undefined")
    c = float(a @ b) / (na * nb)
    return min(1.0, max(0.0, c))


def euclidean_distance(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.linalg.norm(a - b))


@dataclass(frozen=True)
class DescriptorFieldParams:
    """Random-Fourier-feature field over position.

    ``length_scale`` (m) sets how quickly descriptors decorrelate with distance;
    ``noise_sigma`` is the per-component std of the optional observation noise.
    """

    seed: int = 0
    dim: int = DEFAULT_DIM
    num_frequencies: int = DEFAULT_DIM
    length_scale: float = 10.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError("descriptor dimension must be >= 2")
        if not self.length_scale > 0:
            raise ValueError("length_scale must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if 2 * self.num_frequencies < self.dim:
            raise ValueError("num_frequencies must be at least dim / 2")


@lru_cache(maxsize=64)
def _field_basis(seed, dim, num_frequencies, length_scale):
    rng = np.random.default_rng([seed, 0x4B4644])
    omega = rng.normal(0.0, 1.0 / length_scale, size=(num_frequencies, 3))
    phase = rng.uniform(0.0, 2.0 * math.pi, size=dim)
    # component j uses frequency j mod num_frequencies with its own phase
    freq = omega[np.arange(dim) % num_frequencies]
    freq.setflags(write=False)
    phase.setflags(write=False)
    return freq, phase


def field_eval(params: DescriptorFieldParams, position, noise_rng: np.random.Generator | None = None):
    """Descriptor at ``position`` (3-vector, m).

    Depends on position only, so it is yaw invariant by construction. Noise is
    added only when ``noise_rng`` is given and ``noise_sigma > 0``.
    """
    return field_eval_many(params, np.asarray(position, float)[None, :], noise_rng)[0]


def field_eval_many(params: DescriptorFieldParams, positions, noise_rng=None) -> np.ndarray:
    freq, phase = _field_basis(params.seed, params.dim, params.num_frequencies, params.length_scale)
    P = np.asarray(positions, dtype=float).reshape(-1, 3)
    vals = np.cos(P @ freq.T + phase)
    vals /= np.linalg.norm(vals, axis=1, keepdims=True)
    if noise_rng is not None and params.noise_sigma > 0:
        vals = vals + noise_rng.normal(0.0, params.noise_sigma, size=vals.shape)
    return vals


def histogram_entropy(values, bins: int = 16) -> float:
    """Shannon entropy (nats) of the value histogram of one descriptor."""
    counts, _ = np.histogram(np.asarray(values, float), bins=bins)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())
