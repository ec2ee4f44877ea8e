import numpy as np
import pytest

from kf_minset.descriptors import DescriptorFieldParams, field_eval_many
from kf_minset.geometry import Pose
from kf_minset.sampling import Keyframe
from kf_minset.synthworld import WorldConfig, generate

# acceptance lines collected by tests/test_acceptance.py and echoed in the summary
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def make_keyframes(positions, descriptors, start_id=0):
    return [
        Keyframe(start_id + i, 0.1 * i, Pose.from_translation(*p), d, 6.0, 2.0)
        for i, (p, d) in enumerate(zip(np.asarray(positions, float), np.asarray(descriptors, float)))
    ]


def field_window(rng, n, spacing=(0.5, 1.5), dim=256, seed=None, length_scale=None, noise=0.0):
    """Keyframes on a random heading with field descriptors, plus the pose just before them."""
    seed = int(rng.integers(0, 2**31)) if seed is None else seed
    ls = float(rng.uniform(3.0, 15.0)) if length_scale is None else length_scale
    params = DescriptorFieldParams(seed=seed, dim=dim, num_frequencies=dim, length_scale=ls)
    heading = rng.uniform(0, 2 * np.pi)
    steps = rng.uniform(*spacing, n + 1)
    s = np.cumsum(steps)
    origin = rng.uniform(-100, 100, 3) * [1, 1, 0]
    pos = origin + np.outer(s, [np.cos(heading), np.sin(heading), 0.0])
    # small lateral wiggle so consecutive gaps differ from the arc steps
    pos[:, :2] += rng.normal(0, 0.05, (n + 1, 2))
    D = field_eval_many(params, pos)
    if noise:
        D = D + rng.normal(0, noise, D.shape)
    anchor = Pose.from_translation(*pos[0])
    return make_keyframes(pos[1:], D[1:], start_id=int(rng.integers(0, 1000))), anchor


@pytest.fixture(scope="session")
def circle_world():
    return generate(WorldConfig(seed=0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
