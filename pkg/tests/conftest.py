import numpy as np
import pytest

from splatstego.gaussians import GaussianCloud, inverse_sigmoid
from splatstego.synthetic import random_unit_quaternions


def random_cloud(n=5, seed=0, sh_scale=0.5):
    rng = np.random.default_rng(seed)
    return GaussianCloud(
        positions=rng.uniform(-1, 1, (n, 3)).astype(np.float32),
        rotations=random_unit_quaternions(rng, n).astype(np.float32),
        log_scales=np.log(rng.uniform(0.05, 0.3, (n, 3))).astype(np.float32),
        opacity_logits=rng.normal(size=n).astype(np.float32),
        sh=rng.normal(scale=sh_scale, size=(n, 16, 3)).astype(np.float32),
    )


@pytest.fixture
def small_cloud():
    return random_cloud(n=8, seed=1)


def probe_cloud(n=10, seed=42, alpha_range=(0.25, 0.5)):
    """Scene for gradient oracles: clamps and early termination stay inactive."""
    rng = np.random.default_rng(seed)
    sh = np.zeros((n, 16, 3))
    sh[:, 0, :] = rng.uniform(-0.8, 0.8, (n, 3))
    sh[:, 1:, :] = rng.normal(scale=0.03, size=(n, 15, 3))
    return GaussianCloud(
        positions=rng.uniform(-0.8, 0.8, (n, 3)),
        rotations=random_unit_quaternions(rng, n),
        log_scales=np.log(rng.uniform(0.1, 0.3, (n, 3))),
        opacity_logits=inverse_sigmoid(rng.uniform(*alpha_range, n)),
        sh=sh,
    )
