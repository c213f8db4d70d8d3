from pathlib import Path

import numpy as np
import pytest

from xferlab.model import ModelConfig, init_parameters, make_head

ROOT = Path(__file__).resolve().parents[1]
SMOKE = ROOT / "tests" / "data" / "smoke.ini"


def linear_probe(M: int, dim: int = 3, seed: int = 0):
    """Additive game: v(S) = sum over m in S of w.x_m plus sum over m outside S of w.b_m."""
    rng = np.random.default_rng(seed)
    w = rng.normal(size=dim)
    x = rng.normal(size=(M, dim))
    b = rng.normal(size=(M, dim))
    cx, cb = x @ w, b @ w

    def v(masks):
        masks = np.atleast_2d(np.asarray(masks, dtype=bool))
        return np.where(masks, cx, cb).sum(axis=1)

    return v, cx - cb


@pytest.fixture(scope="session")
def tiny_cfg():
    return ModelConfig(image_size=6, patch_size=2, channels=3, embed_dim=8, num_layers=1,
                       num_heads=2, mlp_ratio=2, seed=4)


@pytest.fixture(scope="session")
def tiny_model(tiny_cfg):
    theta = init_parameters(tiny_cfg)
    rng = np.random.default_rng(1)
    # spread the weights so the game is far from additive
    theta = theta.with_values(theta.values + 0.3 * rng.normal(size=theta.size))
    head = make_head(["c0", "c1", "c2"], tiny_cfg.embed_dim)
    return theta, head


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
