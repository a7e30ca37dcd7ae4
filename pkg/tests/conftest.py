import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from scorecomp import (
    GaussianComponent,
    GaussianScoreModel,
    LowRankAdapter,
    build_vp_schedule,
)

settings.register_profile("default", deadline=None)
settings.load_profile("default")

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
FIXTURES = Path(__file__).resolve().parent / "fixtures"


def gaussian_base(shape=(4, 4, 2), T=50, n_conditions=2, seed=0, beta=(1e-3, 0.2)):
    """Small mixture base with random means and variances, conditions 'c0'.."""
    rng = np.random.default_rng(seed)
    comps = {
        f"c{k}": GaussianComponent(rng.normal(size=shape), float(rng.uniform(0.5, 2.0)),
                                   float(rng.uniform(0.5, 1.5)))
        for k in range(n_conditions)
    }
    return GaussianScoreModel(comps, build_vp_schedule(T, *beta))


def latent_adapter(base, rank=2, seed=1, strength=0.8, trained=("c0",), **kw):
    rng = np.random.default_rng(seed)
    dim = base.dim
    up = rng.normal(size=(dim, rank)) / np.sqrt(dim)
    down = rng.normal(size=(dim, rank)) / np.sqrt(dim)
    return LowRankAdapter(base, up, down, strength=strength, trained_conditions=trained,
                          site="latent", **kw)


def mean_adapter(base, seed=1, strength=0.8, trained=("c0",), **kw):
    rng = np.random.default_rng(seed)
    up = rng.normal(size=(base.dim, 1))
    down = np.zeros((base.embedding_dim, 1))
    for c in trained:
        down[base.index(c), 0] = 1.0
    return LowRankAdapter(base, up, down, strength=strength, trained_conditions=trained,
                          site="mean", **kw)


@pytest.fixture
def base():
    return gaussian_base()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
