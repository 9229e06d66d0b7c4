from __future__ import annotations

import numpy as np
import pytest

from aeot_gan.core import PointCloud, RngStream
from aeot_gan.extension import ExtendedMap, build_rips
from aeot_gan.sdot import CellStats, DualPotential, SdotProblem


@pytest.fixture
def rng() -> RngStream:
    return RngStream(seed=7)


@pytest.fixture
def line_problem() -> SdotProblem:
    return SdotProblem(PointCloud([[0.25], [0.75]]))


def make_line_map(epsilon: float) -> ExtendedMap:
    """1-D map with codes 0.25 / 0.75 and exact cell barycenters."""
    codes = PointCloud([[0.25], [0.75]])
    stats = CellStats(
        measures=np.array([0.5, 0.5]),
        barycenters=np.array([[0.25], [0.75]]),
        sample_count=2,
        counts=np.array([1, 1]),
    )
    return ExtendedMap(SdotProblem(codes), DualPotential.zeros(2), stats, build_rips(codes, epsilon))


@pytest.fixture
def line_map() -> ExtendedMap:
    return make_line_map(0.6)


@pytest.fixture
def grid_codes(rng: RngStream) -> PointCloud:
    # 4 x 5 jittered grid inside the unit square
    xs, ys = np.meshgrid(np.linspace(0.1, 0.9, 4), np.linspace(0.1, 0.9, 5))
    pts = np.column_stack([xs.ravel(), ys.ravel()])
    return PointCloud(pts + rng.generator().uniform(-0.03, 0.03, size=pts.shape))


@pytest.fixture
def tiny_run_mapping(tmp_path):
    return {
        "seed": 3,
        "out_dir": str(tmp_path / "runs"),
        "data": {"kind": "gaussian-mixture", "params": {"k": 3, "per_mode": 4, "sigma": 0.1}},
        "autoencoder": {"latent_dim": 2, "hidden": [8], "epochs": 20, "batch_size": 4, "lr": 0.01},
        "ot": {
            "expected_modes": 3,
            "mc_samples": 20000,
            "step_size": 0.01,
            "max_iterations": 1500,
            "tolerance": 0.03,
            "verify_samples": 20000,
        },
        "gan": {"batch_size": 4, "epochs": 2, "disc_hidden": [8], "lr_g": 1e-4},
        "eval": {"samples": 200, "w2_samples": 50, "uniformity_samples": 2000},
    }
