"""
Pytest configuration and fixtures for the PolyMap tests.
"""

import numpy as np
import pytest
from dotenv import load_dotenv

from backend.models.geometry import CameraIntrinsics, Frame, Pose
from backend.models.scenario import NoiseModel, ScenarioConfig, StaircaseScene

# Load environment
load_dotenv()


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: Monte-Carlo and throughput tests (deselect with -m "not slow")')


@pytest.fixture
def rng():
    """Seeded generator so every randomized test is reproducible."""
    return np.random.default_rng(20240611)


@pytest.fixture(scope='session')
def intrinsics():
    """Default 640x480 pinhole camera."""
    return CameraIntrinsics()


@pytest.fixture(scope='session')
def small_intrinsics():
    """160x120 camera with the same field of view, for fast scenario runs."""
    return CameraIntrinsics(fx=115.0, fy=115.0, cx=80.0, cy=60.0, width=160, height=120)


@pytest.fixture(scope='session')
def staircase():
    """Four 13 cm x 28 cm steps, first riser 0.3 m ahead of the world origin."""
    return StaircaseScene()


@pytest.fixture
def base_at_origin():
    return Pose.from_xyz_yaw(0.0, 0.0, 0.8, 0.0, Frame.W, Frame.B)


@pytest.fixture
def noiseless_config():
    return ScenarioConfig(name='noiseless', noise=NoiseModel(seed=1))


@pytest.fixture
def noisy_config():
    """Depth 5 mm, 5 % dropout, actuation 3 mm."""
    return ScenarioConfig(
        name='noisy',
        noise=NoiseModel(depth_sigma=0.005, depth_dropout=0.05, actuation_sigma=0.003,
                         drift_rate=0.001, lio_sigma=0.005, seed=11),
    )
