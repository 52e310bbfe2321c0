import numpy as np
import pytest

from also_ssl.geometry import PointCloud
from also_ssl.lidar import SceneConfig, SensorModel


@pytest.fixture
def small_sensor():
    return SensorModel(n_azimuth=256, elevation_angles=tuple(np.deg2rad(np.linspace(-25, 5, 16))))


@pytest.fixture
def quiet_sensor():
    return SensorModel(range_noise_sigma=0.0, intensity_noise_sigma=0.0)


@pytest.fixture
def small_scene_config():
    return SceneConfig(half_extent=12.0, n_boxes=4, n_cylinders=3, n_spheres=2)


def random_cloud(n=64, seed=0, intensity=True, labels=True):
    g = np.random.default_rng(seed)
    pts = g.normal(size=(n, 3)) * 3.0 + np.array([6.0, 0.0, 0.5])
    return PointCloud(
        np.array([0.0, 0.0, 1.8]),
        pts,
        g.uniform(0, 1, n) if intensity else None,
        g.integers(0, 4, n) if labels else None,
    )


# criterion number -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
