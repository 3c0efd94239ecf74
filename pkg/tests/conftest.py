import sys

import numpy as np
import pytest

from c123.cases import case_from_scene, synthetic_target
from c123.scene import SceneModel, pose_from_spherical


def sphere_scene(size=12, radius=0.5, raw_inside=3.0, color=(0.0, 0.0, 0.0), half=1.0):
    scene = SceneModel.empty(size, half)
    x, y, z = scene.node_coordinates()
    inside = np.sqrt(x ** 2 + y ** 2 + z ** 2) <= radius
    scene.density = np.where(inside, raw_inside, -10.0)
    scene.color = np.broadcast_to(np.asarray(color, dtype=float), scene.color.shape).copy()
    return scene


def random_scene(size=8, seed=0):
    rng = np.random.default_rng(seed)
    return SceneModel(rng.normal(-1.0, 1.5, (size,) * 3), rng.normal(0, 1, (size,) * 3 + (3,)), 1.0)


@pytest.fixture
def ref_pose():
    return pose_from_spherical(0.0, 0.0, 3.0, 40.0)


@pytest.fixture
def small_target():
    return synthetic_target(8)


@pytest.fixture
def small_case(small_target, ref_pose):
    return case_from_scene(small_target, ref_pose, 16, prompt="a small thing", n_samples=24, category="toys")


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
