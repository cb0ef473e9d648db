import numpy as np
import pytest

from doughroll.config import SimConfig, SceneSampleRanges, TrajLossSpec
from doughroll.scene import SceneSample, make_goal_cloud, sample_scene_grid
from doughroll.sim import ToolPose, init_state


def pytest_addoption(parser):
    parser.addoption("--run-acceptance", action="store_true", default=False,
                     help="run the full acceptance suite (slow)")


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: full acceptance criteria (slow)")
    config.addinivalue_line("markers", "slow: long-running integration test")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-acceptance"):
        return
    skip = pytest.mark.skip(reason="acceptance suite runs with --run-acceptance")
    for item in items:
        if "acceptance" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def tiny_cfg():
    return SimConfig(
        grid_resolution=16, cell_size=1.0 / 16.0, particle_count=48,
        substeps_per_control=10,
    )


@pytest.fixture(scope="session")
def tiny_scene(tiny_cfg):
    floor = tiny_cfg.floor_height
    r = 0.09
    pose = ToolPose(center=np.array([0.5, floor + 2 * r + 0.045]), heading=0.0,
                    spin=0.0, radius=0.05)
    return SceneSample(
        dough_center=(0.5, floor + r), dough_radius=r,
        target_center=(0.55, floor), target_radius=0.16,
        initial_tool_pose=pose, seed=3,
    )


@pytest.fixture(scope="session")
def tiny_state(tiny_cfg, tiny_scene):
    return init_state(tiny_cfg, tiny_scene)


@pytest.fixture(scope="session")
def tiny_goal(tiny_cfg, tiny_scene):
    return make_goal_cloud(tiny_scene, 48, tiny_cfg)


@pytest.fixture(scope="session")
def tiny_loss_spec():
    return TrajLossSpec(
        lambda_contact=10.0, entropic_epsilon=2e-3, sinkhorn_iters=300,
        n_loss_points=48, loss_timestep_stride=2,
    )


@pytest.fixture(scope="session")
def default_cfg():
    return SimConfig()


@pytest.fixture(scope="session")
def default_scenes(default_cfg):
    return sample_scene_grid(125, 0, SceneSampleRanges(), default_cfg)
