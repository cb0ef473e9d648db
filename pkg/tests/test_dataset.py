import numpy as np
import pytest

from doughroll.config import TrajLossSpec, TrajOptConfig, load_config, replace_section
from doughroll.dataset import (CameraSpec, Demonstration, augment_noise,
                               build_observation, generate_demos, read_dataset,
                               record_demonstration, relabel_hindsight,
                               synth_partial_cloud, write_dataset)
from doughroll.errors import ChecksumError, OccludedSceneError
from doughroll.losses import emd_exact
from doughroll.scene import make_goal_cloud
from doughroll.sim import ResetSchedule, SimState, ToolPose, init_state, rollout
from doughroll.sim.types import ParticleState


@pytest.fixture(scope="module")
def tiny_exp(tiny_cfg):
    exp = load_config()
    return replace_section(
        exp, sim=tiny_cfg,
        trajopt=TrajOptConfig(horizon=8, n_reset=1, iterations=3, learning_rate=0.01),
        loss=TrajLossSpec(sinkhorn_iters=100, n_loss_points=48, loss_timestep_stride=4),
    )


def _state_with(particles_xy, tool):
    n = len(particles_xy)
    p = ParticleState(
        x=np.asarray(particles_xy, dtype=np.float64), v=np.zeros((n, 2)),
        F=np.broadcast_to(np.eye(2), (n, 2, 2)).copy(), C=np.zeros((n, 2, 2)),
        mass=np.ones(n), volume=np.full(n, 1e-4),
    )
    return SimState(p, tool, 0)


class TestSynthPartialCloud:
    def test_single_particle_padded(self, tiny_cfg):
        st = _state_with([[0.5, 0.3]], ToolPose(center=np.array([5.0, 5.0])))
        cloud = synth_partial_cloud(st, CameraSpec(), 7, tiny_cfg)
        assert cloud.shape == (7, 2)
        assert np.all(cloud == [0.5, 0.3])

    def test_lower_particle_in_same_bin_excluded(self, tiny_cfg):
        st = _state_with([[0.5, 0.3], [0.5001, 0.2]], ToolPose(center=np.array([5.0, 5.0])))
        cloud = synth_partial_cloud(st, CameraSpec(), 2, tiny_cfg)
        assert np.all(cloud[:, 1] == 0.3)

    def test_tool_occlusion(self, tiny_cfg):
        # roller directly above one particle shadows it
        tool = ToolPose(center=np.array([0.5, 0.5]), radius=0.05)
        st = _state_with([[0.5, 0.3], [0.8, 0.3]], tool)
        cloud = synth_partial_cloud(st, CameraSpec(), 2, tiny_cfg)
        assert np.all(cloud[:, 0] == 0.8)

    def test_particle_above_tool_visible(self, tiny_cfg):
        tool = ToolPose(center=np.array([0.5, 0.5]), radius=0.05)
        st = _state_with([[0.5, 0.8]], tool)
        cloud = synth_partial_cloud(st, CameraSpec(), 1, tiny_cfg)
        assert np.all(cloud == [0.5, 0.8])

    def test_fully_occluded_raises(self, tiny_cfg):
        tool = ToolPose(center=np.array([0.5, 0.5]), radius=0.1)
        st = _state_with([[0.5, 0.3]], tool)
        with pytest.raises(OccludedSceneError):
            synth_partial_cloud(st, CameraSpec(), 4, tiny_cfg)

    def test_visibility_soundness_brute_force(self, tiny_cfg, tiny_scene):
        # every returned point is the bin-topmost unshadowed particle
        st = init_state(tiny_cfg, tiny_scene)
        st = SimState(st.particles,
                      ToolPose(center=np.array([0.48, 0.31]), radius=0.05), 0)
        cloud = synth_partial_cloud(st, CameraSpec(), 16, tiny_cfg)
        x = np.asarray(st.particles.x)
        bw = tiny_cfg.cell_size
        for p in cloud:
            same_bin = np.floor(x[:, 0] / bw) == np.floor(p[0] / bw)
            assert p[1] == pytest.approx(x[same_bin][:, 1].max())
            dxp = p[0] - 0.48
            if abs(dxp) < 0.05:
                assert p[1] >= 0.31 + np.sqrt(0.05**2 - dxp**2) - 1e-12


class TestObservations:
    def test_sizes_and_onehot(self, tiny_exp, tiny_scene):
        st = init_state(tiny_exp.sim, tiny_scene)
        goal = make_goal_cloud(tiny_scene, 48, tiny_exp.sim)
        obs = build_observation(st, goal.cloud, tiny_exp.dataset, tiny_exp.sim)
        assert obs.dough_points.shape == (tiny_exp.dataset.n_obs, 2)
        assert obs.tool_points.shape == (tiny_exp.dataset.n_tool, 2)
        assert obs.goal_points.shape == (tiny_exp.dataset.n_goal, 2)
        onehot = obs.type_onehot
        assert np.all(onehot.sum(axis=1) == 1.0)

    def test_augment_noise_statistics(self, tiny_exp, tiny_scene):
        st = init_state(tiny_exp.sim, tiny_scene)
        goal = make_goal_cloud(tiny_scene, 48, tiny_exp.sim)
        obs = build_observation(st, goal.cloud, tiny_exp.dataset, tiny_exp.sim)
        big = obs.__class__(
            dough_points=np.zeros((50000, 2), dtype=np.float32),
            tool_points=obs.tool_points,
            goal_points=np.zeros((50000, 2), dtype=np.float32),
        )
        noisy = augment_noise(big, 0.01, seed=5)
        delta = np.concatenate([noisy.dough_points.ravel(), noisy.goal_points.ravel()])
        assert np.std(delta) == pytest.approx(0.01, rel=0.02)

    def test_augment_zero_sigma_identity(self, tiny_exp, tiny_scene):
        st = init_state(tiny_exp.sim, tiny_scene)
        goal = make_goal_cloud(tiny_scene, 48, tiny_exp.sim)
        obs = build_observation(st, goal.cloud, tiny_exp.dataset, tiny_exp.sim)
        noisy = augment_noise(obs, 0.0, seed=5)
        assert noisy is obs

    def test_augment_deterministic(self, tiny_exp, tiny_scene):
        st = init_state(tiny_exp.sim, tiny_scene)
        goal = make_goal_cloud(tiny_scene, 48, tiny_exp.sim)
        obs = build_observation(st, goal.cloud, tiny_exp.dataset, tiny_exp.sim)
        a = augment_noise(obs, 0.01, seed=5)
        b = augment_noise(obs, 0.01, seed=5)
        assert np.array_equal(a.dough_points, b.dough_points)


@pytest.fixture(scope="module")
def demo(tiny_exp, tiny_scene):
    goal = make_goal_cloud(tiny_scene, 48, tiny_exp.sim)
    acts = np.random.default_rng(0).uniform(-1, 1, (8, 4)) * [0.008, 0.008, 0.1, 0.0]
    return record_demonstration(tiny_scene, goal, acts, (4,), tiny_exp, seed=7)


class TestDemonstrations:
    def test_replay_reproduces_final_cloud_bitwise(self, demo, tiny_exp):
        state0 = init_state(tiny_exp.sim, demo.scene)
        sched = ResetSchedule(demo.reset_timesteps, (), tiny_exp.scene.tool_clearance)
        states = rollout(state0, demo.actions.astype(np.float64), sched, tiny_exp.sim)
        achieved = synth_partial_cloud(states[-1], CameraSpec(), tiny_exp.dataset.n_goal,
                                       tiny_exp.sim)
        assert np.array_equal(achieved.astype(np.float32), demo.achieved_final_cloud)

    def test_performance_recompute(self, demo, tiny_exp):
        from doughroll.trajopt import evaluate_performance

        state0 = init_state(tiny_exp.sim, demo.scene)
        sched = ResetSchedule(demo.reset_timesteps, (), tiny_exp.scene.tool_clearance)
        states = rollout(state0, demo.actions.astype(np.float64), sched, tiny_exp.sim)
        perf = evaluate_performance(state0, states[-1], demo.goal, 48)
        assert perf == pytest.approx(demo.performance, abs=1e-9)

    def test_relabel_goal_equals_achieved(self, demo):
        rel = relabel_hindsight(demo)
        assert np.array_equal(rel.goal.cloud.astype(np.float32), demo.achieved_final_cloud)
        for obs in rel.observations:
            assert np.array_equal(obs.goal_points, demo.achieved_final_cloud)

    def test_relabel_idempotent(self, demo):
        once = relabel_hindsight(demo)
        twice = relabel_hindsight(once)
        assert np.array_equal(once.goal.cloud, twice.goal.cloud)

    def test_relabel_preserves_actions_and_dough(self, demo):
        rel = relabel_hindsight(demo)
        assert np.array_equal(rel.actions, demo.actions)
        for a, b in zip(rel.observations, demo.observations):
            assert np.array_equal(a.dough_points, b.dough_points)

    def test_relabeled_performance_is_one(self, demo):
        rel = relabel_hindsight(demo)
        assert rel.performance == 1.0
        # recompute: final observed cloud vs relabeled goal has zero distance
        assert emd_exact(demo.achieved_final_cloud.astype(np.float64),
                         rel.goal.cloud) == pytest.approx(0.0, abs=1e-12)


class TestDatasetIO:
    def test_roundtrip(self, demo, tiny_exp, tmp_path):
        rel = relabel_hindsight(demo)
        path = tmp_path / "ds"
        write_dataset([demo, rel], path, tiny_exp)
        back = read_dataset(path)
        assert len(back) == 2
        for orig, loaded in zip([demo, rel], back):
            assert np.array_equal(orig.actions, loaded.actions)
            assert np.array_equal(orig.achieved_final_cloud, loaded.achieved_final_cloud)
            assert orig.reset_timesteps == loaded.reset_timesteps
            assert orig.performance == loaded.performance
            for a, b in zip(orig.observations, loaded.observations):
                assert np.array_equal(a.dough_points, b.dough_points)
                assert np.array_equal(a.tool_points, b.tool_points)
                assert np.array_equal(a.goal_points, b.goal_points)

    def test_empty_dataset_roundtrip(self, tiny_exp, tmp_path):
        path = tmp_path / "empty"
        write_dataset([], path, tiny_exp)
        assert read_dataset(path) == []

    def test_corruption_detected(self, demo, tiny_exp, tmp_path):
        path = tmp_path / "corrupt"
        write_dataset([demo], path, tiny_exp)
        chunk = path / "traj_0000.drmd"
        raw = bytearray(chunk.read_bytes())
        raw[100] ^= 0xFF
        chunk.write_bytes(bytes(raw))
        with pytest.raises(ChecksumError):
            read_dataset(path)


class TestGenerateDemos:
    def test_smoke_single_demo(self, tiny_exp, tiny_scene):
        import dataclasses

        exp = replace_section(
            tiny_exp,
            dataset=dataclasses.replace(tiny_exp.dataset, quality_gate=-10.0),
        )
        demos = generate_demos([tiny_scene], exp, count=1, seed=0)
        assert len(demos) == 1
        d = demos[0]
        assert d.actions.shape == (exp.trajopt.horizon, 4)
        assert len(d.observations) == exp.trajopt.horizon
        assert d.actions.dtype == np.float32
