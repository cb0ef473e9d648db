import dataclasses

import numpy as np
import pytest

from doughroll.config import (PolicyConfig, TrainConfig, TrajLossSpec, TrajOptConfig,
                              load_config, replace_section)
from doughroll.dataset import record_demonstration
from doughroll.errors import ShapeError
from doughroll.policy import (bc_train, init_policy_params, load_policy, policy_forward,
                              rollout_policy_closed_loop, rollout_policy_open_loop,
                              save_policy)
from doughroll.scene import make_goal_cloud


@pytest.fixture(scope="module")
def tiny_exp(tiny_cfg):
    exp = load_config()
    return replace_section(
        exp, sim=tiny_cfg,
        trajopt=TrajOptConfig(horizon=8, n_reset=1, iterations=3, learning_rate=0.01),
        loss=TrajLossSpec(sinkhorn_iters=100, n_loss_points=48, loss_timestep_stride=4),
    )


@pytest.fixture(scope="module")
def tiny_pcfg():
    return PolicyConfig(width_scale=0.125, group_size=16)


@pytest.fixture(scope="module")
def demos(tiny_exp, tiny_scene):
    goal = make_goal_cloud(tiny_scene, 48, tiny_exp.sim)
    rng = np.random.default_rng(0)
    out = []
    for i in range(3):
        acts = rng.uniform(-1, 1, (8, 4)) * [0.008, 0.008, 0.1, 0.0]
        acts[:, 0] -= 0.004
        out.append(record_demonstration(tiny_scene, goal, acts, (4,), tiny_exp, seed=i))
    return out


@pytest.fixture(scope="module")
def trained(demos, tiny_exp, tiny_pcfg):
    tc = TrainConfig(epochs=30, batch_size=8, val_fraction=0.0, relabel_fraction=0.5)
    return bc_train(demos, tiny_exp, seed=0, train_cfg=tc, pcfg=tiny_pcfg)


class TestForward:
    def test_output_in_clamp_box(self, trained, demos):
        a = policy_forward(trained, demos[0].observations[0])
        assert abs(a.dy) <= 0.01 and abs(a.dl) <= 0.01
        assert abs(a.domega_int) <= 0.2 and a.domega_global == 0.0

    def test_permutation_stability(self, trained, demos):
        obs = demos[0].observations[2]
        base = policy_forward(trained, obs).as_array()
        rng = np.random.default_rng(3)
        for _ in range(3):
            shuffled = dataclasses.replace(
                obs,
                dough_points=obs.dough_points[rng.permutation(len(obs.dough_points))],
                goal_points=obs.goal_points[rng.permutation(len(obs.goal_points))],
            )
            out = policy_forward(trained, shuffled).as_array()
            assert np.abs(out - base).max() < 1e-6

    def test_shape_mismatch_names_cloud(self, trained, demos):
        obs = demos[0].observations[0]
        bad = dataclasses.replace(obs, dough_points=obs.dough_points[:10])
        with pytest.raises(ShapeError, match="dough"):
            policy_forward(trained, bad)

    def test_deterministic(self, trained, demos):
        obs = demos[0].observations[0]
        a = policy_forward(trained, obs).as_array()
        b = policy_forward(trained, obs).as_array()
        assert np.array_equal(a, b)


class TestTraining:
    def test_zero_residual_loss_is_zero(self, tiny_exp, tiny_pcfg, demos):
        from doughroll.policy import _batched_loss_fn, observation_arrays
        import jax.numpy as jnp

        policy = init_policy_params(tiny_pcfg, (48, 32, 48),
                                    tiny_exp.sim.clamp_box, seed=0)
        obs = demos[0].observations[0]
        pts, feat = observation_arrays(obs)
        loss_fn = _batched_loss_fn(tiny_pcfg, policy.clamp_box)
        params = {k: jnp.asarray(v) for k, v in policy.params.items()}
        pred = policy_forward(policy, obs).as_array()
        loss = loss_fn(params, jnp.asarray(pts[None], dtype=jnp.float32),
                       jnp.asarray(feat[None], dtype=jnp.float32),
                       jnp.asarray(pred[None], dtype=jnp.float32))
        assert float(loss) == pytest.approx(0.0, abs=1e-12)

    def test_single_demo_overfit(self, tiny_exp, tiny_pcfg, demos):
        tc = TrainConfig(epochs=300, batch_size=7, val_fraction=0.0,
                         relabel_fraction=0.0, noise_sigma=0.0, learning_rate=1e-3)
        pol = bc_train(demos[:1], tiny_exp, seed=1, train_cfg=tc, pcfg=tiny_pcfg)
        assert pol.meta["final_train_loss"] < 1e-3

    def test_loss_curve_decreasing_on_windows(self, trained):
        curve = np.asarray(trained.meta["train_curve"])
        thirds = len(curve) // 3
        assert curve[:thirds].mean() > curve[-thirds:].mean()

    def test_bit_reproducible(self, demos, tiny_exp, tiny_pcfg):
        tc = TrainConfig(epochs=3, batch_size=8, val_fraction=0.0)
        a = bc_train(demos, tiny_exp, seed=4, train_cfg=tc, pcfg=tiny_pcfg)
        b = bc_train(demos, tiny_exp, seed=4, train_cfg=tc, pcfg=tiny_pcfg)
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)

    def test_parameter_gradients_match_fd(self, tiny_exp, demos):
        """Analytic parameter gradients vs central differences on a tiny net."""
        import jax
        import jax.numpy as jnp

        from doughroll.policy import _batched_loss_fn, observation_arrays

        pcfg = PolicyConfig(
            sa_levels=((0.5, 0.06, (8, 8)),), global_mlp_widths=(8, 16),
            head_widths=(16, 8, 4), width_scale=1.0, group_size=8,
        )
        policy = init_policy_params(pcfg, (48, 32, 48), tiny_exp.sim.clamp_box,
                                    seed=2, dtype=np.float64)
        obs = demos[0].observations[1]
        pts, feat = observation_arrays(obs)
        label = np.array([0.004, -0.002, 0.05, 0.0])
        loss_fn = _batched_loss_fn(pcfg, policy.clamp_box)
        params = {k: jnp.asarray(v, dtype=jnp.float64) for k, v in policy.params.items()}
        args = (jnp.asarray(pts[None]), jnp.asarray(feat[None]), jnp.asarray(label[None]))
        grads = jax.grad(loss_fn)(params, *args)
        rng = np.random.default_rng(0)
        h = 1e-6
        for name in ("sa0_0_w", "glob_1_w", "head_2_w", "out_w", "out_b"):
            arr = np.asarray(params[name])
            flat_idx = rng.integers(0, arr.size, size=3)
            for fi in flat_idx:
                idx = np.unravel_index(fi, arr.shape)
                up = {k: np.asarray(v).copy() for k, v in params.items()}
                dn = {k: np.asarray(v).copy() for k, v in params.items()}
                up[name][idx] += h
                dn[name][idx] -= h
                fd = (float(loss_fn({k: jnp.asarray(v) for k, v in up.items()}, *args))
                      - float(loss_fn({k: jnp.asarray(v) for k, v in dn.items()}, *args))
                      ) / (2 * h)
                ad = float(np.asarray(grads[name])[idx])
                assert ad == pytest.approx(fd, rel=1e-4, abs=1e-9)


class TestExecutors:
    def test_zero_policy_inert(self, tiny_exp, tiny_scene, tiny_pcfg):
        policy = init_policy_params(tiny_pcfg, (128, 32, 128),
                                    (0.0, 0.0, 0.0, 0.0), seed=0)
        # zero clamp box forces zero actions regardless of weights
        states, perf = rollout_policy_closed_loop(policy, tiny_scene, tiny_exp,
                                                  reset_timesteps=(), horizon=8)
        assert abs(perf) < 0.05

    def test_playback_matches_demo(self, demos, tiny_exp):
        demo = demos[0]

        def playback(obs, t):
            from doughroll.sim import ActionCommand

            return ActionCommand.from_array(demo.actions[t].astype(np.float64))

        states, perf = rollout_policy_closed_loop(
            None, demo.scene, tiny_exp, reset_timesteps=demo.reset_timesteps,
            horizon=8, action_fn=playback,
        )
        assert perf == pytest.approx(demo.performance, abs=1e-6)

    def test_open_loop_shapes_and_overfit(self, demos, tiny_exp, tiny_pcfg):
        tc = TrainConfig(epochs=400, batch_size=4, val_fraction=0.0,
                         relabel_fraction=0.0, noise_sigma=0.0, open_loop=True)
        pol = bc_train(demos[:1], tiny_exp, seed=3, train_cfg=tc, pcfg=tiny_pcfg)
        assert pol.open_loop
        demo = demos[0]
        from doughroll.dataset import CameraSpec, build_observation
        from doughroll.sim import init_state

        state0 = init_state(tiny_exp.sim, demo.scene)
        obs = build_observation(state0, demo.goal.cloud, tiny_exp.dataset, tiny_exp.sim)
        actions = policy_forward(pol, obs)
        assert actions.shape == (8, 4)
        states, perf = rollout_policy_open_loop(pol, demo.scene, tiny_exp,
                                                demo.reset_timesteps)
        if demo.performance > 0.05:
            assert perf >= 0.9 * demo.performance

    def test_checkpoint_roundtrip_exact(self, trained, demos, tmp_path):
        path = tmp_path / "p.drmp"
        save_policy(path, trained)
        loaded = load_policy(path)
        a = policy_forward(trained, demos[0].observations[0]).as_array()
        b = policy_forward(loaded, demos[0].observations[0]).as_array()
        assert np.array_equal(a, b)
