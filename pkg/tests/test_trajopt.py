import dataclasses

import numpy as np
import pytest

from doughroll.config import (CemConfig, HeuristicConfig, TrajLossSpec, TrajOptConfig,
                              load_config, replace_section)
from doughroll.errors import ScheduleError
from doughroll.losses import traj_loss
from doughroll.scene import make_goal_cloud
from doughroll.sim import ResetSchedule, init_state
from doughroll.trajopt import (Adam, TrajOptProblem, build_problem, optimize_gbto,
                               generate_reset_pose, resolve_reset_poses, run_cem,
                               run_heuristic_primitive, schedule_resets)


@pytest.fixture(scope="module")
def tiny_exp(tiny_cfg):
    exp = load_config()
    return replace_section(
        exp,
        sim=tiny_cfg,
        trajopt=TrajOptConfig(horizon=8, n_reset=1, iterations=4, learning_rate=0.01,
                              reset_refresh_every=10),
        loss=TrajLossSpec(lambda_contact=10.0, entropic_epsilon=2e-3, sinkhorn_iters=120,
                          n_loss_points=48, loss_timestep_stride=4),
    )


@pytest.fixture(scope="module")
def tiny_problem(tiny_exp, tiny_scene):
    goal = make_goal_cloud(tiny_scene, 48, tiny_exp.sim)
    return build_problem(tiny_scene, goal, "diff-reset", tiny_exp, seed=0)


class TestScheduleResets:
    def test_zero(self):
        assert schedule_resets(100, 0) == []

    def test_one(self):
        assert schedule_resets(100, 1) == [50]

    def test_three(self):
        assert schedule_resets(100, 3) == [25, 50, 75]

    def test_invalid(self):
        with pytest.raises(ScheduleError):
            schedule_resets(3, 3)


class TestGenerateResetPose:
    def test_centered_on_centroid(self, tiny_cfg, tiny_state):
        pose = generate_reset_pose(tiny_state, 0, 0.02, tiny_cfg)
        x = np.asarray(tiny_state.particles.x)
        assert pose.center[0] == pytest.approx(x[:, 0].mean(), abs=1e-9)

    def test_height_arithmetic(self, tiny_cfg, tiny_state):
        pose = generate_reset_pose(tiny_state, 0, 0.02, tiny_cfg)
        x = np.asarray(tiny_state.particles.x)
        assert pose.center[1] == pytest.approx(x[:, 1].max() + 0.05 + 0.02)

    def test_collision_free_on_rollouts(self, tiny_cfg, tiny_state):
        from doughroll.sim import rollout, tool_signed_distance

        rng = np.random.default_rng(0)
        state = tiny_state
        for _ in range(10):
            acts = rng.uniform(-1, 1, (3, 4)) * np.array([0.008, 0.008, 0.1, 0.0])
            state = rollout(state, acts, ResetSchedule(), tiny_cfg)[-1]
            pose = generate_reset_pose(state, 0, 0.02, tiny_cfg)
            d = [tool_signed_distance(pose, p) for p in np.asarray(state.particles.x)]
            assert min(d) >= 0.019


class TestAdam:
    def test_quadratic_convergence(self):
        # sanity oracle: a pure quadratic reaches its optimum
        adam = Adam((2,), lr=0.05)
        x = np.array([1.0, -2.0])
        target = np.array([0.3, 0.7])
        for _ in range(1000):
            x = adam.step(x, 2 * (x - target))
        assert np.abs(x - target).max() < 1e-3


class TestOptimizeGbto:
    def test_zero_iterations_returns_initial(self, tiny_problem):
        problem = dataclasses.replace(
            tiny_problem, optimizer=dataclasses.replace(tiny_problem.optimizer, iterations=0))
        res = optimize_gbto(problem)
        assert len(res.loss_history) == 0
        assert np.isfinite(res.best_loss)

    def test_history_length_and_best(self, tiny_problem):
        res = optimize_gbto(tiny_problem)
        assert len(res.loss_history) == tiny_problem.optimizer.iterations
        assert res.best_loss == pytest.approx(np.min(res.loss_history))

    def test_best_so_far_monotone(self, tiny_problem):
        res = optimize_gbto(tiny_problem)
        best = np.minimum.accumulate(res.loss_history)
        assert np.all(np.diff(best) <= 1e-12)

    def test_deterministic(self, tiny_problem):
        a = optimize_gbto(tiny_problem)
        b = optimize_gbto(tiny_problem)
        assert np.array_equal(a.best_actions, b.best_actions)
        assert a.best_loss == b.best_loss

    def test_actions_respect_clamp(self, tiny_problem):
        res = optimize_gbto(tiny_problem)
        box = np.asarray(tiny_problem.sim_config.clamp_box)
        assert np.all(np.abs(res.best_actions) <= box + 1e-12)

    def test_reset_rows_zero_gradient_means_untouched(self, tiny_exp, tiny_scene):
        goal = make_goal_cloud(tiny_scene, 48, tiny_exp.sim)
        problem = build_problem(tiny_scene, goal, "diff-reset", tiny_exp, seed=3)
        res = optimize_gbto(problem)
        t = problem.schedule.reset_timesteps[0]
        # the reset slot never receives gradient; it keeps its (zeroed) init?
        # init actions are random; assert the row equals the initial value
        from doughroll.trajopt import _init_actions

        init = _init_actions(problem)
        assert np.array_equal(res.best_actions[t - 1], init[t - 1])

    def test_single_particle_quadratic_toy(self):
        """Linear-dynamics quadratic toy: Adam through the rollout machinery
        converges to the analytic optimum."""
        import jax
        import jax.numpy as jnp

        target = jnp.array([0.02, -0.01])

        def loss_fn(actions):
            # trivial integrator: x_T = sum of actions
            xT = jnp.sum(actions, axis=0)
            return jnp.sum((xT - target) ** 2)

        grad_fn = jax.grad(loss_fn)
        acts = np.zeros((4, 2))
        adam = Adam(acts.shape, lr=0.005)
        for _ in range(1000):
            acts = adam.step(acts, np.asarray(grad_fn(jnp.asarray(acts))))
        assert np.abs(acts.sum(axis=0) - np.asarray(target)).max() < 1e-3


class TestSepReset:
    def test_stage_decomposition_matches_full_loss(self, tiny_exp, tiny_scene):
        goal = make_goal_cloud(tiny_scene, 48, tiny_exp.sim)
        problem = build_problem(tiny_scene, goal, "sep-reset", tiny_exp, seed=1)
        res = optimize_gbto(problem)
        states = res.final_states
        full = traj_loss(states, goal, tiny_exp.loss, problem.schedule.reset_timesteps)
        # re-simulated total equals the optimizer's stagewise sum within
        # reset-pose regeneration differences (poses regenerate identically)
        assert res.best_loss == pytest.approx(full, rel=1e-6)

    def test_history_length(self, tiny_exp, tiny_scene):
        goal = make_goal_cloud(tiny_scene, 48, tiny_exp.sim)
        problem = build_problem(tiny_scene, goal, "sep-reset", tiny_exp, seed=1)
        res = optimize_gbto(problem)
        assert len(res.loss_history) == problem.optimizer.iterations


class TestLearnReset:
    def test_runs_and_tracks(self, tiny_exp, tiny_scene):
        goal = make_goal_cloud(tiny_scene, 48, tiny_exp.sim)
        problem = build_problem(tiny_scene, goal, "learn-reset", tiny_exp, seed=2)
        res = optimize_gbto(problem)
        assert len(res.loss_history) == problem.optimizer.iterations
        assert np.isfinite(res.best_loss)


class TestResolvePoses:
    def test_matches_executor(self, tiny_exp, tiny_scene):
        cfg = tiny_exp.sim
        state0 = init_state(cfg, tiny_scene)
        rng = np.random.default_rng(4)
        acts = rng.uniform(-1, 1, (8, 4)) * np.array([0.006, 0.006, 0.1, 0.0])
        poses = resolve_reset_poses(state0, acts, (4,), cfg, 0.02)
        from doughroll.sim import rollout

        states = rollout(state0, acts, ResetSchedule((4,), (), 0.02), cfg)
        assert np.allclose(np.asarray(poses[0].center),
                           np.asarray(states[4].tool.center), atol=0, rtol=0)


class TestCem:
    def test_zero_std_returns_mean(self, tiny_exp, tiny_scene):
        goal = make_goal_cloud(tiny_scene, 48, tiny_exp.sim)
        problem = build_problem(tiny_scene, goal, "diff-reset", tiny_exp, seed=5)
        cem = CemConfig(population=6, elites=2, max_iter=2, plan_horizon=4,
                        initial_std=(0.0, 0.0, 0.0, 0.0))
        res = run_cem(problem, cem)
        assert np.all(res.best_actions == 0.0)

    def test_scalar_quadratic_surrogate(self):
        """CEM mean converges on a 1-step quadratic."""
        rng = np.random.default_rng(0)
        mean, std = 0.0, 0.5
        for _ in range(10):
            cands = mean + std * rng.standard_normal(100)
            losses = (cands - 0.3) ** 2
            elites = cands[np.argsort(losses)[:10]]
            mean, std = elites.mean(), max(elites.std(), 1e-4)
        assert abs(mean - 0.3) < 0.05

    def test_receding_horizon_runs(self, tiny_exp, tiny_scene):
        goal = make_goal_cloud(tiny_scene, 48, tiny_exp.sim)
        problem = build_problem(tiny_scene, goal, "diff-reset", tiny_exp, seed=6)
        cem = CemConfig(population=8, elites=2, max_iter=2, plan_horizon=4)
        res = run_cem(problem, cem)
        assert res.best_actions.shape == (8, 4)
        assert len(res.loss_history) == 2 * 2  # ceil(8/4) rounds x max_iter
        assert np.all(res.best_actions[problem.schedule.reset_timesteps[0] - 1] == 0.0)

    def test_deterministic(self, tiny_exp, tiny_scene):
        goal = make_goal_cloud(tiny_scene, 48, tiny_exp.sim)
        problem = build_problem(tiny_scene, goal, "diff-reset", tiny_exp, seed=7)
        cem = CemConfig(population=8, elites=3, max_iter=2, plan_horizon=4)
        a = run_cem(problem, cem)
        b = run_cem(problem, cem)
        assert np.array_equal(a.best_actions, b.best_actions)


class TestHeuristic:
    def test_single_candidate_grid(self, tiny_exp, tiny_scene):
        goal = make_goal_cloud(tiny_scene, 48, tiny_exp.sim)
        problem = build_problem(tiny_scene, goal, "diff-reset", tiny_exp, seed=8)
        grid = HeuristicConfig(depth_grid=(0.08,), length_grid=(0.06,), n_stages=2)
        res = run_heuristic_primitive(problem, grid)
        assert res.best_actions.shape == (8, 4)
        assert len(res.loss_history) == 2  # one candidate per stage

    def test_no_slip_spin_rate(self, tiny_exp, tiny_scene):
        from doughroll.trajopt import _primitive_actions

        pose = tiny_scene.initial_tool_pose
        acts = _primitive_actions(12, 0.08, 0.06, pose, tiny_exp.sim)
        rolling = np.abs(acts[:, 1]) > 0
        assert rolling.any()
        dl = acts[rolling, 1]
        dw = acts[rolling, 2]
        assert np.allclose(np.abs(dw), np.abs(dl) / pose.radius, rtol=1e-9)
        # contact-point tangential velocity cancels under no-slip
        assert np.allclose(dl + dw * pose.radius, 0.0, atol=1e-12)

    def test_already_at_goal_picks_min_disturbance(self, tiny_exp, tiny_scene):
        # goal = the settled dough shape (slightly offset so the metric is
        # defined); a candidate that never touches the dough must win, and the
        # selection must equal the brute-force argmin of the stage-final EMD
        from doughroll.losses import downsample_cloud, emd_exact
        from doughroll.scene import GoalSpec
        from doughroll.sim import rollout
        from doughroll.trajopt import _primitive_actions

        cfg = tiny_exp.sim
        state0 = init_state(cfg, tiny_scene)
        settled = rollout(state0, np.zeros((250, 4)), ResetSchedule(), cfg)[-1]
        cloud = downsample_cloud(np.asarray(settled.particles.x), 48)
        cloud = cloud + np.array([0.03, 0.0])
        goal = GoalSpec(cloud=cloud, target_center=tiny_scene.target_center,
                        target_radius=tiny_scene.target_radius)
        problem = TrajOptProblem(
            state0=settled, goal=goal, horizon=8, loss_spec=tiny_exp.loss,
            schedule=ResetSchedule((4,), (), 0.02), variant="diff-reset",
            optimizer=tiny_exp.trajopt, sim_config=cfg, seed=9,
        )
        grid = HeuristicConfig(depth_grid=(0.06, 0.17), length_grid=(-0.03, 0.03),
                               n_stages=2)
        res = run_heuristic_primitive(problem, grid)
        assert res.final_performance >= -0.05

        # brute-force stage-1 argmin oracle
        scores = {}
        for d in sorted(grid.depth_grid):
            for l in sorted(grid.length_grid):
                acts = _primitive_actions(3, d, l, settled.tool, cfg)
                end = rollout(settled, acts, ResetSchedule(), cfg)[-1]
                pts = downsample_cloud(np.asarray(end.particles.x), 48)
                scores[(d, l)] = emd_exact(pts, cloud)
        best = min(sorted(scores), key=lambda k: scores[k])
        stage1 = res.best_actions[:3]
        expected = _primitive_actions(3, best[0], best[1], settled.tool, cfg)
        assert np.array_equal(stage1, expected)
