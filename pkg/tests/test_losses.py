import itertools

import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from doughroll.config import TrajLossSpec
from doughroll.errors import CardinalityError, DegenerateGoalError
from doughroll.losses import (chamfer, contact_loss, downsample_cloud, emd_entropic,
                              emd_exact, normalized_performance, traj_loss)
from doughroll.sim import ResetSchedule, ToolPose, rollout
from doughroll.sim.kernels import fps_fixed


def brute_force_emd(A, B):
    return min(
        np.mean(np.linalg.norm(A - B[list(p)], axis=1))
        for p in itertools.permutations(range(len(A)))
    )


clouds = arrays(np.float64, (5, 2), elements=st.floats(-1, 1, allow_nan=False, width=32))


class TestEmdExact:
    def test_identity(self):
        A = np.random.default_rng(0).uniform(size=(10, 2))
        assert emd_exact(A, A) == 0.0

    def test_two_point_example(self):
        A = np.array([[0.0, 0.0], [1.0, 0.0]])
        B = np.array([[0.0, 1.0], [1.0, 1.0]])
        assert emd_exact(A, B) == pytest.approx(1.0)

    def test_permutation_invariance(self):
        A = np.array([[0.0, 0.0], [1.0, 0.0]])
        B = np.array([[1.0, 0.0], [0.0, 0.0]])
        assert emd_exact(A, B) == 0.0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            n = int(rng.integers(2, 8))
            A, B = rng.uniform(size=(n, 2)), rng.uniform(size=(n, 2))
            assert emd_exact(A, B) == pytest.approx(brute_force_emd(A, B), abs=1e-12)

    def test_size_mismatch(self):
        with pytest.raises(CardinalityError):
            emd_exact(np.zeros((3, 2)), np.zeros((4, 2)))

    @settings(max_examples=60, deadline=None)
    @given(A=clouds, B=clouds, C=clouds)
    def test_metric_properties(self, A, B, C):
        ab = emd_exact(A, B)
        assert ab == pytest.approx(emd_exact(B, A), abs=1e-12)
        assert ab <= emd_exact(A, C) + emd_exact(C, B) + 1e-9


class TestEmdEntropic:
    def test_self_cost_small(self):
        A = np.random.default_rng(2).uniform(size=(20, 2))
        spec = TrajLossSpec(entropic_epsilon=1e-4, sinkhorn_iters=300)
        res = emd_entropic(A, A, spec)
        assert res.value < 1e-3 * np.ptp(A)

    def test_close_to_exact(self):
        rng = np.random.default_rng(3)
        A, B = rng.uniform(size=(50, 2)), rng.uniform(size=(50, 2))
        spec = TrajLossSpec(entropic_epsilon=1e-4, sinkhorn_iters=200)
        res = emd_entropic(A, B, spec)
        exact = emd_exact(A, B)
        assert res.value == pytest.approx(exact, rel=0.05)
        assert res.value >= exact - 1e-6

    def test_plan_marginals(self):
        rng = np.random.default_rng(4)
        A, B = rng.uniform(size=(16, 2)), rng.uniform(size=(16, 2))
        res = emd_entropic(A, B, TrajLossSpec(entropic_epsilon=1e-3, sinkhorn_iters=400))
        assert np.abs(res.plan.sum(axis=1) - 1 / 16).max() < 1e-3
        assert np.abs(res.plan.sum(axis=0) - 1 / 16).max() < 1e-3

    def test_monotone_in_epsilon(self):
        rng = np.random.default_rng(5)
        A, B = rng.uniform(size=(30, 2)), rng.uniform(size=(30, 2))
        exact = emd_exact(A, B)
        err = [
            abs(emd_entropic(A, B, TrajLossSpec(entropic_epsilon=e,
                                                sinkhorn_iters=400)).value - exact)
            for e in (1e-2, 1e-3, 1e-4)
        ]
        assert err[0] >= err[2]

    def test_envelope_gradient_matches_fixed_plan_fd(self):
        # gradient contract: d(cost)/dA with the plan held fixed
        rng = np.random.default_rng(6)
        A, B = rng.uniform(size=(12, 2)), rng.uniform(size=(12, 2))
        spec = TrajLossSpec(entropic_epsilon=1e-3, sinkhorn_iters=500)
        res = emd_entropic(A, B, spec)
        plan = res.plan

        def fixed_plan_cost(A_):
            C = np.linalg.norm(A_[:, None, :] - B[None, :, :], axis=-1)
            return (plan * C).sum()

        import jax

        grad = jax.grad(
            lambda A_: jnp.sum(jnp.asarray(plan) * jnp.sqrt(
                jnp.sum((A_[:, None, :] - jnp.asarray(B)[None, :, :]) ** 2, -1)))
        )(jnp.asarray(A))
        h = 1e-6
        for i in (0, 5, 11):
            for k in (0, 1):
                up, dn = A.copy(), A.copy()
                up[i, k] += h
                dn[i, k] -= h
                fd = (fixed_plan_cost(up) - fixed_plan_cost(dn)) / (2 * h)
                assert float(grad[i, k]) == pytest.approx(fd, rel=1e-4, abs=1e-10)


class TestChamfer:
    def test_identity_and_symmetry(self):
        rng = np.random.default_rng(7)
        A, B = rng.uniform(size=(9, 2)), rng.uniform(size=(13, 2))
        assert chamfer(A, A) == 0.0
        assert chamfer(A, B) == pytest.approx(chamfer(B, A))

    def test_analytic(self):
        assert chamfer(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]])) == pytest.approx(10.0)

    def test_empty_rejected(self):
        with pytest.raises(CardinalityError):
            chamfer(np.zeros((0, 2)), np.zeros((3, 2)))


class TestContactLoss:
    def test_touching_zero(self):
        tool = ToolPose(center=np.array([0.0, 1.0]), radius=1.0)
        assert contact_loss(tool, np.array([[0.0, 0.0]

]), beta=200.0) == pytest.approx(0.0, abs=1e-6)

    def test_single_particle_exact(self):
        tool = ToolPose(center=np.array([0.0, 2.0]), radius=1.0)
        assert contact_loss(tool, np.array([[0.0, 0.0]]), beta=200.0) == pytest.approx(1.0)

    def test_softmin_below_hard_min(self):
        rng = np.random.default_rng(8)
        tool = ToolPose(center=np.array([0.5, 0.8]), radius=0.05)
        for _ in range(20):
            pts = rng.uniform(size=(40, 2))
            hard = max(0.0, np.min(np.linalg.norm(pts - tool.center, axis=1)) - 0.05)
            assert contact_loss(tool, pts, beta=200.0) <= hard + 1e-12


class TestDownsample:
    def test_full_sample_is_permutation(self):
        rng = np.random.default_rng(9)
        A = rng.uniform(size=(12, 2))
        out = downsample_cloud(A, 12)
        assert sorted(map(tuple, out)) == sorted(map(tuple, A))

    def test_line_extremes(self):
        pts = np.array([[0.1, 0.0], [0.2, 0.0], [0.6, 0.0], [0.95, 0.0], [1.0, 0.0]])
        out = downsample_cloud(pts, 2)
        assert {tuple(p) for p in out} == {(0.1, 0.0), (1.0, 0.0)}

    def test_deterministic_and_order_free(self):
        rng = np.random.default_rng(10)
        A = rng.uniform(size=(40, 2))
        out1 = downsample_cloud(A, 16)
        out2 = downsample_cloud(A[rng.permutation(40)], 16)
        assert np.array_equal(out1, out2)

    def test_matches_jit_fps(self):
        rng = np.random.default_rng(11)
        A = rng.uniform(size=(64, 2))
        a = downsample_cloud(A, 24)
        b = np.asarray(fps_fixed(jnp.asarray(A), 24))
        assert np.array_equal(a, b)

    def test_too_many_requested(self):
        with pytest.raises(CardinalityError):
            downsample_cloud(np.zeros((3, 2)), 4)


class TestNormalizedPerformance:
    def test_endpoints(self):
        rng = np.random.default_rng(12)
        P0, Pg = rng.uniform(size=(10, 2)), rng.uniform(size=(10, 2))
        assert normalized_performance(P0, P0, Pg) == pytest.approx(0.0)
        assert normalized_performance(P0, Pg, Pg) == pytest.approx(1.0)

    def test_halfway(self):
        P0 = np.array([[0.0, 0.0]])
        Pg = np.array([[2.0, 0.0]])
        PT = np.array([[1.0, 0.0]])
        assert normalized_performance(P0, PT, Pg) == pytest.approx(0.5)

    def test_degenerate_goal(self):
        A = np.ones((4, 2))
        with pytest.raises(DegenerateGoalError):
            normalized_performance(A, A, A)

    def test_rigid_invariance(self):
        rng = np.random.default_rng(13)
        P0, PT, Pg = (rng.uniform(size=(12, 2)) for _ in range(3))
        base = normalized_performance(P0, PT, Pg)
        theta = 0.7
        R = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        t = np.array([0.3, -0.2])
        moved = normalized_performance(P0 @ R.T + t, PT @ R.T + t, Pg @ R.T + t)
        assert moved == pytest.approx(base, rel=1e-9)


class TestTrajLoss:
    def test_lambda_zero_is_pure_roll(self, tiny_cfg, tiny_state, tiny_goal, tiny_loss_spec):
        acts = np.zeros((6, 4))
        acts[:, 0] = -0.005
        states = rollout(tiny_state, acts, ResetSchedule(), tiny_cfg)
        spec0 = TrajLossSpec(lambda_contact=0.0, entropic_epsilon=2e-3, sinkhorn_iters=300,
                             n_loss_points=48, loss_timestep_stride=2)
        base = traj_loss(states, tiny_goal, spec0)
        withc = traj_loss(states, tiny_goal, tiny_loss_spec)
        contact_sum = sum(
            contact_loss(states[t].tool, np.asarray(states[t].particles.x), 200.0)
            for t in range(2, 7, 2)
        )
        assert withc == pytest.approx(base + 10.0 * contact_sum, rel=1e-6)

    def test_stride_equals_horizon_final_only(self, tiny_cfg, tiny_state, tiny_goal):
        acts = np.zeros((6, 4))
        acts[:, 0] = -0.005
        states = rollout(tiny_state, acts, ResetSchedule(), tiny_cfg)
        spec = TrajLossSpec(lambda_contact=3.0, entropic_epsilon=2e-3, sinkhorn_iters=300,
                            n_loss_points=48, loss_timestep_stride=6)
        total = traj_loss(states, tiny_goal, spec)
        from doughroll.losses import _entropic_eval

        _, dual, _, _ = _entropic_eval(
            jnp.asarray(np.asarray(states[6].particles.x)), jnp.asarray(tiny_goal.cloud),
            2e-3, 300)
        expected = float(dual) + 3.0 * contact_loss(
            states[6].tool, np.asarray(states[6].particles.x), 200.0)
        assert total == pytest.approx(expected, rel=1e-9)

    def test_matches_differentiable_path(self, tiny_cfg, tiny_state, tiny_goal,
                                         tiny_loss_spec):
        from doughroll.sim import rollout_loss_and_grad

        acts = np.zeros((6, 4))
        acts[:, 0] = -0.006
        states = rollout(tiny_state, acts, ResetSchedule(), tiny_cfg)
        eager = traj_loss(states, tiny_goal, tiny_loss_spec)
        jitted, _ = rollout_loss_and_grad(tiny_state, acts, ResetSchedule(),
                                          tiny_loss_spec, tiny_cfg, tiny_goal.cloud)
        assert eager == pytest.approx(jitted, rel=1e-9)
