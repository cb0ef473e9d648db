"""Fast self-contained correctness checks (< 60 s) backing `doughroll selftest`.

Each check is a small independently derivable fact: analytic free fall,
brute-force assignment minima, transport marginals, kinematics identities,
conservation, determinism. Failures return the check names.
"""

from __future__ import annotations

import itertools

import numpy as np

from .config import SimConfig, SceneSampleRanges, TrajLossSpec
from .losses import chamfer, contact_loss, downsample_cloud, emd_entropic, emd_exact, normalized_performance
from .scene import make_goal_cloud, sample_scene_grid
from .sim import (ActionCommand, ResetSchedule, ToolPose, apply_action_kinematics,
                  control_step, init_state, reset_tool, rollout, sample_tool_surface,
                  substep_probe, tool_signed_distance)
from .sim.types import ParticleState, SimState


def _checks():
    rng = np.random.default_rng(0)

    def free_fall():
        cfg = SimConfig(particle_count=1, velocity_damping=0.0)
        p = ParticleState(x=np.array([[0.5, 0.5]]), v=np.zeros((1, 2)),
                          F=np.eye(2)[None], C=np.zeros((1, 2, 2)),
                          mass=np.array([1.0]), volume=np.array([1e-4]))
        st = SimState(p, ToolPose(center=np.array([5.0, 5.0])), 0)
        for k in range(5):
            st = substep_probe(st, cfg)
        return abs(st.particles.v[0, 1] + cfg.gravity * 5 * cfg.dt_substep) < 1e-12

    def emd_brute():
        for _ in range(20):
            n = int(rng.integers(2, 6))
            A = rng.uniform(size=(n, 2))
            B = rng.uniform(size=(n, 2))
            brute = min(
                np.mean(np.linalg.norm(A - B[list(perm)], axis=1))
                for perm in itertools.permutations(range(n))
            )
            if abs(emd_exact(A, B) - brute) > 1e-12:
                return False
        return True

    def sinkhorn_marginals():
        A = rng.uniform(size=(24, 2))
        B = rng.uniform(size=(24, 2))
        res = emd_entropic(A, B, TrajLossSpec(entropic_epsilon=1e-3, sinkhorn_iters=300))
        return res.value >= 0 and res.marginal_error < 1e-3

    def chamfer_analytic():
        return abs(chamfer(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]])) - 10.0) < 1e-12

    def contact_analytic():
        tool = ToolPose(center=np.array([0.0, 2.0]), radius=1.0)
        return abs(contact_loss(tool, np.array([[0.0, 0.0]]), beta=200.0) - 1.0) < 1e-9

    def sdf_analytic():
        tool = ToolPose(center=np.array([0.0, 2.0]), radius=1.0)
        return (abs(tool_signed_distance(tool, (0.0, 0.0)) - 1.0) < 1e-12
                and abs(tool_signed_distance(tool, tool.center) + 1.0) < 1e-12)

    def surface_lattice():
        tool = ToolPose(center=np.array([0.3, 0.4]), radius=0.05)
        pts = sample_tool_surface(tool, 100, seed=3)
        r = np.linalg.norm(pts - tool.center, axis=1)
        ang = np.sort(np.arctan2(*(pts - tool.center).T[::-1]))
        gaps = np.diff(np.r_[ang, ang[0] + 2 * np.pi])
        return np.abs(r - 0.05).max() < 1e-9 and np.ptp(gaps) < 1e-9

    def kinematics_additive():
        cfg = SimConfig()
        tool = ToolPose(center=np.array([0.4, 0.5]))
        seq = rng.uniform(-0.009, 0.009, size=(8, 2))
        stepped = tool
        for dy, dl in seq:
            stepped, _ = apply_action_kinematics(stepped, ActionCommand(dy=dy, dl=dl), cfg)
        total = np.array([seq[:, 1].sum(), seq[:, 0].sum()])
        return np.allclose(stepped.center - tool.center, total, atol=1e-12)

    def performance_endpoints():
        A = rng.uniform(size=(16, 2))
        B = rng.uniform(size=(16, 2))
        return (abs(normalized_performance(A, A, B)) < 1e-12
                and abs(normalized_performance(A, B, B) - 1.0) < 1e-12)

    def fps_extremes():
        pts = np.array([[0.0, 0.0], [0.2, 0.0], [0.5, 0.0], [0.9, 0.0], [1.0, 0.0]])
        out = downsample_cloud(pts, 2)
        return {tuple(p) for p in out} == {(0.0, 0.0), (1.0, 0.0)}

    def reset_preserves_particles():
        cfg = SimConfig(particle_count=64)
        scene = sample_scene_grid(1, 0, SceneSampleRanges(), cfg)[0]
        st = init_state(cfg, scene)
        st = control_step(st, ActionCommand(dy=-0.005), cfg)
        pose = ToolPose(center=np.array([0.5, 0.8]), radius=0.04)
        after = reset_tool(st, pose)
        return (after.particles.x is st.particles.x
                and np.array_equal(np.asarray(after.tool.center), pose.center))

    def rollout_mass_and_determinism():
        cfg = SimConfig(particle_count=96)
        scene = sample_scene_grid(1, 0, SceneSampleRanges(), cfg)[0]
        st = init_state(cfg, scene)
        acts = np.zeros((6, 4))
        acts[:, 0] = -0.006
        s1 = rollout(st, acts, ResetSchedule(), cfg)[-1]
        s2 = rollout(st, acts, ResetSchedule(), cfg)[-1]
        return (np.array_equal(np.asarray(s1.particles.x), np.asarray(s2.particles.x))
                and s1.particles.mass.sum() == st.particles.mass.sum())

    def goal_cloud_bounds():
        cfg = SimConfig()
        scene = sample_scene_grid(8, 1, SceneSampleRanges(), cfg)[3]
        goal = make_goal_cloud(scene, 64, cfg)
        x_lo, y_lo, x_hi, y_hi = scene.target_bounds()
        c = goal.cloud
        return (len(c) == 64 and (c[:, 0] >= x_lo).all() and (c[:, 0] <= x_hi).all()
                and (c[:, 1] >= y_lo).all() and (c[:, 1] <= y_hi).all())

    return [
        ("free_fall", free_fall),
        ("emd_brute_force", emd_brute),
        ("sinkhorn_marginals", sinkhorn_marginals),
        ("chamfer_analytic", chamfer_analytic),
        ("contact_analytic", contact_analytic),
        ("sdf_analytic", sdf_analytic),
        ("tool_surface_lattice", surface_lattice),
        ("kinematics_additive", kinematics_additive),
        ("performance_endpoints", performance_endpoints),
        ("fps_extremes", fps_extremes),
        ("reset_preserves_particles", reset_preserves_particles),
        ("rollout_mass_and_determinism", rollout_mass_and_determinism),
        ("goal_cloud_bounds", goal_cloud_bounds),
    ]


def run_selftest(log=None) -> list:
    """Run all checks; returns the names of failed ones."""
    failures = []
    for name, fn in _checks():
        try:
            ok = bool(fn())
        except Exception as err:
            ok = False
            if log:
                log(f"{name}: EXCEPTION {err}")
        if log:
            log(f"{name}: {'ok' if ok else 'FAIL'}")
        if not ok:
            failures.append(name)
    return failures
