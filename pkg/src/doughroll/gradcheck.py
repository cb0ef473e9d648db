"""Finite-difference verification of the rollout gradients.

A fixed suite of five tiny scenes (16x16 grid, 48 particles, horizons 1-5)
covering pressing, rolling with spin, approach, and a mid-trajectory tool
reset. Every action component's reverse-mode gradient is compared against
central finite differences in f64; the suite reports the worst relative
error, where components below 0.1% of the scene's gradient scale are held to
a matching absolute floor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import SimConfig, TrajLossSpec
from .scene import SceneSample, make_goal_cloud
from .sim import ResetSchedule, ToolPose, init_state, rollout, rollout_loss_and_grad

TOLERANCE = 1e-3
FD_STEP = 1e-5


def tiny_config() -> SimConfig:
    return SimConfig(
        grid_resolution=16,
        cell_size=1.0 / 16.0,
        particle_count=48,
        substeps_per_control=10,
        precision_mode="f64",
    )


def tiny_loss_spec(lambda_contact: float = 10.0) -> TrajLossSpec:
    # n_loss equals the particle count so the FPS stage is a permutation and
    # the objective stays smooth under perturbation; generous iterations make
    # the transport dual stationary enough for finite differences.
    return TrajLossSpec(
        lambda_contact=lambda_contact,
        entropic_epsilon=2e-3,
        sinkhorn_iters=1000,
        n_loss_points=48,
        loss_timestep_stride=2,
        softmin_beta=200.0,
    )


@dataclass
class GradCheckCase:
    name: str
    scene: SceneSample
    actions: np.ndarray
    schedule: ResetSchedule
    loss_spec: TrajLossSpec


def _scene(cfg: SimConfig, seed: int, dough_x=0.5, target_dx=0.05,
           hover: float = 0.045) -> SceneSample:
    floor = cfg.floor_height
    r = 0.09
    pose = ToolPose(
        center=np.array([dough_x, floor + 2 * r + hover]), heading=0.0, spin=0.0, radius=0.05
    )
    return SceneSample(
        dough_center=(dough_x, floor + r),
        dough_radius=r,
        target_center=(dough_x + target_dx, floor),
        target_radius=0.16,
        initial_tool_pose=pose,
        seed=seed,
    )


def standard_suite() -> list:
    """The fixed five-scene gradient check suite."""
    cfg = tiny_config()
    rng = np.random.default_rng(11)
    box = np.array([0.008, 0.008, 0.15, 0.0])
    cases = []

    acts = np.zeros((1, 4))
    acts[0] = (-0.008, 0.002, 0.05, 0.0)
    cases.append(GradCheckCase("press_T1", _scene(cfg, 3), acts, ResetSchedule(),
                               tiny_loss_spec()))

    acts = rng.uniform(-1, 1, (3, 4)) * box
    acts[:, 0] -= 0.006
    cases.append(GradCheckCase("press_roll_T3", _scene(cfg, 4), acts, ResetSchedule(),
                               tiny_loss_spec()))

    acts = rng.uniform(-1, 1, (4, 4)) * box
    acts[:, 0] -= 0.0075  # descend into contact partway through
    cases.append(GradCheckCase("approach_T4", _scene(cfg, 5, hover=0.012), acts,
                               ResetSchedule(), tiny_loss_spec()))

    acts = rng.uniform(-1, 1, (4, 4)) * box
    acts[:, 0] -= 0.006
    reset_pose = ToolPose(center=np.array([0.52, 0.55]), heading=0.0, spin=0.1, radius=0.05)
    sched = ResetSchedule((2,), (reset_pose,))
    cases.append(GradCheckCase("reset_T4", _scene(cfg, 6), acts, sched, tiny_loss_spec()))

    acts = rng.uniform(-1, 1, (5, 4)) * box
    acts[:, 0] -= 0.005
    acts[:, 2] += 0.08  # sustained spin while in contact
    cases.append(GradCheckCase("spin_T5", _scene(cfg, 7), acts, ResetSchedule(),
                               tiny_loss_spec(lambda_contact=5.0)))
    return cases


def check_case(case: GradCheckCase, h: float = FD_STEP) -> dict:
    """Max relative gradient error of one case against central differences."""
    cfg = tiny_config()
    state0 = init_state(cfg, case.scene)
    goal = make_goal_cloud(case.scene, case.loss_spec.n_loss_points, cfg)

    def loss_of(actions):
        val, _ = rollout_loss_and_grad(state0, actions, case.schedule, case.loss_spec,
                                       cfg, goal.cloud)
        return val

    _, grad = rollout_loss_and_grad(state0, case.actions, case.schedule, case.loss_spec,
                                    cfg, goal.cloud)
    horizon = case.actions.shape[0]
    fd = np.zeros_like(case.actions)
    for t in range(horizon):
        for k in range(3):  # the fourth component is inert in 2-D
            up = case.actions.copy()
            up[t, k] += h
            dn = case.actions.copy()
            dn[t, k] -= h
            fd[t, k] = (loss_of(up) - loss_of(dn)) / (2.0 * h)
    scale = max(np.abs(fd).max(), 1e-10)
    rel = np.abs(grad - fd) / np.maximum(np.abs(fd), 1e-3 * scale)
    reset_rows = [t - 1 for t in case.schedule.reset_timesteps]
    return {
        "name": case.name,
        "max_rel_err": float(rel[:, :3].max()),
        "grad": grad,
        "fd": fd,
        "reset_grad_rows_zero": bool(np.all(grad[reset_rows] == 0.0)) if reset_rows else True,
    }


def run_gradcheck(h: float = FD_STEP, log=None) -> dict:
    """Run the full suite; returns per-case errors and the overall maximum."""
    results = []
    for case in standard_suite():
        res = check_case(case, h)
        results.append(res)
        if log:
            log(f"{res['name']}: max rel err {res['max_rel_err']:.2e}"
                + ("" if res["reset_grad_rows_zero"] else "  [reset rows NONZERO]"))
    overall = max(r["max_rel_err"] for r in results)
    ok = overall < TOLERANCE and all(r["reset_grad_rows_zero"] for r in results)
    return {"cases": results, "max_rel_err": overall, "passed": bool(ok)}
