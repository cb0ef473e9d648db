"""Demonstration datasets: partial observations, relabeling, noise, persistence.

Observations mimic a top-down depth camera in the 2-D slice: one visible
point per vertical ray bin (the highest particle), minus anything shadowed by
the roller, downsampled to a fixed size. Tool points come from the exact
surface lattice (proprioception), the goal channel is the target cloud.

Demonstrations are generated by re-executing optimizer action sequences
(rounded to f32 so stored trajectories replay bitwise) and are persisted as
checksummed binary chunks plus a JSON manifest.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import numpy as np

from .config import DatasetConfig, ExperimentConfig, SimConfig, config_hash
from .errors import DatasetGenerationError, DatasetIOError, OccludedSceneError
from .io_formats import read_demo_chunk, write_demo_chunk
from .losses import downsample_cloud, emd_exact
from .scene import GoalSpec, SceneSample, make_goal_cloud
from .sim import ResetSchedule, SimState, ToolPose, init_state, rollout, sample_tool_surface
from .trajopt import TrajOptProblem, evaluate_performance, optimize_gbto, schedule_resets


@dataclass(frozen=True)
class CameraSpec:
    mode: str = "top"          # top-down is the only 2-D viewpoint
    bin_width: float | None = None   # defaults to one grid cell


@dataclass(frozen=True)
class PointCloudObservation:
    dough_points: np.ndarray   # (n_obs, 2) f32, partial
    tool_points: np.ndarray    # (n_tool, 2) f32, exact
    goal_points: np.ndarray    # (n_goal, 2) f32

    @property
    def type_onehot(self) -> np.ndarray:
        """(n_obs+n_tool+n_goal, 3) one-hot class rows (dough/tool/goal)."""
        sizes = (len(self.dough_points), len(self.tool_points), len(self.goal_points))
        rows = np.zeros((sum(sizes), 3), dtype=np.float32)
        offset = 0
        for cls, n in enumerate(sizes):
            rows[offset:offset + n, cls] = 1.0
            offset += n
        return rows

    def all_points(self) -> np.ndarray:
        return np.concatenate([self.dough_points, self.tool_points, self.goal_points], axis=0)


@dataclass(frozen=True)
class Demonstration:
    observations: tuple        # T PointCloudObservations
    actions: np.ndarray        # (T, 4) f32 values (zero rows at reset steps)
    goal: GoalSpec
    achieved_final_cloud: np.ndarray   # (n_goal, 2) f32: observed final dough
    scene: SceneSample
    performance: float
    reset_timesteps: tuple = ()
    seed: int = 0


def synth_partial_cloud(state: SimState, camera: CameraSpec, n: int,
                        config: SimConfig | None = None) -> np.ndarray:
    """Visible dough points from a top-down viewpoint, exactly n of them.

    Per vertical ray bin only the highest particle survives; particles whose
    ray passes through the roller disk are shadowed. The survivors are
    farthest-point downsampled to n (padded by cycling when fewer are
    visible).
    """
    config = config or SimConfig()
    if camera.mode != "top":
        raise OccludedSceneError(f"unsupported camera mode {camera.mode!r}")
    bin_w = camera.bin_width or config.cell_size
    x = np.asarray(state.particles.x, dtype=np.float64)
    if x.shape[0] == 0:
        raise OccludedSceneError("no dough particles")

    bins = np.floor((x[:, 0] - config.domain[0]) / bin_w).astype(np.int64)
    order = np.lexsort((x[:, 1], bins))          # by bin, then height
    sorted_bins = bins[order]
    last_in_bin = np.r_[sorted_bins[1:] != sorted_bins[:-1], True]
    visible = x[order[last_in_bin]]

    center = np.asarray(state.tool.center)
    radius = float(state.tool.radius)
    dx_tool = visible[:, 0] - center[0]
    under = np.abs(dx_tool) < radius
    top = np.zeros(len(visible))
    top[under] = center[1] + np.sqrt(np.maximum(radius**2 - dx_tool[under] ** 2, 0.0))
    shadowed = under & (visible[:, 1] < top)
    visible = visible[~shadowed]
    if visible.shape[0] == 0:
        raise OccludedSceneError("every dough point is occluded")

    if visible.shape[0] >= n:
        return downsample_cloud(visible, n)
    reps = np.arange(n) % visible.shape[0]
    return visible[reps]


def build_observation(state: SimState, goal_cloud: np.ndarray, dcfg: DatasetConfig,
                      config: SimConfig, camera: CameraSpec | None = None) -> PointCloudObservation:
    camera = camera or CameraSpec()
    dough = synth_partial_cloud(state, camera, dcfg.n_obs, config)
    tool = sample_tool_surface(state.tool, dcfg.n_tool, seed=0)
    goal = np.asarray(goal_cloud, dtype=np.float64)
    if goal.shape[0] > dcfg.n_goal:
        goal = downsample_cloud(goal, dcfg.n_goal)
    elif goal.shape[0] < dcfg.n_goal:
        goal = goal[np.arange(dcfg.n_goal) % goal.shape[0]]
    return PointCloudObservation(
        dough_points=dough.astype(np.float32),
        tool_points=tool.astype(np.float32),
        goal_points=goal.astype(np.float32),
    )


def record_demonstration(scene: SceneSample, goal: GoalSpec, actions, reset_timesteps,
                         exp: ExperimentConfig, seed: int = 0) -> Demonstration:
    """Re-execute f32-rounded actions from scene init and record observations."""
    cfg = exp.sim
    acts = np.asarray(actions).astype(np.float32).astype(np.float64)
    acts[:, 3] = 0.0
    for t in reset_timesteps:
        acts[t - 1] = 0.0
    state0 = init_state(cfg, scene)
    sched = ResetSchedule(tuple(reset_timesteps), (), exp.scene.tool_clearance)
    states = rollout(state0, acts, sched, cfg)
    camera = CameraSpec()
    observations = tuple(
        build_observation(states[t], goal.cloud, exp.dataset, cfg, camera)
        for t in range(len(states) - 1)
    )
    achieved = synth_partial_cloud(states[-1], camera, exp.dataset.n_goal, cfg)
    perf = evaluate_performance(state0, states[-1], goal, exp.loss.n_loss_points)
    return Demonstration(
        observations=observations,
        actions=acts.astype(np.float32),
        goal=goal,
        achieved_final_cloud=achieved.astype(np.float32),
        scene=scene,
        performance=float(perf),
        reset_timesteps=tuple(reset_timesteps),
        seed=seed,
    )


def generate_demos(scenes, exp: ExperimentConfig, count: int, seed: int = 0,
                   log=None) -> list:
    """Run the reset-module optimizer over sampled scenes and keep good demos.

    Scene assignment is uniform over ``scenes`` (demo i gets its own
    optimizer seed). Demos under the quality gate are discarded and logged;
    more than half failing aborts with a dataset-generation error.
    """
    from .trajopt import build_problem

    rng = np.random.Generator(np.random.PCG64(seed))
    picks = rng.integers(0, len(scenes), size=count)
    demos = []
    rejected = 0
    for i, scene_idx in enumerate(picks):
        scene = scenes[int(scene_idx)]
        goal = make_goal_cloud(scene, exp.loss.n_loss_points, exp.sim)
        problem = build_problem(scene, goal, "diff-reset", exp, seed=seed + 1000 + i)
        result = optimize_gbto(problem)
        demo = record_demonstration(
            scene, goal, result.best_actions, problem.schedule.reset_timesteps, exp,
            seed=seed + 1000 + i,
        )
        if demo.performance < exp.dataset.quality_gate:
            rejected += 1
            if log:
                log(f"demo {i} on scene {scene_idx} rejected: performance "
                    f"{demo.performance:.3f} < {exp.dataset.quality_gate}")
            continue
        demos.append(demo)
        if log:
            log(f"demo {i} on scene {scene_idx}: performance {demo.performance:.3f}")
    if rejected > count / 2:
        raise DatasetGenerationError(
            f"{rejected} of {count} demos failed the quality gate {exp.dataset.quality_gate}"
        )
    return demos


def relabel_hindsight(demo: Demonstration) -> Demonstration:
    """Replace the goal channel with the achieved final observed cloud.

    Actions and dough/tool observations are untouched; the relabeled
    demonstration reaches its own goal, so its performance is 1. Idempotent.
    """
    achieved = demo.achieved_final_cloud
    observations = tuple(
        replace(obs, goal_points=achieved.copy()) for obs in demo.observations
    )
    goal = GoalSpec(
        cloud=achieved.astype(np.float64),
        target_center=demo.goal.target_center,
        target_radius=demo.goal.target_radius,
    )
    return replace(demo, observations=observations, goal=goal, performance=1.0)


def augment_noise(obs: PointCloudObservation, sigma: float, seed: int = 0) -> PointCloudObservation:
    """Gaussian coordinate noise on dough and goal points; tool points exact."""
    if sigma < 0:
        raise DatasetIOError("sigma must be >= 0")
    if sigma == 0.0:
        return obs
    rng = np.random.Generator(np.random.PCG64(seed))
    dough = obs.dough_points + rng.normal(0.0, sigma, obs.dough_points.shape)
    goal = obs.goal_points + rng.normal(0.0, sigma, obs.goal_points.shape)
    return replace(obs, dough_points=dough.astype(np.float32), goal_points=goal.astype(np.float32))


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _scene_to_dict(scene: SceneSample) -> dict:
    return {
        "dough_center": list(map(float, scene.dough_center)),
        "dough_radius": scene.dough_radius,
        "target_center": list(map(float, scene.target_center)),
        "target_radius": scene.target_radius,
        "tool": {
            "center": [float(c) for c in np.asarray(scene.initial_tool_pose.center)],
            "heading": float(scene.initial_tool_pose.heading),
            "spin": float(scene.initial_tool_pose.spin),
            "radius": float(scene.initial_tool_pose.radius),
        },
        "seed": scene.seed,
    }


def _scene_from_dict(d: dict) -> SceneSample:
    tool = ToolPose(
        center=np.asarray(d["tool"]["center"], dtype=np.float64),
        heading=d["tool"]["heading"],
        spin=d["tool"]["spin"],
        radius=d["tool"]["radius"],
    )
    return SceneSample(
        dough_center=tuple(d["dough_center"]),
        dough_radius=d["dough_radius"],
        target_center=tuple(d["target_center"]),
        target_radius=d["target_radius"],
        initial_tool_pose=tool,
        seed=d["seed"],
    )


def write_dataset(demos, path, exp: ExperimentConfig | None = None) -> None:
    """Directory layout: manifest.json + traj_%04d.drmd."""
    os.makedirs(path, exist_ok=True)
    records = []
    for i, demo in enumerate(demos):
        chunk = f"traj_{i:04d}.drmd"
        dough = np.stack([o.dough_points for o in demo.observations]) if demo.observations \
            else np.zeros((0, 0, 2), dtype=np.float32)
        tool = np.stack([o.tool_points for o in demo.observations]) if demo.observations \
            else np.zeros((0, 0, 2), dtype=np.float32)
        goal_obs = demo.observations[0].goal_points if demo.observations \
            else np.asarray(demo.goal.cloud, dtype=np.float32)
        write_demo_chunk(
            os.path.join(path, chunk), dough, tool, goal_obs, demo.actions,
            demo.achieved_final_cloud, demo.reset_timesteps,
        )
        records.append({
            "chunk": chunk,
            "scene": _scene_to_dict(demo.scene),
            "goal_cloud": np.asarray(demo.goal.cloud, dtype=np.float64).tolist(),
            "performance": demo.performance,
            "seed": demo.seed,
        })
    manifest = {
        "format": "DRMD",
        "version": 1,
        "config_hash": config_hash(exp) if exp else None,
        "trajectories": records,
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True)
        fh.write("\n")


def read_dataset(path) -> list:
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DatasetIOError(f"missing manifest.json in {path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "DRMD" or manifest.get("version") != 1:
        raise DatasetIOError("unrecognized dataset manifest")
    demos = []
    for rec in manifest["trajectories"]:
        chunk = read_demo_chunk(os.path.join(path, rec["chunk"]))
        scene = _scene_from_dict(rec["scene"])
        goal = GoalSpec(
            cloud=np.asarray(rec["goal_cloud"], dtype=np.float64),
            target_center=scene.target_center,
            target_radius=scene.target_radius,
        )
        observations = tuple(
            PointCloudObservation(
                dough_points=chunk["dough_obs"][t],
                tool_points=chunk["tool_obs"][t],
                goal_points=chunk["goal_cloud"].copy(),
            )
            for t in range(chunk["dough_obs"].shape[0])
        )
        demos.append(Demonstration(
            observations=observations,
            actions=chunk["actions"],
            goal=goal,
            achieved_final_cloud=chunk["achieved_cloud"],
            scene=scene,
            performance=rec["performance"],
            reset_timesteps=chunk["reset_timesteps"],
            seed=rec["seed"],
        ))
    return demos
