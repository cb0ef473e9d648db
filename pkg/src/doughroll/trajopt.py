"""Trajectory optimization: gradient-based variants, CEM, and a rolling primitive.

The gradient-based optimizer runs Adam on the whole action sequence through
the differentiable rollout. Variants:

- ``diff-reset``: scheduled tool teleports inside the trajectory; reset poses
  are regenerated from the current rollout every ``reset_refresh_every``
  iterations and treated as constants under differentiation, so gradients
  flow through the dough across stage boundaries but never into the poses.
- ``no-reset``: the same optimizer with an empty schedule.
- ``sep-reset``: each rolling stage optimized separately against its own
  slice of the objective, with non-differentiable teleports in between.
- ``learn-reset``: no teleports; a pose-distance penalty toward hover poses
  is added at the would-be reset timesteps.

``run_cem`` is a receding-horizon cross-entropy planner evaluated with the
same regularized objective for cost parity, and ``run_heuristic_primitive``
grid-searches a descend/roll/ascend primitive executed twice with a reset in
between.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import jax.numpy as jnp
import numpy as np

from .config import CemConfig, HeuristicConfig, SimConfig, TrajLossSpec, TrajOptConfig
from .errors import (
    BaselineFailedError,
    GradientOverflowError,
    OptimizationUnstableError,
    ScheduleError,
    SimulationDivergedError,
)
from .losses import downsample_cloud, emd_exact, normalized_performance
from .scene import GoalSpec, SceneSample
from .sim import (
    ResetSchedule,
    SimState,
    ToolPose,
    init_state,
    loss_timesteps,
    rollout,
    rollout_loss_and_grad,
)
from .sim import engine as _engine
from .sim import kernels as _kernels

VARIANTS = ("diff-reset", "no-reset", "sep-reset", "learn-reset")


@dataclass(frozen=True)
class TrajOptProblem:
    state0: SimState
    goal: GoalSpec
    horizon: int
    loss_spec: TrajLossSpec
    schedule: ResetSchedule
    variant: str
    optimizer: TrajOptConfig
    sim_config: SimConfig
    learn_reset_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ScheduleError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        self.schedule.validate_horizon(self.horizon)


@dataclass
class TrajOptResult:
    best_actions: np.ndarray
    best_loss: float
    loss_history: np.ndarray
    final_performance: float
    wall_time: float
    divergence_count: int = 0
    sim_steps: int = 0
    final_states: list = field(default_factory=list, repr=False)


class Adam:
    """Plain deterministic Adam on a fixed-shape array."""

    def __init__(self, shape, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, params, grad):
        self.t += 1
        self.m = self.b1 * self.m + (1.0 - self.b1) * grad
        self.v = self.b2 * self.v + (1.0 - self.b2) * grad * grad
        mhat = self.m / (1.0 - self.b1**self.t)
        vhat = self.v / (1.0 - self.b2**self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def schedule_resets(horizon: int, n_reset: int) -> list:
    """Interior reset placement producing n_reset+1 equal rolling stages."""
    if n_reset < 0 or horizon < n_reset + 1:
        raise ScheduleError(f"cannot place {n_reset} resets in a horizon of {horizon}")
    stage = horizon // (n_reset + 1)
    return [stage * i for i in range(1, n_reset + 1)]


generate_reset_pose = _engine.generate_reset_pose


def _clip_actions(actions: np.ndarray, config: SimConfig) -> np.ndarray:
    box = np.asarray(config.clamp_box)
    return np.clip(actions, -box, box)


def _init_actions(problem: TrajOptProblem) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(problem.seed))
    box = np.asarray(problem.sim_config.clamp_box)
    acts = rng.standard_normal((problem.horizon, 4)) * problem.optimizer.init_action_scale * box
    return _clip_actions(acts, problem.sim_config)


def resolve_reset_poses(state0: SimState, actions, timesteps, config: SimConfig,
                        clearance: float) -> tuple:
    """Hover poses the executor would use at each reset, for the given actions."""
    if not timesteps:
        return ()
    states = rollout(state0, actions, ResetSchedule(tuple(timesteps), (), clearance), config)
    return tuple(states[t].tool for t in timesteps)


def evaluate_performance(state0: SimState, final_state: SimState, goal: GoalSpec,
                         n_points: int) -> float:
    """Normalized improvement of the final dough cloud toward the goal."""
    p0 = downsample_cloud(np.asarray(state0.particles.x), n_points)
    pt = downsample_cloud(np.asarray(final_state.particles.x), n_points)
    return normalized_performance(p0, pt, goal.cloud)


def execute(problem: TrajOptProblem, actions, with_resets: bool = True):
    """Run actions through the deployment executor (auto-regenerated poses)."""
    timesteps = tuple(problem.schedule.reset_timesteps) if with_resets else ()
    sched = ResetSchedule(timesteps, (), problem.schedule.clearance)
    return rollout(problem.state0, actions, sched, problem.sim_config)


def _finish(problem: TrajOptProblem, best_actions, best_loss, history, t0,
            divergences, sim_steps, with_resets=True) -> TrajOptResult:
    states = execute(problem, best_actions, with_resets=with_resets)
    perf = evaluate_performance(problem.state0, states[-1], problem.goal,
                                problem.loss_spec.n_loss_points)
    return TrajOptResult(
        best_actions=np.asarray(best_actions),
        best_loss=float(best_loss),
        loss_history=np.asarray(history, dtype=np.float64),
        final_performance=float(perf),
        wall_time=time.perf_counter() - t0,
        divergence_count=divergences,
        sim_steps=sim_steps,
        final_states=states,
    )


def _adam_loop(problem, state0, actions, schedule, iterations, goal_cloud,
               refresh_poses=None, penalty=None):
    """Shared best-iterate Adam loop; returns (best_actions, best, history, divergences, steps).

    ``refresh_poses(actions) -> ResetSchedule`` regenerates scheduled poses;
    ``penalty(actions) -> (steps, targets, weight)`` supplies the learn-reset
    term. Divergent iterates are discarded (actions revert to the best seen)
    and counted; more than 10% divergent iterations aborts.
    """
    opt_cfg = problem.optimizer
    cfg = problem.sim_config
    adam = Adam(actions.shape, opt_cfg.learning_rate, opt_cfg.adam_beta1,
                opt_cfg.adam_beta2, opt_cfg.adam_eps)
    history = []
    best = np.inf
    best_actions = actions.copy()
    divergences = 0
    sim_steps = 0
    sched = schedule
    pen_steps, pen_targets, pen_weight = (), None, 0.0
    for it in range(iterations):
        if refresh_poses is not None and it % opt_cfg.reset_refresh_every == 0:
            sched = refresh_poses(actions)
            sim_steps += actions.shape[0]
        if penalty is not None and it % opt_cfg.reset_refresh_every == 0:
            pen_steps, pen_targets, pen_weight = penalty(actions)
            sim_steps += actions.shape[0]
        try:
            loss, grad = rollout_loss_and_grad(
                state0, actions, sched, problem.loss_spec, cfg, goal_cloud,
                pose_penalty_steps=pen_steps, pose_penalty_targets=pen_targets,
                pose_penalty_weight=pen_weight,
            )
        except (SimulationDivergedError, GradientOverflowError):
            divergences += 1
            history.append(np.inf)
            actions = best_actions.copy()
            if divergences > max(1, iterations // 10):
                raise OptimizationUnstableError(
                    f"{divergences} divergent iterations out of {it + 1}"
                )
            continue
        sim_steps += 3 * actions.shape[0]  # forward + checkpoint recompute + adjoint
        history.append(loss)
        if loss < best:
            best = loss
            best_actions = actions.copy()
        actions = _clip_actions(adam.step(actions, grad), cfg)
    return best_actions, best, history, divergences, sim_steps


def _segment_loss_steps(spec: TrajLossSpec, t0: int, horizon: int, reset_set) -> tuple:
    """Loss/contact timesteps of a segment [t0+1, t0+horizon], in local 1-based indices.

    Keeps the global stride grid so segment sums decompose the full
    objective; the segment's final step is always included.
    """
    local = sorted(
        {t - t0 for t in range(t0 + 1, t0 + horizon + 1)
         if t % spec.loss_timestep_stride == 0} | {horizon}
    )
    contact = tuple(t for t in local if (t + t0) not in reset_set)
    return tuple(local), contact


# ---------------------------------------------------------------------------
# gradient-based variants
# ---------------------------------------------------------------------------


def _optimize_diffreset(problem: TrajOptProblem, with_resets: bool) -> TrajOptResult:
    t0 = time.perf_counter()
    cfg = problem.sim_config
    actions = _init_actions(problem)
    timesteps = tuple(problem.schedule.reset_timesteps) if with_resets else ()
    clearance = problem.schedule.clearance

    refresh = None
    if timesteps:
        def refresh(acts):
            poses = resolve_reset_poses(problem.state0, acts, timesteps, cfg, clearance)
            return ResetSchedule(timesteps, poses, clearance)

    schedule = ResetSchedule((), (), clearance)
    goal_cloud = problem.goal.cloud
    if problem.optimizer.iterations == 0:
        from .losses import traj_loss

        states = execute(problem, actions, with_resets=bool(timesteps))
        loss0 = traj_loss(states, problem.goal, problem.loss_spec, timesteps)
        return _finish(problem, actions, loss0, [], t0, 0, len(states) - 1,
                       with_resets=bool(timesteps))
    best_actions, best, history, div, steps = _adam_loop(
        problem, problem.state0, actions, schedule, problem.optimizer.iterations,
        goal_cloud, refresh_poses=refresh,
    )
    return _finish(problem, best_actions, best, history, t0, div, steps,
                   with_resets=bool(timesteps))


def _optimize_sepreset(problem: TrajOptProblem) -> TrajOptResult:
    """Optimize each rolling stage in sequence with teleports in between.

    Stage j's objective is the slice of the full objective owned by its
    timesteps (a teleport step on the loss grid contributes the roll term of
    the stage-final particles it carries over, never a contact term), so the
    summed stage losses decompose the full-trajectory objective; no gradient
    crosses a teleport.
    """
    t0 = time.perf_counter()
    cfg = problem.sim_config
    spec = problem.loss_spec
    timesteps = tuple(problem.schedule.reset_timesteps)
    clearance = problem.schedule.clearance
    bounds = [0, *timesteps, problem.horizon]
    n_stages = len(bounds) - 1
    iters = problem.optimizer.iterations
    per_stage = [iters // n_stages + (1 if j < iters % n_stages else 0) for j in range(n_stages)]
    global_steps = set(loss_timesteps(problem.horizon, spec.loss_timestep_stride))

    full_actions = _init_actions(problem)
    if timesteps:
        full_actions[[t - 1 for t in timesteps]] = 0.0
    history = []
    total_best = 0.0
    divergences = 0
    sim_steps = 0
    state = problem.state0
    for j in range(n_stages):
        lo, hi = bounds[j], bounds[j + 1]
        # the stage ends just before its closing teleport (if any)
        stage_T = hi - lo if hi == problem.horizon else hi - 1 - lo
        if stage_T < 1:
            raise ScheduleError(f"stage {j} has no actionable steps")
        stage_actions = full_actions[lo:lo + stage_T].copy()
        loss_steps = [t - lo for t in sorted(global_steps) if lo < t <= lo + stage_T]
        roll_w = {t: 1.0 for t in loss_steps}
        contact_steps = tuple(loss_steps)
        if hi != problem.horizon and hi in global_steps:
            roll_w[stage_T] = roll_w.get(stage_T, 0.0) + 1.0  # teleport-step roll term
            if stage_T not in roll_w or stage_T not in loss_steps:
                loss_steps.append(stage_T)
        loss_steps = sorted(set(loss_steps) | set(roll_w))
        weights = [roll_w.get(t, 1.0) for t in loss_steps]

        sub = _StageProblem(state, stage_actions, tuple(loss_steps), contact_steps,
                            tuple(weights), problem)
        best_sa, best_sl, hist, div, steps = sub.run(per_stage[j])
        divergences += div
        sim_steps += steps
        history.extend(total_best + h for h in hist)
        total_best += best_sl
        full_actions[lo:lo + stage_T] = best_sa
        states = rollout(state, best_sa, ResetSchedule((), (), clearance), cfg)
        state = states[-1]
        sim_steps += stage_T
        if hi != problem.horizon:
            pose = generate_reset_pose(state, j + 1, clearance, cfg)
            state = _engine.reset_tool(state, pose)
            state = SimState(state.particles, state.tool, state.step_index + 1)
    return _finish(problem, full_actions, total_best, history, t0, divergences, sim_steps)


class _StageProblem:
    """Adam on one stage's actions against an explicit set of loss timesteps."""

    def __init__(self, state0, actions, loss_steps, contact_steps, roll_weights, problem):
        self.state0 = state0
        self.actions = actions
        self.loss_steps = loss_steps
        self.contact_steps = contact_steps
        self.roll_weights = roll_weights
        self.problem = problem

    def _eval(self, actions):
        p = self.problem
        cfg = p.sim_config
        dtype = cfg.dtype()
        horizon = actions.shape[0]
        no_reset = np.zeros(horizon, dtype=bool)
        no_pose = np.zeros((horizon, 3), dtype=dtype)
        p0 = _engine.particles_to_tuple(self.state0.particles, dtype)
        tool0 = _engine.tool_to_tuple(self.state0.tool, dtype)
        loss, grad, finite = _kernels.loss_and_grad_arrays(
            p0, tool0, jnp.asarray(actions.astype(dtype)), jnp.asarray(no_reset),
            jnp.asarray(no_pose), jnp.asarray(no_reset),
            dtype(p.schedule.clearance), jnp.asarray(p.goal.cloud, dtype=dtype),
            _kernels.loss_consts(p.loss_spec), self.loss_steps, self.contact_steps,
            _kernels.sim_consts(cfg), roll_weights=self.roll_weights,
        )
        return float(loss), np.asarray(grad), bool(np.all(np.asarray(finite)))

    def run(self, iterations):
        p = self.problem
        cfg = p.sim_config
        adam = Adam(self.actions.shape, p.optimizer.learning_rate, p.optimizer.adam_beta1,
                    p.optimizer.adam_beta2, p.optimizer.adam_eps)
        actions = self.actions
        horizon = actions.shape[0]
        best, best_actions = np.inf, actions.copy()
        history, divergences, sim_steps = [], 0, 0
        if iterations == 0:
            loss, _, ok = self._eval(actions)
            return actions, loss if ok else np.inf, [], 0, 3 * horizon
        for _ in range(iterations):
            loss, grad, ok = self._eval(actions)
            if not (ok and np.isfinite(loss) and np.isfinite(grad).all()):
                divergences += 1
                history.append(np.inf)
                actions = best_actions.copy()
                continue
            sim_steps += 3 * horizon
            history.append(loss)
            if loss < best:
                best, best_actions = loss, actions.copy()
            actions = _clip_actions(adam.step(actions, grad), cfg)
        return best_actions, best, history, divergences, sim_steps


def _optimize_learnreset(problem: TrajOptProblem) -> TrajOptResult:
    """No teleports; pull the tool toward hover poses via a pose penalty."""
    t0 = time.perf_counter()
    cfg = problem.sim_config
    actions = _init_actions(problem)
    timesteps = tuple(problem.schedule.reset_timesteps)
    clearance = problem.schedule.clearance

    def penalty(acts):
        if not timesteps:
            return (), None, 0.0
        states = rollout(problem.state0, acts, ResetSchedule((), (), clearance), cfg)
        targets = []
        for t in timesteps:
            pose = generate_reset_pose(states[t - 1], 0, clearance, cfg)
            targets.append([pose.center[0], pose.center[1], pose.spin])
        return timesteps, np.asarray(targets), problem.learn_reset_weight

    schedule = ResetSchedule((), (), clearance)
    best_actions, best, history, div, steps = _adam_loop(
        problem, problem.state0, actions, schedule, problem.optimizer.iterations,
        problem.goal.cloud, penalty=penalty,
    )
    return _finish(problem, best_actions, best, history, t0, div, steps, with_resets=False)


def optimize_gbto(problem: TrajOptProblem) -> TrajOptResult:
    """Gradient-based trajectory optimization with best-iterate tracking."""
    if problem.variant == "diff-reset":
        return _optimize_diffreset(problem, with_resets=True)
    if problem.variant == "no-reset":
        return _optimize_diffreset(replace(problem, schedule=ResetSchedule(
            (), (), problem.schedule.clearance)), with_resets=False)
    if problem.variant == "sep-reset":
        return _optimize_sepreset(problem)
    if problem.variant == "learn-reset":
        return _optimize_learnreset(problem)
    raise ScheduleError(f"unknown variant {problem.variant!r}")


# ---------------------------------------------------------------------------
# cross-entropy method (receding horizon)
# ---------------------------------------------------------------------------


def run_cem(problem: TrajOptProblem, cem: CemConfig | None = None) -> TrajOptResult:
    """Receding-horizon CEM with the regularized objective as candidate score.

    At each planning round a ``plan_horizon`` segment is optimized by
    iteratively sampling Gaussian candidates, scoring each by forward rollout
    of the objective over the segment, and refitting mean/std to the elites;
    the refit mean is executed and planning continues. Scheduled resets
    inside a segment are honored both during scoring and execution; divergent
    candidates score +inf.
    """
    cem = cem or CemConfig()
    t0 = time.perf_counter()
    cfg = problem.sim_config
    dtype = cfg.dtype()
    spec = problem.loss_spec
    box = np.asarray(cfg.clamp_box)
    reset_set = set(problem.schedule.reset_timesteps)
    clearance = problem.schedule.clearance
    rng = np.random.Generator(np.random.PCG64(problem.seed))

    state = problem.state0
    executed = []
    history = []
    divergences = 0
    sim_steps = 0
    t_done = 0
    while t_done < problem.horizon:
        h = min(cem.plan_horizon, problem.horizon - t_done)
        # a segment must not end on a teleport step (resets live strictly
        # inside the horizon they are validated against)
        while (t_done + h) in reset_set and h < problem.horizon - t_done:
            h += 1
        loss_steps, contact_steps = _segment_loss_steps(spec, t_done, h, reset_set)
        is_reset = np.zeros(h, dtype=bool)
        for t in range(t_done + 1, t_done + h + 1):
            if t in reset_set:
                is_reset[t - t_done - 1] = True
        no_pose = np.zeros((h, 3), dtype=dtype)
        use_sched = np.zeros(h, dtype=bool)
        p0 = _engine.particles_to_tuple(state.particles, dtype)
        tool0 = _engine.tool_to_tuple(state.tool, dtype)

        mean = np.zeros((h, 4))
        std = np.broadcast_to(np.asarray(cem.initial_std), (h, 4)).copy()
        for _ in range(cem.max_iter):
            noise = rng.standard_normal((cem.population, h, 4))
            cands = np.clip(mean + std * noise, -box, box)
            cands[:, is_reset, :] = 0.0
            losses, finite = _kernels.population_loss_arrays(
                p0, tool0, jnp.asarray(cands.astype(dtype)), jnp.asarray(is_reset),
                jnp.asarray(no_pose), jnp.asarray(use_sched), dtype(clearance),
                jnp.asarray(problem.goal.cloud, dtype=dtype),
                _kernels.loss_consts(spec), loss_steps, contact_steps,
                _kernels.sim_consts(cfg),
            )
            losses = np.array(losses, dtype=np.float64)
            finite = np.asarray(finite)
            losses[~finite] = np.inf
            losses[~np.isfinite(losses)] = np.inf
            divergences += int((~finite).sum())
            sim_steps += cem.population * h
            elite_idx = np.argsort(losses, kind="stable")[: cem.elites]
            if not np.isfinite(losses[elite_idx[0]]):
                raise OptimizationUnstableError("all CEM candidates diverged")
            history.append(float(losses[elite_idx[0]]))
            elites = cands[elite_idx]
            mean = elites.mean(axis=0)
            new_std = elites.std(axis=0)
            std = np.where(std > 0.0, np.maximum(new_std, cem.min_std), 0.0)

        seg = np.clip(mean, -box, box)
        seg[is_reset, :] = 0.0
        states = rollout(state, seg, ResetSchedule(
            tuple(t - t_done for t in sorted(reset_set) if t_done < t <= t_done + h),
            (), clearance), cfg)
        state = states[-1]
        executed.append(seg)
        sim_steps += h
        t_done += h

    actions = np.concatenate(executed, axis=0)
    from .losses import traj_loss

    states = execute(problem, actions)
    full_loss = traj_loss(states, problem.goal, spec, problem.schedule.reset_timesteps)
    perf = evaluate_performance(problem.state0, states[-1], problem.goal, spec.n_loss_points)
    return TrajOptResult(
        best_actions=actions,
        best_loss=float(full_loss),
        loss_history=np.asarray(history),
        final_performance=float(perf),
        wall_time=time.perf_counter() - t0,
        divergence_count=divergences,
        sim_steps=sim_steps,
        final_states=states,
    )


# ---------------------------------------------------------------------------
# heuristic rolling primitive
# ---------------------------------------------------------------------------


def _primitive_actions(stage_horizon: int, depth: float, length: float, start_pose: ToolPose,
                       cfg: SimConfig) -> np.ndarray:
    """Descend to center height ``depth`` above the floor, roll ``length``
    with no-slip spin, then lift off."""
    acts = np.zeros((stage_horizon, 4))
    target_y = cfg.floor_height + depth
    drop = target_y - float(np.asarray(start_pose.center)[1])
    n_asc = min(3, max(0, stage_horizon - 2))
    n_desc = int(min(max(np.ceil(abs(drop) / cfg.dy_clamp), 1), max(1, stage_horizon - n_asc - 1)))
    n_roll = stage_horizon - n_desc - n_asc
    dy = np.clip(drop / n_desc, -cfg.dy_clamp, cfg.dy_clamp)
    acts[:n_desc, 0] = dy
    if n_roll > 0:
        dl = np.clip(length / n_roll, -cfg.dl_clamp, cfg.dl_clamp)
        acts[n_desc:n_desc + n_roll, 1] = dl
        # rolling without slip: contact-point tangential velocity cancels
        acts[n_desc:n_desc + n_roll, 2] = np.clip(
            -dl / start_pose.radius, -cfg.domega_clamp, cfg.domega_clamp
        )
    acts[n_desc + n_roll:, 0] = cfg.dy_clamp
    return acts


def run_heuristic_primitive(problem: TrajOptProblem, grid: HeuristicConfig | None = None) -> TrajOptResult:
    """Grid search over rolling depth/length; primitive executed per stage.

    Each stage greedily picks the (depth, length) minimizing the exact
    transport distance of the stage-end dough cloud to the goal; ties break
    toward smaller depth, then smaller length. Stages are separated by the
    scheduled tool reset.
    """
    grid = grid or HeuristicConfig()
    if not grid.depth_grid or not grid.length_grid:
        raise BaselineFailedError("empty heuristic grid")
    t0 = time.perf_counter()
    cfg = problem.sim_config
    spec = problem.loss_spec
    timesteps = tuple(problem.schedule.reset_timesteps)
    clearance = problem.schedule.clearance
    bounds = [0, *timesteps, problem.horizon]
    goal_small = problem.goal.cloud

    state = problem.state0
    full_actions = np.zeros((problem.horizon, 4))
    history = []
    sim_steps = 0
    for j in range(len(bounds) - 1):
        lo, hi = bounds[j], bounds[j + 1]
        stage_T = hi - lo if hi == problem.horizon else hi - 1 - lo
        best = None
        for d in sorted(grid.depth_grid):
            for l in sorted(grid.length_grid):
                acts = _primitive_actions(stage_T, d, l, state.tool, cfg)
                try:
                    states = rollout(state, acts, ResetSchedule((), (), clearance), cfg)
                except SimulationDivergedError:
                    continue
                sim_steps += stage_T
                pts = downsample_cloud(np.asarray(states[-1].particles.x), spec.n_loss_points)
                score = emd_exact(pts, goal_small)
                history.append(score)
                if best is None or score < best[0] - 1e-12:
                    best = (score, d, l, acts, states[-1])
        if best is None:
            raise BaselineFailedError("all heuristic grid candidates diverged")
        _, _, _, acts, state = best
        full_actions[lo:lo + stage_T] = acts
        if hi != problem.horizon:
            pose = generate_reset_pose(state, j + 1, clearance, cfg)
            state = _engine.reset_tool(state, pose)
            state = SimState(state.particles, state.tool, state.step_index + 1)

    from .losses import traj_loss

    states = execute(problem, full_actions)
    full_loss = traj_loss(states, problem.goal, spec, timesteps)
    perf = evaluate_performance(problem.state0, states[-1], problem.goal, spec.n_loss_points)
    return TrajOptResult(
        best_actions=full_actions,
        best_loss=float(full_loss),
        loss_history=np.asarray(history),
        final_performance=float(perf),
        wall_time=time.perf_counter() - t0,
        sim_steps=sim_steps,
        final_states=states,
    )


# ---------------------------------------------------------------------------
# problem construction helper
# ---------------------------------------------------------------------------


def build_problem(sample: SceneSample, goal: GoalSpec, variant: str, exp_cfg, seed: int = 0,
                  n_reset: int | None = None) -> TrajOptProblem:
    """Standard problem wiring from an experiment config."""
    cfg = exp_cfg.sim
    opt = exp_cfg.trajopt
    horizon = opt.horizon
    n_reset = opt.n_reset if n_reset is None else n_reset
    timesteps = tuple(schedule_resets(horizon, n_reset)) if variant != "no-reset" else ()
    schedule = ResetSchedule(timesteps, (), exp_cfg.scene.tool_clearance)
    state0 = init_state(cfg, sample)
    return TrajOptProblem(
        state0=state0,
        goal=goal,
        horizon=horizon,
        loss_spec=exp_cfg.loss,
        schedule=schedule,
        variant=variant,
        optimizer=opt,
        sim_config=cfg,
        learn_reset_weight=opt.learn_reset_weight,
        seed=seed,
    )
