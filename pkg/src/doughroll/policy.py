"""Goal-conditioned point-cloud policy: set-abstraction encoder + MLP head.

The encoder consumes the concatenated dough/tool/goal clouds with a one-hot
class channel per point. Each set-abstraction level samples centroids by
deterministic farthest point sampling, groups neighbors inside a radius
(up to a fixed group size, nearest first), runs a shared MLP on
(relative position, feature) pairs and max-pools per group; a global
max-pooled MLP and a ReLU head follow. The head output passes through tanh
scaled to the action clamp box, so emitted actions always satisfy the
per-step bounds.

Training is standard behavior cloning (squared action error) with Adam,
per-sample Gaussian cloud noise, and hindsight goal relabeling on a
configured fraction of draws. Everything is deterministic given the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np

from .config import ExperimentConfig, PolicyConfig, TrainConfig
from .errors import ShapeError, TrainingDivergedError
from .io_formats import read_policy_checkpoint, write_policy_checkpoint
from .sim import ActionCommand, ResetSchedule, SimState, control_step, init_state, reset_tool
from .sim.engine import generate_reset_pose
from .trajopt import evaluate_performance


@dataclass
class PolicyParams:
    params: dict               # name -> array
    config: PolicyConfig
    clamp_box: tuple
    sizes: tuple               # (n_obs, n_tool, n_goal)
    meta: dict

    @property
    def open_loop(self) -> bool:
        return self.config.open_loop_horizon > 0


# ---------------------------------------------------------------------------
# architecture
# ---------------------------------------------------------------------------


def _layer_dims(pcfg: PolicyConfig):
    """(per-level widths, global widths, head widths, output dim) after scaling."""
    levels = []
    in_feat = 3  # one-hot class channel
    for ratio, radius, widths in pcfg.sa_levels:
        scaled = pcfg.scaled(widths)
        levels.append((ratio, radius, in_feat + 2, scaled))
        in_feat = scaled[-1]
    glob = pcfg.scaled(pcfg.global_mlp_widths)
    head = pcfg.scaled(pcfg.head_widths)
    out = pcfg.action_dim * max(pcfg.open_loop_horizon, 1)
    return levels, (in_feat + 2, glob), head, out


def init_policy_params(pcfg: PolicyConfig, sizes, clamp_box, seed: int = 0,
                       dtype=np.float32) -> PolicyParams:
    """He-normal initialization, deterministic given seed."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params = {}

    def dense(name, n_in, n_out):
        params[f"{name}_w"] = (rng.standard_normal((n_in, n_out)) *
                               math.sqrt(2.0 / n_in)).astype(dtype)
        params[f"{name}_b"] = np.zeros(n_out, dtype=dtype)

    levels, (g_in, glob), head, out = _layer_dims(pcfg)
    for li, (_, _, c_in, widths) in enumerate(levels):
        prev = c_in
        for wi, w in enumerate(widths):
            dense(f"sa{li}_{wi}", prev, w)
            prev = w
    prev = g_in
    for wi, w in enumerate(glob):
        dense(f"glob_{wi}", prev, w)
        prev = w
    for wi, w in enumerate(head):
        dense(f"head_{wi}", prev, w)
        prev = w
    dense("out", prev, out)
    return PolicyParams(
        params=params,
        config=pcfg,
        clamp_box=tuple(float(c) for c in clamp_box),
        sizes=tuple(int(s) for s in sizes),
        meta={"seed": seed},
    )


def _mlp(params, prefix, widths, x):
    for wi, _ in enumerate(widths):
        x = x @ params[f"{prefix}_{wi}_w"] + params[f"{prefix}_{wi}_b"]
        x = jax.nn.relu(x)
    return x


def _fps_indices(pts, k):
    """Order-canonical farthest point sampling indices (into the input)."""
    order = jnp.lexsort((pts[:, 1], pts[:, 0]))
    p = pts[order]
    d = jnp.sum((p - p[0]) ** 2, axis=-1)

    def body(i, carry):
        sel, d = carry
        nxt = jnp.argmax(d)
        sel = sel.at[i].set(nxt.astype(jnp.int32))
        d = jnp.minimum(d, jnp.sum((p - p[nxt]) ** 2, axis=-1))
        return sel, d

    sel0 = jnp.zeros(k, dtype=jnp.int32)
    sel, _ = jax.lax.fori_loop(1, k, body, (sel0, d))
    return order[sel]


def _sa_level(params, prefix, pts, feat, ratio, radius, widths, group_size):
    n = pts.shape[0]
    m = max(1, int(math.ceil(ratio * n)))
    centroid_idx = _fps_indices(pts, m)
    centroids = pts[centroid_idx]
    d2 = jnp.sum((centroids[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
    masked = jnp.where(d2 <= radius * radius, d2, jnp.inf)
    k = min(group_size, n)
    neg, idx = jax.lax.top_k(-masked, k)          # k nearest inside the ball
    valid = neg > -jnp.inf
    rel = pts[idx] - centroids[:, None, :]        # (m, k, 2)
    group = jnp.concatenate([rel, feat[idx]], axis=-1)
    group = _mlp(params, prefix, widths, group)
    group = jnp.where(valid[..., None], group, -jnp.inf)
    return centroids, jnp.max(group, axis=1)


def policy_forward_core(params, pts, feat, pcfg: PolicyConfig, clamp_box):
    levels, (_, glob), head, out_dim = _layer_dims(pcfg)
    x, h = pts, feat
    for li, (ratio, radius, _, widths) in enumerate(levels):
        x, h = _sa_level(params, f"sa{li}", x, h, ratio, radius, widths, pcfg.group_size)
    g = jnp.concatenate([x, h], axis=-1)
    g = _mlp(params, "glob", glob, g)
    g = jnp.max(g, axis=0)
    g = _mlp(params, "head", head, g)
    raw = g @ params["out_w"] + params["out_b"]
    scale = jnp.tile(jnp.asarray(clamp_box, dtype=raw.dtype), max(pcfg.open_loop_horizon, 1))
    return jnp.tanh(raw) * scale


def _forward_fn(pcfg: PolicyConfig, clamp_box):
    def fn(params, pts, feat):
        return policy_forward_core(params, pts, feat, pcfg, clamp_box)

    return fn


_FORWARD_CACHE: dict = {}


def _jitted_forward(policy: PolicyParams):
    key = (policy.config, policy.clamp_box)
    fn = _FORWARD_CACHE.get(key)
    if fn is None:
        fn = jax.jit(_forward_fn(policy.config, policy.clamp_box))
        _FORWARD_CACHE[key] = fn
    return fn


def observation_arrays(obs) -> tuple:
    """(points (N, 2), one-hot features (N, 3)) from a PointCloudObservation."""
    return obs.all_points(), obs.type_onehot


def policy_forward(policy: PolicyParams, obs) -> ActionCommand:
    """Deterministic action for one observation; output inside the clamp box."""
    sizes = (len(obs.dough_points), len(obs.tool_points), len(obs.goal_points))
    if sizes != policy.sizes:
        names = ("dough", "tool", "goal")
        bad = [f"{n}={got} (expected {want})"
               for n, got, want in zip(names, sizes, policy.sizes) if got != want]
        raise ShapeError("observation cloud size mismatch: " + ", ".join(bad))
    pts, feat = observation_arrays(obs)
    dtype = next(iter(policy.params.values())).dtype
    raw = _jitted_forward(policy)(
        policy.params, jnp.asarray(pts, dtype=dtype), jnp.asarray(feat, dtype=dtype)
    )
    raw = np.asarray(raw, dtype=np.float64)
    if policy.open_loop:
        return raw.reshape(policy.config.open_loop_horizon, policy.config.action_dim)
    return ActionCommand.from_array(raw)


# ---------------------------------------------------------------------------
# behavior cloning
# ---------------------------------------------------------------------------


def _assemble_samples(demos, open_loop: bool):
    """Per-step (clouds, action) pairs; reset steps are excluded (the executor
    performs resets, the policy never emits them). Open-loop mode collapses
    each demo into (initial clouds, full action vector)."""
    dough, tool, goal, relabeled, labels, demo_ids = [], [], [], [], [], []
    for di, demo in enumerate(demos):
        resets = set(demo.reset_timesteps)
        achieved = demo.achieved_final_cloud
        if open_loop:
            obs = demo.observations[0]
            dough.append(obs.dough_points)
            tool.append(obs.tool_points)
            goal.append(obs.goal_points)
            relabeled.append(achieved)
            labels.append(np.asarray(demo.actions, dtype=np.float32).reshape(-1))
            demo_ids.append(di)
            continue
        for t, obs in enumerate(demo.observations):
            if (t + 1) in resets:
                continue
            dough.append(obs.dough_points)
            tool.append(obs.tool_points)
            goal.append(obs.goal_points)
            relabeled.append(achieved)
            labels.append(np.asarray(demo.actions[t], dtype=np.float32))
            demo_ids.append(di)
    return (np.stack(dough), np.stack(tool), np.stack(goal), np.stack(relabeled),
            np.stack(labels), np.asarray(demo_ids))


def _batched_loss_fn(pcfg: PolicyConfig, clamp_box):
    fwd = _forward_fn(pcfg, clamp_box)

    def loss_fn(params, pts, feat, labels):
        preds = jax.vmap(lambda p, f: fwd(params, p, f))(pts, feat)
        return jnp.mean(jnp.sum((preds - labels) ** 2, axis=-1))

    return loss_fn


def bc_train(demos, exp: ExperimentConfig, seed: int = 0, train_cfg: TrainConfig | None = None,
             pcfg: PolicyConfig | None = None, log=None) -> PolicyParams:
    """Minimize the squared action error over demonstration steps.

    Per-draw augmentation: Gaussian noise on dough/goal coordinates and
    hindsight goal relabeling on a configured fraction of samples. Returns
    parameters with train/validation loss curves in ``meta``. Deterministic
    given ``seed``.
    """
    import dataclasses

    from .errors import CardinalityError

    if not demos:
        raise CardinalityError("bc_train requires a nonempty dataset")
    tc = train_cfg or exp.train
    pcfg = pcfg or exp.policy
    if tc.open_loop and pcfg.open_loop_horizon == 0:
        horizons = {d.actions.shape[0] for d in demos}
        if len(horizons) != 1:
            raise ShapeError(f"open-loop training needs a single horizon, got {horizons}")
        pcfg = dataclasses.replace(pcfg, open_loop_horizon=horizons.pop())

    dough, tool, goal, relabeled, labels, demo_ids = _assemble_samples(demos, tc.open_loop)
    sizes = (dough.shape[1], tool.shape[1], goal.shape[1])
    clamp = exp.sim.clamp_box
    policy = init_policy_params(pcfg, sizes, clamp, seed=seed)

    rng = np.random.Generator(np.random.PCG64(seed + 1))
    n_demos = int(demo_ids.max()) + 1
    perm = rng.permutation(n_demos)
    n_val = int(round(tc.val_fraction * n_demos))
    val_demos = set(perm[:n_val].tolist())
    val_mask = np.isin(demo_ids, list(val_demos))
    train_idx = np.nonzero(~val_mask)[0]
    val_idx = np.nonzero(val_mask)[0]
    if train_idx.size == 0:
        raise TrainingDivergedError(0, "no training samples after validation split")

    onehot = np.zeros((sum(sizes), 3), dtype=np.float32)
    offset = 0
    for cls, n in enumerate(sizes):
        onehot[offset:offset + n, cls] = 1.0
        offset += n
    feat_const = jnp.asarray(onehot)

    loss_fn = _batched_loss_fn(pcfg, clamp)

    @jax.jit
    def train_step(params, opt, pts, labels_batch):
        feat = jnp.broadcast_to(feat_const, (pts.shape[0],) + feat_const.shape)
        loss, grads = jax.value_and_grad(loss_fn)(params, pts, feat, labels_batch)
        m, v, t = opt
        t = t + 1
        m = jax.tree.map(lambda a, g: 0.9 * a + 0.1 * g, m, grads)
        v = jax.tree.map(lambda a, g: 0.999 * a + 0.001 * g * g, v, grads)
        lr = tc.learning_rate
        tf = t.astype(pts.dtype)  # keep bias corrections in the param dtype

        def upd(p, mi, vi):
            mhat = mi / (1.0 - 0.9**tf)
            vhat = vi / (1.0 - 0.999**tf)
            return p - lr * mhat / (jnp.sqrt(vhat) + 1e-8)

        params = jax.tree.map(upd, params, m, v)
        return params, (m, v, t), loss

    @jax.jit
    def eval_loss(params, pts, labels_batch):
        feat = jnp.broadcast_to(feat_const, (pts.shape[0],) + feat_const.shape)
        return loss_fn(params, pts, feat, labels_batch)

    params = {k: jnp.asarray(v) for k, v in policy.params.items()}
    opt = (jax.tree.map(jnp.zeros_like, params), jax.tree.map(jnp.zeros_like, params),
           jnp.zeros((), dtype=jnp.int32))

    def batch_points(idx, augment):
        d = dough[idx].copy()
        g = goal[idx].copy()
        if augment:
            swap = rng.uniform(size=len(idx)) < tc.relabel_fraction
            g[swap] = relabeled[idx[swap]]
            if tc.noise_sigma > 0:
                d += rng.normal(0.0, tc.noise_sigma, d.shape).astype(np.float32)
                g += rng.normal(0.0, tc.noise_sigma, g.shape).astype(np.float32)
        return np.concatenate([d, tool[idx], g], axis=1)

    train_curve, val_curve = [], []
    steps_per_epoch = max(1, len(train_idx) // tc.batch_size)
    for epoch in range(tc.epochs):
        order = rng.permutation(len(train_idx))
        epoch_losses = []
        for b in range(steps_per_epoch):
            idx = train_idx[order[b * tc.batch_size:(b + 1) * tc.batch_size]]
            if idx.size == 0:
                continue
            pts = jnp.asarray(batch_points(idx, augment=True))
            params, opt, loss = train_step(params, opt, pts, jnp.asarray(labels[idx]))
            loss = float(loss)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch)
            epoch_losses.append(loss)
        train_curve.append(float(np.mean(epoch_losses)))
        if val_idx.size:
            vpts = jnp.asarray(batch_points(val_idx, augment=False))
            val_curve.append(float(eval_loss(params, vpts, jnp.asarray(labels[val_idx]))))
        if log and (epoch % max(1, tc.epochs // 10) == 0 or epoch == tc.epochs - 1):
            vtxt = f" val {val_curve[-1]:.5f}" if val_curve else ""
            log(f"epoch {epoch}: train {train_curve[-1]:.5f}{vtxt}")

    policy.params = {k: np.asarray(v) for k, v in params.items()}
    policy.meta.update({
        "epochs": tc.epochs,
        "train_curve": train_curve,
        "val_curve": val_curve,
        "final_train_loss": train_curve[-1] if train_curve else None,
        "n_samples": int(len(train_idx)),
    })
    return policy


# ---------------------------------------------------------------------------
# executors
# ---------------------------------------------------------------------------


def rollout_policy_closed_loop(policy: PolicyParams | None, scene, exp: ExperimentConfig,
                               reset_timesteps=(), horizon: int | None = None,
                               action_fn=None):
    """Closed-loop execution: observe, act, step; scheduled resets teleport.

    ``action_fn(obs, t) -> ActionCommand`` overrides the policy (used for
    demonstrator playback). Returns (states, performance).
    """
    from .dataset import CameraSpec, build_observation
    from .scene import make_goal_cloud

    cfg = exp.sim
    horizon = horizon or exp.trajopt.horizon
    goal = make_goal_cloud(scene, exp.loss.n_loss_points, cfg)
    camera = CameraSpec()
    resets = set(reset_timesteps)
    state = init_state(cfg, scene)
    states = [state]
    for t in range(horizon):
        if (t + 1) in resets:
            pose = generate_reset_pose(state, 0, exp.scene.tool_clearance, cfg)
            state = reset_tool(state, pose)
            state = SimState(state.particles, state.tool, state.step_index + 1)
        else:
            obs = build_observation(state, goal.cloud, exp.dataset, cfg, camera)
            if action_fn is not None:
                action = action_fn(obs, t)
            else:
                action = policy_forward(policy, obs)
            state = control_step(state, action, cfg)
        states.append(state)
    perf = evaluate_performance(states[0], states[-1], goal, exp.loss.n_loss_points)
    return states, float(perf)


def rollout_policy_open_loop(policy: PolicyParams, scene, exp: ExperimentConfig,
                             reset_timesteps=()):
    """One forward pass from the initial observation emits all actions."""
    from .dataset import CameraSpec, build_observation
    from .scene import make_goal_cloud
    from .sim import rollout

    cfg = exp.sim
    goal = make_goal_cloud(scene, exp.loss.n_loss_points, cfg)
    state0 = init_state(cfg, scene)
    obs = build_observation(state0, goal.cloud, exp.dataset, cfg, CameraSpec())
    actions = policy_forward(policy, obs)
    if not isinstance(actions, np.ndarray):
        raise ShapeError("open-loop execution requires an open-loop policy head")
    sched = ResetSchedule(tuple(reset_timesteps), (), exp.scene.tool_clearance)
    states = rollout(state0, actions, sched, cfg)
    perf = evaluate_performance(state0, states[-1], goal, exp.loss.n_loss_points)
    return states, float(perf)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_policy(path, policy: PolicyParams) -> None:
    meta = {
        "config": {
            "sa_levels": [[r, rad, list(w)] for r, rad, w in policy.config.sa_levels],
            "global_mlp_widths": list(policy.config.global_mlp_widths),
            "head_widths": list(policy.config.head_widths),
            "action_dim": policy.config.action_dim,
            "width_scale": policy.config.width_scale,
            "group_size": policy.config.group_size,
            "open_loop_horizon": policy.config.open_loop_horizon,
        },
        "clamp_box": list(policy.clamp_box),
        "sizes": list(policy.sizes),
        "meta": {k: v for k, v in policy.meta.items()
                 if isinstance(v, (int, float, str, list, type(None)))},
    }
    write_policy_checkpoint(path, policy.params, meta)


def load_policy(path) -> PolicyParams:
    params, meta = read_policy_checkpoint(path)
    c = meta["config"]
    pcfg = PolicyConfig(
        sa_levels=tuple((r, rad, tuple(w)) for r, rad, w in c["sa_levels"]),
        global_mlp_widths=tuple(c["global_mlp_widths"]),
        head_widths=tuple(c["head_widths"]),
        action_dim=c["action_dim"],
        width_scale=c["width_scale"],
        group_size=c["group_size"],
        open_loop_horizon=c["open_loop_horizon"],
    )
    return PolicyParams(
        params=params,
        config=pcfg,
        clamp_box=tuple(meta["clamp_box"]),
        sizes=tuple(meta["sizes"]),
        meta=meta.get("meta", {}),
    )
