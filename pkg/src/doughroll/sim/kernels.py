"""JIT-compiled MPM kernels: substep, control step, rollout scan, losses.

Scheme: MLS-MPM with quadratic B-spline transfers, fixed-corotated elasticity
(closed-form 2-D polar decomposition), and a von Mises return mapping of the
Hencky strain built on a closed-form 2-D SVD. The roller is kinematic: grid
nodes inside its signed distance field get Coulomb-friction velocity
projection against the rigid surface velocity (translation + spin).

All functions here are pure and shape-static; the eager wrappers in
``engine.py`` own validation, error raising, and numpy conversion. Reverse
mode relies on jax autodiff with ``jax.checkpoint`` around each control step,
so memory is O(T * particles) and substeps are recomputed on the backward
pass. SVD/normalization denominators are clamped, and the plastic projection
uses a where/substitute/where pattern so inactive particles contribute exact
zeros (never NaNs) to the gradient.
"""

from __future__ import annotations

from functools import partial

import jax
import jax.numpy as jnp
from jax import lax

_EPS = 1e-30

# ---------------------------------------------------------------------------
# small linear algebra helpers (batched over leading axes)
# ---------------------------------------------------------------------------


def det2(F):
    return F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]


def _rot(theta):
    c, s = jnp.cos(theta), jnp.sin(theta)
    return jnp.stack(
        [jnp.stack([c, -s], axis=-1), jnp.stack([s, c], axis=-1)], axis=-2
    )


def polar_rotation(F):
    """Closest rotation R to F (2-D closed form, clamped denominator)."""
    a = F[..., 0, 0] + F[..., 1, 1]
    b = F[..., 1, 0] - F[..., 0, 1]
    r = jnp.sqrt(jnp.maximum(a * a + b * b, _EPS))
    c, s = a / r, b / r
    return jnp.stack(
        [jnp.stack([c, -s], axis=-1), jnp.stack([s, c], axis=-1)], axis=-2
    )


def svd2(F):
    """Closed-form 2-D SVD; returns (U, sigma1, sigma2, V) with sigma1 >= sigma2.

    Smooth except at repeated/zero singular values; callers keep those points
    out of the differentiated branch (see ``von_mises_return_map``).
    """
    e = 0.5 * (F[..., 0, 0] + F[..., 1, 1])
    h = 0.5 * (F[..., 1, 0] - F[..., 0, 1])
    f = 0.5 * (F[..., 0, 0] - F[..., 1, 1])
    g = 0.5 * (F[..., 1, 0] + F[..., 0, 1])
    q = jnp.sqrt(jnp.maximum(e * e + h * h, _EPS))
    r = jnp.sqrt(jnp.maximum(f * f + g * g, _EPS))
    s1 = q + r
    s2 = q - r
    a1 = jnp.arctan2(g, f)
    a2 = jnp.arctan2(h, e)
    u_angle = 0.5 * (a1 + a2)
    v_angle = 0.5 * (a1 - a2)
    return _rot(u_angle), s1, s2, _rot(v_angle)


def von_mises_return_map(F, eps_yield):
    """Project the deviatoric Hencky strain of F back onto the yield surface.

    Particles inside the yield surface pass through untouched (exact
    identity, including gradients). The projected branch runs on a substitute
    matrix for inactive particles so its (discarded) gradients stay finite.
    """
    _, s1, s2, _ = svd2(F)
    e1 = jnp.log(jnp.maximum(s1, 1e-12))
    e2 = jnp.log(jnp.maximum(s2, 1e-12))
    dev_norm = jnp.abs(e1 - e2) / jnp.sqrt(2.0)
    need = dev_norm > eps_yield

    dummy = jnp.array([[2.0, 0.0], [0.0, 1.0]], dtype=F.dtype)
    F_safe = jnp.where(need[..., None, None], F, dummy)
    U, s1, s2, V = svd2(F_safe)
    e1 = jnp.log(jnp.maximum(s1, 1e-12))
    e2 = jnp.log(jnp.maximum(s2, 1e-12))
    mean = 0.5 * (e1 + e2)
    half_gap = 0.5 * (e1 - e2)                     # >= 0 by construction
    gap_norm = jnp.sqrt(2.0) * half_gap
    scale = eps_yield / jnp.maximum(gap_norm, 1e-12)
    new_half = half_gap * scale
    sp1 = jnp.exp(mean + new_half)
    sp2 = jnp.exp(mean - new_half)
    S = jnp.zeros_like(F_safe)
    S = S.at[..., 0, 0].set(sp1)
    S = S.at[..., 1, 1].set(sp2)
    F_proj = U @ S @ jnp.swapaxes(V, -1, -2)
    return jnp.where(need[..., None, None], F_proj, F)


def pk1_stress(F, mu, lam):
    """First Piola-Kirchhoff stress of the fixed-corotated energy."""
    R = polar_rotation(F)
    J = det2(F)
    # (J - 1) * J * F^{-T} simplifies to (J - 1) * adj(F)^T: no division by J
    adjT = jnp.stack(
        [
            jnp.stack([F[..., 1, 1], -F[..., 1, 0]], axis=-1),
            jnp.stack([-F[..., 0, 1], F[..., 0, 0]], axis=-1),
        ],
        axis=-2,
    )
    return 2.0 * mu * (F - R) + (lam * (J - 1.0))[..., None, None] * adjT


# ---------------------------------------------------------------------------
# static per-config constants
# ---------------------------------------------------------------------------


def sim_consts(cfg):
    """Hashable snapshot of the SimConfig fields the kernels need."""
    return (
        ("bc", cfg.boundary_cells),
        ("clamp", tuple(cfg.clamp_box)),
        ("damping", cfg.velocity_damping),
        ("dt", cfg.dt_substep),
        ("friction", cfg.friction_coeff),
        ("gravity", cfg.gravity),
        ("eps_yield", cfg.yield_hencky),
        ("lam", cfg.lambda_lame),
        ("mu", cfg.mu_lame),
        ("n_grid", cfg.grid_resolution),
        ("dx", cfg.cell_size),
        ("origin", (cfg.domain[0], cfg.domain[1])),
        ("substeps", cfg.substeps_per_control),
    )


def loss_consts(spec):
    return (
        ("entropic_epsilon", float(spec.entropic_epsilon)),
        ("lambda_contact", float(spec.lambda_contact)),
        ("n_loss_points", int(spec.n_loss_points)),
        ("sinkhorn_iters", int(spec.sinkhorn_iters)),
        ("softmin_beta", float(spec.softmin_beta)),
    )


def _node_positions(n_grid, dx, origin, dtype):
    ii, jj = jnp.meshgrid(jnp.arange(n_grid), jnp.arange(n_grid), indexing="ij")
    pos = jnp.stack([ii, jj], axis=-1).reshape(-1, 2).astype(dtype)
    return pos * dx + jnp.asarray(origin, dtype=dtype)


# ---------------------------------------------------------------------------
# one MPM substep
# ---------------------------------------------------------------------------


def mpm_substep(p, tool_center, tool_radius, tool_v, tool_omega, consts):
    """Advance particles by one dt with a kinematic tool at fixed pose.

    ``p`` is a (x, v, F, C, mass, volume) tuple of arrays. The tool's
    translational/angular surface velocity is constant over the substep (set
    by the enclosing control step).
    """
    x, v, F, C, mass, volume = p
    dtype = x.dtype
    n_grid = consts["n_grid"]
    dx = consts["dx"]
    dt = consts["dt"]
    inv_dx = 1.0 / dx
    origin = jnp.asarray(consts["origin"], dtype=dtype)

    # deformation update with last step's velocity gradient, then plasticity
    eye = jnp.eye(2, dtype=dtype)
    F_el = (eye + dt * C) @ F
    F_el = von_mises_return_map(F_el, consts["eps_yield"])

    # --- particle to grid ---
    Xp = (x - origin) * inv_dx
    base = jnp.floor(Xp - 0.5).astype(jnp.int32)
    fx = Xp - base.astype(dtype)
    w = jnp.stack(
        [0.5 * (1.5 - fx) ** 2, 0.75 - (fx - 1.0) ** 2, 0.5 * (fx - 0.5) ** 2], axis=0
    )  # (3, n, 2)

    P = pk1_stress(F_el, consts["mu"], consts["lam"])
    stress = (-dt * volume * 4.0 * inv_dx * inv_dx)[:, None, None] * (
        P @ jnp.swapaxes(F_el, -1, -2)
    )
    affine = stress + mass[:, None, None] * C

    mom = jnp.zeros((n_grid * n_grid, 2), dtype=dtype)
    mgrid = jnp.zeros(n_grid * n_grid, dtype=dtype)
    mv = mass[:, None] * v
    for i in range(3):
        for j in range(3):
            offset = jnp.asarray([i, j], dtype=dtype)
            dpos = (offset - fx) * dx
            wij = w[i, :, 0] * w[j, :, 1]
            contrib = wij[:, None] * (mv + jnp.einsum("nab,nb->na", affine, dpos))
            idx = (base[:, 0] + i) * n_grid + (base[:, 1] + j)
            mom = mom.at[idx].add(contrib)
            mgrid = mgrid.at[idx].add(wij * mass)

    # --- grid momentum update ---
    occupied = mgrid > 0
    gv = mom / jnp.where(occupied, mgrid, 1.0)[:, None]
    gv = jnp.where(occupied[:, None], gv, 0.0)
    gv = gv + dt * jnp.asarray([0.0, -consts["gravity"]], dtype=dtype)

    node = _node_positions(n_grid, dx, consts["origin"], dtype)

    # kinematic tool contact with Coulomb friction; the projection ramps in
    # over a half-cell band inside the surface so grid velocities stay
    # continuous in the tool pose (hard switching defeats finite-difference
    # gradient checks)
    rel = node - tool_center
    dist = jnp.sqrt(jnp.maximum(jnp.sum(rel * rel, axis=-1), _EPS))
    sdf = dist - tool_radius
    normal = rel / dist[:, None]
    surf_v = tool_v + tool_omega * jnp.stack([-rel[:, 1], rel[:, 0]], axis=-1)
    v_rel = gv - surf_v
    vn = jnp.sum(v_rel * normal, axis=-1)
    vt = v_rel - vn[:, None] * normal
    vt_norm = jnp.sqrt(jnp.maximum(jnp.sum(vt * vt, axis=-1), _EPS))
    coulomb = jnp.maximum(0.0, 1.0 + consts["friction"] * vn / vt_norm)
    v_projected = surf_v + vt * coulomb[:, None]
    band = 0.5 * dx
    blend = jnp.clip(-sdf / band, 0.0, 1.0) * (vn < 0.0)
    gv = gv + blend[:, None] * (v_projected - gv)

    # floor (with friction), walls and ceiling (frictionless normal clamps)
    flat = jnp.arange(n_grid * n_grid, dtype=jnp.int32)
    ii = flat // n_grid
    jj = flat % n_grid
    bc = consts["bc"]
    floor_hit = (jj < bc) & (gv[:, 1] < 0.0)
    vx_mag = jnp.maximum(jnp.abs(gv[:, 0]), 1e-12)
    floor_coulomb = jnp.maximum(0.0, 1.0 + consts["friction"] * gv[:, 1] / vx_mag)
    gv_floor = jnp.stack([gv[:, 0] * floor_coulomb, jnp.zeros_like(gv[:, 1])], axis=-1)
    gv = jnp.where(floor_hit[:, None], gv_floor, gv)
    gvx = jnp.where((ii < bc) & (gv[:, 0] < 0.0), 0.0, gv[:, 0])
    gvx = jnp.where((ii >= n_grid - bc) & (gvx > 0.0), 0.0, gvx)
    gvy = jnp.where((jj >= n_grid - bc) & (gv[:, 1] > 0.0), 0.0, gv[:, 1])
    gv = jnp.stack([gvx, gvy], axis=-1)

    # --- grid to particle ---
    new_v = jnp.zeros_like(v)
    new_C = jnp.zeros_like(C)
    for i in range(3):
        for j in range(3):
            offset = jnp.asarray([i, j], dtype=dtype)
            dpos = (offset - fx) * dx
            wij = (w[i, :, 0] * w[j, :, 1])[:, None]
            idx = (base[:, 0] + i) * n_grid + (base[:, 1] + j)
            gvi = gv[idx]
            new_v = new_v + wij * gvi
            new_C = new_C + (4.0 * inv_dx * inv_dx) * wij[..., None] * (
                gvi[:, :, None] * dpos[:, None, :]
            )

    # mild viscous bleed: dough rings forever under pure APIC transfers
    new_v = new_v * (1.0 - consts["damping"])
    lo = origin + 2.0 * dx
    hi = origin + (n_grid - 2.0) * dx
    new_x = jnp.clip(x + dt * new_v, lo, hi)
    return (new_x, new_v, F_el, new_C, mass, volume)


# ---------------------------------------------------------------------------
# control step and rollout scan
# ---------------------------------------------------------------------------


def clamp_action(action, clamp, dtype):
    box = jnp.asarray(clamp, dtype=dtype)
    return jnp.clip(action, -box, box)


def control_step_core(p, tool, action, consts):
    """Apply tool kinematics once, then run the configured substeps.

    ``tool`` is (center(2,), heading, spin, radius). The rigid surface
    velocity used for contact is the commanded displacement divided by the
    control interval, so friction sees the roller's translation and spin even
    though the pose itself is updated up front.
    """
    center, heading, spin, radius = tool
    dtype = p[0].dtype
    act = clamp_action(action, consts["clamp"], dtype)
    dy, dl, dom_int = act[0], act[1], act[2]  # domega_global inert in 2-D
    disp = jnp.stack([dl * jnp.cos(heading), dy])
    new_center = center + disp
    new_spin = spin + dom_int
    dt_control = consts["dt"] * consts["substeps"]
    tool_v = disp / dt_control
    tool_omega = dom_int / dt_control

    def body(carry, _):
        return (
            mpm_substep(carry, new_center, radius, tool_v, tool_omega, consts),
            None,
        )

    p, _ = lax.scan(body, p, None, length=consts["substeps"])
    return p, (new_center, heading, new_spin, radius)


def hover_pose_arrays(x, radius, spin, clearance):
    """Reset pose above the dough: centroid x, max height + radius + clearance."""
    cx = jnp.mean(x[:, 0])
    cy = jnp.max(x[:, 1]) + radius + clearance
    return jnp.stack([cx, cy, spin])


def _step_with_reset(p, tool, inp, consts, clearance):
    """One rollout step: either a control step or a tool teleport.

    A reset replaces the transition entirely: particle fields pass through
    untouched and the pose comes from the schedule (or is regenerated above
    the dough). Reset poses are constants under differentiation.
    """
    action, is_reset, sched_pose, use_sched = inp
    p_stepped, tool_stepped = control_step_core(p, tool, action, consts)

    auto = hover_pose_arrays(p[0], tool[3], tool[2], clearance)
    pose = jnp.where(use_sched, sched_pose, auto)
    pose = lax.stop_gradient(pose)

    def pick(a, b):
        return jnp.where(is_reset, a, b)

    new_p = tuple(pick(a, b) for a, b in zip(p, p_stepped))
    new_tool = (
        pick(pose[:2], tool_stepped[0]),
        tool_stepped[1],
        pick(pose[2], tool_stepped[2]),
        tool_stepped[3],
    )
    return new_p, new_tool, pose


def _invariant_probe(p):
    x, v, F, C, mass, _ = p
    finite = (
        jnp.all(jnp.isfinite(x))
        & jnp.all(jnp.isfinite(v))
        & jnp.all(jnp.isfinite(F))
        & jnp.all(jnp.isfinite(C))
    )
    detF = det2(F)
    _, s1, s2, _ = svd2(F)
    e1 = jnp.log(jnp.maximum(s1, 1e-12))
    e2 = jnp.log(jnp.maximum(s2, 1e-12))
    dev_norm = jnp.abs(e1 - e2) / jnp.sqrt(2.0)
    kinetic = 0.5 * jnp.sum(mass * jnp.sum(v * v, axis=-1))
    return finite, jnp.min(detF), jnp.max(dev_norm), jnp.sum(mass), kinetic


@partial(jax.jit, static_argnames=("consts_key",))
def _rollout_jit(p0, tool0, actions, is_reset, sched_poses, use_sched, clearance, consts_key):
    consts = dict(consts_key)

    def step(carry, inp):
        p, tool = carry
        new_p, new_tool, pose = _step_with_reset(p, tool, inp, consts, clearance)
        out = (new_p[0], new_p[1], new_p[2], new_p[3], new_tool[0], new_tool[2], pose)
        return (new_p, new_tool), out + _invariant_probe(new_p)

    (pT, toolT), outs = lax.scan(step, (p0, tool0), (actions, is_reset, sched_poses, use_sched))
    return (pT, toolT), outs


def rollout_arrays(p0, tool0, actions, is_reset, sched_poses, use_sched, clearance, consts_key):
    """Run the rollout scan.

    Returns final (particles, tool) and per-step outputs: x, v, F, C, tool
    center, tool spin, used reset pose, finite flag, min det(F), max
    deviatoric Hencky norm, total mass, kinetic energy.
    """
    return _rollout_jit(p0, tool0, actions, is_reset, sched_poses, use_sched,
                        clearance, consts_key)


# ---------------------------------------------------------------------------
# point-cloud loss kernels
# ---------------------------------------------------------------------------


def fps_fixed(pts, k):
    """Farthest point sampling of exactly k points, order-canonicalized.

    Points are sorted lexicographically first, so the selection (seed = the
    lexicographically smallest point, max-min-distance growth, first-index
    tie break) is independent of input ordering.
    """
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
    sel, _ = lax.fori_loop(1, k, body, (sel0, d))
    return p[sel]


def pairwise_dist(A, B):
    d2 = jnp.sum((A[:, None, :] - B[None, :, :]) ** 2, axis=-1)
    return jnp.sqrt(jnp.maximum(d2, _EPS))


def sinkhorn_cost(A, B, eps_target, iters):
    """Entropic OT between clouds with uniform weights (log domain).

    Potentials are annealed geometrically down to ``eps_target`` over the
    first ~60% of iterations. Returns (cost, dual, plan, max marginal
    violation):

    - ``cost`` is the transport cost of the converged plan, with gradients
      flowing through the cost matrix only (fixed-plan envelope gradient).
    - ``dual`` is the regularized optimal value; its autodiff gradient is
      the same plan-weighted cost-matrix derivative, but because the dual is
      stationary in the potentials, that gradient is also the true derivative
      of the returned value, which makes it the right term to put inside a
      finite-difference-checked objective.
    """
    n, m = A.shape[0], B.shape[0]
    dtype = A.dtype
    C = pairwise_dist(A, B)
    log_n = jnp.log(jnp.asarray(float(n), dtype))
    log_m = jnp.log(jnp.asarray(float(m), dtype))

    C_fixed = lax.stop_gradient(C)
    eps_hi = jnp.maximum(eps_target, jnp.mean(C_fixed))
    anneal = max(1, int(round(0.6 * iters)))
    u = jnp.minimum((jnp.arange(iters, dtype=dtype) + 1.0) / anneal, 1.0)
    eps_sched = jnp.exp((1.0 - u) * jnp.log(eps_hi) + u * jnp.log(eps_target))

    f0 = jnp.zeros(n, dtype=dtype)
    g0 = jnp.zeros(m, dtype=dtype)

    def body(carry, eps):
        f, g = carry
        f = -eps * (jax.nn.logsumexp((g[None, :] - C_fixed) / eps, axis=1) + log_n)
        g = -eps * (jax.nn.logsumexp((f[:, None] - C_fixed) / eps, axis=0) + log_m)
        return (f, g), None

    (f, g), _ = lax.scan(body, (f0, g0), eps_sched)

    log_plan_live = (f[:, None] + g[None, :] - C) / eps_target
    plan = jnp.exp(lax.stop_gradient(log_plan_live))
    cost = jnp.sum(plan * C)
    dual = jnp.mean(f) + jnp.mean(g) - eps_target * (jnp.sum(jnp.exp(log_plan_live)) - 1.0)
    row_err = jnp.max(jnp.abs(jnp.sum(plan, axis=1) - 1.0 / n))
    col_err = jnp.max(jnp.abs(jnp.sum(plan, axis=0) - 1.0 / m))
    return cost, dual, plan, jnp.maximum(row_err, col_err)


def contact_softmin(tool_center, tool_radius, pts, beta):
    """Smooth minimum of clamped tool distances; 0 on touch/penetration."""
    d = jnp.sqrt(jnp.maximum(jnp.sum((pts - tool_center) ** 2, axis=-1), _EPS))
    d = jnp.maximum(d - tool_radius, 0.0)
    m = jnp.min(d)
    soft = m - jnp.log(jnp.sum(jnp.exp(-beta * (d - m)))) / beta
    return jnp.maximum(soft, 0.0)


def chamfer_cost(A, B):
    D = pairwise_dist(A, B)
    return jnp.mean(jnp.min(D, axis=1)) + jnp.mean(jnp.min(D, axis=0))


# ---------------------------------------------------------------------------
# trajectory loss over a rollout + end-to-end gradient
# ---------------------------------------------------------------------------


def traj_loss_terms(xs, tool_centers, tool_radius, goal, spec, roll_w, contact_w):
    """Objective summed over pre-gathered loss timesteps.

    ``xs`` (L, n, 2) and ``tool_centers`` (L, 2) are the states at the loss
    timesteps; ``roll_w``/``contact_w`` are per-step weights (contact weight
    zero at reset timesteps).
    """

    def per_step(x_t, c_t, rw, cw):
        pts = fps_fixed(x_t, spec["n_loss_points"])
        # the dual value is finite-difference-consistent with its gradient
        _, roll, _, _ = sinkhorn_cost(
            pts, goal, spec["entropic_epsilon"], spec["sinkhorn_iters"]
        )
        touch = contact_softmin(c_t, tool_radius, x_t, spec["softmin_beta"])
        return rw * roll + spec["lambda_contact"] * cw * touch

    return jnp.sum(jax.vmap(per_step)(xs, tool_centers, roll_w, contact_w))


def _pose_penalty(centers, spins, targets, weight, pen_idx):
    """Distance of visited tool poses to target poses at selected steps.

    Pose distance = translation L2 + 0.01 * |spin gap|; used by the
    learn-reset variant instead of teleporting.
    """
    idx = jnp.asarray(pen_idx, dtype=jnp.int32) - 1
    dc = centers[idx] - targets[:, :2]
    trans = jnp.sqrt(jnp.maximum(jnp.sum(dc * dc, axis=-1), _EPS))
    dspin = jnp.abs(spins[idx] - targets[:, 2])
    return weight * jnp.sum(trans + 0.01 * dspin)


@partial(jax.jit, static_argnames=("consts_key", "loss_key", "loss_idx", "pen_idx"))
def _loss_and_grad_jit(p0, tool0, actions, is_reset, sched_poses, use_sched, clearance,
                       goal, roll_w, contact_w, pen_targets, pen_weight,
                       consts_key, loss_key, loss_idx, pen_idx):
    consts = dict(consts_key)
    spec = dict(loss_key)
    idx = jnp.asarray(loss_idx, dtype=jnp.int32) - 1  # scan outputs start at t=1

    def total(acts):
        def step(carry, inp):
            p, tool = carry
            new_p, new_tool, _ = _step_with_reset(p, tool, inp, consts, clearance)
            finite = jnp.all(jnp.isfinite(new_p[0])) & jnp.all(jnp.isfinite(new_p[1]))
            return (new_p, new_tool), (new_p[0], new_tool[0], new_tool[2], finite)

        _, (xs, centers, spins, finite) = lax.scan(
            jax.checkpoint(step), (p0, tool0), (acts, is_reset, sched_poses, use_sched)
        )
        loss = traj_loss_terms(
            xs[idx], centers[idx], tool0[3], goal, spec, roll_w, contact_w
        )
        if pen_idx:
            loss = loss + _pose_penalty(centers, spins, pen_targets, pen_weight, pen_idx)
        return loss, finite

    (loss, finite), grad = jax.value_and_grad(total, has_aux=True)(actions)
    return loss, grad, finite


def loss_and_grad_arrays(p0, tool0, actions, is_reset, sched_poses, use_sched, clearance,
                         goal, loss_key, loss_steps, contact_steps, consts_key,
                         pen_steps=(), pen_targets=None, pen_weight=0.0, roll_weights=None):
    """Trajectory loss and its gradient with respect to the action array.

    ``loss_steps`` are 1-based control-step indices whose states enter the
    objective; ``contact_steps`` is the subset that also gets the contact
    term (reset timesteps are excluded by the caller). ``roll_weights`` can
    scale individual roll terms; ``pen_steps``/``pen_targets`` (k, 3) add the
    learn-reset pose-distance penalty.
    """
    dtype = actions.dtype
    contact_w = jnp.asarray(
        [1.0 if t in contact_steps else 0.0 for t in loss_steps], dtype=dtype
    )
    if roll_weights is None:
        roll_w = jnp.ones(len(loss_steps), dtype=dtype)
    else:
        roll_w = jnp.asarray(roll_weights, dtype=dtype)
    if pen_targets is None:
        pen_targets = jnp.zeros((max(len(pen_steps), 1), 3), dtype=dtype)
    return _loss_and_grad_jit(
        p0, tool0, actions, is_reset, sched_poses, use_sched, clearance, goal,
        roll_w, contact_w, pen_targets, jnp.asarray(pen_weight, dtype=dtype),
        consts_key, loss_key, tuple(int(t) for t in loss_steps),
        tuple(int(t) for t in pen_steps)
    )


@partial(jax.jit, static_argnames=("consts_key", "loss_key", "loss_idx"))
def _population_loss_jit(p0, tool0, candidates, is_reset, sched_poses, use_sched, clearance,
                         goal, contact_w, consts_key, loss_key, loss_idx):
    consts = dict(consts_key)
    spec = dict(loss_key)
    idx = jnp.asarray(loss_idx, dtype=jnp.int32) - 1
    roll_w = jnp.ones(len(loss_idx), dtype=candidates.dtype)

    def one(acts):
        def step(carry, inp):
            p, tool = carry
            new_p, new_tool, _ = _step_with_reset(p, tool, inp, consts, clearance)
            finite = jnp.all(jnp.isfinite(new_p[0])) & jnp.all(jnp.isfinite(new_p[1]))
            return (new_p, new_tool), (new_p[0], new_tool[0], finite)

        _, (xs, centers, finite) = lax.scan(
            step, (p0, tool0), (acts, is_reset, sched_poses, use_sched)
        )
        loss = traj_loss_terms(
            xs[idx], centers[idx], tool0[3], goal, spec, roll_w, contact_w
        )
        return loss, jnp.all(finite)

    return jax.vmap(one)(candidates)


def population_loss_arrays(p0, tool0, candidates, is_reset, sched_poses, use_sched, clearance,
                           goal, loss_key, loss_steps, contact_steps, consts_key):
    """Forward-only segment losses for a population of action candidates."""
    contact_w = jnp.asarray(
        [1.0 if t in contact_steps else 0.0 for t in loss_steps], dtype=candidates.dtype
    )
    return _population_loss_jit(
        p0, tool0, candidates, is_reset, sched_poses, use_sched, clearance, goal,
        contact_w, consts_key, loss_key, tuple(int(t) for t in loss_steps)
    )
