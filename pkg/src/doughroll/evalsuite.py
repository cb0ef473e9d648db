"""Evaluation harness: held-out suites, sweeps, statistics, reports.

Every (method, scene, seed) cell is scored with the exact-transport
normalized improvement plus a Chamfer-normalized analog computed on partial
observation clouds, so the two metrics can be cross-checked. Failures never
abort a suite: a cell records status FAIL and a NaN score.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betainc

from .config import ExperimentConfig
from .errors import DegenerateTestError
from .losses import chamfer
from .scene import make_goal_cloud


@dataclass
class EvalRecord:
    method: str
    scene_id: int
    seed: int
    perf_emd: float
    perf_chamfer: float
    wall_s: float
    status: str = "ok"


@dataclass
class EvalReport:
    records: list = field(default_factory=list)
    significance: list = field(default_factory=list)

    def aggregates(self) -> dict:
        """method -> (mean, std, n) over successful cells."""
        out = {}
        for method in sorted({r.method for r in self.records}):
            vals = [r.perf_emd for r in self.records
                    if r.method == method and r.status == "ok"]
            if vals:
                out[method] = (float(np.mean(vals)), float(np.std(vals)), len(vals))
            else:
                out[method] = (float("nan"), float("nan"), 0)
        return out

    def method_values(self, method: str) -> list:
        return [r.perf_emd for r in sorted(
            (r for r in self.records if r.method == method),
            key=lambda r: (r.scene_id, r.seed))]


def chamfer_performance(initial_cloud, final_cloud, goal_cloud) -> float:
    """Chamfer analog of the normalized improvement metric."""
    d0 = chamfer(initial_cloud, goal_cloud)
    if d0 <= 0:
        raise DegenerateTestError("initial cloud already coincides with the goal")
    return (d0 - chamfer(final_cloud, goal_cloud)) / d0


def score_states(states, scene, exp: ExperimentConfig) -> tuple:
    """(perf_emd, perf_chamfer) for an executed trajectory."""
    from .dataset import CameraSpec, synth_partial_cloud
    from .trajopt import evaluate_performance

    goal = make_goal_cloud(scene, exp.loss.n_loss_points, exp.sim)
    perf = evaluate_performance(states[0], states[-1], goal, exp.loss.n_loss_points)
    camera = CameraSpec()
    p0 = synth_partial_cloud(states[0], camera, exp.dataset.n_obs, exp.sim)
    pt = synth_partial_cloud(states[-1], camera, exp.dataset.n_obs, exp.sim)
    return float(perf), float(chamfer_performance(p0, pt, goal.cloud))


def evaluate_suite(methods: dict, scenes, seeds, exp: ExperimentConfig, log=None) -> EvalReport:
    """Run every (method, scene, seed) cell; deterministic given the seeds.

    ``methods`` maps a name to ``fn(scene, seed) -> states`` (a completed
    trajectory). A raising method records a FAIL cell with NaN performance.
    """
    report = EvalReport()
    for name in sorted(methods):
        fn = methods[name]
        for scene_id, scene in enumerate(scenes):
            for seed in seeds:
                t0 = time.perf_counter()
                try:
                    states = fn(scene, seed)
                    perf, perf_cd = score_states(states, scene, exp)
                    rec = EvalRecord(name, scene_id, seed, perf, perf_cd,
                                     time.perf_counter() - t0)
                except Exception as err:  # failures are data, not aborts
                    rec = EvalRecord(name, scene_id, seed, float("nan"), float("nan"),
                                     time.perf_counter() - t0, status="FAIL")
                    if log:
                        log(f"{name} scene {scene_id} seed {seed} FAILED: {err}")
                report.records.append(rec)
                if log and rec.status == "ok":
                    log(f"{name} scene {scene_id} seed {seed}: perf {rec.perf_emd:.3f} "
                        f"({rec.wall_s:.0f}s)")
    return report


def paired_ttest_bonferroni(a, b, num_comparisons: int = 1, alpha: float = 0.013):
    """Two-sided paired t-test with Bonferroni-corrected significance.

    Returns (t, p, significant) with p from the regularized incomplete beta
    form of the t CDF; significance is declared when p < alpha /
    num_comparisons (pass num_comparisons=1 when alpha is already corrected).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise DegenerateTestError("paired t-test needs equal-length samples with n >= 2")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0.0:
        raise DegenerateTestError("zero variance of paired differences")
    n = d.size
    t = d.mean() / (sd / math.sqrt(n))
    dof = n - 1
    p = float(betainc(dof / 2.0, 0.5, dof / (dof + t * t)))
    return float(t), p, bool(p < alpha / num_comparisons)


def compare_methods(report: EvalReport, baseline: str, alpha: float = 0.013) -> list:
    """Paired t-tests of every method against ``baseline`` on shared cells."""
    rows = []
    base = report.method_values(baseline)
    for method in sorted({r.method for r in report.records}):
        if method == baseline:
            continue
        vals = report.method_values(method)
        if len(vals) != len(base) or len(vals) < 2:
            continue
        try:
            t, p, sig = paired_ttest_bonferroni(vals, base, 1, alpha)
        except DegenerateTestError:
            t, p, sig = float("nan"), float("nan"), False
        rows.append({"method": method, "baseline": baseline, "t": t, "p": p,
                     "significant": sig, "alpha": alpha})
    report.significance.extend(rows)
    return rows


def report_to_csv(report: EvalReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "scene_id", "seed", "perf_emd", "perf_chamfer",
                         "wall_s", "status"])
        for r in sorted(report.records, key=lambda r: (r.method, r.scene_id, r.seed)):
            perf = "FAIL" if r.status != "ok" else f"{r.perf_emd:.6f}"
            perf_cd = "FAIL" if r.status != "ok" else f"{r.perf_chamfer:.6f}"
            writer.writerow([r.method, r.scene_id, r.seed, perf, perf_cd,
                             f"{r.wall_s:.3f}", r.status])


# ---------------------------------------------------------------------------
# generalization sweep
# ---------------------------------------------------------------------------


def sweep_generalization(policy, exp: ExperimentConfig, radius_range, distance_range,
                         grid_n: int, out_dir, train_points=None, log=None) -> np.ndarray:
    """Closed-loop policy performance over a (dough radius x target distance) grid.

    Writes ``sweep.csv`` (grid_n^2 rows) and ``sweep.png`` (heatmap with the
    training configurations and their convex hull overlaid, when given).
    Failed cells carry NaN and are marked FAIL in the CSV.
    """
    import os

    from .policy import rollout_policy_closed_loop
    from .scene import sample_scene_grid  # noqa: F401  (scene plumbing lives there)
    from .trajopt import schedule_resets

    os.makedirs(out_dir, exist_ok=True)
    radii = np.linspace(radius_range[0], radius_range[1], grid_n)
    dists = np.linspace(distance_range[0], distance_range[1], grid_n)
    grid = np.full((grid_n, grid_n), np.nan)
    resets = schedule_resets(exp.trajopt.horizon, exp.trajopt.n_reset)
    rows = []
    from .scene import _build_sample

    for i, r in enumerate(radii):
        for j, d in enumerate(dists):
            try:
                rt = 0.5 * (exp.scene.target_radius_min + exp.scene.target_radius_max)
                scene = _build_sample(r, d, rt, exp.scene, exp.sim, seed=exp.dataset.scene_seed)
                _, perf = rollout_policy_closed_loop(policy, scene, exp, resets)
                grid[i, j] = perf
                rows.append([f"{r:.5f}", f"{d:.5f}", f"{perf:.6f}", "ok"])
            except Exception as err:
                rows.append([f"{r:.5f}", f"{d:.5f}", "FAIL", "FAIL"])
                if log:
                    log(f"sweep cell r={r:.3f} d={d:.3f} FAILED: {err}")
            if log:
                log(f"sweep cell r={r:.3f} d={d:.3f}: {rows[-1][2]}")
    csv_path = os.path.join(out_dir, "sweep.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dough_radius", "target_distance", "performance", "status"])
        writer.writerows(rows)
    _sweep_heatmap(grid, radii, dists, train_points, os.path.join(out_dir, "sweep.png"))
    return grid


def _sweep_heatmap(grid, radii, dists, train_points, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 5))
    im = ax.imshow(
        grid, origin="lower", aspect="auto", vmin=-0.2, vmax=1.0, cmap="viridis",
        extent=[dists[0], dists[-1], radii[0], radii[-1]],
    )
    fig.colorbar(im, ax=ax, label="normalized performance")
    if train_points is not None and len(train_points) >= 3:
        pts = np.asarray(train_points)  # (n, 2): (distance, radius)
        from scipy.spatial import ConvexHull

        hull = ConvexHull(pts)
        cycle = np.r_[hull.vertices, hull.vertices[0]]
        ax.plot(pts[cycle, 0], pts[cycle, 1], "--", color="0.4", lw=1.5,
                label="training hull")
        ax.plot(pts[:, 0], pts[:, 1], "x", color="0.2", ms=5, label="train configs")
        ax.legend(loc="upper right", fontsize=8)
    ax.set_xlabel("target distance (m)")
    ax.set_ylabel("dough radius (m)")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
