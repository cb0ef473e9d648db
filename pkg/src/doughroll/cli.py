"""Command-line entry point wiring all modules into reproducible experiments.

One binary, many subcommands; a config file plus flag overrides (flags win).
Results go to files; logs go to stderr (silenced by --quiet). Every
artifact-producing command writes a run manifest next to its outputs. Exit
codes: 0 ok, 1 runtime failure, 2 usage, 3 acceptance-check failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from .config import config_hash, load_config
from .errors import DoughrollError
from .io_formats import read_actions, write_actions, write_manifest, write_trajectory_dump


def _log_fn(quiet: bool):
    if quiet:
        return lambda msg: None
    return lambda msg: print(msg, file=sys.stderr, flush=True)


def _seed_from(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("DRM_SEED")
    return int(env) if env else 0


def _scenes(exp, count=None, seed=None):
    from .scene import sample_scene_grid

    return sample_scene_grid(
        count if count is not None else exp.dataset.scene_count,
        seed if seed is not None else exp.dataset.scene_seed,
        exp.scene, exp.sim,
    )


def _heldout_scenes(exp):
    return _scenes(exp, exp.eval.n_heldout, exp.eval.heldout_seed)


def _add_common(sp):
    sp.add_argument("--config", default=None, help="INI config file")
    sp.add_argument("--seed", type=int, default=None,
                    help="global seed (falls back to $DRM_SEED, then 0)")
    sp.add_argument("--quiet", action="store_true", help="suppress stderr logging")
    sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                    help="config override, repeatable")
    sp.add_argument("--jobs", type=int, default=0, help="worker bound (0 = all cores)")


def _experiment(args):
    overrides = {}
    for item in args.set:
        dotted, _, value = item.partition("=")
        if not value:
            raise DoughrollError(f"malformed --set {item!r}; expected SECTION.KEY=VALUE")
        overrides[dotted.strip()] = value.strip()
    return load_config(args.config, overrides)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_sim_rollout(args) -> int:
    from .sim import ResetSchedule, init_state, rollout

    exp = _experiment(args)
    seed = _seed_from(args)
    log = _log_fn(args.quiet)
    t0 = time.perf_counter()
    scene = _scenes(exp)[args.scene_index]
    state0 = init_state(exp.sim, scene)
    if args.actions:
        actions = read_actions(args.actions)
    else:
        actions = np.zeros((exp.trajopt.horizon, 4))
    resets = ()
    if args.resets:
        from .trajopt import schedule_resets

        resets = tuple(schedule_resets(actions.shape[0], args.resets))
    states = rollout(state0, actions, ResetSchedule(resets, (), exp.scene.tool_clearance),
                     exp.sim)
    write_trajectory_dump(args.dump, states)
    log(f"wrote {len(states)} states to {args.dump}")
    write_manifest(args.dump + ".manifest.json", "sim rollout", config_hash(exp), seed,
                   [args.dump], time.perf_counter() - t0)
    return 0


def cmd_optimize(args) -> int:
    import json

    from .scene import make_goal_cloud
    from .trajopt import build_problem, optimize_gbto, run_cem, run_heuristic_primitive

    exp = _experiment(args)
    seed = _seed_from(args)
    log = _log_fn(args.quiet)
    t0 = time.perf_counter()
    scene = _scenes(exp)[args.scene_index]
    goal = make_goal_cloud(scene, exp.loss.n_loss_points, exp.sim)
    base_variant = args.variant if args.variant in ("diff-reset", "no-reset", "sep-reset",
                                                    "learn-reset") else "diff-reset"
    problem = build_problem(scene, goal, base_variant, exp, seed=seed)
    if args.variant == "cem":
        result = run_cem(problem, exp.cem)
    elif args.variant == "heuristic":
        result = run_heuristic_primitive(problem, exp.heuristic)
    else:
        result = optimize_gbto(problem)
    log(f"{args.variant}: best loss {result.best_loss:.5f} "
        f"performance {result.final_performance:.4f}")

    write_actions(args.out, result.best_actions)
    sidecar = args.out + ".metrics.json"
    with open(sidecar, "w") as fh:
        json.dump({
            "variant": args.variant,
            "best_loss": result.best_loss,
            "final_performance": result.final_performance,
            "loss_history": [float(x) for x in result.loss_history],
            "divergence_count": result.divergence_count,
            "sim_steps": result.sim_steps,
            "wall_time": result.wall_time,
        }, fh, indent=2, sort_keys=True)
        fh.write("\n")
    curve_csv = args.out + ".loss.csv"
    with open(curve_csv, "w") as fh:
        fh.write("iteration,loss\n")
        for i, v in enumerate(result.loss_history):
            fh.write(f"{i},{v:.9g}\n")
    write_manifest(args.out + ".manifest.json", f"optimize --variant {args.variant}",
                   config_hash(exp), seed, [args.out, sidecar, curve_csv],
                   time.perf_counter() - t0)
    return 0


def cmd_gen_demos(args) -> int:
    from .dataset import generate_demos, write_dataset

    exp = _experiment(args)
    seed = _seed_from(args)
    log = _log_fn(args.quiet)
    t0 = time.perf_counter()
    scenes = _scenes(exp)
    demos = generate_demos(scenes, exp, args.count or exp.dataset.demo_count, seed, log=log)
    write_dataset(demos, args.out, exp)
    log(f"kept {len(demos)} demos in {args.out}")
    write_manifest(os.path.join(args.out, "run.manifest.json"), "gen-demos",
                   config_hash(exp), seed, [args.out], time.perf_counter() - t0,
                   extra={"demo_count": len(demos)})
    return 0


def cmd_train_bc(args) -> int:
    import dataclasses

    from .dataset import read_dataset
    from .policy import bc_train, save_policy

    exp = _experiment(args)
    seed = _seed_from(args)
    log = _log_fn(args.quiet)
    t0 = time.perf_counter()
    demos = read_dataset(args.data)
    tc = exp.train
    if args.open_loop:
        tc = dataclasses.replace(tc, open_loop=True)
    policy = bc_train(demos, exp, seed=seed, train_cfg=tc, log=log)
    save_policy(args.out, policy)
    log(f"saved checkpoint {args.out} (final train loss "
        f"{policy.meta.get('final_train_loss'):.6f})")
    write_manifest(args.out + ".manifest.json", "train-bc", config_hash(exp), seed,
                   [args.out], time.perf_counter() - t0)
    return 0


def cmd_eval_policy(args) -> int:
    from .evalsuite import evaluate_suite, report_to_csv
    from .policy import load_policy, rollout_policy_closed_loop, rollout_policy_open_loop
    from .trajopt import schedule_resets

    exp = _experiment(args)
    seed = _seed_from(args)
    log = _log_fn(args.quiet)
    t0 = time.perf_counter()
    policy = load_policy(args.ckpt)
    scenes = _heldout_scenes(exp)
    resets = tuple(schedule_resets(exp.trajopt.horizon, exp.trajopt.n_reset))

    if policy.open_loop:
        def run(scene, run_seed):
            states, _ = rollout_policy_open_loop(policy, scene, exp, resets)
            return states
    else:
        def run(scene, run_seed):
            states, _ = rollout_policy_closed_loop(policy, scene, exp, resets)
            return states

    report = evaluate_suite({"policy": run}, scenes, [seed], exp, log=log)
    report_to_csv(report, args.report)
    mean, std, n = report.aggregates()["policy"]
    log(f"policy mean performance {mean:.4f} +- {std:.4f} over {n} scenes")
    write_manifest(args.report + ".manifest.json", "eval-policy", config_hash(exp), seed,
                   [args.report], time.perf_counter() - t0)
    return 0


def cmd_eval(args) -> int:
    from .evalsuite import compare_methods, evaluate_suite, report_to_csv
    from .scene import make_goal_cloud
    from .trajopt import (build_problem, optimize_gbto, run_cem,
                          run_heuristic_primitive, schedule_resets)

    exp = _experiment(args)
    seed = _seed_from(args)
    log = _log_fn(args.quiet)
    t0 = time.perf_counter()
    os.makedirs(args.report, exist_ok=True)
    scenes = _heldout_scenes(exp)

    def optimizer_method(variant):
        def run(scene, run_seed):
            goal = make_goal_cloud(scene, exp.loss.n_loss_points, exp.sim)
            base = variant if variant in ("diff-reset", "no-reset", "sep-reset",
                                          "learn-reset") else "diff-reset"
            problem = build_problem(scene, goal, base, exp, seed=run_seed)
            if variant == "cem":
                return run_cem(problem, exp.cem).final_states
            if variant == "heuristic":
                return run_heuristic_primitive(problem, exp.heuristic).final_states
            return optimize_gbto(problem).final_states

        return run

    def zero_method(scene, run_seed):
        from .sim import ResetSchedule, init_state, rollout

        state0 = init_state(exp.sim, scene)
        return rollout(state0, np.zeros((exp.trajopt.horizon, 4)),
                       ResetSchedule((), (), exp.scene.tool_clearance), exp.sim)

    methods = {}
    for name in args.methods.split(","):
        name = name.strip()
        if name == "zero":
            methods[name] = zero_method
        elif name == "policy":
            from .policy import load_policy, rollout_policy_closed_loop

            if not args.ckpt:
                raise DoughrollError("--ckpt required for the policy method")
            policy = load_policy(args.ckpt)
            resets = tuple(schedule_resets(exp.trajopt.horizon, exp.trajopt.n_reset))

            def policy_method(scene, run_seed, _p=policy, _r=resets):
                states, _ = rollout_policy_closed_loop(_p, scene, exp, _r)
                return states

            methods[name] = policy_method
        else:
            methods[name] = optimizer_method(name)

    report = evaluate_suite(methods, scenes, [seed], exp, log=log)
    if args.baseline and args.baseline in methods:
        compare_methods(report, args.baseline, alpha=args.alpha)
    csv_path = os.path.join(args.report, "report.csv")
    report_to_csv(report, csv_path)
    import json

    summary_path = os.path.join(args.report, "summary.json")
    with open(summary_path, "w") as fh:
        json.dump({
            "aggregates": {k: {"mean": m, "std": s, "n": n}
                           for k, (m, s, n) in report.aggregates().items()},
            "significance": report.significance,
        }, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for name, (mean, std, n) in report.aggregates().items():
        log(f"{name}: {mean:.4f} +- {std:.4f} (n={n})")
    write_manifest(os.path.join(args.report, "run.manifest.json"), "eval",
                   config_hash(exp), seed, [csv_path, summary_path],
                   time.perf_counter() - t0)
    return 0


def cmd_sweep(args) -> int:
    import json

    from .evalsuite import sweep_generalization
    from .policy import load_policy

    exp = _experiment(args)
    seed = _seed_from(args)
    log = _log_fn(args.quiet)
    t0 = time.perf_counter()
    policy = load_policy(args.ckpt)
    train_points = None
    if args.train_manifest and os.path.exists(args.train_manifest):
        with open(args.train_manifest) as fh:
            manifest = json.load(fh)
        train_points = [
            (rec["scene"]["target_center"][0] - rec["scene"]["dough_center"][0],
             rec["scene"]["dough_radius"])
            for rec in manifest.get("trajectories", [])
        ]
    sweep_generalization(
        policy, exp,
        (args.radius_min or exp.scene.dough_radius_min,
         args.radius_max or exp.scene.dough_radius_max),
        (args.dist_min or exp.scene.target_distance_min,
         args.dist_max or exp.scene.target_distance_max),
        args.grid_n, args.out, train_points=train_points, log=log,
    )
    write_manifest(os.path.join(args.out, "run.manifest.json"), "sweep",
                   config_hash(exp), seed, [args.out], time.perf_counter() - t0)
    return 0


def cmd_render(args) -> int:
    from .render import render_frames
    from .scene import make_goal_cloud
    from .sim import ResetSchedule, init_state, rollout
    from .trajopt import schedule_resets

    exp = _experiment(args)
    seed = _seed_from(args)
    log = _log_fn(args.quiet)
    t0 = time.perf_counter()
    scene = _scenes(exp)[args.scene_index]
    goal = make_goal_cloud(scene, exp.loss.n_loss_points, exp.sim)
    actions = read_actions(args.actions)
    resets = tuple(schedule_resets(actions.shape[0], args.resets)) if args.resets else ()
    states = rollout(init_state(exp.sim, scene), actions,
                     ResetSchedule(resets, (), exp.scene.tool_clearance), exp.sim)
    paths = render_frames(states, goal, args.out, exp.sim,
                          width=exp.eval.frame_width, height=exp.eval.frame_height)
    log(f"wrote {len(paths)} images to {args.out}")
    write_manifest(os.path.join(args.out, "run.manifest.json"), "render",
                   config_hash(exp), seed, paths[:4] + ["..."], time.perf_counter() - t0)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_gradcheck

    log = _log_fn(args.quiet)
    result = run_gradcheck(log=log)
    print(f"max relative gradient error: {result['max_rel_err']:.3e} "
          f"(tolerance {TOLERANCE})")
    return 0 if result["passed"] else 3


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    log = _log_fn(args.quiet)
    failures = run_selftest(log=log)
    if failures:
        print(f"selftest: {len(failures)} failed checks: {', '.join(failures)}")
        return 3
    print("selftest: all checks passed")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="doughroll",
        description="Differentiable dough rolling: simulation, trajectory "
                    "optimization, imitation learning, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("sim", help="simulator utilities")
    sim_sub = sim.add_subparsers(dest="sim_command", required=True)
    sp = sim_sub.add_parser("rollout", help="run a rollout and dump the trajectory")
    _add_common(sp)
    sp.add_argument("--scene-index", type=int, default=0)
    sp.add_argument("--actions", default=None, help="DRMA action file (default: zeros)")
    sp.add_argument("--resets", type=int, default=0, help="number of scheduled resets")
    sp.add_argument("--dump", required=True, help="output trajectory file")
    sp.set_defaults(fn=cmd_sim_rollout)

    sp = sub.add_parser("optimize", help="trajectory optimization")
    _add_common(sp)
    sp.add_argument("--variant", required=True,
                    choices=["diff-reset", "no-reset", "sep-reset", "learn-reset",
                             "cem", "heuristic"])
    sp.add_argument("--scene-index", type=int, default=0)
    sp.add_argument("--iterations", type=int, default=None)
    sp.add_argument("--lr", type=float, default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_optimize)

    sp = sub.add_parser("gen-demos", help="generate a demonstration dataset")
    _add_common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, default=None)
    sp.set_defaults(fn=cmd_gen_demos)

    sp = sub.add_parser("train-bc", help="behavior-clone a policy from demos")
    _add_common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--open-loop", action="store_true")
    sp.set_defaults(fn=cmd_train_bc)

    sp = sub.add_parser("eval-policy", help="evaluate a checkpoint on held-out scenes")
    _add_common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--report", required=True, help="output CSV path")
    sp.set_defaults(fn=cmd_eval_policy)

    sp = sub.add_parser("eval", help="evaluate methods on held-out scenes")
    _add_common(sp)
    sp.add_argument("--methods", required=True,
                    help="comma list: diff-reset,no-reset,sep-reset,learn-reset,"
                         "cem,heuristic,zero,policy")
    sp.add_argument("--ckpt", default=None)
    sp.add_argument("--baseline", default=None, help="method for paired t-tests")
    sp.add_argument("--alpha", type=float, default=0.013)
    sp.add_argument("--report", required=True, help="output directory")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("sweep", help="policy generalization sweep")
    _add_common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--grid-n", type=int, default=8)
    sp.add_argument("--radius-min", type=float, default=None)
    sp.add_argument("--radius-max", type=float, default=None)
    sp.add_argument("--dist-min", type=float, default=None)
    sp.add_argument("--dist-max", type=float, default=None)
    sp.add_argument("--train-manifest", default=None,
                    help="dataset manifest.json for the training hull overlay")
    sp.set_defaults(fn=cmd_sweep)

    sp = sub.add_parser("render", help="render a trajectory to image frames")
    _add_common(sp)
    sp.add_argument("--scene-index", type=int, default=0)
    sp.add_argument("--actions", required=True)
    sp.add_argument("--resets", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_render)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    _add_common(sp)
    sp.add_argument("--scene", default="tiny", choices=["tiny"])
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("selftest", help="fast micro-suite of correctness checks")
    _add_common(sp)
    sp.set_defaults(fn=cmd_selftest)
    return parser


def cli_main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "iterations", None) is not None:
        args.set.append(f"trajopt.iterations={args.iterations}")
    if getattr(args, "lr", None) is not None:
        args.set.append(f"trajopt.learning_rate={args.lr}")
    if getattr(args, "jobs", 0):
        os.environ.setdefault("XLA_FLAGS",
                              f"--xla_cpu_multi_thread_eigen={args.jobs > 1}")
    try:
        return args.fn(args)
    except DoughrollError as err:
        print(f"{err.error_class}: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"io-error: {err}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
