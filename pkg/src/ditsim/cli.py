"""Command-line harness: run experiments, solve bounds, check inputs."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .experiment import ConfigError, load_config, replay_workload, run_experiment
from .optimal import BatchModel, InfeasibleError, solve_optimal
from .profiles import ProfileError, derive_dop_table, load_profiles
from .workload import WorkloadError, load_workload


def _add_config_arg(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("-c", "--config", required=True, help="experiment config JSON")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ditsim",
        description="Discrete-event simulator for elastic diffusion-transformer serving",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the experiments of a config")
    _add_config_arg(run)
    run.add_argument("-o", "--outdir", required=True, help="report output directory")
    run.add_argument("--seed", type=int, action="append", help="override config seeds")
    run.add_argument(
        "--policy", action="append", help="only run policies with this kind or name"
    )
    run.add_argument("--export-workloads", action="store_true")
    run.add_argument("--export-traces", action="store_true")

    solve = sub.add_parser("solve", help="print the occupancy lower bound per workload")
    _add_config_arg(solve)

    check = sub.add_parser("profile-check", help="validate a profile document")
    check.add_argument("profile", help="profile JSON path")

    replay = sub.add_parser("replay", help="re-run an exported workload file")
    replay.add_argument("workload", help="line-delimited arrival record file")
    _add_config_arg(replay)
    replay.add_argument("-o", "--outdir", required=True)
    replay.add_argument("--policy", action="append")
    replay.add_argument("--export-traces", action="store_true")
    return parser


def _cmd_run(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    if args.seed:
        config.seeds = list(args.seed)
    rows = run_experiment(
        config,
        args.outdir,
        policy_filter=args.policy,
        export_workloads=args.export_workloads,
        export_traces=args.export_traces,
    )
    for row in rows:
        print(
            f"{row['scenario']:>12}  {row['policy']:>18}  seed={row['seed']:>2}  "
            f"avg={row['avg_latency'] or '-':>10}  p99={row['p99_latency'] or '-':>10}  "
            f"cost={row['cost']:>10}"
        )
    print(f"reports written to {Path(args.outdir).resolve()}")
    return 0


def _cmd_solve(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    for spec in config.workloads:
        try:
            solution = solve_optimal(
                config.topology,
                config.profile,
                spec.proportions,
                BatchModel(spec.total_requests),
                steps=spec.denoise_steps,
                include_vae=config.solver_include_vae,
            )
        except InfeasibleError as exc:
            print(f"{spec.label}: infeasible ({exc})")
            continue
        print(f"{spec.label}: minimum occupancy {solution.total_gpu_seconds!r} GPU-seconds")
        for a in solution.assignments:
            print(
                f"    {a.resolution:>6}: gpus[{a.segment_start}:"
                f"{a.segment_start + a.gpu_count}] dop={a.dop} instances={a.instances}"
            )
    return 0


def _cmd_profile_check(args: argparse.Namespace) -> int:
    table = load_profiles(args.profile)
    dops = derive_dop_table(table)
    print(f"profile OK: {len(table.resolutions)} resolutions, "
          f"dop candidates {list(table.dop_candidates)}")
    for res in table.resolutions:
        profiled = table.profiled_dops(res.name)
        print(
            f"    {res.name:>6}: optimal dop {dops.dit_dop(res.name)}, "
            f"profiled dops {list(profiled)}, vae {table.vae(res.name)!r}s"
        )
    return 0


def _cmd_replay(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    records = load_workload(args.workload)
    scenario = Path(args.workload).stem
    rows = replay_workload(
        config,
        records,
        scenario=scenario,
        outdir=args.outdir,
        policy_filter=args.policy,
        export_traces=args.export_traces,
    )
    for row in rows:
        print(
            f"{row['scenario']:>16}  {row['policy']:>18}  "
            f"avg={row['avg_latency'] or '-':>10}  p99={row['p99_latency'] or '-':>10}  "
            f"cost={row['cost']:>10}"
        )
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    commands = {
        "run": _cmd_run,
        "solve": _cmd_solve,
        "profile-check": _cmd_profile_check,
        "replay": _cmd_replay,
    }
    try:
        return commands[args.command](args)
    except (ConfigError, ProfileError, WorkloadError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
