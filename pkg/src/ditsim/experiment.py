"""Experiment harness: config parsing, scenario runs, report emission.

An experiment document names a topology, a profile, one or more workloads,
a list of policies, and the seeds to sweep.  Every (workload, policy, seed)
combination runs as an independent simulation; reports are machine-readable
CSV files whose bytes are identical across repeated runs of the same config.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from .allocator import ClusterTopology
from .engine import OverheadModel, Simulation, SimulationError
from .metrics import MetricsReport, compute_metrics, normalize
from .optimal import BatchModel, InfeasibleError, solve_optimal
from .policies import (
    ClusterPolicy,
    GreedyPolicy,
    SchedulingPolicy,
    StaticDopPolicy,
    build_dpci_plan,
    build_spci_plan,
)
from .profiles import (
    DEFAULT_GAIN_THRESHOLD,
    DopTable,
    ProfileTable,
    default_profile,
    derive_dop_table,
    load_profiles,
)
from .workload import (
    ArrivalRecord,
    WorkloadSpec,
    empirical_proportions,
    generate,
    save_workload,
)

EXPERIMENT_SCHEMA = "dit-experiment/1"


class ConfigError(ValueError):
    """Invalid experiment configuration document."""


@dataclass
class ExperimentConfig:
    topology: ClusterTopology
    profile: ProfileTable
    workloads: list[WorkloadSpec]
    policies: list[dict]
    seeds: list[int]
    overheads: OverheadModel = OverheadModel()
    solver_enabled: bool = True
    solver_include_vae: bool = True
    gain_threshold: float = DEFAULT_GAIN_THRESHOLD
    vae_dop: int = 1
    dop_table: DopTable = field(init=False)

    def __post_init__(self) -> None:
        if not self.workloads:
            raise ConfigError("experiment needs at least one workload")
        if not self.policies:
            raise ConfigError("experiment needs at least one policy")
        if not self.seeds:
            raise ConfigError("experiment needs at least one seed")
        self.dop_table = derive_dop_table(
            self.profile, self.gain_threshold, self.vae_dop
        )
        for spec in self.workloads:
            for resolution in spec.proportions:
                if not self.profile.has_resolution(resolution):
                    raise ConfigError(
                        f"workload {spec.label!r} uses unprofiled resolution "
                        f"{resolution!r}"
                    )


def _load_profile_ref(ref: Any, base_dir: Path) -> ProfileTable:
    if ref == "default" or ref is None:
        return default_profile()
    if isinstance(ref, str):
        path = Path(ref)
        if not path.is_absolute():
            path = base_dir / path
        return load_profiles(path)
    if isinstance(ref, Mapping):
        return load_profiles(ref)
    raise ConfigError(f"unsupported profile reference {ref!r}")


def load_config(source: str | Path | Mapping[str, Any]) -> ExperimentConfig:
    """Parse and validate an experiment document (path or parsed mapping)."""
    base_dir = Path(".")
    if isinstance(source, (str, Path)):
        base_dir = Path(source).resolve().parent
        try:
            with open(source, "r", encoding="utf-8") as handle:
                document = json.load(handle)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
    else:
        document = source
    if document.get("schema") != EXPERIMENT_SCHEMA:
        raise ConfigError(
            f"unsupported config schema {document.get('schema')!r}; "
            f"expected {EXPERIMENT_SCHEMA!r}"
        )
    try:
        topo_raw = document["topology"]
        topology = ClusterTopology(
            nodes=int(topo_raw["nodes"]),
            gpus_per_node=int(topo_raw["gpus_per_node"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad topology section: {exc}") from exc
    profile = _load_profile_ref(document.get("profile", "default"), base_dir)
    over_raw = document.get("overheads", {})
    overheads = OverheadModel(
        scale_up_seconds=float(over_raw.get("scale_up_seconds", 0.001)),
        broadcast_seconds=float(over_raw.get("broadcast_seconds", 0.001)),
    )
    workloads = []
    for raw in document.get("workloads", []):
        try:
            workloads.append(
                WorkloadSpec(
                    proportions=dict(raw["proportions"]),
                    total_requests=int(raw["total_requests"]),
                    arrival_rate=raw.get("arrival_rate"),
                    burst=bool(raw.get("burst", False)),
                    denoise_steps=int(raw.get("denoise_steps", 30)),
                    frames=int(raw.get("frames", 51)),
                    name=str(raw.get("name", "")),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad workload entry {raw!r}: {exc}") from exc
    policies = list(document.get("policies", []))
    for raw in policies:
        if not isinstance(raw, Mapping) or "kind" not in raw:
            raise ConfigError(f"policy entry {raw!r} needs a 'kind'")
    seeds = [int(s) for s in document.get("seeds", [0])]
    solver_raw = document.get("solver", {})
    return ExperimentConfig(
        topology=topology,
        profile=profile,
        workloads=workloads,
        policies=[dict(p) for p in policies],
        seeds=seeds,
        overheads=overheads,
        solver_enabled=bool(solver_raw.get("enabled", True)),
        solver_include_vae=bool(solver_raw.get("include_vae", True)),
        gain_threshold=float(document.get("gain_threshold", DEFAULT_GAIN_THRESHOLD)),
        vae_dop=int(document.get("vae_dop", 1)),
    )


def policy_label(raw: Mapping[str, Any]) -> str:
    """The report name a policy entry will get, without building it."""
    if raw.get("name"):
        return str(raw["name"])
    kind = raw["kind"]
    if kind == "greedy":
        return "greedy" if raw.get("promotion", True) else "greedy-nopromo"
    if kind == "sdop":
        suffix = "-decoupled" if raw.get("decouple_vae", False) else ""
        return f"sdop{int(raw['dop'])}{suffix}"
    if kind == "spci":
        return f"spci{int(raw.get('dop', 2))}"
    return str(kind)


def make_policy(
    raw: Mapping[str, Any],
    config: ExperimentConfig,
    workload_proportions: Mapping[str, float],
) -> SchedulingPolicy:
    """Instantiate a policy entry for one workload."""
    kind = raw["kind"]
    name = raw.get("name", "")
    if kind == "greedy":
        return GreedyPolicy(
            config.dop_table, promotion=bool(raw.get("promotion", True)), name=name
        )
    if kind == "sdop":
        return StaticDopPolicy(
            dop=int(raw["dop"]),
            decouple_vae=bool(raw.get("decouple_vae", False)),
            vae_dop=config.vae_dop,
            name=name,
        )
    if kind == "spci":
        dop = int(raw.get("dop", 2))
        plan = build_spci_plan(config.topology, dict(workload_proportions), dop)
        return ClusterPolicy(plan, allow_downgrade=False, name=name or f"spci{dop}")
    if kind in ("dpci", "dp"):
        plan = build_dpci_plan(
            config.topology, list(workload_proportions), config.dop_table
        )
        return ClusterPolicy(
            plan, allow_downgrade=(kind == "dp"), name=name or kind
        )
    raise ConfigError(f"unknown policy kind {kind!r}")


# ----------------------------------------------------------------------
# Report writing


def _fmt(value: float) -> str:
    return repr(float(value))


def _dop_history_text(history: Sequence[tuple[float, int]]) -> str:
    return ";".join(f"{_fmt(t)}:{w}" for t, w in history)


def write_request_table(report: MetricsReport, path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(
            [
                "request_id",
                "resolution",
                "arrival",
                "start",
                "finish",
                "latency",
                "dop_history",
                "gpu_seconds",
            ]
        )
        for rec in report.per_request:
            writer.writerow(
                [
                    rec.request_id,
                    rec.resolution,
                    _fmt(rec.arrival),
                    _fmt(rec.start),
                    _fmt(rec.finish),
                    _fmt(rec.latency),
                    _dop_history_text(rec.dop_history),
                    _fmt(rec.gpu_seconds),
                ]
            )


SUMMARY_COLUMNS = [
    "scenario",
    "policy",
    "seed",
    "avg_latency",
    "p99_latency",
    "cost",
    "cost_over_optimum",
]


def write_summary(rows: Sequence[dict], path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.DictWriter(handle, SUMMARY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({key: row.get(key, "") for key in SUMMARY_COLUMNS})


def write_normalized(groups: Sequence[dict], path: Path) -> None:
    columns = ["scenario", "seed", "policy", "avg_latency", "p99_latency", "cost"]
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.DictWriter(handle, columns, lineterminator="\n")
        writer.writeheader()
        for row in groups:
            writer.writerow(row)


# ----------------------------------------------------------------------
# Experiment execution


def _solve_bound(
    config: ExperimentConfig,
    proportions: Mapping[str, float],
    total_requests: int,
    steps: int,
) -> float | None:
    if not config.solver_enabled:
        return None
    try:
        solution = solve_optimal(
            config.topology,
            config.profile,
            proportions,
            BatchModel(total_requests),
            steps=steps,
            include_vae=config.solver_include_vae,
        )
    except InfeasibleError:
        return None
    return solution.total_gpu_seconds


def _run_scenario(
    config: ExperimentConfig,
    scenario: str,
    seed_label: str,
    records: list[ArrivalRecord],
    proportions: Mapping[str, float],
    outdir: Path,
    policy_filter: Sequence[str] | None,
    export_traces: bool,
) -> tuple[list[dict], dict[str, MetricsReport]]:
    rows: list[dict] = []
    reports: dict[str, MetricsReport] = {}
    steps = records[0].denoise_steps
    bound = _solve_bound(config, proportions, len(records), steps)
    for raw in config.policies:
        if policy_filter and not (
            raw["kind"] in policy_filter or policy_label(raw) in policy_filter
        ):
            continue
        policy = make_policy(raw, config, proportions)
        sim = Simulation(
            topology=config.topology,
            profile=config.profile,
            dop_table=config.dop_table,
            workload=records,
            policy=policy,
            overheads=config.overheads,
        )
        result = sim.run()
        report = compute_metrics(result)
        reports[policy.name] = report
        write_request_table(
            report, outdir / f"requests__{scenario}__{policy.name}__s{seed_label}.csv"
        )
        if export_traces:
            result.write_trace(
                outdir / f"trace__{scenario}__{policy.name}__s{seed_label}.jsonl"
            )
        rows.append(
            {
                "scenario": scenario,
                "policy": policy.name,
                "seed": seed_label,
                "avg_latency": _fmt(report.avg_latency),
                "p99_latency": _fmt(report.p99_latency),
                "cost": _fmt(report.monetary_cost),
                "cost_over_optimum": (
                    _fmt(report.monetary_cost / bound) if bound else ""
                ),
            }
        )
    if bound is not None:
        rows.append(
            {
                "scenario": scenario,
                "policy": "optimal-bound",
                "seed": "-",
                "avg_latency": "",
                "p99_latency": "",
                "cost": _fmt(bound),
                "cost_over_optimum": _fmt(1.0),
            }
        )
    return rows, reports


def _normalized_rows(
    scenario: str, seed_label: str, reports: Mapping[str, MetricsReport]
) -> list[dict]:
    if len(reports) < 2:
        return []
    rows = []
    for policy, values in normalize(reports).items():
        rows.append(
            {
                "scenario": scenario,
                "seed": seed_label,
                "policy": policy,
                "avg_latency": _fmt(values["avg_latency"]),
                "p99_latency": _fmt(values["p99_latency"]),
                "cost": _fmt(values["monetary_cost"]),
            }
        )
    return rows


def run_experiment(
    config: ExperimentConfig,
    outdir: str | Path,
    policy_filter: Sequence[str] | None = None,
    export_workloads: bool = False,
    export_traces: bool = False,
) -> list[dict]:
    """Run every (workload, policy, seed) combination and write reports.

    Returns the summary rows that were written to ``summary.csv``.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    summary: list[dict] = []
    normalized: list[dict] = []
    for spec in config.workloads:
        for seed in config.seeds:
            seeded = WorkloadSpec(
                proportions=spec.proportions,
                total_requests=spec.total_requests,
                arrival_rate=spec.arrival_rate,
                burst=spec.burst,
                seed=seed,
                denoise_steps=spec.denoise_steps,
                frames=spec.frames,
                name=spec.name,
            )
            records = generate(seeded)
            if export_workloads:
                save_workload(
                    records, outdir / f"workload__{spec.label}__s{seed}.jsonl"
                )
            rows, reports = _run_scenario(
                config,
                scenario=spec.label,
                seed_label=str(seed),
                records=records,
                proportions=spec.proportions,
                outdir=outdir,
                policy_filter=policy_filter,
                export_traces=export_traces,
            )
            summary.extend(rows)
            normalized.extend(_normalized_rows(spec.label, str(seed), reports))
    write_summary(summary, outdir / "summary.csv")
    write_normalized(normalized, outdir / "summary_normalized.csv")
    return summary


def replay_workload(
    config: ExperimentConfig,
    records: list[ArrivalRecord],
    scenario: str,
    outdir: str | Path,
    policy_filter: Sequence[str] | None = None,
    export_traces: bool = False,
) -> list[dict]:
    """Re-run an exported arrival stream under the config's policies."""
    if not records:
        raise SimulationError("replay needs at least one arrival record")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    proportions = empirical_proportions(records)
    rows, reports = _run_scenario(
        config,
        scenario=scenario,
        seed_label="-",
        records=records,
        proportions=proportions,
        outdir=outdir,
        policy_filter=policy_filter,
        export_traces=export_traces,
    )
    write_summary(rows, outdir / "summary.csv")
    write_normalized(_normalized_rows(scenario, "-", reports), outdir / "summary_normalized.csv")
    return rows
