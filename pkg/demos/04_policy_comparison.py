"""Policy comparison across load intensities.

Runs the greedy scheduler against static-DoP and cluster-isolation
baselines on the same seeded workloads, then prints per-scenario metrics
normalized by the worst system (lower is better).
"""

from ditsim import (
    ClusterPolicy,
    ClusterTopology,
    GreedyPolicy,
    Simulation,
    StaticDopPolicy,
    WorkloadSpec,
    build_dpci_plan,
    build_spci_plan,
    compute_metrics,
    default_profile,
    derive_dop_table,
    generate,
    normalize,
)

profile = default_profile()
dops = derive_dop_table(profile)
topo = ClusterTopology(1, 8)
mix = {"144p": 1 / 3, "240p": 1 / 3, "360p": 1 / 3}
SEED = 0
REQUESTS = 48


def policies():
    return {
        "greedy": GreedyPolicy(dops),
        "sdop1": StaticDopPolicy(1),
        "sdop2": StaticDopPolicy(2),
        "sdop4": StaticDopPolicy(4),
        "spci2": ClusterPolicy(build_spci_plan(topo, mix, 2), False, "spci2"),
        "dpci": ClusterPolicy(build_dpci_plan(topo, list(mix), dops), False, "dpci"),
        "dp": ClusterPolicy(build_dpci_plan(topo, list(mix), dops), True, "dp"),
    }


def workload(rate):
    if rate is None:
        return generate(WorkloadSpec(proportions=mix, total_requests=REQUESTS,
                                     burst=True, seed=SEED))
    return generate(WorkloadSpec(proportions=mix, total_requests=REQUESTS,
                                 arrival_rate=rate, seed=SEED))


for rate in (0.25, 0.5, 1.0, None):
    label = "burst" if rate is None else f"rate {rate}"
    records = workload(rate)
    reports = {}
    for name, policy in policies().items():
        result = Simulation(topo, profile, dops, records, policy).run()
        reports[name] = compute_metrics(result)
    table = normalize(reports)
    print(f"\n=== {label} (normalized, 1.0 = worst system) ===")
    print(f"{'policy':>8} {'avg':>8} {'p99':>8} {'cost':>8}")
    for name, row in table.items():
        print(f"{name:>8} {row['avg_latency']:8.3f} {row['p99_latency']:8.3f} "
              f"{row['monetary_cost']:8.3f}")
