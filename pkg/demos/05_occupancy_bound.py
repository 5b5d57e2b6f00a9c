"""Theoretical minimum occupancy: queue formulas and the DP solver.

First the single-server mean time in system for deterministic service, and
the multi-instance approximation.  Then the dynamic program that splits the
cluster among resolution types to minimize cumulative GPU busy time, with
simulated policies compared against the bound.
"""

from ditsim import (
    BatchModel,
    ClusterTopology,
    GreedyPolicy,
    Simulation,
    StaticDopPolicy,
    WorkloadSpec,
    compute_metrics,
    default_profile,
    derive_dop_table,
    generate,
    occupy_md1,
    occupy_mdc,
    solve_optimal,
)

print("M/D/1 mean time in system (service 1s) as utilization grows:")
for rho in (0.1, 0.3, 0.5, 0.7, 0.9):
    print(f"  rho={rho:.1f}  W={occupy_md1(rho, 1.0):8.4f}s")

print("\nMulti-instance approximation (service 1s, offered load 1.6):")
for servers in (2, 3, 4, 8):
    w = occupy_mdc(1.6, 1.0, servers)
    print(f"  {servers} instances  W={w:8.4f}s")

profile = default_profile()
dops = derive_dop_table(profile)
topo = ClusterTopology(1, 8)
mix = {"144p": 1 / 3, "240p": 1 / 3, "360p": 1 / 3}
PENDING = 48

solution = solve_optimal(topo, profile, mix, BatchModel(PENDING), steps=30)
print(f"\nMinimum occupancy for {PENDING} pending requests on 8 GPUs: "
      f"{solution.total_gpu_seconds} GPU-seconds")
for a in solution.assignments:
    print(f"  {a.resolution:>6}: gpus[{a.segment_start}:{a.segment_start + a.gpu_count}]"
          f" dop={a.dop} instances={a.instances} per-gpu={a.occupancy_per_gpu:.3f}s")

records = generate(WorkloadSpec(proportions=mix, total_requests=PENDING,
                                burst=True, seed=0))
print("\nSimulated cost over the bound:")
for policy in (GreedyPolicy(dops), StaticDopPolicy(1), StaticDopPolicy(4)):
    report = compute_metrics(Simulation(topo, profile, dops, records, policy).run())
    ratio = report.monetary_cost / solution.total_gpu_seconds
    print(f"  {policy.name:>8}: {report.monetary_cost:9.3f} GPU-seconds "
          f"({ratio:.3f}x the bound)")
