"""Lifecycle of a starved request under the greedy scheduler.

A high-resolution request arrives while the cluster is busy, starts on
fewer GPUs than its optimal degree ("hungry"), accrues starvation time,
and is promoted at a step boundary once neighbors free up.  At the end of
the denoising phase it scales down to a single master GPU for the decoder.
"""

from ditsim import (
    ArrivalRecord,
    ClusterTopology,
    GreedyPolicy,
    Simulation,
    default_profile,
    derive_dop_table,
)

profile = default_profile()
dops = derive_dop_table(profile)
topo = ClusterTopology(1, 8)

workload = [
    ArrivalRecord(0, 0.0, "360p", 30),   # grabs {0,1,2,3} at its optimum
    ArrivalRecord(1, 0.0, "240p", 10),   # grabs {4,5}, finishes early
    ArrivalRecord(2, 0.0, "360p", 30),   # only {6,7} left: starts hungry
]

sim = Simulation(topo, profile, dops, workload, GreedyPolicy(dops))
result = sim.run()

print("Trace of the hungry request (id 2):")
for event in result.trace:
    if event.request_id != 2:
        continue
    gpus = ",".join(map(str, event.gpu_ids))
    print(f"  t={event.time:9.4f}  {event.kind:<14} dop={event.dop}  gpus={{{gpus}}}")

print("\nWidth history per request (time, gpu count):")
for record in result.requests:
    history = "  ".join(f"({t:.4f}, {w})" for t, w in record.dop_history)
    print(f"  request {record.request_id} ({record.resolution}): {history}")

print("\nLatencies:", {r.request_id: round(r.latency, 4) for r in result.requests})
print("Cumulative occupancy:", result.cumulative_occupancy, "GPU-seconds")

# The promotion entry in the trace shows the step-boundary hand-off: the
# request keeps computing on 2 GPUs until the boundary after {4,5} frees,
# then continues on all four at the faster step time (plus the broadcast
# and scale-up overhead of one millisecond each).
