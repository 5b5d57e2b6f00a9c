"""Buddy-system GPU allocation on one 8-GPU node.

Blocks are powers of two, size-aligned, split on demand and coalesced on
release.  Groups larger than one GPU never cross a node boundary.
"""

from ditsim import ClusterTopology, GpuPool, bandwidth_aware_partition

topo = ClusterTopology(nodes=1, gpus_per_node=8)
pool = GpuPool(topo)


def show(label):
    blocks = pool.snapshot()["free_blocks"]
    pretty = " ".join(f"[{b['start']}..{b['start'] + (1 << b['order']) - 1}]" for b in blocks)
    print(f"{label:<44} free: {pretty or '(none)'}")


show("fresh pool")

pair = pool.allocate(2)
show(f"allocate(2) -> {pair.gpu_ids}")

quad = pool.allocate(4)
show(f"allocate(4) -> {quad.gpu_ids}")

print(f"allocate(8) with the pool fragmented -> {pool.allocate(8)}")

pool.release(pair)
show("release the pair: buddies coalesce")

# A running request holding {4..7} finishes its compute phase; the decoder
# needs one GPU, so the three highest ids return to the pool.
master, released = pool.release_keep_lowest(quad, keep=1)
show(f"scale down {quad.gpu_ids} to master {master.gpu_ids}")

# Best-effort growth: the master can only be promoted through aligned
# superblocks, so it reaches {4,5} and then {4..7}.
grown = pool.try_best_alloc(4, master)
show(f"try_best_alloc(4, {master.gpu_ids}) -> {grown.gpu_ids}")
pool.release(grown)
show("release everything")

# Instance counting for a contiguous GPU range: a 7-GPU span hosts seven
# single-GPU engines but only one 4-GPU engine.
for dop in (1, 2, 4):
    count = bandwidth_aware_partition(topo, start=1, length=7, dop=dop)
    print(f"7-GPU span, dop {dop}: {count} instance(s)")

# Across nodes the high-bandwidth domain caps what a span can host.
wide = ClusterTopology(nodes=2, gpus_per_node=4)
print("2+2 GPUs straddling two nodes, dop 4:",
      bandwidth_aware_partition(wide, start=2, length=4, dop=4), "instances")
