import numpy as np
import pytest

from ditsim import (
    AllocationError,
    AllocationHandle,
    Block,
    ClusterTopology,
    GpuPool,
    bandwidth_aware_partition,
)


def fresh_pool(nodes=1, per_node=8):
    return GpuPool(ClusterTopology(nodes, per_node))


class TestAllocate:
    def test_empty_pool_lowest_address_first(self):
        pool = fresh_pool()
        handle = pool.allocate(2)
        assert handle.gpu_ids == (0, 1)

    def test_alignment_blocks_misaligned_single(self):
        pool = fresh_pool(1, 4)
        keep = pool.allocate(4)
        _, _ = pool.release_keep_lowest(keep, 1)  # only {0} busy now
        a = pool.allocate(2)  # {2,3} is the only aligned pair
        assert a.gpu_ids == (2, 3)
        b = pool.allocate(2)  # {1} alone cannot form an order-1 block
        assert b is None

    def test_split_of_full_block(self):
        pool = fresh_pool()
        h8 = pool.allocate(8)
        pool.release(h8)
        a = pool.allocate(4)
        b = pool.allocate(4)
        assert a.gpu_ids == (0, 1, 2, 3)
        assert b.gpu_ids == (4, 5, 6, 7)

    def test_failure_leaves_pool_identical(self):
        pool = fresh_pool(1, 4)
        pool.allocate(4)
        before = pool.snapshot()
        assert pool.allocate(2) is None
        assert pool.snapshot() == before

    def test_single_misaligned_survivor_cannot_host_pair(self):
        pool = fresh_pool()
        pool.allocate(2)              # {0,1}
        single = pool.allocate(1)     # {2}, leaving {3} free
        assert single.gpu_ids == (2,)
        pool.allocate(4)              # {4..7}
        assert [g for g in range(8) if pool.is_free(g)] == [3]
        assert pool.allocate(2) is None

    def test_count_above_node_size_fails(self):
        pool = fresh_pool(2, 4)
        assert pool.allocate(8) is None

    def test_non_power_of_two_rejected(self):
        pool = fresh_pool()
        with pytest.raises(AllocationError):
            pool.allocate(3)


class TestRelease:
    def test_buddy_coalesce(self):
        pool = fresh_pool(1, 4)
        a = pool.allocate(2)  # {0,1}
        b = pool.allocate(2)  # {2,3}
        pool.release(b)
        pool.release(a)  # both free: coalesce to one order-2 block
        snap = pool.snapshot()
        assert snap["free_blocks"] == [{"node": 0, "start": 0, "order": 2}]

    def test_busy_buddy_blocks_merge(self):
        pool = fresh_pool(1, 4)
        a = pool.allocate(2)
        pool.allocate(2)  # keeps {2,3} busy
        pool.release(a)
        snap = pool.snapshot()
        assert snap["free_blocks"] == [{"node": 0, "start": 0, "order": 1}]

    def test_double_release_is_error(self):
        pool = fresh_pool()
        handle = pool.allocate(2)
        pool.release(handle)
        with pytest.raises(AllocationError):
            pool.release(handle)

    def test_unknown_handle_is_error(self):
        pool = fresh_pool()
        with pytest.raises(AllocationError):
            pool.release(AllocationHandle((Block(4, 1),)))

    def test_release_allocate_identity(self):
        pool = fresh_pool(2, 4)
        pool.allocate(2)
        before = pool.snapshot()
        handle = pool.allocate(4)
        pool.release(handle)
        assert pool.snapshot() == before


class TestKeepLowest:
    def test_retains_lowest_master(self):
        pool = fresh_pool()
        handle = pool.allocate(4)
        retained, released = pool.release_keep_lowest(handle, 1)
        assert retained.gpu_ids == (0,)
        assert released == (1, 2, 3)

    def test_single_gpu_noop(self):
        pool = fresh_pool()
        handle = pool.allocate(1)
        retained, released = pool.release_keep_lowest(handle, 1)
        assert retained is handle and released == ()

    def test_multi_block_handle(self):
        pool = fresh_pool()
        pool.allocate(2)  # {0,1} busy
        grp = pool.allocate_group(4)  # composed within the node
        retained, released = pool.release_keep_lowest(grp, 1)
        assert retained.gpu_ids == (grp.gpu_ids[0],)
        assert released == grp.gpu_ids[1:]


class TestBandwidthAwarePartition:
    def test_single_node_seven_gpus(self):
        topo = ClusterTopology(1, 8)
        assert bandwidth_aware_partition(topo, 1, 7, 1) == 7
        assert bandwidth_aware_partition(topo, 1, 7, 4) == 1

    def test_cross_node_split(self):
        topo = ClusterTopology(2, 4)
        # [2, 6) overlaps two nodes with 2 GPUs each: no room for a 4-group.
        assert bandwidth_aware_partition(topo, 2, 4, 4) == 0
        assert bandwidth_aware_partition(topo, 2, 4, 2) == 2
        assert bandwidth_aware_partition(topo, 2, 4, 1) == 4

    def test_total_function_zero_length(self):
        topo = ClusterTopology(1, 8)
        assert bandwidth_aware_partition(topo, 0, 0, 1) == 0


class TestTryBestAlloc:
    def test_descending_fallback(self):
        pool = fresh_pool()
        pool.allocate(4)  # {0..3}
        pool.allocate(2)  # {4,5}
        handle = pool.try_best_alloc(4, None)  # only {6,7} remains
        assert handle.gpu_ids == (6, 7)

    def test_buddy_completion(self):
        pool = fresh_pool()
        held = pool.allocate(2)  # {0,1}
        grown = pool.try_best_alloc(4, held)
        assert grown.gpu_ids == (0, 1, 2, 3)

    def test_no_aligned_completion_returns_held(self):
        # Holding {0,1} with only {4,5} free: the sole aligned completion of
        # {0,1} is {2,3}, so nothing is gained.
        pool = fresh_pool()
        held = pool.allocate(2)          # {0,1}
        pool.allocate(2)                 # {2,3}
        free_later = pool.allocate(2)    # {4,5}
        pool.allocate(2)                 # {6,7}
        pool.release(free_later)
        grown = pool.try_best_alloc(4, held)
        assert grown is held

    def test_partially_busy_completion_returns_held(self):
        pool = fresh_pool()
        held = pool.allocate(2)          # {0,1}
        pool.allocate(4)                 # {4..7}
        two = pool.allocate(2)           # {2,3}
        pool.release_keep_lowest(two, 1)  # {2} busy, {3} free
        grown = pool.try_best_alloc(4, held)
        assert grown is held

    def test_exhausted_pool_returns_none(self):
        pool = fresh_pool(1, 2)
        pool.allocate(2)
        assert pool.try_best_alloc(2, None) is None

    def test_single_gpu_promotes_to_full_block(self):
        pool = fresh_pool(1, 4)
        held = pool.allocate(1)
        grown = pool.try_best_alloc(4, held)
        assert grown.gpu_ids == (0, 1, 2, 3)


class TestAllocateGroup:
    def test_composes_fragmented_singles(self):
        pool = fresh_pool(1, 4)
        a = pool.allocate(2)
        b = pool.allocate(2)
        master_a, _ = pool.release_keep_lowest(a, 1)  # {0} busy, {1} free
        master_b, _ = pool.release_keep_lowest(b, 1)  # {2} busy, {3} free
        grp = pool.allocate_group(2)
        assert grp.gpu_ids == (1, 3)

    def test_stays_within_one_node(self):
        pool = fresh_pool(2, 2)
        pool.allocate(1)  # {0}
        pool.allocate(1)  # {1}: node 0 exhausted
        grp = pool.allocate_group(2)
        assert grp.gpu_ids == (2, 3)
        assert pool.allocate_group(2) is None  # nothing left

    def test_prefers_single_block_when_available(self):
        pool = fresh_pool()
        grp = pool.allocate_group(4)
        assert grp.gpu_ids == (0, 1, 2, 3)
        assert len(grp.blocks) == 1


class TestRetract:
    def test_retract_releases_siblings(self):
        pool = fresh_pool()
        held = pool.allocate(2)          # {0,1}
        grown = pool.try_best_alloc(8, held)
        assert grown.count == 8
        released = pool.retract_to(grown, held)
        assert sorted(released) == [2, 3, 4, 5, 6, 7]
        assert pool.free_gpu_count == 6
        pool.release(held)
        assert pool.free_gpu_count == 8


def random_ops_fuzz(topology: ClusterTopology, ops: int, seed: int) -> None:
    """Randomized allocate/release churn preserving pool invariants."""
    rng = np.random.default_rng(seed)
    pool = GpuPool(topology)
    live: list[AllocationHandle] = []
    total = topology.total_gpus
    for _ in range(ops):
        if live and rng.random() < 0.45:
            handle = live.pop(rng.integers(len(live)))
            if handle.count > 1 and rng.random() < 0.3:
                keep = int(2 ** rng.integers(0, handle.count.bit_length() - 1))
                retained, _ = pool.release_keep_lowest(handle, keep)
                live.append(retained)
            else:
                pool.release(handle)
        else:
            count = int(2 ** rng.integers(0, topology.gpus_per_node.bit_length()))
            handle = (
                pool.allocate_group(count)
                if rng.random() < 0.3
                else pool.allocate(count)
            )
            if handle is not None:
                live.append(handle)
        # Conservation: free plus live GPUs cover the pool exactly.
        live_ids = [gpu for h in live for gpu in h.gpu_ids]
        assert len(live_ids) == len(set(live_ids)), "handle overlap"
        assert pool.free_gpu_count + len(live_ids) == total
        # Alignment: every block is size-aligned inside its node.
        for handle in live:
            for block in handle.blocks:
                base = topology.node_base(topology.node_of(block.start))
                assert (block.start - base) % block.size == 0
        # Bitmap agrees with handle bookkeeping.
        busy = set(live_ids)
        for gpu in range(total):
            assert pool.is_free(gpu) == (gpu not in busy)
    for handle in live:
        pool.release(handle)
    # Full coalescing: one maximal block per node.
    snap = pool.snapshot()
    assert snap["free_blocks"] == [
        {"node": node, "start": topology.node_base(node), "order": pool.max_order}
        for node in range(topology.nodes)
    ]


@pytest.mark.parametrize("nodes,per_node", [(1, 8), (2, 4), (4, 8)])
def test_randomized_invariants(nodes, per_node):
    random_ops_fuzz(ClusterTopology(nodes, per_node), ops=800, seed=nodes * 100 + per_node)


def test_snapshot_is_json_serializable():
    import json

    pool = fresh_pool(2, 4)
    pool.allocate(2)
    json.dumps(pool.snapshot())
