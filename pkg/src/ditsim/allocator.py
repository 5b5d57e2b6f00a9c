"""Buddy-system GPU allocator over a node-aware cluster topology.

GPUs are numbered globally; node ``k`` of a topology with ``n`` GPUs per
node owns ids ``[k*n, (k+1)*n)``.  Within each node free GPUs are organized
as power-of-two, size-aligned buddy blocks that split on allocation and
coalesce on release.  Sequence-parallel groups need uniform high-bandwidth
interconnect, so a group larger than one GPU never crosses a node boundary.

Handles returned by the pool may consist of several aligned blocks (a gang
of GPUs inside one node); plain :meth:`GpuPool.allocate` always returns a
single aligned block.  Block selection is lowest-address-first so that the
low-id master convention of the engine stays deterministic.
"""

from __future__ import annotations

from bisect import insort
from dataclasses import dataclass
from typing import Iterable, Sequence


class AllocationError(RuntimeError):
    """Misuse of the pool: double release, foreign handle, bad block size."""


@dataclass(frozen=True)
class ClusterTopology:
    """``nodes`` machines with ``gpus_per_node`` GPUs each (a power of two).

    The node boundary is the high-bandwidth domain: parallel groups with
    more than one GPU must stay inside a single node.
    """

    nodes: int
    gpus_per_node: int

    def __post_init__(self) -> None:
        if self.nodes < 1:
            raise ValueError("topology needs at least one node")
        n = self.gpus_per_node
        if n < 1 or (n & (n - 1)) != 0:
            raise ValueError("gpus_per_node must be a power of two")

    @property
    def total_gpus(self) -> int:
        return self.nodes * self.gpus_per_node

    def node_of(self, gpu_id: int) -> int:
        return gpu_id // self.gpus_per_node

    def node_base(self, node: int) -> int:
        return node * self.gpus_per_node


@dataclass(frozen=True)
class Block:
    """An aligned buddy block: ``size = 2**order`` GPUs starting at ``start``."""

    start: int
    order: int

    @property
    def size(self) -> int:
        return 1 << self.order

    @property
    def gpu_ids(self) -> tuple[int, ...]:
        return tuple(range(self.start, self.start + self.size))


@dataclass(frozen=True)
class AllocationHandle:
    """An allocated GPU set: one or more aligned blocks, sorted by address.

    Multi-GPU handles always live inside a single node.
    """

    blocks: tuple[Block, ...]

    @property
    def gpu_ids(self) -> tuple[int, ...]:
        ids: list[int] = []
        for block in self.blocks:
            ids.extend(block.gpu_ids)
        return tuple(ids)

    @property
    def count(self) -> int:
        return sum(block.size for block in self.blocks)

    def __len__(self) -> int:
        return self.count


def _order_of(count: int) -> int:
    if count < 1 or (count & (count - 1)) != 0:
        raise AllocationError(f"block size must be a power of two, got {count}")
    return count.bit_length() - 1


def bandwidth_aware_partition(
    topology: ClusterTopology, start: int, length: int, dop: int
) -> int:
    """Number of DoP-``dop`` groups a contiguous GPU range can host.

    Groups cannot cross node boundaries, so the range contributes
    ``floor(overlap / dop)`` per node.  Zero signals that the (range, dop)
    combination is infeasible.
    """
    if length < 1:
        return 0
    end = start + length
    total = 0
    first = topology.node_of(start)
    last = topology.node_of(end - 1)
    for node in range(first, last + 1):
        lo = max(start, topology.node_base(node))
        hi = min(end, topology.node_base(node) + topology.gpus_per_node)
        total += (hi - lo) // dop
    return total


class GpuPool:
    """Mutable buddy allocator state for one simulation.

    A pool is owned by exactly one simulation; all mutations are serialized
    through that simulation's event loop.
    """

    def __init__(self, topology: ClusterTopology):
        self.topology = topology
        self.max_order = _order_of(topology.gpus_per_node)
        # Per node, per order: sorted list of free block start addresses.
        self._free: list[dict[int, list[int]]] = [
            {order: [] for order in range(self.max_order + 1)}
            for _ in range(topology.nodes)
        ]
        for node in range(topology.nodes):
            self._free[node][self.max_order].append(topology.node_base(node))
        self._free_bitmap = [True] * topology.total_gpus
        self._live: dict[int, int] = {}  # block start -> order

    # ------------------------------------------------------------------
    # Introspection

    @property
    def free_gpu_count(self) -> int:
        return sum(self._free_bitmap)

    def is_free(self, gpu_id: int) -> bool:
        return self._free_bitmap[gpu_id]

    def node_free_count(self, node: int) -> int:
        base = self.topology.node_base(node)
        return sum(self._free_bitmap[base : base + self.topology.gpus_per_node])

    def snapshot(self) -> dict:
        """JSON-serializable dump of the free bitmap and block lists."""
        free_blocks = []
        for node, by_order in enumerate(self._free):
            for order in sorted(by_order):
                for start in by_order[order]:
                    free_blocks.append({"node": node, "start": start, "order": order})
        live_blocks = [
            {"start": start, "order": order}
            for start, order in sorted(self._live.items())
        ]
        return {
            "free_bitmap": [1 if free else 0 for free in self._free_bitmap],
            "free_blocks": free_blocks,
            "live_blocks": live_blocks,
        }

    # ------------------------------------------------------------------
    # Core block operations

    def _set_bitmap(self, start: int, size: int, free: bool) -> None:
        for gpu in range(start, start + size):
            self._free_bitmap[gpu] = free

    def _remove_free(self, node: int, order: int, start: int) -> None:
        self._free[node][order].remove(start)

    def _insert_free(self, start: int, order: int) -> None:
        """Return a block to the free lists, coalescing buddies upward."""
        node = self.topology.node_of(start)
        base = self.topology.node_base(node)
        self._set_bitmap(start, 1 << order, True)
        while order < self.max_order:
            buddy = base + ((start - base) ^ (1 << order))
            if buddy in self._free[node][order]:
                self._remove_free(node, order, buddy)
                start = min(start, buddy)
                order += 1
            else:
                break
        insort(self._free[node][order], start)

    def _allocate_in_node(self, node: int, order: int) -> Block | None:
        """Take the lowest-addressed free block of at least ``order``."""
        best_start = None
        best_order = None
        for avail_order in range(order, self.max_order + 1):
            starts = self._free[node][avail_order]
            if starts and (best_start is None or starts[0] < best_start):
                best_start, best_order = starts[0], avail_order
        if best_start is None:
            return None
        self._remove_free(node, best_order, best_start)
        while best_order > order:
            best_order -= 1
            # Keep the low half, free the high half.
            insort(self._free[node][best_order], best_start + (1 << best_order))
        self._set_bitmap(best_start, 1 << order, False)
        self._live[best_start] = order
        return Block(best_start, order)

    # ------------------------------------------------------------------
    # Public allocation API

    def allocate(self, count: int) -> AllocationHandle | None:
        """Allocate a single aligned block of exactly ``count`` GPUs.

        Returns ``None`` (and leaves the pool untouched) when no node holds
        a suitable block.
        """
        order = _order_of(count)
        if count > self.topology.gpus_per_node:
            return None
        for node in range(self.topology.nodes):
            block = self._allocate_in_node(node, order)
            if block is not None:
                return AllocationHandle((block,))
        return None

    def allocate_group(self, count: int) -> AllocationHandle | None:
        """Allocate ``count`` GPUs inside one node, composing free blocks.

        Unlike :meth:`allocate` the result may span several aligned blocks;
        parallel groups only need co-residency in the high-bandwidth domain,
        not buddy adjacency.  ``count == 1`` falls back to :meth:`allocate`.
        """
        if count == 1:
            return self.allocate(1)
        if count > self.topology.gpus_per_node or count < 1:
            return None
        for node in range(self.topology.nodes):
            if self.node_free_count(node) < count:
                continue
            blocks: list[Block] = []
            need = count
            while need > 0:
                size = 1
                while size * 2 <= need:
                    size *= 2
                block = None
                while block is None:
                    block = self._allocate_in_node(node, _order_of(size))
                    if block is None:
                        size //= 2
                        assert size >= 1, "free count promised enough GPUs"
                blocks.append(block)
                need -= block.size
            blocks.sort(key=lambda b: b.start)
            return AllocationHandle(tuple(blocks))
        return None

    def release(self, handle: AllocationHandle) -> None:
        """Return every block of ``handle`` to the pool, coalescing buddies."""
        for block in handle.blocks:
            if self._live.get(block.start) != block.order:
                raise AllocationError(
                    f"release of unknown or already-released block at {block.start}"
                )
        for block in handle.blocks:
            del self._live[block.start]
            self._insert_free(block.start, block.order)

    def release_keep_lowest(
        self, handle: AllocationHandle, keep: int
    ) -> tuple[AllocationHandle, tuple[int, ...]]:
        """Release all but the ``keep`` lowest-id GPUs of ``handle``.

        Used for the DiT-to-VAE scale-down: the low-id master GPUs stay, the
        rest return to the pool.  ``keep`` must be a power of two no larger
        than the handle.
        """
        if keep >= handle.count:
            if keep > handle.count:
                raise AllocationError("cannot keep more GPUs than the handle holds")
            return handle, ()
        _order_of(keep)
        retained: list[Block] = []
        released: list[int] = []
        remaining = keep
        for block in handle.blocks:
            if self._live.get(block.start) != block.order:
                raise AllocationError(
                    f"scale-down of unknown block at {block.start}"
                )
            if remaining >= block.size:
                retained.append(block)
                remaining -= block.size
            elif remaining == 0:
                del self._live[block.start]
                released.extend(block.gpu_ids)
                self._insert_free(block.start, block.order)
            else:
                # Keep the aligned low sub-block, free the upper decomposition.
                del self._live[block.start]
                low = Block(block.start, _order_of(remaining))
                self._live[low.start] = low.order
                retained.append(low)
                cursor = remaining
                while cursor < block.size:
                    upper = Block(block.start + cursor, _order_of(cursor))
                    released.extend(upper.gpu_ids)
                    self._insert_free(upper.start, upper.order)
                    cursor *= 2
                remaining = 0
        return AllocationHandle(tuple(retained)), tuple(released)

    def retract_to(
        self, handle: AllocationHandle, sub: AllocationHandle
    ) -> tuple[int, ...]:
        """Shrink a single-block ``handle`` back to the sub-block ``sub``.

        Used to rescind a granted-but-unapplied promotion: the enlarged block
        splits and every half not containing ``sub`` is freed.
        """
        if len(handle.blocks) != 1 or len(sub.blocks) != 1:
            raise AllocationError("retract_to expects single-block handles")
        outer, inner = handle.blocks[0], sub.blocks[0]
        if self._live.get(outer.start) != outer.order:
            raise AllocationError(f"retract of unknown block at {outer.start}")
        if not (outer.start <= inner.start and
                inner.start + inner.size <= outer.start + outer.size):
            raise AllocationError("sub-block is not contained in the handle")
        del self._live[outer.start]
        released: list[int] = []
        start, order = outer.start, outer.order
        while order > inner.order:
            order -= 1
            half = 1 << order
            if inner.start >= start + half:
                freed = Block(start, order)
                start += half
            else:
                freed = Block(start + half, order)
            released.extend(freed.gpu_ids)
            self._insert_free(freed.start, freed.order)
        assert start == inner.start
        self._live[inner.start] = inner.order
        return tuple(released)

    def try_best_alloc(
        self,
        target: int,
        held: AllocationHandle | None = None,
        candidates: Sequence[int] = (1, 2, 4, 8),
    ) -> AllocationHandle | None:
        """Best-effort allocation toward ``target`` GPUs.

        With nothing held, attempts single aligned blocks of every candidate
        size from ``target`` down to 1 and returns the largest that fits
        (``None`` when the pool is exhausted).  With a held block, attempts
        to promote it to the largest aligned superblock of candidate size at
        most ``target`` whose remaining GPUs are all free; returns ``held``
        unchanged when no superblock can be completed.
        """
        sizes = sorted((c for c in candidates if c <= target), reverse=True)
        if held is None or held.count == 0:
            for size in sizes:
                handle = self.allocate(size)
                if handle is not None:
                    return handle
            return None
        if held.count >= target:
            return held
        if len(held.blocks) != 1:
            raise AllocationError("promotion requires a single-block handle")
        block = held.blocks[0]
        node = self.topology.node_of(block.start)
        base = self.topology.node_base(node)
        for total in sizes:
            if total <= held.count or total > self.topology.gpus_per_node:
                continue
            # Walk the buddy path upward; every sibling must be a free block.
            siblings: list[tuple[int, int]] = []
            start, order = block.start, block.order
            feasible = True
            while (1 << order) < total:
                buddy = base + ((start - base) ^ (1 << order))
                if buddy not in self._free[node][order]:
                    feasible = False
                    break
                siblings.append((buddy, order))
                start = min(start, buddy)
                order += 1
            if not feasible:
                continue
            for buddy, sib_order in siblings:
                self._remove_free(node, sib_order, buddy)
                self._set_bitmap(buddy, 1 << sib_order, False)
            del self._live[block.start]
            self._live[start] = order
            return AllocationHandle((Block(start, order),))
        return held


def handle_from_gpu_ids(gpu_ids: Iterable[int]) -> AllocationHandle:
    """Build a pool-independent handle (order-0 blocks) from raw GPU ids.

    Cluster-partition policies manage fixed engine units outside the buddy
    pool; their handles never re-enter pool bookkeeping.
    """
    blocks = tuple(Block(gpu, 0) for gpu in sorted(gpu_ids))
    if not blocks:
        raise AllocationError("a handle needs at least one GPU")
    return AllocationHandle(blocks)
