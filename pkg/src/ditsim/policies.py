"""Scheduling policies: the step-granular greedy scheduler and baselines.

All policies share one interface driven by the engine: a hook on request
arrival, a hook whenever GPUs are freed, and two resource callbacks at phase
boundaries (DiT completion and request completion).  The greedy policy
allocates from the shared buddy pool, starts requests FCFS with whatever it
can get, tracks under-allocated ("hungry") requests in a promote table
ordered by accumulated starvation time, and tops them up toward their
optimal DoP whenever GPUs free up.  The baselines model conventional
deployments: a fixed DoP for everyone, or GPU clusters statically carved
into fixed engine units per resolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .allocator import (
    AllocationHandle,
    ClusterTopology,
    handle_from_gpu_ids,
)
from .engine import RequestState, RequestStatus, Simulation, SimulationError
from .profiles import DopTable


class SchedulingPolicy:
    """Base interface; the engine owns timing, the policy owns resources."""

    name: str = "base"
    decouple_vae: bool = False

    def attach(self, sim: Simulation) -> None:
        """Validate against the simulation and build internal structures."""

    def on_arrival(self, sim: Simulation, request: RequestState) -> None:
        raise NotImplementedError

    def on_resources_freed(self, sim: Simulation) -> None:
        raise NotImplementedError

    def on_dit_complete(
        self, sim: Simulation, request: RequestState
    ) -> tuple[AllocationHandle, tuple[int, ...]]:
        """Return (retained handle, released GPU ids) at the phase boundary."""
        raise NotImplementedError

    def on_request_done(
        self, sim: Simulation, request: RequestState
    ) -> tuple[int, ...]:
        """Release everything the request still holds; return the ids."""
        raise NotImplementedError


# ----------------------------------------------------------------------
# Greedy scheduling


@dataclass
class PromoteEntry:
    """Bookkeeping for one hungry request awaiting DoP promotion."""

    request: RequestState
    starvation: float = 0.0
    last_step: int = 0


def update_starvation(
    entry: PromoteEntry,
    cur_step: int,
    cur_step_seconds: float,
    opt_step_seconds: float,
) -> float:
    """Accrue the theoretical extra DiT time since the last scheduling event.

    Adds ``(cur_step - last_step) * (cur_step_seconds - opt_step_seconds)``
    and moves ``last_step`` forward.  Longer starvation means higher priority
    for promotion.
    """
    entry.starvation += (cur_step - entry.last_step) * (
        cur_step_seconds - opt_step_seconds
    )
    entry.last_step = cur_step
    return entry.starvation


def promotion_order(entries: Sequence[PromoteEntry]) -> list[PromoteEntry]:
    """Descending starvation; ties go to the earlier arrival."""
    return sorted(
        entries,
        key=lambda e: (-e.starvation, e.request.arrival_time, e.request.request_id),
    )


class GreedyPolicy(SchedulingPolicy):
    """FCFS starts with best-effort grants plus step-boundary promotions.

    A request asks for its resolution's optimal DoP; if less is available it
    starts anyway and joins the promote table.  Freed GPUs go to hungry
    requests first (descending starvation, ties by arrival), then to the
    waiting queue.  The decoder phase always runs scaled down to the small
    VAE DoP.  ``promotion=False`` disables the top-up path for ablations.
    """

    decouple_vae = True

    def __init__(self, dop_table: DopTable, promotion: bool = True, name: str = ""):
        self.dop_table = dop_table
        self.promotion = promotion
        self.name = name or ("greedy" if promotion else "greedy-nopromo")
        self._waiting: list[RequestState] = []
        self._table: dict[int, PromoteEntry] = {}

    def attach(self, sim: Simulation) -> None:
        self._waiting.clear()
        self._table.clear()

    # -- scheduling ----------------------------------------------------

    def on_arrival(self, sim: Simulation, request: RequestState) -> None:
        self._waiting.append(request)
        self._scan_waiting(sim)

    def _check_table_invariant(self, sim: Simulation) -> None:
        hungry = {
            r.request_id
            for r in sim.requests.values()
            if r.status is RequestStatus.HUNGRY
        }
        assert hungry == set(self._table), (hungry, set(self._table))

    def on_resources_freed(self, sim: Simulation) -> None:
        if self.promotion:
            self._check_table_invariant(sim)
        if self.promotion and self._table:
            for entry in self._table.values():
                update_starvation(
                    entry,
                    entry.request.cur_step,
                    sim.current_step_seconds(entry.request),
                    sim.optimal_step_seconds(entry.request),
                )
            for entry in promotion_order(list(self._table.values())):
                request = entry.request
                target = self.dop_table.dit_dop(request.resolution)
                held = request.granted
                assert held is not None and held.count < target
                grown = sim.pool.try_best_alloc(
                    target, held, sim.profile.dop_candidates
                )
                if grown is held or grown.count <= held.count:
                    continue
                sim.set_pending_promotion(request, grown)
                if grown.count == target:
                    del self._table[request.request_id]
                    request.status = RequestStatus.RUNNING
        self._scan_waiting(sim)

    def _scan_waiting(self, sim: Simulation) -> None:
        for request in list(self._waiting):
            target = self.dop_table.dit_dop(request.resolution)
            handle = sim.pool.try_best_alloc(target, None, sim.profile.dop_candidates)
            if handle is None:
                continue
            assert handle.count <= target
            self._waiting.remove(request)
            hungry = handle.count < target
            sim.start_dit(request, handle, hungry)
            if hungry and self.promotion:
                self._table[request.request_id] = PromoteEntry(request)

    # -- resource callbacks ---------------------------------------------

    def on_dit_complete(
        self, sim: Simulation, request: RequestState
    ) -> tuple[AllocationHandle, tuple[int, ...]]:
        released: list[int] = []
        if request.pending_promotion is not None:
            # The promotion never reached a step boundary; hand the extra
            # GPUs straight back.
            released.extend(
                sim.pool.retract_to(request.pending_promotion, request.gpus)
            )
            request.pending_promotion = None
        self._table.pop(request.request_id, None)
        keep = min(self.dop_table.vae_dop, request.gpus.count)
        retained, freed = sim.pool.release_keep_lowest(request.gpus, keep)
        released.extend(freed)
        return retained, tuple(released)

    def on_request_done(
        self, sim: Simulation, request: RequestState
    ) -> tuple[int, ...]:
        ids = request.gpus.gpu_ids
        sim.pool.release(request.gpus)
        return ids


# ----------------------------------------------------------------------
# Static DoP baseline


class StaticDopPolicy(SchedulingPolicy):
    """Every request runs at one fixed DoP, FCFS, request granularity.

    Runs monolithically (decoder at the same DoP on the same GPUs) unless
    ``decouple_vae`` is set, in which case the decoder scales down to
    ``vae_dop`` masters and the remainder frees at DiT completion.
    """

    def __init__(
        self,
        dop: int,
        decouple_vae: bool = False,
        vae_dop: int = 1,
        name: str = "",
    ):
        if dop < 1 or (dop & (dop - 1)) != 0:
            raise SimulationError(f"static DoP must be a power of two, got {dop}")
        self.dop = dop
        self.decouple_vae = decouple_vae
        self.vae_dop = vae_dop
        suffix = "-decoupled" if decouple_vae else ""
        self.name = name or f"sdop{dop}{suffix}"
        self._waiting: list[RequestState] = []

    def attach(self, sim: Simulation) -> None:
        if self.dop not in sim.profile.dop_candidates:
            raise SimulationError(
                f"static DoP {self.dop} is not a profiled candidate"
            )
        if self.dop > sim.topology.gpus_per_node:
            raise SimulationError(
                f"static DoP {self.dop} exceeds the node size "
                f"{sim.topology.gpus_per_node}"
            )
        self._waiting.clear()

    def on_arrival(self, sim: Simulation, request: RequestState) -> None:
        self._waiting.append(request)
        self._scan_waiting(sim)

    def on_resources_freed(self, sim: Simulation) -> None:
        self._scan_waiting(sim)

    def _scan_waiting(self, sim: Simulation) -> None:
        while self._waiting:
            handle = sim.pool.allocate_group(self.dop)
            if handle is None:
                return
            request = self._waiting.pop(0)
            sim.start_dit(request, handle, hungry=False)

    def on_dit_complete(
        self, sim: Simulation, request: RequestState
    ) -> tuple[AllocationHandle, tuple[int, ...]]:
        if not self.decouple_vae:
            return request.gpus, ()
        keep = min(self.vae_dop, request.gpus.count)
        return sim.pool.release_keep_lowest(request.gpus, keep)

    def on_request_done(
        self, sim: Simulation, request: RequestState
    ) -> tuple[int, ...]:
        ids = request.gpus.gpu_ids
        sim.pool.release(request.gpus)
        return ids


# ----------------------------------------------------------------------
# Cluster-partition baselines


@dataclass(frozen=True)
class Cluster:
    """A static GPU sub-pool dedicated to one resolution.

    ``units`` are the fixed engine gangs carved from ``gpu_ids``; sub-pool
    GPUs that fit no unit stay idle.
    """

    resolution: str
    dop: int
    gpu_ids: tuple[int, ...]
    units: tuple[tuple[int, ...], ...]


@dataclass(frozen=True)
class ClusterPlan:
    """A partition of the whole GPU set into per-resolution clusters."""

    clusters: tuple[Cluster, ...]

    def validate(self, topology: ClusterTopology) -> None:
        seen: set[int] = set()
        for cluster in self.clusters:
            overlap = seen.intersection(cluster.gpu_ids)
            if overlap:
                raise SimulationError(f"clusters overlap on GPUs {sorted(overlap)}")
            seen.update(cluster.gpu_ids)
        if seen != set(range(topology.total_gpus)):
            raise SimulationError("clusters must cover every GPU exactly once")

    def cluster_for(self, resolution: str) -> Cluster:
        for cluster in self.clusters:
            if cluster.resolution == resolution:
                return cluster
        raise SimulationError(f"no cluster serves resolution {resolution!r}")


def _carve_units(
    topology: ClusterTopology, gpu_range: Sequence[int], dop: int
) -> tuple[tuple[int, ...], ...]:
    """Group consecutive ids into DoP-sized gangs that stay within a node."""
    units = []
    ids = list(gpu_range)
    pos = 0
    while pos + dop <= len(ids):
        chunk = ids[pos : pos + dop]
        if chunk == list(range(chunk[0], chunk[0] + dop)) and (
            topology.node_of(chunk[0]) == topology.node_of(chunk[-1])
        ):
            units.append(tuple(chunk))
            pos += dop
        else:
            pos += 1
    return tuple(units)


def build_spci_plan(
    topology: ClusterTopology,
    proportions: dict[str, float],
    dop: int,
) -> ClusterPlan:
    """Static partition: cluster sizes proportional to the workload mix.

    Sizes use largest-remainder rounding of ``total_gpus * proportion`` and
    every cluster runs the same configured DoP.
    """
    from .workload import stratified_counts

    sizes = stratified_counts(proportions, topology.total_gpus)
    clusters = []
    offset = 0
    for resolution in proportions:
        size = sizes[resolution]
        ids = tuple(range(offset, offset + size))
        offset += size
        units = _carve_units(topology, ids, dop)
        if not units:
            raise SimulationError(
                f"cluster for {resolution!r} ({size} GPUs) fits no DoP-{dop} unit"
            )
        clusters.append(Cluster(resolution, dop, ids, units))
    plan = ClusterPlan(tuple(clusters))
    plan.validate(topology)
    return plan


def build_dpci_plan(
    topology: ClusterTopology,
    resolutions: Sequence[str],
    dop_table: DopTable,
) -> ClusterPlan:
    """Dynamic partition: per-cluster DoP is the resolution's optimal DoP.

    Every resolution gets the same number of engine units, as many as the
    hardware allows; leftover GPUs attach (idle) to the last cluster.
    """
    dops = {res: dop_table.dit_dop(res) for res in resolutions}
    per_round = sum(dops.values())
    unit_count = topology.total_gpus // per_round
    if unit_count == 0:
        raise SimulationError(
            f"{topology.total_gpus} GPUs cannot host one engine unit per "
            f"resolution (needs {per_round})"
        )
    # Carve in descending-DoP order so larger gangs stay naturally aligned.
    offset = 0
    ranges: dict[str, tuple[int, ...]] = {}
    for res in sorted(resolutions, key=lambda r: (-dops[r], resolutions.index(r))):
        size = unit_count * dops[res]
        ranges[res] = tuple(range(offset, offset + size))
        offset += size
    leftover = tuple(range(offset, topology.total_gpus))
    clusters = []
    for index, res in enumerate(resolutions):
        ids = ranges[res]
        if index == len(resolutions) - 1 and leftover:
            ids = tuple(sorted(ids + leftover))
        units = _carve_units(topology, ranges[res], dops[res])
        if len(units) < unit_count:
            raise SimulationError(
                f"cluster for {res!r} fits only {len(units)} of {unit_count} units"
            )
        clusters.append(Cluster(res, dops[res], ids, units))
    plan = ClusterPlan(tuple(clusters))
    plan.validate(topology)
    return plan


class ClusterPolicy(SchedulingPolicy):
    """Requests route to their resolution's cluster and queue FCFS there.

    With ``allow_downgrade`` a request whose native cluster is saturated may
    run on a free unit of a lower-DoP cluster at that cluster's DoP; freed
    units prefer their own resolution's queue, then the oldest waiter from a
    higher-DoP cluster.  Execution is monolithic (no decoder scale-down).
    """

    def __init__(self, plan: ClusterPlan, allow_downgrade: bool, name: str):
        self.plan = plan
        self.allow_downgrade = allow_downgrade
        self.name = name
        self._free_units: dict[str, list[int]] = {}
        self._waiting: dict[str, list[RequestState]] = {}
        self._unit_of: dict[int, tuple[str, int]] = {}

    def attach(self, sim: Simulation) -> None:
        self.plan.validate(sim.topology)
        for cluster in self.plan.clusters:
            if cluster.dop not in sim.profile.dop_candidates:
                raise SimulationError(
                    f"cluster {cluster.resolution!r} uses unprofiled dop {cluster.dop}"
                )
        for state in sim.requests.values():
            self.plan.cluster_for(state.resolution)
        self._free_units = {
            c.resolution: list(range(len(c.units))) for c in self.plan.clusters
        }
        self._waiting = {c.resolution: [] for c in self.plan.clusters}
        self._unit_of = {}

    def _take_unit(self, sim: Simulation, cluster: Cluster, request: RequestState) -> None:
        index = self._free_units[cluster.resolution].pop(0)
        self._unit_of[request.request_id] = (cluster.resolution, index)
        handle = handle_from_gpu_ids(cluster.units[index])
        sim.start_dit(request, handle, hungry=False)

    def _eligible_clusters(self, resolution: str) -> list[Cluster]:
        native = self.plan.cluster_for(resolution)
        clusters = [native]
        if self.allow_downgrade:
            lower = [c for c in self.plan.clusters if c.dop < native.dop]
            clusters.extend(sorted(lower, key=lambda c: -c.dop))
        return clusters

    def on_arrival(self, sim: Simulation, request: RequestState) -> None:
        for cluster in self._eligible_clusters(request.resolution):
            if self._free_units[cluster.resolution]:
                self._take_unit(sim, cluster, request)
                return
        self._waiting[request.resolution].append(request)

    def on_resources_freed(self, sim: Simulation) -> None:
        progressed = True
        while progressed:
            progressed = False
            for cluster in self.plan.clusters:
                if not self._free_units[cluster.resolution]:
                    continue
                queue = self._waiting[cluster.resolution]
                if queue:
                    self._take_unit(sim, cluster, queue.pop(0))
                    progressed = True
                    continue
                if not self.allow_downgrade:
                    continue
                donors = [
                    c for c in self.plan.clusters
                    if c.dop > cluster.dop and self._waiting[c.resolution]
                ]
                if not donors:
                    continue
                oldest = min(
                    (self._waiting[c.resolution][0] for c in donors),
                    key=lambda r: (r.arrival_time, r.request_id),
                )
                self._waiting[oldest.resolution].remove(oldest)
                self._take_unit(sim, cluster, oldest)
                progressed = True

    def on_dit_complete(
        self, sim: Simulation, request: RequestState
    ) -> tuple[AllocationHandle, tuple[int, ...]]:
        return request.gpus, ()

    def on_request_done(
        self, sim: Simulation, request: RequestState
    ) -> tuple[int, ...]:
        resolution, index = self._unit_of.pop(request.request_id)
        free = self._free_units[resolution]
        free.insert(0, index)
        free.sort()
        return request.gpus.gpu_ids
