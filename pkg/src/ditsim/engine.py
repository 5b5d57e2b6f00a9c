"""Deterministic discrete-event core for step-granular serving simulation.

A request's lifecycle: it arrives, waits until the scheduling policy grants
it GPUs, runs its denoising steps one at a time, scales down (or not, policy
dependent) to a small master group for the decoder phase, and releases
everything when done.  The engine advances simulated time, executes steps,
applies DoP promotions exactly at step boundaries, and keeps a per-request
occupancy ledger of ``(t_begin, t_end, gpu_count)`` intervals.

Promotions registered mid-step are stored as ``pending_promotion`` and take
effect at the next step boundary, paying a constant broadcast plus scale-up
overhead.  GPUs released anywhere become schedulable at the exact release
timestamp.  Two runs with identical inputs produce identical event traces.
"""

from __future__ import annotations

import heapq
import itertools
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Sequence

from .allocator import AllocationHandle, ClusterTopology, GpuPool
from .profiles import DopTable, ProfileTable
from .workload import ArrivalRecord

if TYPE_CHECKING:  # pragma: no cover
    from .policies import SchedulingPolicy


class SimulationError(RuntimeError):
    """Configuration problems detected before or during a run."""


class EventKind(str, Enum):
    ARRIVAL = "arrival"
    STEP_COMPLETE = "step_complete"
    DIT_COMPLETE = "dit_complete"
    VAE_COMPLETE = "vae_complete"


class RequestStatus(str, Enum):
    WAITING = "waiting"
    RUNNING = "running"
    HUNGRY = "hungry"  # running with fewer GPUs than its optimal DoP
    VAE_PHASE = "vae_phase"
    DONE = "done"


@dataclass(frozen=True)
class OverheadModel:
    """Constant per-promotion costs; both default to one millisecond."""

    scale_up_seconds: float = 0.001
    broadcast_seconds: float = 0.001

    def __post_init__(self) -> None:
        if self.scale_up_seconds < 0 or self.broadcast_seconds < 0:
            raise ValueError("overheads must be non-negative")


@dataclass(frozen=True)
class TraceRecord:
    """One line of the simulation trace.

    ``kind`` is one of arrival/start/step_complete/promotion/dit_complete/
    vae_complete; ``gpu_ids`` and ``dop`` reflect the request's active GPU
    set at that instant.  The format is stable for diff-based regression.
    """

    time: float
    kind: str
    request_id: int
    gpu_ids: tuple[int, ...]
    dop: int

    def to_json_line(self) -> str:
        return json.dumps(
            {
                "time": self.time,
                "kind": self.kind,
                "request_id": self.request_id,
                "gpu_ids": list(self.gpu_ids),
                "dop": self.dop,
            }
        )


@dataclass
class RequestState:
    """Mutable lifecycle state of one request inside a simulation."""

    request_id: int
    resolution: str
    arrival_time: float
    total_steps: int
    status: RequestStatus = RequestStatus.WAITING
    start_time: float | None = None
    finish_time: float | None = None
    cur_step: int = 0
    gpus: AllocationHandle | None = None
    pending_promotion: AllocationHandle | None = None
    ledger: list[tuple[float, float, int]] = field(default_factory=list)
    _open_since: float | None = None
    _open_width: int = 0

    @property
    def dop_now(self) -> int:
        return 0 if self.gpus is None else self.gpus.count

    @property
    def granted(self) -> AllocationHandle | None:
        """Current grant including a pending, not-yet-applied promotion."""
        return self.pending_promotion if self.pending_promotion is not None else self.gpus

    @property
    def gpu_seconds(self) -> float:
        return sum((end - begin) * width for begin, end, width in self.ledger)

    def open_ledger(self, now: float, width: int) -> None:
        self._open_since = now
        self._open_width = width

    def change_width(self, now: float, width: int) -> None:
        if width == self._open_width:
            return
        assert self._open_since is not None
        if now > self._open_since:
            self.ledger.append((self._open_since, now, self._open_width))
        self._open_since = now
        self._open_width = width

    def close_ledger(self, now: float) -> None:
        assert self._open_since is not None
        if now > self._open_since:
            self.ledger.append((self._open_since, now, self._open_width))
        self._open_since = None
        self._open_width = 0

    @property
    def dop_history(self) -> tuple[tuple[float, int], ...]:
        return tuple((begin, width) for begin, _, width in self.ledger)


@dataclass(frozen=True)
class RequestRecord:
    """Per-request result row."""

    request_id: int
    resolution: str
    arrival: float
    start: float
    finish: float
    gpu_seconds: float
    dop_history: tuple[tuple[float, int], ...]

    @property
    def latency(self) -> float:
        return self.finish - self.arrival


@dataclass(frozen=True)
class SimResult:
    """Outcome of one simulation run."""

    requests: tuple[RequestRecord, ...]
    cumulative_occupancy: float  # GPU-seconds over all requests
    trace: tuple[TraceRecord, ...]
    policy_name: str

    def write_trace(self, path) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            for record in self.trace:
                handle.write(record.to_json_line() + "\n")


class Simulation:
    """Single-threaded event loop serving one workload under one policy."""

    def __init__(
        self,
        topology: ClusterTopology,
        profile: ProfileTable,
        dop_table: DopTable,
        workload: Sequence[ArrivalRecord],
        policy: "SchedulingPolicy",
        overheads: OverheadModel = OverheadModel(),
    ):
        if not workload:
            raise SimulationError("workload must not be empty")
        for record in workload:
            if not profile.has_resolution(record.resolution):
                raise SimulationError(
                    f"request {record.request_id} has unprofiled resolution "
                    f"{record.resolution!r}"
                )
            dop_table.dit_dop(record.resolution)
        self.topology = topology
        self.profile = profile
        self.dop_table = dop_table
        self.overheads = overheads
        self.policy = policy
        self.pool = GpuPool(topology)
        self.now = 0.0
        self._heap: list[tuple[float, int, EventKind, int]] = []
        self._seq = itertools.count()
        self._trace: list[TraceRecord] = []
        self.requests = {
            record.request_id: RequestState(
                request_id=record.request_id,
                resolution=record.resolution,
                arrival_time=record.arrival_time,
                total_steps=record.denoise_steps,
            )
            for record in workload
        }
        self._arrival_order = [record.request_id for record in workload]

    # ------------------------------------------------------------------
    # Services used by scheduling policies

    def schedule_event(self, time: float, kind: EventKind, request_id: int) -> None:
        heapq.heappush(self._heap, (time, next(self._seq), kind, request_id))

    def current_step_seconds(self, request: RequestState) -> float:
        return self.profile.dit_step(request.resolution, request.dop_now)

    def optimal_step_seconds(self, request: RequestState) -> float:
        return self.profile.dit_step(
            request.resolution, self.dop_table.dit_dop(request.resolution)
        )

    def start_dit(
        self, request: RequestState, handle: AllocationHandle, hungry: bool
    ) -> None:
        """Begin the denoising phase on ``handle`` at the current time."""
        assert request.status is RequestStatus.WAITING
        request.gpus = handle
        request.status = RequestStatus.HUNGRY if hungry else RequestStatus.RUNNING
        request.start_time = self.now
        request.open_ledger(self.now, handle.count)
        self._emit("start", request)
        step = self.profile.dit_step(request.resolution, handle.count)
        self.schedule_event(self.now + step, EventKind.STEP_COMPLETE, request.request_id)

    def set_pending_promotion(
        self, request: RequestState, handle: AllocationHandle
    ) -> None:
        """Record a grant that will take effect at the next step boundary."""
        assert request.status in (RequestStatus.RUNNING, RequestStatus.HUNGRY)
        held = set((request.pending_promotion or request.gpus).gpu_ids)
        if not held.issubset(handle.gpu_ids):
            raise SimulationError("promotion handle must contain the held GPUs")
        request.pending_promotion = handle

    # ------------------------------------------------------------------
    # Event handlers

    def _emit(self, kind: str, request: RequestState) -> None:
        gpus = request.gpus.gpu_ids if request.gpus is not None else ()
        self._trace.append(
            TraceRecord(self.now, kind, request.request_id, gpus, len(gpus))
        )

    def _handle_arrival(self, request: RequestState) -> None:
        self._trace.append(
            TraceRecord(self.now, EventKind.ARRIVAL.value, request.request_id, (), 0)
        )
        self.policy.on_arrival(self, request)

    def _handle_step_complete(self, request: RequestState) -> None:
        assert request.status in (RequestStatus.RUNNING, RequestStatus.HUNGRY)
        assert request.cur_step < request.total_steps
        request.cur_step += 1
        self._emit(EventKind.STEP_COMPLETE.value, request)
        if request.cur_step == request.total_steps:
            self.schedule_event(self.now, EventKind.DIT_COMPLETE, request.request_id)
            return
        if request.pending_promotion is not None:
            request.gpus = request.pending_promotion
            request.pending_promotion = None
            request.change_width(self.now, request.gpus.count)
            self._emit("promotion", request)
            delay = (
                self.overheads.broadcast_seconds
                + self.overheads.scale_up_seconds
                + self.profile.dit_step(request.resolution, request.dop_now)
            )
        else:
            delay = self.profile.dit_step(request.resolution, request.dop_now)
        self.schedule_event(
            self.now + delay, EventKind.STEP_COMPLETE, request.request_id
        )

    def _handle_dit_complete(self, request: RequestState) -> None:
        assert request.cur_step == request.total_steps
        retained, released = self.policy.on_dit_complete(self, request)
        request.gpus = retained
        request.pending_promotion = None
        request.change_width(self.now, retained.count)
        request.status = RequestStatus.VAE_PHASE
        self._emit(EventKind.DIT_COMPLETE.value, request)
        vae_seconds = self.profile.vae(request.resolution, retained.count)
        self.schedule_event(
            self.now + vae_seconds, EventKind.VAE_COMPLETE, request.request_id
        )
        if released:
            self.policy.on_resources_freed(self)

    def _handle_vae_complete(self, request: RequestState) -> None:
        assert request.status is RequestStatus.VAE_PHASE
        self._emit(EventKind.VAE_COMPLETE.value, request)
        request.finish_time = self.now
        request.close_ledger(self.now)
        request.status = RequestStatus.DONE
        released = self.policy.on_request_done(self, request)
        request.gpus = None
        if released:
            self.policy.on_resources_freed(self)

    # ------------------------------------------------------------------

    def run(self) -> SimResult:
        """Process events until every request is done."""
        self.policy.attach(self)
        for request_id in self._arrival_order:
            self.schedule_event(
                self.requests[request_id].arrival_time, EventKind.ARRIVAL, request_id
            )
        handlers = {
            EventKind.ARRIVAL: self._handle_arrival,
            EventKind.STEP_COMPLETE: self._handle_step_complete,
            EventKind.DIT_COMPLETE: self._handle_dit_complete,
            EventKind.VAE_COMPLETE: self._handle_vae_complete,
        }
        while self._heap:
            time, _, kind, request_id = heapq.heappop(self._heap)
            assert time >= self.now, "event time moved backwards"
            self.now = time
            handlers[kind](self.requests[request_id])
        undone = [r.request_id for r in self.requests.values() if r.status is not RequestStatus.DONE]
        if undone:
            raise SimulationError(f"requests never finished: {undone}")
        records = tuple(
            RequestRecord(
                request_id=state.request_id,
                resolution=state.resolution,
                arrival=state.arrival_time,
                start=state.start_time,
                finish=state.finish_time,
                gpu_seconds=state.gpu_seconds,
                dop_history=state.dop_history,
            )
            for state in (self.requests[rid] for rid in self._arrival_order)
        )
        occupancy = sum(record.gpu_seconds for record in records)
        return SimResult(
            requests=records,
            cumulative_occupancy=occupancy,
            trace=tuple(self._trace),
            policy_name=self.policy.name,
        )
