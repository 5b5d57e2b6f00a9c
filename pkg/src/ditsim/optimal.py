"""Theoretical minimum cumulative GPU occupancy via dynamic programming.

Given the resolution mix of a request population, the solver assigns
contiguous GPU segments and a degree of parallelism to each resolution type
so that the summed per-GPU busy time is minimal.  The per-GPU occupancy of a
candidate segment comes from one of two models:

* **batch**: ``S`` requests are pending up front and none arrive later; with
  ``alpha`` instances each GPU is busy ``ceil(S*x/alpha) * d`` seconds;
* **queue**: arrivals are Poisson and the system sits in equilibrium; the
  mean time in system follows the M/D/1 closed form for one instance, and an
  M/M/c-based approximation (halved, deterministic service) for several.

The DP walks ``dp[i][j]`` = minimal occupancy of serving the first ``j``
types with the first ``i`` GPUs, enumerating the segment size ``k`` and DoP
``p`` of the last type; instance counts respect node boundaries through
:func:`ditsim.allocator.bandwidth_aware_partition`.  Factorials in the queue
formulas switch to Stirling's approximation above a configurable cutoff.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

from .allocator import ClusterTopology, bandwidth_aware_partition
from .profiles import ProfileTable, estimate_execution_time

DEFAULT_STIRLING_CUTOFF = 20

# Tolerance absorbing float noise in S*x before the ceiling.
_CEIL_EPS = 1e-9


class SaturationError(ValueError):
    """Queue utilization at or above 1: no finite stationary occupancy."""


class InfeasibleError(RuntimeError):
    """No allocation serves some resolution type."""

    def __init__(self, resolution: str):
        super().__init__(f"no feasible allocation for resolution {resolution!r}")
        self.resolution = resolution


def stirling_factorial(n: int) -> float:
    """Stirling's approximation ``sqrt(2*pi*n) * (n/e)**n`` of ``n!``."""
    if n < 1:
        raise ValueError("stirling_factorial needs n >= 1")
    return math.sqrt(2.0 * math.pi * n) * (n / math.e) ** n


def approx_factorial(n: int, exact_below: int = DEFAULT_STIRLING_CUTOFF) -> float:
    """``n!`` exactly below the cutoff, Stirling's approximation above.

    The exact path covers small factorials cheaply; Stirling keeps large
    server counts O(1) instead of building big integers.
    """
    if n < 0:
        raise ValueError("factorial needs n >= 0")
    if n < exact_below:
        return float(math.factorial(n))
    return stirling_factorial(n)


def occupy_batch(pending: int, fraction: float, servers: int, service_seconds: float) -> float:
    """Per-GPU busy time serving ``pending * fraction`` requests on ``servers``.

    Requests spread evenly over the instances, so each GPU runs
    ``ceil(pending * fraction / servers)`` back-to-back executions.
    """
    if servers < 1 or pending < 1:
        raise ValueError("occupy_batch needs servers >= 1 and pending >= 1")
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if service_seconds <= 0:
        raise ValueError("service_seconds must be positive")
    count = math.ceil(pending * fraction / servers - _CEIL_EPS)
    return count * service_seconds


def occupy_md1(effective_rate: float, service_seconds: float) -> float:
    """Mean time in an M/D/1 system: ``1/mu + rho / (2*mu*(1-rho))``."""
    if service_seconds <= 0:
        raise ValueError("service_seconds must be positive")
    mu = 1.0 / service_seconds
    rho = effective_rate * service_seconds
    if rho >= 1.0:
        raise SaturationError(f"M/D/1 utilization {rho:.4f} >= 1")
    return 1.0 / mu + rho / (2.0 * mu * (1.0 - rho))


def empty_system_probability(
    offered_load: float,
    servers: int,
    utilization: float,
    exact_below: int = DEFAULT_STIRLING_CUTOFF,
) -> float:
    """M/M/c probability of an empty system for offered load ``r = lambda/mu``."""
    fact = lambda n: approx_factorial(n, exact_below)  # noqa: E731
    tail = offered_load**servers / (fact(servers) * (1.0 - utilization))
    head = sum(offered_load**s / fact(s) for s in range(servers))
    return 1.0 / (tail + head)


def occupy_mdc(
    effective_rate: float,
    service_seconds: float,
    servers: int,
    corrected: bool = False,
    exact_below: int = DEFAULT_STIRLING_CUTOFF,
) -> float:
    """Mean time in a multi-instance system with deterministic service.

    Uses the M/M/c mean-time-in-system and halves it to account for the
    deterministic service; by default the halving applies to the whole
    expression, service time included.  ``corrected=True`` instead halves
    only the queue-wait term (the textbook deterministic-service correction)
    and leaves the service time whole.
    """
    if servers < 2:
        raise ValueError("occupy_mdc needs at least 2 servers; use occupy_md1")
    if service_seconds <= 0:
        raise ValueError("service_seconds must be positive")
    mu = 1.0 / service_seconds
    rho = effective_rate / (servers * mu)
    if rho >= 1.0:
        raise SaturationError(f"multi-server utilization {rho:.4f} >= 1")
    r = effective_rate / mu
    p0 = empty_system_probability(r, servers, rho, exact_below)
    fact = approx_factorial(servers, exact_below)
    wait = (r**servers / (fact * servers * mu * (1.0 - rho) ** 2)) * p0
    if corrected:
        return 1.0 / mu + wait / 2.0
    return (1.0 / mu + wait) / 2.0


# ----------------------------------------------------------------------
# Occupancy model selection


@dataclass(frozen=True)
class BatchModel:
    """``pending_requests`` queued up front, no further arrivals."""

    pending_requests: int

    def __post_init__(self) -> None:
        if self.pending_requests < 1:
            raise ValueError("pending_requests must be at least 1")

    def occupancy(self, fraction: float, service_seconds: float, servers: int) -> float:
        return occupy_batch(self.pending_requests, fraction, servers, service_seconds)


@dataclass(frozen=True)
class QueueModel:
    """Poisson arrivals at ``arrival_rate`` in dynamic equilibrium."""

    arrival_rate: float
    corrected: bool = False
    stirling_cutoff: int = DEFAULT_STIRLING_CUTOFF

    def __post_init__(self) -> None:
        if self.arrival_rate <= 0:
            raise ValueError("arrival_rate must be positive")

    def occupancy(self, fraction: float, service_seconds: float, servers: int) -> float:
        rate = self.arrival_rate * fraction
        if servers == 1:
            return occupy_md1(rate, service_seconds)
        return occupy_mdc(
            rate, service_seconds, servers, self.corrected, self.stirling_cutoff
        )


# ----------------------------------------------------------------------
# Dynamic program


@dataclass(frozen=True)
class TypeAssignment:
    """One resolution type's slice of the solution."""

    resolution: str
    segment_start: int
    gpu_count: int
    dop: int
    instances: int
    occupancy_per_gpu: float

    @property
    def cost(self) -> float:
        return self.gpu_count * self.occupancy_per_gpu


@dataclass(frozen=True)
class OptimalAllocation:
    """Solver output: the minimum occupancy and the plan achieving it."""

    total_gpu_seconds: float
    assignments: tuple[TypeAssignment, ...]
    dp: tuple[tuple[float, ...], ...]

    def evaluate(self) -> float:
        """Re-sum the plan's per-type costs in type order."""
        total = 0.0
        for assignment in self.assignments:
            total = total + assignment.cost
        return total


def solve_optimal(
    topology: ClusterTopology,
    profile: ProfileTable,
    proportions: Mapping[str, float],
    model: BatchModel | QueueModel,
    steps: int,
    dop_candidates: Sequence[int] | None = None,
    include_vae: bool = True,
) -> OptimalAllocation:
    """Minimize cumulative occupancy of serving the given resolution mix.

    Types are taken in ``proportions`` order and occupy contiguous GPU index
    segments; idle GPUs may only precede the first segment.  ``include_vae``
    charges the decoder time inside the per-request service estimate (a
    monolithic estimate: the whole segment stays busy through the decode);
    disable it to bound the denoising phase alone.  Candidates whose queue
    would saturate cost infinity rather than failing the solve.
    """
    total = sum(proportions.values())
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"proportions must sum to 1, got {total!r}")
    resolutions = list(proportions)
    candidates = tuple(dop_candidates or profile.dop_candidates)
    M = topology.total_gpus
    N = len(resolutions)
    inf = float("inf")

    service: dict[tuple[int, int], float] = {}
    for j, res in enumerate(resolutions, start=1):
        for p in candidates:
            if include_vae:
                service[(j, p)] = estimate_execution_time(profile, res, p, steps)
            else:
                service[(j, p)] = steps * profile.dit_step(res, p)

    dp = [[0.0] * (N + 1) for _ in range(M + 1)]
    for j in range(1, N + 1):
        dp[0][j] = inf
    choice: dict[tuple[int, int], tuple[int, int, int, float]] = {}

    for i in range(1, M + 1):
        for j in range(1, N + 1):
            best = inf
            fraction = proportions[resolutions[j - 1]]
            for k in range(1, i + 1):
                if dp[i - k][j - 1] == inf:
                    continue
                for p in candidates:
                    alpha = bandwidth_aware_partition(topology, i - k, k, p)
                    if alpha == 0:
                        continue
                    try:
                        occ = model.occupancy(fraction, service[(j, p)], alpha)
                    except SaturationError:
                        continue
                    cand = dp[i - k][j - 1] + k * occ
                    if cand < best:
                        best = cand
                        choice[(i, j)] = (k, p, alpha, occ)
            dp[i][j] = best

    if dp[M][N] == inf:
        for j in range(1, N + 1):
            if all(dp[i][j] == inf for i in range(M + 1)):
                raise InfeasibleError(resolutions[j - 1])
        raise InfeasibleError(resolutions[N - 1])

    assignments: list[TypeAssignment] = []
    i = M
    for j in range(N, 0, -1):
        k, p, alpha, occ = choice[(i, j)]
        assignments.append(
            TypeAssignment(
                resolution=resolutions[j - 1],
                segment_start=i - k,
                gpu_count=k,
                dop=p,
                instances=alpha,
                occupancy_per_gpu=occ,
            )
        )
        i -= k
    assignments.reverse()
    return OptimalAllocation(
        total_gpu_seconds=dp[M][N],
        assignments=tuple(assignments),
        dp=tuple(tuple(row) for row in dp),
    )
