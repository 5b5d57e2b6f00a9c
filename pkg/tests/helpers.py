"""Shared test oracles: trace sweeps and exhaustive plan enumeration.

These deliberately recompute results through independent routes (per-GPU
interval sweeps, brute-force enumeration, Lindley recursions) so the code
under test is never checked against itself.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from ditsim import SimResult, bandwidth_aware_partition
from ditsim.optimal import SaturationError
from ditsim.profiles import estimate_execution_time


def gpu_ownership_intervals(result: SimResult) -> dict[int, list[tuple[float, float, int]]]:
    """Per-request GPU-set intervals reconstructed purely from the trace."""
    spans: dict[int, list[tuple[float, float, int]]] = {}
    active: dict[int, tuple[float, tuple[int, ...]]] = {}
    for record in result.trace:
        rid = record.request_id
        if record.kind == "start":
            active[rid] = (record.time, record.gpu_ids)
        elif record.kind in ("promotion", "dit_complete"):
            begin, gpus = active[rid]
            spans.setdefault(rid, []).append((begin, record.time, gpus))
            active[rid] = (record.time, record.gpu_ids)
        elif record.kind == "vae_complete":
            begin, gpus = active.pop(rid)
            spans.setdefault(rid, []).append((begin, record.time, gpus))
    assert not active, "trace left requests with open GPU ownership"
    return {
        rid: [(b, e, gpus) for b, e, gpus in ivals]
        for rid, ivals in spans.items()
    }


def sweep_occupancy(result: SimResult) -> float:
    """Recompute cumulative occupancy by summing per-GPU busy time."""
    per_gpu: dict[int, float] = {}
    for intervals in gpu_ownership_intervals(result).values():
        for begin, end, gpus in intervals:
            for gpu in gpus:
                per_gpu[gpu] = per_gpu.get(gpu, 0.0) + (end - begin)
    return sum(per_gpu.values())


def assert_no_gpu_overlap(result: SimResult) -> None:
    """No GPU serves two requests at once (endpoints may touch)."""
    busy: dict[int, list[tuple[float, float, int]]] = {}
    for rid, intervals in gpu_ownership_intervals(result).items():
        for begin, end, gpus in intervals:
            for gpu in gpus:
                busy.setdefault(gpu, []).append((begin, end, rid))
    for gpu, spans in busy.items():
        spans.sort()
        for (b1, e1, r1), (b2, e2, r2) in zip(spans, spans[1:]):
            assert b2 >= e1 - 1e-12, (
                f"GPU {gpu} overlaps: request {r1} [{b1},{e1}) vs {r2} [{b2},{e2})"
            )


def brute_force_optimal(
    topology,
    profile,
    proportions,
    model,
    steps,
    candidates,
    include_vae=True,
):
    """Exhaustive enumeration of right-packed contiguous segment plans.

    Mirrors the solver's solution space without dynamic programming; returns
    the minimal total occupancy or ``None`` when no plan is feasible.
    Accumulation order matches the DP (type by type), so finite values are
    bitwise comparable.
    """
    resolutions = list(proportions)
    N = len(resolutions)
    M = topology.total_gpus
    service = {}
    for j, res in enumerate(resolutions):
        for p in candidates:
            if include_vae:
                service[(j, p)] = estimate_execution_time(profile, res, p, steps)
            else:
                service[(j, p)] = steps * profile.dit_step(res, p)
    best = None
    for ks in itertools.product(range(1, M + 1), repeat=N):
        if sum(ks) > M:
            continue
        for dops in itertools.product(candidates, repeat=N):
            total = 0.0
            feasible = True
            for j in range(N):
                start = M - sum(ks[j:])
                alpha = bandwidth_aware_partition(topology, start, ks[j], dops[j])
                if alpha == 0:
                    feasible = False
                    break
                try:
                    occ = model.occupancy(
                        proportions[resolutions[j]], service[(j, dops[j])], alpha
                    )
                except SaturationError:
                    feasible = False
                    break
                total = total + ks[j] * occ
            if feasible and (best is None or total < best):
                best = total
    return best


def md1_time_in_system(arrival_rate: float, service: float, n: int, seed: int) -> float:
    """Mean sojourn time of a FIFO single-server deterministic-service queue.

    Lindley recursion vectorized as ``D_i = (i+1)d + max_{j<=i}(A_j - j d)``.
    """
    rng = np.random.default_rng(seed)
    arrive = np.cumsum(rng.exponential(1.0 / arrival_rate, size=n))
    idx = np.arange(n)
    depart = (idx + 1) * service + np.maximum.accumulate(arrive - idx * service)
    return float(np.mean(depart - arrive))


def mdc_time_in_system(
    arrival_rate: float, service: float, servers: int, n: int, seed: int
) -> float:
    """Mean sojourn time of a FIFO multi-server deterministic-service queue."""
    import heapq

    rng = np.random.default_rng(seed)
    arrive = np.cumsum(rng.exponential(1.0 / arrival_rate, size=n))
    free = [0.0] * servers
    heapq.heapify(free)
    total = 0.0
    for a in arrive:
        start = max(a, heapq.heappop(free))
        depart = start + service
        heapq.heappush(free, depart)
        total += depart - a
    return total / n


def exact_factorial_float(n: int) -> float:
    """Exact integer factorial converted to float (overflow-safe oracle)."""
    return float(math.factorial(n))
