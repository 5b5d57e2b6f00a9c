"""Latency and cost metrics over simulation results."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

from .engine import RequestRecord, SimResult


class MetricsError(ValueError):
    """Metrics requested over an unusable result set."""


@dataclass(frozen=True)
class MetricsReport:
    """Summary metrics of one run.

    ``monetary_cost`` equals cumulative occupancy under a flat price of one
    unit per GPU-second.
    """

    avg_latency: float
    p99_latency: float
    cumulative_occupancy: float
    monetary_cost: float
    per_request: tuple[RequestRecord, ...]


def nearest_rank_percentile(values: list[float], percentile: float) -> float:
    """Nearest-rank order statistic; deterministic for small samples."""
    if not values:
        raise MetricsError("percentile of an empty sample")
    ordered = sorted(values)
    rank = math.ceil(percentile / 100.0 * len(ordered))
    return ordered[max(rank, 1) - 1]


def compute_metrics(result: SimResult) -> MetricsReport:
    """Latency statistics and occupancy cost for a finished simulation."""
    if not result.requests:
        raise MetricsError("cannot compute metrics over an empty result")
    latencies = [record.latency for record in result.requests]
    avg = sum(latencies) / len(latencies)
    p99 = nearest_rank_percentile(latencies, 99.0)
    occupancy = result.cumulative_occupancy
    return MetricsReport(
        avg_latency=avg,
        p99_latency=p99,
        cumulative_occupancy=occupancy,
        monetary_cost=occupancy,
        per_request=result.requests,
    )


def normalize(
    reports: Mapping[str, MetricsReport]
) -> dict[str, dict[str, float]]:
    """Divide each system's metrics by the per-metric maximum across systems.

    Values land in (0, 1] with at least one exact 1 per metric.
    """
    if len(reports) < 2:
        raise MetricsError("normalization needs at least two systems")
    max_avg = max(report.avg_latency for report in reports.values())
    max_p99 = max(report.p99_latency for report in reports.values())
    max_cost = max(report.monetary_cost for report in reports.values())
    return {
        name: {
            "avg_latency": report.avg_latency / max_avg,
            "p99_latency": report.p99_latency / max_p99,
            "monetary_cost": report.monetary_cost / max_cost,
        }
        for name, report in reports.items()
    }
