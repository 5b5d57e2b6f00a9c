"""Seeded, reproducible request arrival streams.

Arrivals follow a Poisson process (i.i.d. exponential interarrival gaps at
the configured rate) or, in burst mode, all land at t=0 to model an extreme
load spike.  Resolutions are assigned by exact stratification: per-resolution
counts come from largest-remainder rounding of the configured proportions,
then the assignment order is shuffled by the seed.  Identical specs produce
byte-identical streams.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

WORKLOAD_SCHEMA = "dit-workload/1"

DEFAULT_DENOISE_STEPS = 30
DEFAULT_FRAMES = 51


class WorkloadError(ValueError):
    """Invalid workload specification or record file."""


@dataclass(frozen=True)
class WorkloadSpec:
    """Parameters of one synthetic arrival stream.

    ``frames`` is carried as metadata only; profiled times already embed the
    frame count.
    """

    proportions: Mapping[str, float]
    total_requests: int
    arrival_rate: float | None = None  # requests per second; ignored in burst mode
    burst: bool = False
    seed: int = 0
    denoise_steps: int = DEFAULT_DENOISE_STEPS
    frames: int = DEFAULT_FRAMES
    name: str = ""

    def __post_init__(self) -> None:
        if self.total_requests < 1:
            raise WorkloadError("total_requests must be at least 1")
        if not self.proportions:
            raise WorkloadError("proportions must not be empty")
        total = sum(self.proportions.values())
        if abs(total - 1.0) > 1e-9:
            raise WorkloadError(f"proportions must sum to 1, got {total!r}")
        if any(p < 0 for p in self.proportions.values()):
            raise WorkloadError("proportions must be non-negative")
        if not self.burst and (self.arrival_rate is None or self.arrival_rate <= 0):
            raise WorkloadError("arrival_rate must be positive unless burst is set")
        if self.denoise_steps < 1:
            raise WorkloadError("denoise_steps must be at least 1")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        return "burst" if self.burst else f"rate{self.arrival_rate:g}"


@dataclass(frozen=True)
class ArrivalRecord:
    request_id: int
    arrival_time: float
    resolution: str
    denoise_steps: int


def stratified_counts(
    proportions: Mapping[str, float], total: int
) -> dict[str, int]:
    """Largest-remainder rounding of ``total * proportion`` per resolution.

    Counts differ from the exact shares by less than one; ties on the
    fractional remainder break by insertion order of ``proportions``.
    """
    shares = {name: total * frac for name, frac in proportions.items()}
    counts = {name: int(share) for name, share in shares.items()}
    leftover = total - sum(counts.values())
    order = sorted(
        proportions,
        key=lambda name: (-(shares[name] - counts[name]), list(proportions).index(name)),
    )
    for name in order[:leftover]:
        counts[name] += 1
    return counts


def generate(spec: WorkloadSpec) -> list[ArrivalRecord]:
    """Produce the arrival stream for ``spec``; deterministic in the seed.

    Draw order is fixed: interarrival gaps first (skipped for bursts), then
    one permutation for the stratified resolution assignment.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.total_requests
    if spec.burst:
        arrival_times = np.zeros(n)
    else:
        gaps = rng.exponential(1.0 / spec.arrival_rate, size=n)
        arrival_times = np.cumsum(gaps)

    counts = stratified_counts(spec.proportions, n)
    pool: list[str] = []
    for name in spec.proportions:
        pool.extend([name] * counts[name])
    order = rng.permutation(n)
    resolutions = [pool[i] for i in order]

    return [
        ArrivalRecord(
            request_id=i,
            arrival_time=float(arrival_times[i]),
            resolution=resolutions[i],
            denoise_steps=spec.denoise_steps,
        )
        for i in range(n)
    ]


def save_workload(records: Iterable[ArrivalRecord], path: str | Path) -> None:
    """Export arrivals as a line-delimited record file for later replay."""
    records = list(records)
    with open(path, "w", encoding="utf-8") as handle:
        header = {"schema": WORKLOAD_SCHEMA, "total_requests": len(records)}
        handle.write(json.dumps(header) + "\n")
        for rec in records:
            handle.write(
                json.dumps(
                    {
                        "request_id": rec.request_id,
                        "arrival_time": rec.arrival_time,
                        "resolution": rec.resolution,
                        "denoise_steps": rec.denoise_steps,
                    }
                )
                + "\n"
            )


def load_workload(path: str | Path) -> list[ArrivalRecord]:
    """Read an exported arrival stream back for replay."""
    with open(path, "r", encoding="utf-8") as handle:
        lines = [line for line in handle.read().splitlines() if line.strip()]
    if not lines:
        raise WorkloadError(f"{path}: empty workload file")
    header = json.loads(lines[0])
    if header.get("schema") != WORKLOAD_SCHEMA:
        raise WorkloadError(
            f"{path}: unsupported workload schema {header.get('schema')!r}"
        )
    records = []
    previous = float("-inf")
    for line in lines[1:]:
        raw = json.loads(line)
        rec = ArrivalRecord(
            request_id=int(raw["request_id"]),
            arrival_time=float(raw["arrival_time"]),
            resolution=str(raw["resolution"]),
            denoise_steps=int(raw["denoise_steps"]),
        )
        if rec.arrival_time < previous:
            raise WorkloadError(f"{path}: arrival times must be non-decreasing")
        previous = rec.arrival_time
        records.append(rec)
    if len(records) != int(header.get("total_requests", len(records))):
        raise WorkloadError(f"{path}: record count does not match header")
    return records


def empirical_proportions(records: Iterable[ArrivalRecord]) -> dict[str, float]:
    """Resolution mix of an arrival stream (used when replaying a file)."""
    records = list(records)
    counts: dict[str, int] = {}
    for rec in records:
        counts[rec.resolution] = counts.get(rec.resolution, 0) + 1
    total = len(records)
    return {name: count / total for name, count in counts.items()}
