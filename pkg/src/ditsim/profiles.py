"""Execution-time profiles for diffusion-transformer video serving.

A profile maps ``(resolution, degree of parallelism)`` to the measured
per-step denoising (DiT) time and to the decoder (VAE) time.  Profiles are
collected offline and loaded from a small JSON document; the simulator never
runs real models.  From a profile we derive, per resolution:

* the *change rate* ``z`` of the per-step DiT time between adjacent
  parallelism degrees, ``z = 1 - t(i) / t(i/2)``;
* the *optimal DoP* for the DiT phase: the degree whose doubling gives the
  largest ``z``, clamped to 1 when even the best doubling gains too little;
* end-to-end execution-time estimates ``steps * dit_step + vae``.

VAE time is insensitive to the degree of parallelism, so a profile document
only needs a ``vae_seconds`` value on each resolution's ``dop=1`` record;
it is replicated to the other degrees on load.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

PROFILE_SCHEMA = "dit-profile/1"
DEFAULT_DOP_CANDIDATES = (1, 2, 4, 8)
DEFAULT_GAIN_THRESHOLD = 0.05


class ProfileError(ValueError):
    """Malformed or invariant-violating profile document."""


class ProfileLookupError(LookupError):
    """A required (resolution, dop) entry is missing from the table."""


@dataclass(frozen=True)
class ResolutionClass:
    """A resolution label with a rank used for ordering (low to high)."""

    name: str
    ordinal: int


@dataclass(frozen=True)
class ProfileTable:
    """Immutable measured execution times keyed by (resolution, dop).

    Safe to share read-only across concurrently running simulations.
    """

    resolutions: tuple[ResolutionClass, ...]
    dop_candidates: tuple[int, ...]
    dit_step_time: Mapping[tuple[str, int], float] = field(repr=False)
    vae_time: Mapping[tuple[str, int], float] = field(repr=False)

    def resolution(self, name: str) -> ResolutionClass:
        for res in self.resolutions:
            if res.name == name:
                return res
        raise ProfileLookupError(f"resolution {name!r} is not profiled")

    def has_resolution(self, name: str) -> bool:
        return any(res.name == name for res in self.resolutions)

    def dit_step(self, resolution: str, dop: int) -> float:
        """Per-step DiT time in seconds at the given degree of parallelism."""
        try:
            return self.dit_step_time[(resolution, dop)]
        except KeyError:
            raise ProfileLookupError(
                f"no DiT profile entry for resolution {resolution!r} at dop={dop}"
            ) from None

    def vae(self, resolution: str, dop: int = 1) -> float:
        """VAE time in seconds; the value is replicated across degrees."""
        try:
            return self.vae_time[(resolution, dop)]
        except KeyError:
            raise ProfileLookupError(
                f"no VAE profile entry for resolution {resolution!r} at dop={dop}"
            ) from None

    def profiled_dops(self, resolution: str) -> tuple[int, ...]:
        return tuple(
            d for d in self.dop_candidates if (resolution, d) in self.dit_step_time
        )


@dataclass(frozen=True)
class DopTable:
    """Per-resolution optimal DiT DoP plus the (small) DoP used for the VAE."""

    by_resolution: Mapping[str, int]
    vae_dop: int = 1

    def __post_init__(self) -> None:
        if not _is_power_of_two(self.vae_dop):
            raise ProfileError(f"vae_dop must be a power of two, got {self.vae_dop}")

    def dit_dop(self, resolution: str) -> int:
        try:
            return self.by_resolution[resolution]
        except KeyError:
            raise ProfileLookupError(
                f"no optimal DoP recorded for resolution {resolution!r}"
            ) from None


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _validate_candidates(raw: Any) -> tuple[int, ...]:
    if not isinstance(raw, list) or not raw:
        raise ProfileError("dop_candidates must be a non-empty list")
    cands = []
    for value in raw:
        if not isinstance(value, int) or not _is_power_of_two(value):
            raise ProfileError(f"dop candidate {value!r} is not a power of two")
        cands.append(value)
    if sorted(set(cands)) != cands:
        raise ProfileError("dop_candidates must be strictly increasing")
    if cands[0] != 1:
        raise ProfileError("dop_candidates must include 1")
    return tuple(cands)


def load_profiles(source: str | Path | Mapping[str, Any]) -> ProfileTable:
    """Load and validate a profile document.

    ``source`` is a path to a JSON file or an already-parsed mapping with the
    layout::

        {
          "schema": "dit-profile/1",
          "dop_candidates": [1, 2, 4, 8],
          "entries": [
            {"resolution": "144p", "dop": 1,
             "dit_step_seconds": 0.25, "vae_seconds": 0.3125},
            {"resolution": "144p", "dop": 2, "dit_step_seconds": 0.25},
            ...
          ]
        }

    Every resolution must carry a ``dop=1`` entry with a ``vae_seconds``
    value.  Resolutions are ranked by first appearance.
    """
    if isinstance(source, (str, Path)):
        try:
            with open(source, "r", encoding="utf-8") as handle:
                document = json.load(handle)
        except json.JSONDecodeError as exc:
            raise ProfileError(f"profile document is not valid JSON: {exc}") from exc
    else:
        document = source
    if not isinstance(document, Mapping):
        raise ProfileError("profile document must be a JSON object")
    if document.get("schema") != PROFILE_SCHEMA:
        raise ProfileError(
            f"unsupported profile schema {document.get('schema')!r}; "
            f"expected {PROFILE_SCHEMA!r}"
        )
    candidates = _validate_candidates(document.get("dop_candidates"))
    entries = document.get("entries")
    if not isinstance(entries, list) or not entries:
        raise ProfileError("profile document has no entries")

    resolutions: list[ResolutionClass] = []
    dit: dict[tuple[str, int], float] = {}
    vae: dict[tuple[str, int], float] = {}
    for index, entry in enumerate(entries):
        where = f"entry #{index}"
        if not isinstance(entry, Mapping):
            raise ProfileError(f"{where} is not an object")
        name = entry.get("resolution")
        if not isinstance(name, str) or not name:
            raise ProfileError(f"{where}: missing resolution name")
        dop = entry.get("dop")
        if not isinstance(dop, int) or dop not in candidates:
            raise ProfileError(
                f"{where} ({name}): dop {dop!r} is not one of {list(candidates)}"
            )
        step = entry.get("dit_step_seconds")
        if not isinstance(step, (int, float)) or step <= 0:
            raise ProfileError(f"{where} ({name}, dop={dop}): dit_step_seconds must be > 0")
        if (name, dop) in dit:
            raise ProfileError(f"{where}: duplicate entry for ({name}, dop={dop})")
        if not any(res.name == name for res in resolutions):
            resolutions.append(ResolutionClass(name, len(resolutions)))
        dit[(name, dop)] = float(step)
        if "vae_seconds" in entry:
            vae_s = entry["vae_seconds"]
            if not isinstance(vae_s, (int, float)) or vae_s <= 0:
                raise ProfileError(f"{where} ({name}, dop={dop}): vae_seconds must be > 0")
            vae[(name, dop)] = float(vae_s)

    for res in resolutions:
        if (res.name, 1) not in dit:
            raise ProfileError(f"resolution {res.name!r} has no dop=1 entry")
        if (res.name, 1) not in vae:
            raise ProfileError(f"resolution {res.name!r} has no vae_seconds at dop=1")
        # VAE time is DoP-invariant: replicate each resolution's dop=1 value.
        for dop in candidates:
            vae.setdefault((res.name, dop), vae[(res.name, 1)])

    return ProfileTable(
        resolutions=tuple(resolutions),
        dop_candidates=candidates,
        dit_step_time=dict(dit),
        vae_time=dict(vae),
    )


def change_rate(table: ProfileTable, resolution: str, dop: int) -> float:
    """Fractional reduction of per-step DiT time when doubling ``dop/2 -> dop``.

    Returns ``1 - dit_step(dop) / dit_step(dop/2)``.
    """
    if dop < 2 or dop not in table.dop_candidates or dop // 2 not in table.dop_candidates:
        raise ProfileError(
            f"change rate needs dop and dop/2 in {list(table.dop_candidates)}; got {dop}"
        )
    return 1.0 - table.dit_step(resolution, dop) / table.dit_step(resolution, dop // 2)


def optimal_dop(
    table: ProfileTable,
    resolution: str,
    gain_threshold: float = DEFAULT_GAIN_THRESHOLD,
) -> int:
    """Degree of parallelism with the largest change rate for a resolution.

    When the best change rate is at or below ``gain_threshold`` (or no degree
    above 1 is profiled) the resolution does not benefit from parallelism and
    1 is returned.  Ties pick the smaller degree.  Profiled degrees must be
    contiguous in the candidate list up to the largest one profiled.
    """
    table.resolution(resolution)
    profiled = table.profiled_dops(resolution)
    top = max(profiled)
    required = tuple(d for d in table.dop_candidates if d <= top)
    if profiled != required:
        missing = sorted(set(required) - set(profiled))
        raise ProfileLookupError(
            f"incomplete profile coverage for {resolution!r}: missing dops {missing}"
        )
    best_dop, best_z = 1, float("-inf")
    for dop in profiled:
        if dop < 2:
            continue
        z = change_rate(table, resolution, dop)
        if z > best_z:
            best_dop, best_z = dop, z
    if best_z <= gain_threshold:
        return 1
    return best_dop


def estimate_execution_time(
    table: ProfileTable,
    resolution: str,
    dop: int,
    steps: int,
    vae_dop: int = 1,
) -> float:
    """End-to-end estimate: ``steps * dit_step(resolution, dop) + vae``."""
    if steps <= 0:
        raise ProfileError(f"steps must be positive, got {steps}")
    return steps * table.dit_step(resolution, dop) + table.vae(resolution, vae_dop)


def derive_dop_table(
    table: ProfileTable,
    gain_threshold: float = DEFAULT_GAIN_THRESHOLD,
    vae_dop: int = 1,
) -> DopTable:
    """Compute the optimal DiT DoP for every profiled resolution."""
    return DopTable(
        by_resolution={
            res.name: optimal_dop(table, res.name, gain_threshold)
            for res in table.resolutions
        },
        vae_dop=vae_dop,
    )


def default_profile() -> ProfileTable:
    """The bundled three-resolution synthetic profile.

    Times are dyadic rationals (exact in binary floating point) shaped so
    that 144p gains nothing from parallelism, 240p halves its step time at
    dop=2, and 360p peaks at dop=4 where the VAE phase is exactly 1/7 of the
    end-to-end time.
    """
    text = resources.files("ditsim.data").joinpath("default_profile.json").read_text()
    return load_profiles(json.loads(text))
