"""Synthetic night scenarios: cluster grid, fleet draws, and wind signal.

The default grid crosses four pulse groups with five quantized deadlines,
giving twenty EV classes. Fleets are drawn per EV (group and deadline chosen
uniformly, required energy lognormal, clipped to what the chain can deliver)
and aggregated into cluster counts. The wind-following signal is a clipped
AR(1) series that goes quiet after a configurable number of epochs; a CSV
loader accepts externally produced series with the same shape.

Everything here is a pure function of (config, seed): one seed, one scenario,
bit for bit.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field, fields

import numpy as np

from .model import (
    ChargeRequest,
    ClusterIndex,
    ClusterSpec,
    classify,
    feasibility_check,
)

__all__ = [
    "ScenarioError",
    "ParseError",
    "LengthMismatch",
    "PulseGroup",
    "ScenarioConfig",
    "Scenario",
    "PAPER_GROUPS",
    "build_cluster_specs",
    "sample_fleet",
    "generate_wind_signal",
    "load_wind_csv",
    "generate_scenario",
]

log = logging.getLogger(__name__)


class ScenarioError(Exception):
    """Base error for scenario generation and ingestion."""


class ParseError(ScenarioError):
    """A wind CSV row could not be parsed."""


class LengthMismatch(ScenarioError):
    """A wind CSV does not cover exactly the configured night."""


@dataclass(frozen=True)
class PulseGroup:
    """One family of charging profiles sharing shape and energy statistics.

    ``soc_mu`` and ``soc_sigma`` parameterize the lognormal draw of required
    energy in kWh (the underlying normal's mean and standard deviation).
    """

    shape: str
    peak_kw: float
    max_duration_hours: float
    soc_mu: float
    soc_sigma: float

    def __post_init__(self):
        if self.shape not in ("rectangular", "triangular"):
            raise ValueError(f"unknown pulse shape {self.shape!r}")
        if self.peak_kw <= 0:
            raise ValueError("peak_kw must be > 0")
        if self.max_duration_hours <= 0:
            raise ValueError("max_duration_hours must be > 0")
        if self.soc_sigma <= 0:
            raise ValueError("soc_sigma must be > 0")

    @property
    def tag(self) -> str:
        return f"{self.shape[:4]}-{self.peak_kw:g}kw-{self.max_duration_hours:g}h"


PAPER_GROUPS: tuple[PulseGroup, ...] = (
    PulseGroup("rectangular", 1.1, 8.0, soc_mu=3.0, soc_sigma=1.2),
    PulseGroup("triangular", 2.2, 8.0, soc_mu=3.0, soc_sigma=1.2),
    PulseGroup("rectangular", 3.3, 4.0, soc_mu=1.0, soc_sigma=0.58),
    PulseGroup("triangular", 6.6, 4.0, soc_mu=1.0, soc_sigma=0.58),
)


@dataclass(frozen=True)
class ScenarioConfig:
    fleet_size_mean: int = 1000
    night_epochs: int = 144
    epoch_minutes: float = 5.0
    deadline_options: int = 5
    wind_cap_kw: float = 60.0
    wind_active_epochs: int = 108
    rng_seed: int = 0
    wind_phi: float = 0.9
    wind_noise_kw: float = 8.7
    triangle_ramp: str = "falling"
    resample_cap: int = 1000
    groups: tuple[PulseGroup, ...] = PAPER_GROUPS

    def __post_init__(self):
        if self.fleet_size_mean <= 0 or self.night_epochs <= 0:
            raise ValueError("fleet size and night length must be > 0")
        if self.epoch_minutes <= 0 or self.deadline_options <= 0:
            raise ValueError("epoch_minutes and deadline_options must be > 0")
        if self.wind_cap_kw <= 0:
            raise ValueError("wind_cap_kw must be > 0")
        if not 0 < self.wind_active_epochs <= self.night_epochs:
            raise ValueError("wind_active_epochs must lie in 1..night_epochs")
        if not 0 <= self.wind_phi < 1:
            raise ValueError("wind_phi must lie in [0, 1)")
        if self.wind_noise_kw < 0:
            raise ValueError("wind_noise_kw must be >= 0")
        if self.triangle_ramp not in ("falling", "rising"):
            raise ValueError(f"unknown triangle_ramp {self.triangle_ramp!r}")
        if self.resample_cap < 1:
            raise ValueError("resample_cap must be >= 1")
        if not self.groups:
            raise ValueError("at least one pulse group required")


def _chain_length(group: PulseGroup, cfg: ScenarioConfig) -> int:
    """Subclass count of the group's full chain."""
    steps = group.max_duration_hours * 60.0 / cfg.epoch_minutes
    if abs(steps - round(steps)) > 1e-9:
        raise ScenarioError(
            f"group {group.tag}: duration is not a whole number of epochs"
        )
    return int(round(steps)) + 1


def _pulse_powers(group: PulseGroup, s_count: int, ramp: str) -> tuple[float, ...]:
    steps = s_count - 1
    if group.shape == "rectangular":
        return (group.peak_kw,) * steps
    weights = np.arange(steps, 0, -1) if ramp == "falling" else np.arange(1, steps + 1)
    return tuple(group.peak_kw * w / steps for w in weights)


def deadline_grid(group: PulseGroup, cfg: ScenarioConfig) -> list[int]:
    """Quantized deadline epochs: evenly spaced from chain length to night end."""
    s_count = _chain_length(group, cfg)
    if s_count > cfg.night_epochs:
        raise ScenarioError(
            f"group {group.tag}: chain of {s_count} subclasses cannot fit a "
            f"{cfg.night_epochs}-epoch night"
        )
    raw = np.linspace(s_count, cfg.night_epochs, cfg.deadline_options)
    options = [int(np.floor(x + 0.5)) for x in raw]
    if len(set(options)) != len(options):
        raise ScenarioError(f"group {group.tag}: deadline options collide")
    return options


def build_cluster_specs(cfg: ScenarioConfig) -> dict[int, ClusterSpec]:
    """Cross every pulse group with its deadline grid.

    Class indices run group-major, deadlines ascending, starting at 1.
    """
    specs: dict[int, ClusterSpec] = {}
    q = 1
    for group in cfg.groups:
        s_count = _chain_length(group, cfg)
        pulse = _pulse_powers(group, s_count, cfg.triangle_ramp)
        for deadline in deadline_grid(group, cfg):
            specs[q] = ClusterSpec(
                class_index=q,
                pulse=pulse,
                deadline=deadline,
                epoch_minutes=cfg.epoch_minutes,
                pulse_tag=group.tag,
            )
            q += 1
    return specs


def sample_fleet(
    specs: dict[int, ClusterSpec],
    cfg: ScenarioConfig,
    rng: np.random.Generator,
) -> list[tuple[ClusterIndex, int]]:
    """Draw one night's fleet, aggregated into (cluster, count) pairs.

    Fleet size is Poisson around the configured mean. Each EV picks a pulse
    group and a deadline option uniformly and a required energy from the
    group's lognormal, clipped to what the chain can deliver; draws that
    cannot be scheduled are redrawn up to ``resample_cap`` times.
    """
    by_tag: dict[str, list[ClusterSpec]] = {}
    for spec in specs.values():
        by_tag.setdefault(spec.pulse_tag, []).append(spec)
    for tagged in by_tag.values():
        tagged.sort(key=lambda sp: sp.deadline)
    size = int(rng.poisson(cfg.fleet_size_mean))
    counts: dict[ClusterIndex, int] = {}
    for _ in range(size):
        for _attempt in range(cfg.resample_cap):
            group = cfg.groups[int(rng.integers(len(cfg.groups)))]
            options = by_tag[group.tag]
            spec = options[int(rng.integers(len(options)))]
            chain_max = spec.chain_energy_kwh()
            energy = min(float(rng.lognormal(group.soc_mu, group.soc_sigma)), chain_max)
            request = ChargeRequest(
                pulse_tag=group.tag,
                charge_rate_kw=group.peak_kw,
                battery_kwh=chain_max,
                deadline_epoch=spec.deadline,
                needed_kwh=energy,
            )
            cluster = classify(request, specs)
            if not feasibility_check([(cluster, 1)], specs):
                counts[cluster] = counts.get(cluster, 0) + 1
                break
        else:
            raise ScenarioError(
                f"gave up after {cfg.resample_cap} redraws; the group/deadline "
                "grid leaves some draws unschedulable"
            )
    return sorted(counts.items())


def generate_wind_signal(cfg: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    """Clipped AR(1) dispatch series, quiet after the active window.

    Starts from the stationary distribution so early epochs look like late
    ones; each step is clipped to the cap before feeding the recursion.
    """
    phi = cfg.wind_phi
    noise = cfg.wind_noise_kw
    cap = cfg.wind_cap_kw
    a = np.zeros(cfg.night_epochs)
    if noise == 0.0:
        return a
    stationary_sd = noise / np.sqrt(1.0 - phi * phi)
    x = float(np.clip(rng.normal(0.0, stationary_sd), -cap, cap))
    a[0] = x
    for t in range(1, cfg.wind_active_epochs):
        x = float(np.clip(phi * x + rng.normal(0.0, noise), -cap, cap))
        a[t] = x
    return a


def load_wind_csv(path: str, cfg: ScenarioConfig) -> np.ndarray:
    """Read a dispatch series with header ``epoch,a_kw``.

    Epochs must be 1-based and contiguous and cover the whole night; values
    beyond the cap are clipped with a logged count.
    """
    values: list[float] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["epoch", "a_kw"]:
            raise ParseError("line 1: expected header 'epoch,a_kw'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ParseError(f"line {lineno}: expected 2 fields, got {len(row)}")
            try:
                epoch = int(row[0])
                value = float(row[1])
            except ValueError as exc:
                raise ParseError(f"line {lineno}: {exc}") from exc
            if epoch != len(values) + 1:
                raise ParseError(
                    f"line {lineno}: epoch {epoch} out of order, expected {len(values) + 1}"
                )
            values.append(value)
    if len(values) != cfg.night_epochs:
        raise LengthMismatch(
            f"{path}: {len(values)} epochs, config wants {cfg.night_epochs}"
        )
    a = np.asarray(values)
    clipped = int(np.sum(np.abs(a) > cfg.wind_cap_kw))
    if clipped:
        log.warning("%s: clipped %d values beyond +-%g kW", path, clipped, cfg.wind_cap_kw)
        a = np.clip(a, -cfg.wind_cap_kw, cfg.wind_cap_kw)
    return a


@dataclass(frozen=True)
class Scenario:
    """One fully drawn night: class grid, fleet counts, and dispatch series."""

    config: ScenarioConfig
    specs: dict[int, ClusterSpec] = field(repr=False)
    fleet: tuple[tuple[ClusterIndex, int], ...]
    wind: np.ndarray = field(repr=False)

    def fingerprint(self) -> str:
        """Content hash; two traces are comparable iff this matches."""
        h = hashlib.sha256()
        for f in fields(ScenarioConfig):
            if f.name == "groups":
                continue
            h.update(f"{f.name}={getattr(self.config, f.name)!r};".encode())
        for q in sorted(self.specs):
            sp = self.specs[q]
            h.update(f"q{q}:{sp.pulse_tag}:d{sp.deadline}:".encode())
            h.update(np.asarray(sp.pulse).tobytes())
        for cluster, count in self.fleet:
            h.update(f"({cluster.q},{cluster.s})x{count};".encode())
        h.update(self.wind.tobytes())
        return h.hexdigest()


def generate_scenario(cfg: ScenarioConfig) -> Scenario:
    """Draw the whole night from the config's seed."""
    rng = np.random.default_rng(cfg.rng_seed)
    specs = build_cluster_specs(cfg)
    fleet = tuple(sample_fleet(specs, cfg, rng))
    wind = generate_wind_signal(cfg, rng)
    return Scenario(config=cfg, specs=specs, fleet=fleet, wind=wind)
