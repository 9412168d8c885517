"""Clustered EV-fleet load model.

Charging is modeled as chains of serial, non-interruptible subtasks. An EV
of class q sits in subclass s of a chain with subclasses 0..S; each
authorized activation moves it from s to s+1 and draws a class-specific
pulse power for exactly one epoch. The module tracks integer per-cluster
populations, cumulative activation counters, and the minimum-activation
thresholds that encode hard per-class completion deadlines.

Conventions: epochs are 1-based (t = 1..T, t = 0 is the initial condition),
subclasses are 1-based at runtime (subclass 0 is never populated). Per-class
arrays are padded so index s addresses subclass s directly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

__all__ = [
    "ModelError",
    "NoMatchingClass",
    "InfeasibleRequest",
    "InfeasibleDeadline",
    "InvalidDecision",
    "ClusterIndex",
    "ChargeRequest",
    "ClusterSpec",
    "MinActivation",
    "FleetModel",
    "FleetState",
    "ActivationDecision",
    "Violation",
    "DecisionReport",
    "classify",
    "feasibility_check",
    "build_min_activation",
    "validate_decision",
    "step",
    "zero_decision",
]


class ModelError(Exception):
    """Base error for fleet-model operations."""


class NoMatchingClass(ModelError):
    """No cluster class matches a request's pulse tag and deadline."""


class InfeasibleRequest(ModelError):
    """A request needs more energy than its class chain can deliver."""


class InfeasibleDeadline(ModelError):
    """An EV cannot finish by its class deadline even if always activated."""


class InvalidDecision(ModelError):
    """An activation decision violated the per-epoch decision constraints."""

    def __init__(self, report: "DecisionReport"):
        self.report = report
        lines = "; ".join(str(v) for v in report.violations[:8])
        more = "" if len(report.violations) <= 8 else f" (+{len(report.violations) - 8} more)"
        super().__init__(f"invalid decision at epoch {report.epoch}: {lines}{more}")


class ClusterIndex(NamedTuple):
    """Cluster coordinates: class q, subclass s."""

    q: int
    s: int


@dataclass(frozen=True)
class ChargeRequest:
    """A single EV's charging request.

    ``needed_kwh`` is the energy still required (state of charge stored as
    remaining energy, not as a filled fraction).
    """

    pulse_tag: str
    charge_rate_kw: float
    battery_kwh: float
    deadline_epoch: int
    needed_kwh: float

    def __post_init__(self):
        if self.needed_kwh < 0:
            raise ValueError(f"needed_kwh must be >= 0, got {self.needed_kwh}")
        if self.battery_kwh > 0 and self.needed_kwh > self.battery_kwh:
            raise ValueError("needed_kwh exceeds battery capacity")
        if self.deadline_epoch < 1:
            raise ValueError(f"deadline_epoch must be >= 1, got {self.deadline_epoch}")


@dataclass(frozen=True)
class ClusterSpec:
    """Immutable description of one EV class.

    ``pulse[i]`` is the power in kW drawn while an EV transitions from
    subclass i+1 to i+2, so the chain has ``len(pulse) + 1`` subclasses and
    every class-q EV must reach the last one by epoch ``deadline``.
    """

    class_index: int
    pulse: tuple[float, ...]
    deadline: int
    epoch_minutes: float = 5.0
    pulse_tag: str = ""
    # Suffix aggregates over the remaining chain, filled in __post_init__.
    _suffix_kw: np.ndarray = field(init=False, repr=False, compare=False)
    _mean_rem_kw: np.ndarray = field(init=False, repr=False, compare=False)
    _var_rem: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.class_index < 1:
            raise ValueError("class_index must be >= 1")
        if self.deadline < 1:
            raise ValueError("deadline must be >= 1")
        if self.epoch_minutes <= 0:
            raise ValueError("epoch_minutes must be > 0")
        pulse = tuple(float(g) for g in self.pulse)
        if any(g < 0 for g in pulse):
            raise ValueError("pulse powers must be >= 0")
        if pulse and not any(g > 0 for g in pulse):
            raise ValueError("at least one pulse power must be > 0")
        object.__setattr__(self, "pulse", pulse)
        s_count = len(pulse) + 1
        # _suffix_kw[s] = sum of pulse powers for subtasks s..S-1; index S is 0.
        suffix = np.zeros(s_count + 1)
        if pulse:
            suffix[1:s_count] = np.cumsum(np.asarray(pulse, dtype=float)[::-1])[::-1]
        remaining = np.maximum(s_count - np.arange(s_count + 1), 1)
        mean_rem = suffix / remaining
        var_rem = np.zeros(s_count + 1)
        arr = np.asarray(pulse, dtype=float)
        for s in range(1, s_count):
            var_rem[s] = float(np.sum((arr[s - 1:] - mean_rem[s]) ** 2))
        object.__setattr__(self, "_suffix_kw", suffix)
        object.__setattr__(self, "_mean_rem_kw", mean_rem)
        object.__setattr__(self, "_var_rem", var_rem)

    @property
    def subclass_count(self) -> int:
        return len(self.pulse) + 1

    @property
    def epoch_hours(self) -> float:
        return self.epoch_minutes / 60.0

    def power_kw(self, s: int) -> float:
        """Pulse power for the transition s -> s+1."""
        return self.pulse[s - 1]

    def pulse_array(self) -> np.ndarray:
        """Pulse powers as a float array, entry i for the transition i+1 -> i+2."""
        return np.asarray(self.pulse, dtype=float)

    def remaining_energy_kwh(self, s: int) -> float:
        """Energy deliverable by subtasks s..S-1 (0 for s = S)."""
        return float(self._suffix_kw[s]) * self.epoch_hours

    def remaining_power_kw(self, s: int) -> float:
        """Sum of pulse powers over subtasks s..S-1."""
        return float(self._suffix_kw[s])

    def mean_remaining_kw(self, s: int) -> float:
        """Average pulse power over subtasks s..S-1."""
        return float(self._mean_rem_kw[s])

    def remaining_variance(self, s: int) -> float:
        """Sum of squared deviations of remaining pulse powers from their mean."""
        return float(self._var_rem[s])

    def chain_energy_kwh(self) -> float:
        """Energy delivered by the full chain."""
        return self.remaining_energy_kwh(1)


def classify(
    request: ChargeRequest,
    specs: Sequence[ClusterSpec] | Mapping[int, ClusterSpec],
    energy_tolerance: float = 0.1,
) -> ClusterIndex:
    """Map a charging request onto cluster coordinates (q, s_init).

    The class is the one sharing the request's pulse tag whose deadline is
    the largest quantized deadline <= the request's true deadline (a class
    deadline is never relaxed past the user's). The entry subclass is the
    largest s whose remaining subtasks still deliver at least the required
    energy, so the EV never receives less than it asked for. A request
    exceeding the full chain by more than ``energy_tolerance`` (relative)
    raises InfeasibleRequest; a fully charged EV maps to s_init = S.
    """
    if isinstance(specs, Mapping):
        specs = list(specs.values())
    tagged = [sp for sp in specs if sp.pulse_tag == request.pulse_tag]
    if not tagged:
        raise NoMatchingClass(f"no class with pulse tag {request.pulse_tag!r}")
    eligible = [sp for sp in tagged if sp.deadline <= request.deadline_epoch]
    if not eligible:
        raise NoMatchingClass(
            f"no class with tag {request.pulse_tag!r} and deadline <= {request.deadline_epoch}"
        )
    spec = max(eligible, key=lambda sp: sp.deadline)
    s_count = spec.subclass_count
    needed = request.needed_kwh
    # Tiny relative slack so exact boundary requests are not lost to float noise.
    eps = 1e-9 * max(1.0, needed)
    for s in range(s_count, 0, -1):
        if spec.remaining_energy_kwh(s) + eps >= needed:
            return ClusterIndex(spec.class_index, s)
    full = spec.chain_energy_kwh()
    if needed <= full * (1.0 + energy_tolerance) + eps:
        return ClusterIndex(spec.class_index, 1)
    raise InfeasibleRequest(
        f"request needs {needed:.3f} kWh but the class-{spec.class_index} chain "
        f"delivers at most {full:.3f} kWh"
    )


def feasibility_check(
    fleet: Iterable[tuple[ClusterIndex, int]],
    specs: Mapping[int, ClusterSpec],
) -> list[tuple[ClusterIndex, int]]:
    """Return the fleet entries that cannot finish by their class deadline.

    An EV entering at subclass s with S - s subtasks left needs its first
    activation no later than deadline - (S - s); that epoch must be >= 1.
    Returns an empty list when every entry is schedulable (report, no throw).
    """
    bad = []
    for cluster, count in fleet:
        spec = specs[cluster.q]
        s_count = spec.subclass_count
        if cluster.s >= s_count:
            continue
        if spec.deadline - (s_count - cluster.s) < 1:
            bad.append((cluster, count))
    return bad


@dataclass(frozen=True)
class MinActivation:
    """Per-cluster minimum cumulative activation thresholds.

    ``tables[q]`` has shape (S, T+1); entry [s, t] is the least number of
    cumulative activations from cluster (q, s) consistent with every class-q
    deadline, non-decreasing in t, zero at t = 0. Row 0 is unused padding.
    """

    tables: Mapping[int, np.ndarray]
    horizon: int

    def value(self, q: int, s: int, t: int) -> int:
        return int(self.tables[q][s, t])

    def row(self, q: int, s: int) -> np.ndarray:
        return self.tables[q][s]


def build_min_activation(
    fleet: Iterable[tuple[ClusterIndex, int]],
    specs: Mapping[int, ClusterSpec],
    horizon: int,
) -> MinActivation:
    """Build the minimum-activation tables for a fleet over epochs 1..horizon.

    An EV entering class q at subclass s_init must clear subtask s no later
    than epoch deadline - (S - s), for every s in s_init..S-1; each fleet
    entry adds its count at those epochs and the running sum over t yields
    the threshold table. Raises InfeasibleDeadline when any required epoch
    falls before epoch 1.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    for q, spec in specs.items():
        if spec.deadline > horizon:
            raise ValueError(
                f"class {q} deadline {spec.deadline} exceeds horizon {horizon}"
            )
    increments: dict[int, np.ndarray] = {
        q: np.zeros((spec.subclass_count, horizon + 1), dtype=np.int64)
        for q, spec in specs.items()
    }
    for cluster, count in fleet:
        if count < 0:
            raise ValueError("fleet counts must be >= 0")
        spec = specs[cluster.q]
        s_count = spec.subclass_count
        if not 1 <= cluster.s <= s_count:
            raise ValueError(f"subclass {cluster.s} out of range for class {cluster.q}")
        if cluster.s == s_count or count == 0:
            continue
        first = spec.deadline - (s_count - cluster.s)
        if first < 1:
            raise InfeasibleDeadline(
                f"{count} EV(s) at cluster {tuple(cluster)} cannot finish by "
                f"epoch {spec.deadline}"
            )
        table = increments[cluster.q]
        for s in range(cluster.s, s_count):
            table[s, spec.deadline - (s_count - s)] += count
    tables = {q: np.cumsum(inc, axis=1) for q, inc in increments.items()}
    return MinActivation(tables=tables, horizon=horizon)


@dataclass(frozen=True)
class FleetModel:
    """Immutable per-run bundle: class specs, initial populations, thresholds.

    ``initial_populations[q]`` has shape (S+1,) with entry s = number of
    class-q EVs starting at subclass s. ``passers[q][s]`` counts the EVs
    that ever perform subtask s (those entering at or below s).
    """

    specs: Mapping[int, ClusterSpec]
    initial_populations: Mapping[int, np.ndarray]
    min_activation: MinActivation
    horizon: int
    passers: Mapping[int, np.ndarray] = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        minutes = {sp.epoch_minutes for sp in self.specs.values()}
        if len(minutes) > 1:
            raise ValueError(f"specs disagree on epoch_minutes: {sorted(minutes)}")
        if self.passers is None:
            passers = {}
            for q, spec in self.specs.items():
                n0 = self.initial_populations[q]
                cum = np.cumsum(n0)
                passers[q] = cum  # passers[q][s] = EVs entering at subclass <= s
            object.__setattr__(self, "passers", passers)

    @classmethod
    def build(
        cls,
        fleet: Iterable[tuple[ClusterIndex, int]],
        specs: Mapping[int, ClusterSpec],
        horizon: int,
    ) -> "FleetModel":
        fleet = list(fleet)
        table = build_min_activation(fleet, specs, horizon)
        pops = {
            q: np.zeros(spec.subclass_count + 1, dtype=np.int64)
            for q, spec in specs.items()
        }
        for cluster, count in fleet:
            pops[cluster.q][cluster.s] += count
        return cls(
            specs=dict(specs),
            initial_populations=pops,
            min_activation=table,
            horizon=horizon,
        )

    @property
    def epoch_minutes(self) -> float:
        return next(iter(self.specs.values())).epoch_minutes

    @property
    def epoch_hours(self) -> float:
        return self.epoch_minutes / 60.0

    def class_total(self, q: int) -> int:
        return int(self.initial_populations[q].sum())

    def total_evs(self) -> int:
        return sum(self.class_total(q) for q in self.specs)

    def total_energy_kwh(self) -> float:
        """Energy the whole fleet will draw when every EV completes its chain."""
        total = 0.0
        for q, spec in self.specs.items():
            n0 = self.initial_populations[q]
            for s in range(1, spec.subclass_count + 1):
                if n0[s]:
                    total += n0[s] * spec.remaining_energy_kwh(s)
        return total

    def new_state(self) -> "FleetState":
        pops = {q: arr.copy() for q, arr in self.initial_populations.items()}
        cum = {
            q: np.zeros(spec.subclass_count, dtype=np.int64)
            for q, spec in self.specs.items()
        }
        return FleetState(model=self, epoch=0, populations=pops, cumulative=cum)


@dataclass
class FleetState:
    """Mutable fleet snapshot after ``epoch`` applied decisions.

    ``populations[q][s]`` is the EV count available to the next decision
    (epoch ``epoch + 1``); ``cumulative[q][s]`` counts all activations of
    cluster (q, s) so far. A state is owned by a single simulation run.
    """

    model: FleetModel
    epoch: int
    populations: dict[int, np.ndarray]
    cumulative: dict[int, np.ndarray]

    def copy(self) -> "FleetState":
        return FleetState(
            model=self.model,
            epoch=self.epoch,
            populations={q: a.copy() for q, a in self.populations.items()},
            cumulative={q: a.copy() for q, a in self.cumulative.items()},
        )

    def population(self, q: int, s: int) -> int:
        return int(self.populations[q][s])

    def cumulative_activations(self, q: int, s: int) -> int:
        return int(self.cumulative[q][s])

    def completed(self, q: int) -> int:
        """EVs of class q that reached the end of their chain."""
        return int(self.populations[q][self.model.specs[q].subclass_count])


@dataclass(frozen=True)
class ActivationDecision:
    """Integer activation counts for one epoch.

    ``counts[q]`` has shape (S,); entry s is the number of EVs moved from
    subclass s to s+1 during ``epoch`` (slot 0 is padding and stays 0).
    """

    epoch: int
    counts: Mapping[int, np.ndarray]

    def count(self, q: int, s: int) -> int:
        return int(self.counts[q][s])

    def load_kw(self, specs: Mapping[int, ClusterSpec]) -> float:
        """Aggregate power drawn if this decision is applied."""
        load = 0.0
        for q, d in self.counts.items():
            load += float(np.dot(d[1:], specs[q].pulse_array()))
        return load


def zero_decision(model: FleetModel, epoch: int) -> ActivationDecision:
    counts = {
        q: np.zeros(spec.subclass_count, dtype=np.int64)
        for q, spec in model.specs.items()
    }
    return ActivationDecision(epoch=epoch, counts=counts)


@dataclass(frozen=True)
class Violation:
    cluster: ClusterIndex
    kind: str
    detail: str

    def __str__(self) -> str:
        return f"{tuple(self.cluster)} {self.kind}: {self.detail}"


@dataclass(frozen=True)
class DecisionReport:
    epoch: int
    violations: tuple[Violation, ...]

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_decision(state: FleetState, decision: ActivationDecision) -> DecisionReport:
    """Check a decision against the per-epoch constraints.

    Constraints: counts are non-negative integers, no cluster activates more
    EVs than it currently holds, and the cumulative totals stay at or above
    the minimum-activation thresholds for the decision's epoch.
    """
    t = decision.epoch
    if t != state.epoch + 1:
        raise ValueError(
            f"decision epoch {t} does not follow state epoch {state.epoch}"
        )
    if t > state.model.horizon:
        raise ValueError(f"epoch {t} beyond model horizon {state.model.horizon}")
    violations: list[Violation] = []
    table = state.model.min_activation
    for q, spec in state.model.specs.items():
        d = decision.counts[q]
        n = state.populations[q]
        cum = state.cumulative[q]
        s_count = spec.subclass_count
        if d[0] != 0:
            violations.append(Violation(ClusterIndex(q, 0), "padding", "slot 0 must be 0"))
        for s in range(1, s_count):
            if d[s] < 0:
                violations.append(
                    Violation(ClusterIndex(q, s), "negative", f"count {int(d[s])}")
                )
                continue
            if d[s] > n[s]:
                violations.append(
                    Violation(
                        ClusterIndex(q, s),
                        "exceeds population",
                        f"count {int(d[s])} > population {int(n[s])}",
                    )
                )
            required = table.value(q, s, t)
            if cum[s] + d[s] < required:
                violations.append(
                    Violation(
                        ClusterIndex(q, s),
                        "below minimum activation",
                        f"cumulative {int(cum[s] + d[s])} < required {required}",
                    )
                )
    return DecisionReport(epoch=t, violations=tuple(violations))


def step(state: FleetState, decision: ActivationDecision) -> tuple[FleetState, float]:
    """Apply one epoch's decision; return the advanced state and its load in kW.

    Activated EVs leave subclass s and arrive at s+1 in the returned state;
    the load is the pulse-weighted sum of activation counts. Raises
    InvalidDecision when validation fails.
    """
    report = validate_decision(state, decision)
    if not report.ok:
        raise InvalidDecision(report)
    new_state = state.copy()
    new_state.epoch = decision.epoch
    load = 0.0
    for q, spec in state.model.specs.items():
        d = decision.counts[q]
        s_count = spec.subclass_count
        pops = new_state.populations[q]
        pops[1:s_count] -= d[1:s_count]
        pops[2:s_count + 1] += d[1:s_count]
        new_state.cumulative[q][1:] += d[1:]
        load += float(np.dot(d[1:s_count], spec.pulse_array()))
    return new_state, load
