"""Slack-per-unit-charge (SPUC) dispatch heuristic.

Each epoch the dispatcher first performs every activation the deadline
thresholds force, then fills remaining headroom toward a power target by
repeatedly activating one EV from the cluster with the highest
slack-per-unit-charge score. The loop keeps admitting single activations
while the accumulated load is at or below the target, so the final load may
overshoot the target by at most one pulse.

Scores depend only on (class, subclass, epoch), never on populations, so the
ranking is computed once per epoch and consumed in sorted order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    ActivationDecision,
    ClusterIndex,
    ClusterSpec,
    FleetState,
    ModelError,
)

__all__ = [
    "DegeneratePulse",
    "InfeasibleMinActivation",
    "SpucRanking",
    "slack",
    "spuc_metric",
    "schedule_epoch",
]


class DegeneratePulse(ModelError):
    """All remaining pulse powers are zero; the score is undefined."""


class InfeasibleMinActivation(ModelError):
    """A forced activation exceeds the cluster population (upstream bug)."""


@dataclass(frozen=True)
class SpucRanking:
    """Per-cluster urgency figures at one epoch.

    ``slack_epochs`` counts spare epochs before the remaining subtasks must
    run back to back; ``sensitivity`` normalizes by the subtask count and
    ``score`` further divides by the mean remaining pulse power, so a larger
    score marks a more flexible cluster (scheduled first when filling toward
    the target). Ties break on larger ``remaining_variance``, then lower
    class and subclass.
    """

    cluster: ClusterIndex
    slack_epochs: int
    sensitivity: float
    score: float
    mean_remaining_kw: float
    remaining_variance: float


def slack(spec: ClusterSpec, s: int, t: int) -> int:
    """Epochs to spare before cluster (q, s) must run without pause.

    Negative only when the deadline is already violated.
    """
    return spec.deadline - (t + spec.subclass_count - s)


def spuc_metric(spec: ClusterSpec, s: int, t: int) -> SpucRanking:
    """Ranking entry for cluster (q, s) at epoch t."""
    remaining = spec.subclass_count - s
    if remaining < 1:
        raise ValueError(f"subclass {s} has no remaining subtasks")
    total_kw = spec.remaining_power_kw(s)
    if total_kw <= 0:
        raise DegeneratePulse(
            f"cluster ({spec.class_index}, {s}) has no remaining pulse power"
        )
    rho = slack(spec, s, t)
    return SpucRanking(
        cluster=ClusterIndex(spec.class_index, s),
        slack_epochs=rho,
        sensitivity=rho / remaining,
        score=rho / total_kw,
        mean_remaining_kw=total_kw / remaining,
        remaining_variance=spec.remaining_variance(s),
    )


def schedule_epoch(
    state: FleetState,
    t: int,
    target_kw: float,
    mode: str = "overshoot",
    picks_out: list | None = None,
) -> ActivationDecision:
    """Build epoch t's activation decision against a power target.

    Forced activations (minimum-activation deficits) come first; clusters
    whose remaining pulse is all zero are drained outright since they cost
    nothing. The remaining clusters are ranked once by score and admitted
    one activation at a time while the load stays at or below ``target_kw``.
    ``mode="closest"`` undoes the final admission when it leaves the load
    farther from the target than stopping would have.

    ``picks_out``, when given, collects the ClusterIndex of every admitted
    activation in order (forced activations are not picks).
    """
    if mode not in ("overshoot", "closest"):
        raise ValueError(f"unknown mode {mode!r}")
    if t != state.epoch + 1:
        raise ValueError(f"epoch {t} does not follow state epoch {state.epoch}")
    model = state.model
    decision_counts: dict[int, np.ndarray] = {}
    load = 0.0

    # forced step: clear threshold deficits, drain zero-power chains
    for q, spec in model.specs.items():
        s_count = spec.subclass_count
        col = model.min_activation.tables[q][:, t]
        cum = state.cumulative[q]
        pops = state.populations[q][:s_count]
        d = np.maximum(col - cum, 0).astype(np.int64)
        d[0] = 0
        over = d > pops
        if over.any():
            s_bad = int(np.nonzero(over)[0][0])
            raise InfeasibleMinActivation(
                f"cluster ({q}, {s_bad}) needs {int(d[s_bad])} forced activations "
                f"but holds {int(pops[s_bad])} EVs"
            )
        if s_count > 1:
            dead = spec._suffix_kw[1:s_count] <= 0
            if dead.any():
                idx = np.nonzero(dead)[0] + 1
                d[idx] = pops[idx]
        decision_counts[q] = d
        load += float(np.dot(d[1:], spec.pulse_array()))

    # rank every populated cluster once; the score ignores populations
    order: list[tuple[float, float, int, int]] = []
    for q, spec in model.specs.items():
        s_count = spec.subclass_count
        pops = state.populations[q]
        for s in range(1, s_count):
            if pops[s] <= 0 or spec._suffix_kw[s] <= 0:
                continue
            r = spuc_metric(spec, s, t)
            order.append((-r.score, -r.remaining_variance, q, s))
    order.sort()

    pos = 0
    last_pick = None
    prev_load = load
    while load <= target_kw and pos < len(order):
        _, _, q, s = order[pos]
        if decision_counts[q][s] >= state.populations[q][s]:
            pos += 1
            continue
        decision_counts[q][s] += 1
        prev_load = load
        load += state.model.specs[q].power_kw(s)
        last_pick = (q, s)
        if picks_out is not None:
            picks_out.append(ClusterIndex(q, s))

    if (
        mode == "closest"
        and last_pick is not None
        and abs(load - target_kw) > abs(prev_load - target_kw)
    ):
        q, s = last_pick
        decision_counts[q][s] -= 1
        if picks_out is not None:
            picks_out.pop()

    return ActivationDecision(epoch=t, counts=decision_counts)
