from __future__ import annotations

import itertools

import numpy as np
import pytest

from evagg.model import (
    ActivationDecision,
    ClusterIndex,
    ClusterSpec,
    FleetModel,
    FleetState,
)


def make_spec(q=1, pulse=(3.3, 3.3, 3.3), deadline=10, epoch_minutes=5.0, tag="t"):
    return ClusterSpec(
        class_index=q,
        pulse=tuple(pulse),
        deadline=deadline,
        epoch_minutes=epoch_minutes,
        pulse_tag=tag,
    )


def random_small_model(rng: np.random.Generator, horizon=None, max_classes=2,
                       max_subclasses=4, max_evs=10) -> FleetModel:
    """Random feasible instance with a handful of EVs on short chains."""
    n_classes = int(rng.integers(1, max_classes + 1))
    specs = {}
    fleet = []
    horizon = int(horizon if horizon is not None else rng.integers(4, 13))
    for q in range(1, n_classes + 1):
        s_count = int(rng.integers(2, max_subclasses + 1))
        pulse = tuple(float(x) for x in rng.uniform(0.5, 5.0, s_count - 1).round(2))
        deadline = int(rng.integers(s_count, horizon + 1))
        specs[q] = make_spec(q=q, pulse=pulse, deadline=deadline, tag=f"g{q}")
    total = int(rng.integers(1, max_evs + 1))
    for _ in range(total):
        q = int(rng.integers(1, n_classes + 1))
        s_count = specs[q].subclass_count
        # entry subclass chosen so the deadline stays reachable
        lo = max(1, s_count - (specs[q].deadline - 1))
        s = int(rng.integers(lo, s_count + 1))
        fleet.append((ClusterIndex(q, s), 1))
    return FleetModel.build(fleet, specs, horizon)


class PlanSpaceOverflow(Exception):
    """Raised when the brute-force plan space exceeds the requested cap."""


def _monotone_paths(start, floors, hi):
    """All integer sequences v with v[i] >= max(v[i-1], floors[i]), v[i] <= hi."""
    if not floors:
        return [()]
    out = []
    for v in range(max(start, floors[0]), hi + 1):
        for rest in _monotone_paths(v, floors[1:], hi):
            out.append((v,) + rest)
    return out


def _plan_rows(state: FleetState, horizon: int, cap: int):
    """Per-cluster candidate cumulative-count paths for epochs t..horizon.

    Uses the raw threshold tables and per-path population cross-checks, not
    the optimizer's pinned-variable shortcut, so it stays an independent
    reference.
    """
    model = state.model
    t = state.epoch + 1
    rows = []
    index = {}
    for q in sorted(model.specs):
        spec = model.specs[q]
        thresholds = model.min_activation.tables[q]
        passers = model.passers[q]
        n0 = model.initial_populations[q]
        for s in range(1, spec.subclass_count):
            npass = int(passers[s])
            if npass == 0:
                continue
            floors = [int(thresholds[s, ell]) for ell in range(t, horizon + 1)]
            cum = int(state.cumulative[q][s])
            paths = _monotone_paths(cum, floors, npass)
            index[(q, s)] = len(rows)
            rows.append({
                "q": q,
                "s": s,
                "g": spec.power_kw(s),
                "cum": cum,
                "n0": int(n0[s]),
                "up": index.get((q, s - 1), -1),
                "paths": paths,
            })
    total = 1
    for r in rows:
        total *= len(r["paths"])
        if total > cap:
            raise PlanSpaceOverflow(f"plan space exceeds {cap}")
    return rows, total


def enumerate_best_plan(state: FleetState, targets, weights, cap=10_000):
    """Brute-force minimum weighted L1 plan cost over every feasible table.

    Checks monotonicity, threshold floors, and the population caps pairwise
    for each candidate, then scores the load profile against the targets.
    Returns (best objective, number of feasible tables).
    """
    targets = np.asarray(targets, dtype=float)
    weights = np.asarray(weights, dtype=float)
    horizon = state.epoch + len(targets)
    rows, _ = _plan_rows(state, horizon, cap)
    if not rows:
        return float(np.sum(weights * np.abs(targets))), 1
    n_epochs = len(targets)
    loads = []
    for r in rows:
        per_path = []
        for path in r["paths"]:
            prev = r["cum"]
            vals = np.empty(n_epochs)
            for i, v in enumerate(path):
                vals[i] = r["g"] * (v - prev)
                prev = v
            per_path.append(vals)
        loads.append(per_path)
    best = np.inf
    feasible = 0
    for pick in itertools.product(*[range(len(r["paths"])) for r in rows]):
        ok = True
        for i, r in enumerate(rows):
            u = r["up"]
            path = r["paths"][pick[i]]
            for j, v in enumerate(path):
                if u >= 0:
                    up_val = rows[u]["paths"][pick[u]][j - 1] if j else rows[u]["cum"]
                else:
                    up_val = 0
                if v > r["n0"] + up_val:
                    ok = False
                    break
            if not ok:
                break
        if not ok:
            continue
        feasible += 1
        load = np.zeros(n_epochs)
        for i in range(len(rows)):
            load += loads[i][pick[i]]
        obj = float(np.sum(weights * np.abs(load - targets)))
        if obj < best:
            best = obj
    return best, feasible


def random_enumerable_model(rng: np.random.Generator, cap=10_000):
    """Small instance whose whole plan space enumerates under the cap."""
    while True:
        n_classes = int(rng.integers(1, 3))
        horizon = int(rng.integers(4, 8))
        specs = {}
        fleet = []
        for q in range(1, n_classes + 1):
            tasks = int(rng.integers(1, 4))
            pulse = tuple(float(x) for x in rng.uniform(0.5, 4.0, tasks).round(2))
            deadline = int(rng.integers(tasks + 1, horizon + 1))
            specs[q] = make_spec(q=q, pulse=pulse, deadline=deadline, tag=f"g{q}")
        for _ in range(int(rng.integers(1, 5))):
            q = int(rng.integers(1, n_classes + 1))
            s = int(rng.integers(1, specs[q].subclass_count))
            fleet.append((ClusterIndex(q, s), 1))
        model = FleetModel.build(fleet, specs, horizon)
        try:
            _plan_rows(model.new_state(), horizon, cap)
        except PlanSpaceOverflow:
            continue
        return model


def random_valid_decision(state: FleetState, rng: np.random.Generator) -> ActivationDecision:
    """Uniform draw from the decision set at the state's next epoch."""
    t = state.epoch + 1
    counts = {}
    table = state.model.min_activation
    for q, spec in state.model.specs.items():
        s_count = spec.subclass_count
        d = np.zeros(s_count, dtype=np.int64)
        for s in range(1, s_count):
            lo = max(0, table.value(q, s, t) - state.cumulative_activations(q, s))
            hi = state.population(q, s)
            assert lo <= hi, "thresholds outgrew the population: invalid instance"
            d[s] = int(rng.integers(lo, hi + 1))
        counts[q] = d
    return ActivationDecision(epoch=t, counts=counts)


@pytest.fixture
def rng():
    return np.random.default_rng(20260816)
