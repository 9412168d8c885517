"""Receding-horizon charging optimizer.

Each epoch the optimizer forecasts the dispatch signal, builds an integer
program over cumulative activation counts for the remaining night, solves it
exactly (branch-and-bound) or approximately (LP relaxation plus rounding
repair), commits only the first epoch's activations, and at hour boundaries
rewrites the not-yet-bought hours of the bulk purchase to the hourly mean of
the planned load.

Cumulative counts keep every chain constraint at two nonzeros: monotonicity
D(l-1) <= D(l), completion thresholds as lower bounds, and population caps
D_s(l) <= n_s(0) + D_{s-1}(l-1). Every class has a single deadline, so each
cluster's threshold is a one-jump step function; at and after the jump the
count is pinned to the cluster's pass-through total. Pinned epochs contribute
constants instead of variables, so the program shrinks as the night goes on.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import lp
from .model import (
    ActivationDecision,
    FleetModel,
    FleetState,
    InvalidDecision,
    validate_decision,
    zero_decision,
)

__all__ = [
    "MpcError",
    "InfeasibleProgram",
    "MpcConfig",
    "BulkPurchase",
    "DispatchForecast",
    "MpcProgram",
    "PlanSolution",
    "MpcStepResult",
    "forecast_dispatch",
    "build_program",
    "solve_program",
    "update_bulk_purchase",
    "initial_bulk_purchase",
    "schedule_epoch",
]


class MpcError(Exception):
    """Base error for the receding-horizon optimizer."""


class InfeasibleProgram(MpcError):
    """The activation program admits no feasible plan."""


@dataclass(frozen=True)
class MpcConfig:
    """Optimizer settings for one night.

    ``horizon_end`` is the last epoch of the night. The look-ahead runs from
    the current epoch through ``lookahead`` epochs (whole remaining night
    when None). ``penalty_weight`` prices deviations inside the current hour
    relative to deviations in later, still-tradable hours. ``solver_mode``
    "exact" proves integer optimality by branch-and-bound under
    ``node_budget``; "relaxed" rounds the LP relaxation and polishes the
    result (full 1-opt sweeps up to ``polish_var_limit`` integer variables,
    first-epoch greedy adjustment above that), then refines programs of at
    most ``refine_var_limit`` variables with a branch-and-bound capped at
    ``refine_node_budget`` nodes, keeping the better plan.
    """

    horizon_end: int
    penalty_weight: float = 10.0
    epochs_per_hour: int = 12
    solver_mode: str = "relaxed"
    rounding_tol: float = 1e-6
    node_budget: int = 100_000
    lookahead: int | None = None
    polish_var_limit: int = 400
    polish_sweep_limit: int = 60
    refine_var_limit: int = 80
    refine_node_budget: int = 4000
    engine: str = "auto"
    debug_dir: str | None = None

    def __post_init__(self):
        if self.horizon_end < 1:
            raise ValueError("horizon_end must be >= 1")
        if self.penalty_weight <= 0:
            raise ValueError("penalty_weight must be > 0")
        if self.epochs_per_hour < 1:
            raise ValueError("epochs_per_hour must be >= 1")
        if self.solver_mode not in ("exact", "relaxed"):
            raise ValueError(f"unknown solver_mode {self.solver_mode!r}")
        if not 0.0 <= self.rounding_tol < 0.5:
            raise ValueError("rounding_tol must be in [0, 0.5)")
        if self.lookahead is not None and self.lookahead < 1:
            raise ValueError("lookahead must be >= 1")

    @property
    def hour_count(self) -> int:
        return -(-self.horizon_end // self.epochs_per_hour)

    def hour_of(self, t: int) -> int:
        return (t - 1) // self.epochs_per_hour + 1

    def hour_span(self, k: int) -> tuple[int, int]:
        """First and last epoch of hour k (the last hour may run short)."""
        first = (k - 1) * self.epochs_per_hour + 1
        return first, min(k * self.epochs_per_hour, self.horizon_end)


@dataclass(frozen=True)
class BulkPurchase:
    """Hourly-constant power bought ahead of time, one entry per epoch.

    ``values[t-1]`` is the purchase in kW during epoch t. Entries are real
    valued (only activation counts are integers) and every hour's epochs
    must share a single value.
    """

    values: np.ndarray
    epochs_per_hour: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if v.ndim != 1 or len(v) == 0:
            raise ValueError("values must be a non-empty 1-d array")
        if self.epochs_per_hour < 1:
            raise ValueError("epochs_per_hour must be >= 1")
        d = self.epochs_per_hour
        for k0 in range(0, len(v), d):
            block = v[k0:k0 + d]
            if not np.all(block == block[0]):
                raise ValueError(f"purchase not constant within hour {k0 // d + 1}")

    @property
    def horizon(self) -> int:
        return len(self.values)

    def value(self, t: int) -> float:
        return float(self.values[t - 1])

    def hourly(self) -> np.ndarray:
        """One value per hour."""
        return self.values[::self.epochs_per_hour].copy()

    def with_hourly_values(self, updates: Mapping[int, float]) -> "BulkPurchase":
        """New purchase with the given hours set to new constant levels."""
        v = self.values.copy()
        d = self.epochs_per_hour
        for k, level in updates.items():
            first = (k - 1) * d
            if not 0 <= first < len(v):
                raise IndexError(f"hour {k} outside the purchase horizon")
            v[first:k * d] = float(level)
        return BulkPurchase(values=v, epochs_per_hour=d)

    @classmethod
    def flat(cls, level: float, horizon: int, epochs_per_hour: int) -> "BulkPurchase":
        return cls(values=np.full(horizon, float(level)), epochs_per_hour=epochs_per_hour)


@dataclass(frozen=True)
class DispatchForecast:
    """Expected dispatch signal for epochs start_epoch onward."""

    start_epoch: int
    expected: np.ndarray

    def value(self, t: int) -> float:
        i = t - self.start_epoch
        if not 0 <= i < len(self.expected):
            raise IndexError(f"epoch {t} outside forecast range")
        return float(self.expected[i])


def forecast_dispatch(a_t: float, t: int, cfg: MpcConfig) -> DispatchForecast:
    """Persist the last observation through the current hour, zero after.

    The signal is only observable in real time: the remaining epochs of the
    running hour take the value just seen, later hours fall back to zero.
    """
    if not 1 <= t <= cfg.horizon_end:
        raise ValueError(f"epoch {t} outside 1..{cfg.horizon_end}")
    expected = np.zeros(cfg.horizon_end - t + 1)
    _, hour_last = cfg.hour_span(cfg.hour_of(t))
    expected[:hour_last - t + 1] = a_t
    return DispatchForecast(start_epoch=t, expected=expected)


# ---------------------------------------------------------- program assembly


@dataclass
class _Cluster:
    """Per-(class, subclass) bookkeeping for one solve."""

    q: int
    s: int
    pulse_kw: float
    npass: int       # EVs that ever perform this subtask
    jump_epoch: int  # threshold steps to npass here; count pinned afterward
    cum: int         # activations already performed
    n0: int          # initial population of the subclass
    first: int = 0   # earliest epoch the count can move
    count: int = 0   # optimization variables, epochs first..first+count-1
    col0: int = 1    # table column of the first variable
    offset: int = -1
    up: int = -1     # list index of (q, s-1), -1 if absent
    down: int = -1


def _collect_clusters(state: FleetState, t: int, hz: int) -> tuple[list[_Cluster], int]:
    model = state.model
    clusters: list[_Cluster] = []
    index: dict[tuple[int, int], int] = {}
    for q in sorted(model.specs):
        spec = model.specs[q]
        passers = model.passers[q]
        n0 = model.initial_populations[q]
        cum = state.cumulative[q]
        pop = state.populations[q]
        s_count = spec.subclass_count
        # an EV now in the nearest occupied subclass at or below s needs one
        # epoch per intervening subtask before it can perform subtask s, so
        # counts below that reach are constants, not variables
        reach = 0
        seen = False
        for s in range(1, s_count):
            if pop[s] > 0:
                reach, seen = 0, True
            elif seen:
                reach += 1
            npass = int(passers[s])
            if npass == 0:
                continue
            jump = spec.deadline - (s_count - s)
            c = int(cum[s])
            if npass == c:
                first = hz + 1
            elif not seen:
                raise InfeasibleProgram(
                    f"class {q} subclass {s} needs {npass - c} more passes "
                    "with every subclass at or below it empty"
                )
            else:
                first = t + reach
                if first > jump:
                    raise InfeasibleProgram(
                        f"class {q} subclass {s} cannot reach its threshold "
                        f"step at epoch {jump}"
                    )
            cl = _Cluster(
                q=q,
                s=s,
                pulse_kw=spec.power_kw(s),
                npass=npass,
                jump_epoch=jump,
                cum=c,
                n0=int(n0[s]),
                first=first,
                col0=first - t + 1,
            )
            cl.count = max(0, min(jump - 1, hz) - first + 1)
            index[(q, s)] = len(clusters)
            clusters.append(cl)
    n_int = 0
    for i, cl in enumerate(clusters):
        cl.offset = n_int if cl.count else -1
        n_int += cl.count
        j = index.get((cl.q, cl.s - 1), -1)
        cl.up = j
        if j >= 0:
            clusters[j].down = i
    return clusters, n_int


def _chain_rows(clusters: list[_Cluster], n_int: int) -> tuple[lp.RowBuilder, np.ndarray, np.ndarray]:
    """Monotonicity and population rows plus variable bounds."""
    ub = lp.RowBuilder()
    lo = np.empty(n_int)
    hi = np.empty(n_int)
    for cl in clusters:
        c = cl.count
        if c == 0:
            continue
        o = cl.offset
        lo[o:o + c] = cl.cum
        hi[o:o + c] = cl.npass
        if c > 1:
            jj = np.arange(c - 1)
            rows = np.repeat(jj, 2)
            cols = np.empty(2 * (c - 1), dtype=np.int64)
            vals = np.tile([1.0, -1.0], c - 1)
            cols[0::2] = o + jj
            cols[1::2] = o + jj + 1
            ub.add_block(rows, cols, vals, np.zeros(c - 1))
        if cl.up < 0:
            continue
        # population cap against the upstream count one epoch earlier; where
        # that column is constant the cap tightens the bound instead, and
        # past the upstream jump the cap equals npass and is dropped
        up = clusters[cl.up]
        ee = cl.first - 1 + np.arange(c)
        if up.count:
            kk = ee - up.first
            var = (kk >= 0) & (ee < up.jump_epoch)
        else:
            kk = np.zeros(c, dtype=np.int64)
            var = np.zeros(c, dtype=bool)
        nc = int(var.sum())
        if nc:
            jj = np.flatnonzero(var)
            rows = np.repeat(np.arange(nc), 2)
            cols = np.empty(2 * nc, dtype=np.int64)
            vals = np.tile([1.0, -1.0], nc)
            cols[0::2] = o + jj
            cols[1::2] = up.offset + kk[var]
            ub.add_block(rows, cols, vals, np.full(nc, float(cl.n0)))
        pinned = ~var & (ee < up.jump_epoch)
        if pinned.any():
            idx = o + np.flatnonzero(pinned)
            hi[idx] = np.minimum(hi[idx], cl.n0 + up.cum)
    return ub, lo, hi


@dataclass
class MpcProgram:
    """Assembled optimization for epochs start_epoch..end_epoch.

    ``table`` convention used throughout: one row per cluster, column j
    holding the cumulative count at epoch start_epoch - 1 + j (column 0 is
    the pre-decision state).
    """

    prog: lp.IntegerProgram
    clusters: list
    model: FleetModel
    start_epoch: int
    end_epoch: int
    targets: np.ndarray
    weights: np.ndarray
    n_int: int

    @property
    def width(self) -> int:
        return self.end_epoch - self.start_epoch + 2

    def table_from_x(self, x: np.ndarray) -> np.ndarray:
        table = np.empty((len(self.clusters), self.width))
        for i, cl in enumerate(self.clusters):
            row = table[i]
            row[:] = cl.cum
            if cl.count:
                c0 = cl.first - self.start_epoch + 1
                row[c0:c0 + cl.count] = x[cl.offset:cl.offset + cl.count]
            pinned_from = cl.jump_epoch - self.start_epoch + 1
            if pinned_from < self.width:
                row[max(pinned_from, 1):] = cl.npass
        return table

    def load_profile(self, table: np.ndarray) -> np.ndarray:
        if not len(self.clusters):
            return np.zeros(self.end_epoch - self.start_epoch + 1)
        g = np.array([cl.pulse_kw for cl in self.clusters])
        return g @ np.diff(table, axis=1)

    def plan_objective(self, table: np.ndarray) -> float:
        load = self.load_profile(table)
        return float(np.sum(self.weights * np.abs(load - self.targets)))

    def decision_from_table(self, table: np.ndarray) -> ActivationDecision:
        decision = zero_decision(self.model, self.start_epoch)
        for i, cl in enumerate(self.clusters):
            d = int(round(table[i, 1] - table[i, 0]))
            if d:
                decision.counts[cl.q][cl.s] = d
        return decision


def build_program(
    state: FleetState,
    bulk: BulkPurchase,
    forecast: DispatchForecast,
    t: int,
    cfg: MpcConfig,
) -> MpcProgram:
    """Assemble the look-ahead program at epoch t.

    Variables are the cumulative activation counts for the epochs where
    they are free to move, plus one deviation pair per live epoch
    linearizing the weighted L1 objective. Counts are pinned both past each
    cluster's threshold jump and before the earliest epoch an EV could
    arrive from an occupied subclass; load epochs beyond every variable
    carry no rows and their cost folds into the program's constant offset.
    """
    model = state.model
    if state.epoch != t - 1:
        raise ValueError(f"state at epoch {state.epoch} cannot decide epoch {t}")
    if not 1 <= t <= cfg.horizon_end:
        raise ValueError(f"epoch {t} outside 1..{cfg.horizon_end}")
    if cfg.horizon_end > model.horizon:
        raise ValueError("look-ahead extends past the model horizon")
    if forecast.start_epoch != t:
        raise ValueError("forecast does not start at the decision epoch")
    hz = cfg.horizon_end
    if cfg.lookahead is not None:
        hz = min(hz, t + cfg.lookahead - 1)
    if bulk.horizon < hz:
        raise ValueError("purchase horizon shorter than the look-ahead")

    clusters, n_int = _collect_clusters(state, t, hz)
    n_epochs = hz - t + 1
    targets = bulk.values[t - 1:hz] + forecast.expected[:n_epochs]
    _, hour_last = cfg.hour_span(cfg.hour_of(t))
    weights = np.where(np.arange(t, hz + 1) <= hour_last, cfg.penalty_weight, 1.0)

    # loads the plan cannot influence: counts forced to jump at the decision
    # epoch or at a later threshold step with no variable span, plus the
    # constant side of each variable span's first and pinned differences
    fixed_full = np.zeros(n_epochs)
    live_end = t
    for cl in clusters:
        if cl.count:
            fixed_full[cl.first - t] -= cl.pulse_kw * cl.cum
            if cl.jump_epoch <= hz:
                fixed_full[cl.jump_epoch - t] += cl.pulse_kw * cl.npass
            live_end = max(live_end, min(cl.first + cl.count, hz))
        elif cl.npass > cl.cum:
            step = cl.pulse_kw * (cl.npass - cl.cum)
            if cl.jump_epoch <= t:
                fixed_full[0] += step
            elif cl.jump_epoch <= hz:
                fixed_full[cl.jump_epoch - t] += step
                live_end = max(live_end, cl.jump_epoch)

    if n_int == 0:
        const_cost = float(np.sum(weights * np.abs(targets - fixed_full)))
        empty = lp.RowBuilder().build()
        prog = lp.IntegerProgram(
            n_vars=0,
            c=np.zeros(0),
            lo=np.zeros(0),
            hi=np.zeros(0),
            ub=empty,
            eq=empty,
            integer_mask=np.zeros(0, dtype=bool),
            offset=const_cost,
        )
        return MpcProgram(
            prog=prog,
            clusters=clusters,
            model=model,
            start_epoch=t,
            end_epoch=hz,
            targets=targets,
            weights=weights,
            n_int=0,
        )

    ub, lo, hi = _chain_rows(clusters, n_int)
    n_live = live_end - t + 1
    fixed_load = fixed_full[:n_live]

    link_row: list[np.ndarray] = []
    link_col: list[np.ndarray] = []
    link_val: list[np.ndarray] = []
    for cl in clusters:
        c = cl.count
        if c == 0:
            continue
        o = cl.offset
        jj = np.arange(c)
        link_row.append(cl.first - t + jj)
        link_col.append(o + jj)
        link_val.append(np.full(c, cl.pulse_kw))
        nxt = cl.first - t + jj + 1
        keep = nxt <= live_end - t
        link_row.append(nxt[keep])
        link_col.append((o + jj)[keep])
        link_val.append(np.full(int(keep.sum()), -cl.pulse_kw))

    u_base = n_int
    rows = np.arange(n_live)
    link_row += [rows, rows]
    link_col += [u_base + rows, u_base + n_live + rows]
    link_val += [np.full(n_live, -1.0), np.full(n_live, 1.0)]
    eq = lp.RowBuilder()
    eq.add_block(
        np.concatenate(link_row),
        np.concatenate(link_col),
        np.concatenate(link_val),
        targets[:n_live] - fixed_load,
    )

    const_cost = float(np.sum(weights[n_live:] * np.abs(targets[n_live:])))
    n_vars = n_int + 2 * n_live
    prog = lp.IntegerProgram(
        n_vars=n_vars,
        c=np.concatenate([np.zeros(n_int), weights[:n_live], weights[:n_live]]),
        lo=np.concatenate([lo, np.zeros(2 * n_live)]),
        hi=np.concatenate([hi, np.full(2 * n_live, np.inf)]),
        ub=ub.build(),
        eq=eq.build(),
        integer_mask=np.concatenate(
            [np.ones(n_int, dtype=bool), np.zeros(2 * n_live, dtype=bool)]
        ),
        offset=const_cost,
    )
    return MpcProgram(
        prog=prog,
        clusters=clusters,
        model=model,
        start_epoch=t,
        end_epoch=hz,
        targets=targets,
        weights=weights,
        n_int=n_int,
    )


# ----------------------------------------------------------------- solving


@dataclass
class PlanSolution:
    """Integer activation plan from one solve."""

    start_epoch: int
    end_epoch: int
    table: np.ndarray
    planned_load: np.ndarray
    objective: float
    status: str  # "optimal" | "feasible"
    nodes: int
    optimal: bool
    relaxation_objective: float | None = None


def _repair_table(program: MpcProgram, table: np.ndarray, rounding_tol: float) -> np.ndarray:
    """Round the relaxed plan down, restoring feasibility epoch by epoch.

    Walking forward in time, each entry is floored and clipped between the
    previous epoch's value (or the pinned total once past the jump) and the
    population cap set by the upstream cluster one epoch earlier. The cap
    always leaves room because the upstream cluster was clipped first, so the
    result is integer-feasible whenever the state itself was valid.
    """
    cls_ = program.clusters
    if not cls_:
        return table
    npass = np.array([c.npass for c in cls_], dtype=float)
    n0 = np.array([c.n0 for c in cls_], dtype=float)
    jump = np.array([c.jump_epoch for c in cls_])
    up = np.array([c.up for c in cls_])
    up_safe = np.maximum(up, 0)
    out = table.copy()
    for j in range(1, out.shape[1]):
        epoch = program.start_epoch + j - 1
        up_prev = np.where(up >= 0, out[up_safe, j - 1], 0.0)
        lo = np.maximum(out[:, j - 1], np.where(jump <= epoch, npass, 0.0))
        hi = np.minimum(npass, n0 + up_prev)
        out[:, j] = np.clip(np.floor(out[:, j] + rounding_tol), lo, hi)
    return out


def _chain_move(
    cls_: list[_Cluster],
    table: np.ndarray,
    i: int,
    j: int,
    delta: float,
    width: int,
) -> list[tuple[int, int]] | None:
    """Entries to shift by ``delta`` so one EV's subtask moves one epoch.

    Raising a cumulative count can break the population cap against the
    upstream subtask; a feasible table always recovers with a single +1 on
    the upstream entry one column earlier, applied recursively. Lowering
    walks down the chain the same way. Returns None when blocked.
    """
    moves: list[tuple[int, int]] = []
    c, jc = i, j
    while True:
        cl = cls_[c]
        if not cl.col0 <= jc < cl.col0 + cl.count:
            return None
        v = table[c, jc] + delta
        hi = table[c, jc + 1] if jc + 1 < width else float(cl.npass)
        if v < table[c, jc - 1] - 1e-9 or v > min(hi, float(cl.npass)) + 1e-9:
            return None
        moves.append((c, jc))
        if delta > 0:
            if cl.up < 0 or v <= cl.n0 + table[cl.up, jc - 1] + 1e-9:
                return moves
            c, jc = cl.up, jc - 1
        else:
            if cl.down < 0:
                return moves
            if table[cl.down, jc + 1] <= cls_[cl.down].n0 + v + 1e-9:
                return moves
            c, jc = cl.down, jc + 1


def _range_move(
    cls_: list[_Cluster],
    table: np.ndarray,
    i: int,
    a: int,
    b: int,
    delta: float,
    width: int,
) -> list[tuple[int, int]] | None:
    """Apply chain moves over cols ``a..b`` of row i, rolling back on failure.

    Raising is applied right to left so each column's monotone check sees the
    not-yet-raised neighbour; lowering runs left to right for the same reason.
    Returns every (row, col) entry shifted, or None with the table intact.
    """
    applied: list[tuple[int, int]] = []
    cols = range(b, a - 1, -1) if delta > 0 else range(a, b + 1)
    for jc in cols:
        moves = _chain_move(cls_, table, i, jc, delta, width)
        if moves is None:
            for c, k in applied:
                table[c, k] -= delta
            return None
        for c, k in moves:
            table[c, k] += delta
            applied.append((c, k))
    return applied


def _load_shift(
    cls_: list[_Cluster],
    applied: list[tuple[int, int]],
    delta: float,
    n_epochs: int,
) -> dict[int, float]:
    """Load change per epoch index caused by the applied table shifts."""
    shift: dict[int, float] = {}
    for c, jc in applied:
        g = delta * cls_[c].pulse_kw
        shift[jc - 1] = shift.get(jc - 1, 0.0) + g
        if jc < n_epochs:
            shift[jc] = shift.get(jc, 0.0) - g
    return shift


_SWAP_CANDIDATE_LIMIT = 400


def _polish_sweeps(program: MpcProgram, table: np.ndarray, sweep_limit: int) -> np.ndarray:
    """Deterministic descent over single- and paired-activation reschedules.

    Every feasible unit change of the plan moves one activation from one
    epoch to another: a +-1 over a column range of one row plus whatever
    chain shifts the population caps force. Trying whole ranges matters
    because stepping an activation one epoch at a time can pass through a
    worse plan even when the destination is better. Once single moves stop
    paying, pairs of moves on different rows are tried jointly; their load
    changes can cancel where no move survives on its own.
    """
    cls_ = program.clusters
    resid = program.load_profile(table) - program.targets
    wgt = program.weights
    n_epochs = len(resid)
    width = table.shape[1]

    def gain_of(shift: dict[int, float]) -> float:
        return sum(
            wgt[k] * (abs(resid[k] + d) - abs(resid[k])) for k, d in shift.items()
        )

    def enumerate_moves() -> list[tuple[int, int, int, float]]:
        moves = []
        for i, cl in enumerate(cls_):
            if not cl.count:
                continue
            for p in range(cl.col0 - 1, cl.col0 + cl.count):
                nxt = table[i, p + 1] if p + 1 < width else float(cl.npass)
                if table[i, p] >= nxt:
                    continue
                # one activation sits at column p+1; walk it outward until
                # the table blocks the move
                for e in range(p, cl.col0 - 1, -1):
                    applied = _range_move(cls_, table, i, e, p, 1.0, width)
                    if applied is None:
                        break
                    for c, k in applied:
                        table[c, k] -= 1.0
                    moves.append((i, e, p, 1.0))
                for e in range(p + 1, cl.col0 + cl.count):
                    applied = _range_move(cls_, table, i, p + 1, e, -1.0, width)
                    if applied is None:
                        break
                    for c, k in applied:
                        table[c, k] += 1.0
                    moves.append((i, p + 1, e, -1.0))
        return moves

    def single_pass() -> bool:
        took = False
        for i, a, b, delta in enumerate_moves():
            applied = _range_move(cls_, table, i, a, b, delta, width)
            if applied is None:
                continue
            shift = _load_shift(cls_, applied, delta, n_epochs)
            if gain_of(shift) < -1e-9:
                for k, d in shift.items():
                    resid[k] += d
                took = True
            else:
                for c, jc in applied:
                    table[c, jc] -= delta
        return took

    def swap_pass() -> bool:
        cands = enumerate_moves()
        if len(cands) > _SWAP_CANDIDATE_LIMIT:
            return False
        for ia, aa, ba, da in cands:
            app_a = _range_move(cls_, table, ia, aa, ba, da, width)
            if app_a is None:
                continue
            shift_a = _load_shift(cls_, app_a, da, n_epochs)
            for ib, ab, bb, db in cands:
                if ib == ia:
                    continue
                app_b = _range_move(cls_, table, ib, ab, bb, db, width)
                if app_b is None:
                    continue
                shift = dict(shift_a)
                for k, d in _load_shift(cls_, app_b, db, n_epochs).items():
                    shift[k] = shift.get(k, 0.0) + d
                if gain_of(shift) < -1e-9:
                    for k, d in shift.items():
                        resid[k] += d
                    return True
                for c, jc in app_b:
                    table[c, jc] -= db
            for c, jc in app_a:
                table[c, jc] -= da
        return False

    improved = True
    sweeps = 0
    while improved and sweeps < sweep_limit:
        sweeps += 1
        improved = single_pass()
        if not improved:
            improved = swap_pass()
    return table


def _polish_first_epoch(program: MpcProgram, table: np.ndarray, max_moves: int = 10_000) -> np.ndarray:
    """Greedy unit adjustments of the committed epoch only."""
    cls_ = program.clusters
    load = program.load_profile(table)
    resid = float(load[0] - program.targets[0])
    width = table.shape[1]
    for _ in range(max_moves):
        best = None
        for i, cl in enumerate(cls_):
            if cl.count < 1 or cl.col0 != 1:
                continue
            g = cl.pulse_kw
            up_prev = table[cl.up, 0] if cl.up >= 0 else 0.0
            hi = min(float(cl.npass), cl.n0 + up_prev)
            if width > 2:
                hi = min(hi, table[i, 2])
            lo = table[i, 0]
            if cl.down >= 0 and width > 2:
                lo = max(lo, table[cl.down, 2] - cls_[cl.down].n0)
            for delta in (1.0, -1.0):
                v = table[i, 1] + delta
                if v < lo - 1e-9 or v > hi + 1e-9:
                    continue
                gain = abs(resid + delta * g) - abs(resid)
                if gain < -1e-9 and (best is None or gain < best[0] - 1e-12):
                    best = (gain, i, delta)
        if best is None:
            return table
        _, i, delta = best
        table[i, 1] += delta
        resid += delta * cls_[i].pulse_kw
    return table


def _relax_and_fix(program: MpcProgram, cfg: MpcConfig, x0: np.ndarray) -> np.ndarray:
    """Round the plan one column at a time, re-solving the LP in between.

    Fixing a column and re-optimizing lets later columns re-plan around the
    integer prefix, which lands far closer to the optimum than rounding the
    whole fractional solution at once. Each entry rounds to the nearest
    integer inside its monotone and population limits, so every prefix stays
    completable and the final table is feasible.
    """
    cls_ = program.clusters
    prog = program.prog
    lo = prog.lo.copy()
    hi = prog.hi.copy()
    x = x0
    x_int = np.zeros(program.n_int)
    depth = max((cl.col0 + cl.count - 1 for cl in cls_ if cl.count), default=0)
    for j in range(1, depth + 1):
        epoch = program.start_epoch + j - 1
        fixed = False
        for i, cl in enumerate(cls_):
            kc = epoch - cl.first
            if not cl.count or not 0 <= kc < cl.count:
                continue
            k = cl.offset + kc
            prev = x_int[k - 1] if kc > 0 else float(cl.cum)
            if cl.up < 0:
                cap = float(cl.npass)
            else:
                up = cls_[cl.up]
                ku = epoch - 1 - up.first
                if epoch - 1 >= up.jump_epoch:
                    up_prev = float(up.npass)
                elif up.count and ku >= 0:
                    up_prev = x_int[up.offset + ku]
                else:
                    up_prev = float(up.cum)
                cap = cl.n0 + up_prev
            v = np.clip(np.floor(x[k] + 0.5), prev, min(float(cl.npass), cap))
            x_int[k] = v
            lo[k] = hi[k] = v
            fixed = True
        if j < depth and fixed:
            res = lp.solve_lp(prog, lo=lo, hi=hi, engine=cfg.engine)
            if res.status != "optimal":
                raise MpcError(f"column fixing ended {res.status}")
            x = res.x
    return program.table_from_x(x_int)


def _incumbent_x(program: MpcProgram, table: np.ndarray) -> np.ndarray:
    """Lift an integer plan table into a full variable vector."""
    x = np.zeros(program.prog.n_vars)
    for i, cl in enumerate(program.clusters):
        if cl.count:
            x[cl.offset:cl.offset + cl.count] = table[i, cl.col0:cl.col0 + cl.count]
    n_live = program.prog.eq.n_rows
    if n_live:
        resid = program.prog.eq.to_csr(program.prog.n_vars) @ x - program.prog.eq.rhs
        x[program.n_int:program.n_int + n_live] = np.maximum(resid, 0.0)
        x[program.n_int + n_live:] = np.maximum(-resid, 0.0)
    return x


def solve_program(program: MpcProgram, cfg: MpcConfig, mode: str | None = None) -> PlanSolution:
    """Produce an integer plan for the program.

    Exact mode runs branch-and-bound seeded with the repaired relaxation and
    proves optimality unless the node budget runs out (the best incumbent is
    returned with ``optimal`` False). Relaxed mode descends over activation
    reschedules from several rounded starting plans and keeps the best;
    past ``polish_var_limit`` integer variables it falls back to one-shot
    rounding with only the committed epoch polished. The local moves can
    plateau above the optimum, so small relaxed programs get a node-capped
    branch-and-bound refinement; ``optimal`` is True only when that run
    happens to close the gap within its budget.
    """
    mode = mode or cfg.solver_mode
    if program.n_int == 0:
        table = program.table_from_x(np.zeros(0))
        return PlanSolution(
            start_epoch=program.start_epoch,
            end_epoch=program.end_epoch,
            table=table,
            planned_load=program.load_profile(table),
            objective=program.plan_objective(table),
            status="optimal",
            nodes=0,
            optimal=True,
        )
    relax = lp.solve_lp(program.prog, engine=cfg.engine)
    if relax.status == "infeasible":
        raise InfeasibleProgram("activation constraints admit no plan")
    if relax.status != "optimal":
        raise MpcError(f"relaxation ended {relax.status}")
    if mode == "relaxed":
        if program.n_int <= cfg.polish_var_limit:
            raw = program.table_from_x(relax.x[:program.n_int])
            starts = (
                _relax_and_fix(program, cfg, relax.x),
                _repair_table(program, raw, cfg.rounding_tol),
                _repair_table(
                    program, program.table_from_x(program.prog.lo[:program.n_int]), 0.0
                ),
                _repair_table(
                    program, program.table_from_x(program.prog.hi[:program.n_int]), 0.0
                ),
            )
            table = None
            best = np.inf
            for t in starts:
                t = _polish_sweeps(program, t, cfg.polish_sweep_limit)
                obj = program.plan_objective(t)
                if obj < best - 1e-12:
                    table, best = t, obj
        else:
            raw = program.table_from_x(relax.x[:program.n_int])
            table = _repair_table(program, raw, cfg.rounding_tol)
            table = _polish_first_epoch(program, table)
        status, nodes, optimal = "feasible", 0, False
        if program.n_int <= cfg.refine_var_limit:
            milp = lp.branch_and_bound(
                program.prog,
                node_budget=cfg.refine_node_budget,
                engine=cfg.engine,
                incumbent=_incumbent_x(program, table),
            )
            refined = program.table_from_x(np.round(milp.x[:program.n_int]))
            if program.plan_objective(refined) < program.plan_objective(table) - 1e-12:
                table = refined
            nodes, optimal = milp.nodes, milp.optimal
    else:
        raw = program.table_from_x(relax.x[:program.n_int])
        table = _repair_table(program, raw, cfg.rounding_tol)
        milp = lp.branch_and_bound(
            program.prog,
            node_budget=cfg.node_budget,
            engine=cfg.engine,
            incumbent=_incumbent_x(program, table),
        )
        table = program.table_from_x(np.round(milp.x[:program.n_int]))
        status, nodes, optimal = milp.status, milp.nodes, milp.optimal
    return PlanSolution(
        start_epoch=program.start_epoch,
        end_epoch=program.end_epoch,
        table=table,
        planned_load=program.load_profile(table),
        objective=program.plan_objective(table),
        status=status,
        nodes=nodes,
        optimal=optimal,
        relaxation_objective=relax.objective,
    )


# ------------------------------------------------------- purchase management


def update_bulk_purchase(
    bulk: BulkPurchase,
    planned_load: np.ndarray,
    start_epoch: int,
    hour: int,
    cfg: MpcConfig,
) -> BulkPurchase:
    """Rewrite the not-yet-bought hours to the plan's hourly mean load.

    Called at the close of ``hour``; the next hour is already bought, so
    only hours ``hour + 2`` onward change. Hours the plan does not fully
    cover keep their previous values.
    """
    updates: dict[int, float] = {}
    for h in range(hour + 2, cfg.hour_count + 1):
        first, last = cfg.hour_span(h)
        i0 = first - start_epoch
        i1 = last - start_epoch
        if i0 < 0 or i1 >= len(planned_load):
            continue
        updates[h] = float(np.mean(planned_load[i0:i1 + 1]))
    if not updates:
        return bulk
    return bulk.with_hourly_values(updates)


def initial_bulk_purchase(model: FleetModel, cfg: MpcConfig, engine: str | None = None) -> BulkPurchase:
    """Hourly baseline purchase fixed before the night starts.

    Two continuous solves over the full-night chain constraints: first find
    the smallest achievable peak hourly mean load, then, holding that peak,
    minimize the summed per-epoch gap between planned load and the hourly
    level, so each hour's purchase is one the fleet can actually hold. The
    profile integrates to the fleet's total energy and is deterministic for
    a fixed fleet.
    """
    engine = engine or cfg.engine
    if cfg.horizon_end > model.horizon:
        raise ValueError("look-ahead extends past the model horizon")
    state = model.new_state()
    t = 1
    hz = cfg.horizon_end
    clusters, n_int = _collect_clusters(state, t, hz)
    n_hours = cfg.hour_count

    def endpoint(cl: _Cluster, e: int) -> tuple[int, float]:
        """(variable column, 0) or (-1, constant) for the count at epoch e."""
        if e >= cl.jump_epoch:
            return -1, float(cl.npass)
        if cl.count and e >= cl.first:
            return cl.offset + (e - cl.first), 0.0
        return -1, float(cl.cum)

    hour_cols: list[list[int]] = []
    hour_vals: list[list[float]] = []
    hour_const: list[float] = []
    spans: list[tuple[int, int]] = []
    for h in range(1, n_hours + 1):
        first, last = cfg.hour_span(h)
        spans.append((first, last))
        cols: list[int] = []
        vals: list[float] = []
        const = 0.0
        for cl in clusters:
            for e, sign in ((last, 1.0), (first - 1, -1.0)):
                col, cval = endpoint(cl, e)
                if col >= 0:
                    cols.append(col)
                    vals.append(sign * cl.pulse_kw)
                else:
                    const += sign * cl.pulse_kw * cval
        hour_cols.append(cols)
        hour_vals.append(vals)
        hour_const.append(const)

    chain, lo, hi = _chain_rows(clusters, n_int)

    # stage 1: minimize the peak hourly mean
    ub = lp.RowBuilder()
    built = chain.build()
    if built.n_rows:
        ub.add_block(built.row, built.col, built.val, built.rhs)
    z_col = n_int
    for h in range(n_hours):
        first, last = spans[h]
        span_len = float(last - first + 1)
        ub.add(hour_cols[h] + [z_col], hour_vals[h] + [-span_len], -hour_const[h])
    empty = lp.RowBuilder().build()
    stage1 = lp.IntegerProgram(
        n_vars=n_int + 1,
        c=np.concatenate([np.zeros(n_int), [1.0]]),
        lo=np.concatenate([lo, [0.0]]),
        hi=np.concatenate([hi, [np.inf]]),
        ub=ub.build(),
        eq=empty,
        integer_mask=np.zeros(n_int + 1, dtype=bool),
    )
    res1 = lp.solve_lp(stage1, engine=engine)
    if res1.status != "optimal":
        raise InfeasibleProgram(f"peak-minimization stage ended {res1.status}")
    peak = float(res1.x[z_col])

    if n_hours == 1:
        values = np.full(cfg.horizon_end, peak)
        return BulkPurchase(values=values, epochs_per_hour=cfg.epochs_per_hour)

    # stage 2: fix the peak, pick the most trackable peak-optimal plan:
    # minimize the summed per-epoch gap between planned load and the hourly
    # purchase level. An hourly level the fleet cannot hold within the hour
    # turns into deviation no dispatcher can remove.
    p_base = n_int
    u_base = n_int + n_hours
    n_vars = u_base + hz
    eq = lp.RowBuilder()
    for h in range(n_hours):
        first, last = spans[h]
        span_len = float(last - first + 1)
        eq.add(hour_cols[h] + [p_base + h], hour_vals[h] + [-span_len], -hour_const[h])

    # per-epoch planned load: variable part plus pinned constants
    rows_parts: list[np.ndarray] = []
    cols_parts: list[np.ndarray] = []
    vals_parts: list[np.ndarray] = []
    load_const = np.zeros(hz)
    for cl in clusters:
        g = cl.pulse_kw
        if cl.count:
            ks = np.arange(cl.count, dtype=np.int64)
            evs = cl.first + ks
            rows_parts.append(evs - 1)
            cols_parts.append(cl.offset + ks)
            vals_parts.append(np.full(cl.count, g))
            inside = evs < hz
            rows_parts.append(evs[inside])
            cols_parts.append(cl.offset + ks[inside])
            vals_parts.append(np.full(int(inside.sum()), -g))
            load_const[cl.first - 1] -= g * cl.cum
            if cl.jump_epoch <= hz:
                load_const[cl.jump_epoch - 1] += g * cl.npass
        elif cl.jump_epoch <= hz:
            load_const[cl.jump_epoch - 1] += g * (cl.npass - cl.cum)
    zero_i = np.zeros(0, dtype=np.int64)
    load_row = np.concatenate(rows_parts) if rows_parts else zero_i
    load_col = np.concatenate(cols_parts) if cols_parts else zero_i
    load_val = np.concatenate(vals_parts) if vals_parts else np.zeros(0)

    hour_of = np.empty(hz, dtype=np.int64)
    for h in range(n_hours):
        first, last = spans[h]
        hour_of[first - 1:last] = h
    r_idx = np.arange(hz, dtype=np.int64)
    aux_row = np.concatenate([r_idx, r_idx])
    aux_col = np.concatenate([p_base + hour_of, u_base + r_idx])

    ub = lp.RowBuilder()
    if built.n_rows:
        ub.add_block(built.row, built.col, built.val, built.rhs)
    # load(e) - p <= u and p - load(e) <= u, one pair per epoch
    ub.add_block(
        np.concatenate([load_row, aux_row]),
        np.concatenate([load_col, aux_col]),
        np.concatenate([load_val, np.full(hz, -1.0), np.full(hz, -1.0)]),
        -load_const,
    )
    ub.add_block(
        np.concatenate([load_row, aux_row]),
        np.concatenate([load_col, aux_col]),
        np.concatenate([-load_val, np.full(hz, 1.0), np.full(hz, -1.0)]),
        load_const,
    )
    peak_cap = peak + 1e-7 * max(1.0, abs(peak))
    stage2 = lp.IntegerProgram(
        n_vars=n_vars,
        c=np.concatenate([np.zeros(n_int + n_hours), np.ones(hz)]),
        lo=np.concatenate([lo, np.zeros(n_hours + hz)]),
        hi=np.concatenate(
            [hi, np.full(n_hours, peak_cap), np.full(hz, np.inf)]
        ),
        ub=ub.build(),
        eq=eq.build(),
        integer_mask=np.zeros(n_vars, dtype=bool),
    )
    res2 = lp.solve_lp(stage2, engine=engine)
    if res2.status != "optimal":
        raise InfeasibleProgram(f"tracking stage ended {res2.status}")
    values = np.empty(cfg.horizon_end)
    for h in range(n_hours):
        first, last = spans[h]
        values[first - 1:last] = float(res2.x[p_base + h])
    return BulkPurchase(values=values, epochs_per_hour=cfg.epochs_per_hour)


# ------------------------------------------------------------- epoch driver


@dataclass
class MpcStepResult:
    decision: ActivationDecision
    bulk: BulkPurchase
    plan: PlanSolution


def schedule_epoch(
    state: FleetState,
    bulk: BulkPurchase,
    a_t: float,
    t: int,
    cfg: MpcConfig,
) -> MpcStepResult:
    """Plan the remaining night, commit epoch t, refresh the purchase.

    Runs forecast, assembly, and solve; only the first epoch's activations
    are committed (the returned decision always validates against the
    state). At the last epoch of an hour with at least two hours still
    tradable, the purchase is rewritten from the plan.
    """
    forecast = forecast_dispatch(a_t, t, cfg)
    program = build_program(state, bulk, forecast, t, cfg)
    plan = solve_program(program, cfg)
    decision = program.decision_from_table(plan.table)
    report = validate_decision(state, decision)
    if not report.ok:
        raise InvalidDecision(report)
    new_bulk = bulk
    hour = cfg.hour_of(t)
    if t == cfg.hour_span(hour)[1] and hour <= cfg.hour_count - 2:
        new_bulk = update_bulk_purchase(bulk, plan.planned_load, t, hour, cfg)
    if cfg.debug_dir is not None:
        _dump_epoch(program, plan, cfg, t)
    return MpcStepResult(decision=decision, bulk=new_bulk, plan=plan)


def _dump_epoch(program: MpcProgram, plan: PlanSolution, cfg: MpcConfig, t: int) -> None:
    """Write one epoch's program summary and plan as plain text."""
    path = Path(cfg.debug_dir)
    path.mkdir(parents=True, exist_ok=True)
    lines = [
        f"epoch {t}",
        f"mode {cfg.solver_mode}",
        f"status {plan.status}",
        f"nodes {plan.nodes}",
        f"integer_vars {program.n_int}",
        f"objective {plan.objective:.6f}",
        "epoch weight target_kw planned_kw",
    ]
    for i, ep in enumerate(range(program.start_epoch, program.end_epoch + 1)):
        lines.append(
            f"{ep} {program.weights[i]:g} {program.targets[i]:.4f} "
            f"{plan.planned_load[i]:.4f}"
        )
    (path / f"epoch_{t:03d}.txt").write_text("\n".join(lines) + "\n")
