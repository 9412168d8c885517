"""Full-night simulation runs, trace files, and run comparison.

One run drives a single scheduler over a generated scenario epoch by
epoch and records per-epoch power accounting plus end-of-run totals. A
trace serializes to a plot-ready CSV with a JSON sidecar holding the
totals; bytes are stable for a fixed (seed, config, scheduler).
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import mpc as mpc_scheduler
from . import spuc as spuc_scheduler
from .model import FleetModel, step
from .mpc import MpcConfig, initial_bulk_purchase
from .scenario import Scenario

log = logging.getLogger(__name__)

SCHEDULERS = ("mpc", "spuc-static", "spuc-updated")
TRACE_HEADER = ("epoch", "p_kw", "a_kw", "target_kw", "load_kw", "deviation_kw")
TRACE_VERSION = 1
_ORDERING = ("mpc", "spuc-updated", "spuc-static")


class HarnessError(Exception):
    """Base for run and trace-file errors."""


class ScenarioMismatch(HarnessError):
    """Traces or reference runs do not share one scenario."""


class TraceFormatError(HarnessError):
    """A trace file does not follow the documented schema."""


@dataclass(frozen=True, eq=False)
class DispatchTrace:
    """Per-epoch power accounting and totals for one full-night run.

    ``purchase_kw[t-1]`` is the bulk purchase in effect at epoch t,
    ``dispatch_kw`` the balancing signal, ``load_kw`` the realized fleet
    draw. Target and deviation derive from those, so the accounting
    identities hold by construction. ``qos_by_class`` records, per class,
    the completion fraction measured at that class's deadline epoch.

    ``runtime_seconds`` covers the scheduling loop only: epochs t = 1..T,
    decision making plus state stepping. Shared inputs built before the
    loop (fleet tables, the night-ahead purchase, or the reference mpc run
    it tracks) are timed under ``setup_seconds``; both schedulers consume
    those inputs, so charging them to either loop would skew the
    comparison.
    """

    scheduler: str
    epoch_minutes: float
    scenario_fingerprint: str
    purchase_kw: np.ndarray
    dispatch_kw: np.ndarray
    load_kw: np.ndarray
    qos_by_class: tuple[tuple[int, float], ...]
    qos_completion_fraction: float
    runtime_seconds: float
    setup_seconds: float = 0.0

    def __post_init__(self):
        for name in ("purchase_kw", "dispatch_kw", "load_kw"):
            arr = np.asarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, arr)
        n = len(self.load_kw)
        if len(self.purchase_kw) != n or len(self.dispatch_kw) != n:
            raise ValueError("per-epoch arrays differ in length")
        if self.epoch_minutes <= 0:
            raise ValueError("epoch_minutes must be > 0")
        if not 0.0 <= self.qos_completion_fraction <= 1.0:
            raise ValueError("qos_completion_fraction outside [0, 1]")

    @property
    def n_epochs(self) -> int:
        return len(self.load_kw)

    @property
    def target_kw(self) -> np.ndarray:
        return self.purchase_kw + self.dispatch_kw

    @property
    def deviation_kw(self) -> np.ndarray:
        return self.load_kw - self.target_kw

    @property
    def deviation_energy_kwh(self) -> float:
        return float(np.abs(self.deviation_kw).sum() * self.epoch_minutes / 60.0)


def _check_reference(trace: DispatchTrace, scenario: Scenario, n_epochs: int) -> None:
    if trace.scheduler != "mpc":
        raise ValueError("purchase reference must come from an mpc run")
    if trace.scenario_fingerprint != scenario.fingerprint():
        raise ScenarioMismatch("reference trace ran a different scenario")
    if trace.n_epochs != n_epochs:
        raise ScenarioMismatch("reference trace covers a different night length")


def run_night(
    scenario: Scenario,
    scheduler: str,
    cfg: MpcConfig,
    mpc_trace: DispatchTrace | None = None,
) -> DispatchTrace:
    """Simulate one night under the chosen scheduler.

    ``mpc`` replans every epoch and refreshes the hourly purchase;
    ``spuc-static`` tracks the night-ahead purchase plus dispatch;
    ``spuc-updated`` tracks the purchase series an mpc run produced on the
    identical scenario (rerun internally unless ``mpc_trace`` supplies it).
    Completion below 1.0 is recorded in the trace, never raised.
    """
    if scheduler not in SCHEDULERS:
        raise ValueError(f"unknown scheduler {scheduler!r}")
    n = scenario.config.night_epochs
    if cfg.horizon_end != n:
        raise ValueError(
            f"cfg.horizon_end {cfg.horizon_end} != scenario night_epochs {n}"
        )
    if abs(cfg.epochs_per_hour * scenario.config.epoch_minutes - 60.0) > 1e-9:
        raise ValueError("epochs_per_hour and epoch_minutes disagree on the hour")
    setup_started = time.perf_counter()
    fingerprint = scenario.fingerprint()
    model = FleetModel.build(scenario.fleet, scenario.specs, n)
    state = model.new_state()

    if scheduler == "spuc-updated":
        if mpc_trace is None:
            mpc_trace = run_night(scenario, "mpc", cfg)
        _check_reference(mpc_trace, scenario, n)
        purchase_series = mpc_trace.purchase_kw
        bulk = None
    else:
        bulk = initial_bulk_purchase(model, cfg)
        purchase_series = bulk.values

    deadline_classes: dict[int, list[int]] = {}
    for q, spec in scenario.specs.items():
        deadline_classes.setdefault(spec.deadline, []).append(q)

    p_arr = np.zeros(n)
    a_arr = np.zeros(n)
    l_arr = np.zeros(n)
    qos: dict[int, float] = {}
    started = time.perf_counter()
    setup = started - setup_started
    for t in range(1, n + 1):
        a_t = float(scenario.wind[t - 1])
        if scheduler == "mpc":
            p_t = bulk.value(t)
            res = mpc_scheduler.schedule_epoch(state, bulk, a_t, t, cfg)
            decision, bulk = res.decision, res.bulk
        else:
            p_t = float(purchase_series[t - 1])
            decision = spuc_scheduler.schedule_epoch(state, t, p_t + a_t)
        state, load = step(state, decision)
        p_arr[t - 1], a_arr[t - 1], l_arr[t - 1] = p_t, a_t, load
        for q in deadline_classes.get(t, ()):
            total = model.class_total(q)
            qos[q] = 1.0 if total == 0 else state.completed(q) / total

    total_evs = model.total_evs()
    if total_evs:
        done = sum(qos.get(q, 0.0) * model.class_total(q) for q in model.specs)
        overall = done / total_evs
    else:
        overall = 1.0
    runtime = time.perf_counter() - started
    log.info(
        "run %s: %d EVs, %d epochs, deviation %.4f kWh, qos %.4f, %.2f s loop"
        " + %.2f s setup",
        scheduler, total_evs, n,
        float(np.abs(l_arr - p_arr - a_arr).sum()) * scenario.config.epoch_minutes / 60.0,
        overall, runtime, setup,
    )
    return DispatchTrace(
        scheduler=scheduler,
        epoch_minutes=scenario.config.epoch_minutes,
        scenario_fingerprint=fingerprint,
        purchase_kw=p_arr,
        dispatch_kw=a_arr,
        load_kw=l_arr,
        qos_by_class=tuple(sorted(qos.items())),
        qos_completion_fraction=overall,
        runtime_seconds=runtime,
        setup_seconds=setup,
    )


# ------------------------------------------------------------- comparison


def quarter_shares(trace: DispatchTrace) -> tuple[float, float, float, float]:
    """Fraction of the night's deviation energy falling in each quarter."""
    parts = np.array_split(np.abs(trace.deviation_kw), 4)
    sums = [float(p.sum()) for p in parts]
    total = sum(sums)
    if total <= 0.0:
        return (0.0, 0.0, 0.0, 0.0)
    return tuple(s / total for s in sums)


@dataclass(frozen=True)
class ComparisonRow:
    scheduler: str
    deviation_energy_kwh: float
    qos_completion_fraction: float
    runtime_seconds: float
    quarter_shares: tuple[float, float, float, float]

    @property
    def last_quarter_dominant(self) -> bool:
        """True when the final quarter holds strictly the largest share."""
        return self.quarter_shares[3] > max(self.quarter_shares[:3])


@dataclass(frozen=True)
class RunComparison:
    """Side-by-side totals for runs on one scenario.

    ``deviation_ordering_ok`` is True when every adjacent pair of present
    schedulers in (mpc, spuc-updated, spuc-static) has non-decreasing
    deviation energy, None when fewer than two of them are present.
    """

    rows: tuple[ComparisonRow, ...]
    deviation_ordering_ok: bool | None

    def row(self, scheduler: str) -> ComparisonRow:
        for r in self.rows:
            if r.scheduler == scheduler:
                return r
        raise KeyError(scheduler)

    def as_text(self) -> str:
        lines = [
            "scheduler       deviation_kwh        qos  runtime_s"
            "     q1     q2     q3     q4"
        ]
        for r in self.rows:
            q = r.quarter_shares
            lines.append(
                f"{r.scheduler:<14}{r.deviation_energy_kwh:>15.6g}"
                f"{r.qos_completion_fraction:>11.4f}{r.runtime_seconds:>11.2f}"
                f"{q[0]:>7.3f}{q[1]:>7.3f}{q[2]:>7.3f}{q[3]:>7.3f}"
            )
        if self.deviation_ordering_ok is None:
            flag = "n/a (needs two schedulers)"
        else:
            flag = "ok" if self.deviation_ordering_ok else "violated"
        lines.append(f"deviation ordering mpc <= spuc-updated <= spuc-static: {flag}")
        return "\n".join(lines)


def compare_runs(traces) -> RunComparison:
    """Tabulate runs that share one scenario; mixed scenarios raise."""
    traces = list(traces)
    if not traces:
        raise ValueError("no traces to compare")
    fingerprint = traces[0].scenario_fingerprint
    rows = []
    for tr in traces:
        if tr.scenario_fingerprint != fingerprint:
            raise ScenarioMismatch(
                f"trace {tr.scheduler!r} belongs to a different scenario"
            )
        rows.append(
            ComparisonRow(
                scheduler=tr.scheduler,
                deviation_energy_kwh=tr.deviation_energy_kwh,
                qos_completion_fraction=tr.qos_completion_fraction,
                runtime_seconds=tr.runtime_seconds,
                quarter_shares=quarter_shares(tr),
            )
        )
    first_dev: dict[str, float] = {}
    for r in rows:
        first_dev.setdefault(r.scheduler, r.deviation_energy_kwh)
    chain = [first_dev[s] for s in _ORDERING if s in first_dev]
    if len(chain) < 2:
        ordering = None
    else:
        ordering = all(a <= b for a, b in zip(chain, chain[1:]))
    return RunComparison(rows=tuple(rows), deviation_ordering_ok=ordering)


# ------------------------------------------------------------- trace files


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def export_trace(trace: DispatchTrace, path) -> Path:
    """Write the per-epoch CSV and its JSON totals sidecar.

    Column values are shortest round-trip float reprs, so replaying the
    same (seed, config, scheduler) yields byte-identical CSVs.
    """
    path = Path(path)
    target = trace.target_kw
    deviation = trace.deviation_kw
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for i in range(trace.n_epochs):
            writer.writerow(
                [
                    i + 1,
                    float(trace.purchase_kw[i]),
                    float(trace.dispatch_kw[i]),
                    float(target[i]),
                    float(trace.load_kw[i]),
                    float(deviation[i]),
                ]
            )
    sidecar = {
        "version": TRACE_VERSION,
        "scheduler": trace.scheduler,
        "epoch_minutes": trace.epoch_minutes,
        "scenario_fingerprint": trace.scenario_fingerprint,
        "qos_by_class": [[q, frac] for q, frac in trace.qos_by_class],
        "qos_completion_fraction": trace.qos_completion_fraction,
        "deviation_energy_kwh": trace.deviation_energy_kwh,
        "runtime_seconds": trace.runtime_seconds,
        "setup_seconds": trace.setup_seconds,
    }
    with open(_sidecar_path(path), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def import_trace(path) -> DispatchTrace:
    """Rebuild a trace from its CSV and sidecar, validating the schema."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TraceFormatError(f"{path}: empty file") from None
        if tuple(header) != TRACE_HEADER:
            raise TraceFormatError(f"{path}: unexpected header {header!r}")
        p, a, tgt, load, dev = [], [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 6:
                raise TraceFormatError(f"{path}: line {lineno}: expected 6 fields")
            try:
                epoch = int(row[0])
                vals = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise TraceFormatError(f"{path}: line {lineno}: {exc}") from None
            if epoch != len(p) + 1:
                raise TraceFormatError(f"{path}: line {lineno}: epochs out of order")
            p.append(vals[0])
            a.append(vals[1])
            tgt.append(vals[2])
            load.append(vals[3])
            dev.append(vals[4])
    p, a = np.array(p), np.array(a)
    tgt, load, dev = np.array(tgt), np.array(load), np.array(dev)
    scale = np.maximum(1.0, np.abs(tgt))
    if len(p) and (
        np.any(np.abs(tgt - (p + a)) > 1e-9 * scale)
        or np.any(np.abs(dev - (load - tgt)) > 1e-9 * scale)
    ):
        raise TraceFormatError(f"{path}: derived columns break the identities")

    side_path = _sidecar_path(path)
    try:
        with open(side_path) as fh:
            side = json.load(fh)
    except json.JSONDecodeError as exc:
        raise TraceFormatError(f"{side_path}: {exc}") from None
    if side.get("version") != TRACE_VERSION:
        raise TraceFormatError(
            f"{side_path}: unsupported version {side.get('version')!r}"
        )
    try:
        trace = DispatchTrace(
            scheduler=side["scheduler"],
            epoch_minutes=side["epoch_minutes"],
            scenario_fingerprint=side["scenario_fingerprint"],
            purchase_kw=p,
            dispatch_kw=a,
            load_kw=load,
            qos_by_class=tuple((int(q), float(f)) for q, f in side["qos_by_class"]),
            qos_completion_fraction=side["qos_completion_fraction"],
            runtime_seconds=side["runtime_seconds"],
            setup_seconds=side.get("setup_seconds", 0.0),
        )
    except KeyError as exc:
        raise TraceFormatError(f"{side_path}: missing key {exc}") from None
    if abs(trace.deviation_energy_kwh - side["deviation_energy_kwh"]) > 1e-9 * max(
        1.0, trace.deviation_energy_kwh
    ):
        raise TraceFormatError(f"{side_path}: totals disagree with the CSV")
    return trace
