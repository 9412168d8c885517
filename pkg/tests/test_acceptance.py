"""Acceptance gate: one test per contract criterion, one verdict line each.

Every test ends by writing ``[criterion N] name: PASS|FAIL`` to the real
stdout (past pytest's capture) and then asserting. The paired 200-EV full
nights behind criteria 4, 5 and 7 are built once in a module fixture; they
dominate the runtime, so this file is the slow end-to-end half of the suite
and takes on the order of an hour on one core.
"""
from __future__ import annotations

import math
import sys
import time

import numpy as np
import pytest

from evagg.harness import export_trace, quarter_shares, run_night
from evagg.model import FleetModel, step
from evagg.mpc import (
    BulkPurchase,
    MpcConfig,
    build_program,
    forecast_dispatch,
    initial_bulk_purchase,
    solve_program,
)
from evagg.scenario import (
    PAPER_GROUPS,
    PulseGroup,
    ScenarioConfig,
    generate_scenario,
)
from evagg.spuc import schedule_epoch as spuc_epoch

from conftest import (
    enumerate_best_plan,
    random_enumerable_model,
    random_small_model,
    random_valid_decision,
)


def _verdict(num: int, name: str, ok: bool, detail: str = "") -> None:
    line = f"[criterion {num}] {name}: {'PASS' if ok else 'FAIL'}"
    if detail:
        line = f"{line}  [{detail}]"
    # bypass capture so the verdict ledger shows in piped pytest -v output
    stream = getattr(sys, "__stdout__", None) or sys.stdout
    stream.write("\n" + line + "\n")
    stream.flush()
    assert ok, line


def scaled_groups(factor: float = 3.0) -> tuple[PulseGroup, ...]:
    """Default pulse groups with durations shrunk so short nights fit.

    Dividing durations by ``factor`` drops each chain's energy the same
    way, so soc_mu shifts down by log(factor) to keep the fraction of
    full-chain EVs unchanged.
    """
    return tuple(
        PulseGroup(
            shape=g.shape,
            peak_kw=g.peak_kw,
            max_duration_hours=g.max_duration_hours / factor,
            soc_mu=g.soc_mu - math.log(factor),
            soc_sigma=g.soc_sigma,
        )
        for g in PAPER_GROUPS
    )


SCALED = scaled_groups()
PAIRED_SEEDS = tuple(range(1, 11))


def short_night_scenario(seed: int, evs: int = 100):
    # wind scaled with fleet energy: defaults x (evs/1000)/3 for the
    # one-third-duration groups, else wind dwarfs what 100 EVs consume
    return generate_scenario(
        ScenarioConfig(
            rng_seed=seed,
            fleet_size_mean=evs,
            night_epochs=48,
            wind_active_epochs=36,
            wind_cap_kw=2.0,
            wind_noise_kw=0.29,
            groups=SCALED,
        )
    )


# ---------------------------------------------------------------- criterion 1


def test_criterion_1_hard_qos():
    bad = []
    cfg = MpcConfig(horizon_end=48)
    for seed in range(1, 21):
        sc = short_night_scenario(seed)
        for sched in ("spuc-static", "mpc"):
            tr = run_night(sc, sched, cfg)
            if tr.qos_completion_fraction != 1.0:
                bad.append((seed, sched, tr.qos_completion_fraction))
    _verdict(
        1,
        "hard QoS on 20 scaled scenarios, both schedulers",
        not bad,
        f"violations: {bad}" if bad else "40 nights, completion 1.0 in each",
    )


# ---------------------------------------------------------------- criterion 2


def test_criterion_2_population_identity(rng):
    sequences = 0
    checks = 0
    while sequences < 100:
        model = random_small_model(rng)
        state = model.new_state()
        mine = {
            q: np.zeros(spec.subclass_count + 1, dtype=np.int64)
            for q, spec in model.specs.items()
        }
        for _ in range(model.horizon):
            decision = random_valid_decision(state, rng)
            state, _ = step(state, decision)
            for q, d in decision.counts.items():
                mine[q][: len(d)] += d
            for q, spec in model.specs.items():
                n0 = model.initial_populations[q]
                s_count = spec.subclass_count
                for s in range(1, s_count + 1):
                    arrived = mine[q][s - 1] if s > 1 else 0
                    left = mine[q][s] if s < s_count else 0
                    expected = int(n0[s]) + int(arrived) - int(left)
                    assert state.population(q, s) == expected, (
                        f"seq {sequences}: population ({q},{s}) "
                        f"{state.population(q, s)} != {expected}"
                    )
                    checks += 1
        sequences += 1
    _verdict(
        2,
        "stepped populations equal the closed form",
        True,
        f"{sequences} decision sequences, {checks} exact comparisons",
    )


# ---------------------------------------------------------------- criterion 3


def test_criterion_3_exact_and_relaxed_optimality(rng):
    worst = 1.0
    for i in range(100):
        model = random_enumerable_model(rng)
        h = model.horizon
        eph = int(rng.integers(1, 5))
        cfg = MpcConfig(horizon_end=h, epochs_per_hour=eph, solver_mode="exact")
        state = model.new_state()
        hours = -(-h // eph)
        hourly = rng.uniform(0.0, 6.0, hours).round(2)
        bulk = BulkPurchase(values=np.repeat(hourly, eph)[:h], epochs_per_hour=eph)
        a_t = float(rng.uniform(-2.0, 2.0))
        program = build_program(state, bulk, forecast_dispatch(a_t, 1, cfg), 1, cfg)
        best, feasible = enumerate_best_plan(state, program.targets, program.weights)
        assert feasible > 0, f"instance {i}: enumeration found nothing feasible"
        exact = solve_program(program, cfg, mode="exact")
        assert exact.optimal, f"instance {i}: no optimality proof"
        scale = max(1.0, abs(best))
        assert abs(exact.objective - best) <= 1e-9 * scale, (
            f"instance {i}: exact {exact.objective!r} != enumerated {best!r}"
        )
        relaxed = solve_program(program, cfg, mode="relaxed")
        assert relaxed.objective <= best * 1.05 + 1e-9, (
            f"instance {i}: relaxed {relaxed.objective!r} vs exact {best!r}"
        )
        if best > 1e-9:
            worst = max(worst, relaxed.objective / best)
    _verdict(
        3,
        "branch-and-bound equals enumeration, relaxed within 5%",
        True,
        f"100 instances, worst relaxed ratio {worst:.4f}",
    )


# ------------------------------------------------------- criteria 4, 5, 7-mpc


@pytest.fixture(scope="module")
def paired_runs():
    """Ten paired full nights at 200 EVs, T = 144, scaled groups.

    The mpc trace feeds spuc-updated so each scenario is simulated once
    per scheduler.
    """
    runs = []
    cfg = MpcConfig(horizon_end=144)
    for seed in PAIRED_SEEDS:
        # wind scaled with fleet energy, same rule as the short nights
        sc = generate_scenario(
            ScenarioConfig(
                rng_seed=seed,
                fleet_size_mean=200,
                wind_cap_kw=4.0,
                wind_noise_kw=0.58,
                groups=SCALED,
            )
        )
        mpc = run_night(sc, "mpc", cfg)
        upd = run_night(sc, "spuc-updated", cfg, mpc_trace=mpc)
        sta = run_night(sc, "spuc-static", cfg)
        runs.append((seed, mpc, upd, sta))
    return runs


def test_criterion_4_deviation_ordering(paired_runs):
    bad_order = []
    bad_tenx = []
    for seed, mpc, upd, sta in paired_runs:
        m = mpc.deviation_energy_kwh
        u = upd.deviation_energy_kwh
        s = sta.deviation_energy_kwh
        if not m <= u <= s:
            bad_order.append((seed, m, u, s))
        if not m <= 0.1 * s:
            bad_tenx.append((seed, m, 0.1 * s))
    ok = not bad_order and not bad_tenx
    ratios = [
        f"{seed}:{mpc.deviation_energy_kwh / max(sta.deviation_energy_kwh, 1e-12):.3f}"
        for seed, mpc, _, sta in paired_runs
    ]
    _verdict(
        4,
        "deviation mpc <= spuc-updated <= spuc-static, mpc <= 0.1x static",
        ok,
        f"order violations {bad_order}, 10x violations {bad_tenx}"
        if not ok
        else f"10 paired nights, mpc/static ratios {' '.join(ratios)}",
    )


def test_criterion_5_last_quarter_degradation(paired_runs):
    dominant = 0
    shares = []
    for seed, _, _, sta in paired_runs:
        q = quarter_shares(sta)
        shares.append(f"{seed}:{q[3]:.2f}")
        if q[3] > max(q[:3]):
            dominant += 1
    _verdict(
        5,
        "spuc-static deviation concentrates in the final quarter",
        dominant >= 8,
        f"{dominant}/10 nights dominant, final-quarter shares {' '.join(shares)}",
    )


def test_criterion_7_mpc_runtime(paired_runs):
    slowest = max(tr.runtime_seconds for _, tr, _, _ in paired_runs)
    _verdict(
        7,
        "mpc full night under 30 minutes at 200 EVs",
        slowest < 1800.0,
        f"slowest of 10 nights {slowest:.1f}s",
    )


# ---------------------------------------------------------------- criterion 6


def _tail_sum(pulse: np.ndarray, s: int) -> float:
    # summed back to front, matching the stepwise accumulation order
    tail = pulse[s - 1:][::-1]
    return float(tail.cumsum()[-1]) if len(tail) else 0.0


def test_criterion_6_spuc_pick_replay():
    picks_checked = 0
    overshoot_checked = 0
    for seed in (3, 7, 13):
        sc = short_night_scenario(seed)
        n = sc.config.night_epochs
        model = FleetModel.build(list(sc.fleet), sc.specs, n)
        cfg = MpcConfig(horizon_end=n)
        bulk = initial_bulk_purchase(model, cfg)
        state = model.new_state()
        max_g = max(max(spec.pulse) for spec in sc.specs.values() if spec.pulse)
        for t in range(1, n + 1):
            target = float(bulk.values[t - 1]) + float(sc.wind[t - 1])
            picks: list = []
            decision = spuc_epoch(state, t, target, picks_out=picks)

            # forced step replayed from the threshold tables
            running = {}
            load = 0.0
            for q, spec in model.specs.items():
                col = model.min_activation.tables[q][:, t]
                d = np.maximum(col - state.cumulative[q], 0).astype(np.int64)
                d[0] = 0
                pulse = spec.pulse_array()
                for s in range(1, spec.subclass_count):
                    if _tail_sum(pulse, s) <= 0:
                        d[s] = state.populations[q][s]
                running[q] = d
                load += float(np.dot(d[1:], pulse))
            forced_load = load

            for q, s in picks:
                assert load <= target, (
                    f"seed {seed} t {t}: admission at load {load} past {target}"
                )
                spec_p = model.specs[q]
                key_pick = None
                best = None
                for q2, spec in model.specs.items():
                    pulse = spec.pulse_array()
                    pops = state.populations[q2]
                    for s2 in range(1, spec.subclass_count):
                        if running[q2][s2] >= pops[s2]:
                            continue
                        total = _tail_sum(pulse, s2)
                        if total <= 0:
                            continue
                        rho = spec.deadline - (t + spec.subclass_count - s2)
                        mean = total / (spec.subclass_count - s2)
                        var = float(np.sum((pulse[s2 - 1:] - mean) ** 2))
                        key = (-(rho / total), -var, q2, s2)
                        if best is None or key < best:
                            best = key
                        if (q2, s2) == (q, s):
                            key_pick = key
                assert key_pick is not None, (
                    f"seed {seed} t {t}: pick ({q},{s}) not eligible"
                )
                assert key_pick == best, (
                    f"seed {seed} t {t}: pick ({q},{s}) key {key_pick} "
                    f"beaten by {best}"
                )
                running[q][s] += 1
                load += spec_p.power_kw(s)
                picks_checked += 1

            # the loop only stops past the target or out of candidates
            if load <= target:
                for q2, spec in model.specs.items():
                    for s2 in range(1, spec.subclass_count):
                        if (
                            running[q2][s2] < state.populations[q2][s2]
                            and _tail_sum(spec.pulse_array(), s2) > 0
                        ):
                            raise AssertionError(
                                f"seed {seed} t {t}: stopped at load {load} "
                                f"<= {target} with ({q2},{s2}) still open"
                            )

            state, stepped_load = step(state, decision)
            if forced_load <= target:
                assert stepped_load <= target + max_g + 1e-9, (
                    f"seed {seed} t {t}: load {stepped_load} overshoots "
                    f"{target} by more than one pulse ({max_g})"
                )
                overshoot_checked += 1
    assert picks_checked > 0
    _verdict(
        6,
        "every spuc admission has maximal score, overshoot within one pulse",
        True,
        f"{picks_checked} picks verified, {overshoot_checked} overshoot bounds",
    )


# ---------------------------------------------------------------- criterion 7


def test_criterion_7_spuc_runtime_paper_scale():
    sc = generate_scenario(ScenarioConfig(rng_seed=5, fleet_size_mean=1000))
    cfg = MpcConfig(horizon_end=144)
    wall = time.perf_counter()
    tr = run_night(sc, "spuc-static", cfg)
    wall = time.perf_counter() - wall
    ok = tr.runtime_seconds < 60.0 and tr.qos_completion_fraction == 1.0
    _verdict(
        7,
        "spuc full night under 60 s at 1000 EVs",
        ok,
        f"loop {tr.runtime_seconds:.2f}s, purchase setup {tr.setup_seconds:.1f}s, "
        f"wall {wall:.1f}s, qos {tr.qos_completion_fraction:.4f}",
    )


# ---------------------------------------------------------------- criterion 8


def test_criterion_8_replay_determinism(tmp_path):
    cfg = MpcConfig(horizon_end=48)
    blobs: dict[str, set[bytes]] = {"spuc-static": set(), "mpc": set()}
    for rep in range(5):
        sc = short_night_scenario(42)
        for sched in ("spuc-static", "mpc"):
            tr = run_night(sc, sched, cfg)
            path = export_trace(tr, tmp_path / f"{sched}_{rep}.csv")
            blobs[sched].add(path.read_bytes())
    ok = all(len(s) == 1 for s in blobs.values())
    _verdict(
        8,
        "byte-identical trace CSVs across 5 replays",
        ok,
        ", ".join(f"{k}: {len(v)} distinct" for k, v in blobs.items()),
    )
