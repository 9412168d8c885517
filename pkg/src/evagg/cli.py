"""Command line front end: run, compare, gen-scenario."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, load_settings
from .harness import (
    SCHEDULERS,
    HarnessError,
    compare_runs,
    export_trace,
    import_trace,
    run_night,
)
from .model import ModelError
from .mpc import MpcError
from .scenario import ScenarioError, generate_scenario, load_wind_csv


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evagg",
        description="EV-aggregator night simulator: bulk purchase plus "
        "deadline-safe charging schedules.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate one night and write trace files")
    run.add_argument("--config", required=True, help="JSON config file")
    run.add_argument(
        "--scheduler", choices=SCHEDULERS, help="overrides the config file"
    )
    run.add_argument("--seed", type=int, help="overrides scenario rng_seed")
    run.add_argument(
        "--wind",
        default="synthetic",
        help="'synthetic' or 'csv:<path>' (default: synthetic)",
    )
    run.add_argument("--out", required=True, help="output directory")
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="tabulate traces from one directory")
    cmp_.add_argument("--in", dest="in_dir", required=True, help="trace directory")
    cmp_.set_defaults(func=cmd_compare)

    gen = sub.add_parser("gen-scenario", help="write a generated scenario as JSON")
    gen.add_argument("--config", required=True, help="JSON config file")
    gen.add_argument("--out", required=True, help="output file")
    gen.set_defaults(func=cmd_gen_scenario)
    return parser


def _scenario_from_args(args):
    settings = load_settings(args.config)
    sc_cfg = settings.scenario
    if getattr(args, "seed", None) is not None:
        sc_cfg = replace(sc_cfg, rng_seed=args.seed)
    scenario = generate_scenario(sc_cfg)
    wind_arg = getattr(args, "wind", "synthetic")
    if wind_arg.startswith("csv:"):
        wind = load_wind_csv(wind_arg[4:], sc_cfg)
        scenario = replace(scenario, wind=wind)
    elif wind_arg != "synthetic":
        raise ConfigError(f"--wind must be 'synthetic' or 'csv:<path>', got {wind_arg!r}")
    return settings, scenario


def cmd_run(args) -> int:
    settings, scenario = _scenario_from_args(args)
    scheduler = args.scheduler or settings.scheduler
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mpc_trace = None
    if scheduler == "spuc-updated":
        ref = out / "trace_mpc.csv"
        if ref.exists():
            candidate = import_trace(ref)
            if candidate.scenario_fingerprint == scenario.fingerprint():
                mpc_trace = candidate
    trace = run_night(scenario, scheduler, settings.mpc, mpc_trace=mpc_trace)
    path = export_trace(trace, out / f"trace_{scheduler}.csv")
    print(f"wrote {path}")
    print(
        f"scheduler={scheduler} deviation_kwh={trace.deviation_energy_kwh:.6g} "
        f"qos={trace.qos_completion_fraction:.4f} "
        f"runtime_s={trace.runtime_seconds:.2f} setup_s={trace.setup_seconds:.2f}"
    )
    return 0


def cmd_compare(args) -> int:
    in_dir = Path(args.in_dir)
    paths = sorted(in_dir.glob("trace_*.csv"))
    if not paths:
        raise HarnessError(f"no trace_*.csv files in {in_dir}")
    traces = [import_trace(p) for p in paths]
    print(compare_runs(traces).as_text())
    return 0


def cmd_gen_scenario(args) -> int:
    settings = load_settings(args.config)
    scenario = generate_scenario(settings.scenario)
    doc = {
        "version": 1,
        "fingerprint": scenario.fingerprint(),
        "night_epochs": scenario.config.night_epochs,
        "epoch_minutes": scenario.config.epoch_minutes,
        "total_evs": sum(count for _, count in scenario.fleet),
        "classes": [
            {
                "q": q,
                "pulse_tag": spec.pulse_tag,
                "deadline_epoch": spec.deadline,
                "subclasses": spec.subclass_count,
            }
            for q, spec in sorted(scenario.specs.items())
        ],
        "fleet": [[c.q, c.s, count] for c, count in scenario.fleet],
        "wind_kw": [float(v) for v in scenario.wind],
    }
    out = Path(args.out)
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out} ({doc['total_evs']} EVs, {len(doc['classes'])} classes)")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, HarnessError, ScenarioError, ModelError, MpcError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
