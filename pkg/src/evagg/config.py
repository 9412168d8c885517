"""Run configuration files.

A config file is JSON with a ``version`` field and three optional
sections: ``scenario`` (ScenarioConfig fields; ``groups`` is a list of
PulseGroup dicts), ``mpc`` (MpcConfig fields except ``horizon_end``,
which always derives from the scenario's night length), and
``scheduler``. Omitted fields keep their dataclass defaults; unknown
keys are rejected.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .mpc import MpcConfig
from .scenario import PulseGroup, ScenarioConfig

CONFIG_VERSION = 1

_SCHEDULERS = ("mpc", "spuc-static", "spuc-updated")
_GROUP_KEYS = {f.name for f in fields(PulseGroup)}
_SCENARIO_KEYS = {f.name for f in fields(ScenarioConfig)}
_MPC_KEYS = {f.name for f in fields(MpcConfig)} - {"horizon_end"}


class ConfigError(Exception):
    """A config file is malformed or inconsistent."""


@dataclass(frozen=True)
class RunSettings:
    scenario: ScenarioConfig
    mpc: MpcConfig
    scheduler: str


def _reject_unknown(raw: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")


def _build_scenario(raw: dict) -> ScenarioConfig:
    if not isinstance(raw, dict):
        raise ConfigError("scenario section must be an object")
    _reject_unknown(raw, _SCENARIO_KEYS, "scenario")
    kwargs = dict(raw)
    if "groups" in kwargs:
        groups = []
        for i, g in enumerate(kwargs["groups"]):
            if not isinstance(g, dict):
                raise ConfigError(f"scenario.groups[{i}] must be an object")
            _reject_unknown(g, _GROUP_KEYS, f"scenario.groups[{i}]")
            try:
                groups.append(PulseGroup(**g))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"scenario.groups[{i}]: {exc}") from None
        kwargs["groups"] = tuple(groups)
    try:
        return ScenarioConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"scenario: {exc}") from None


def _build_mpc(raw: dict, scenario: ScenarioConfig) -> MpcConfig:
    if not isinstance(raw, dict):
        raise ConfigError("mpc section must be an object")
    if "horizon_end" in raw:
        raise ConfigError("mpc.horizon_end derives from scenario.night_epochs")
    _reject_unknown(raw, _MPC_KEYS, "mpc")
    kwargs = dict(raw)
    if "epochs_per_hour" not in kwargs:
        per_hour = 60.0 / scenario.epoch_minutes
        if abs(per_hour - round(per_hour)) > 1e-9:
            raise ConfigError(
                "epoch_minutes does not divide the hour; set mpc.epochs_per_hour"
            )
        kwargs["epochs_per_hour"] = int(round(per_hour))
    try:
        return MpcConfig(horizon_end=scenario.night_epochs, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"mpc: {exc}") from None


def settings_from_dict(data) -> RunSettings:
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    _reject_unknown(data, {"version", "scenario", "mpc", "scheduler"}, "config")
    if data.get("version") != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {data.get('version')!r}")
    scenario = _build_scenario(data.get("scenario", {}))
    mpc = _build_mpc(data.get("mpc", {}), scenario)
    scheduler = data.get("scheduler", "mpc")
    if scheduler not in _SCHEDULERS:
        raise ConfigError(f"unknown scheduler {scheduler!r}")
    return RunSettings(scenario=scenario, mpc=mpc, scheduler=scheduler)


def load_settings(path) -> RunSettings:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return settings_from_dict(data)


def example_config() -> dict:
    """Complete config dict with every supported key at its default."""
    sc = ScenarioConfig()
    scenario = {
        f.name: getattr(sc, f.name) for f in fields(sc) if f.name != "groups"
    }
    scenario["groups"] = [asdict(g) for g in sc.groups]
    mpc_cfg = MpcConfig(horizon_end=sc.night_epochs)
    mpc = {f.name: getattr(mpc_cfg, f.name) for f in fields(mpc_cfg)}
    del mpc["horizon_end"]
    return {
        "version": CONFIG_VERSION,
        "scheduler": "mpc",
        "scenario": scenario,
        "mpc": mpc,
    }
