"""EV-charging aggregator simulation and scheduling toolkit.

Submodules:

- ``model``: clustered fleet dynamics, request classification, deadline
  thresholds, decision validation.
- ``spuc``: slack-per-unit-charge heuristic dispatcher.
- ``lp``: self-contained LP simplex and branch-and-bound solver.
- ``mpc``: receding-horizon dispatcher with hourly bulk-purchase updates.
- ``scenario``: cluster grids, fleet sampling, wind signals.
- ``harness``: full-night simulation runs, traces, comparisons.
- ``config``: versioned JSON run configuration.
- ``cli``: ``evagg`` command-line entry point.
"""
from __future__ import annotations

__version__ = "0.1.0"

from . import (  # noqa: F401
    cli,
    config,
    harness,
    lp,
    model,
    mpc,
    scenario,
    spuc,
)
