"""Volunteer stream computing: lend jobs to unreliable workers over a
self-organizing fat-tree overlay, emit results on stdout in input order.

The building blocks compose in layers:

* :mod:`pando.streams`     - demand-driven (pull) stream contract and combinators
* :mod:`pando.lend`        - the lend/settle/re-lend ledger with ordered emission
* :mod:`pando.lend_stream` - fan-out of one ledger into per-child sub-streams
* :mod:`pando.limit`       - in-flight gates turning push transports back into pull
* :mod:`pando.overlay`     - fat-tree membership: join routing, slots, roles
* :mod:`pando.node`        - a complete tree node (root or volunteer)
* :mod:`pando.worker`      - job functions: builtins and external processes
* :mod:`pando.harness`     - cluster orchestration, fault injection, experiments
* :mod:`pando.cli`         - the ``pando`` command-line tool
"""

from pando.streams import Outcome, StreamError, from_values, map_values, drain, compose
from pando.lend import LendLedger, Ticket, DEFERRED, EXHAUSTED
from pando.limit import LimitGate
from pando.lend_stream import SubStream

__all__ = [
    "Outcome",
    "StreamError",
    "from_values",
    "map_values",
    "drain",
    "compose",
    "LendLedger",
    "Ticket",
    "DEFERRED",
    "EXHAUSTED",
    "LimitGate",
    "SubStream",
]

__version__ = "0.1.0"
