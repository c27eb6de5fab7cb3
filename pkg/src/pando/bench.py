"""Throughput experiments over simulated volunteer pools.

The speedup grid answers one question: how close does an N-volunteer
cluster get to perfect linear scaling?  Every volunteer runs fixed-length
jobs (1 virtual second each by default), the input is sized so a perfect
run lasts about a minute, and the measured rate is divided by the perfect
rate of N jobs/second.  Time is counted from cluster start, so joining
(setup) costs are part of the measurement, and a run only counts if its
output is exactly right — failed runs are kept in the table but flagged
and excluded from any analysis.

Everything runs on the simulated clock, which is what makes a 1000-node,
60-second experiment reproducible and fast on one desk machine.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .harness import Cluster, StallError, run_sim
from .overlay import OverlayConfig
from .runtime import SimRuntime
from .streams import from_values
from .transport import InprocFabric
from .worker import parse_function_spec

log = logging.getLogger(__name__)

__all__ = [
    "SpeedupPoint",
    "DEFAULT_GRID",
    "INFLECTION_POINTS",
    "run_speedup_point",
    "run_speedup_grid",
    "to_csv",
    "to_gnuplot",
]

DEFAULT_GRID: tuple[int, ...] = (5, 10, 50, 100, 250, 500, 1000)
# Extra fine-grained points just past a full first tree level, where adding
# a volunteer turns a processor into a pure coordinator.
INFLECTION_POINTS: tuple[int, ...] = (11, 12, 13, 14, 15)


@dataclass(frozen=True)
class SpeedupPoint:
    volunteers: int
    jobs: int
    elapsed: float  # virtual seconds, including setup
    rate: float  # jobs / elapsed
    perfect_rate: float  # volunteers / job_seconds
    ratio: float  # rate / perfect_rate
    failed: bool = False


def run_speedup_point(
    volunteers: int,
    *,
    seed: int = 1,
    job_seconds: float = 1.0,
    target_seconds: float = 60.0,
    max_degree: int = 10,
) -> SpeedupPoint:
    """Measure one grid point; a wrong or incomplete run comes back flagged."""
    if volunteers < 1:
        raise ValueError("volunteers must be >= 1")
    jobs = max(1, round(target_seconds * volunteers / job_seconds))
    perfect_rate = volunteers / job_seconds
    runtime = SimRuntime(seed=seed * 1_000_003 + volunteers)
    cluster = Cluster(
        runtime,
        InprocFabric(runtime),
        OverlayConfig(max_degree=max_degree),
        source=from_values(str(i) for i in range(jobs)),
        fn_spec=parse_function_spec(f"sleep-square {job_seconds}"),
    )
    limit = target_seconds * 20.0 + 120.0

    def flop() -> SpeedupPoint:
        return SpeedupPoint(
            volunteers=volunteers,
            jobs=jobs,
            elapsed=runtime.now(),
            rate=0.0,
            perfect_rate=perfect_rate,
            ratio=0.0,
            failed=True,
        )

    try:
        cluster.start()
        runtime.run(until=runtime.now() + 0.05)  # root registers first
        cluster.spawn_volunteers(volunteers)
        try:
            result = run_sim(cluster, limit=limit)
        except StallError as stall:
            log.warning("speedup N=%d stalled: %s", volunteers, stall)
            return flop()
        if result.failed:
            log.warning(
                "speedup N=%d failed: %s", volunteers, result.outcome.error
            )
            return flop()
        if result.lines != [str(i * i) for i in range(jobs)]:
            log.warning("speedup N=%d produced wrong output", volunteers)
            return flop()
    finally:
        cluster.stop()
    elapsed = result.finished_at
    rate = jobs / elapsed
    return SpeedupPoint(
        volunteers=volunteers,
        jobs=jobs,
        elapsed=elapsed,
        rate=rate,
        perfect_rate=perfect_rate,
        ratio=rate / perfect_rate,
        failed=False,
    )


def run_speedup_grid(
    grid: Sequence[int],
    *,
    seed: int = 1,
    job_seconds: float = 1.0,
    target_seconds: float = 60.0,
    max_degree: int = 10,
    on_point=None,
) -> list[SpeedupPoint]:
    points = []
    for n in grid:
        point = run_speedup_point(
            n,
            seed=seed,
            job_seconds=job_seconds,
            target_seconds=target_seconds,
            max_degree=max_degree,
        )
        points.append(point)
        if on_point is not None:
            on_point(point)
    return points


def to_csv(points: Iterable[SpeedupPoint]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["volunteers", "jobs", "rate", "perfect_rate", "ratio", "failed"])
    for p in points:
        writer.writerow(
            [
                p.volunteers,
                p.jobs,
                f"{p.rate:.4f}",
                f"{p.perfect_rate:.4f}",
                f"{p.ratio:.4f}",
                int(p.failed),
            ]
        )
    return out.getvalue()


def to_gnuplot(points: Iterable[SpeedupPoint]) -> str:
    """Space-separated data block; failed points are commented out."""
    lines = ["# volunteers rate perfect_rate ratio"]
    for p in points:
        row = f"{p.volunteers} {p.rate:.4f} {p.perfect_rate:.4f} {p.ratio:.4f}"
        lines.append(f"# failed: {row}" if p.failed else row)
    return "\n".join(lines) + "\n"
