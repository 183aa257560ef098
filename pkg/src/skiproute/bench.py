"""Decode-latency measurement: time per output token across repeated runs.

Only decode steps count; prefill is excluded by construction because the
generation loop times each incremental step separately with the monotonic
performance clock. Warmup runs absorb cache effects and are discarded.
"""

from __future__ import annotations

import csv
import statistics
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .errors import ConfigError
from .model import GenerationResult


@dataclass(frozen=True)
class TpotResult:
    """Seconds per decode token, summarized over the measured runs."""

    per_run: tuple[float, ...]
    mean: float
    median: float
    decode_tokens: int


def measure_tpot(run_fn: Callable[[], GenerationResult], n_runs: int = 5,
                 warmup: int = 2) -> TpotResult:
    """Run the generator repeatedly and average its per-step decode times."""
    if n_runs < 1:
        raise ConfigError(f"need at least one measured run, got {n_runs}")
    if warmup < 0:
        raise ConfigError(f"warmup count cannot be negative, got {warmup}")
    for _ in range(warmup):
        run_fn()
    per_run = []
    total_tokens = 0
    for _ in range(n_runs):
        result = run_fn()
        if not result.decode_times:
            raise ConfigError(
                "run produced no decode steps; generate at least two tokens")
        per_run.append(sum(result.decode_times) / len(result.decode_times))
        total_tokens += len(result.decode_times)
    return TpotResult(per_run=tuple(per_run), mean=statistics.fmean(per_run),
                      median=statistics.median(per_run),
                      decode_tokens=total_tokens)


@dataclass
class LatencyReport:
    """Named absolute measurements plus relative ratios derived from them."""

    entries: dict[str, TpotResult] = field(default_factory=dict)

    def add(self, name: str, result: TpotResult) -> None:
        if name in self.entries:
            raise ConfigError(f"duplicate measurement name {name!r}")
        self.entries[name] = result

    def relative(self, name: str, baseline: str) -> float:
        """Median-TPOT ratio of a method against a named baseline."""
        for key in (name, baseline):
            if key not in self.entries:
                raise ConfigError(f"no measurement named {key!r}")
        return self.entries[name].median / self.entries[baseline].median


def write_latency_csv(path: str, report: LatencyReport, baseline: str) -> None:
    if baseline not in report.entries:
        raise ConfigError(f"no measurement named {baseline!r}")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "mean_tpot", "median_tpot", "decode_tokens",
                    "relative_to_" + baseline])
        for name, r in report.entries.items():
            w.writerow([name, r.mean, r.median, r.decode_tokens,
                        report.relative(name, baseline)])
