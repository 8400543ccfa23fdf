"""Per-run and per-condition metrics: best-so-far, AUC-OC, keep rate, decomposition."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from statistics import fmean
from typing import Sequence

from .search import DEFAULT_N, RunLog


class DegenerateTotal(ValueError):
    """Raised when asked for percentages of a zero total improvement."""


@dataclass(frozen=True)
class BestSoFarCurve:
    values: tuple[float, ...]
    run_id: str = ""

    def __post_init__(self):
        for a, b in zip(self.values, self.values[1:]):
            if b > a:
                raise ValueError("best-so-far curve must be non-increasing")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def final(self) -> float:
        return self.values[-1]


def best_so_far(log: RunLog, n: int | None = None) -> BestSoFarCurve:
    """Running minimum of val_bpb seeded with the baseline; crashes and rejections are skipped.

    The curve has ``n`` positions (default: the log's n_experiments). Positions
    past the last record repeat the final value, so a fixed-default log is a flat
    line at its baseline.
    """
    n = log.n_experiments if n is None else n
    if log.baseline_val_bpb is None:
        ok = [r.val_bpb for r in log.records if r.ok]
        if not ok:
            raise ValueError(f"run {log.run_id}: no baseline and no successful experiments")
        best = float("inf")
    else:
        best = log.baseline_val_bpb
    vals = []
    for k in range(n):
        if k < len(log.records):
            r = log.records[k]
            if r.ok and r.val_bpb < best:
                best = r.val_bpb
        vals.append(best)
    if vals and vals[0] == float("inf"):
        # no baseline: back-fill leading positions with the first success
        first = next(v for v in vals if v != float("inf"))
        vals = [first if v == float("inf") else v for v in vals]
    return BestSoFarCurve(tuple(vals), log.run_id)


def flat_curve(value: float, n: int = DEFAULT_N, run_id: str = "") -> BestSoFarCurve:
    return BestSoFarCurve((float(value),) * n, run_id)


def auc_oc(curve: BestSoFarCurve | Sequence[float]) -> float:
    """Unit-width sum over experiment positions (not a trapezoid).

    A constant curve c over N positions gives exactly c * N.
    """
    values = curve.values if isinstance(curve, BestSoFarCurve) else tuple(curve)
    return math.fsum(values)


@dataclass(frozen=True)
class KeepRate:
    kept: int
    eligible: int
    rate: float
    degenerate: bool


def keep_rate(log: RunLog) -> KeepRate:
    eligible = [r for r in log.records if r.ok]
    kept = sum(1 for r in eligible if r.kept)
    if not eligible:
        return KeepRate(0, 0, 0.0, True)
    return KeepRate(kept, len(eligible), kept / len(eligible), False)


def crash_count(log: RunLog) -> int:
    return sum(1 for r in log.records if not r.ok)


@dataclass(frozen=True)
class DecompositionResult:
    track: str
    bpb_fixed: float
    bpb_hp_only: float
    bpb_agent: float
    total_improvement: float
    hp_contribution: float
    arch_contribution: float
    hp_pct: float | None
    arch_pct: float | None
    n_hp_runs: int
    n_agent_runs: int

    @property
    def degenerate_total(self) -> bool:
        return self.hp_pct is None


def decompose(best_fixed: float, best_hp_runs: Sequence[float], best_agent_runs: Sequence[float],
              track: str = "", strict: bool = False) -> DecompositionResult:
    """Split (fixed - agent) into an HP part (fixed - hp_only) and an arch part (hp_only - agent).

    Inputs are per-run best val_bpb values; condition means are used. With a
    zero total the percentages are None, or DegenerateTotal is raised if
    ``strict``. Additivity holds up to float rounding (about 1e-16).
    """
    if not best_hp_runs or not best_agent_runs:
        raise ValueError("need at least one hp_only run and one agent run")
    hp_mean = fmean(best_hp_runs)
    agent_mean = fmean(best_agent_runs)
    total = best_fixed - agent_mean
    hp = best_fixed - hp_mean
    arch = hp_mean - agent_mean
    if total == 0:
        if strict:
            raise DegenerateTotal("total improvement is zero")
        hp_pct = arch_pct = None
    else:
        hp_pct = hp / total * 100.0
        arch_pct = arch / total * 100.0
    return DecompositionResult(track, best_fixed, hp_mean, agent_mean, total, hp, arch, hp_pct,
                               arch_pct, len(best_hp_runs), len(best_agent_runs))


DECOMP_COLUMNS = ("track", "total_impr_bpb", "hp_pct", "arch_pct", "n_runs_per_condition")


def decomposition_csv(results: Sequence[DecompositionResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DECOMP_COLUMNS)
    for r in results:
        w.writerow([r.track, repr(r.total_improvement),
                    "" if r.hp_pct is None else repr(r.hp_pct),
                    "" if r.arch_pct is None else repr(r.arch_pct),
                    f"hp_only={r.n_hp_runs};agent={r.n_agent_runs}"])
    return buf.getvalue()
