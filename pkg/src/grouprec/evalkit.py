"""Evaluation reports, ablation tables and hyperparameter sweep summaries."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .metrics import auc, gauc, stratify_by_activity
from .model import MODES, ABLATION_ROWS

N_LEVELS = 5
K_GRID = (4, 8, 16, 32)
LAMBDA_GRID = (0.0, 0.001, 0.005, 0.02, 0.1)


class UnknownConfigError(ValueError):
    pass


@dataclass
class MetricReport:
    mode: str
    seed: int
    auc: float | None
    gauc: float | None
    gauc_low: float | None
    gauc_levels: list  # GAUC for activity levels 1..5 (None when no user qualifies)
    alpha_fusion_levels: list | None  # mean fusion weight per level, None for single-channel modes
    n_examples: int
    n_users: int
    n_gauc_users: int
    level_sizes: list
    tag: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**d)

    def render(self) -> str:
        def f(x):
            return "  n/a " if x is None else f"{x:.4f}"

        lines = [f"mode={self.mode} seed={self.seed}" + (f" {self.tag}" if self.tag else ""),
                 f"  AUC {f(self.auc)}  GAUC {f(self.gauc)}  low-activity GAUC {f(self.gauc_low)}",
                 f"  examples {self.n_examples}  users {self.n_users}  GAUC-eligible users {self.n_gauc_users}",
                 "  level  users   GAUC    alpha_fusion"]
        for i in range(N_LEVELS):
            a = None if self.alpha_fusion_levels is None else self.alpha_fusion_levels[i]
            lines.append(f"  L{i + 1}     {self.level_sizes[i]:5d}  {f(self.gauc_levels[i])}  {f(a)}")
        return "\n".join(lines)


def build_report(mode: str, seed: int, user_ids, scores, labels, activity: dict, low_users,
                 alpha_fusion=None, tag: str = "") -> MetricReport:
    """Score a test set; levels are computed over all users in ``activity``."""
    user_ids = np.asarray(user_ids)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    levels = stratify_by_activity(activity, N_LEVELS)
    by_level = [[u for u, l in levels.items() if l == k] for k in range(1, N_LEVELS + 1)]
    g_levels = [gauc(user_ids, scores, labels, restrict=us) for us in by_level]
    a_levels = None
    if alpha_fusion is not None:
        alpha_fusion = np.asarray(alpha_fusion, dtype=np.float64).reshape(-1)
        a_levels = []
        for us in by_level:
            sel = np.isin(user_ids, us)
            a_levels.append(float(alpha_fusion[sel].mean()) if sel.any() else None)
    eligible = 0
    for u in np.unique(user_ids):
        y = labels[user_ids == u]
        eligible += int(y.min() != y.max())
    return MetricReport(
        mode=mode, seed=int(seed), auc=auc(scores, labels), gauc=gauc(user_ids, scores, labels),
        gauc_low=gauc(user_ids, scores, labels, restrict=low_users), gauc_levels=g_levels,
        alpha_fusion_levels=a_levels, n_examples=int(len(labels)), n_users=int(len(np.unique(user_ids))),
        n_gauc_users=eligible, level_sizes=[len(us) for us in by_level], tag=tag)


# ---------------------------------------------------------------- ablations


@dataclass
class AblationRow:
    name: str
    mode: str
    gauc_low: float | None
    gauc_all: float | None
    delta_low: float | None  # (variant - full) / full
    delta_all: float | None


@dataclass
class AblationTable:
    seed: int
    rows: list = field(default_factory=list)

    def row(self, name: str) -> AblationRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def render(self) -> str:
        out = [f"ablations (seed {self.seed}); relative GAUC change vs full model",
               f"  {'variant':<26} {'low-activity':>13} {'overall':>9}"]
        for r in self.rows:
            dl = "n/a" if r.delta_low is None else f"{100 * r.delta_low:+.2f}%"
            da = "n/a" if r.delta_all is None else f"{100 * r.delta_all:+.2f}%"
            out.append(f"  {r.name:<26} {dl:>13} {da:>9}")
        return "\n".join(out)

    def records(self) -> list[dict]:
        return [{"kind": "ablation", "seed": self.seed, **asdict(r)} for r in self.rows]


def relative_delta(variant, base):
    if variant is None or base is None or base == 0:
        return None
    return (variant - base) / base


def run_ablation_suite(runner: Callable[[str], MetricReport], rows=None, seed: int = 0) -> AblationTable:
    """Run each ablation row through ``runner(mode)`` on shared data and tabulate deltas vs full.

    ``rows`` holds row names (e.g. "w/ KL Loss") or mode names; the full model is always run.
    """
    rows = list(ABLATION_ROWS) if rows is None else list(rows)
    by_mode = {m: n for n, m in ABLATION_ROWS.items()}
    resolved = []
    for r in rows:
        if r in ABLATION_ROWS:
            resolved.append((r, ABLATION_ROWS[r]))
        elif r in MODES:
            resolved.append((by_mode.get(r, r), r))
        else:
            raise UnknownConfigError(f"unknown ablation config {r!r}")
    if "full" not in [m for _, m in resolved]:
        resolved.insert(0, ("Full Model", "full"))
    reports = {}
    for _, mode in resolved:
        if mode not in reports:
            reports[mode] = runner(mode)
    full = reports["full"]
    table = AblationTable(seed)
    for name, mode in resolved:
        rep = reports[mode]
        table.rows.append(AblationRow(name, mode, rep.gauc_low, rep.gauc,
                                      relative_delta(rep.gauc_low, full.gauc_low),
                                      relative_delta(rep.gauc, full.gauc)))
    return table


# ---------------------------------------------------------------- sweeps


@dataclass
class SweepResult:
    param: str
    values: list
    gauc: list
    gauc_low: list
    seed: int = 0

    def render(self) -> str:
        out = [f"{self.param}-sweep (seed {self.seed})", f"  {self.param:>8}  {'GAUC':>7}  {'low GAUC':>8}"]
        for v, g, gl in zip(self.values, self.gauc, self.gauc_low):
            out.append(f"  {v!s:>8}  {g:.4f}  {gl:.4f}")
        return "\n".join(out)

    def records(self) -> list[dict]:
        return [{"kind": "sweep", "param": self.param, "seed": self.seed, "value": v, "gauc": g, "gauc_low": gl}
                for v, g, gl in zip(self.values, self.gauc, self.gauc_low)]


def run_sweep(param: str, values, runner: Callable[[object], MetricReport], seed: int = 0) -> SweepResult:
    reps = [runner(v) for v in values]
    return SweepResult(param, list(values), [r.gauc for r in reps], [r.gauc_low for r in reps], seed)


def interior_optimum(values: list[float]) -> bool:
    """True when the best interior point is at least as good as both endpoints."""
    if len(values) < 3:
        raise ValueError("need at least three sweep points")
    best = max(values[1:-1])
    return best >= values[0] and best >= values[-1]


def lambda_zero_worse(lambdas, values) -> bool:
    """True when the lambda = 0 point is strictly below the best nonzero lambda."""
    zero = [v for l, v in zip(lambdas, values) if l == 0]
    rest = [v for l, v in zip(lambdas, values) if l != 0]
    if len(zero) != 1 or not rest:
        raise ValueError("sweep needs exactly one lambda = 0 point and at least one nonzero point")
    return max(rest) > zero[0]


# ---------------------------------------------------------------- plot data


def level_series(report: MetricReport) -> list[dict]:
    return [{"series": f"gauc_by_level/{report.mode}", "x": i + 1, "y": g}
            for i, g in enumerate(report.gauc_levels)]


def sweep_series(sweep: SweepResult) -> list[dict]:
    return [{"series": f"gauc_by_{sweep.param}", "x": v, "y": g} for v, g in zip(sweep.values, sweep.gauc)]


def write_jsonl(records, path):
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")
