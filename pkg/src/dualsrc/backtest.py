"""Held-out evaluation: reward versus BSHT, constraint-violation metrics, trajectory export."""

from __future__ import annotations

import csv
import hashlib
import json
import operator
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .exo import DomainError, ExoWorld
from .policies import ALPHA_GRID, BshtPolicy, TbsPolicy
from .simulator import SimState, rollout

BINDING_FRACTION = 0.9
LARGE_VIOLATION = 0.10


@dataclass
class ViolationMetrics:
    """M1-M4 in percent. ``m2_empty`` / ``m4_empty`` flag an empty binding-week filter."""

    m1: float
    m2: float
    m3: float
    m4: float
    m2_empty: bool = False
    m4_empty: bool = False

    def as_dict(self) -> dict:
        return {"M1": self.m1, "M2": self.m2, "M3": self.m3, "M4": self.m4,
                "M2_empty": self.m2_empty, "M4_empty": self.m4_empty}


def violation_metrics(volumes, limits, reference_volumes) -> ViolationMetrics:
    """Relative violations ``max(0, (vol - K) / K)`` summarised four ways.

    M1: mean violation. M2: mean over binding weeks, where a reference
    (unconstrained) volume reaches 90% of K; ``reference_volumes`` may hold
    one row per reference run, and a week binds if any of them does. M3:
    percent of weeks violating by more than 10%. M4: percent of weeks that
    are binding and violate by more than 10%. Weeks with an infinite limit
    never violate and never bind.
    """
    vol = np.asarray(volumes, dtype=float)
    k = np.asarray(limits, dtype=float)
    ref = np.atleast_2d(np.asarray(reference_volumes, dtype=float))
    if not (vol.shape == k.shape == ref.shape[1:]) or vol.ndim != 1:
        raise DomainError("volumes, limits and reference volumes must cover the same weeks")
    if vol.size == 0:
        raise DomainError("no weeks to evaluate")
    if np.any(k <= 0):
        raise DomainError("capacity limits must be > 0")
    finite = np.isfinite(k)
    ks = np.where(finite, k, 1.0)
    viol = np.where(finite, np.maximum(0.0, (vol - ks) / ks), 0.0)
    binding = finite & np.any(ref >= BINDING_FRACTION * ks, axis=0)
    large = viol > LARGE_VIOLATION
    m1 = 100.0 * viol.mean()
    m2 = 100.0 * viol[binding].mean() if binding.any() else 0.0
    m3 = 100.0 * large.mean()
    m4 = 100.0 * (large & binding).mean()
    return ViolationMetrics(m1, m2, m3, m4, not binding.any(), not binding.any())


def warm_start_state(world: ExoWorld, split: int) -> SimState:
    """On-hand and in-flight inventory at ``split`` after running BSHT from week 0."""
    if split == 0:
        return SimState.start_of(world)
    return rollout(world, slice(None), BshtPolicy(), end_week=split).final_state.detached()


def tune_tbs_alpha(world: ExoWorld, split: int, grid=ALPHA_GRID) -> float:
    """Best TBS alpha by discounted reward on the training window."""
    train = world.window(0, split)
    scores = [rollout(train, slice(None), TbsPolicy(float(a))).total for a in grid]
    return float(grid[int(np.argmax(scores))])


@dataclass
class RunRecord:
    policy: str
    coordinator: str
    path: int
    reward: float
    volumes: np.ndarray
    limits: np.ndarray
    lambdas: np.ndarray
    metrics: ViolationMetrics | None = None
    reward_pct: float = 100.0

    def to_dict(self) -> dict:
        return {"policy": self.policy, "coordinator": self.coordinator, "path": self.path,
                "reward": self.reward, "reward_pct": self.reward_pct,
                "volumes": self.volumes.tolist(),
                "limits": [float(x) if np.isfinite(x) else None for x in self.limits],
                "lambdas": self.lambdas.tolist(),
                "metrics": self.metrics.as_dict() if self.metrics else None}

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        m = d.get("metrics")
        metrics = None
        if m:
            metrics = ViolationMetrics(m["M1"], m["M2"], m["M3"], m["M4"], m["M2_empty"], m["M4_empty"])
        return cls(d["policy"], d["coordinator"], d["path"], d["reward"],
                   np.array(d["volumes"], dtype=float),
                   np.array([np.inf if x is None else x for x in d["limits"]], dtype=float),
                   np.array(d["lambdas"], dtype=float), metrics, d["reward_pct"])


@dataclass
class BacktestReport:
    rewards: dict = field(default_factory=dict)        # policy -> discounted backtest reward
    pct_of_baseline: dict = field(default_factory=dict)
    runs: list = field(default_factory=list)            # constrained runs, RunRecord
    summary: dict = field(default_factory=dict)         # coordinator -> mean M1..M4 and reward pct
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"rewards": self.rewards, "pct_of_baseline": self.pct_of_baseline,
                "constrained": self.summary, "runs": [r.to_dict() for r in self.runs],
                "meta": self.meta}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "BacktestReport":
        d = json.loads(Path(path).read_text())
        return cls(d["rewards"], d["pct_of_baseline"], [RunRecord.from_dict(r) for r in d["runs"]],
                   d["constrained"], d["meta"])


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def full_limits(path, world: ExoWorld, split: int) -> np.ndarray:
    """Per-week limits over the whole horizon: unlimited before ``split``."""
    k = np.full(world.horizon, np.inf)
    path = np.asarray(path, dtype=float)
    if path.size != world.horizon - split:
        raise DomainError(f"capacity path has {path.size} weeks, backtest has {world.horizon - split}")
    k[split:] = path
    return k


def run_backtest(world: ExoWorld, policies: dict, split: int, baseline: str = "bsht",
                 priced_policy=None, coordinators: dict[str, Callable] | None = None,
                 capacity_paths=None, start_state: SimState | None = None,
                 meta: dict | None = None) -> BacktestReport:
    """Evaluate policies on weeks ``split..horizon`` from a common start state.

    ``policies`` maps names to policies; rewards are reported as percent of
    ``baseline``. When ``capacity_paths`` (one row per path, one column per
    backtest week) are given, ``priced_policy`` is run unconstrained and under
    each coordinator (``coordinators`` maps names to factories taking the
    full-horizon limit path), always on the same exogenous path. Rewards are
    unpenalised and normalised to the unconstrained run.
    """
    if not 0 < split < world.horizon:
        raise DomainError(f"split {split} outside horizon {world.horizon}")
    if baseline not in policies:
        raise DomainError(f"baseline {baseline!r} not among the policies")
    state = start_state if start_state is not None else warm_start_state(world, split)
    if state.week != split:
        raise DomainError(f"start state is at week {state.week}, backtest starts at {split}")
    report = BacktestReport(meta=dict(meta or {}))
    report.meta.update({"split": split, "weeks": world.horizon - split, "world": world.digest(),
                        "baseline": baseline})
    for name, pol in policies.items():
        report.rewards[name] = rollout(world, slice(None), pol, start_state=state).total
    base = report.rewards[baseline]
    report.pct_of_baseline = {n: 100.0 * r / base for n, r in report.rewards.items()}

    if capacity_paths is not None and priced_policy is not None:
        zero = np.zeros(world.horizon)
        free = rollout(world, slice(None), priced_policy, prices=zero, start_state=state, penalize=False)
        for j, path in enumerate(np.atleast_2d(capacity_paths)):
            k = full_limits(path, world, split)
            kb = k[split:]
            report.runs.append(RunRecord("priced", "none", j, free.total, free.volumes, kb,
                                         free.lambdas, violation_metrics(free.volumes, kb, free.volumes)))
            for cname, make in (coordinators or {}).items():
                traj = rollout(world, slice(None), priced_policy, coordinator=make(k), start_state=state,
                               penalize=False)
                report.runs.append(RunRecord(
                    "priced", cname, j, traj.total, traj.volumes, kb, traj.lambdas,
                    violation_metrics(traj.volumes, kb, free.volumes), 100.0 * traj.total / free.total))
        report.summary = summarize_runs(report.runs)
    report.meta["config_hash"] = config_hash(report.meta)
    return report


def summarize_runs(runs: list[RunRecord]) -> dict:
    out = {}
    for name in dict.fromkeys(r.coordinator for r in runs):
        rs = [r for r in runs if r.coordinator == name]
        out[name] = {m: float(np.mean([getattr(r.metrics, m.lower()) for r in rs]))
                     for m in ("M1", "M2", "M3", "M4")}
        out[name]["reward_pct"] = float(np.mean([r.reward_pct for r in rs]))
        out[name]["paths"] = len(rs)
    return out


TRAJECTORY_HEADER = ("week", "volume", "limit", "lambda")


def export_trajectories(report: BacktestReport, directory) -> list[Path]:
    """One delimited file per (policy, coordinator, capacity path)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    start = int(report.meta.get("split", 0))
    written = []
    for r in report.runs:
        p = directory / f"{r.policy}__{r.coordinator}__path{r.path:03d}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRAJECTORY_HEADER)
            for i, (v, k, lam) in enumerate(zip(r.volumes, r.limits, r.lambdas)):
                w.writerow([start + i, repr(float(v)), repr(float(k)), repr(float(lam))])
        written.append(p)
    return written


def load_trajectory(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    cols = list(zip(*rows[1:])) if len(rows) > 1 else [()] * len(rows[0])
    return {name: np.array(c, dtype=float) for name, c in zip(rows[0], cols)}


_OPS = {">=": operator.ge, ">": operator.gt, "<=": operator.le, "<": operator.lt, "==": operator.eq}


def _lookup(d: dict, dotted: str):
    for part in dotted.split("."):
        d = d[part]
    return d


def check_criteria(report: BacktestReport, criteria: list[dict]) -> list[str]:
    """Failures of ``{"metric": "pct_of_baseline.tbs", "op": ">=", "value": 100}`` style checks."""
    data = report.to_dict()
    failures = []
    for c in criteria:
        try:
            got = _lookup(data, c["metric"])
        except (KeyError, TypeError):
            failures.append(f"{c['metric']}: missing from report")
            continue
        if not _OPS[c.get("op", ">=")](got, c["value"]):
            failures.append(f"{c['metric']} = {got:.4g}, wanted {c.get('op', '>=')} {c['value']}")
    return failures


def reward_rows(report: BacktestReport) -> list[tuple[str, float, float]]:
    return [(n, report.rewards[n], report.pct_of_baseline[n]) for n in report.rewards]


def violation_rows(report: BacktestReport) -> list[tuple]:
    return [(n, s["M1"], s["M2"], s["M3"], s["M4"], s["reward_pct"]) for n, s in report.summary.items()]
