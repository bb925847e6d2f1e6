"""Error metrics and the observer benchmark over scenarios x conditions."""
from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .observers import EstimateTrajectory, ObserverConfig, observe
from .ring_sim import ScenarioConfig, SensorRecord, Trajectory, measure, run_scenario

CONDITIONS = ("noiseless", "noisy", "ood")
OBSERVERS = ("ol", "ol_reset", "cl")
DELTA = 1e-6


def relative_l2(est: np.ndarray, truth: np.ndarray) -> float:
    est, truth = np.asarray(est, dtype=float), np.asarray(truth, dtype=float)
    if est.shape != truth.shape:
        raise ValueError(f"grid mismatch {est.shape} vs {truth.shape}")
    return float(np.linalg.norm(est - truth) / max(np.linalg.norm(truth), DELTA))


def error_evolution(est: EstimateTrajectory, truth: Trajectory, truth_start: int = 0) -> np.ndarray:
    """Relative L2 error at every estimated step.

    ``truth.fields[k]`` is taken to be record step ``truth_start + k``.
    """
    idx = est.record_steps - truth_start
    if len(idx) and (idx.min() < 0 or idx.max() >= len(truth.fields)):
        raise ValueError(f"estimates cover steps {est.record_steps[0]}..{est.record_steps[-1]}, "
                         f"truth covers {truth_start}..{truth_start + len(truth.fields) - 1}")
    fields = truth.fields[idx]
    if fields.shape[1:] != est.estimates.shape[1:]:
        raise ValueError("estimate and truth grids differ")
    diff = np.linalg.norm(est.estimates - fields, axis=1)
    return diff / np.maximum(np.linalg.norm(fields, axis=1), DELTA)


def smoothed(errors: np.ndarray, width: int = 5) -> np.ndarray:
    """Running median over a trailing window of ``width`` steps."""
    errors = np.asarray(errors)
    return np.array([np.median(errors[max(0, i - width + 1):i + 1]) for i in range(len(errors))])


@dataclass
class ErrorReport:
    scenario: str
    observer: str
    condition: str
    errors: np.ndarray
    step_seconds: float = 0.0

    @property
    def median(self) -> float:
        return float(np.median(self.errors)) if len(self.errors) else float("nan")

    def segment(self, fraction: float, last: bool) -> np.ndarray:
        """The first (or last) ``fraction`` of the horizon, at least one step."""
        m = max(1, int(round(fraction * len(self.errors))))
        return self.errors[-m:] if last else self.errors[:m]


@dataclass
class BenchmarkReport:
    reports: list[ErrorReport] = field(default_factory=list)

    def cells(self) -> list[tuple[str, str]]:
        seen = []
        for r in self.reports:
            if (r.observer, r.condition) not in seen:
                seen.append((r.observer, r.condition))
        return seen

    def select(self, observer: str, condition: str) -> list[ErrorReport]:
        return [r for r in self.reports if r.observer == observer and r.condition == condition]

    def pooled(self, observer: str, condition: str) -> np.ndarray:
        sel = self.select(observer, condition)
        return np.concatenate([r.errors for r in sel]) if sel else np.empty(0)

    def quantiles(self, observer: str, condition: str) -> tuple[float, float, float]:
        """25/50/75% quantiles of all per-step errors in the cell."""
        errs = self.pooled(observer, condition)
        if not len(errs):
            return (float("nan"),) * 3
        q = np.quantile(errs, [0.25, 0.5, 0.75])
        return float(q[0]), float(q[1]), float(q[2])

    def median(self, observer: str, condition: str) -> float:
        return self.quantiles(observer, condition)[1]

    def horizon_medians(self, observer: str, condition: str, fraction: float = 0.1) -> tuple[float, float]:
        """Median error over the first and over the last ``fraction`` of the horizon."""
        sel = self.select(observer, condition)
        first = np.concatenate([r.segment(fraction, last=False) for r in sel])
        last = np.concatenate([r.segment(fraction, last=True) for r in sel])
        return float(np.median(first)), float(np.median(last))

    def seconds_per_step(self, observer: str) -> float:
        vals = [r.step_seconds for r in self.reports if r.observer == observer]
        return float(np.mean(vals)) if vals else float("nan")


@dataclass
class BenchCase:
    scenario: str
    condition: str
    truth: Trajectory
    record: SensorRecord
    truth_start: int = 0


def scenario_id(cfg: ScenarioConfig) -> str:
    return f"rho{cfg.target_density:.2f}-seed{cfg.seed}"


def _simulate_cell(cfg: ScenarioConfig, conditions: tuple[str, ...], noise_sigma: float) -> list[BenchCase]:
    cases = []
    sid = scenario_id(cfg)
    if "noiseless" in conditions or "noisy" in conditions:
        truth, record = run_scenario(replace(cfg, ood=False, noise_sigma=0.0))
        for cond in conditions:
            if cond == "noiseless":
                cases.append(BenchCase(sid, cond, truth, record))
            elif cond == "noisy":
                # only the readings change; the truth used for scoring is shared
                noisy = measure(truth.fields, cfg.sensor_cells, noise_sigma, cfg.seed, record.start)
                cases.append(BenchCase(sid, cond, truth, noisy))
    if "ood" in conditions:
        truth, record = run_scenario(replace(cfg, ood=True, noise_sigma=0.0))
        cases.append(BenchCase(sid, "ood", truth, record))
    return cases


def build_test_set(scenarios: Sequence[ScenarioConfig], conditions: Sequence[str] = CONDITIONS,
                   noise_sigma: float = 0.1, jobs: int = 1) -> list[BenchCase]:
    conditions = tuple(conditions)
    for c in conditions:
        if c not in CONDITIONS:
            raise ValueError(f"unknown condition {c!r}")
    args = [(cfg, conditions, noise_sigma) for cfg in scenarios]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(jobs) as pool:
            chunks = list(pool.map(_simulate_cell, *zip(*args)))
    else:
        chunks = [_simulate_cell(*a) for a in args]
    order = {c: i for i, c in enumerate(CONDITIONS)}
    return sorted((case for chunk in chunks for case in chunk), key=lambda c: order[c.condition])


def _evaluate_case(theta, psi, case: BenchCase, cfg: ObserverConfig, observer: str) -> ErrorReport:
    est = observe(observer, theta, psi, case.record, cfg)
    errors = error_evolution(est, case.truth, case.truth_start)
    secs = float(np.mean(est.step_seconds)) if len(est.step_seconds) else 0.0
    return ErrorReport(case.scenario, observer, case.condition, errors, secs)


def run_benchmark(theta, psi, test_set: Sequence[BenchCase], cfg: ObserverConfig,
                  observers: Sequence[str] = OBSERVERS, jobs: int = 1) -> BenchmarkReport:
    """Run every observer on every test case; report order is (case, observer)."""
    tasks = [(theta, psi, case, cfg, obs) for case in test_set for obs in observers]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(jobs) as pool:
            reports = list(pool.map(_evaluate_case, *zip(*tasks)))
    else:
        reports = [_evaluate_case(*t) for t in tasks]
    return BenchmarkReport(reports)


def write_long_csv(report: BenchmarkReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["observer", "condition", "scenario", "step", "error"])
        for r in report.reports:
            for step, e in enumerate(r.errors, start=1):
                writer.writerow([r.observer, r.condition, r.scenario, step, repr(float(e))])


def write_summary_csv(report: BenchmarkReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["observer", "condition", "q25", "q50", "q75", "scenarios", "seconds_per_step"])
        for obs, cond in report.cells():
            q = report.quantiles(obs, cond)
            writer.writerow([obs, cond, *(repr(v) for v in q), len(report.select(obs, cond)),
                             repr(report.seconds_per_step(obs))])
