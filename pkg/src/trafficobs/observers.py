"""Open-loop, open-loop-with-reset and closed-loop density observers.

Time bookkeeping: record step ``origin`` is observer time 0. With input
length ``n`` and delay ``n_d`` the observers need measurements from time
``-(n_d + n - 1)`` onwards. The estimate history ``hist`` holds one field
per time from ``-(n_d + n - 1)`` up to the horizon; times <= 0 are GP
completions of the measurements, later times are predictions.

The solution operator maps a newest-first window ending at time ``s`` to
fields at ``s + 1 .. s + n_d + 1``; its last slice is the estimate for
``s + n_d + 1``.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .fno import as_correction_operator, as_solution_operator
from .gp_interp import GpConfig, interpolator_for
from .ring_sim import SensorRecord

MODES = ("ol", "ol_reset", "cl")


@dataclass(frozen=True)
class ObserverConfig:
    n: int = 10
    n_d: int = 99
    grid_size: int = 123
    gp: GpConfig = field(default_factory=GpConfig)
    horizon_steps: int = 100
    origin: int | None = None
    mode: str = "cl"

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if self.n_d <= self.n - 1:
            raise ValueError(f"delay n_d={self.n_d} must exceed n-1={self.n - 1}")
        if self.horizon_steps < 0:
            raise ValueError("horizon_steps must be non-negative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    @property
    def n_out(self) -> int:
        return self.n_d + 1

    @property
    def lag(self) -> int:
        """How far before time 0 the first required measurement lies."""
        return self.n_d + self.n - 1

    def origin_for(self, record: SensorRecord) -> int:
        return record.start + self.lag if self.origin is None else self.origin


@dataclass
class EstimateTrajectory:
    estimates: np.ndarray   # (horizon, X): times 1..horizon
    prefix: np.ndarray      # (n_d, X): times -n_d+1..0
    origin: int             # record step of time 0
    mode: str
    step_seconds: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def times(self) -> np.ndarray:
        return np.arange(1, len(self.estimates) + 1)

    @property
    def record_steps(self) -> np.ndarray:
        return self.origin + self.times


def error_operator(extended: np.ndarray, data_based: np.ndarray) -> np.ndarray:
    extended, data_based = np.asarray(extended), np.asarray(data_based)
    if extended.shape != data_based.shape:
        raise ValueError(f"shape mismatch {extended.shape} vs {data_based.shape}")
    return extended - data_based


def extract_next_input(updated: np.ndarray, n: int) -> np.ndarray:
    """The ``n`` oldest slices of a time-ascending window, returned newest-first."""
    if n > len(updated):
        raise ValueError(f"cannot take {n} slices from a window of {len(updated)}")
    return np.ascontiguousarray(updated[:n][::-1])


class _Measurements:
    """GP posterior means of every record step, computed once."""

    def __init__(self, record: SensorRecord, cfg: ObserverConfig):
        self.record = record
        self.start = record.start
        interp = interpolator_for(record.sensor_cells, cfg.grid_size, cfg.gp)
        self.means = interp.mean(record.readings)

    def fields(self, steps) -> np.ndarray:
        steps = np.asarray(steps)
        self.record.window(steps)  # raises on missing steps
        return self.means[steps - self.start]


def _setup(record: SensorRecord, cfg: ObserverConfig):
    origin = cfg.origin_for(record)
    if origin - cfg.lag < record.start:
        raise ValueError(
            f"initialisation needs measurements from step {origin - cfg.lag}, record starts at {record.start}")
    meas = _Measurements(record, cfg)
    hist = np.empty((cfg.lag + 1 + cfg.horizon_steps, cfg.grid_size))
    hist[:cfg.lag + 1] = meas.fields(np.arange(origin - cfg.lag, origin + 1))
    return origin, meas, hist


def _result(hist, cfg: ObserverConfig, origin: int, mode: str, seconds) -> EstimateTrajectory:
    return EstimateTrajectory(hist[cfg.lag + 1:].copy(), hist[cfg.n:cfg.lag + 1].copy(), origin, mode,
                              np.asarray(seconds))


def _delayed_window(hist: np.ndarray, cfg: ObserverConfig, t: int) -> np.ndarray:
    """Newest-first window of estimates ending at time ``t - n_d``."""
    end = t - cfg.n_d + cfg.lag
    return np.ascontiguousarray(hist[end - cfg.n + 1:end + 1][::-1])


def observe_open_loop(theta, record: SensorRecord, cfg: ObserverConfig) -> EstimateTrajectory:
    """Autoregressive rollout; no measurement after time 0 is used."""
    G = as_solution_operator(theta)
    origin, _, hist = _setup(record, cfg)
    seconds = []
    for t in range(cfg.horizon_steps):
        tic = time.perf_counter()
        hist[t + 1 + cfg.lag] = G(_delayed_window(hist, cfg, t))[-1]
        seconds.append(time.perf_counter() - tic)
    return _result(hist, cfg, origin, "ol", seconds)


def observe_open_loop_reset(theta, record: SensorRecord, cfg: ObserverConfig) -> EstimateTrajectory:
    """Each prediction starts from a fresh GP completion of delayed measurements."""
    G = as_solution_operator(theta)
    origin, meas, hist = _setup(record, cfg)
    seconds = []
    for t in range(cfg.horizon_steps):
        tic = time.perf_counter()
        end = origin + t - cfg.n_d
        window = meas.fields(np.arange(end, end - cfg.n, -1))
        hist[t + 1 + cfg.lag] = G(np.ascontiguousarray(window))[-1]
        seconds.append(time.perf_counter() - tic)
    return _result(hist, cfg, origin, "ol_reset", seconds)


def observe_closed_loop(theta, psi, record: SensorRecord, cfg: ObserverConfig) -> EstimateTrajectory:
    """Autoregressive rollout whose inputs are corrected against the data each step.

    After predicting time ``t + 1`` the extended window covers times
    ``t + 2 - n - n_d .. t + 2 - n``; it is compared with the GP completion
    of the measurements over the same span, corrected, and its ``n`` oldest
    slices become the input for predicting ``t + 2``. Corrections are not
    written back into the estimate history.
    """
    G = as_solution_operator(theta)
    N = as_correction_operator(psi)
    origin, meas, hist = _setup(record, cfg)
    window = _delayed_window(hist, cfg, 0)
    seconds = []
    for t in range(cfg.horizon_steps):
        tic = time.perf_counter()
        hist[t + 1 + cfg.lag] = G(window)[-1]
        first = t + 2 - cfg.n - cfg.n_d
        extended = hist[first + cfg.lag:first + cfg.lag + cfg.n_out]
        data = meas.fields(origin + np.arange(first, first + cfg.n_out))
        updated = N(extended, error_operator(extended, data))
        window = extract_next_input(updated, cfg.n)
        seconds.append(time.perf_counter() - tic)
    return _result(hist, cfg, origin, "cl", seconds)


def observe(mode: str, theta, psi, record: SensorRecord, cfg: ObserverConfig) -> EstimateTrajectory:
    if mode == "ol":
        return observe_open_loop(theta, record, cfg)
    if mode == "ol_reset":
        return observe_open_loop_reset(theta, record, cfg)
    if mode == "cl":
        return observe_closed_loop(theta, psi, record, cfg)
    raise ValueError(f"unknown observer mode {mode!r}")


def write_estimates_csv(est: EstimateTrajectory, path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "cell", "estimate"])
        for step, row in zip(est.times, est.estimates):
            for cell, value in enumerate(row):
                writer.writerow([int(step), cell, repr(float(value))])
