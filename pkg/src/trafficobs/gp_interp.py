"""Gaussian-process completion of sparse sensor readings on the ring.

Locations are normalised to the unit circle [0, 1). The kernel is a
squared exponential periodised over the ring (sum over images), which is
positive semi-definite for every length scale. Each time slice is fitted
independently with a zero prior mean.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .ring_sim import SensorRecord

JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


class GpNumericError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class GpConfig:
    length_scale: float = 0.15
    signal_variance: float = 0.25
    noise_variance: float = 1e-8
    kernel: str = "squared_exponential_wrapped"

    def __post_init__(self):
        if self.length_scale <= 0:
            raise ValueError("length_scale must be positive")
        if self.signal_variance <= 0:
            raise ValueError("signal_variance must be positive")
        if self.noise_variance < 0:
            raise ValueError("noise_variance must be non-negative")
        if self.kernel != "squared_exponential_wrapped":
            raise ValueError(f"unknown kernel {self.kernel!r}")


def kernel(a: np.ndarray, b: np.ndarray, cfg: GpConfig) -> np.ndarray:
    a = np.asarray(a, dtype=float)[:, None]
    b = np.asarray(b, dtype=float)[None, :]
    d = np.mod(a - b + 0.5, 1.0) - 0.5  # signed ring offset in [-0.5, 0.5)
    images = int(np.ceil(8.0 * cfg.length_scale)) + 1
    k = np.zeros(np.broadcast_shapes(a.shape, b.shape))
    for m in range(-images, images + 1):
        k += np.exp(-0.5 * ((d + m) / cfg.length_scale) ** 2)
    return cfg.signal_variance * k


def grid_points(grid_size: int) -> np.ndarray:
    """Normalised cell centres."""
    return (np.arange(grid_size) + 0.5) / grid_size


def cell_locations(cells: Sequence[int], grid_size: int) -> np.ndarray:
    return grid_points(grid_size)[np.asarray(cells, dtype=int)]


def robust_cholesky(mat: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor, escalating diagonal jitter if needed.

    The jitter is relative to the mean diagonal. Returns ``(factor, jitter)``.
    """
    scale = float(np.mean(np.diag(mat))) or 1.0
    eye = np.eye(len(mat))
    for rel in JITTER_LADDER:
        try:
            return np.linalg.cholesky(mat + rel * scale * eye), rel * scale
        except np.linalg.LinAlgError:
            continue
    raise GpNumericError("matrix not positive definite after jitter escalation")


@dataclass(frozen=True)
class GpPosterior:
    train_locations: np.ndarray
    train_targets: np.ndarray
    config: GpConfig
    factor: np.ndarray
    jitter: float
    alpha: np.ndarray

    def mean_raw(self, points: np.ndarray) -> np.ndarray:
        return kernel(points, self.train_locations, self.config) @ self.alpha

    def covariance(self, points: np.ndarray) -> np.ndarray:
        v = solve_triangular(self.factor, kernel(self.train_locations, points, self.config), lower=True)
        return kernel(points, points, self.config) - v.T @ v


def fit(locations: Sequence[float], targets: Sequence[float], cfg: GpConfig) -> GpPosterior:
    x = np.mod(np.asarray(locations, dtype=float), 1.0)
    y = np.asarray(targets, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("need at least one sensor location")
    if y.shape != x.shape:
        raise ValueError("targets must match locations")
    if len(np.unique(np.round(x, 12))) != x.size:
        raise ValueError("sensor locations must be distinct")
    K = kernel(x, x, cfg) + cfg.noise_variance * np.eye(x.size)
    L, jitter = robust_cholesky(K)
    alpha = cho_solve((L, True), y)
    return GpPosterior(x, y, cfg, L, jitter, alpha)


def posterior_mean(gp: GpPosterior, points: np.ndarray) -> np.ndarray:
    return np.clip(gp.mean_raw(points), 0.0, 1.0)


def sample(gp: GpPosterior, points: np.ndarray, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    Lpost, _ = robust_cholesky(gp.covariance(points))
    draw = gp.mean_raw(points) + Lpost @ rng.standard_normal(len(points))
    return np.clip(draw, 0.0, 1.0)


class SliceInterpolator:
    """Vectorised per-slice GP for fixed sensor locations and evaluation grid.

    The posterior mean is linear in the readings and the posterior
    covariance does not depend on them, so both are precomputed once.
    """

    def __init__(self, locations: np.ndarray, points: np.ndarray, cfg: GpConfig):
        self.points = np.asarray(points, dtype=float)
        template = fit(locations, np.zeros(len(locations)), cfg)
        self.locations = template.train_locations
        kxs = kernel(self.locations, self.points, cfg)
        # mean = readings @ gain
        self.gain = cho_solve((template.factor, True), kxs)
        self._template = template
        self._post_factor = None

    @property
    def post_factor(self) -> np.ndarray:
        if self._post_factor is None:
            self._post_factor, _ = robust_cholesky(self._template.covariance(self.points))
        return self._post_factor

    def mean(self, readings: np.ndarray) -> np.ndarray:
        return np.clip(np.asarray(readings) @ self.gain, 0.0, 1.0)

    def sample(self, readings: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        readings = np.atleast_2d(readings)
        z = rng.standard_normal((readings.shape[0], len(self.points)))
        return np.clip(readings @ self.gain + z @ self.post_factor.T, 0.0, 1.0)


@lru_cache(maxsize=32)
def _cached_interpolator(cells: tuple, grid_size: int, cfg: GpConfig) -> SliceInterpolator:
    return SliceInterpolator(cell_locations(cells, grid_size), grid_points(grid_size), cfg)


def interpolator_for(sensor_cells: Sequence[int], grid_size: int, cfg: GpConfig) -> SliceInterpolator:
    return _cached_interpolator(tuple(int(c) for c in sensor_cells), int(grid_size), cfg)


def interpolate_window(record: SensorRecord, steps: Sequence[int], grid_size: int, cfg: GpConfig,
                       mode: str = "mean", seed=None) -> np.ndarray:
    """Complete each requested step into a full field; returned newest-first.

    ``steps`` may be given in any order; the output is sorted so that row 0
    holds the latest step.
    """
    if mode not in ("mean", "sample"):
        raise ValueError(f"mode must be 'mean' or 'sample', got {mode!r}")
    steps = sorted(steps, reverse=True)
    readings = record.window(steps)
    interp = interpolator_for(record.sensor_cells, grid_size, cfg)
    if mode == "mean":
        return interp.mean(readings)
    return interp.sample(readings, np.random.default_rng(seed))
