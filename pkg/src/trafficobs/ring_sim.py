"""Krauss car-following simulation on a single-lane ring road.

Vehicles are represented by the position of their front bumper along the
ring. The density field is obtained by spreading each vehicle with a
periodic Gaussian kernel and normalising so that a bumper-to-bumper jam
(spacing equal to the vehicle footprint) reads as density 1.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np
from scipy.special import ndtr


class InfeasibleDensityError(ValueError):
    """Requested mean density cannot be packed on the ring."""


@dataclass(frozen=True)
class KraussParams:
    v_max: float = 15.0
    accel: float = 1.5
    decel: float = 3.0
    reaction_time: float = 1.0
    imperfection: float = 0.8
    min_gap: float = 2.0
    vehicle_length: float = 5.5
    dt: float = 1.0

    def __post_init__(self):
        for name in ("v_max", "accel", "decel", "reaction_time", "vehicle_length", "dt"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.min_gap < 0:
            raise ValueError("min_gap must be non-negative")
        if not 0.0 <= self.imperfection <= 1.0:
            raise ValueError("imperfection must lie in [0, 1]")
        if self.dt > self.reaction_time:
            raise ValueError("dt must not exceed the reaction time")

    @property
    def footprint(self) -> float:
        return self.vehicle_length + self.min_gap


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid of ``size`` cells over a ring of ``length`` meters."""

    size: int
    length: float

    @property
    def dx(self) -> float:
        return self.length / self.size

    @property
    def edges(self) -> np.ndarray:
        return np.arange(self.size + 1) * self.dx

    @property
    def centers(self) -> np.ndarray:
        return (np.arange(self.size) + 0.5) * self.dx


@dataclass
class MicroState:
    positions: np.ndarray
    velocities: np.ndarray
    ring_length: float
    vehicle_length: float
    time: float = 0.0

    @property
    def count(self) -> int:
        return len(self.positions)

    def gaps(self) -> np.ndarray:
        """Bumper-to-bumper distance from each vehicle to its leader."""
        if self.count == 0:
            return np.empty(0)
        ahead = np.roll(self.positions, -1)
        return np.mod(ahead - self.positions, self.ring_length) + np.where(
            self.count == 1, self.ring_length, 0.0) - self.vehicle_length


def equidistant_sensors(grid_size: int, count: int) -> tuple[int, ...]:
    return tuple(int(round(i * grid_size / count)) % grid_size for i in range(count))


@dataclass(frozen=True)
class ScenarioConfig:
    target_density: float
    seed: int = 0
    warmup_steps: int = 300
    record_steps: int = 2400
    record_dt: float = 1.0
    grid_size: int = 123
    ring_length: float = 6200.0
    sensor_cells: tuple[int, ...] = ()
    kernel_bandwidth: float = 25.0
    noise_sigma: float = 0.0
    ood: bool = False
    params: KraussParams = field(default_factory=KraussParams)

    def __post_init__(self):
        if not 0.0 <= self.target_density:
            raise ValueError("target_density must be non-negative")
        if self.grid_size < 2:
            raise ValueError("grid_size must be at least 2")
        for c in self.sensor_cells:
            if not 0 <= c < self.grid_size:
                raise ValueError(f"sensor_cells: index {c} outside [0, {self.grid_size})")
        if len(set(self.sensor_cells)) != len(self.sensor_cells):
            raise ValueError("sensor_cells: duplicate index")
        if self.kernel_bandwidth <= 0:
            raise ValueError("kernel_bandwidth must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        ratio = self.record_dt / self.params.dt
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError("record_dt must be a positive multiple of the micro step")

    @property
    def grid(self) -> Grid:
        return Grid(self.grid_size, self.ring_length)

    @property
    def effective_params(self) -> KraussParams:
        return make_ood_params(self.params) if self.ood else self.params

    @property
    def horizon(self) -> float:
        return self.record_steps * self.record_dt


@dataclass
class Trajectory:
    """Density fields at uniform spacing ``dt``; ``fields[k]`` is time ``t0 + k*dt``."""

    fields: np.ndarray
    dx: float
    dt: float
    t0: float = 0.0

    def __len__(self) -> int:
        return len(self.fields)


@dataclass
class SensorRecord:
    """Readings ``readings[k]`` belong to record step ``start + k``."""

    sensor_cells: np.ndarray
    readings: np.ndarray
    noise_sigma: float = 0.0
    seed: int = 0
    start: int = 0

    @property
    def steps(self) -> range:
        return range(self.start, self.start + len(self.readings))

    def at(self, step: int) -> np.ndarray:
        k = step - self.start
        if not 0 <= k < len(self.readings):
            raise KeyError(f"no measurement at step {step}")
        return self.readings[k]

    def window(self, steps: Sequence[int]) -> np.ndarray:
        steps = np.asarray(steps) - self.start
        if len(steps) and (steps.min() < 0 or steps.max() >= len(self.readings)):
            missing = [int(s) + self.start for s in steps if not 0 <= s < len(self.readings)]
            raise KeyError(f"no measurement at steps {missing}")
        return self.readings[steps]


def make_ood_params(p: KraussParams) -> KraussParams:
    """Sloppier, weaker-braking drivers: more jams than the baseline."""
    return replace(p, imperfection=min(1.0, 2.0 * p.imperfection), decel=0.7 * p.decel)


def vehicle_count(density: float, ring_length: float, p: KraussParams) -> int:
    if density < 0:
        raise InfeasibleDensityError(f"negative density {density}")
    fp = p.footprint
    n = int(round(density * ring_length / fp))
    capacity = int(np.floor(ring_length / fp + 1e-9))
    if n > capacity:
        if density <= 1.0:
            return capacity
        raise InfeasibleDensityError(
            f"density {density} needs {n} vehicles but only {capacity} fit with min_gap {p.min_gap}")
    return n


def init_ring(cfg: ScenarioConfig) -> MicroState:
    """Insert vehicles at jittered, near-uniform spacing and run the warmup.

    The jitter is drawn so that every gap respects ``min_gap``; the warmup
    lets the insertion transient decay before anything is recorded.
    """
    p = cfg.effective_params
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    n = vehicle_count(cfg.target_density, cfg.ring_length, p)
    spacing = cfg.ring_length / n if n else cfg.ring_length
    slack = max(spacing - p.footprint, 0.0)
    positions = np.arange(n) * spacing + rng.uniform(0.0, 0.5 * slack, size=n)
    velocities = rng.uniform(0.0, 0.5 * p.v_max, size=n) if n else np.empty(0)
    state = MicroState(np.mod(positions, cfg.ring_length), velocities, cfg.ring_length, p.vehicle_length)
    for _ in range(cfg.warmup_steps):
        state = step_krauss(state, p, rng)
    state.time = 0.0
    return state


def _safe_speed(v, v_lead, gap, p: KraussParams):
    return v_lead + (gap - v_lead * p.reaction_time) / ((v + v_lead) / (2.0 * p.decel) + p.reaction_time)


def step_krauss(state: MicroState, p: KraussParams, rng: int | np.random.Generator) -> MicroState:
    """Advance every vehicle by one micro step (parallel update).

    Desired speed is ``min(v_max, v + a dt, v_safe)`` minus a random
    dawdle ``eps * a * dt * U(0, 1)``. A final cap keeps each new gap at or
    above ``min_gap`` given the leader's own new speed.
    """
    rng = np.random.default_rng(rng)
    n = state.count
    if n == 0:
        return MicroState(state.positions.copy(), state.velocities.copy(), state.ring_length,
                          state.vehicle_length, state.time + p.dt)
    v = state.velocities
    lead = np.roll(np.arange(n), -1)
    gap = np.maximum(state.gaps() - p.min_gap, 0.0)
    v_lead = v[lead]
    v_safe = np.maximum(_safe_speed(v, v_lead, gap, p), 0.0)
    v_des = np.minimum(np.minimum(p.v_max, v + p.accel * p.dt), v_safe)
    dawdle = p.imperfection * p.accel * p.dt * rng.random(n)
    v_new = np.maximum(v_des - dawdle, 0.0)
    if n > 1:
        # propagate the no-overlap cap backwards through platoons until stable
        for _ in range(n + 1):
            capped = np.minimum(v_new, gap / p.dt + v_new[lead])
            if np.array_equal(capped, v_new):
                break
            v_new = capped
    else:
        v_new = np.minimum(v_new, gap / p.dt)
    x_new = np.mod(state.positions + v_new * p.dt, state.ring_length)
    # keep index order consistent with ring order (vehicle 0 may wrap past 0)
    order = np.argsort(x_new, kind="stable")
    out = MicroState(x_new[order], v_new[order], state.ring_length, state.vehicle_length,
                     state.time + p.dt)
    if n > 1 and np.any(out.gaps() < -1e-9):
        raise AssertionError("collision detected in Krauss step")
    return out


def kernel_mass(positions: np.ndarray, grid: Grid, bandwidth: float) -> np.ndarray:
    """Mass of each vehicle's periodic Gaussian falling in each cell, summed over vehicles.

    Every vehicle contributes total mass 1 (up to image truncation ~1e-300).
    """
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    if len(positions) == 0:
        return np.zeros(grid.size)
    L = grid.length
    images = int(np.ceil(8 * bandwidth / L)) + 1
    shifts = np.arange(-images, images + 1) * L
    # cumulative mass at each cell edge, summed over vehicles and images
    z = (grid.edges[:, None, None] - positions[None, :, None] + shifts[None, None, :]) / bandwidth
    cdf = ndtr(z).sum(axis=(1, 2))
    return np.diff(cdf)


def kernel_density(state: MicroState, grid: Grid, bandwidth: float, footprint: float) -> np.ndarray:
    mass = kernel_mass(state.positions, grid, bandwidth)
    return np.clip(mass * footprint / grid.dx, 0.0, 1.0)


def measure(fields: np.ndarray, sensor_cells: Sequence[int], noise_sigma: float = 0.0,
            seed: int = 0, start: int = 0) -> SensorRecord:
    """Sample ``fields`` at the sensor cells, add i.i.d. Gaussian noise and clip to [0, 1]."""
    cells = np.asarray(sensor_cells, dtype=int)
    readings = np.asarray(fields)[:, cells].copy()
    if noise_sigma > 0:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        readings = readings + rng.normal(0.0, noise_sigma, size=readings.shape)
    return SensorRecord(cells, np.clip(readings, 0.0, 1.0), float(noise_sigma), seed, start)


def iter_states(cfg: ScenarioConfig) -> Iterator[MicroState]:
    """Yield the micro state at each record time (after warmup)."""
    p = cfg.effective_params
    state = init_ring(cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    substeps = int(round(cfg.record_dt / p.dt))
    count = state.count
    for k in range(cfg.record_steps):
        yield state
        if k + 1 < cfg.record_steps:
            for _ in range(substeps):
                state = step_krauss(state, p, rng)
            assert state.count == count


def run_scenario(cfg: ScenarioConfig) -> tuple[Trajectory, SensorRecord]:
    p = cfg.effective_params
    grid = cfg.grid
    fields = np.array([kernel_density(s, grid, cfg.kernel_bandwidth, p.footprint)
                       for s in iter_states(cfg)]).reshape(cfg.record_steps, grid.size)
    traj = Trajectory(fields, grid.dx, cfg.record_dt)
    record = measure(fields, cfg.sensor_cells, cfg.noise_sigma, cfg.seed)
    return traj, record
