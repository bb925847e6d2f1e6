"""Godunov finite-volume solver for the LWR conservation law on a ring.

Used as a physics-exact reference: it conserves mass to round-off, obeys a
discrete maximum principle under CFL <= 1, and provides a perfect solution
operator for testing observers.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ring_sim import Trajectory


class CflError(ValueError):
    pass


@dataclass(frozen=True)
class FluxModel:
    kind: str = "greenshields"
    v_free: float = 15.0
    rho_max: float = 1.0

    def __post_init__(self):
        if self.kind != "greenshields":
            raise ValueError(f"unknown flux model {self.kind!r}")
        if self.rho_max != 1.0:
            raise ValueError("densities are normalised: rho_max must be 1")

    @property
    def critical_density(self) -> float:
        return 0.5

    @property
    def max_wave_speed(self) -> float:
        return self.v_free


@dataclass(frozen=True)
class LwrConfig:
    dx: float
    dt: float
    steps: int = 0
    flux: FluxModel = field(default_factory=FluxModel)

    @property
    def cfl(self) -> float:
        return self.dt * self.flux.max_wave_speed / self.dx

    def check(self) -> None:
        if self.dx <= 0 or self.dt <= 0:
            raise CflError("dx and dt must be positive")
        if self.cfl > 1.0 + 1e-12:
            raise CflError(f"CFL number {self.cfl:.4g} exceeds 1")


def _q(flux: FluxModel, rho):
    return flux.v_free * rho * (1.0 - rho)


def flux_value(flux: FluxModel, rho: float) -> float:
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"density {rho} outside [0, 1]")
    return float(_q(flux, rho))


def godunov_flux(flux: FluxModel, rho_l, rho_r):
    """Exact Riemann flux for a concave flux: min(demand(left), supply(right))."""
    rc = flux.critical_density
    demand = _q(flux, np.minimum(rho_l, rc))
    supply = _q(flux, np.maximum(rho_r, rc))
    return np.minimum(demand, supply)


def godunov_step(rho: np.ndarray, cfg: LwrConfig) -> np.ndarray:
    cfg.check()
    rho = np.asarray(rho, dtype=float)
    f_right = godunov_flux(cfg.flux, rho, np.roll(rho, -1))  # F_{i+1/2}
    out = rho - (cfg.dt / cfg.dx) * (f_right - np.roll(f_right, 1))
    return np.clip(out, 0.0, 1.0)


def solve_ivp(rho0: np.ndarray, cfg: LwrConfig) -> Trajectory:
    cfg.check()
    rho = np.asarray(rho0, dtype=float)
    fields = np.empty((cfg.steps + 1, rho.size))
    fields[0] = rho
    for k in range(cfg.steps):
        rho = godunov_step(rho, cfg)
        fields[k + 1] = rho
    return Trajectory(fields, cfg.dx, cfg.dt)


def shift_operator(cfg: LwrConfig, n_out: int):
    """Perfect solution operator: newest slice of the window advanced 1..n_out steps.

    LWR is first order in time, so the history beyond the newest slice is
    irrelevant; this is the plug-in oracle used to test the observers.
    """
    def predict(window: np.ndarray) -> np.ndarray:
        rho = np.asarray(window)[0]
        out = np.empty((n_out, rho.size))
        for k in range(n_out):
            rho = godunov_step(rho, cfg)
            out[k] = rho
        return out

    return predict
