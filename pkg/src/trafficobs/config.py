"""INI experiment configuration: parsing, defaults and cross-field validation."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

from .fno import FnoArch, correction_arch, solution_arch
from .gp_interp import GpConfig
from .lwr_oracle import CflError
from .observers import MODES, ObserverConfig
from .ring_sim import KraussParams, ScenarioConfig, equidistant_sensors
from .train import TrainConfig
from .evaluation import CONDITIONS

TEST_SEED_OFFSET = 1_000_000


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class OperatorSpec:
    lift_width: int = 16
    layer_widths: tuple[int, ...] = (24, 24, 32, 32)
    modes: tuple[int, ...] = (15, 12, 9, 9)
    projection_hidden: int = 128


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    # ring geometry and sensors
    grid_size: int = 123
    ring_length: float = 6200.0
    sensor_count: int = 6
    sensor_cells: tuple[int, ...] = ()
    kernel_bandwidth: float = 25.0
    krauss: KraussParams = field(default_factory=KraussParams)
    # training data
    train_densities: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)
    train_runs: int = 20
    warmup_steps: int = 300
    record_steps: int = 2400
    n: int = 10
    n_d: int = 99
    solution: OperatorSpec = field(default_factory=OperatorSpec)
    correction: OperatorSpec = field(default_factory=lambda: OperatorSpec(16, (24, 32), (15, 9), 128))
    train: TrainConfig = field(default_factory=TrainConfig)
    correction_train: TrainConfig | None = None  # defaults to ``train``
    gp: GpConfig = field(default_factory=GpConfig)
    # evaluation
    horizon_steps: int = 300
    test_densities: tuple[float, ...] = (0.3, 0.5, 0.7)
    test_runs: int = 3
    conditions: tuple[str, ...] = CONDITIONS
    observers: tuple[str, ...] = MODES
    noise_sigma: float = 0.1

    @property
    def cells(self) -> tuple[int, ...]:
        return self.sensor_cells or equidistant_sensors(self.grid_size, self.sensor_count)

    @property
    def dx(self) -> float:
        return self.ring_length / self.grid_size

    @property
    def n_out(self) -> int:
        return self.n_d + 1

    @property
    def train_correction(self) -> TrainConfig:
        return self.correction_train or self.train

    def solution_arch(self) -> FnoArch:
        s = self.solution
        return solution_arch(self.n, self.n_out, s.lift_width, s.layer_widths, s.modes, s.projection_hidden)

    def correction_arch(self) -> FnoArch:
        s = self.correction
        return correction_arch(self.n_out, s.lift_width, s.layer_widths, s.modes, s.projection_hidden)

    def observer(self, mode: str = "cl") -> ObserverConfig:
        return ObserverConfig(self.n, self.n_d, self.grid_size, self.gp, self.horizon_steps, None, mode)

    def _scenario(self, density: float, seed: int, steps: int) -> ScenarioConfig:
        return ScenarioConfig(density, seed, self.warmup_steps, steps, 1.0, self.grid_size, self.ring_length,
                              self.cells, self.kernel_bandwidth, 0.0, False, self.krauss)

    def train_scenarios(self) -> list[ScenarioConfig]:
        return [self._scenario(d, 1000 * self.seed + 100 * i + r, self.record_steps)
                for i, d in enumerate(self.train_densities) for r in range(self.train_runs)]

    def test_scenarios(self) -> list[ScenarioConfig]:
        """Test scenarios use seeds disjoint from every training seed."""
        steps = self.n + self.n_d + self.horizon_steps
        return [self._scenario(d, TEST_SEED_OFFSET + 1000 * self.seed + 100 * i + r, steps)
                for i, d in enumerate(self.test_densities) for r in range(self.test_runs)]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        ct = None if self.correction_train is None else replace(self.correction_train, seed=seed)
        return replace(self, seed=seed, train=replace(self.train, seed=seed), correction_train=ct)

    def validate(self) -> "ExperimentConfig":
        if self.grid_size < 2:
            raise ConfigError("geometry.grid_size", "must be at least 2")
        for c in self.cells:
            if not 0 <= c < self.grid_size:
                raise ConfigError("geometry.sensor_cells", f"index {c} outside [0, {self.grid_size})")
        if len(set(self.cells)) != len(self.cells):
            raise ConfigError("geometry.sensor_cells", "duplicate index")
        if self.n < 1:
            raise ConfigError("window.n", "must be at least 1")
        if self.n_d <= self.n - 1:
            raise ConfigError("window.n_d", f"must exceed n - 1 = {self.n - 1}")
        if self.horizon_steps < 0:
            raise ConfigError("observer.horizon_steps", "must be non-negative")
        for name, spec in (("solution", self.solution), ("correction", self.correction)):
            if len(spec.layer_widths) != len(spec.modes):
                raise ConfigError(f"{name}.modes", "need one mode count per layer")
            for k in spec.modes:
                if not 1 <= k or 2 * k - 1 > self.grid_size:
                    raise ConfigError(f"{name}.modes", f"{k} modes do not fit a grid of {self.grid_size}")
        for k in self.correction_arch().time_modes:
            if 2 * k - 1 > self.n_out:
                raise ConfigError("correction.modes", f"{k} time modes do not fit a window of {self.n_out}")
        for c in self.conditions:
            if c not in CONDITIONS:
                raise ConfigError("evaluate.conditions", f"unknown condition {c!r}")
        for o in self.observers:
            if o not in MODES:
                raise ConfigError("evaluate.observers", f"unknown observer {o!r}")
        if any(not 0 <= d <= 1 for d in self.train_densities + self.test_densities):
            raise ConfigError("simulation.train_densities", "densities must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ConfigError("evaluate.noise_sigma", "must be non-negative")
        # CFL of a Greenshields LWR model on this grid, as a sanity bound on dt
        if self.krauss.v_max * self.krauss.dt > self.dx:
            raise ConfigError("krauss.dt", str(CflError(
                f"v_max*dt = {self.krauss.v_max * self.krauss.dt} exceeds dx = {self.dx}")))
        return self


# section.key -> (attribute path, parser)
def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.replace(",", " ").split())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.replace(",", " ").split())


def _words(s: str) -> tuple[str, ...]:
    return tuple(s.replace(",", " ").split())


_TOP = {
    "experiment": {"seed": ("seed", int), "out_dir": ("out_dir", str)},
    "geometry": {"grid_size": ("grid_size", int), "ring_length": ("ring_length", float),
                 "sensor_count": ("sensor_count", int), "sensor_cells": ("sensor_cells", _ints),
                 "kernel_bandwidth": ("kernel_bandwidth", float)},
    "simulation": {"train_densities": ("train_densities", _floats), "train_runs": ("train_runs", int),
                   "warmup_steps": ("warmup_steps", int), "record_steps": ("record_steps", int)},
    "window": {"n": ("n", int), "n_d": ("n_d", int)},
    "observer": {"horizon_steps": ("horizon_steps", int)},
    "evaluate": {"test_densities": ("test_densities", _floats), "test_runs": ("test_runs", int),
                 "conditions": ("conditions", _words), "observers": ("observers", _words),
                 "noise_sigma": ("noise_sigma", float)},
}
_NESTED = {"krauss": "krauss", "train": "train", "correction_train": "correction_train", "gp": "gp",
           "solution": "solution", "correction": "correction"}
_NESTED_PARSERS = {"layer_widths": _ints, "modes": _ints}


def _convert(obj, key: str, raw: str):
    if key in _NESTED_PARSERS:
        return _NESTED_PARSERS[key](raw)
    current = getattr(obj, key)
    if isinstance(current, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    return type(current)(raw)


def from_parser(parser: configparser.ConfigParser) -> ExperimentConfig:
    cfg = ExperimentConfig()
    updates = {}
    # [correction_train] starts from the final [train] values
    sections = sorted(parser.sections(), key=lambda name: name == "correction_train")
    for section in sections:
        if section in _TOP:
            table = _TOP[section]
            for key, raw in parser.items(section):
                if key not in table:
                    raise ConfigError(f"{section}.{key}", "unknown key")
                attr, conv = table[key]
                try:
                    updates[attr] = conv(raw)
                except ValueError as exc:
                    raise ConfigError(f"{section}.{key}", str(exc)) from None
        elif section in _NESTED:
            attr = _NESTED[section]
            obj = getattr(cfg, attr)
            if attr == "correction_train":
                obj = updates.get("train", cfg.train)
            names = {f.name for f in fields(obj)}
            changes = {}
            for key, raw in parser.items(section):
                if key not in names:
                    raise ConfigError(f"{section}.{key}", "unknown key")
                try:
                    changes[key] = _convert(obj, key, raw)
                except ValueError as exc:
                    raise ConfigError(f"{section}.{key}", str(exc)) from None
            try:
                updates[attr] = replace(obj, **changes)
            except ValueError as exc:
                raise ConfigError(section, str(exc)) from None
        else:
            raise ConfigError(section, "unknown section")
    try:
        cfg = replace(cfg, **updates)
    except ValueError as exc:
        raise ConfigError("experiment", str(exc)) from None
    if "train" not in updates or "seed" not in dict(parser.items("train")):
        cfg = replace(cfg, train=replace(cfg.train, seed=cfg.seed))
        if cfg.correction_train is not None and "seed" not in dict(parser.items("correction_train")):
            cfg = replace(cfg, correction_train=replace(cfg.correction_train, seed=cfg.seed))
    return cfg.validate()


def load(path: str | Path) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    except configparser.Error as exc:
        raise ConfigError("config", str(exc)) from None
    return from_parser(parser)


def bundled(name: str) -> Path:
    """Path of a configuration shipped with the package, e.g. ``desk.cfg``."""
    return Path(str(resources.files(__package__) / "configs" / name))
