"""Windowing, training objectives, gradients, Adam and the dataset container."""
from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import containers
from .fno import (FnoArch, FnoParams, fno2d_forward, fno_forward, init_params,
                  save_checkpoint)
from .gp_interp import GpConfig, interpolator_for
from .ring_sim import SensorRecord, Trajectory
from .tape import GradTape

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, message: str, last_good: FnoParams | None = None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class SamplePair:
    input: np.ndarray   # (n, X), newest first
    target: np.ndarray  # (n_out, X), oldest first
    scenario: int = 0
    start: int = 0


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 500
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    validation_fraction: float = 0.1
    checkpoint_every: int = 0
    gp_sample_policy: str = "fresh"  # or "fixed": one GP draw per pair for all epochs

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.gp_sample_policy not in ("fresh", "fixed"):
            raise ValueError("gp_sample_policy must be 'fresh' or 'fixed'")


# --------------------------------------------------------------------------
# windowing


def window_dataset(trajectories: Sequence[Trajectory | np.ndarray], n: int, n_out: int) -> list[SamplePair]:
    """Cut each trajectory into consecutive non-overlapping blocks of ``n + n_out`` steps."""
    block = n + n_out
    pairs: list[SamplePair] = []
    skipped = 0
    for sid, traj in enumerate(trajectories):
        fields = traj.fields if isinstance(traj, Trajectory) else np.asarray(traj)
        count = len(fields) // block
        if count == 0:
            skipped += 1
        for j in range(count):
            s = j * block
            pairs.append(SamplePair(fields[s:s + n][::-1].copy(), fields[s + n:s + block].copy(), sid, s))
    if skipped:
        warnings.warn(f"{skipped} trajectories shorter than {block} steps were skipped", stacklevel=2)
    return pairs


def stack_pairs(pairs: Sequence[SamplePair]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([p.input for p in pairs]), np.stack([p.target for p in pairs])


# --------------------------------------------------------------------------
# objectives


def _squared_error(pred: np.ndarray, target: np.ndarray, dx: float, tape: GradTape | None,
                   batch_id=None) -> float:
    if not np.all(np.isfinite(pred)):
        raise TrainingError(f"non-finite forward output in batch {batch_id}")
    resid = pred - target
    b = pred.shape[0]
    loss = float(np.sum(resid * resid) * dx / b)
    if tape is not None:
        tape.push("loss", lambda g: g * 2.0 * resid * dx / b)
    return loss


def loss_solution(params: FnoParams, inputs: np.ndarray, targets: np.ndarray, dx: float,
                  tape: GradTape | None = None, batch_id=None) -> float:
    """Mean over the batch of the horizon-summed, dx-weighted squared error."""
    pred = fno_forward(inputs, params, tape)
    return _squared_error(pred, targets, dx, tape, batch_id)


def data_estimate(targets: np.ndarray, sensor_cells, gp_cfg: GpConfig, rng=None,
                  mode: str = "sample") -> np.ndarray:
    """GP completion of each target slice from its values at the sensor cells."""
    b, t, size = targets.shape
    interp = interpolator_for(sensor_cells, size, gp_cfg)
    readings = targets[:, :, np.asarray(sensor_cells, dtype=int)].reshape(b * t, -1)
    if mode == "mean":
        return interp.mean(readings).reshape(b, t, size)
    return interp.sample(readings, np.random.default_rng(rng)).reshape(b, t, size)


def loss_correction(psi, theta, inputs: np.ndarray, targets: np.ndarray, sensor_cells,
                    gp_cfg: GpConfig, dx: float, seed=None, predictions: np.ndarray | None = None,
                    estimates: np.ndarray | None = None, tape: GradTape | None = None,
                    batch_id=None, gp_mode: str = "sample") -> float:
    """Refinement objective for the correction operator; ``theta`` is held fixed.

    ``psi`` is either 2D operator parameters or a callable
    ``(state_window, error_window) -> window`` (e.g. the identity stub).
    ``predictions`` / ``estimates`` may be supplied to skip recomputing the
    frozen open-loop forecast or the GP data estimate.
    """
    if predictions is None:
        predictions = fno_forward(inputs, theta)
    if estimates is None:
        estimates = data_estimate(targets, sensor_cells, gp_cfg, seed, gp_mode)
    err = predictions - estimates
    if isinstance(psi, FnoParams):
        out = fno2d_forward(predictions, err, psi, tape)
    else:
        out = np.stack([psi(p, e) for p, e in zip(predictions, err)])
    return _squared_error(out, targets, dx, tape, batch_id)


def grad(loss_fn: Callable[..., float], params: FnoParams, *args, **kwargs) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``loss_fn(params, *args, **kwargs)`` and its exact reverse-mode gradient."""
    tape = GradTape(params.arrays)
    loss = loss_fn(params, *args, tape=tape, **kwargs)
    return loss, tape.backward(1.0)


# --------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: FnoParams) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.arrays.items()},
                   {k: np.zeros_like(a) for k, a in params.arrays.items()}, 0)


def adam_step(params: FnoParams, grads: dict[str, np.ndarray], state: AdamState,
              cfg: TrainConfig) -> tuple[FnoParams, AdamState]:
    t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    new_arrays, m_new, v_new = {}, {}, {}
    for k, p in params.arrays.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k}")
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_arrays[k] = p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
        m_new[k], v_new[k] = m, v
    return params.with_arrays(new_arrays, params.step + 1), AdamState(m_new, v_new, t)


# --------------------------------------------------------------------------
# training loops


def _split(count: int, cfg: TrainConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(count)
    n_val = int(round(cfg.validation_fraction * count))
    if cfg.validation_fraction > 0 and count > 1:
        n_val = min(max(n_val, 1), count - 1)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _batched_loss(loss_fn, params, idx: np.ndarray, batch_size: int) -> float:
    total = 0.0
    for s in range(0, len(idx), batch_size):
        chunk = idx[s:s + batch_size]
        total += loss_fn(params, chunk) * len(chunk)
    return total / len(idx)


def _fit(params: FnoParams, count: int, cfg: TrainConfig, loss_fn, log_rows: list | None,
         checkpoint_dir: str | Path | None, tag: str) -> FnoParams:
    """Generic mini-batch Adam loop; returns the best-validation parameters.

    ``loss_fn(params, idx, epoch=None, tape=None)`` evaluates the objective on
    the pairs ``idx``.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 17]))
    train_idx, val_idx = _split(count, cfg, rng)
    if len(val_idx) == 0:
        val_idx = train_idx
    evaluate = lambda p: _batched_loss(lambda q, i: loss_fn(q, i, epoch=-1), p, val_idx, cfg.batch_size)
    best, best_val = params, evaluate(params)
    state = AdamState.zeros_like(params)
    start = time.perf_counter()
    if log_rows is not None:
        log_rows.append({"epoch": 0, "train_loss": float("nan"), "val_loss": best_val,
                         "wall_seconds": 0.0})
    for epoch in range(1, cfg.epochs + 1):
        order = train_idx[rng.permutation(len(train_idx))]
        running = 0.0
        for s in range(0, len(order), cfg.batch_size):
            chunk = order[s:s + cfg.batch_size]
            try:
                loss, g = grad(lambda q, tape: loss_fn(q, chunk, epoch=epoch, tape=tape), params)
            except (TrainingError, FloatingPointError) as exc:
                if checkpoint_dir is not None:
                    save_checkpoint(best, Path(checkpoint_dir) / f"{tag}.last_good.ckpt")
                raise TrainingError(f"{tag}: diverged in epoch {epoch}: {exc}", best) from exc
            params, state = adam_step(params, g, state, cfg)
            running += loss * len(chunk)
        val = evaluate(params)
        if not math.isfinite(val):
            raise TrainingError(f"{tag}: non-finite validation loss in epoch {epoch}", best)
        if val <= best_val:
            best, best_val = params, val
        if log_rows is not None:
            log_rows.append({"epoch": epoch, "train_loss": running / len(order), "val_loss": val,
                             "wall_seconds": time.perf_counter() - start})
        if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0 and checkpoint_dir is not None:
            save_checkpoint(best, Path(checkpoint_dir) / f"{tag}.epoch{epoch:04d}.ckpt")
        log.debug("%s epoch %d train %.4g val %.4g", tag, epoch, running / len(order), val)
    return best


def train_solution_operator(pairs: Sequence[SamplePair], arch: FnoArch, cfg: TrainConfig, dx: float,
                            log_rows: list | None = None,
                            checkpoint_dir: str | Path | None = None) -> FnoParams:
    if not pairs:
        raise ValueError("empty training set")
    inputs, targets = stack_pairs(pairs)
    params = init_params(arch, cfg.seed)

    def loss_fn(p, idx, epoch=None, tape=None):
        return loss_solution(p, inputs[idx], targets[idx], dx, tape=tape, batch_id=(epoch, int(idx[0])))

    return _fit(params, len(pairs), cfg, loss_fn, log_rows, checkpoint_dir, "solution")


def open_loop_predictions(theta: FnoParams, inputs: np.ndarray, batch_size: int = 64) -> np.ndarray:
    return np.concatenate([fno_forward(inputs[s:s + batch_size], theta)
                           for s in range(0, len(inputs), batch_size)])


def train_correction_operator(pairs: Sequence[SamplePair], theta: FnoParams, arch2d: FnoArch,
                              cfg: TrainConfig, sensor_cells, gp_cfg: GpConfig, dx: float,
                              log_rows: list | None = None,
                              checkpoint_dir: str | Path | None = None) -> FnoParams:
    """Fit the 2D correction operator against a frozen solution operator.

    One GP posterior draw per slice is made each time a pair is presented
    (``fresh``), or once per pair for the whole run (``fixed``); validation
    uses the posterior mean, as the observers do at inference.
    """
    if not pairs:
        raise ValueError("empty training set")
    inputs, targets = stack_pairs(pairs)
    predictions = open_loop_predictions(theta, inputs, cfg.batch_size)
    mean_estimates = data_estimate(targets, sensor_cells, gp_cfg, mode="mean")
    params = init_params(arch2d, cfg.seed)
    cells = np.asarray(sensor_cells, dtype=int)

    def estimates_for(idx, epoch):
        if epoch == -1:
            return mean_estimates[idx]
        out = np.empty_like(targets[idx])
        for j, i in enumerate(idx):
            key = [cfg.seed, int(i)] if cfg.gp_sample_policy == "fixed" else [cfg.seed, int(i), epoch]
            out[j] = data_estimate(targets[i:i + 1], cells, gp_cfg, np.random.SeedSequence(key))[0]
        return out

    def loss_fn(p, idx, epoch=None, tape=None):
        return loss_correction(p, theta, inputs[idx], targets[idx], cells, gp_cfg, dx,
                               predictions=predictions[idx], estimates=estimates_for(idx, epoch),
                               tape=tape, batch_id=(epoch, int(idx[0])))

    return _fit(params, len(pairs), cfg, loss_fn, log_rows, checkpoint_dir, "correction")


def write_training_log(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss", "wall_seconds"])
        writer.writeheader()
        writer.writerows(rows)


# --------------------------------------------------------------------------
# dataset container


@dataclass
class Scenario:
    descriptor: dict
    trajectory: Trajectory
    record: SensorRecord


@dataclass
class Dataset:
    grid_size: int
    dx: float
    dt: float
    n: int
    n_out: int
    scenarios: list[Scenario] = field(default_factory=list)

    def pairs(self) -> list[SamplePair]:
        return window_dataset([s.trajectory for s in self.scenarios], self.n, self.n_out)

    @property
    def pair_count(self) -> int:
        block = self.n + self.n_out
        return sum(len(s.trajectory) // block for s in self.scenarios)


def dataset_bytes(ds: Dataset) -> bytes:
    meta = {"grid_size": ds.grid_size, "dx": ds.dx, "dt": ds.dt, "n": ds.n, "n_out": ds.n_out,
            "scenarios": [dict(s.descriptor, noise_sigma=s.record.noise_sigma, record_seed=s.record.seed,
                               record_start=s.record.start, t0=s.trajectory.t0)
                          for s in ds.scenarios]}
    arrays = {}
    for i, s in enumerate(ds.scenarios):
        arrays[f"scenario{i}.fields"] = s.trajectory.fields
        arrays[f"scenario{i}.sensor_cells"] = np.asarray(s.record.sensor_cells, dtype=float)
        arrays[f"scenario{i}.readings"] = s.record.readings
    return containers.dumps(containers.DATASET_MAGIC, meta, arrays)


def dataset_from_bytes(data: bytes) -> Dataset:
    meta, arrays = containers.loads(data, containers.DATASET_MAGIC)
    ds = Dataset(meta["grid_size"], meta["dx"], meta["dt"], meta["n"], meta["n_out"])
    for i, d in enumerate(meta["scenarios"]):
        d = dict(d)
        noise, seed, start, t0 = d.pop("noise_sigma"), d.pop("record_seed"), d.pop("record_start"), d.pop("t0")
        traj = Trajectory(arrays[f"scenario{i}.fields"], ds.dx, ds.dt, t0)
        cells = arrays[f"scenario{i}.sensor_cells"].astype(int)
        rec = SensorRecord(cells, arrays[f"scenario{i}.readings"], noise, seed, start)
        ds.scenarios.append(Scenario(d, traj, rec))
    return ds


def save_dataset(ds: Dataset, path: str | Path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def load_dataset(path: str | Path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())


def export_dataset_csv(ds: Dataset, path: str | Path) -> None:
    """Long-format CSV: scenario, step, cell, density."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scenario", "step", "cell", "density"])
        for i, s in enumerate(ds.scenarios):
            for step, row in enumerate(s.trajectory.fields):
                for cell, value in enumerate(row):
                    writer.writerow([i, step, cell, repr(float(value))])
