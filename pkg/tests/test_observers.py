import numpy as np
import pytest

from trafficobs.fno import identity_correction, init_params, solution_arch
from trafficobs.gp_interp import GpConfig
from trafficobs.lwr_oracle import LwrConfig, shift_operator, solve_ivp
from trafficobs.observers import (EstimateTrajectory, ObserverConfig, error_operator, extract_next_input, observe,
                                  observe_closed_loop, observe_open_loop, observe_open_loop_reset,
                                  write_estimates_csv)
from trafficobs.ring_sim import SensorRecord

EXACT_GP = GpConfig(length_scale=0.005, noise_variance=0.0)
X = 24


def full_record(fields, start=0):
    cells = np.arange(fields.shape[1])
    return SensorRecord(cells, fields.copy(), 0.0, 0, start)


def lwr_fields(steps, seed=0):
    rng = np.random.default_rng(seed)
    x = (np.arange(X) + 0.5) / X
    rho0 = 0.45 + 0.25 * np.sin(2 * np.pi * (x + rng.uniform())) + 0.05 * np.sin(6 * np.pi * x)
    cfg = LwrConfig(dx=50.0, dt=1.0, steps=steps - 1)
    return solve_ivp(rho0, cfg).fields, cfg


def small_cfg(**kw):
    base = dict(n=3, n_d=5, grid_size=X, gp=EXACT_GP, horizon_steps=20)
    base.update(kw)
    return ObserverConfig(**base)


# ---------------------------------------------------------------- building blocks

def test_config_validation():
    with pytest.raises(ValueError):
        ObserverConfig(n=5, n_d=4)
    with pytest.raises(ValueError):
        ObserverConfig(mode="kalman")
    with pytest.raises(ValueError):
        ObserverConfig(horizon_steps=-1)


def test_error_operator():
    a = np.random.default_rng(0).uniform(size=(6, 8))
    b = np.random.default_rng(1).uniform(size=(6, 8))
    assert np.all(error_operator(a, a) == 0)
    np.testing.assert_allclose(error_operator(np.full((6, 8), 0.7), np.full((6, 8), 0.5)), 0.2)
    np.testing.assert_array_equal(error_operator(a, b), -error_operator(b, a))
    with pytest.raises(ValueError):
        error_operator(a, b[:5])


def test_extract_next_input():
    w = np.arange(6)[:, None] * np.ones((1, 4))
    np.testing.assert_array_equal(extract_next_input(w, 6)[:, 0], [5, 4, 3, 2, 1, 0])
    np.testing.assert_array_equal(extract_next_input(w, 1)[:, 0], [0])
    np.testing.assert_array_equal(extract_next_input(w, 3)[:, 0], [2, 1, 0])
    with pytest.raises(ValueError):
        extract_next_input(w, 7)


# ---------------------------------------------------------------- timeline fixture

class ClockOperator:
    """Fields whose value is the record step / 1000; advances the clock exactly."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.calls = []

    def __call__(self, window):
        times = np.round(window[:, 0] * 1000).astype(int)
        # newest first, consecutive steps
        assert np.all(np.diff(times) == -1)
        self.calls.append(times[0])
        return times[0] / 1000 + np.arange(1, self.cfg.n_out + 1)[:, None] / 1000 * np.ones((1, X))


def clock_record(steps, start=0):
    return full_record((start + np.arange(steps))[:, None] / 1000 * np.ones((1, X)), start)


@pytest.mark.parametrize("mode", ["ol", "ol_reset", "cl"])
def test_timeline(mode):
    cfg = small_cfg()
    rec = clock_record(cfg.lag + cfg.horizon_steps + 1, start=40)
    theta = ClockOperator(cfg)
    seen = []

    def psi(state, err):
        first = int(round(state[0, 0] * 1000))
        # time ascending, data-based window on the same span
        np.testing.assert_allclose(state[:, 0] * 1000, first + np.arange(cfg.n_out), atol=1e-6)
        np.testing.assert_allclose(err, 0.0, atol=1e-6)
        seen.append(first)
        return state

    est = observe(mode, theta, psi, rec, cfg)
    origin = rec.start + cfg.lag
    assert est.origin == origin
    np.testing.assert_array_equal(est.record_steps, origin + np.arange(1, cfg.horizon_steps + 1))
    np.testing.assert_allclose(est.estimates[:, 0] * 1000, est.record_steps, atol=1e-6)
    # prediction for time t + 1 is made from the window ending at t - n_d
    assert theta.calls == [origin + t - cfg.n_d for t in range(cfg.horizon_steps)]
    np.testing.assert_allclose(est.prefix[:, 0] * 1000, origin + np.arange(-cfg.n_d + 1, 1), atol=1e-6)
    if mode == "cl":
        # after predicting t + 1 the extended window starts at t + 2 - n - n_d
        assert seen == [origin + t + 2 - cfg.n - cfg.n_d for t in range(cfg.horizon_steps)]
        # and the input extracted from it is the delayed window for predicting t + 2
        assert theta.calls[1:] == [s + cfg.n - 1 for s in seen[:-1]]


def test_horizon_zero_returns_prefix_only():
    cfg = small_cfg(horizon_steps=0)
    rec = clock_record(cfg.lag + 1)
    est = observe_open_loop(ClockOperator(cfg), rec, cfg)
    assert est.estimates.shape == (0, X)
    assert est.prefix.shape == (cfg.n_d, X)


# ---------------------------------------------------------------- oracle tracking

@pytest.mark.parametrize("mode", ["ol", "ol_reset", "cl"])
def test_oracle_tracking(mode):
    cfg = small_cfg(horizon_steps=30)
    fields, lwr = lwr_fields(cfg.lag + cfg.horizon_steps + 1)
    rec = full_record(fields)
    oracle = shift_operator(lwr, cfg.n_out)
    take_data = lambda state, err: state - err
    est = observe(mode, oracle, take_data, rec, cfg)
    truth = fields[cfg.lag + 1:]
    np.testing.assert_allclose(est.estimates, truth, atol=1e-6)
    np.testing.assert_allclose(est.prefix, fields[cfg.n:cfg.lag + 1], atol=1e-6)


def test_closed_loop_data_channel_with_imperfect_theta():
    # a wrong solution operator is fully repaired when the data channel is exact everywhere
    cfg = small_cfg(horizon_steps=15)
    fields, lwr = lwr_fields(cfg.lag + cfg.horizon_steps + 1, seed=3)
    rec = full_record(fields)
    oracle = shift_operator(lwr, cfg.n_out)
    biased = lambda w: np.clip(oracle(w) + 0.05, 0, 1)
    est = observe_closed_loop(biased, lambda s, e: s - e, rec, cfg)
    # each estimate is a prediction from an exactly corrected window, so only the bias remains
    np.testing.assert_allclose(est.estimates, np.clip(fields[cfg.lag + 1:] + 0.05, 0, 1), atol=1e-6)


# ---------------------------------------------------------------- reduction, causality, errors

def random_record(seed, steps, cells=(0, 6, 12, 18)):
    rng = np.random.default_rng(seed)
    return SensorRecord(np.array(cells), rng.uniform(0.1, 0.9, (steps, len(cells))), 0.0, seed, 0)


@pytest.mark.parametrize("seed", range(3))
def test_identity_correction_reduces_to_open_loop(seed):
    cfg = small_cfg(gp=GpConfig())
    theta = init_params(solution_arch(cfg.n, cfg.n_out, 8, (8,), (5,), 16), seed)
    rec = random_record(seed, cfg.lag + cfg.horizon_steps + 1)
    a = observe_open_loop(theta, rec, cfg)
    b = observe_closed_loop(theta, identity_correction, rec, cfg)
    assert np.array_equal(a.estimates, b.estimates)
    assert np.array_equal(a.prefix, b.prefix)


def test_ol_reset_causality():
    cfg = small_cfg(gp=GpConfig())
    theta = init_params(solution_arch(cfg.n, cfg.n_out, 8, (8,), (5,), 16), 0)
    rec = random_record(1, cfg.lag + cfg.horizon_steps + 1)
    base = observe_open_loop_reset(theta, rec, cfg)
    origin = rec.start + cfg.lag
    t = 8
    changed = rec.readings.copy()
    changed[origin + t + 1 - rec.start:] = 0.05
    pert = observe_open_loop_reset(theta, SensorRecord(rec.sensor_cells, changed, 0.0, 0, 0), cfg)
    # estimates for times <= t + 1 are unchanged, later ones differ
    assert np.array_equal(base.estimates[:t + 1], pert.estimates[:t + 1])
    assert not np.array_equal(base.estimates, pert.estimates)


@pytest.mark.parametrize("mode", ["ol", "cl"])
def test_estimates_ignore_future_measurements(mode):
    cfg = small_cfg(gp=GpConfig())
    theta = init_params(solution_arch(cfg.n, cfg.n_out, 8, (8,), (5,), 16), 2)
    psi = lambda s, e: np.clip(s - 0.5 * e, 0, 1)
    rec = random_record(2, cfg.lag + cfg.horizon_steps + 1)
    base = observe(mode, theta, psi, rec, cfg)
    t = 10
    changed = rec.readings.copy()
    changed[cfg.lag + t + 1:] = 0.95
    pert = observe(mode, theta, psi, SensorRecord(rec.sensor_cells, changed, 0.0, 0, 0), cfg)
    assert np.array_equal(base.estimates[:t + 1], pert.estimates[:t + 1])


@pytest.mark.parametrize("mode", ["ol_reset", "cl"])
def test_missing_measurements_fail(mode):
    cfg = small_cfg(gp=GpConfig())
    theta = init_params(solution_arch(cfg.n, cfg.n_out, 8, (8,), (5,), 16), 0)
    # both observers need measurements up to about horizon - n_d steps past the origin
    short = random_record(0, cfg.lag + 5)
    with pytest.raises(KeyError):
        observe(mode, theta, identity_correction, short, cfg)


def test_record_too_short_for_initialisation():
    cfg = small_cfg(gp=GpConfig(), origin=3)
    rec = random_record(0, 40)
    with pytest.raises(ValueError):
        observe_open_loop(lambda w: w, rec, cfg)


def test_estimates_bounded_and_timed(tmp_path):
    cfg = small_cfg(gp=GpConfig())
    theta = init_params(solution_arch(cfg.n, cfg.n_out, 8, (8,), (5,), 16), 4)
    rec = random_record(4, cfg.lag + cfg.horizon_steps + 1)
    for mode in ("ol", "ol_reset", "cl"):
        est = observe(mode, theta, None, rec, cfg)
        assert isinstance(est, EstimateTrajectory) and est.mode == mode
        assert np.all((est.estimates >= 0) & (est.estimates <= 1))
        assert len(est.step_seconds) == cfg.horizon_steps
        assert np.all(np.diff(est.record_steps) == 1)
    write_estimates_csv(est, tmp_path / "e.csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "step,cell,estimate"
    assert len(lines) == 1 + cfg.horizon_steps * X


def test_unknown_mode():
    with pytest.raises(ValueError):
        observe("kf", None, None, random_record(0, 40), small_cfg())
