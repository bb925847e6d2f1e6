"""Fourier neural operators in one and two dimensions.

Arrays inside the network are channel-last: ``(batch, *grid, channels)``.
Spectral weights are stored as separate real and imaginary arrays with
shape ``(*kept_modes, width_in, width_out)``.

Fourier conventions (one-sided, real input): ``c_k = (1/N) sum_j v_j exp(-2 pi i j k / N)``
so a constant ``c`` has ``c_0 = c`` and ``cos(2 pi x / L)`` has ``c_1 = 0.5``.
The inverse is ``v_j = Re c_0 + 2 sum_{k>=1} Re(c_k exp(2 pi i j k / N))``, which
may be evaluated on any grid with ``N >= 2 k_max - 1``. In 2D the first
(time) axis keeps the symmetric frequencies ``0, +-1, ..., +-(k_t - 1)``
and the second (space) axis is one-sided.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import erf

from . import containers
from .tape import GradTape

_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    pass


# --------------------------------------------------------------------------
# discrete Fourier transforms with truncation, and their adjoints


def _check_modes(n: int, k: int, what: str = "grid") -> None:
    if k < 1 or n < 2 * k - 1:
        raise ShapeError(f"{what} of size {n} cannot hold {k} modes (need size >= {2 * k - 1})")


def _space_weights(k: int) -> np.ndarray:
    w = np.full(k, 2.0)
    w[0] = 1.0
    return w


def _time_index(t: int, kt: int) -> np.ndarray:
    return np.r_[0:kt, t - kt + 1:t]


def dft_truncate(values: np.ndarray, k_max: int, axis: int = -1) -> np.ndarray:
    """One-sided Fourier coefficients ``0..k_max-1`` along ``axis``."""
    values = np.asarray(values, dtype=float)
    n = values.shape[axis]
    _check_modes(n, k_max)
    c = np.fft.rfft(values, axis=axis) / n
    return np.take(c, np.arange(k_max), axis=axis)


def idft(spectrum: np.ndarray, grid_size: int, axis: int = -1) -> np.ndarray:
    """Real reconstruction of a one-sided spectrum on ``grid_size`` points."""
    spectrum = np.asarray(spectrum, dtype=complex)
    k = spectrum.shape[axis]
    _check_modes(grid_size, k)
    spec = np.moveaxis(spectrum, axis, -1).copy()
    spec[..., 0] = spec[..., 0].real
    pad = np.zeros(spec.shape[:-1] + (grid_size // 2 + 1,), dtype=complex)
    pad[..., :k] = spec
    return np.moveaxis(np.fft.irfft(pad, n=grid_size, axis=-1) * grid_size, -1, axis)


def dft2_truncate(values: np.ndarray, modes: tuple[int, int]) -> np.ndarray:
    """Truncated 2D coefficients over the last two axes; time axis first.

    Output shape ``(..., 2*kt - 1, ks)``, time frequencies ordered
    ``0, 1, ..., kt-1, -(kt-1), ..., -1``.
    """
    values = np.asarray(values, dtype=float)
    t, s = values.shape[-2:]
    kt, ks = modes
    _check_modes(t, kt, "time axis")
    _check_modes(s, ks, "space axis")
    a = np.fft.rfft(values, axis=-1)[..., :ks]
    b = np.fft.fft(a, axis=-2) / (t * s)
    return b[..., _time_index(t, kt), :]


def idft2(spectrum: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    spectrum = np.asarray(spectrum, dtype=complex)
    t, s = shape
    kt = (spectrum.shape[-2] + 1) // 2
    ks = spectrum.shape[-1]
    _check_modes(t, kt, "time axis")
    _check_modes(s, ks, "space axis")
    full = np.zeros(spectrum.shape[:-2] + (t, s // 2 + 1), dtype=complex)
    full[..., _time_index(t, kt), :ks] = spectrum
    b = np.fft.ifft(full, axis=-2) * t
    return np.fft.irfft(b, n=s, axis=-1) * s


class _Spectral:
    """Truncated transform pair on the grid axes of a channel-last batch."""

    def __init__(self, grid_shape: tuple[int, ...], modes: tuple[int, ...]):
        self.grid_shape = grid_shape
        self.modes = modes
        if len(grid_shape) == 1:
            (n,), (k,) = grid_shape, modes
            _check_modes(n, k)
            self.w = _space_weights(k)
        else:
            (t, s), (kt, ks) = grid_shape, modes
            _check_modes(t, kt, "time axis")
            _check_modes(s, ks, "space axis")
            self.tidx = _time_index(t, kt)
            self.w = _space_weights(ks)
        self.size = int(np.prod(grid_shape))

    # x: (B, *grid, C) -> (B, *kept, C)
    def forward(self, x):
        if len(self.grid_shape) == 1:
            return np.fft.rfft(x, axis=1)[:, :self.modes[0]] / self.size
        a = np.fft.rfft(x, axis=2)[:, :, :self.modes[1]]
        return np.fft.fft(a, axis=1)[:, self.tidx] / self.size

    def inverse(self, c):
        if len(self.grid_shape) == 1:
            (n,), (k,) = self.grid_shape, self.modes
            pad = np.zeros((c.shape[0], n // 2 + 1, c.shape[-1]), dtype=complex)
            pad[:, :k] = c
            pad[:, 0] = pad[:, 0].real
            return np.fft.irfft(pad, n=n, axis=1) * n
        (t, s), ks = self.grid_shape, self.modes[1]
        full = np.zeros((c.shape[0], t, s // 2 + 1, c.shape[-1]), dtype=complex)
        full[:, self.tidx, :ks] = c
        b = np.fft.ifft(full, axis=1) * t
        return np.fft.irfft(b, n=s, axis=2) * s

    def inverse_adjoint(self, g):
        """Complex gradient (d/dRe + i d/dIm) of the kept coefficients."""
        if len(self.grid_shape) == 1:
            a = np.fft.rfft(g, axis=1)[:, :self.modes[0]]
            return a * self.w[None, :, None]
        a = np.fft.rfft(g, axis=2)[:, :, :self.modes[1]]
        a = np.fft.fft(a, axis=1)[:, self.tidx]
        return a * self.w[None, None, :, None]

    def forward_adjoint(self, gc):
        if len(self.grid_shape) == 1:
            (n,), (k,) = self.grid_shape, self.modes
            pad = np.zeros((gc.shape[0], n, gc.shape[-1]), dtype=complex)
            pad[:, :k] = gc
            return np.fft.ifft(pad, axis=1).real
        (t, s), ks = self.grid_shape, self.modes[1]
        pad = np.zeros((gc.shape[0], t, s, gc.shape[-1]), dtype=complex)
        pad[:, self.tidx, :ks] = gc
        return np.fft.ifft2(pad, axes=(1, 2)).real


# --------------------------------------------------------------------------
# architecture and parameters


@dataclass(frozen=True)
class FnoArch:
    dim: int
    in_channels: int
    out_channels: int
    lift_width: int = 16
    layer_widths: tuple[int, ...] = (24, 24, 32, 32)
    modes: tuple[int, ...] = (15, 12, 9, 9)
    time_modes: tuple[int, ...] = ()
    projection_hidden: int = 128
    coords: bool = True

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError("dim must be 1 or 2")
        if len(self.layer_widths) != len(self.modes):
            raise ValueError("layer_widths and modes must have the same length")
        if self.dim == 2 and len(self.time_modes) != len(self.modes):
            raise ValueError("2D operators need one time-mode count per layer")
        if self.in_channels <= self.coord_channels:
            raise ValueError("in_channels must exceed the coordinate channels")

    @property
    def coord_channels(self) -> int:
        return self.dim if self.coords else 0

    @property
    def data_channels(self) -> int:
        return self.in_channels - self.coord_channels

    def layer_modes(self, l: int) -> tuple[int, ...]:
        return (self.modes[l],) if self.dim == 1 else (self.time_modes[l], self.modes[l])

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "FnoArch":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def solution_arch(n: int, n_out: int, lift_width: int = 16, layer_widths=(24, 24, 32, 32),
                  modes=(15, 12, 9, 9), projection_hidden: int = 128) -> FnoArch:
    return FnoArch(1, n + 1, n_out, lift_width, tuple(layer_widths), tuple(modes), (),
                   projection_hidden)


def correction_arch(window: int, lift_width: int = 16, layer_widths=(24, 32), modes=(15, 9),
                    projection_hidden: int = 128) -> FnoArch:
    """2D operator over a ``window x grid`` space-time patch.

    Time modes per layer are ``min(k, ceil(window / 4))``.
    """
    cap = math.ceil(window / 4)
    time_modes = tuple(min(k, cap) for k in modes)
    return FnoArch(2, 4, 1, lift_width, tuple(layer_widths), tuple(modes), time_modes,
                   projection_hidden)


def param_shapes(arch: FnoArch) -> dict[str, tuple[int, ...]]:
    shapes = {"lift.w": (arch.in_channels, arch.lift_width), "lift.b": (arch.lift_width,)}
    w_in = arch.lift_width
    for l, w_out in enumerate(arch.layer_widths):
        if arch.dim == 1:
            kept = (arch.modes[l],)
        else:
            kept = (2 * arch.time_modes[l] - 1, arch.modes[l])
        shapes[f"layer{l}.R.re"] = kept + (w_in, w_out)
        shapes[f"layer{l}.R.im"] = kept + (w_in, w_out)
        shapes[f"layer{l}.W.w"] = (w_in, w_out)
        shapes[f"layer{l}.W.b"] = (w_out,)
        w_in = w_out
    shapes["proj1.w"] = (w_in, arch.projection_hidden)
    shapes["proj1.b"] = (arch.projection_hidden,)
    shapes["proj2.w"] = (arch.projection_hidden, arch.out_channels)
    shapes["proj2.b"] = (arch.out_channels,)
    return shapes


@dataclass
class FnoParams:
    arch: FnoArch
    arrays: dict[str, np.ndarray]
    seed: int = 0
    step: int = 0

    def __getitem__(self, key: str) -> np.ndarray:
        return self.arrays[key]

    def copy(self) -> "FnoParams":
        return FnoParams(self.arch, {k: v.copy() for k, v in self.arrays.items()}, self.seed, self.step)

    def with_arrays(self, arrays: dict[str, np.ndarray], step: int | None = None) -> "FnoParams":
        return FnoParams(self.arch, arrays, self.seed, self.step if step is None else step)

    def validate(self) -> None:
        expected = param_shapes(self.arch)
        if list(expected) != list(self.arrays):
            raise ShapeError(f"parameter names {list(self.arrays)} != {list(expected)}")
        for k, shape in expected.items():
            if self.arrays[k].shape != shape:
                raise ShapeError(f"{k}: shape {self.arrays[k].shape} != {shape}")
            if not np.all(np.isfinite(self.arrays[k])):
                raise ValueError(f"{k}: non-finite coefficients")


def init_params(arch: FnoArch, seed: int = 0) -> FnoParams:
    """Spectral weights ~ U(-s, s), s = 1/(w_in w_out); affine maps ~ U(+-1/sqrt(fan_in))."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(arch).items():
        if ".R." in name:
            s = 1.0 / (shape[-2] * shape[-1])
            arrays[name] = rng.uniform(-s, s, size=shape)
        else:
            layer = name.rsplit(".", 1)[0]
            fan_in = param_shapes(arch)[layer + ".w"][0]
            bound = 1.0 / math.sqrt(fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return FnoParams(arch, arrays, seed, 0)


def zero_params(arch: FnoArch) -> FnoParams:
    return FnoParams(arch, {k: np.zeros(s) for k, s in param_shapes(arch).items()})


# --------------------------------------------------------------------------
# ops (forward + reverse)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)


_OPEN_LO, _OPEN_HI = np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0)


def sigmoid(x):
    # clamp to the nearest doubles inside (0, 1); tanh saturates to +-1 for |x| > ~37
    return np.clip(0.5 * (1.0 + np.tanh(0.5 * x)), _OPEN_LO, _OPEN_HI)


def affine(x, params: FnoParams, name: str, tape: GradTape | None, need_input_grad: bool = True):
    w, b = params[name + ".w"], params[name + ".b"]
    y = x @ w + b
    if tape is not None:
        def back(g):
            gw = tape.grads[name + ".w"]
            gw += x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            tape.grads[name + ".b"] += g.reshape(-1, g.shape[-1]).sum(axis=0)
            return g @ w.T if need_input_grad else None
        tape.push(name, back)
    return y


def activation(x, kind: str | None, tape: GradTape | None, name: str):
    if kind is None:
        return x
    if kind == "gelu":
        y = gelu(x)
        if tape is not None:
            tape.push(name, lambda g: g * gelu_grad(x))
        return y
    if kind == "sigmoid":
        y = sigmoid(x)
        if tape is not None:
            tape.push(name, lambda g: g * y * (1.0 - y))
        return y
    raise ValueError(f"unknown activation {kind!r}")


def spectral_layer(v, params: FnoParams, l: int, tape: GradTape | None = None,
                   act: str | None = "gelu"):
    """``act(W v + b + idft(R . dft_truncate(v)))`` on a channel-last batch."""
    arch = params.arch
    re, im = params[f"layer{l}.R.re"], params[f"layer{l}.R.im"]
    w, b = params[f"layer{l}.W.w"], params[f"layer{l}.W.b"]
    if v.shape[-1] != w.shape[0]:
        raise ShapeError(f"layer {l}: got {v.shape[-1]} channels, expected {w.shape[0]}")
    grid_shape = v.shape[1:-1]
    spec = _Spectral(grid_shape, arch.layer_modes(l))
    batch, w_in, w_out = v.shape[0], w.shape[0], w.shape[1]
    n_modes = int(np.prod(re.shape[:-2]))
    R = (re + 1j * im).reshape(n_modes, w_in, w_out)

    c = spec.forward(v)                                      # (B, *kept, I)
    cm = np.moveaxis(c.reshape(batch, n_modes, w_in), 1, 0)  # (M, B, I)
    yc = np.moveaxis(cm @ R, 0, 1).reshape(c.shape[:-1] + (w_out,))
    z = v @ w + b + spec.inverse(yc)
    out = activation(z, act, None, "")

    if tape is not None:
        name = f"layer{l}"

        def back(g):
            gz = g * gelu_grad(z) if act == "gelu" else g
            flat_v = v.reshape(-1, w_in)
            flat_g = gz.reshape(-1, w_out)
            tape.grads[name + ".W.w"] += flat_v.T @ flat_g
            tape.grads[name + ".W.b"] += flat_g.sum(axis=0)
            gyc = spec.inverse_adjoint(gz)                         # (B, *kept, O)
            gm = np.moveaxis(gyc.reshape(batch, n_modes, w_out), 1, 0)  # (M, B, O)
            gR = (np.conj(cm).transpose(0, 2, 1) @ gm).reshape(re.shape)
            tape.grads[name + ".R.re"] += gR.real
            tape.grads[name + ".R.im"] += gR.imag
            gc = np.moveaxis(gm @ np.conj(R).transpose(0, 2, 1), 0, 1).reshape(c.shape)
            return gz @ w.T + spec.forward_adjoint(gc)

        tape.push(name, back)
    return out


def _network(x, params: FnoParams, tape: GradTape | None):
    """Lift -> spectral layers -> two-layer projection -> sigmoid."""
    arch = params.arch
    h = affine(x, params, "lift", tape, need_input_grad=False)
    for l in range(len(arch.layer_widths)):
        h = spectral_layer(h, params, l, tape)
    h = affine(h, params, "proj1", tape)
    h = activation(h, "gelu", tape, "proj1.gelu")
    h = affine(h, params, "proj2", tape)
    return activation(h, "sigmoid", tape, "sigmoid")


def _check_grid(arch: FnoArch, grid_shape: tuple[int, ...]) -> None:
    for l in range(len(arch.modes)):
        for n, k in zip(grid_shape, arch.layer_modes(l)):
            _check_modes(n, k)


def fno_forward(window: np.ndarray, params: FnoParams, tape: GradTape | None = None) -> np.ndarray:
    """Map a newest-first window ``(n, X)`` (or batch ``(B, n, X)``) to ``(n_out, X)``."""
    arch = params.arch
    if arch.dim != 1:
        raise ShapeError("fno_forward needs a 1D operator")
    window = np.asarray(window, dtype=float)
    single = window.ndim == 2
    if single:
        window = window[None]
    batch, n, size = window.shape
    if n != arch.data_channels:
        raise ShapeError(f"window has {n} slices, operator expects {arch.data_channels}")
    _check_grid(arch, (size,))
    x = np.moveaxis(window, 1, 2)
    if arch.coords:
        coord = np.broadcast_to((np.arange(size) / size)[None, :, None], (batch, size, 1))
        x = np.concatenate([x, coord], axis=-1)
    out = np.moveaxis(_network(np.ascontiguousarray(x), params, tape), 2, 1)
    if tape is not None:
        tape.push("layout", lambda g: np.moveaxis(g.reshape(out.shape), 1, 2))
    return out[0] if single else out


def fno2d_forward(state_window: np.ndarray, error_window: np.ndarray, params: FnoParams,
                  tape: GradTape | None = None) -> np.ndarray:
    """Corrected ``(T, X)`` window from the state and error windows (time ascending)."""
    arch = params.arch
    if arch.dim != 2:
        raise ShapeError("fno2d_forward needs a 2D operator")
    state = np.asarray(state_window, dtype=float)
    err = np.asarray(error_window, dtype=float)
    if state.shape != err.shape:
        raise ShapeError(f"state {state.shape} and error {err.shape} windows differ")
    single = state.ndim == 2
    if single:
        state, err = state[None], err[None]
    batch, t, size = state.shape
    _check_grid(arch, (t, size))
    chans = [state[..., None], err[..., None]]
    if arch.coords:
        xs = np.broadcast_to((np.arange(size) / size)[None, None, :, None], (batch, t, size, 1))
        ts = np.broadcast_to(((np.arange(t) + 1) / t)[None, :, None, None], (batch, t, size, 1))
        chans += [xs, ts]
    x = np.concatenate(chans, axis=-1)
    if x.shape[-1] != arch.in_channels:
        raise ShapeError(f"{x.shape[-1]} input channels, operator expects {arch.in_channels}")
    out = _network(x, params, tape)[..., 0]
    if tape is not None:
        tape.push("layout", lambda g: g.reshape(out.shape)[..., None])
    return out[0] if single else out


def identity_correction(state_window: np.ndarray, error_window: np.ndarray) -> np.ndarray:
    return state_window


# --------------------------------------------------------------------------
# checkpoints


def checkpoint_bytes(params: FnoParams) -> bytes:
    meta = {"arch": params.arch.to_dict(), "seed": params.seed, "step": params.step,
            "names": list(params.arrays)}
    return containers.dumps(containers.CHECKPOINT_MAGIC, meta, params.arrays)


def params_from_bytes(data: bytes) -> FnoParams:
    meta, arrays = containers.loads(data, containers.CHECKPOINT_MAGIC)
    arch = FnoArch.from_dict(meta["arch"])
    params = FnoParams(arch, {k: arrays[k] for k in meta["names"]}, meta["seed"], meta["step"])
    params.validate()
    return params


def save_checkpoint(params: FnoParams, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path: str | Path) -> FnoParams:
    return params_from_bytes(Path(path).read_bytes())


def as_solution_operator(theta) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(theta, FnoParams):
        return lambda window: fno_forward(np.ascontiguousarray(window), theta)
    return theta


def as_correction_operator(psi) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    if psi is None:
        return identity_correction
    if isinstance(psi, FnoParams):
        return lambda state, err: fno2d_forward(state, err, psi)
    return psi
