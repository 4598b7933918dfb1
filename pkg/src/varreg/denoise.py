"""Denoisers for the v-update: TV, Gaussian, identity and a residual conv net."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ConfigError
from .grid import VectorField

KINDS = ("tv", "gaussian", "conv", "identity")


# -- convolutional denoiser -----------------------------------------------------

@dataclass(frozen=True, eq=False)
class ConvDenoiserWeights:
    """Stack of 3^d convolutions; ReLU on hidden layers, identity on the last.

    ``kernels[i]`` has shape ``(c_out, c_in, 3, ..., 3)``. With ``residual``
    the output is ``x + residual_scale * net(x)``; without it (used for the
    initialization network) it is ``residual_scale * net(x)``.
    """

    kernels: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    residual_scale: float = 1.0
    residual: bool = True

    def __post_init__(self):
        kernels = tuple(np.array(k, dtype=np.float64) for k in self.kernels)
        biases = tuple(np.array(b, dtype=np.float64).reshape(-1) for b in self.biases)
        if not kernels or len(kernels) != len(biases):
            raise ConfigError("need one bias per kernel and at least one layer")
        rank = kernels[0].ndim - 2
        for i, (k, b) in enumerate(zip(kernels, biases)):
            if k.ndim != rank + 2 or any(s != 3 for s in k.shape[2:]):
                raise ConfigError(f"layer {i}: kernel spatial support must be 3 per axis")
            if b.shape != (k.shape[0],):
                raise ConfigError(f"layer {i}: bias shape {b.shape} != ({k.shape[0]},)")
            if i and k.shape[1] != kernels[i - 1].shape[0]:
                raise ConfigError(f"layer {i}: channel mismatch")
            if not (np.all(np.isfinite(k)) and np.all(np.isfinite(b))):
                raise ConfigError("weights must be finite")
            k.setflags(write=False)
            b.setflags(write=False)
        if self.residual and kernels[0].shape[1] != kernels[-1].shape[0]:
            raise ConfigError("residual net needs equal input and output channels")
        object.__setattr__(self, "kernels", kernels)
        object.__setattr__(self, "biases", biases)
        object.__setattr__(self, "residual_scale", float(self.residual_scale))

    @property
    def rank(self) -> int:
        return self.kernels[0].ndim - 2

    @property
    def in_channels(self) -> int:
        return self.kernels[0].shape[1]

    @property
    def out_channels(self) -> int:
        return self.kernels[-1].shape[0]

    @classmethod
    def zeros(cls, rank: int, hidden: int = 16, in_channels: int | None = None,
              residual: bool = True, n_hidden: int = 2) -> "ConvDenoiserWeights":
        cin = rank if in_channels is None else in_channels
        chans = [cin] + [hidden] * n_hidden + [rank]
        kernels = [np.zeros((chans[i + 1], chans[i]) + (3,) * rank) for i in range(len(chans) - 1)]
        biases = [np.zeros(chans[i + 1]) for i in range(len(chans) - 1)]
        return cls(tuple(kernels), tuple(biases), 1.0, residual)

    @classmethod
    def random(cls, rank: int, rng: np.random.Generator, hidden: int = 16, scale: float = 0.05,
               in_channels: int | None = None, residual: bool = True,
               n_hidden: int = 2) -> "ConvDenoiserWeights":
        z = cls.zeros(rank, hidden, in_channels, residual, n_hidden)
        kernels = [scale * rng.standard_normal(k.shape) for k in z.kernels]
        biases = [scale * rng.standard_normal(b.shape) for b in z.biases]
        return cls(tuple(kernels), tuple(biases), 1.0, residual)

    @classmethod
    def he(cls, rank: int, rng: np.random.Generator, hidden: int = 16,
           in_channels: int | None = None, residual: bool = True,
           n_hidden: int = 2) -> "ConvDenoiserWeights":
        """He-normal hidden layers and an all-zero output layer.

        The net computes the same function as :meth:`zeros` but hidden
        activations are live, so every layer receives gradient from the start.
        """
        z = cls.zeros(rank, hidden, in_channels, residual, n_hidden)
        kernels = list(z.kernels)
        for i in range(len(kernels) - 1):
            fan_in = int(np.prod(kernels[i].shape[1:]))
            kernels[i] = np.sqrt(2.0 / fan_in) * rng.standard_normal(kernels[i].shape)
        return cls(tuple(kernels), z.biases, 1.0, residual)

    def with_arrays(self, kernels, biases) -> "ConvDenoiserWeights":
        return ConvDenoiserWeights(tuple(kernels), tuple(biases), self.residual_scale, self.residual)


def _offsets(rank: int):
    return list(itertools.product(range(3), repeat=rank))


def im2col(x: np.ndarray) -> np.ndarray:
    """``(C, *dims)`` -> ``(C * 3^d, N)`` patches with clamp-to-edge padding."""
    rank = x.ndim - 1
    dims = x.shape[1:]
    pad = np.pad(x, [(0, 0)] + [(1, 1)] * rank, mode="edge")
    cols = []
    for off in _offsets(rank):
        sl = (slice(None),) + tuple(slice(o, o + n) for o, n in zip(off, dims))
        cols.append(pad[sl].reshape(x.shape[0], -1))
    return np.stack(cols, axis=1).reshape(x.shape[0] * len(cols), -1)


def col2im(cols: np.ndarray, channels: int, dims) -> np.ndarray:
    """Adjoint of :func:`im2col`."""
    rank = len(dims)
    offs = _offsets(rank)
    cols = cols.reshape(channels, len(offs), *dims)
    pad = np.zeros((channels,) + tuple(n + 2 for n in dims))
    for j, off in enumerate(offs):
        sl = (slice(None),) + tuple(slice(o, o + n) for o, n in zip(off, dims))
        pad[sl] += cols[:, j]
    # fold the edge padding back onto the border samples
    for a in range(1, rank + 1):
        first = np.take(pad, [0], axis=a)
        last = np.take(pad, [pad.shape[a] - 1], axis=a)
        pad = np.take(pad, range(1, pad.shape[a] - 1), axis=a)
        idx0 = [slice(None)] * pad.ndim
        idx0[a] = slice(0, 1)
        pad[tuple(idx0)] += first
        idx0[a] = slice(pad.shape[a] - 1, pad.shape[a])
        pad[tuple(idx0)] += last
    return pad


def conv_layer(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray):
    """One 3^d cross-correlation; returns the output and the patch matrix."""
    cols = im2col(x)
    y = kernel.reshape(kernel.shape[0], -1) @ cols + bias[:, None]
    return y.reshape((kernel.shape[0],) + x.shape[1:]), cols


def conv_net_array(x: np.ndarray, w: ConvDenoiserWeights, keep: bool = False):
    """Forward pass on a channel-first array; ``keep`` also returns layer caches."""
    if x.shape[0] != w.in_channels or x.ndim - 1 != w.rank:
        raise ConfigError(f"input shape {x.shape} incompatible with {w.in_channels}-channel "
                          f"rank-{w.rank} weights")
    h = x
    caches = []
    n = len(w.kernels)
    for i, (k, b) in enumerate(zip(w.kernels, w.biases)):
        pre, cols = conv_layer(h, k, b)
        h = np.maximum(pre, 0.0) if i < n - 1 else pre
        caches.append((cols, pre))
    out = w.residual_scale * h
    if w.residual:
        out = x + out
    return (out, caches) if keep else out


def conv_net_backward(g_out: np.ndarray, x: np.ndarray, w: ConvDenoiserWeights, caches):
    """Reverse pass of :func:`conv_net_array`; returns ``(g_x, g_kernels, g_biases)``."""
    dims = x.shape[1:]
    n = len(w.kernels)
    g = w.residual_scale * g_out
    gk = [None] * n
    gb = [None] * n
    for i in range(n - 1, -1, -1):
        cols, pre = caches[i]
        if i < n - 1:
            g = g * (pre > 0.0)
        g2 = g.reshape(g.shape[0], -1)
        k = w.kernels[i]
        gk[i] = (g2 @ cols.T).reshape(k.shape)
        gb[i] = g2.sum(axis=1)
        gcols = k.reshape(k.shape[0], -1).T @ g2
        g = col2im(gcols, k.shape[1], dims)
    if w.residual:
        g = g + g_out
    return g, gk, gb


def conv_forward(v_in: VectorField, w: ConvDenoiserWeights) -> VectorField:
    if w.out_channels != v_in.grid.rank:
        raise ConfigError("conv output channels must equal the grid rank")
    return VectorField(conv_net_array(v_in.values, w), v_in.grid)


# -- TV ------------------------------------------------------------------------

def _fwd_grad(x: np.ndarray) -> np.ndarray:
    """Forward differences of ``(C, *dims)`` -> ``(C, rank, *dims)``, zero at the far edge."""
    rank = x.ndim - 1
    out = np.zeros((x.shape[0], rank) + x.shape[1:])
    for a in range(rank):
        ax = a + 1
        d = np.diff(x, axis=ax)
        sl = [slice(None)] * x.ndim
        sl[ax] = slice(0, x.shape[ax] - 1)
        out[(slice(None), a) + tuple(sl[1:])] = d
    return out


def _div(p: np.ndarray) -> np.ndarray:
    """Negative adjoint of :func:`_fwd_grad`."""
    rank = p.shape[1]
    out = np.zeros((p.shape[0],) + p.shape[2:])
    for a in range(rank):
        pa = np.moveaxis(p[:, a], a + 1, 1)
        d = np.zeros_like(pa)
        d[:, 0] = pa[:, 0]
        d[:, 1:-1] = pa[:, 1:-1] - pa[:, :-2]
        d[:, -1] = -pa[:, -2]
        out += np.moveaxis(d, 1, a + 1)
    return out


def tv_denoise_array(f: np.ndarray, weight: float, iters: int) -> np.ndarray:
    """Dual projection iteration for ``min_g weight*TV(g) + 1/2|g - f|^2``, per channel."""
    if weight < 0:
        raise ConfigError("TV weight must be non-negative")
    if iters < 1:
        raise ConfigError("tv_iters must be >= 1")
    if weight == 0:
        return np.array(f, dtype=np.float64)
    rank = f.ndim - 1
    tau = 1.0 / (2 * rank)
    p = np.zeros((f.shape[0], rank) + f.shape[1:])
    scaled = f / weight
    for _ in range(iters):
        g = _fwd_grad(_div(p) - scaled)
        norm = np.sqrt(np.sum(g * g, axis=1, keepdims=True))
        p = (p + tau * g) / (1.0 + tau * norm)
    return f - weight * _div(p)


def tv_denoise(f: VectorField, weight: float, iters: int) -> VectorField:
    return VectorField(tv_denoise_array(f.values, weight, iters), f.grid)


# -- Gaussian ----------------------------------------------------------------------

def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_denoise_array(f: np.ndarray, sigma: float) -> np.ndarray:
    if not sigma > 0:
        raise ConfigError("sigma must be positive")
    k = gaussian_kernel(sigma)
    out = np.array(f, dtype=np.float64)
    for ax in range(1, f.ndim):
        out = correlate1d(out, k, axis=ax, mode="nearest")
    return out


def gaussian_denoise(f: VectorField, sigma: float) -> VectorField:
    return VectorField(gaussian_denoise_array(f.values, sigma), f.grid)


# -- dispatch ------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DenoiserSpec:
    kind: str = "tv"
    tv_weight: float = 0.1
    tv_iters: int = 200
    sigma: float = 1.0
    conv: ConvDenoiserWeights | None = field(default=None)

    def __post_init__(self):
        kind = self.kind.lower()
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise ConfigError(f"unknown denoiser kind {self.kind!r}")
        if kind == "tv" and (self.tv_weight < 0 or int(self.tv_iters) < 1):
            raise ConfigError("TV denoiser needs tv_weight >= 0 and tv_iters >= 1")
        if kind == "gaussian" and not self.sigma > 0:
            raise ConfigError("Gaussian denoiser needs sigma > 0")
        if kind == "conv" and self.conv is None:
            raise ConfigError("conv denoiser needs weights")


def denoise_array(v: np.ndarray, spec: DenoiserSpec) -> np.ndarray:
    if spec.kind == "identity":
        return v
    if spec.kind == "tv":
        return tv_denoise_array(v, spec.tv_weight, int(spec.tv_iters))
    if spec.kind == "gaussian":
        return gaussian_denoise_array(v, spec.sigma)
    return conv_net_array(v, spec.conv)


def denoise(v_in: VectorField, spec: DenoiserSpec) -> VectorField:
    if spec.kind == "identity":
        return v_in
    if spec.kind == "conv" and spec.conv.out_channels != v_in.grid.rank:
        raise ConfigError("conv denoiser channels do not match the field rank")
    return VectorField(denoise_array(v_in.values, spec), v_in.grid)
