"""Multilinear warping, its adjoint, and finite-difference image gradients.

The array-level functions (``*_array``) operate on raw numpy arrays and are
what the solver and the unrolled network call in their inner loops; the
field-level wrappers add grid validation.
"""
from __future__ import annotations

import itertools
from functools import lru_cache

import numpy as np

from .errors import ConfigError
from .grid import ScalarField, VectorField, check_same_grid


@lru_cache(maxsize=16)
def _coords(dims: tuple[int, ...]) -> np.ndarray:
    c = np.indices(dims, dtype=np.float64)
    c.setflags(write=False)
    return c


def _stencil(u: np.ndarray):
    """Per-axis lower cell index, fractional offset and in-range mask.

    Integer coordinates use the cell to their left (``t == 1``) so the
    derivative at a cell boundary is that of the left cell; coordinate 0 has
    no left cell and uses ``[0, 1]``.
    """
    dims = u.shape[1:]
    grids = _coords(dims)
    lo, frac, inside = [], [], []
    for a, n in enumerate(dims):
        p = grids[a] + u[a]
        pc = np.clip(p, 0.0, n - 1.0)
        i0 = np.clip(np.ceil(pc).astype(np.intp) - 1, 0, n - 2)
        lo.append(i0)
        frac.append(pc - i0)
        inside.append((p >= 0.0) & (p <= n - 1.0))
    return lo, frac, inside


def _corners(rank: int):
    return itertools.product((0, 1), repeat=rank)


def _flat_index(lo, bits, dims):
    idx = [lo[a] + b for a, b in enumerate(bits)]
    return np.ravel_multi_index(idx, dims)


def warp_array(I: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Sample ``I`` at ``x + u(x)`` with clamp-to-edge multilinear interpolation."""
    dims = I.shape
    lo, frac, _ = _stencil(u)
    flat = I.ravel()
    out = np.zeros(dims)
    for bits in _corners(len(dims)):
        w = np.ones(dims)
        for a, b in enumerate(bits):
            w = w * (frac[a] if b else 1.0 - frac[a])
        out += w * flat[_flat_index(lo, bits, dims)]
    return out


def warp_adjoint_array(I: np.ndarray, u: np.ndarray, g_out: np.ndarray,
                       need_image: bool = True):
    """Reverse-mode adjoint of :func:`warp_array`.

    Returns ``(g_I, g_u)``; ``g_I`` is None when ``need_image`` is False.
    """
    dims = I.shape
    rank = len(dims)
    lo, frac, inside = _stencil(u)
    flat = I.ravel()
    g_u = np.zeros((rank,) + dims)
    g_I = np.zeros(I.size) if need_image else None
    for bits in _corners(rank):
        idx = _flat_index(lo, bits, dims)
        factors = [frac[a] if b else 1.0 - frac[a] for a, b in enumerate(bits)]
        vals = flat[idx]
        if need_image:
            w = np.ones(dims)
            for f in factors:
                w = w * f
            g_I += np.bincount(idx.ravel(), weights=(w * g_out).ravel(), minlength=I.size)
        for a, b in enumerate(bits):
            dw = np.full(dims, 1.0 if b else -1.0)
            for c in range(rank):
                if c != a:
                    dw = dw * factors[c]
            g_u[a] += dw * vals
    for a in range(rank):
        g_u[a] *= g_out * inside[a]
    if need_image:
        g_I = g_I.reshape(dims)
    return g_I, g_u


def warp_nearest_array(M: np.ndarray, u: np.ndarray) -> np.ndarray:
    dims = M.shape
    grids = _coords(dims)
    idx = []
    for a, n in enumerate(dims):
        p = np.clip(grids[a] + u[a], 0.0, n - 1.0)
        # round half up, deterministic for exact .5 offsets
        idx.append(np.floor(p + 0.5).astype(np.intp))
    return M[tuple(idx)]


def gradient_array(I: np.ndarray) -> np.ndarray:
    """Central differences inside, one-sided differences on the border."""
    return np.stack(np.gradient(I), axis=0) if I.ndim > 1 else np.gradient(I)[None]


def gradient_adjoint_array(g: np.ndarray) -> np.ndarray:
    """Transpose of :func:`gradient_array` applied to ``g`` of shape ``(rank, *dims)``."""
    out = np.zeros(g.shape[1:])
    for a in range(g.shape[0]):
        ga = np.moveaxis(g[a], a, 0)
        acc = np.zeros_like(ga)
        acc[2:] += 0.5 * ga[1:-1]
        acc[:-2] -= 0.5 * ga[1:-1]
        acc[1] += ga[0]
        acc[0] -= ga[0]
        acc[-1] += ga[-1]
        acc[-2] -= ga[-1]
        out += np.moveaxis(acc, 0, a)
    return out


def _check_displacement(u: VectorField):
    if not np.all(np.isfinite(u.values)):
        raise ConfigError("displacement must be finite")


def warp_scalar(I: ScalarField, u: VectorField) -> ScalarField:
    grid = check_same_grid(I, u)
    _check_displacement(u)
    return ScalarField(warp_array(I.values, u.values), grid)


def warp_mask_nearest(M: ScalarField, u: VectorField) -> ScalarField:
    """Nearest-neighbour label warp; label values are copied, never blended."""
    grid = check_same_grid(M, u)
    return ScalarField(warp_nearest_array(M.values, u.values), grid)


def image_gradient(I: ScalarField) -> VectorField:
    return VectorField(gradient_array(I.values), I.grid)


def warp_adjoint(I: ScalarField, u: VectorField, g_out: ScalarField):
    grid = check_same_grid(I, u, g_out)
    g_I, g_u = warp_adjoint_array(I.values, u.values, g_out.values)
    return ScalarField(g_I, grid), VectorField(g_u, grid)
