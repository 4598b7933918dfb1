"""Seeded phantoms, fold-free smooth deformations and registration pairs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, VarRegError
from .grid import GridDesc, ScalarField, VectorField
from .metrics import jacobian_det_array
from .sampler import warp_array, warp_nearest_array

MAX_ATTEMPTS = 20


@dataclass(frozen=True)
class PairConfig:
    max_disp: float = 2.0
    smoothness_sigma: float | None = None  # default: min(dims) / 2
    n_blobs: int | None = None  # default scales with area
    thresholds: tuple[float, float] = (0.4, 0.5)
    inverse_iters: int = 10


@dataclass(frozen=True, eq=False)
class SynthPair:
    I0: ScalarField
    I1: ScalarField
    mask0: ScalarField
    mask1: ScalarField
    u_true: VectorField
    inverse_residual: float


def make_phantom(grid: GridDesc, seed: int = 0, n_blobs: int | None = None,
                 thresholds=(0.4, 0.5)):
    """Sum of Gaussian bumps scaled into [0, 1], and a nested-threshold label mask.

    Bump widths never drop below their 64-sample scale so small grids still
    carry resolvable structure.
    """
    min_dim = 32 if grid.rank == 2 else 16
    if min(grid.dims) < min_dim:
        raise ConfigError(f"phantom needs dims >= {min_dim} per axis, got {grid.dims}")
    rng = np.random.default_rng(seed)
    dims = np.array(grid.dims, dtype=np.float64)
    if n_blobs is None:
        n_blobs = max(8, int(np.prod(dims) / (6.0 ** grid.rank)))
    coords = np.indices(grid.dims, dtype=np.float64)
    img = np.zeros(grid.dims)
    for _ in range(n_blobs):
        centre = rng.uniform(0.0, 1.0, grid.rank) * (dims - 1)
        width = rng.uniform(0.025, 0.05) * max(min(dims), 64.0)
        amp = rng.uniform(0.5, 1.0)
        d2 = sum((coords[a] - centre[a]) ** 2 for a in range(grid.rank))
        img += amp * np.exp(-0.5 * d2 / width ** 2)
    img = (img - img.min()) / (img.max() - img.min())
    mask = np.zeros(grid.dims)
    mask[img > thresholds[0]] = 1.0
    mask[img > thresholds[1]] = 2.0
    return ScalarField(img, grid), ScalarField(mask, grid)


def _max_norm(u: np.ndarray) -> float:
    return float(np.sqrt(np.sum(u * u, axis=0)).max())


def make_deformation(grid: GridDesc, max_disp: float, smoothness_sigma: float | None = None,
                     seed: int = 0) -> VectorField:
    """Smoothed white noise rescaled so the largest displacement length is ``max_disp``.

    Candidates that fold (any negative Jacobian determinant) are redrawn.
    """
    if max_disp < 0 or max_disp > min(grid.dims) / 8:
        raise ConfigError(f"max_disp must lie in [0, min(dims)/8], got {max_disp}")
    if max_disp == 0:
        return VectorField.zeros(grid)
    sigma = min(grid.dims) / 2 if smoothness_sigma is None else smoothness_sigma
    if not sigma > 0:
        raise ConfigError("smoothness_sigma must be positive")
    seq = np.random.SeedSequence(seed)
    for child in seq.spawn(MAX_ATTEMPTS):
        rng = np.random.default_rng(child)
        u = np.stack([gaussian_filter(rng.standard_normal(grid.dims), sigma, mode="reflect")
                      for _ in range(grid.rank)])
        u *= max_disp / _max_norm(u)
        if np.all(jacobian_det_array(u) > 0):
            return VectorField(u, grid)
    raise VarRegError(f"no fold-free deformation after {MAX_ATTEMPTS} attempts")


def warp_vector_array(f: np.ndarray, u: np.ndarray) -> np.ndarray:
    return np.stack([warp_array(f[c], u) for c in range(f.shape[0])])


def invert_displacement(u: np.ndarray, iters: int = 10) -> np.ndarray:
    """Fixed-point inverse: ``u_inv(x) = -u(x + u_inv(x))``."""
    u_inv = -u
    for _ in range(iters):
        u_inv = -warp_vector_array(u, u_inv)
    return u_inv


def inverse_residual(u: np.ndarray, u_inv: np.ndarray) -> float:
    return float(np.abs(warp_vector_array(u, u_inv) + u_inv).max())


def make_pair(grid: GridDesc, cfg: PairConfig | None = None, seed: int = 0) -> SynthPair:
    """Phantom pair where registering I0 <- I1 should recover ``u_true``."""
    cfg = PairConfig() if cfg is None else cfg
    seq = np.random.SeedSequence(seed)
    s_img, s_def = (int(c.generate_state(1)[0]) for c in seq.spawn(2))
    I0, mask0 = make_phantom(grid, s_img, cfg.n_blobs, cfg.thresholds)
    u_true = make_deformation(grid, cfg.max_disp, cfg.smoothness_sigma, s_def)
    u_inv = invert_displacement(u_true.values, cfg.inverse_iters)
    I1 = ScalarField(warp_array(I0.values, u_inv), grid)
    mask1 = ScalarField(warp_nearest_array(mask0.values, u_inv), grid)
    return SynthPair(I0, I1, mask0, mask1, u_true, inverse_residual(u_true.values, u_inv))


def make_dataset(grid: GridDesc, count: int, cfg: PairConfig | None = None, seed: int = 0):
    seeds = np.random.SeedSequence(seed).generate_state(count)
    return [make_pair(grid, cfg, int(s)) for s in seeds]
