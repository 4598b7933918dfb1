"""Coarse-to-fine variable-splitting registration.

Each pyramid level runs ``n_warp`` linearizations; each linearization runs
``n_iter`` alternations of the closed-form u-update and a denoising v-update.
The denoised field is carried forward and returned.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .denoise import ConvDenoiserWeights, DenoiserSpec, conv_net_array, denoise_array
from .errors import ConfigError, NumericalError
from .grid import (GridDesc, ScalarField, VectorField, build_pyramid, check_same_grid,
                   downsample_array, prolong_array)
from .icl import (DEFAULT_EPS, icl_l1_array, icl_l2_array, linearize_arrays,
                  data_energy_array, splitting_energy_array)

log = logging.getLogger(__name__)

INIT_KINDS = ("zeros", "noise", "provided", "learned")


@dataclass(frozen=True, eq=False)
class InitStrategy:
    kind: str = "zeros"
    noise_sigma: float = 0.5
    field: VectorField | None = None
    learned_weights: ConvDenoiserWeights | None = None

    def __post_init__(self):
        kind = self.kind.lower()
        object.__setattr__(self, "kind", kind)
        if kind not in INIT_KINDS:
            raise ConfigError(f"unknown init strategy {self.kind!r}")
        if kind == "noise" and not self.noise_sigma > 0:
            raise ConfigError("noise init needs noise_sigma > 0")
        if kind == "provided" and self.field is None:
            raise ConfigError("provided init needs a field")
        if kind == "learned" and self.learned_weights is None:
            raise ConfigError("learned init needs init-network weights")


@dataclass(frozen=True, eq=False)
class SolverConfig:
    s: int = 2
    theta: float | Sequence[float] = 0.01
    denoiser: DenoiserSpec = field(default_factory=lambda: DenoiserSpec("tv", 0.1, 200))
    n_warp: int = 3
    n_iter: int = 2
    levels: int = 3
    eps: float = DEFAULT_EPS
    init: InitStrategy = field(default_factory=InitStrategy)
    seed: int = 0

    def __post_init__(self):
        if self.s not in (1, 2):
            raise ConfigError(f"s must be 1 or 2, got {self.s!r}")
        if self.n_warp < 1 or self.n_iter < 1:
            raise ConfigError("n_warp and n_iter must be >= 1")
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if not self.eps > 0:
            raise ConfigError("eps must be positive")
        thetas = self.thetas
        if len(thetas) != self.n_warp * self.n_iter:
            raise ConfigError("theta schedule length must equal n_warp * n_iter")
        if not all(t > 0 and np.isfinite(t) for t in thetas):
            raise ConfigError("theta must be positive")

    @property
    def thetas(self) -> list[float]:
        if np.ndim(self.theta) == 0:
            return [float(self.theta)] * (self.n_warp * self.n_iter)
        return [float(t) for t in self.theta]


@dataclass(frozen=True)
class IterRecord:
    level: int
    warp: int
    iter: int
    splitting_energy: float
    data_energy: float
    max_disp: float
    max_gap: float


@dataclass
class SolveDiagnostics:
    records: list[IterRecord] = field(default_factory=list)

    def linearization(self, level: int, warp: int) -> list[IterRecord]:
        return [r for r in self.records if r.level == level and r.warp == warp]

    def columns(self):
        return ("level", "warp", "iter", "splitting_energy", "data_energy", "max_disp", "max_gap")


def init_displacement(strategy: InitStrategy, grid: GridDesc, seed: int = 0,
                      images: tuple[ScalarField, ScalarField] | None = None) -> VectorField:
    kind = strategy.kind
    if kind == "zeros":
        return VectorField.zeros(grid)
    if kind == "noise":
        rng = np.random.default_rng(seed)
        return VectorField(strategy.noise_sigma * rng.standard_normal((grid.rank,) + grid.dims), grid)
    if kind == "provided":
        if strategy.field.grid.dims != grid.dims:
            raise ConfigError("provided init field does not match the grid")
        return VectorField(strategy.field.values, grid)
    if images is None:
        raise ConfigError("learned init needs the image pair")
    w = strategy.learned_weights
    if w.in_channels != 2 or w.out_channels != grid.rank:
        raise ConfigError("init network must map 2 image channels to rank channels")
    stacked = np.stack([images[0].values, images[1].values])
    return VectorField(conv_net_array(stacked, w), grid)


def restrict_displacement(u: np.ndarray, target_dims) -> np.ndarray:
    """Block-mean a fine displacement down to ``target_dims``, rescaling voxel units."""
    out = u
    while out.shape[1:] != tuple(target_dims):
        src = out.shape[1:]
        out = downsample_array(out, spatial_axes=range(1, out.ndim))
        ratios = np.array([n / m for n, m in zip(out.shape[1:], src)])
        out = out * ratios.reshape((-1,) + (1,) * len(src))
    return out


def tv_lambda(cfg: SolverConfig, theta: float) -> float:
    """Regularization weight implied by a TV denoiser of strength tv_weight = lambda / theta."""
    return cfg.denoiser.tv_weight * theta if cfg.denoiser.kind == "tv" else 0.0


def register(I0: ScalarField, I1: ScalarField, cfg: SolverConfig | None = None):
    """Estimate ``u`` such that ``I1(x + u(x)) ~ I0(x)``; returns ``(u, diagnostics)``."""
    cfg = SolverConfig() if cfg is None else cfg
    grid = check_same_grid(I0, I1)
    pyr = build_pyramid(I0, I1, cfg.levels)
    thetas = cfg.thetas
    diag = SolveDiagnostics()

    coarse_grid = pyr.coarsest[0].grid
    if cfg.init.kind in ("provided", "learned"):
        u0 = init_displacement(cfg.init, grid, cfg.seed, (I0, I1)).values
        v = restrict_displacement(u0, coarse_grid.dims)
    else:
        v = init_displacement(cfg.init, coarse_grid, cfg.seed).values

    for level, (J0, J1) in enumerate(pyr.levels):
        if v.shape[1:] != J0.grid.dims:
            v = prolong_array(v, J0.grid.dims)
        f0, f1 = J0.values, J1.values
        for w in range(cfg.n_warp):
            u_ref = v
            _, J, r = linearize_arrays(f0, f1, u_ref)
            u = v
            for k in range(cfg.n_iter + 1):
                if k > 0:
                    theta = thetas[w * cfg.n_iter + k - 1]
                    if cfg.s == 1:
                        u = icl_l1_array(J, r, u_ref, v, theta, cfg.eps)[0]
                    else:
                        u = icl_l2_array(J, r, u_ref, v, theta)
                    v = denoise_array(u, cfg.denoiser)
                else:
                    theta = thetas[w * cfg.n_iter]
                diag.records.append(IterRecord(
                    level, w, k,
                    splitting_energy_array(J, r, u_ref, u, v, cfg.s, theta, tv_lambda(cfg, theta)),
                    data_energy_array(J, r, u_ref, u, cfg.s),
                    float(np.sqrt(np.sum(v * v, axis=0)).max()),
                    float(np.abs(u - v).max()),
                ))
            if not np.all(np.isfinite(v)):
                raise NumericalError(f"non-finite displacement at level {level}, warp {w}")
        log.debug("level %d done, max |v| = %.3f", level, diag.records[-1].max_disp)
    return VectorField(v, grid), diag
