"""Grid-attached fields, image pyramids and coarse-to-fine displacement transfer.

Arrays are stored row-major with the last axis fastest. A vector field of
rank ``d`` holds ``d`` planes; plane ``c`` is the displacement along array
axis ``c`` (so component 0 is "x", 1 is "y", 2 is "z"), measured in voxels.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, GridMismatchError


@dataclass(frozen=True)
class GridDesc:
    dims: tuple[int, ...]
    spacing: tuple[float, ...] = None  # type: ignore[assignment]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if self.spacing is None:
            spacing = (1.0,) * len(dims)
        else:
            spacing = tuple(float(s) for s in self.spacing)
        if len(dims) not in (2, 3):
            raise ConfigError(f"grid rank must be 2 or 3, got {len(dims)}")
        if len(spacing) != len(dims):
            raise ConfigError("spacing length does not match dims")
        if any(d < 2 for d in dims):
            raise ConfigError(f"every dim must be >= 2, got {dims}")
        if not all(np.isfinite(s) and s > 0 for s in spacing):
            raise ConfigError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def rank(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))


def _frozen(values, shape=None) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if shape is not None and arr.shape != tuple(shape):
        raise GridMismatchError(f"expected shape {tuple(shape)}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError("field values must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ScalarField:
    """A real-valued image on a regular grid."""

    values: np.ndarray
    grid: GridDesc = None  # type: ignore[assignment]

    def __post_init__(self):
        arr = np.asarray(self.values)
        grid = self.grid if self.grid is not None else GridDesc(arr.shape)
        object.__setattr__(self, "values", _frozen(arr, grid.dims))
        object.__setattr__(self, "grid", grid)

    @classmethod
    def constant(cls, grid: GridDesc, value: float = 0.0) -> "ScalarField":
        return cls(np.full(grid.dims, float(value)), grid)


@dataclass(frozen=True, eq=False)
class VectorField:
    """A displacement field in voxel units; ``values[c]`` moves along axis ``c``."""

    values: np.ndarray
    grid: GridDesc = None  # type: ignore[assignment]

    def __post_init__(self):
        arr = np.asarray(self.values)
        grid = self.grid if self.grid is not None else GridDesc(arr.shape[1:])
        if arr.ndim != grid.rank + 1 or arr.shape[0] != grid.rank:
            raise GridMismatchError(
                f"vector field needs shape {(grid.rank,) + grid.dims}, got {arr.shape}")
        object.__setattr__(self, "values", _frozen(arr, (grid.rank,) + grid.dims))
        object.__setattr__(self, "grid", grid)

    @classmethod
    def zeros(cls, grid: GridDesc) -> "VectorField":
        return cls(np.zeros((grid.rank,) + grid.dims), grid)

    def component(self, c: int) -> ScalarField:
        return ScalarField(self.values[c], self.grid)

    def magnitude(self) -> np.ndarray:
        return np.sqrt(np.sum(self.values ** 2, axis=0))


def check_same_grid(*fields) -> GridDesc:
    """Return the shared grid of ``fields`` or raise GridMismatchError."""
    grid = fields[0].grid
    for f in fields[1:]:
        if f.grid.dims != grid.dims:
            raise GridMismatchError(f"grid mismatch: {grid.dims} vs {f.grid.dims}")
        if not np.allclose(f.grid.spacing, grid.spacing):
            raise GridMismatchError(f"spacing mismatch: {grid.spacing} vs {f.grid.spacing}")
    return grid


@dataclass(frozen=True, eq=False)
class Pyramid:
    levels: list[tuple[ScalarField, ScalarField]] = field(default_factory=list)

    def __len__(self):
        return len(self.levels)

    @property
    def finest(self) -> tuple[ScalarField, ScalarField]:
        return self.levels[-1]

    @property
    def coarsest(self) -> tuple[ScalarField, ScalarField]:
        return self.levels[0]


def halve_dims(dims: Sequence[int]) -> tuple[int, ...]:
    return tuple(int(d) // 2 for d in dims)


def _halve_axis(a: np.ndarray, axis: int) -> np.ndarray:
    # Pairwise means; the last block absorbs a trailing odd sample.
    a = np.moveaxis(a, axis, 0)
    m = a.shape[0] // 2
    head = a[: 2 * (m - 1)].reshape((m - 1, 2) + a.shape[1:]).mean(axis=1)
    tail = a[2 * (m - 1):].mean(axis=0, keepdims=True)
    return np.moveaxis(np.concatenate([head, tail], axis=0), 0, axis)


def downsample_array(a: np.ndarray, spatial_axes: Sequence[int] | None = None) -> np.ndarray:
    """2x block-mean downsampling over ``spatial_axes`` (default: all axes)."""
    axes = range(a.ndim) if spatial_axes is None else spatial_axes
    out = np.asarray(a, dtype=np.float64)
    for ax in axes:
        out = _halve_axis(out, ax)
    return out


def downsample(f: ScalarField) -> ScalarField:
    grid = f.grid
    coarse = GridDesc(halve_dims(grid.dims), tuple(2.0 * s for s in grid.spacing))
    return ScalarField(downsample_array(f.values), coarse)


def max_levels(dims: Sequence[int], min_dim: int = 4) -> int:
    levels, d = 1, tuple(dims)
    while all(x // 2 >= min_dim for x in d):
        d = halve_dims(d)
        levels += 1
    return levels


def build_pyramid(I0: ScalarField, I1: ScalarField, levels: int) -> Pyramid:
    """Block-mean pyramid of an image pair, ordered coarsest to finest."""
    check_same_grid(I0, I1)
    levels = int(levels)
    if levels < 1:
        raise ConfigError("levels must be >= 1")
    if levels > max_levels(I0.grid.dims):
        raise ConfigError(
            f"{levels} levels too deep for dims {I0.grid.dims} (coarsest must be >= 4 per axis)")
    pairs = [(I0, I1)]
    for _ in range(levels - 1):
        a, b = pairs[-1]
        pairs.append((downsample(a), downsample(b)))
    return Pyramid(pairs[::-1])


def _resample_axis(a: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    # Linear interpolation at index coordinates x * n_in / n_out, clamped.
    n_in = a.shape[axis]
    x = np.arange(n_out) * (n_in / n_out)
    x = np.clip(x, 0.0, n_in - 1)
    i0 = np.minimum(np.floor(x).astype(np.intp), n_in - 2)
    t = x - i0
    lo = np.take(a, i0, axis=axis)
    hi = np.take(a, i0 + 1, axis=axis)
    shape = [1] * a.ndim
    shape[axis] = n_out
    t = t.reshape(shape)
    return lo * (1.0 - t) + hi * t


def prolong_array(u: np.ndarray, target_dims: Sequence[int]) -> np.ndarray:
    """Resample a ``(rank, *dims)`` displacement to ``target_dims`` and rescale it."""
    src = u.shape[1:]
    out = np.asarray(u, dtype=np.float64)
    for ax, (n_in, n_out) in enumerate(zip(src, target_dims)):
        out = _resample_axis(out, ax + 1, int(n_out))
    ratios = np.array([n_out / n_in for n_in, n_out in zip(src, target_dims)])
    return out * ratios.reshape((-1,) + (1,) * len(src))


def prolong_displacement(u: VectorField, target: GridDesc) -> VectorField:
    """Transfer a coarse displacement to the next finer grid.

    Accepts target dims in ``[2n - 1, 2n + 1]`` per axis; ``2n + 1`` arises when
    the finer level had an odd size folded into its last block.
    """
    src = u.grid.dims
    if target.rank != u.grid.rank:
        raise ConfigError("target rank differs from field rank")
    for n_in, n_out in zip(src, target.dims):
        if not (2 * n_in - 1 <= n_out <= 2 * n_in + 1):
            raise ConfigError(f"target dims {target.dims} incompatible with 2x of {src}")
    return VectorField(prolong_array(u.values, target.dims), target)
