"""Intensity consistency layer: closed-form u-updates of the split energy.

For a linearization at ``u_ref`` the residual is
``rho(u) = r + <J, u - u_ref>`` with ``r = I1(x + u_ref) - I0`` and
``J = grad I1(x + u_ref)``. Each update minimizes, per sample,
``(1/s)|rho(u)|^s + theta/2 |v - u|^2``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .grid import ScalarField, VectorField, check_same_grid
from .sampler import gradient_array, warp_array

DEFAULT_EPS = 1e-6


@dataclass(frozen=True, eq=False)
class LinearizedDataTerm:
    I1w: ScalarField
    J: VectorField
    r: ScalarField
    u_ref: VectorField

    def __post_init__(self):
        check_same_grid(self.I1w, self.J, self.r, self.u_ref)

    @property
    def grid(self):
        return self.r.grid


@dataclass(frozen=True, eq=False)
class DualCertificate:
    z: ScalarField

    def __post_init__(self):
        if np.max(np.abs(self.z.values)) > 1.0:
            raise ConfigError("dual certificate must satisfy |z| <= 1")


# -- array kernels ----------------------------------------------------------

def linearize_arrays(I0: np.ndarray, I1: np.ndarray, u_ref: np.ndarray):
    I1w = warp_array(I1, u_ref)
    return I1w, gradient_array(I1w), I1w - I0


def rho_array(J, r, u_ref, u):
    return r + np.sum(J * (u - u_ref), axis=0)


def icl_l1_array(J, r, u_ref, v, theta, eps=DEFAULT_EPS):
    """Thresholding update for the L1 data term; returns ``(u, z, zhat)``."""
    zhat = theta * rho_array(J, r, u_ref, v) / (np.sum(J * J, axis=0) + eps)
    z = zhat / np.maximum(np.abs(zhat), 1.0)
    u = v - z * J / theta
    return u, z, zhat


def icl_l2_array(J, r, u_ref, v, theta):
    """Sherman-Morrison update for the squared data term, written per component.

    For component ``c`` with ``w = v - u_ref`` and ``D = |J|^2 + theta``:
    ``u_c = u_ref_c + [(D - J_c^2) w_c - sum_{b != c} J_c J_b w_b - J_c r] / D``.
    """
    rank = J.shape[0]
    w = v - u_ref
    if rank == 2:
        Jx, Jy = J
        wx, wy = w
        D = Jx * Jx + Jy * Jy + theta
        ux = u_ref[0] + ((Jy * Jy + theta) * wx - Jx * Jy * wy - Jx * r) / D
        uy = u_ref[1] + ((Jx * Jx + theta) * wy - Jy * Jx * wx - Jy * r) / D
        return np.stack([ux, uy])
    if rank == 3:
        Jx, Jy, Jz = J
        wx, wy, wz = w
        D = Jx * Jx + Jy * Jy + Jz * Jz + theta
        ux = u_ref[0] + ((Jy * Jy + Jz * Jz + theta) * wx - Jx * Jy * wy - Jx * Jz * wz - Jx * r) / D
        uy = u_ref[1] + ((Jx * Jx + Jz * Jz + theta) * wy - Jy * Jx * wx - Jy * Jz * wz - Jy * r) / D
        uz = u_ref[2] + ((Jx * Jx + Jy * Jy + theta) * wz - Jz * Jx * wx - Jz * Jy * wy - Jz * r) / D
        return np.stack([ux, uy, uz])
    raise ConfigError(f"unsupported rank {rank}")


def icl_l2_matrix_array(J, r, u_ref, v, theta):
    """The same update as :func:`icl_l2_array` in matrix-vector form.

    ``u = u_ref + [1 - J J^T / (theta + |J|^2)] [v - u_ref - J r / theta]``
    """
    b = v - u_ref - J * (r / theta)
    D = theta + np.sum(J * J, axis=0)
    return u_ref + b - J * (np.sum(J * b, axis=0) / D)


def _check_theta(theta):
    if not np.all(np.asarray(theta) > 0):
        raise ConfigError("theta must be positive")


# -- field-level API ----------------------------------------------------------

def linearize(I0: ScalarField, I1: ScalarField, u_ref: VectorField) -> LinearizedDataTerm:
    grid = check_same_grid(I0, I1, u_ref)
    I1w, J, r = linearize_arrays(I0.values, I1.values, u_ref.values)
    return LinearizedDataTerm(ScalarField(I1w, grid), VectorField(J, grid),
                              ScalarField(r, grid), u_ref)


def rho(ldt: LinearizedDataTerm, u: VectorField) -> ScalarField:
    grid = check_same_grid(ldt.r, u)
    return ScalarField(rho_array(ldt.J.values, ldt.r.values, ldt.u_ref.values, u.values), grid)


def icl_l1(ldt: LinearizedDataTerm, v: VectorField, theta: float, eps: float = DEFAULT_EPS):
    grid = check_same_grid(ldt.r, v)
    _check_theta(theta)
    if not eps > 0:
        raise ConfigError("eps must be positive")
    u, z, _ = icl_l1_array(ldt.J.values, ldt.r.values, ldt.u_ref.values, v.values, theta, eps)
    return VectorField(u, grid), DualCertificate(ScalarField(z, grid))


def icl_l2(ldt: LinearizedDataTerm, v: VectorField, theta: float) -> VectorField:
    grid = check_same_grid(ldt.r, v)
    _check_theta(theta)
    return VectorField(icl_l2_array(ldt.J.values, ldt.r.values, ldt.u_ref.values,
                                    v.values, theta), grid)


def _check_s(s):
    if s not in (1, 2):
        raise ConfigError(f"s must be 1 or 2, got {s!r}")


def data_energy_array(J, r, u_ref, u, s) -> float:
    _check_s(s)
    return float(np.sum(np.abs(rho_array(J, r, u_ref, u)) ** s) / s)


def tv_array(v: np.ndarray) -> float:
    """Forward-difference TV with one isotropic norm per sample over all components and axes."""
    sq = np.zeros(v.shape[1:])
    for c in range(v.shape[0]):
        for a in range(v.ndim - 1):
            d = np.diff(v[c], axis=a, append=np.take(v[c], [-1], axis=a))
            sq += d * d
    return float(np.sum(np.sqrt(sq)))


def splitting_energy_array(J, r, u_ref, u, v, s, theta, tv_weight) -> float:
    return (data_energy_array(J, r, u_ref, u, s) + tv_weight * tv_array(v)
            + 0.5 * theta * float(np.sum((v - u) ** 2)))


def data_energy(ldt: LinearizedDataTerm, u: VectorField, s: int) -> float:
    check_same_grid(ldt.r, u)
    return data_energy_array(ldt.J.values, ldt.r.values, ldt.u_ref.values, u.values, s)


def splitting_energy(ldt: LinearizedDataTerm, u: VectorField, v: VectorField, s: int,
                     theta: float, tv_weight: float) -> float:
    check_same_grid(ldt.r, u, v)
    if tv_weight < 0:
        raise ConfigError("tv_weight must be non-negative")
    return splitting_energy_array(ldt.J.values, ldt.r.values, ldt.u_ref.values,
                                  u.values, v.values, s, theta, tv_weight)
