"""Overlap, surface-distance and deformation-quality metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_erosion, generate_binary_structure
from scipy.spatial import cKDTree

from .errors import ConfigError
from .grid import ScalarField, VectorField, check_same_grid
from .sampler import gradient_array


@dataclass
class MetricsReport:
    dice: dict[int, float] = field(default_factory=dict)
    hausdorff_mm: dict[int, float] = field(default_factory=dict)
    neg_jacobian_pct: float = 0.0
    mean_grad_jacobian: float = 0.0
    mae: float = float("nan")

    @property
    def labels(self) -> list[int]:
        return sorted(self.dice)

    @property
    def mean_dice(self) -> float:
        return float(np.mean([self.dice[k] for k in self.labels])) if self.dice else float("nan")


def dice_array(a: np.ndarray, b: np.ndarray, label) -> float:
    A = a == label
    B = b == label
    total = int(A.sum()) + int(B.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(A, B).sum()) / total


def dice(A: ScalarField, B: ScalarField, label: int) -> float:
    check_same_grid(A, B)
    return dice_array(A.values, B.values, label)


def boundary_mask(mask: np.ndarray) -> np.ndarray:
    """Labelled samples with at least one face neighbour outside the label.

    Samples beyond the grid count as outside.
    """
    struct = generate_binary_structure(mask.ndim, 1)
    inner = binary_erosion(mask, structure=struct, border_value=0)
    return mask & ~inner


def hausdorff_array(a: np.ndarray, b: np.ndarray, label, spacing) -> float:
    ba = np.argwhere(boundary_mask(a == label)) * np.asarray(spacing, dtype=np.float64)
    bb = np.argwhere(boundary_mask(b == label)) * np.asarray(spacing, dtype=np.float64)
    if len(ba) == 0 or len(bb) == 0:
        raise ConfigError(f"label {label} has an empty mask")
    d_ab = cKDTree(bb).query(ba)[0].max()
    d_ba = cKDTree(ba).query(bb)[0].max()
    return float(max(d_ab, d_ba))


def hausdorff(A: ScalarField, B: ScalarField, label: int, spacing=None) -> float:
    grid = check_same_grid(A, B)
    return hausdorff_array(A.values, B.values, label, grid.spacing if spacing is None else spacing)


def jacobian_det_array(u: np.ndarray) -> np.ndarray:
    rank = u.shape[0]
    # jac[i, j] = d phi_i / d x_j with phi = x + u
    jac = np.stack([gradient_array(u[i]) for i in range(rank)])
    for i in range(rank):
        jac[i, i] += 1.0
    if rank == 2:
        return jac[0, 0] * jac[1, 1] - jac[0, 1] * jac[1, 0]
    return (jac[0, 0] * (jac[1, 1] * jac[2, 2] - jac[1, 2] * jac[2, 1])
            - jac[0, 1] * (jac[1, 0] * jac[2, 2] - jac[1, 2] * jac[2, 0])
            + jac[0, 2] * (jac[1, 0] * jac[2, 1] - jac[1, 1] * jac[2, 0]))


def jacobian_report(u: VectorField):
    """Returns ``(neg_pct, mean_grad_j, det_map)``."""
    det = jacobian_det_array(u.values)
    neg_pct = 100.0 * float(np.count_nonzero(det < 0)) / det.size
    grad = gradient_array(det)
    mean_grad = float(np.mean(np.sqrt(np.sum(grad * grad, axis=0))))
    return neg_pct, mean_grad, ScalarField(det, u.grid)


def intensity_mae(A: ScalarField, B: ScalarField) -> float:
    check_same_grid(A, B)
    return float(np.mean(np.abs(A.values - B.values)))


def evaluate(ref_mask: ScalarField, warped_mask: ScalarField, u: VectorField,
             spacing=None, ref_image: ScalarField | None = None,
             warped_image: ScalarField | None = None, labels=None) -> MetricsReport:
    """Full report: per-label Dice/HD over foreground labels plus Jacobian stats."""
    grid = check_same_grid(ref_mask, warped_mask, u)
    spacing = grid.spacing if spacing is None else tuple(spacing)
    if labels is None:
        labels = np.union1d(np.unique(ref_mask.values), np.unique(warped_mask.values))
        labels = [int(l) for l in labels if l != 0]
    report = MetricsReport()
    for lab in sorted(labels):
        report.dice[lab] = dice(ref_mask, warped_mask, lab)
        report.hausdorff_mm[lab] = hausdorff_array(ref_mask.values, warped_mask.values, lab, spacing)
    report.neg_jacobian_pct, report.mean_grad_jacobian, _ = jacobian_report(u)
    if ref_image is not None and warped_image is not None:
        report.mae = intensity_mae(ref_image, warped_image)
    return report


def mean_dice(a: np.ndarray, b: np.ndarray, labels=(1, 2)) -> float:
    return float(np.mean([dice_array(a, b, l) for l in labels]))
