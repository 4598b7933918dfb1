import itertools

import numpy as np
import pytest

from varreg.errors import ConfigError
from varreg.grid import GridDesc, ScalarField, VectorField
from varreg.metrics import (boundary_mask, dice, dice_array, evaluate, hausdorff,
                            hausdorff_array, intensity_mae, jacobian_det_array, jacobian_report)


def hausdorff_oracle(a, b, spacing):
    """All-pairs symmetric Hausdorff over face-connected boundary samples."""
    def boundary(m):
        out = []
        for idx in zip(*np.nonzero(m)):
            for ax in range(m.ndim):
                for step in (-1, 1):
                    j = list(idx)
                    j[ax] += step
                    if not (0 <= j[ax] < m.shape[ax]) or not m[tuple(j)]:
                        out.append(idx)
                        break
                else:
                    continue
                break
        return np.array(sorted(set(out)), dtype=float) * np.asarray(spacing)

    pa, pb = boundary(a), boundary(b)
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    return max(d.min(axis=1).max(), d.min(axis=0).max())


class TestDice:
    def test_identical(self, rng):
        m = rng.integers(0, 3, (10, 10))
        assert dice_array(m, m, 1) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4)); a[:2] = 1
        b = np.zeros((4, 4)); b[2:] = 1
        assert dice_array(a, b, 1) == 0.0

    def test_hand_count(self):
        a = np.zeros((4, 4)); a[0, :3] = 1
        b = np.zeros((4, 4)); b[0, 1:] = 1
        assert dice(ScalarField(a), ScalarField(b), 1) == pytest.approx(2 * 2 / 6)

    def test_both_empty(self):
        z = np.zeros((3, 3))
        assert dice_array(z, z, 1) == 1.0


class TestHausdorff:
    def test_identity_zero(self, rng):
        m = np.zeros((12, 12)); m[3:8, 2:9] = 1
        assert hausdorff(ScalarField(m), ScalarField(m), 1) == 0.0

    def test_boundary_mask(self):
        m = np.zeros((5, 5), bool); m[1:4, 1:4] = True
        b = boundary_mask(m)
        assert b.sum() == 8 and not b[2, 2]
        full = np.ones((3, 3), bool)
        assert boundary_mask(full).sum() == 8

    @pytest.mark.parametrize("spacing", [(1.0, 1.0), (0.5, 2.0)])
    def test_against_all_pairs(self, rng, spacing):
        from scipy.ndimage import gaussian_filter
        for _ in range(5):
            a = gaussian_filter(rng.random((14, 12)), 1.5) > 0.5
            b = gaussian_filter(rng.random((14, 12)), 1.5) > 0.5
            if not a.any() or not b.any():
                continue
            ref = hausdorff_oracle(a, b, spacing)
            assert hausdorff_array(a.astype(float), b.astype(float), 1, spacing) == \
                pytest.approx(ref, abs=1e-12)

    def test_3d(self, rng):
        a = rng.random((6, 5, 4)) > 0.6
        b = rng.random((6, 5, 4)) > 0.6
        ref = hausdorff_oracle(a, b, (1.0, 2.0, 3.0))
        assert hausdorff_array(a, b, True, (1.0, 2.0, 3.0)) == pytest.approx(ref, abs=1e-12)

    def test_empty_label(self):
        with pytest.raises(ConfigError):
            hausdorff_array(np.zeros((4, 4)), np.ones((4, 4)), 1, (1.0, 1.0))


class TestJacobian:
    def test_identity(self):
        neg, grad, det = jacobian_report(VectorField.zeros(GridDesc((8, 8))))
        assert neg == 0.0 and grad == 0.0 and np.all(det.values == 1.0)

    def test_fold_field(self):
        x = np.indices((8, 8), dtype=float)
        neg, _, det = jacobian_report(VectorField(np.stack([-2 * x[0], np.zeros((8, 8))])))
        assert neg == 100.0
        np.testing.assert_array_equal(det.values, -1.0)

    def test_affine_3d(self, rng):
        A = rng.uniform(-0.3, 0.3, (3, 3))
        x = np.indices((5, 6, 7), dtype=float)
        u = np.einsum("ij,j...->i...", A, x)
        det = jacobian_det_array(u)
        np.testing.assert_allclose(det, np.linalg.det(np.eye(3) + A), atol=1e-12)

    def test_cofactor_matches_numpy(self, rng):
        u = rng.standard_normal((3, 4, 4, 4))
        det = jacobian_det_array(u)
        grads = np.stack([np.stack(np.gradient(u[i])) for i in range(3)])
        for idx in itertools.product(range(4), repeat=3):
            M = np.eye(3) + grads[(slice(None), slice(None)) + idx]
            assert det[idx] == pytest.approx(np.linalg.det(M), abs=1e-12)


class TestEvaluate:
    def test_identity_report(self):
        m = np.zeros((10, 10)); m[2:6, 2:6] = 1; m[3:5, 3:5] = 2
        M = ScalarField(m)
        rep = evaluate(M, M, VectorField.zeros(M.grid), ref_image=M, warped_image=M)
        assert rep.labels == [1, 2]
        assert rep.dice == {1: 1.0, 2: 1.0}
        assert rep.hausdorff_mm == {1: 0.0, 2: 0.0}
        assert rep.neg_jacobian_pct == 0.0 and rep.mae == 0.0 and rep.mean_dice == 1.0

    def test_mae_optional(self):
        M = ScalarField(np.ones((4, 4)))
        assert np.isnan(evaluate(M, M, VectorField.zeros(M.grid)).mae)

    def test_intensity_mae(self):
        assert intensity_mae(ScalarField(np.zeros((2, 2))), ScalarField(np.full((2, 2), 0.5))) == 0.5
