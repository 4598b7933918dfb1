"""Acceptance suite: one test per headline criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines inline; they are
also collected into an "acceptance criteria" section of the terminal summary.
"""
import itertools
import time

import numpy as np
import pytest

from varreg.cli import main as cli_main
from varreg.grid import GridDesc, ScalarField, VectorField
from varreg.icl import icl_l1_array, icl_l2_array, icl_l2_matrix_array
from varreg.metrics import dice, hausdorff, jacobian_report, mean_dice
from varreg.sampler import warp_nearest_array
from varreg.solver import SolverConfig, register
from varreg.synth import PairConfig, make_dataset
from varreg.unroll import (CascadeParams, TrainConfig, grad_check, gradcheck_instance, loss_array,
                           predict, train)

from conftest import record_acceptance

N_INSTANCES = 1000


def _instances(seed, rank, n):
    r_ = np.random.default_rng(seed)
    J = r_.standard_normal((rank, n))
    r = r_.standard_normal(n)
    u_ref = r_.standard_normal((rank, n))
    v = r_.standard_normal((rank, n))
    theta = r_.uniform(0.01, 10.0, n)
    return J, r, u_ref, v, theta


def _l1_energy(J, r, u_ref, v, theta, u):
    # broadcasting over trailing candidate axes
    rho = r + np.sum(J * (u - u_ref), axis=0)
    return np.abs(rho) + 0.5 * theta * np.sum((v - u) ** 2, axis=0)


def _grid_min(J, r, u_ref, v, theta, center, half, n):
    """Brute-force minimum over an ``n^rank`` lattice of half-width ``half``."""
    rank = J.shape[0]
    ticks = np.linspace(-1.0, 1.0, n)
    offs = np.array(list(itertools.product(ticks, repeat=rank))).T  # (rank, n^rank)
    cand = center[:, :, None] + half[None, :, None] * offs[:, None, :]
    e = _l1_energy(J[:, :, None], r[:, None], u_ref[:, :, None], v[:, :, None],
                   theta[:, None], cand)
    k = np.argmin(e, axis=1)
    return e[np.arange(e.shape[0]), k], cand[:, np.arange(e.shape[0]), k]


class TestSubproblems:
    def test_l1_optimality(self):
        t0 = time.perf_counter()
        worst_gap, worst_z = -np.inf, 0.0
        for rank in (2, 3):
            n = N_INSTANCES // 2
            J, r, u_ref, v, theta = _instances(100 + rank, rank, n)
            u, z, _ = icl_l1_array(J, r, u_ref, v, theta, eps=1e-12)
            e_icl = _l1_energy(J, r, u_ref, v, theta, u)
            pts = 21 if rank == 2 else 9
            # global lattice around v: the minimizer lies within |J|/theta of v
            reach = np.linalg.norm(J, axis=0) / theta
            best, arg = _grid_min(J, r, u_ref, v, theta, v, reach, pts)
            # successively finer lattices around the best point found so far,
            # each spanning two coarse spacings either side
            half = reach
            while np.max(half) > 1e-9:
                half = half * (4.0 / (pts - 1))
                e, a = _grid_min(J, r, u_ref, v, theta, arg, half, pts)
                better = e < best
                best = np.where(better, e, best)
                arg = np.where(better[None], a, arg)
            # fine lattices centred on the candidate itself
            for h in (1e-2, 1e-4, 1e-6):
                e, _ = _grid_min(J, r, u_ref, v, theta, u, np.full(n, h), pts)
                best = np.minimum(best, e)
            worst_gap = max(worst_gap, float(np.max(e_icl - best)))
            worst_z = max(worst_z, float(np.max(np.abs(z))))
        dt = time.perf_counter() - t0
        ok = worst_gap <= 1e-8 and worst_z <= 1.0 and dt < 10.0
        record_acceptance("L1 subproblem optimality", ok,
                          f"max(E_icl - E_grid)={worst_gap:.2e}, max|z|={worst_z:.6f}, {dt:.2f}s")
        assert ok

    def test_l2_optimality(self):
        t0 = time.perf_counter()
        err = grad = 0.0
        for rank in (2, 3):
            n = N_INSTANCES // 2
            J, r, u_ref, v, theta = _instances(200 + rank, rank, n)
            u = icl_l2_array(J, r, u_ref, v, theta)
            for i in range(n):
                Ji = J[:, i]
                A = np.outer(Ji, Ji) + theta[i] * np.eye(rank)
                b = theta[i] * (v[:, i] - u_ref[:, i]) - Ji * r[i]
                dense = u_ref[:, i] + np.linalg.solve(A, b)
                err = max(err, float(np.max(np.abs(u[:, i] - dense))))
                rho = r[i] + Ji @ (u[:, i] - u_ref[:, i])
                g = rho * Ji - theta[i] * (v[:, i] - u[:, i])
                grad = max(grad, float(np.max(np.abs(g))))
        dt = time.perf_counter() - t0
        ok = err <= 1e-10 and grad <= 1e-10 and dt < 10.0
        record_acceptance("L2 subproblem optimality", ok,
                          f"max dense err={err:.2e}, max |grad|={grad:.2e}, {dt:.2f}s")
        assert ok

    def test_appendix_consistency(self):
        J, r, u_ref, v, theta = _instances(300, 2, N_INSTANCES)
        comp = icl_l2_array(J, r, u_ref, v, theta)
        mat = icl_l2_matrix_array(J, r, u_ref, v, theta)
        err = float(np.max(np.abs(comp - mat)))
        # thresholding form written out directly vs the primal-dual route
        # (dual projection then primal recovery) exposed by the layer
        zhat = theta * (r + np.sum(J * (v - u_ref), axis=0)) / (np.sum(J * J, axis=0) + 1e-6)
        direct = v - zhat / np.maximum(np.abs(zhat), 1.0) * J / theta
        u, z, zh = icl_l1_array(J, r, u_ref, v, theta)
        recovered = v - z * J / theta
        bitwise = (np.array_equal(direct, u) and np.array_equal(recovered, u)
                   and np.array_equal(zh, zhat) and float(np.max(np.abs(z))) <= 1.0)
        ok = err <= 1e-12 and bitwise
        record_acceptance("Component vs matrix form, thresholding vs primal-dual", ok,
                          f"max |component - matrix|={err:.2e}, bit-identical={bitwise}")
        assert ok


class TestGradients:
    def test_gradcheck(self):
        t0 = time.perf_counter()
        worst, frac, lines = 0.0, 1.0, []
        for s, sharing in itertools.product((1, 2), ("theta1", "theta2")):
            params, I0, I1 = gradcheck_instance((16, 16), seed=0, sharing=sharing)
            cfg = TrainConfig(s=s, n_warp=2, n_iter=1, sharing=sharing)
            rep = grad_check(params, I0, I1, cfg, h=1e-5, tol=1e-3)
            worst = max(worst, rep.max_rel)
            frac = min(frac, rep.frac_ok)
            lines.append(f"s={s}/{sharing}: max={rep.max_rel:.1e} ok={rep.frac_ok:.3f}")
        dt = time.perf_counter() - t0
        ok = frac >= 0.99 and dt < 60.0
        record_acceptance("Gradient correctness", ok, "; ".join(lines) + f"; {dt:.1f}s")
        assert ok


@pytest.fixture(scope="module")
def synth_runs():
    pairs = make_dataset(GridDesc((64, 64)), 20, PairConfig(max_disp=2.0), seed=0)
    out = []
    for p in pairs:
        t0 = time.perf_counter()
        u, diag = register(p.I0, p.I1, SolverConfig())
        out.append((p, u, diag, time.perf_counter() - t0))
    return out


class TestSolver:
    def test_synthetic_recovery(self, synth_runs):
        epe, gains, times = [], [], []
        for p, u, _, dt in synth_runs:
            d = u.values - p.u_true.values
            epe.append(float(np.mean(np.sqrt(np.sum(d * d, axis=0)))))
            before = mean_dice(p.mask0.values, p.mask1.values)
            after = mean_dice(p.mask0.values, warp_nearest_array(p.mask1.values, u.values))
            gains.append(after - before)
            times.append(dt)
        ok = np.mean(epe) < 0.3 and min(gains) >= 0.15 and max(times) < 5.0
        record_acceptance("Synthetic recovery", ok,
                          f"mean EPE={np.mean(epe):.3f}, min Dice gain={min(gains):.3f}, "
                          f"max time={max(times):.2f}s")
        assert ok

    def test_energy_monotone(self, synth_runs):
        worst = -np.inf
        for _, _, diag, _ in synth_runs:
            keys = sorted({(r.level, r.warp) for r in diag.records})
            for lev, w in keys:
                e = [r.splitting_energy for r in diag.linearization(lev, w)]
                for a, b in zip(e, e[1:]):
                    worst = max(worst, (b - a) / abs(a))
        ok = worst <= 1e-6
        record_acceptance("Energy monotonicity", ok, f"largest relative increase={worst:.2e}")
        assert ok


# -- unrolled network ------------------------------------------------------------------

@pytest.fixture(scope="module")
def training_data():
    data = make_dataset(GridDesc((32, 32)), 250, PairConfig(max_disp=2.0), seed=0)
    return data[:200], data[200:]


def _held_out(params, cfg, test):
    losses, dices, base = [], [], []
    for i, p in enumerate(test):
        u = predict(params, p.I0.values, p.I1.values, cfg, noise_seed=i)
        losses.append(loss_array(u, p.I0.values, p.I1.values, cfg.alpha))
        dices.append(mean_dice(p.mask0.values, warp_nearest_array(p.mask1.values, u)))
        base.append(mean_dice(p.mask0.values, p.mask1.values))
    return float(np.mean(losses)), float(np.mean(dices)), float(np.mean(base))


_TRAINED = {}


def _trained(init, training_data):
    if init not in _TRAINED:
        train_set, test = training_data
        cfg = TrainConfig(init=init)
        params = CascadeParams.create(2, cfg.n_warp, cfg.n_iter, cfg.sharing, init,
                                      hidden=cfg.hidden, rng=np.random.default_rng(cfg.seed))
        t0 = time.perf_counter()
        params, _ = train([(p.I0, p.I1) for p in train_set], params, cfg)
        dt = time.perf_counter() - t0
        _TRAINED[init] = (params, cfg, _held_out(params, cfg, test), dt)
    return _TRAINED[init]


@pytest.mark.slow
class TestUnrolled:
    def test_training(self, training_data):
        _, test = training_data
        cfg = TrainConfig()
        zero = CascadeParams.create(2, cfg.n_warp, cfg.n_iter, cfg.sharing, cfg.init,
                                    hidden=cfg.hidden)
        loss0, _, _ = _held_out(zero, cfg, test)
        _, _, (loss, dice_after, dice_before), dt = _trained("learned", training_data)
        ratio = loss / loss0
        gain = dice_after - dice_before
        ok = ratio <= 0.7 and gain >= 0.10 and dt < 900.0
        record_acceptance("Unrolled training", ok,
                          f"held-out loss {loss0:.5f} -> {loss:.5f} (ratio {ratio:.3f}), "
                          f"Dice {dice_before:.4f} -> {dice_after:.4f} (+{gain:.4f}), {dt:.0f}s")
        assert ok

    def test_init_ordering(self, training_data):
        d = {k: _trained(k, training_data)[2][1] for k in ("learned", "zeros", "noise")}
        ok = d["learned"] >= d["zeros"] >= d["noise"] and d["learned"] - d["zeros"] >= 0.01
        record_acceptance("Initialization ordering", ok,
                          f"Dice learned={d['learned']:.4f}, zeros={d['zeros']:.4f}, "
                          f"noise={d['noise']:.4f}")
        assert ok


# -- metrics fixtures and CLI determinism ---------------------------------------------------

class TestFixtures:
    def test_metrics_fixtures(self):
        g = GridDesc((12, 12))
        m = np.zeros((12, 12))
        m[3:8, 2:9] = 1
        m[8:10, 4:6] = 2
        M = ScalarField(m, g)
        zero = VectorField.zeros(g)
        neg_id, _, _ = jacobian_report(zero)
        x = np.indices((8, 8), dtype=float)
        neg_fold, _, _ = jacobian_report(VectorField(np.stack([-2.0 * x[0], np.zeros((8, 8))])))
        vals = [dice(M, M, 1), dice(M, M, 2), hausdorff(M, M, 1), hausdorff(M, M, 2)]
        ok = vals == [1.0, 1.0, 0.0, 0.0] and neg_id == 0.0 and neg_fold == 100.0
        record_acceptance("Metrics fixtures", ok,
                          f"dice={vals[:2]}, hd={vals[2:]}, neg_pct identity={neg_id}, "
                          f"fold={neg_fold}")
        assert ok


def _snapshot(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def _cli_session(root, capsys):
    def run(*args):
        assert cli_main([str(a) for a in args]) == 0, args

    d = root / "pair"
    run("synth", "--dims", "32,32", "--seed", 11, "--outdir", d)
    run("synth", "--dims", "32,32", "--seed", 5, "--count", 3, "--outdir", root / "set")
    run("register", "--ref", d / "I0.vrf", "--flo", d / "I1.vrf", "--out", root / "u.vrf",
        "--diag", root / "diag.csv")
    run("register", "--ref", d / "I0.vrf", "--flo", d / "I1.vrf", "--init", "noise",
        "--s", 1, "--seed", 4, "--levels", 2, "--out", root / "u_noise.vrf")
    run("warp", "--image", d / "I1.vrf", "--field", root / "u.vrf", "--out", root / "w.vrf")
    run("warp", "--image", d / "mask1.vrf", "--field", root / "u.vrf", "--nearest",
        "--out", root / "wm.vrf")
    run("metrics", "--ref-mask", d / "mask0.vrf", "--warped-mask", root / "wm.vrf",
        "--field", root / "u.vrf", "--ref-image", d / "I0.vrf", "--warped-image", root / "w.vrf",
        "--out", root / "m.csv")
    run("train", "--data", root / "set", "--iters", 4, "--batch", 2, "--hidden", 4,
        "--seed", 3, "--out", root / "w.bin", "--log", root / "log.csv")
    run("register", "--ref", d / "I0.vrf", "--flo", d / "I1.vrf", "--init", "learned",
        "--weights", root / "w.bin", "--out", root / "u_learned.vrf")
    run("flowviz", "--field", root / "u.vrf", "--out", root / "u.ppm")
    capsys.readouterr()
    run("gradcheck", "--dims", "8,8", "--s", 2, "--seed", 2)
    (root / "gradcheck.txt").write_text(capsys.readouterr().out)
    return _snapshot(root)


class TestDeterminism:
    def test_cli_byte_identical(self, tmp_path, capsys):
        a = _cli_session(tmp_path / "a", capsys)
        b = _cli_session(tmp_path / "b", capsys)
        differ = sorted(k for k in a if a[k] != b.get(k))
        ok = a.keys() == b.keys() and not differ and len(a) > 20
        record_acceptance("CLI determinism", ok,
                          f"{len(a)} files compared, differing: {differ or 'none'}")
        assert ok
