"""Command-line entry point: ``varreg <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error (missing or malformed
input, grid mismatch), 3 numerical failure (non-finite values, failed
gradient check).
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import io as _io
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import io as vio
from .denoise import DenoiserSpec
from .errors import ConfigError, NumericalError, VarRegError
from .grid import GridDesc, ScalarField, VectorField, check_same_grid
from .metrics import evaluate
from .sampler import warp_mask_nearest, warp_scalar
from .solver import InitStrategy, SolverConfig, register
from .synth import PairConfig, make_dataset, make_pair
from .unroll import (CascadeParams, TrainConfig, grad_check, gradcheck_instance, train)

log = logging.getLogger("varreg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
FIELD_EXT = ".vrf"
PAIR_FILES = ("I0", "I1", "mask0", "mask1", "u_true")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _int_list(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if len(vals) not in (2, 3) or any(v < 2 for v in vals):
        raise argparse.ArgumentTypeError(f"expected 2 or 3 dims >= 2, got {text!r}")
    return vals


def _float_list(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if len(vals) not in (2, 3) or not all(v > 0 and math.isfinite(v) for v in vals):
        raise argparse.ArgumentTypeError(f"expected 2 or 3 positive spacings, got {text!r}")
    return vals


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return v


def _nonneg_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text!r}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="varreg", description="Variational deformable image registration.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("register", help="register a floating image to a reference")
    r.add_argument("--ref", required=True)
    r.add_argument("--flo", required=True)
    r.add_argument("--s", type=int, choices=(1, 2), default=2)
    r.add_argument("--theta", type=float, default=0.01)
    r.add_argument("--denoiser", choices=("tv", "gauss", "conv", "id"), default="tv")
    r.add_argument("--tv-weight", type=float, default=0.1)
    r.add_argument("--tv-iters", type=_positive_int, default=200)
    r.add_argument("--sigma", type=float, default=1.0)
    r.add_argument("--weights", help="denoiser weights (conv) or cascade file (learned init)")
    r.add_argument("--nwarp", type=_positive_int, default=3)
    r.add_argument("--niter", type=_positive_int, default=2)
    r.add_argument("--levels", type=_positive_int, default=3)
    r.add_argument("--init", choices=("zeros", "noise", "learned"), default="zeros")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.add_argument("--diag")

    w = sub.add_parser("warp", help="resample an image or mask by a displacement field")
    w.add_argument("--image", required=True)
    w.add_argument("--field", required=True)
    w.add_argument("--out", required=True)
    w.add_argument("--nearest", action="store_true")

    m = sub.add_parser("metrics", help="overlap and deformation-quality report")
    m.add_argument("--ref-mask", required=True)
    m.add_argument("--warped-mask", required=True)
    m.add_argument("--field", required=True)
    m.add_argument("--spacing", type=_float_list)
    m.add_argument("--ref-image")
    m.add_argument("--warped-image")
    m.add_argument("--out", required=True)

    s = sub.add_parser("synth", help="write seeded synthetic registration pairs")
    s.add_argument("--dims", type=_int_list, required=True)
    s.add_argument("--max-disp", type=float, default=2.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=_positive_int, default=1)
    s.add_argument("--outdir", required=True)

    t = sub.add_parser("train", help="train the unrolled network on a synth directory")
    t.add_argument("--data", required=True)
    t.add_argument("--s", type=int, choices=(1, 2), default=2)
    t.add_argument("--nwarp", type=_positive_int, default=2)
    t.add_argument("--niter", type=_positive_int, default=1)
    t.add_argument("--sharing", choices=("theta1", "theta2"), default="theta2")
    t.add_argument("--init", choices=("learned", "zeros", "noise"), default="learned")
    t.add_argument("--hidden", type=_positive_int, default=16)
    t.add_argument("--alpha", type=float, default=0.05)
    t.add_argument("--lr", type=float, default=3e-2)
    t.add_argument("--iters", type=_nonneg_int, default=500)
    t.add_argument("--batch", type=_positive_int, default=10)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--log")

    g = sub.add_parser("gradcheck", help="finite-difference check of the reverse pass")
    g.add_argument("--dims", type=_int_list, required=True)
    g.add_argument("--s", type=int, choices=(1, 2), default=2)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--sharing", choices=("theta1", "theta2"), default="theta2")
    g.add_argument("--hidden", type=_positive_int, default=4)

    f = sub.add_parser("flowviz", help="render a 2D field as an HSV colour image")
    f.add_argument("--field", required=True)
    f.add_argument("--out", required=True)
    return p


# -- helpers ---------------------------------------------------------------------

def _write_csv(path, header, rows) -> None:
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    vio.atomic_write(path, buf.getvalue().encode("ascii"))


def _num(x: float) -> str:
    return repr(float(x))


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {what}")


def _pair_dirs(root: Path) -> list[Path]:
    if (root / f"I0{FIELD_EXT}").exists():
        return [root]
    dirs = sorted(d for d in root.iterdir() if d.is_dir() and (d / f"I0{FIELD_EXT}").exists())
    if not dirs:
        raise FileNotFoundError(f"{root}: no I0{FIELD_EXT} pairs found")
    return dirs


# -- commands ------------------------------------------------------------------------

def cmd_register(a) -> int:
    I0 = vio.read_scalar(a.ref)
    I1 = vio.read_scalar(a.flo)
    check_same_grid(I0, I1)
    kind = {"gauss": "gaussian", "id": "identity"}.get(a.denoiser, a.denoiser)
    conv = None
    if kind == "conv":
        if not a.weights:
            raise ConfigError("--denoiser conv needs --weights")
        conv = vio.load_denoiser(a.weights)
    spec = DenoiserSpec(kind, a.tv_weight, a.tv_iters, a.sigma, conv)
    if a.init == "learned":
        if not a.weights:
            raise ConfigError("--init learned needs --weights with an init network")
        params, _ = vio.load_cascade(a.weights)
        if params.init_net is None:
            raise ConfigError(f"{a.weights}: cascade has no init network")
        init = InitStrategy("learned", learned_weights=params.init_net)
    else:
        init = InitStrategy(a.init)
    cfg = SolverConfig(s=a.s, theta=a.theta, denoiser=spec, n_warp=a.nwarp, n_iter=a.niter,
                       levels=a.levels, init=init, seed=a.seed)
    u, diag = register(I0, I1, cfg)
    _require_finite(u.values, "displacement")
    vio.write_field(a.out, u)
    if a.diag:
        _write_csv(a.diag, diag.columns(),
                   [[r.level, r.warp, r.iter, _num(r.splitting_energy), _num(r.data_energy),
                     _num(r.max_disp), _num(r.max_gap)] for r in diag.records])
    return EXIT_OK


def cmd_warp(a) -> int:
    img = vio.read_scalar(a.image)
    u = vio.read_vector(a.field)
    if img.grid.dims != u.grid.dims:
        raise ConfigError(f"image dims {img.grid.dims} != field dims {u.grid.dims}")
    u = VectorField(u.values, img.grid)
    out = warp_mask_nearest(img, u) if a.nearest else warp_scalar(img, u)
    vio.write_scalar(a.out, out)
    return EXIT_OK


def cmd_metrics(a) -> int:
    ref = vio.read_scalar(a.ref_mask)
    warped = vio.read_scalar(a.warped_mask)
    u = vio.read_vector(a.field)
    if not (ref.grid.dims == warped.grid.dims == u.grid.dims):
        raise ConfigError("mask and field dims differ")
    spacing = a.spacing if a.spacing is not None else u.grid.spacing
    if len(spacing) != u.grid.rank:
        raise ConfigError("spacing length does not match the field rank")
    grid = GridDesc(u.grid.dims, spacing)
    ref, warped = ScalarField(ref.values, grid), ScalarField(warped.values, grid)
    u = VectorField(u.values, grid)
    ref_img = warped_img = None
    if (a.ref_image is None) != (a.warped_image is None):
        raise ConfigError("--ref-image and --warped-image go together")
    if a.ref_image is not None:
        ref_img = ScalarField(vio.read_scalar(a.ref_image).values, grid)
        warped_img = ScalarField(vio.read_scalar(a.warped_image).values, grid)
    rep = evaluate(ref, warped, u, spacing, ref_img, warped_img)
    rows = []
    for lab in rep.labels:
        rows.append(["dice", lab, _num(rep.dice[lab])])
    for lab in rep.labels:
        rows.append(["hd", lab, _num(rep.hausdorff_mm[lab])])
    rows.append(["mean_dice", "", _num(rep.mean_dice)])
    rows.append(["neg_jacobian_pct", "", _num(rep.neg_jacobian_pct)])
    rows.append(["mean_grad_jacobian", "", _num(rep.mean_grad_jacobian)])
    rows.append(["mae", "", _num(rep.mae)])
    _write_csv(a.out, ("metric", "label", "value"), rows)
    return EXIT_OK


def _write_pair(outdir: Path, pair) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    for name in PAIR_FILES:
        vio.write_field(outdir / f"{name}{FIELD_EXT}", getattr(pair, name))


def cmd_synth(a) -> int:
    grid = GridDesc(a.dims)
    cfg = PairConfig(max_disp=a.max_disp)
    out = Path(a.outdir)
    if a.count == 1:
        _write_pair(out, make_pair(grid, cfg, a.seed))
    else:
        for i, pair in enumerate(make_dataset(grid, a.count, cfg, a.seed)):
            _write_pair(out / f"pair_{i:04d}", pair)
    return EXIT_OK


def cmd_train(a) -> int:
    dirs = _pair_dirs(Path(a.data))
    pairs = [(vio.read_scalar(d / f"I0{FIELD_EXT}"), vio.read_scalar(d / f"I1{FIELD_EXT}"))
             for d in dirs]
    rank = pairs[0][0].grid.rank
    cfg = TrainConfig(alpha=a.alpha, lr=a.lr, iterations=a.iters, batch=a.batch, seed=a.seed,
                      s=a.s, n_warp=a.nwarp, n_iter=a.niter, sharing=a.sharing, init=a.init,
                      hidden=a.hidden)
    params = CascadeParams.create(rank, a.nwarp, a.niter, a.sharing, a.init, hidden=a.hidden,
                                  rng=np.random.default_rng(a.seed))
    params, history = train(pairs, params, cfg)
    if not np.all(np.isfinite(history)):
        raise NumericalError("training loss became non-finite")
    for name, arr in params.arrays().items():
        _require_finite(arr, name)
    vio.save_cascade(a.out, params, cfg)
    if a.log:
        _write_csv(a.log, ("iter", "loss"), [[i, _num(l)] for i, l in enumerate(history)])
    return EXIT_OK


def cmd_gradcheck(a) -> int:
    if len(a.dims) != 2:
        raise ConfigError("gradcheck runs on 2D grids")
    params, I0, I1 = gradcheck_instance(a.dims, a.seed, a.sharing, a.hidden)
    cfg = TrainConfig(s=a.s, n_warp=2, n_iter=1, sharing=a.sharing)
    rep = grad_check(params, I0, I1, cfg)
    for line in rep.lines():
        print(line)
    print(f"max_rel {rep.max_rel:.6e}")
    print(f"mean_rel {rep.mean_rel:.6e}")
    if not rep.max_rel < 1e-3:
        print(f"varreg: error: max relative error {rep.max_rel:.3e} >= 1e-3", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_flowviz(a) -> int:
    u = vio.read_vector(a.field)
    vio.flow_to_hsv_ppm(u, a.out)
    return EXIT_OK


COMMANDS = {
    "register": cmd_register, "warp": cmd_warp, "metrics": cmd_metrics, "synth": cmd_synth,
    "train": cmd_train, "gradcheck": cmd_gradcheck, "flowviz": cmd_flowviz,
}


def _thread_limit():
    raw = os.environ.get("VARREG_THREADS")
    if raw is None or raw == "":
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"VARREG_THREADS must be a positive integer, got {raw!r}")
    if n < 1:
        raise UsageError(f"VARREG_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _fail(code: int, msg: str) -> int:
    print("varreg: error: " + " ".join(str(msg).split()), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        limit = _thread_limit()
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        with limit, np.errstate(over="ignore", invalid="ignore"):
            return COMMANDS[args.command](args)
    except NumericalError as exc:
        return _fail(EXIT_NUMERIC, exc)
    except (VarRegError, ValueError) as exc:
        return _fail(EXIT_DATA, exc)
    except OSError as exc:
        return _fail(EXIT_DATA, f"{exc.strerror or exc}: {exc.filename or ''}".strip())


if __name__ == "__main__":
    sys.exit(main())
