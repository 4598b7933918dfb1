"""Unrolled variational registration network with hand-written reverse mode.

The network repeats warp -> closed-form intensity update -> residual conv
denoiser for ``n_warp * n_iter`` cascades. Penalty weights are learned
through ``theta = softplus(raw)``. Gradients come from an explicit tape of
forward intermediates; no autodiff framework is involved.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .denoise import ConvDenoiserWeights, conv_net_array, conv_net_backward
from .errors import ConfigError, VarRegError
from .grid import ScalarField, VectorField, check_same_grid
from .icl import DEFAULT_EPS, icl_l1_array, icl_l2_array, linearize_arrays
from .sampler import gradient_adjoint_array, gradient_array, warp_adjoint_array, warp_array

log = logging.getLogger(__name__)

SHARING = ("theta1", "theta2")
INIT_MODES = ("learned", "zeros", "noise")

# Smoothness-weight presets per dataset (2D Biobank, 2D ACDC, 3D CMR).
ALPHA_PRESETS = {"biobank": 0.1, "acdc": 0.05, "cmr3d": 0.0001}


class StaleTapeError(VarRegError):
    """A tape was replayed against inputs it was not recorded for."""


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y: float) -> float:
    return float(y + np.log(-np.expm1(-y)))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True, eq=False)
class CascadeParams:
    """Learnable state: raw penalty weights, denoisers and the optional init net."""

    sharing: str
    thetas: np.ndarray
    denoisers: tuple[ConvDenoiserWeights, ...]
    init_net: ConvDenoiserWeights | None = None

    def __post_init__(self):
        if self.sharing not in SHARING:
            raise ConfigError(f"sharing must be one of {SHARING}")
        thetas = np.array(self.thetas, dtype=np.float64).reshape(-1)
        thetas.setflags(write=False)
        object.__setattr__(self, "thetas", thetas)
        object.__setattr__(self, "denoisers", tuple(self.denoisers))
        if self.sharing == "theta1" and (len(thetas) != 1 or len(self.denoisers) != 1):
            raise ConfigError("theta1 sharing needs exactly one theta and one denoiser")
        if len(thetas) != len(self.denoisers):
            raise ConfigError("need one denoiser per theta")
        if not np.all(np.isfinite(thetas)):
            raise ConfigError("theta parameters must be finite")
        if self.init_net is not None and (self.init_net.in_channels != 2 or self.init_net.residual):
            raise ConfigError("init net must be a non-residual net on 2 image channels")

    @property
    def n_cascades(self) -> int:
        return len(self.thetas)

    def index(self, cascade: int) -> int:
        return 0 if self.sharing == "theta1" else cascade

    def theta(self, cascade: int) -> float:
        return float(softplus(self.thetas[self.index(cascade)]))

    def check_cascades(self, n_warp: int, n_iter: int):
        n = n_warp * n_iter
        if self.sharing == "theta2" and self.n_cascades != n:
            raise ConfigError(f"theta2 params hold {self.n_cascades} cascades, need {n}")

    @classmethod
    def create(cls, rank: int, n_warp: int, n_iter: int, sharing: str = "theta2",
               init: str = "learned", theta0: float = float(np.log(2.0)), hidden: int = 16,
               rng: np.random.Generator | None = None, scale: float = 0.0) -> "CascadeParams":
        """Fresh parameters.

        Without ``rng`` every conv weight is zero. With ``rng`` and
        ``scale == 0`` hidden layers are He-initialized and output layers
        zero, which computes the same function but trains every layer.
        A positive ``scale`` draws all weights from ``normal(0, scale^2)``.
        """
        n = 1 if sharing == "theta1" else n_warp * n_iter

        def net(**kw):
            if rng is None:
                return ConvDenoiserWeights.zeros(rank, hidden, **kw)
            if scale:
                return ConvDenoiserWeights.random(rank, rng, hidden, scale, **kw)
            return ConvDenoiserWeights.he(rank, rng, hidden, **kw)

        dens = tuple(net() for _ in range(n))
        init_net = net(in_channels=2, residual=False) if init == "learned" else None
        return cls(sharing, np.full(n, softplus_inv(theta0)), dens, init_net)

    # flat name -> array view, used by the optimizer, checkpoints and grad checks
    def arrays(self) -> dict[str, np.ndarray]:
        out = {"theta": self.thetas}
        for i, d in enumerate(self.denoisers):
            for j, (k, b) in enumerate(zip(d.kernels, d.biases)):
                out[f"denoiser.{i}.{j}.weight"] = k
                out[f"denoiser.{i}.{j}.bias"] = b
        if self.init_net is not None:
            for j, (k, b) in enumerate(zip(self.init_net.kernels, self.init_net.biases)):
                out[f"init.{j}.weight"] = k
                out[f"init.{j}.bias"] = b
        return out

    def replace(self, arrays: dict[str, np.ndarray]) -> "CascadeParams":
        def rebuild(net, prefix):
            n = len(net.kernels)
            return net.with_arrays([arrays[f"{prefix}.{j}.weight"] for j in range(n)],
                                   [arrays[f"{prefix}.{j}.bias"] for j in range(n)])

        dens = tuple(rebuild(d, f"denoiser.{i}") for i, d in enumerate(self.denoisers))
        init_net = None if self.init_net is None else rebuild(self.init_net, "init")
        return CascadeParams(self.sharing, arrays["theta"], dens, init_net)


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = ALPHA_PRESETS["acdc"]
    lr: float = 3e-2
    beta1: float = 0.9
    beta2: float = 0.999
    iterations: int = 500
    batch: int = 10
    seed: int = 0
    s: int = 2
    n_warp: int = 2
    n_iter: int = 1
    sharing: str = "theta2"
    init: str = "learned"
    noise_sigma: float = 0.5
    hidden: int = 16
    eps: float = DEFAULT_EPS
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.alpha < 0 or not self.lr > 0:
            raise ConfigError("alpha must be >= 0 and lr > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("betas must lie in (0, 1)")
        if self.iterations < 0 or self.batch < 1:
            raise ConfigError("iterations must be >= 0 and batch >= 1")
        if self.s not in (1, 2) or self.n_warp < 1 or self.n_iter < 1:
            raise ConfigError("invalid s / n_warp / n_iter")
        if self.sharing not in SHARING or self.init not in INIT_MODES:
            raise ConfigError("invalid sharing or init mode")


@dataclass
class _Step:
    cascade: int
    v_in: np.ndarray
    u: np.ndarray
    theta: float
    zhat: np.ndarray | None
    z: np.ndarray | None
    caches: list


@dataclass
class _Warp:
    u_ref: np.ndarray
    J: np.ndarray
    r: np.ndarray
    steps: list[_Step] = field(default_factory=list)


@dataclass
class Tape:
    params: CascadeParams
    I0: np.ndarray
    I1: np.ndarray
    s: int
    eps: float
    u_init: np.ndarray
    init_cache: list | None
    warps: list[_Warp]
    output: np.ndarray


def _as_array(x):
    return x.values if isinstance(x, (ScalarField, VectorField)) else np.asarray(x, dtype=np.float64)


def forward_array(I0: np.ndarray, I1: np.ndarray, params: CascadeParams, s: int,
                  n_warp: int, n_iter: int, u_init: np.ndarray | None = None,
                  eps: float = DEFAULT_EPS):
    """Array-level forward pass; returns ``(u, tape)``."""
    if s not in (1, 2):
        raise ConfigError("s must be 1 or 2")
    params.check_cascades(n_warp, n_iter)
    rank = I0.ndim
    init_cache = None
    if params.init_net is not None:
        u1, init_cache = conv_net_array(np.stack([I0, I1]), params.init_net, keep=True)
    elif u_init is not None:
        u1 = np.asarray(u_init, dtype=np.float64)
    else:
        u1 = np.zeros((rank,) + I0.shape)
    v = u1
    warps = []
    for w in range(n_warp):
        u_ref = v
        _, J, r = linearize_arrays(I0, I1, u_ref)
        rec = _Warp(u_ref, J, r)
        for k in range(n_iter):
            c = w * n_iter + k
            theta = params.theta(c)
            zhat = z = None
            if s == 1:
                u, z, zhat = icl_l1_array(J, r, u_ref, v, theta, eps)
            else:
                u = icl_l2_array(J, r, u_ref, v, theta)
            v_next, caches = conv_net_array(u, params.denoisers[params.index(c)], keep=True)
            rec.steps.append(_Step(c, v, u, theta, zhat, z, caches))
            v = v_next
        warps.append(rec)
    return v, Tape(params, I0, I1, s, eps, u1, init_cache, warps, v)


def vrnet_forward(I0, I1, params: CascadeParams, s: int, n_warp: int, n_iter: int,
                  u_init=None, eps: float = DEFAULT_EPS):
    if isinstance(I0, ScalarField):
        check_same_grid(I0, I1)
    u, tape = forward_array(_as_array(I0), _as_array(I1), params, s, n_warp, n_iter,
                            None if u_init is None else _as_array(u_init), eps)
    if isinstance(I0, ScalarField):
        return VectorField(u, I0.grid), tape
    return u, tape


# -- loss ----------------------------------------------------------------------

def loss_array(u: np.ndarray, I0: np.ndarray, I1: np.ndarray, alpha: float) -> float:
    sim = np.mean(np.abs(warp_array(I1, u) - I0))
    smooth = sum(np.sum(gradient_array(u[c]) ** 2) for c in range(u.shape[0])) / I0.size
    return float(sim + alpha * smooth)


def loss_grad_array(u: np.ndarray, I0: np.ndarray, I1: np.ndarray, alpha: float) -> np.ndarray:
    n = I0.size
    diff = warp_array(I1, u) - I0
    _, g = warp_adjoint_array(I1, u, np.sign(diff) / n, need_image=False)
    for c in range(u.shape[0]):
        g[c] += (2.0 * alpha / n) * gradient_adjoint_array(gradient_array(u[c]))
    return g


def unsupervised_loss(u: VectorField, I0: ScalarField, I1: ScalarField, alpha: float) -> float:
    """Mean absolute intensity error after warping plus ``alpha`` times the mean squared gradient."""
    check_same_grid(u, I0, I1)
    if alpha < 0:
        raise ConfigError("alpha must be non-negative")
    return loss_array(u.values, I0.values, I1.values, alpha)


# -- reverse pass ---------------------------------------------------------------

def _icl_l1_backward(gu, J, r, u_ref, v, theta, eps, zhat, z):
    a = np.sum(J * J, axis=0)
    den = a + eps
    rho_v = r + np.sum(J * (v - u_ref), axis=0)
    q = np.sum(J * gu, axis=0)
    gv = gu.copy()
    gJ = -(z / theta) * gu
    g_theta = np.sum(z * q) / theta ** 2
    # saturated samples (|zhat| >= 1) pass no gradient through zhat
    gzhat = np.where(np.abs(zhat) < 1.0, -q / theta, 0.0)
    g_theta += np.sum(gzhat * rho_v / den)
    grho = gzhat * theta / den
    gJ += (2.0 * (-gzhat * zhat / den)) * J
    gJ += grho * (v - u_ref)
    gv += grho * J
    g_uref = -grho * J
    return gv, g_uref, gJ, grho, g_theta


def _icl_l2_backward(gu, J, r, u_ref, v, theta):
    # u = v - J s / D with s = <J, v - u_ref> + r and D = theta + |J|^2
    w = v - u_ref
    D = theta + np.sum(J * J, axis=0)
    s = np.sum(J * w, axis=0) + r
    q = np.sum(J * gu, axis=0)
    gs = -q / D
    gD = q * s / D ** 2
    gv = gu + gs * J
    gJ = -(s / D) * gu + gs * w + 2.0 * gD * J
    return gv, -gs * J, gJ, gs, float(np.sum(gD))


def _zero_grads(params: CascadeParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(a) for k, a in params.arrays().items()}


def backward_array(tape: Tape, g_out: np.ndarray) -> dict[str, np.ndarray]:
    """Propagate ``dL/du`` at the network output back to every parameter."""
    params = tape.params
    grads = _zero_grads(params)
    gv = g_out
    for rec in reversed(tape.warps):
        gJ = np.zeros_like(rec.J)
        gr = np.zeros_like(rec.r)
        g_uref = np.zeros_like(rec.u_ref)
        for st in reversed(rec.steps):
            i = params.index(st.cascade)
            net = params.denoisers[i]
            gu, gk, gb = conv_net_backward(gv, st.u, net, st.caches)
            for j in range(len(gk)):
                grads[f"denoiser.{i}.{j}.weight"] += gk[j]
                grads[f"denoiser.{i}.{j}.bias"] += gb[j]
            if tape.s == 1:
                gv, gu_ref, gJ_k, gr_k, g_theta = _icl_l1_backward(
                    gu, rec.J, rec.r, rec.u_ref, st.v_in, st.theta, tape.eps, st.zhat, st.z)
            else:
                gv, gu_ref, gJ_k, gr_k, g_theta = _icl_l2_backward(
                    gu, rec.J, rec.r, rec.u_ref, st.v_in, st.theta)
            g_uref += gu_ref
            gJ += gJ_k
            gr += gr_k
            grads["theta"][i] += g_theta * sigmoid(params.thetas[i])
        g_I1w = gr + gradient_adjoint_array(gJ)
        _, g_warp = warp_adjoint_array(tape.I1, rec.u_ref, g_I1w, need_image=False)
        gv = gv + g_uref + g_warp
    if params.init_net is not None:
        _, gk, gb = conv_net_backward(gv, np.stack([tape.I0, tape.I1]), params.init_net,
                                      tape.init_cache)
        for j in range(len(gk)):
            grads[f"init.{j}.weight"] += gk[j]
            grads[f"init.{j}.bias"] += gb[j]
    return grads


def vrnet_backward(tape: Tape, I0, I1, alpha: float) -> dict[str, np.ndarray]:
    """Gradients of the unsupervised loss of ``tape``'s output w.r.t. all parameters."""
    a0, a1 = _as_array(I0), _as_array(I1)
    if not (np.array_equal(a0, tape.I0) and np.array_equal(a1, tape.I1)):
        raise StaleTapeError("tape was recorded for a different image pair")
    return backward_array(tape, loss_grad_array(tape.output, a0, a1, alpha))


def loss_and_grad(I0: np.ndarray, I1: np.ndarray, params: CascadeParams, s: int, n_warp: int,
                  n_iter: int, alpha: float, u_init=None, eps: float = DEFAULT_EPS):
    u, tape = forward_array(I0, I1, params, s, n_warp, n_iter, u_init, eps)
    return loss_array(u, I0, I1, alpha), backward_array(tape, loss_grad_array(u, I0, I1, alpha))


# -- optimizer -------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              cfg: TrainConfig):
    """One bias-corrected Adam update; returns new ``(params, state)``."""
    if params.keys() != grads.keys():
        raise ConfigError("parameter and gradient names differ")
    t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape mismatch for {name}")
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1.0 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_p[name] = p - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(t, new_m, new_v)


# -- training -----------------------------------------------------------------------

def noise_init(shape, sigma: float, seed) -> np.ndarray:
    return sigma * np.random.default_rng(seed).standard_normal(shape)


def _pair_arrays(pair):
    a, b = pair[0], pair[1]
    return _as_array(a), _as_array(b)


def batch_loss_and_grad(batch, params: CascadeParams, cfg: TrainConfig, noise_seeds=None):
    total = 0.0
    acc = _zero_grads(params)
    for idx, (I0, I1) in enumerate(batch):
        u_init = None
        if cfg.init == "noise":
            u_init = noise_init((I0.ndim,) + I0.shape, cfg.noise_sigma, noise_seeds[idx])
        loss, g = loss_and_grad(I0, I1, params, cfg.s, cfg.n_warp, cfg.n_iter, cfg.alpha,
                                u_init, cfg.eps)
        total += loss
        for k in acc:
            acc[k] += g[k]
    n = len(batch)
    return total / n, {k: g / n for k, g in acc.items()}


def train(pairs, params: CascadeParams, cfg: TrainConfig, callback=None):
    """Adam on the mean batch loss; returns ``(params, loss_history)``."""
    if not pairs:
        raise ConfigError("training set is empty")
    data = [_pair_arrays(p) for p in pairs]
    shape = data[0][0].shape
    if any(a.shape != shape or b.shape != shape for a, b in data):
        raise ConfigError("all training pairs must share one grid")
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    flat = params.arrays()
    history = []
    order = np.empty(0, dtype=np.intp)
    for it in range(cfg.iterations):
        if len(order) < cfg.batch:
            order = np.concatenate([order, rng.permutation(len(data))])
        idx, order = order[:cfg.batch], order[cfg.batch:]
        seeds = [(cfg.seed, it, int(i)) for i in idx]
        loss, grads = batch_loss_and_grad([data[i] for i in idx], params, cfg, seeds)
        flat, state = adam_step(flat, grads, state, cfg)
        params = params.replace(flat)
        history.append(loss)
        if callback is not None:
            callback(it, loss, params)
        if it % 50 == 0:
            log.info("iter %d loss %.5f theta %s", it, loss,
                     np.array2string(softplus(params.thetas), precision=4))
    return params, history


def predict(params: CascadeParams, I0: np.ndarray, I1: np.ndarray, cfg: TrainConfig,
            noise_seed=0) -> np.ndarray:
    u_init = None
    if cfg.init == "noise":
        u_init = noise_init((I0.ndim,) + I0.shape, cfg.noise_sigma, noise_seed)
    return forward_array(I0, I1, params, cfg.s, cfg.n_warp, cfg.n_iter, u_init, cfg.eps)[0]


# -- gradient check ---------------------------------------------------------------------

@dataclass
class GradCheckReport:
    groups: dict[str, dict[str, float]]
    max_rel: float
    mean_rel: float
    frac_ok: float
    n_params: int
    tol: float

    def lines(self):
        for name, g in self.groups.items():
            yield (f"{name:<16s} n={int(g['n']):6d} max_rel={g['max']:.3e} "
                   f"mean_rel={g['mean']:.3e} ok={g['frac_ok']:.4f}")
        yield (f"{'all':<16s} n={self.n_params:6d} max_rel={self.max_rel:.3e} "
               f"mean_rel={self.mean_rel:.3e} ok={self.frac_ok:.4f}")


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-10) -> np.ndarray:
    """``|a - b| / max(|a|, |b|, floor)``; two zeros give zero error."""
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(params: CascadeParams, I0, I1, cfg: TrainConfig, h: float = 1e-5,
               tol: float = 1e-3, u_init=None) -> GradCheckReport:
    """Central differences on every parameter against the analytic reverse pass."""
    a0, a1 = _as_array(I0), _as_array(I1)
    if max(a0.shape) > 32:
        raise ConfigError("grad_check is meant for grids of at most 32 per axis")
    _, analytic = loss_and_grad(a0, a1, params, cfg.s, cfg.n_warp, cfg.n_iter, cfg.alpha,
                                u_init, cfg.eps)
    flat = params.arrays()

    def loss_at(name, idx, delta):
        arr = flat[name].copy()
        arr[idx] += delta
        p = params.replace({**flat, name: arr})
        u, _ = forward_array(a0, a1, p, cfg.s, cfg.n_warp, cfg.n_iter, u_init, cfg.eps)
        return loss_array(u, a0, a1, cfg.alpha)

    groups, all_err = {}, []
    for name, arr in flat.items():
        numeric = np.zeros(arr.shape)
        for idx in np.ndindex(arr.shape):
            numeric[idx] = (loss_at(name, idx, h) - loss_at(name, idx, -h)) / (2.0 * h)
        err = relative_error(analytic[name], numeric).ravel()
        all_err.append(err)
        group = name.rsplit(".", 2)[0] if name != "theta" else "theta"
        groups.setdefault(group, []).append(err)
    stats = {}
    for g, errs in groups.items():
        e = np.concatenate(errs)
        stats[g] = {"n": e.size, "max": float(e.max()), "mean": float(e.mean()),
                    "frac_ok": float(np.mean(e < tol))}
    e = np.concatenate(all_err)
    return GradCheckReport(stats, float(e.max()), float(e.mean()), float(np.mean(e < tol)),
                           int(e.size), tol)


def gradcheck_instance(dims, seed: int = 0, sharing: str = "theta2", hidden: int = 4,
                       n_warp: int = 2, n_iter: int = 1, theta0: float = 0.05,
                       scale: float = 0.1):
    """Small smooth image pair plus random-weight parameters for finite-difference checks.

    Returns ``(params, I0, I1)``. The moving image is the reference pulled
    back by a smooth field of unit amplitude.
    """
    from scipy.ndimage import gaussian_filter

    dims = tuple(int(d) for d in dims)
    rng = np.random.default_rng(seed)
    I0 = gaussian_filter(rng.random(dims), 1.5)
    I0 = (I0 - I0.min()) / (I0.max() - I0.min())
    u = np.stack([gaussian_filter(rng.standard_normal(dims), 4.0) for _ in dims])
    u *= 1.0 / np.abs(u).max()
    I1 = warp_array(I0, -u)
    params = CascadeParams.create(len(dims), n_warp, n_iter, sharing, "learned", theta0=theta0,
                                  hidden=hidden, rng=rng, scale=scale)
    return params, I0, I1
