"""Per-scene fitting of Gaussian splat parameters to a target field.

The objective is the mean squared render error plus
``lambda_sigma * sum(sigma_x + sigma_y) + lambda_alpha * sum(alpha)``.
Optimization runs Adam on unconstrained coordinates: centers in cell units,
``log sigma``, ``atanh rho`` and amplitudes scaled by the target maximum.
Amplitudes are projected back to ``>= 0`` after each step. Anchored
Gaussians keep their amplitude fixed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_coords
from .core import GaussianSet, GridField, GridSpec, StationSet
from .exceptions import DataError, NumericalError
from .sample import SamplingConfig, draw_points, sampling_distribution
from .splat import RenderConfig, render_gradient, render_points, render_selective

log = logging.getLogger(__name__)

_LOG_SIGMA_SPAN = 14.0  # log-sigma kept within +-14 of log(cell_size)
_ATANH_RHO_MAX = 7.0    # |rho| <= tanh(7) ~ 1 - 1.7e-6


@dataclass(frozen=True)
class FitConfig:
    """Optimizer and regularization settings.

    ``init_sigma=None`` means three cells of the target grid (twice the
    default suppression radius). ``patience`` is the window over which
    ``tol_rel`` is checked.
    """

    lambda_sigma: float = 1e-3
    lambda_alpha: float = 1e-4
    max_iters: int = 2000
    learning_rate: float = 1e-2
    lr_schedule: str = "cosine"
    grad_clip: float = 1.0
    init_sigma: float | None = None
    tol_rel: float = 1e-6
    patience: int = 50
    seed: int = 0
    freeze_anchor_all: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lambda_sigma < 0 or self.lambda_alpha < 0:
            raise DataError("regularization weights must be non-negative")
        if self.max_iters < 1:
            raise DataError("max_iters must be positive")
        if not self.learning_rate > 0 or not self.grad_clip > 0 or not self.tol_rel > 0:
            raise DataError("learning_rate, grad_clip and tol_rel must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise DataError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.init_sigma is not None and not self.init_sigma > 0:
            raise DataError("init_sigma must be positive")

    def sigma_for(self, spec: GridSpec) -> float:
        return 3.0 * spec.cell_size if self.init_sigma is None else float(self.init_sigma)


@dataclass
class FitResult:
    set: GaussianSet
    loss_history: list = field(default_factory=list)  # (iter, mse, reg_sigma, reg_alpha)
    stopped_reason: str = "max_iters"
    iterations: int = 0

    @property
    def final_mse(self) -> float:
        return self.loss_history[-1][1]

    def write_history(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("iter,mse,reg_sigma,reg_alpha,total\n")
            for it, mse, rs, ra in self.loss_history:
                fh.write(f"{it},{mse!r},{rs!r},{ra!r},{mse + rs + ra!r}\n")


def init_gaussians(points, anchors: StationSet | None, cfg: FitConfig = FitConfig(),
                   frame: GridSpec | None = None) -> GaussianSet:
    """One free Gaussian per sample point and one anchored Gaussian per
    ok-quality station with nonzero rainfall."""
    points = list(points or [])
    ok = [s for s in (anchors or []) if s.quality.value == "ok" and s.value > 0]
    if not points and not ok:
        raise DataError("init_gaussians needs sample points or a station with nonzero rainfall")
    if frame is None and cfg.init_sigma is None:
        raise DataError("init_sigma is required when no frame grid is given")
    sigma = cfg.sigma_for(frame) if frame is not None else cfg.init_sigma
    mx = [p.x for p in points] + [s.x for s in ok]
    my = [p.y for p in points] + [s.y for s in ok]
    alpha = [max(p.value, 0.0) for p in points] + [s.value for s in ok]
    n = len(mx)
    return GaussianSet(
        mu_x=mx, mu_y=my, sigma_x=np.full(n, sigma), sigma_y=np.full(n, sigma),
        rho=np.zeros(n), alpha=alpha,
        anchored=[False] * len(points) + [True] * len(ok), frame=frame,
    )


def regularization(gset: GaussianSet, cfg: FitConfig) -> tuple[float, float]:
    """Weighted penalty values ``(reg_sigma, reg_alpha)``; anchored amplitudes count."""
    return (cfg.lambda_sigma * float(np.sum(gset.sigma_x + gset.sigma_y)),
            cfg.lambda_alpha * float(np.sum(gset.alpha)))


def total_loss(gset: GaussianSet, target: GridField, cfg: FitConfig = FitConfig(),
               rcfg: RenderConfig = RenderConfig()):
    """Return ``(total, (mse, reg_sigma, reg_alpha))``."""
    obs = target.values
    valid = ~np.isnan(obs)
    if not valid.any():
        raise DataError("target has no non-missing cells")
    pred = render_selective(gset, target.spec, rcfg).values
    d = (pred - obs)[valid]
    mse = float(np.dot(d, d) / d.size)
    rs, ra = regularization(gset, cfg)
    return mse + rs + ra, (mse, rs, ra)


class _Adam:
    def __init__(self, size, cfg: FitConfig):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.b1, self.b2, self.eps = cfg.beta1, cfg.beta2, cfg.adam_eps

    def step(self, params, grad, lr):
        self.t += 1
        self.m *= self.b1
        self.m += (1 - self.b1) * grad
        self.v *= self.b2
        self.v += (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        params -= lr * mhat / (np.sqrt(vhat) + self.eps)


class _Packing:
    """Map a GaussianSet to the unconstrained optimizer vector and back."""

    def __init__(self, init: GaussianSet, spec: GridSpec, alpha_scale: float, freeze_all: bool):
        self.init = init
        self.h = spec.cell_size
        self.ascale = alpha_scale
        self.log_h = math.log(spec.cell_size)
        n = len(init)
        anch = init.anchored
        # trainable mask, columns: mx, my, log sx, log sy, atanh rho, alpha
        mask = np.ones((n, 6), dtype=bool)
        mask[anch, 5] = False
        if freeze_all:
            mask[anch, :] = False
        self.mask = mask

    def pack(self, g: GaussianSet) -> np.ndarray:
        return np.stack([
            g.mu_x / self.h, g.mu_y / self.h,
            np.log(g.sigma_x), np.log(g.sigma_y),
            np.arctanh(g.rho), g.alpha / self.ascale,
        ], axis=1)

    def clamp(self, P):
        P[:, 2:4] = np.clip(P[:, 2:4], self.log_h - _LOG_SIGMA_SPAN, self.log_h + _LOG_SIGMA_SPAN)
        P[:, 4] = np.clip(P[:, 4], -_ATANH_RHO_MAX, _ATANH_RHO_MAX)
        np.maximum(P[:, 5], 0.0, out=P[:, 5])

    def unpack(self, P) -> GaussianSet:
        init = self.init
        frozen = ~self.mask
        cols = [P[:, 0] * self.h, P[:, 1] * self.h, np.exp(P[:, 2]), np.exp(P[:, 3]),
                np.tanh(P[:, 4]), P[:, 5] * self.ascale]
        orig = [init.mu_x, init.mu_y, init.sigma_x, init.sigma_y, init.rho, init.alpha]
        # frozen entries are copied from the initial scene so they stay bitwise identical
        vals = [np.where(frozen[:, j], orig[j], cols[j]) for j in range(6)]
        return init.replace(mu_x=vals[0], mu_y=vals[1], sigma_x=vals[2], sigma_y=vals[3],
                            rho=vals[4], alpha=vals[5])

    def chain(self, g: GaussianSet, grad, cfg: FitConfig) -> np.ndarray:
        """Gradient of the total loss in packed coordinates, frozen entries zeroed."""
        G = np.stack([
            grad.d_mu_x * self.h,
            grad.d_mu_y * self.h,
            (grad.d_sigma_x + cfg.lambda_sigma) * g.sigma_x,
            (grad.d_sigma_y + cfg.lambda_sigma) * g.sigma_y,
            grad.d_rho * (1.0 - g.rho**2),
            (grad.d_alpha + cfg.lambda_alpha) * self.ascale,
        ], axis=1)
        G[~self.mask] = 0.0
        return G


def fit(init: GaussianSet, target: GridField, cfg: FitConfig = FitConfig(),
        rcfg: RenderConfig = RenderConfig()) -> FitResult:
    """Adam with global-norm gradient clipping on the regularized render loss.

    Returns the iterate with the lowest total loss seen. Stops early when the
    total loss changes by less than ``tol_rel`` (relative) over ``patience``
    iterations or drops to rounding level, and when the loss becomes
    non-finite (``diverged``).
    """
    valid = ~np.isnan(target.values)
    if not valid.any():
        raise DataError("target has no non-missing cells")
    if len(init) == 0:
        mse, _ = render_gradient(init, target, rcfg)
        return FitResult(init, [(0, mse, 0.0, 0.0)], "converged", 0)
    ascale = float(np.nanmax(np.abs(target.values)))
    if not ascale > 0:
        ascale = max(float(init.alpha.max()), 1.0)
    # below this the residual is rounding noise and Adam would only amplify it
    exact_tol = (1e-12 * ascale) ** 2
    pk = _Packing(init, target.spec, ascale, cfg.freeze_anchor_all)
    P = pk.pack(init)
    pk.clamp(P)
    adam = _Adam(P.shape, cfg)
    history = []
    totals = []
    best = (math.inf, init)
    reason = "max_iters"
    it = 0
    for it in range(cfg.max_iters + 1):
        gset = pk.unpack(P)
        try:
            mse, grad = render_gradient(gset, target, rcfg)
        except NumericalError:
            reason = "diverged"
            break
        rs, ra = regularization(gset, cfg)
        total = mse + rs + ra
        if not math.isfinite(total):
            reason = "diverged"
            break
        history.append((it, mse, rs, ra))
        totals.append(total)
        if total < best[0]:
            best = (total, gset)
        if total <= exact_tol:
            reason = "converged"
            break
        if it >= cfg.patience:
            prev = totals[it - cfg.patience]
            if abs(prev - total) <= cfg.tol_rel * abs(prev):
                reason = "converged"
                break
        if it == cfg.max_iters:
            break
        G = pk.chain(gset, grad, cfg)
        if not np.all(np.isfinite(G)):
            reason = "diverged"
            break
        norm = float(np.sqrt(np.sum(G * G)))
        if norm > cfg.grad_clip:
            G *= cfg.grad_clip / norm
        if cfg.lr_schedule == "cosine":
            lr = 0.5 * cfg.learning_rate * (1.0 + math.cos(math.pi * it / cfg.max_iters))
        else:
            lr = cfg.learning_rate
        adam.step(P, G, lr)
        pk.clamp(P)
    if not history:
        raise NumericalError("initial scene has a non-finite loss")
    log.debug("fit stopped after %d iterations (%s), best total %.6g", it, reason, best[0])
    return FitResult(best[1], history, reason, it)


class GaussianSplatRegressor(RegressorMixin, BaseEstimator):
    """Sample proposal points, anchor stations, fit Gaussians, render anywhere.

    ``fit(target, stations=None, surrogate=None)`` draws proposal points on
    ``surrogate`` (default: the target itself), builds the initial scene and
    optimizes it against ``target``. ``predict`` renders at ``(n, 2)`` query
    coordinates; :meth:`render` renders on any grid.
    """

    def __init__(self, k_points=6000, tau=0.1, w_grad=0.3, w_uniform=0.3, w_heavy=0.4,
                 temperature=1.0, nms_radius=None, lambda_sigma=1e-3, lambda_alpha=1e-4,
                 max_iters=2000, learning_rate=1e-2, lr_schedule="cosine", grad_clip=1.0,
                 init_sigma=None, tol_rel=1e-6, cutoff_k=5.0, seed=0, freeze_anchor_all=False,
                 threads=1):
        self.k_points = k_points
        self.tau = tau
        self.w_grad = w_grad
        self.w_uniform = w_uniform
        self.w_heavy = w_heavy
        self.temperature = temperature
        self.nms_radius = nms_radius
        self.lambda_sigma = lambda_sigma
        self.lambda_alpha = lambda_alpha
        self.max_iters = max_iters
        self.learning_rate = learning_rate
        self.lr_schedule = lr_schedule
        self.grad_clip = grad_clip
        self.init_sigma = init_sigma
        self.tol_rel = tol_rel
        self.cutoff_k = cutoff_k
        self.seed = seed
        self.freeze_anchor_all = freeze_anchor_all
        self.threads = threads

    def sampling_config(self) -> SamplingConfig:
        return SamplingConfig(tau=self.tau, w_grad=self.w_grad, w_uniform=self.w_uniform,
                              w_heavy=self.w_heavy, temperature=self.temperature,
                              k_points=self.k_points, nms_radius=self.nms_radius, seed=self.seed)

    def fit_config(self) -> FitConfig:
        return FitConfig(lambda_sigma=self.lambda_sigma, lambda_alpha=self.lambda_alpha,
                         max_iters=self.max_iters, learning_rate=self.learning_rate,
                         lr_schedule=self.lr_schedule, grad_clip=self.grad_clip,
                         init_sigma=self.init_sigma, tol_rel=self.tol_rel, seed=self.seed,
                         freeze_anchor_all=self.freeze_anchor_all)

    def render_config(self) -> RenderConfig:
        return RenderConfig(cutoff_k=self.cutoff_k, threads=self.threads)

    def fit(self, target: GridField, stations: StationSet | None = None,
            surrogate: GridField | None = None):
        if not isinstance(target, GridField):
            raise DataError("GaussianSplatRegressor.fit expects a GridField target")
        surrogate = target if surrogate is None else surrogate
        scfg = self.sampling_config()
        prob = sampling_distribution(surrogate, scfg)
        self.points_ = draw_points(prob, surrogate, scfg)
        fcfg = self.fit_config()
        init = init_gaussians(self.points_, stations, fcfg, frame=target.spec)
        self.result_ = fit(init, target, fcfg, self.render_config())
        self.scene_ = self.result_.set
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "scene_")
        return render_points(self.scene_, check_coords(X))

    def render(self, spec: GridSpec) -> GridField:
        check_is_fitted(self, "scene_")
        return render_selective(self.scene_, spec, self.render_config())
