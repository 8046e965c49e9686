"""Classical scattered-data interpolation: Barnes, ordinary kriging and
multiquadric RBF.

Each method exists as a scikit-learn style regressor on ``(n, 2)``
coordinate arrays and as a grid function taking a :class:`StationSet`.
Stations are put into a canonical order before any summation, so results are
bitwise independent of input order.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.optimize import least_squares
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist, pdist
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_coords, check_station_values
from .core import GridField, GridSpec, StationSet
from .exceptions import DataError, NumericalError

BARNES_CUTOFF = 8.0


def _canonical_order(X, y, ids=None):
    order = np.lexsort((y, X[:, 1], X[:, 0]))
    ids = None if ids is None else [ids[i] for i in order]
    return X[order], y[order], ids


def mean_nn_distance(X: np.ndarray) -> float:
    """Mean distance from each point to its nearest neighbour."""
    if len(X) < 2:
        raise DataError("need at least two points for a nearest-neighbour distance")
    d, _ = cKDTree(X).query(X, k=2)
    return float(d[:, 1].mean())


def default_width(X: np.ndarray, spec: GridSpec | None) -> float:
    """Mean nearest-neighbour spacing, or the grid diagonal for a single station."""
    if len(X) >= 2:
        w = mean_nn_distance(X)
        if w > 0:
            return w
    if spec is not None:
        xmin, xmax, ymin, ymax = spec.extent()
        return math.hypot(xmax - xmin, ymax - ymin)
    return 1.0


def _predict_tiled(fn, Xq: np.ndarray, threads: int, block: int = 65536) -> np.ndarray:
    """Evaluate ``fn`` on row blocks of ``Xq``; each block is written once."""
    out = np.empty(len(Xq))
    starts = list(range(0, len(Xq), block))

    def run(s):
        out[s:s + block] = fn(Xq[s:s + block])

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(run, starts))
    else:
        for s in starts:
            run(s)
    return out


def _grid_queries(spec: GridSpec) -> np.ndarray:
    X, Y = spec.cell_centers()
    return np.column_stack([X.ravel(), Y.ravel()])


# --------------------------------------------------------------------------
# Barnes
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BarnesConfig:
    """Gaussian kernel width ``sigma``; later passes use ``gamma_refine * sigma``."""

    sigma: float
    passes: int = 1
    gamma_refine: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise DataError("Barnes sigma must be positive")
        if self.passes < 1:
            raise DataError("Barnes passes must be >= 1")
        if not 0 < self.gamma_refine <= 1:
            raise DataError("gamma_refine must lie in (0, 1]")


def _barnes_pass(Xs, vals, Xq, sigma):
    """Weighted mean per query (NaN where no station is in reach) and weight sums.

    Weights are normalized before the dot product so a lone station
    reproduces its value exactly.
    """
    d2 = cdist(Xq, Xs, "sqeuclidean")
    w = np.exp(-d2 / (2.0 * sigma * sigma))
    w[d2 > (BARNES_CUTOFF * sigma) ** 2] = 0.0
    den = w.sum(axis=1)
    reach = den > 0
    w[reach] /= den[reach, None]
    est = np.full(len(Xq), np.nan)
    est[reach] = w[reach] @ vals
    return est, den


class BarnesInterpolator(RegressorMixin, BaseEstimator):
    """Successive-correction Gaussian-weighted interpolation.

    Pass 1 is the normalized Gaussian-weighted mean of station values. Each
    further pass adds the same weighted mean of the station residuals with the
    kernel narrowed to ``gamma_refine * sigma``. Query points farther than
    ``8 * sigma`` from every station get ``NaN``.

    Parameters
    ----------
    sigma : float or None
        Kernel width in grid units. ``None`` uses the mean nearest-neighbour
        station spacing.
    passes : int
    gamma_refine : float
    threads : int
    """

    def __init__(self, sigma=None, passes=1, gamma_refine=1.0, threads=1):
        self.sigma = sigma
        self.passes = passes
        self.gamma_refine = gamma_refine
        self.threads = threads

    def fit(self, X, y):
        X = check_coords(X)
        y = check_station_values(y, len(X))
        if len(X) == 0:
            raise DataError("Barnes needs at least one station")
        self.X_, self.y_, _ = _canonical_order(X, y)
        sigma = self.sigma if self.sigma is not None else default_width(self.X_, None)
        self.config_ = BarnesConfig(float(sigma), self.passes, self.gamma_refine)
        # residual corrections are computed from station-point estimates
        corrections = []
        est = self._first_pass(self.X_)[0]
        for _ in range(1, self.config_.passes):
            resid = self.y_ - est
            corrections.append(resid)
            est = est + self._correction(self.X_, resid)
        self.corrections_ = corrections
        return self

    def _first_pass(self, Xq):
        return _barnes_pass(self.X_, self.y_, Xq, self.config_.sigma)

    def _correction(self, Xq, resid):
        sig = self.config_.gamma_refine * self.config_.sigma
        est, _ = _barnes_pass(self.X_, resid, Xq, sig)
        return np.nan_to_num(est, nan=0.0)

    def _predict_block(self, Xq):
        est, _ = self._first_pass(Xq)
        for resid in self.corrections_:
            est = est + self._correction(Xq, resid)
        return est

    def predict(self, X):
        check_is_fitted(self, "X_")
        return _predict_tiled(self._predict_block, check_coords(X), self.threads, block=4096)


def barnes(stations: StationSet, target: GridSpec, cfg: BarnesConfig | None = None, threads: int = 1) -> GridField:
    X, y, _ = stations.ok_arrays()
    if len(X) == 0:
        raise DataError("Barnes needs at least one ok-quality station")
    if cfg is None:
        cfg = BarnesConfig(default_width(X, target))
    est = BarnesInterpolator(cfg.sigma, cfg.passes, cfg.gamma_refine, threads).fit(X, y)
    return GridField(target, est.predict(_grid_queries(target)).reshape(target.shape), precip=False)


# --------------------------------------------------------------------------
# variogram + ordinary kriging
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class VariogramModel:
    """Isotropic variogram. ``sill`` is the total sill (nugget included).

    ``range`` is the practical range: the exponential model reaches 95% of
    the partial sill there, the spherical model reaches it exactly.
    """

    kind: str = "exponential"
    nugget: float = 0.0
    sill: float = 1.0
    range: float = 1.0
    degenerate: bool = False

    def __post_init__(self):
        if self.kind not in ("exponential", "spherical"):
            raise DataError(f"unknown variogram kind {self.kind!r}")
        if self.nugget < 0 or not self.sill > 0 or not self.range > 0:
            raise DataError("variogram needs nugget >= 0, sill > 0, range > 0")
        if self.nugget > self.sill:
            raise DataError("variogram nugget exceeds sill")

    def __call__(self, h):
        h = np.asarray(h, dtype=float)
        psill = self.sill - self.nugget
        if self.kind == "exponential":
            g = self.nugget + psill * (1.0 - np.exp(-3.0 * h / self.range))
        else:
            s = np.minimum(h / self.range, 1.0)
            g = self.nugget + psill * (1.5 * s - 0.5 * s**3)
        return np.where(h > 0, g, 0.0)


def empirical_variogram(X, y, n_bins: int = 15, max_lag: float | None = None):
    """Binned semivariance ``0.5 * mean((z_i - z_j)^2)``.

    Returns bin-center lags, semivariances and pair counts for non-empty bins.
    """
    d = pdist(X)
    sq = 0.5 * pdist(y[:, None], "sqeuclidean")
    if max_lag is None:
        max_lag = 0.5 * d.max()
    edges = np.linspace(0.0, max_lag, n_bins + 1)
    idx = np.digitize(d, edges) - 1
    keep = (idx >= 0) & (idx < n_bins)
    counts = np.bincount(idx[keep], minlength=n_bins)
    sums = np.bincount(idx[keep], weights=sq[keep], minlength=n_bins)
    lags = np.bincount(idx[keep], weights=d[keep], minlength=n_bins)
    nz = counts > 0
    return lags[nz] / counts[nz], sums[nz] / counts[nz], counts[nz]


def fit_variogram(stations: StationSet, n_bins: int = 15, kind: str = "exponential") -> VariogramModel:
    """Weighted least-squares variogram fit to the binned semivariance.

    Falls back to ``nugget=0``, ``sill`` = sample variance, ``range`` = one
    third of the station-extent diagonal when the data carry no usable
    spatial variance or the fit fails; the result is then flagged
    ``degenerate``.
    """
    X, y, _ = stations.ok_arrays()
    return _fit_variogram_arrays(X, y, n_bins, kind)


def _fit_variogram_arrays(X, y, n_bins=15, kind="exponential") -> VariogramModel:
    if len(X) < 3:
        raise DataError("variogram fitting needs at least 3 ok-quality stations")
    var = float(np.var(y))
    span = X.max(axis=0) - X.min(axis=0)
    diag = float(np.hypot(*span)) or 1.0

    def fallback():
        return VariogramModel(kind, 0.0, max(var, 1e-12), diag / 3.0, degenerate=True)

    scale = max(float(np.mean(y * y)), 1.0)
    if var <= 1e-12 * scale:
        return fallback()
    lags, gam, counts = empirical_variogram(X, y, n_bins)
    if len(lags) < 3:
        return fallback()

    def resid(p):
        nug, psill, rng = p
        m = VariogramModel(kind, nug, nug + psill, rng)
        return np.sqrt(counts) * (m(lags) - gam) / var

    # beyond the largest fitted lag the sill would be pure extrapolation
    max_range = max(float(lags.max()), 1e-6)
    x0 = [0.1 * var, var, 0.5 * max_range]
    try:
        res = least_squares(resid, x0, bounds=([0.0, 0.0, 1e-9], [np.inf, np.inf, max_range]))
    except (ValueError, np.linalg.LinAlgError):
        return fallback()
    nug, psill, rng = res.x
    if not res.success or not np.all(np.isfinite(res.x)) or nug + psill <= 1e-12 * scale:
        return fallback()
    return VariogramModel(kind, float(nug), float(nug + psill), float(rng))


def _check_duplicates(X, ids):
    _, first, counts = np.unique(X, axis=0, return_index=True, return_counts=True)
    if np.any(counts > 1):
        dup = X[first[counts > 1][0]]
        names = [ids[i] for i in range(len(X)) if np.all(X[i] == dup)]
        raise NumericalError(f"singular system: stations {', '.join(names)} share coordinates {tuple(dup)}")


def _solve_symmetric(A, b, what):
    try:
        with np.errstate(all="raise"):
            sol = scipy.linalg.solve(A, b, assume_a="sym", check_finite=True)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        raise NumericalError(f"singular {what} system: {exc}") from None
    if not np.all(np.isfinite(sol)):
        raise NumericalError(f"singular {what} system")
    return sol


def kriging_matrix(X: np.ndarray, model: VariogramModel) -> np.ndarray:
    """Bordered ``(n+1, n+1)`` semivariogram matrix of ordinary kriging."""
    n = len(X)
    A = np.zeros((n + 1, n + 1))
    A[:n, :n] = model(cdist(X, X))
    A[:n, n] = 1.0
    A[n, :n] = 1.0
    return A


class KrigingInterpolator(RegressorMixin, BaseEstimator):
    """Ordinary kriging with an isotropic variogram.

    Solves the bordered system once for the dual coefficients
    ``A z = [y; 0]``; a prediction is then ``gamma(x)^T z[:n] + z[n]``, which
    equals the weighted sum with weights constrained to sum to one.

    Parameters
    ----------
    variogram : VariogramModel or None
        ``None`` fits one to the training data.
    kind, n_bins : used only when fitting the variogram.
    """

    def __init__(self, variogram=None, kind="exponential", n_bins=15, threads=1):
        self.variogram = variogram
        self.kind = kind
        self.n_bins = n_bins
        self.threads = threads

    def fit(self, X, y, ids=None):
        X = check_coords(X)
        y = check_station_values(y, len(X))
        if len(X) == 0:
            raise DataError("kriging needs at least one station")
        ids = [f"#{i}" for i in range(len(X))] if ids is None else list(ids)
        X, y, ids = _canonical_order(X, y, ids)
        _check_duplicates(X, ids)
        if self.variogram is not None:
            model = self.variogram
        elif len(X) >= 3:
            model = _fit_variogram_arrays(X, y, self.n_bins, self.kind)
        else:
            model = VariogramModel(self.kind, 0.0, 1.0, 1.0, degenerate=True)
        self.variogram_ = model
        self.X_, self.y_ = X, y
        self.matrix_ = kriging_matrix(X, model)
        self.dual_ = _solve_symmetric(self.matrix_, np.append(y, 0.0), "kriging")
        return self

    def _predict_block(self, Xq):
        g = self.variogram_(cdist(Xq, self.X_))
        return g @ self.dual_[:-1] + self.dual_[-1]

    def predict(self, X):
        check_is_fitted(self, "dual_")
        return _predict_tiled(self._predict_block, check_coords(X), self.threads, block=8192)

    def weights(self, X) -> np.ndarray:
        """Explicit kriging weights, shape ``(n_queries, n_stations)``."""
        check_is_fitted(self, "dual_")
        Xq = check_coords(X)
        n = len(self.X_)
        rhs = np.ones((n + 1, len(Xq)))
        rhs[:n] = self.variogram_(cdist(self.X_, Xq))
        return _solve_symmetric(self.matrix_, rhs, "kriging")[:n].T


def kriging(stations: StationSet, target: GridSpec, model: VariogramModel | None = None,
            threads: int = 1, check_weights: bool = False) -> GridField:
    """Ordinary kriging onto every cell center of ``target``.

    ``check_weights`` asserts that the explicit weights sum to one at every
    cell (costly; intended for debugging).
    """
    X, y, ids = stations.ok_arrays()
    if len(X) == 0:
        raise DataError("kriging needs at least one ok-quality station")
    est = KrigingInterpolator(model, threads=threads).fit(X, y, ids=ids)
    Xq = _grid_queries(target)
    if check_weights:
        for s in range(0, len(Xq), 4096):
            sums = est.weights(Xq[s:s + 4096]).sum(axis=1)
            assert np.all(np.abs(sums - 1.0) <= 1e-10), "kriging weights do not sum to 1"
    return GridField(target, est.predict(Xq).reshape(target.shape), precip=False)


# --------------------------------------------------------------------------
# multiquadric
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MQConfig:
    """Multiquadric ``phi(r) = sqrt(r^2 + c^2)`` with diagonal ``smoothing``;
    ``constant`` adds a constant term to the basis."""

    c: float
    smoothing: float = 0.0
    constant: bool = False

    def __post_init__(self):
        if self.c < 0 or self.smoothing < 0:
            raise DataError("multiquadric c and smoothing must be non-negative")


class MultiquadricInterpolator(RegressorMixin, BaseEstimator):
    """Multiquadric radial basis interpolation.

    Parameters
    ----------
    c : float or None
        Shape parameter in grid units; ``None`` uses the mean
        nearest-neighbour station spacing.
    smoothing : float
        Added to the diagonal of the basis matrix.
    constant : bool
        Augment the basis with a constant term (weights constrained to sum
        to zero). The default plain form solves ``(Phi + s I) w = y`` only.
    """

    def __init__(self, c=None, smoothing=0.0, constant=False, threads=1):
        self.c = c
        self.smoothing = smoothing
        self.constant = constant
        self.threads = threads

    def fit(self, X, y, ids=None):
        X = check_coords(X)
        y = check_station_values(y, len(X))
        if len(X) == 0:
            raise DataError("multiquadric needs at least one station")
        ids = [f"#{i}" for i in range(len(X))] if ids is None else list(ids)
        X, y, ids = _canonical_order(X, y, ids)
        c = self.c if self.c is not None else (mean_nn_distance(X) if len(X) > 1 else 1.0)
        self.config_ = MQConfig(float(c), float(self.smoothing))
        if self.config_.smoothing == 0:
            _check_duplicates(X, ids)
        Phi = np.sqrt(cdist(X, X, "sqeuclidean") + self.config_.c**2)
        Phi[np.diag_indices_from(Phi)] += self.config_.smoothing
        self.X_ = X
        if self.constant:
            n = len(X)
            A = np.zeros((n + 1, n + 1))
            A[:n, :n] = Phi
            A[:n, n] = A[n, :n] = 1.0
            sol = _solve_symmetric(A, np.append(y, 0.0), "multiquadric")
            self.coef_, self.intercept_ = sol[:n], float(sol[n])
        else:
            self.coef_ = _solve_symmetric(Phi, y, "multiquadric")
            self.intercept_ = 0.0
        return self

    def _predict_block(self, Xq):
        out = np.sqrt(cdist(Xq, self.X_, "sqeuclidean") + self.config_.c**2) @ self.coef_
        return out + self.intercept_ if self.constant else out

    def predict(self, X):
        check_is_fitted(self, "coef_")
        return _predict_tiled(self._predict_block, check_coords(X), self.threads, block=8192)


def multiquadric(stations: StationSet, target: GridSpec, cfg: MQConfig | None = None,
                 threads: int = 1) -> GridField:
    X, y, ids = stations.ok_arrays()
    if len(X) == 0:
        raise DataError("multiquadric needs at least one ok-quality station")
    c = None if cfg is None else cfg.c
    smoothing = 0.0 if cfg is None else cfg.smoothing
    constant = False if cfg is None else cfg.constant
    est = MultiquadricInterpolator(c, smoothing, constant, threads).fit(X, y, ids=ids)
    return GridField(target, est.predict(_grid_queries(target)).reshape(target.shape), precip=False)
