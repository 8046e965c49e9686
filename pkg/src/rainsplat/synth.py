"""Synthetic Gaussian-blob precipitation scenes and station subsamples."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import GaussianSet, GridField, GridSpec, Quality, StationObs, StationSet
from .exceptions import DataError
from .splat import render_dense


@dataclass(frozen=True)
class SynthConfig:
    """Uniform ranges for blob parameters; ``sigma_range`` is in grid units."""

    spec: GridSpec
    n_blobs: int = 10
    amp_range: tuple[float, float] = (2.0, 10.0)
    sigma_range: tuple[float, float] = (1.5, 4.0)
    rho_range: tuple[float, float] = (-0.6, 0.6)
    background: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("amp_range", "sigma_range", "rho_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise DataError(f"{name} must be ordered (lo <= hi)")
        if self.amp_range[0] < 0:
            raise DataError("amplitudes must be non-negative")
        if self.sigma_range[0] <= 0:
            raise DataError("sigma range must be positive")
        if self.rho_range[0] <= -1 or self.rho_range[1] >= 1:
            raise DataError("rho range must lie inside (-1, 1)")
        if self.background < 0:
            raise DataError("background must be non-negative")
        if self.n_blobs < 0:
            raise DataError("n_blobs must be non-negative")


def synth_scene(cfg: SynthConfig) -> tuple[GaussianSet, GridField]:
    """Random blob scene and its dense render plus background.

    Centers keep ``3 * sigma_max`` clear of the grid edge.
    """
    spec = cfg.spec
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_blobs
    margin = 3.0 * cfg.sigma_range[1]
    xmin, xmax = spec.origin_x + margin, spec.origin_x + (spec.cols - 1) * spec.cell_size - margin
    ymin, ymax = spec.origin_y + margin, spec.origin_y + (spec.rows - 1) * spec.cell_size - margin
    if n and (xmin > xmax or ymin > ymax):
        raise DataError("grid too small for a 3-sigma border margin")
    if not n:
        xmin = xmax = spec.origin_x
        ymin = ymax = spec.origin_y
    gset = GaussianSet(
        mu_x=rng.uniform(xmin, xmax, n),
        mu_y=rng.uniform(ymin, ymax, n),
        sigma_x=rng.uniform(*cfg.sigma_range, n),
        sigma_y=rng.uniform(*cfg.sigma_range, n),
        rho=rng.uniform(*cfg.rho_range, n),
        alpha=rng.uniform(*cfg.amp_range, n),
        frame=spec,
    )
    field = render_dense(gset, spec)
    return gset, GridField(spec, field.values + cfg.background)


def synth_stations(field: GridField, n: int, noise_sd: float = 0.0, missing_frac: float = 0.0,
                   seed: int = 0, clustered: bool = False, n_clusters: int = 5) -> StationSet:
    """Place ``n`` stations on distinct cell centers of ``field``.

    Values are the cell value plus Gaussian noise, clamped at zero. Exactly
    ``round(missing_frac * n)`` stations are flagged missing. ``clustered``
    draws cells around random cluster centers instead of uniformly.
    """
    spec = field.spec
    if n > spec.size:
        raise DataError(f"cannot place {n} stations on {spec.size} cells")
    if noise_sd < 0 or not 0 <= missing_frac < 1:
        raise DataError("noise_sd must be >= 0 and missing_frac in [0, 1)")
    rng = np.random.default_rng(seed)
    if clustered:
        rr, cc = np.mgrid[0:spec.rows, 0:spec.cols]
        centers = rng.uniform([0, 0], [spec.rows, spec.cols], size=(n_clusters, 2))
        width = 0.1 * max(spec.rows, spec.cols)
        w = np.zeros(spec.shape)
        for cr, ccen in centers:
            w += np.exp(-((rr - cr) ** 2 + (cc - ccen) ** 2) / (2 * width**2))
        w = w.ravel() + 1e-12
        cells = rng.choice(spec.size, size=n, replace=False, p=w / w.sum())
    else:
        cells = rng.choice(spec.size, size=n, replace=False)
    rows, cols = np.divmod(cells, spec.cols)
    truth = field.values[rows, cols]
    vals = np.maximum(truth + rng.normal(0.0, noise_sd, n) if noise_sd > 0 else truth, 0.0)
    n_missing = int(round(missing_frac * n))
    missing = np.zeros(n, dtype=bool)
    missing[rng.choice(n, size=n_missing, replace=False)] = True
    width = len(str(max(n - 1, 0)))
    out = []
    for i in range(n):
        x, y = spec.center(int(rows[i]), int(cols[i]))
        bad = missing[i] or np.isnan(vals[i])
        out.append(StationObs(f"s{i:0{width}d}", x, y, float(vals[i]),
                              Quality.MISSING if bad else Quality.OK))
    return StationSet(tuple(out))
