"""Forecast verification metrics for gridded precipitation.

Conventions: an event is ``value > threshold`` (strict). Cells missing in
either field are dropped pairwise. Scores whose denominator vanishes return
``UNDEFINED`` (NaN) rather than raising.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .core import GridField
from .exceptions import DataError

UNDEFINED = float("nan")


def _pair(pred: GridField, obs: GridField):
    if pred.spec != obs.spec:
        raise DataError(f"grid mismatch: {pred.spec} vs {obs.spec}")
    valid = ~(np.isnan(pred.values) | np.isnan(obs.values))
    return pred.values, obs.values, valid


@dataclass(frozen=True)
class ContingencyCounts:
    hits: int
    misses: int
    false_alarms: int
    correct_negatives: int

    @property
    def total(self) -> int:
        return self.hits + self.misses + self.false_alarms + self.correct_negatives


def contingency(pred: GridField, obs: GridField, threshold: float) -> ContingencyCounts:
    p, o, valid = _pair(pred, obs)
    pe = p[valid] > threshold
    oe = o[valid] > threshold
    return ContingencyCounts(
        int(np.sum(pe & oe)), int(np.sum(~pe & oe)), int(np.sum(pe & ~oe)), int(np.sum(~pe & ~oe))
    )


def _ratio(num, den):
    return num / den if den > 0 else UNDEFINED


def csi(c: ContingencyCounts) -> float:
    return _ratio(c.hits, c.hits + c.misses + c.false_alarms)


def pod(c: ContingencyCounts) -> float:
    return _ratio(c.hits, c.hits + c.misses)


def far(c: ContingencyCounts) -> float:
    return _ratio(c.false_alarms, c.hits + c.false_alarms)


def freq_bias(c: ContingencyCounts) -> float:
    return _ratio(c.hits + c.false_alarms, c.hits + c.misses)


def rmse(pred: GridField, obs: GridField) -> float:
    p, o, valid = _pair(pred, obs)
    n = int(valid.sum())
    if n == 0:
        raise DataError("rmse: no cells valid in both fields")
    d = p[valid] - o[valid]
    return float(np.sqrt(np.dot(d, d) / n))


def _box_sum(a: np.ndarray, half: int) -> np.ndarray:
    """Sum over a ``(2*half+1)^2`` window, cropped at the borders."""
    rows, cols = a.shape
    S = np.zeros((rows + 1, cols + 1))
    S[1:, 1:] = a.cumsum(axis=0).cumsum(axis=1)
    r = np.arange(rows)
    c = np.arange(cols)
    r0 = np.clip(r - half, 0, rows)[:, None]
    r1 = np.clip(r + half + 1, 0, rows)[:, None]
    c0 = np.clip(c - half, 0, cols)[None, :]
    c1 = np.clip(c + half + 1, 0, cols)[None, :]
    return S[r1, c1] - S[r0, c1] - S[r1, c0] + S[r0, c0]


def fraction_field(events: np.ndarray, valid: np.ndarray, window: int) -> np.ndarray:
    """Event fraction in each ``window x window`` neighbourhood.

    Only valid cells inside the grid count toward the denominator.
    """
    half = window // 2
    num = _box_sum((events & valid).astype(float), half)
    den = _box_sum(valid.astype(float), half)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


def fss(pred: GridField, obs: GridField, threshold: float, window: int) -> float:
    """Fractions skill score over ``window x window`` neighbourhoods.

    Returns 1 when neither field has an event.
    """
    if window < 1 or window % 2 == 0:
        raise DataError(f"FSS window must be a positive odd integer, got {window}")
    p, o, valid = _pair(pred, obs)
    if not valid.any():
        raise DataError("fss: no cells valid in both fields")
    with np.errstate(invalid="ignore"):
        pe = p > threshold
        oe = o > threshold
    fm = fraction_field(pe, valid, window)[valid]
    fo = fraction_field(oe, valid, window)[valid]
    ref = np.mean(fo * fo) + np.mean(fm * fm)
    if ref == 0:
        return 1.0
    return float(1.0 - np.mean((fo - fm) ** 2) / ref)


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    if a.size < 2:
        return UNDEFINED
    da = a - a.mean()
    db = b - b.mean()
    sa = math.sqrt(np.dot(da, da))
    sb = math.sqrt(np.dot(db, db))
    if sa == 0 or sb == 0:
        return UNDEFINED
    return float(np.clip(np.dot(da, db) / (sa * sb), -1.0, 1.0))


def pearson(pred: GridField, obs: GridField) -> float:
    p, o, valid = _pair(pred, obs)
    return _pearson(p[valid], o[valid])


def spearman(pred: GridField, obs: GridField) -> float:
    """Rank correlation with average ranks for ties."""
    p, o, valid = _pair(pred, obs)
    return _pearson(rankdata(p[valid]), rankdata(o[valid]))


@dataclass(frozen=True)
class RadialSpectrum:
    """Radially averaged power spectrum.

    ``power[i]`` is the mean of ``|F|^2 / N`` over the non-DC frequencies whose
    radial wavenumber (cycles per grid unit) falls in bin ``i``; with this
    normalization ``dc + sum(power * counts)`` equals the field's sum of
    squares. Empty bins hold NaN.
    """

    wavenumber: np.ndarray
    power: np.ndarray
    counts: np.ndarray
    edges: np.ndarray
    dc: float

    def total_power(self) -> float:
        return float(self.dc + np.nansum(self.power * self.counts))

    def __iter__(self):
        return iter(zip(self.wavenumber.tolist(), self.power.tolist()))


def radial_wavenumber(rows: int, cols: int, cell_size: float) -> np.ndarray:
    ky = np.fft.fftfreq(rows, d=cell_size)
    kx = np.fft.fftfreq(cols, d=cell_size)
    return np.hypot(ky[:, None], kx[None, :])


def psd_radial(field: GridField, n_bins: int | None = None) -> RadialSpectrum:
    """Radially averaged power spectral density (no taper, no detrending)."""
    if field.n_missing:
        raise DataError("psd_radial requires a field without missing cells")
    spec = field.spec
    if n_bins is None:
        n_bins = max(1, min(spec.rows, spec.cols) // 2)
    if n_bins < 1:
        raise DataError("n_bins must be positive")
    F = np.fft.fft2(field.values)
    power = (F.real**2 + F.imag**2) / spec.size
    k = radial_wavenumber(spec.rows, spec.cols, spec.cell_size)
    dc = float(power[0, 0])
    nondc = k > 0
    kk = k[nondc]
    pp = power[nondc]
    if kk.size == 0:
        return RadialSpectrum(np.zeros(0), np.zeros(0), np.zeros(0, int), np.zeros(1), dc)
    edges = np.linspace(0.0, kk.max(), n_bins + 1)
    idx = np.clip(np.searchsorted(edges, kk, side="right") - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    sums = np.bincount(idx, weights=pp, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    centers = 0.5 * (edges[:-1] + edges[1:])
    return RadialSpectrum(centers, mean, counts, edges, dc)


@dataclass
class EvalReport:
    """All verification scores for one forecast/observation pair.

    ``bias`` is the frequency bias at the lowest threshold.
    """

    rmse: float
    csi: dict = field(default_factory=dict)
    pod: dict = field(default_factory=dict)
    far: dict = field(default_factory=dict)
    freq_bias: dict = field(default_factory=dict)
    fss: dict = field(default_factory=dict)
    pearson: float = UNDEFINED
    spearman: float = UNDEFINED
    n_cells: int = 0

    @property
    def bias(self) -> float:
        if not self.freq_bias:
            return UNDEFINED
        return self.freq_bias[min(self.freq_bias)]

    def flat(self) -> dict:
        """Flat ``name -> value`` mapping with stable key order."""
        out = {"rmse": self.rmse, "pearson": self.pearson, "spearman": self.spearman,
               "bias": self.bias, "n_cells": self.n_cells}
        for name in ("csi", "pod", "far", "freq_bias"):
            for t, v in sorted(getattr(self, name).items()):
                out[f"{name}@{t:g}"] = v
        for (t, w), v in sorted(self.fss.items()):
            out[f"fss@{t:g}/w{w}"] = v
        return out

    def to_text(self) -> str:
        rows = self.flat()
        width = max(len(k) for k in rows)
        return "\n".join(f"{k:<{width}}  {_fmt(v)}" for k, v in rows.items()) + "\n"

    def to_json(self) -> str:
        return json.dumps({k: (None if isinstance(v, float) and math.isnan(v) else v)
                           for k, v in self.flat().items()}, indent=2) + "\n"


def _fmt(v):
    if isinstance(v, int):
        return str(v)
    return "undefined" if math.isnan(v) else f"{v:.6g}"


def eval_report(pred: GridField, obs: GridField, thresholds=(0.1, 1.0, 5.0, 10.0),
                fss_windows=(5,)) -> EvalReport:
    _, _, valid = _pair(pred, obs)
    report = EvalReport(rmse=rmse(pred, obs), pearson=pearson(pred, obs),
                        spearman=spearman(pred, obs), n_cells=int(valid.sum()))
    for t in thresholds:
        t = float(t)
        c = contingency(pred, obs, t)
        report.csi[t] = csi(c)
        report.pod[t] = pod(c)
        report.far[t] = far(c)
        report.freq_bias[t] = freq_bias(c)
        for w in fss_windows:
            report.fss[(t, int(w))] = fss(pred, obs, t, int(w))
    return report
