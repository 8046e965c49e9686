"""Grid geometry, field/station/Gaussian containers and their file formats.

Coordinate convention
---------------------
All coordinates are abstract grid units (km by convention). Cell ``(r, c)``
has its center at ``(origin_x + c * cell_size, origin_y + r * cell_size)``;
row 0 is the row at ``origin_y`` and rows advance toward increasing ``y``.
Values are stored row-major. Missing cells hold ``NaN``.
"""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .exceptions import DataError

MISSING = float("nan")

_BIN_MAGIC = b"SPF1"
_BIN_HEADER = struct.Struct("<4sIIddd")


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


# --------------------------------------------------------------------------
# grid geometry
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    """Regular grid: ``rows`` x ``cols`` cells of side ``cell_size``."""

    origin_x: float
    origin_y: float
    cell_size: float
    rows: int
    cols: int

    def __post_init__(self):
        if not (math.isfinite(self.cell_size) and self.cell_size > 0):
            raise DataError(f"cell_size must be positive, got {self.cell_size}")
        if int(self.rows) != self.rows or int(self.cols) != self.cols:
            raise DataError("rows and cols must be integers")
        if self.rows < 1 or self.cols < 1:
            raise DataError(f"grid must have at least one cell, got {self.rows}x{self.cols}")
        if not (math.isfinite(self.origin_x) and math.isfinite(self.origin_y)):
            raise DataError("grid origin must be finite")
        object.__setattr__(self, "rows", int(self.rows))
        object.__setattr__(self, "cols", int(self.cols))
        object.__setattr__(self, "origin_x", float(self.origin_x))
        object.__setattr__(self, "origin_y", float(self.origin_y))
        object.__setattr__(self, "cell_size", float(self.cell_size))

    @classmethod
    def unit(cls, rows: int, cols: int | None = None) -> "GridSpec":
        """Grid with unit cells whose first center sits at the origin."""
        return cls(0.0, 0.0, 1.0, rows, rows if cols is None else cols)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def size(self) -> int:
        return self.rows * self.cols

    def x_centers(self) -> np.ndarray:
        return self.origin_x + np.arange(self.cols) * self.cell_size

    def y_centers(self) -> np.ndarray:
        return self.origin_y + np.arange(self.rows) * self.cell_size

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(X, Y)`` arrays of shape ``(rows, cols)``."""
        return np.meshgrid(self.x_centers(), self.y_centers())

    def center(self, row: int, col: int) -> tuple[float, float]:
        return (self.origin_x + col * self.cell_size, self.origin_y + row * self.cell_size)

    def index_of(self, x, y):
        """Nearest cell index ``(row, col)`` for coordinates (not bounds-checked)."""
        col = np.rint((np.asarray(x, dtype=float) - self.origin_x) / self.cell_size).astype(np.int64)
        row = np.rint((np.asarray(y, dtype=float) - self.origin_y) / self.cell_size).astype(np.int64)
        return row, col

    def contains_index(self, row, col):
        row = np.asarray(row)
        col = np.asarray(col)
        return (row >= 0) & (row < self.rows) & (col >= 0) & (col < self.cols)

    def extent(self) -> tuple[float, float, float, float]:
        """Outer cell edges ``(xmin, xmax, ymin, ymax)``."""
        h = 0.5 * self.cell_size
        return (
            self.origin_x - h,
            self.origin_x + (self.cols - 1) * self.cell_size + h,
            self.origin_y - h,
            self.origin_y + (self.rows - 1) * self.cell_size + h,
        )

    def refined(self, factor: float) -> "GridSpec":
        """Grid over the same extent with cell size scaled by ``factor``.

        ``factor=0.5`` doubles rows and cols.
        """
        if factor <= 0:
            raise DataError("resolution factor must be positive")
        new_size = self.cell_size * factor
        rows = max(1, int(round(self.rows / factor)))
        cols = max(1, int(round(self.cols / factor)))
        xmin, _, ymin, _ = self.extent()
        return GridSpec(xmin + 0.5 * new_size, ymin + 0.5 * new_size, new_size, rows, cols)


# --------------------------------------------------------------------------
# fields
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GridField:
    """A scalar raster on a :class:`GridSpec`.

    ``values`` has shape ``(rows, cols)``; ``NaN`` marks missing cells.
    ``precip=True`` (default) rejects negative values.
    """

    spec: GridSpec
    values: np.ndarray
    precip: bool = True

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64, copy=True)
        if vals.ndim == 1:
            if vals.size != self.spec.size:
                raise DataError(
                    f"length mismatch: {vals.size} values for a {self.spec.rows}x{self.spec.cols} grid"
                )
            vals = vals.reshape(self.spec.shape)
        if vals.shape != self.spec.shape:
            raise DataError(f"values shape {vals.shape} does not match grid {self.spec.shape}")
        if np.isinf(vals).any():
            raise DataError("field contains infinite values")
        if self.precip and (vals[~np.isnan(vals)] < 0).any():
            raise DataError("precipitation field contains negative values")
        object.__setattr__(self, "values", _frozen(vals))

    @classmethod
    def zeros(cls, spec: GridSpec) -> "GridField":
        return cls(spec, np.zeros(spec.shape))

    @classmethod
    def full(cls, spec: GridSpec, value: float) -> "GridField":
        return cls(spec, np.full(spec.shape, float(value)), precip=not value < 0)

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)

    @property
    def n_missing(self) -> int:
        return int(self.missing.sum())

    def with_values(self, values, precip: bool | None = None) -> "GridField":
        return GridField(self.spec, values, self.precip if precip is None else precip)

    def value_at(self, x, y):
        """Value of the cell containing each point (``NaN`` outside the grid)."""
        row, col = self.spec.index_of(x, y)
        inside = self.spec.contains_index(row, col)
        out = np.full(np.shape(row), np.nan)
        out[inside] = self.values[row[inside], col[inside]]
        return out

    def __eq__(self, other):
        if not isinstance(other, GridField):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.values, other.values, equal_nan=True)

    __hash__ = None


# --------------------------------------------------------------------------
# stations
# --------------------------------------------------------------------------


class Quality(str, Enum):
    OK = "ok"
    MISSING = "missing"
    SUSPECT = "suspect"


@dataclass(frozen=True)
class StationObs:
    id: str
    x: float
    y: float
    value: float
    quality: Quality = Quality.OK

    def __post_init__(self):
        object.__setattr__(self, "quality", Quality(self.quality))
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise DataError(f"station {self.id}: non-finite coordinates")
        if self.quality is Quality.OK:
            if not math.isfinite(self.value):
                raise DataError(f"station {self.id}: quality ok but value is not finite")
            if self.value < 0:
                raise DataError(f"station {self.id}: negative rainfall {self.value}")


@dataclass(frozen=True)
class StationSet:
    stations: tuple[StationObs, ...] = ()

    def __post_init__(self):
        stations = tuple(self.stations)
        seen = set()
        for s in stations:
            if s.id in seen:
                raise DataError(f"duplicate station id {s.id!r}")
            seen.add(s.id)
        object.__setattr__(self, "stations", stations)

    def __len__(self):
        return len(self.stations)

    def __iter__(self) -> Iterator[StationObs]:
        return iter(self.stations)

    def ok(self) -> list[StationObs]:
        return [s for s in self.stations if s.quality is Quality.OK]

    def ok_arrays(self) -> tuple[np.ndarray, np.ndarray, list[str]]:
        """Coordinates ``(n, 2)``, values ``(n,)`` and ids of ok-quality stations."""
        ok = self.ok()
        xy = np.array([[s.x, s.y] for s in ok], dtype=float).reshape(-1, 2)
        vals = np.array([s.value for s in ok], dtype=float)
        return xy, vals, [s.id for s in ok]


# --------------------------------------------------------------------------
# Gaussian scenes
# --------------------------------------------------------------------------

DET_FLOOR = 1e-300


@dataclass(frozen=True)
class Gaussian2D:
    mu_x: float
    mu_y: float
    sigma_x: float
    sigma_y: float
    rho: float = 0.0
    alpha: float = 1.0
    anchored: bool = False

    def __post_init__(self):
        _check_gaussian_params(
            np.array([self.sigma_x]), np.array([self.sigma_y]),
            np.array([self.rho]), np.array([self.alpha]),
        )

    @property
    def covariance(self) -> np.ndarray:
        c = self.rho * self.sigma_x * self.sigma_y
        return np.array([[self.sigma_x**2, c], [c, self.sigma_y**2]])


def _check_gaussian_params(sx, sy, rho, alpha):
    if not (np.all(np.isfinite(sx)) and np.all(sx > 0)):
        raise DataError("sigma_x must be finite and positive")
    if not (np.all(np.isfinite(sy)) and np.all(sy > 0)):
        raise DataError("sigma_y must be finite and positive")
    if not (np.all(np.isfinite(rho)) and np.all(np.abs(rho) < 1)):
        raise DataError("rho must lie in (-1, 1)")
    if not (np.all(np.isfinite(alpha)) and np.all(alpha >= 0)):
        raise DataError("alpha must be finite and non-negative")
    det = sx**2 * sy**2 * (1.0 - rho**2)
    if np.any(det <= DET_FLOOR):
        raise DataError("covariance is not positive definite")


_GAUSS_FIELDS = ("mu_x", "mu_y", "sigma_x", "sigma_y", "rho", "alpha")


@dataclass(frozen=True, eq=False)
class GaussianSet:
    """N anisotropic 2D Gaussians stored as parallel arrays.

    ``frame`` is the grid the scene was fitted in (may be ``None``).
    """

    mu_x: np.ndarray
    mu_y: np.ndarray
    sigma_x: np.ndarray
    sigma_y: np.ndarray
    rho: np.ndarray
    alpha: np.ndarray
    anchored: np.ndarray = None
    frame: GridSpec | None = None

    def __post_init__(self):
        arrays = {}
        n = None
        for name in _GAUSS_FIELDS:
            a = np.array(getattr(self, name), dtype=np.float64, copy=True).reshape(-1)
            if n is None:
                n = a.size
            elif a.size != n:
                raise DataError(f"GaussianSet field {name} has {a.size} entries, expected {n}")
            arrays[name] = a
        anch = self.anchored
        anch = np.zeros(n, dtype=bool) if anch is None else np.array(anch, dtype=bool).reshape(-1)
        if anch.size != n:
            raise DataError("anchored flags do not match the number of Gaussians")
        if not (np.all(np.isfinite(arrays["mu_x"])) and np.all(np.isfinite(arrays["mu_y"]))):
            raise DataError("Gaussian centers must be finite")
        if n:
            _check_gaussian_params(arrays["sigma_x"], arrays["sigma_y"], arrays["rho"], arrays["alpha"])
        for name, a in arrays.items():
            object.__setattr__(self, name, _frozen(a))
        object.__setattr__(self, "anchored", _frozen(anch))

    @classmethod
    def empty(cls, frame: GridSpec | None = None) -> "GaussianSet":
        z = np.zeros(0)
        return cls(z, z, z, z, z, z, np.zeros(0, dtype=bool), frame)

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian2D], frame: GridSpec | None = None) -> "GaussianSet":
        if not gaussians:
            return cls.empty(frame)
        cols = {name: [getattr(g, name) for g in gaussians] for name in _GAUSS_FIELDS}
        return cls(**cols, anchored=[g.anchored for g in gaussians], frame=frame)

    @classmethod
    def concat(cls, sets: Sequence["GaussianSet"], frame: GridSpec | None = None) -> "GaussianSet":
        if not sets:
            return cls.empty(frame)
        cols = {name: np.concatenate([getattr(s, name) for s in sets]) for name in _GAUSS_FIELDS}
        anch = np.concatenate([s.anchored for s in sets])
        return cls(**cols, anchored=anch, frame=frame if frame is not None else sets[0].frame)

    def replace(self, **changes) -> "GaussianSet":
        kwargs = {name: getattr(self, name) for name in (*_GAUSS_FIELDS, "anchored", "frame")}
        kwargs.update(changes)
        return GaussianSet(**kwargs)

    def __len__(self):
        return self.mu_x.size

    def __getitem__(self, i: int) -> Gaussian2D:
        return Gaussian2D(
            float(self.mu_x[i]), float(self.mu_y[i]), float(self.sigma_x[i]),
            float(self.sigma_y[i]), float(self.rho[i]), float(self.alpha[i]), bool(self.anchored[i]),
        )

    def __iter__(self) -> Iterator[Gaussian2D]:
        return (self[i] for i in range(len(self)))

    def __eq__(self, other):
        if not isinstance(other, GaussianSet):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, n), getattr(other, n)) for n in (*_GAUSS_FIELDS, "anchored")
        )

    __hash__ = None


# --------------------------------------------------------------------------
# grid I/O
# --------------------------------------------------------------------------


def write_grid(field: GridField, path, format: str = "binary", digits: int = 9) -> None:
    """Write a field as ``binary`` (SPF1, float32 payload) or ``ascii``.

    ASCII values are printed with ``digits`` significant digits; ``NA`` marks
    missing cells.
    """
    spec = field.spec
    path = Path(path)
    if format == "binary":
        header = _BIN_HEADER.pack(_BIN_MAGIC, spec.rows, spec.cols, spec.origin_x, spec.origin_y, spec.cell_size)
        payload = field.values.astype("<f4").tobytes(order="C")
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    elif format == "ascii":
        buf = io.StringIO()
        buf.write(f"rows {spec.rows}\ncols {spec.cols}\n")
        buf.write(f"origin_x {spec.origin_x!r}\norigin_y {spec.origin_y!r}\ncell_size {spec.cell_size!r}\n")
        fmt = f"{{:.{digits}g}}"
        for row in field.values:
            buf.write(" ".join("NA" if np.isnan(v) else fmt.format(v) for v in row))
            buf.write("\n")
        path.write_text(buf.getvalue())
    else:
        raise DataError(f"unknown grid format {format!r}")


def read_grid(path, format: str | None = None, precip: bool = True) -> GridField:
    """Read a grid written by :func:`write_grid`.

    ``format=None`` sniffs the SPF1 magic.
    """
    path = Path(path)
    raw = path.read_bytes()
    if format is None:
        format = "binary" if raw[:4] == _BIN_MAGIC else "ascii"
    if format == "binary":
        return _parse_binary(raw, precip)
    if format == "ascii":
        return _parse_ascii(raw.decode("utf-8"), precip)
    raise DataError(f"unknown grid format {format!r}")


def _parse_binary(raw: bytes, precip: bool) -> GridField:
    if len(raw) < _BIN_HEADER.size:
        raise DataError("malformed header: file shorter than the SPF1 header")
    magic, rows, cols, ox, oy, cs = _BIN_HEADER.unpack_from(raw)
    if magic != _BIN_MAGIC:
        raise DataError(f"malformed header: bad magic {magic!r}")
    body = raw[_BIN_HEADER.size:]
    expected = rows * cols * 4
    if len(body) != expected:
        raise DataError(f"length mismatch: expected {rows * cols} float32 values, got {len(body) / 4:g}")
    vals = np.frombuffer(body, dtype="<f4").astype(np.float64)
    return GridField(GridSpec(ox, oy, cs, rows, cols), vals, precip=precip)


_ASCII_KEYS = ("rows", "cols", "origin_x", "origin_y", "cell_size")


def _parse_ascii(text: str, precip: bool) -> GridField:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = {}
    i = 0
    while i < len(lines) and len(header) < len(_ASCII_KEYS):
        parts = lines[i].split()
        if len(parts) != 2 or parts[0] not in _ASCII_KEYS:
            raise DataError(f"malformed header line {lines[i]!r}")
        header[parts[0]] = parts[1]
        i += 1
    if set(header) != set(_ASCII_KEYS):
        raise DataError(f"malformed header: missing {sorted(set(_ASCII_KEYS) - set(header))}")
    try:
        spec = GridSpec(
            float(header["origin_x"]), float(header["origin_y"]), float(header["cell_size"]),
            int(header["rows"]), int(header["cols"]),
        )
    except ValueError as exc:
        raise DataError(f"malformed header: {exc}") from None
    tokens = " ".join(lines[i:]).split()
    if len(tokens) != spec.size:
        raise DataError(f"length mismatch: {len(tokens)} values for a {spec.rows}x{spec.cols} grid")
    try:
        vals = np.array([np.nan if t == "NA" else float(t) for t in tokens])
    except ValueError as exc:
        raise DataError(f"unparsable grid value: {exc}") from None
    if np.isnan(vals).any() and not all(t == "NA" for t, v in zip(tokens, vals) if np.isnan(v)):
        raise DataError("non-finite value where a finite value is required (use NA for missing)")
    return GridField(spec, vals, precip=precip)


# --------------------------------------------------------------------------
# station and scene CSV
# --------------------------------------------------------------------------

_STATION_COLS = ("id", "x", "y", "value")


def read_stations(path) -> StationSet:
    """Read ``id,x,y,value[,quality]`` CSV. Unparsable values become ``missing``."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = [c.strip() for c in (reader.fieldnames or [])]
        absent = [c for c in _STATION_COLS if c not in cols]
        if absent:
            raise DataError(f"station file missing required column(s): {', '.join(absent)}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            row = {k.strip(): (v or "").strip() for k, v in row.items() if k is not None}
            try:
                x, y = float(row["x"]), float(row["y"])
            except ValueError:
                raise DataError(f"line {lineno}: unparsable station coordinates") from None
            quality = Quality((row.get("quality") or "ok").lower())
            try:
                value = float(row["value"])
            except ValueError:
                value = math.nan
            if not math.isfinite(value):
                quality = Quality.MISSING
            out.append(StationObs(row["id"], x, y, value, quality))
    return StationSet(tuple(out))


def write_stations(stations: StationSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("id", "x", "y", "value", "quality"))
        for s in stations:
            w.writerow((s.id, repr(s.x), repr(s.y), repr(s.value), s.quality.value))


_SCENE_HEADER = (*_GAUSS_FIELDS, "anchored")


def write_gaussians(gset: GaussianSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_SCENE_HEADER)
        for i in range(len(gset)):
            w.writerow([repr(float(getattr(gset, n)[i])) for n in _GAUSS_FIELDS] + [int(gset.anchored[i])])


def read_gaussians(path, frame: GridSpec | None = None) -> GaussianSet:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != _SCENE_HEADER:
            raise DataError(f"scene file header must be {','.join(_SCENE_HEADER)}")
        rows = list(reader)
    if not rows:
        return GaussianSet.empty(frame)
    try:
        cols = {n: [float(r[n]) for r in rows] for n in _GAUSS_FIELDS}
        anch = [r["anchored"].strip().lower() in ("1", "true") for r in rows]
    except ValueError as exc:
        raise DataError(f"unparsable scene value: {exc}") from None
    return GaussianSet(**cols, anchored=anch, frame=frame)


# --------------------------------------------------------------------------
# resampling
# --------------------------------------------------------------------------


def resample(field: GridField, target: GridSpec, mode: str = "block_mean") -> GridField:
    """Resample ``field`` onto ``target``.

    ``block_mean`` averages the non-missing source cells whose centers fall in
    each target cell (half-open cell boundaries); target cells that receive no
    source value are missing. ``nearest`` takes the source cell nearest to each
    target center.
    """
    src = field.spec
    sx0, sx1, sy0, sy1 = src.extent()
    tx0, tx1, ty0, ty1 = target.extent()
    tol = src.cell_size
    if tx1 <= sx0 or tx0 >= sx1 or ty1 <= sy0 or ty0 >= sy1:
        raise DataError("target grid does not overlap the source grid")
    if tx0 < sx0 - tol or tx1 > sx1 + tol or ty0 < sy0 - tol or ty1 > sy1 + tol:
        raise DataError("target grid extends beyond the source grid by more than one cell")

    if mode == "nearest":
        X, Y = target.cell_centers()
        r, c = src.index_of(X, Y)
        r = np.clip(r, 0, src.rows - 1)
        c = np.clip(c, 0, src.cols - 1)
        return GridField(target, field.values[r, c], precip=field.precip)
    if mode != "block_mean":
        raise DataError(f"unknown resample mode {mode!r}")

    xs, ys = src.x_centers(), src.y_centers()
    tc = np.floor((xs - tx0) / target.cell_size).astype(np.int64)
    tr = np.floor((ys - ty0) / target.cell_size).astype(np.int64)
    TR, TC = np.meshgrid(tr, tc, indexing="ij")
    vals = field.values
    keep = (TR >= 0) & (TR < target.rows) & (TC >= 0) & (TC < target.cols) & ~np.isnan(vals)
    flat = TR[keep] * target.cols + TC[keep]
    sums = np.bincount(flat, weights=vals[keep], minlength=target.size)
    counts = np.bincount(flat, minlength=target.size)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return GridField(target, out.reshape(target.shape), precip=field.precip)
