"""Regular lat-lon rasters: containers, file format, resampling and zonal means.

Cell area everywhere is approximated by ``cos(center latitude)``.
Missing values are NaN.
"""
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import sparse

from tfpacc.errors import DataValidationError, DomainError

log = logging.getLogger(__name__)

VARIABLES = ("tmean", "tmin", "tmax", "precip", "ndvi", "weight", "mask", "other")

MAGIC = b"TFPG"
VERSION = 1
# magic, version, lat0, lon0, dlat, dlon, nlat, nlon, variable, start_year, start_month, count
_HEADER = struct.Struct("<4sH4d2I16s2iI")


@dataclass(frozen=True)
class GridSpec:
    """Cell-center geometry. ``lat0``/``lon0`` are the centers of row 0 / column 0."""

    lat0: float
    lon0: float
    dlat: float
    dlon: float
    nlat: int
    nlon: int

    def __post_init__(self):
        if not (self.dlat > 0 and self.dlon > 0):
            raise DomainError("grid spacing must be positive")
        if self.nlat < 1 or self.nlon < 1:
            raise DomainError("grid must have at least one cell")
        lats, lons = self.lats, self.lons
        if lats[0] <= -90 or lats[-1] >= 90:
            raise DomainError("cell centers must lie strictly inside (-90, 90)")
        if lons[0] < -180 or lons[-1] >= 180:
            raise DomainError("cell centers must lie inside [-180, 180)")

    @property
    def shape(self):
        return (self.nlat, self.nlon)

    @property
    def lats(self):
        return self.lat0 + self.dlat * np.arange(self.nlat)

    @property
    def lons(self):
        return self.lon0 + self.dlon * np.arange(self.nlon)

    @property
    def bounds(self):
        """(south, north, west, east) cell edges."""
        return (
            self.lat0 - self.dlat / 2,
            self.lat0 + self.dlat * (self.nlat - 0.5),
            self.lon0 - self.dlon / 2,
            self.lon0 + self.dlon * (self.nlon - 0.5),
        )

    def cell_area(self):
        """Relative cell areas, ``cos(lat)`` broadcast to the grid."""
        return np.repeat(np.cos(np.deg2rad(self.lats))[:, None], self.nlon, axis=1)

    def to_dict(self):
        return {k: getattr(self, k) for k in ("lat0", "lon0", "dlat", "dlon", "nlat", "nlon")}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["lat0"]), float(d["lon0"]), float(d["dlat"]), float(d["dlon"]),
                   int(d["nlat"]), int(d["nlon"]))


def _check_variable(variable):
    if variable not in VARIABLES:
        raise DataValidationError(f"unknown variable tag {variable!r}")


@dataclass
class GridField:
    """One variable on one grid, optionally stamped with (year, month)."""

    spec: GridSpec
    values: np.ndarray
    variable: str = "other"
    stamp: tuple = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        _check_variable(self.variable)
        if self.values.shape != self.spec.shape:
            raise DataValidationError(f"values shape {self.values.shape} != grid {self.spec.shape}")
        if np.isinf(self.values).any():
            raise DataValidationError("grid values must be finite where not missing")
        if self.variable == "weight":
            v = self.values[~np.isnan(self.values)]
            if v.size and (v.min() < 0 or v.max() > 1):
                raise DataValidationError("weight fractions must lie in [0, 1]")

    @property
    def missing(self):
        return np.isnan(self.values)


@dataclass
class GridSeries:
    """A stack of consecutive fields on one grid.

    Monthly variables are indexed from ``start = (year, month)``. NDVI stacks
    hold 24 biweekly bins per year starting in January of ``start[0]``.
    """

    spec: GridSpec
    values: np.ndarray
    variable: str = "other"
    start: tuple = (1961, 1)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        _check_variable(self.variable)
        if self.values.ndim != 3 or self.values.shape[1:] != self.spec.shape:
            raise DataValidationError(f"series shape {self.values.shape} does not match grid {self.spec.shape}")
        if np.isinf(self.values).any():
            raise DataValidationError("grid values must be finite where not missing")

    def __len__(self):
        return self.values.shape[0]

    @property
    def stamps(self):
        """(year, month) of every monthly slice."""
        y0, m0 = self.start
        k = (m0 - 1) + np.arange(len(self))
        return list(zip((y0 + k // 12).tolist(), (k % 12 + 1).tolist()))

    def field(self, i):
        return GridField(self.spec, self.values[i], self.variable, self.stamps[i])

    def select_years(self, first, last):
        """Monthly slices with ``first <= year <= last``."""
        years = np.array([s[0] for s in self.stamps])
        keep = (years >= first) & (years <= last)
        if not keep.any():
            raise DomainError(f"no months within {first}-{last}")
        idx = np.flatnonzero(keep)
        y, m = self.stamps[idx[0]]
        return GridSeries(self.spec, self.values[idx], self.variable, (y, m))

    @classmethod
    def concat(cls, parts):
        """Join monthly series that follow each other without gaps."""
        parts = list(parts)
        for a, b in zip(parts, parts[1:]):
            if a.spec != b.spec:
                raise DataValidationError("cannot concatenate series on different grids")
            y, m = a.stamps[-1]
            nxt = (y + 1, 1) if m == 12 else (y, m + 1)
            if tuple(b.start) != nxt:
                raise DataValidationError(f"series not contiguous: {a.stamps[-1]} then {b.start}")
        return cls(parts[0].spec, np.concatenate([p.values for p in parts]), parts[0].variable,
                   tuple(parts[0].start))


@dataclass
class CountryMask:
    """One country (or none, code -1) per cell."""

    spec: GridSpec
    codes: np.ndarray
    countries: list = field(default_factory=list)

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        if self.codes.shape != self.spec.shape:
            raise DataValidationError("mask shape does not match grid")
        if self.codes.max(initial=-1) >= len(self.countries) or self.codes.min(initial=0) < -1:
            raise DataValidationError("mask codes out of range")

    def cells(self, country):
        k = self.countries.index(country)
        return self.codes == k

    def save(self, path):
        Path(path).write_text(json.dumps({
            "grid": self.spec.to_dict(),
            "countries": list(self.countries),
            "codes": self.codes.tolist(),
        }))

    @classmethod
    def load(cls, path):
        d = json.loads(Path(path).read_text())
        return cls(GridSpec.from_dict(d["grid"]), np.array(d["codes"]), list(d["countries"]))


# ---------------------------------------------------------------- file format

def write_grid(path, data):
    """Write a GridField or GridSeries in the binary grid format."""
    if isinstance(data, GridField):
        values = data.values[None]
        start = data.stamp or (0, 0)
    else:
        values = data.values
        start = data.start
    spec = data.spec
    header = _HEADER.pack(MAGIC, VERSION, spec.lat0, spec.lon0, spec.dlat, spec.dlon,
                          spec.nlat, spec.nlon, data.variable.encode("ascii").ljust(16, b"\0"),
                          int(start[0]), int(start[1]), values.shape[0])
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def read_grid(path):
    """Read a binary grid file. Always returns a GridSeries (count may be 1)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataValidationError(f"{path}: truncated header")
    (magic, version, lat0, lon0, dlat, dlon, nlat, nlon, var, y0, m0, count) = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataValidationError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DataValidationError(f"{path}: unsupported version {version}")
    spec = GridSpec(lat0, lon0, dlat, dlon, nlat, nlon)
    n = count * nlat * nlon
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if body.size != n:
        raise DataValidationError(f"{path}: expected {n} values, found {body.size}")
    values = body.reshape(count, nlat, nlon).astype(float)
    return GridSeries(spec, values, var.rstrip(b"\0").decode("ascii"), (y0, m0))


def read_field(path):
    s = read_grid(path)
    if len(s) != 1:
        raise DataValidationError(f"{path}: expected a single field, found {len(s)}")
    stamp = tuple(s.start) if s.start != (0, 0) else None
    return GridField(s.spec, s.values[0], s.variable, stamp)


def to_csv_debug(data, path):
    """Plain-text dump: lat,lon,value (plus year,month for series)."""
    spec = data.spec
    lat, lon = np.meshgrid(spec.lats, spec.lons, indexing="ij")
    if isinstance(data, GridField):
        df = pd.DataFrame({"lat": lat.ravel(), "lon": lon.ravel(), "value": data.values.ravel()})
    else:
        frames = []
        for (y, m), v in zip(data.stamps, data.values):
            frames.append(pd.DataFrame({"year": y, "month": m, "lat": lat.ravel(),
                                        "lon": lon.ravel(), "value": v.ravel()}))
        df = pd.concat(frames, ignore_index=True)
    df.to_csv(path, index=False, float_format="%.17g", na_rep="NaN")


# ---------------------------------------------------------------- resampling

def _check_overlap(src, dst):
    s0, s1, w0, w1 = src.bounds
    d0, d1, e0, e1 = dst.bounds
    if d0 >= s1 or d1 <= s0 or e0 >= w1 or e1 <= w0:
        raise DomainError("destination grid does not overlap the source grid")


def _axis_weights(coords, origin, step, n):
    f = np.clip((coords - origin) / step, 0, n - 1)
    if n == 1:
        i0 = np.zeros(coords.shape, dtype=int)
        return i0, i0, np.zeros(coords.shape)
    i0 = np.minimum(np.floor(f).astype(int), n - 2)
    return i0, i0 + 1, f - i0


def bilinear_array(values, src, dst):
    """Bilinear interpolation of ``values[..., nlat, nlon]`` from ``src`` onto ``dst`` centers.

    Points outside the source centers are clamped to the edge. Missing
    neighbors are dropped and the remaining weights renormalized; when the
    remaining weights vanish the plain mean of the present neighbors is used.
    """
    values = np.asarray(values, dtype=float)
    _check_overlap(src, dst)
    i0, i1, wy = _axis_weights(dst.lats, src.lat0, src.dlat, src.nlat)
    j0, j1, wx = _axis_weights(dst.lons, src.lon0, src.dlon, src.nlon)
    wy = wy[:, None]
    wx = wx[None, :]
    a00 = values[..., i0[:, None], j0[None, :]]
    a01 = values[..., i0[:, None], j1[None, :]]
    a10 = values[..., i1[:, None], j0[None, :]]
    a11 = values[..., i1[:, None], j1[None, :]]
    # lerp form reproduces equal corner values exactly
    top = a00 + wx * (a01 - a00)
    bot = a10 + wx * (a11 - a10)
    out = top + wy * (bot - top)

    corners = np.stack([a00, a01, a10, a11])
    miss = np.isnan(corners)
    if miss.any():
        wts = np.stack(np.broadcast_arrays((1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx))
        wts = wts.reshape((4,) + (1,) * (corners.ndim - 3) + wts.shape[1:])
        wts = np.broadcast_to(wts, corners.shape).copy()
        wts[miss] = 0.0
        filled = np.where(miss, 0.0, corners)
        wsum = wts.sum(axis=0)
        present = (~miss).sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            renorm = (wts * filled).sum(axis=0) / wsum
            plain = filled.sum(axis=0) / present
        patched = np.where(wsum > 1e-12, renorm, plain)
        patched = np.where(present == 0, np.nan, patched)
        anymiss = miss.any(axis=0)
        out = np.where(anymiss, patched, out)
    return out


def resample_bilinear(src, dst):
    """Resample a GridField (or GridSeries) to grid ``dst`` by bilinear interpolation."""
    vals = bilinear_array(src.values, src.spec, dst)
    if isinstance(src, GridSeries):
        return GridSeries(dst, vals, src.variable, src.start)
    if src.variable == "weight":
        vals = np.clip(vals, 0.0, 1.0)
    return GridField(dst, vals, src.variable, src.stamp)


def _coarsen_matrix(src, dst):
    """Sparse (dst cells x src cells) matrix of cos-latitude weights."""
    lat_edge0 = dst.lat0 - dst.dlat / 2
    lon_edge0 = dst.lon0 - dst.dlon / 2
    ii = np.floor((src.lats - lat_edge0) / dst.dlat).astype(int)
    jj = np.floor((src.lons - lon_edge0) / dst.dlon).astype(int)
    I, J = np.meshgrid(ii, jj, indexing="ij")
    area = src.cell_area()
    ok = (I >= 0) & (I < dst.nlat) & (J >= 0) & (J < dst.nlon)
    rows = (I * dst.nlon + J)[ok]
    cols = np.flatnonzero(ok.ravel())
    return sparse.csr_matrix((area.ravel()[cols], (rows, cols)),
                             shape=(dst.nlat * dst.nlon, src.nlat * src.nlon))


def coarsen_area_weighted(src, dst):
    """Cos-latitude weighted mean of the source centers inside each destination cell.

    Destination cells that contain no (non-missing) source center are missing.
    """
    _check_overlap(src.spec, dst)
    A = _coarsen_matrix(src.spec, dst)
    vals = src.values.reshape(-1, src.spec.nlat * src.spec.nlon)
    miss = np.isnan(vals)
    num = (A @ np.where(miss, 0.0, vals).T).T
    den = (A @ (~miss).astype(float).T).T
    empty = np.asarray(A.sum(axis=1)).ravel() == 0
    if empty.any():
        log.warning("coarsen: %d destination cells cover no source center", int(empty.sum()))
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)
    if isinstance(src, GridSeries):
        return GridSeries(dst, out.reshape(-1, dst.nlat, dst.nlon), src.variable, src.start)
    return GridField(dst, out.reshape(dst.shape), src.variable, src.stamp)


# ---------------------------------------------------------------- zonal means

@dataclass
class ZonalReport:
    absent: list = field(default_factory=list)
    fallback: list = field(default_factory=list)


def zonal_aggregate(series, weights, mask, countries=None, name="value"):
    """Country means of every slice in ``series``.

    Each cell contributes ``value * weight * cos(lat)``; countries whose
    weights sum to zero fall back to a plain area-weighted mean (logged).

    Returns
    -------
    table : DataFrame with columns country, year, month, ``name``
    report : ZonalReport listing countries absent from the mask and fallbacks
    """
    if isinstance(series, GridField):
        series = GridSeries(series.spec, series.values[None], series.variable,
                            series.stamp or (0, 1))
    spec = series.spec
    if weights.spec != spec or mask.spec != spec:
        raise DataValidationError("zonal_aggregate needs series, weights and mask on one grid")
    report = ZonalReport()
    if countries is None:
        countries = list(mask.countries)
    present = []
    for c in countries:
        if c in mask.countries and (mask.codes == mask.countries.index(c)).any():
            present.append(c)
        else:
            report.absent.append(c)
    if report.absent:
        log.info("zonal: %d countries absent from mask: %s", len(report.absent), report.absent)

    area = spec.cell_area().ravel()
    w = np.nan_to_num(weights.values.ravel(), nan=0.0)
    codes = mask.codes.ravel()
    rows, cols, wvals, avals = [], [], [], []
    for r, c in enumerate(present):
        idx = np.flatnonzero(codes == mask.countries.index(c))
        cw = w[idx] * area[idx]
        if cw.sum() <= 0:
            report.fallback.append(c)
            cw = area[idx]
        rows.append(np.full(idx.size, r))
        cols.append(idx)
        wvals.append(cw)
        avals.append(area[idx])
    if report.fallback:
        log.info("zonal: zero total weight, unweighted area mean used for %s", report.fallback)
    ncell = spec.nlat * spec.nlon
    if present:
        ij = (np.concatenate(rows), np.concatenate(cols))
        M = sparse.csr_matrix((np.concatenate(wvals), ij), shape=(len(present), ncell))
        A = sparse.csr_matrix((np.concatenate(avals), ij), shape=(len(present), ncell))
    else:
        M = A = sparse.csr_matrix((0, ncell))

    vals = series.values.reshape(len(series), ncell)
    miss = np.isnan(vals)
    filled = np.where(miss, 0.0, vals).T
    num = (M @ filled).T
    den = (M @ (~miss).astype(float).T).T
    # every weighted cell missing in a slice: area mean of the cells that remain
    anum = (A @ filled).T
    aden = (A @ (~miss).astype(float).T).T
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(den > 0, num / np.where(den > 0, den, 1.0),
                       np.where(aden > 0, anum / np.where(aden > 0, aden, 1.0), np.nan))
    nfill = int(((den <= 0) & (aden > 0)).sum())
    if nfill:
        log.info("zonal: %d country-slices had no weighted data; area mean used", nfill)

    stamps = series.stamps
    years = np.repeat([s[0] for s in stamps], len(present))
    months = np.repeat([s[1] for s in stamps], len(present))
    table = pd.DataFrame({
        "country": np.tile(np.array(present, dtype=object), len(stamps)),
        "year": years,
        "month": months,
        name: out.ravel(),
    })
    return table, report
