"""Regular lat/lon grids, field stacks, irregular point observations, and
the space-time interpolation primitives shared by every other module.

Conventions: latitudes map to rows (row 0 at ``lat_min``), longitudes to
columns. Values are bilinear in space and linear in time between the two
bracketing daily slices; interpolation is exact at grid nodes and integer
days. Masked cells poison any interpolation touching them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CoverageMismatch, MaskedRegion, OutOfDomain

# Relative slack for floating-point containment tests at the domain edge.
_EDGE_TOL = 1e-9


@dataclass(frozen=True)
class GridSpec:
    """A node-registered regular grid in degrees."""

    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    step: float

    def __post_init__(self) -> None:
        if not (self.lat_max > self.lat_min and self.lon_max > self.lon_min):
            raise ValueError("grid box must have positive extent")
        if not self.step > 0:
            raise ValueError("grid step must be positive")

    @property
    def n_rows(self) -> int:
        return int(round((self.lat_max - self.lat_min) / self.step)) + 1

    @property
    def n_cols(self) -> int:
        return int(round((self.lon_max - self.lon_min) / self.step)) + 1

    def lats(self) -> np.ndarray:
        return self.lat_min + self.step * np.arange(self.n_rows)

    def lons(self) -> np.ndarray:
        return self.lon_min + self.step * np.arange(self.n_cols)

    def contains(self, lat, lon):
        """Elementwise containment test with a small edge tolerance."""
        tol = _EDGE_TOL * self.step
        return (
            (np.asarray(lat) >= self.lat_min - tol)
            & (np.asarray(lat) <= self.lat_max + tol)
            & (np.asarray(lon) >= self.lon_min - tol)
            & (np.asarray(lon) <= self.lon_max + tol)
        )


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=a.dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class FieldStack:
    """A time series of 2-D fields on one grid.

    ``values`` has shape (T, n_rows, n_cols); ``times`` are strictly
    increasing integer days. ``mask`` (optional, same shape as ``values``)
    marks missing cells with True.
    """

    grid: GridSpec
    times: np.ndarray
    values: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        times = np.asarray(self.times, dtype=np.int64)
        values = np.asarray(self.values, dtype=np.float64)
        if times.ndim != 1 or len(times) == 0:
            raise ValueError("times must be a non-empty 1-D sequence")
        if np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing")
        expect = (len(times), self.grid.n_rows, self.grid.n_cols)
        if values.shape != expect:
            raise ValueError(f"values shape {values.shape} != {expect}")
        mask = self.mask
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != values.shape:
                raise ValueError("mask shape must match values shape")
            if not np.all(np.isfinite(values[~mask])):
                raise ValueError("unmasked values must be finite")
            object.__setattr__(self, "mask", _frozen(mask))
        else:
            if not np.all(np.isfinite(values)):
                raise ValueError("values must be finite")
        object.__setattr__(self, "times", _frozen(times))
        object.__setattr__(self, "values", _frozen(values))

    @property
    def n_times(self) -> int:
        return len(self.times)

    def slice_at(self, day: int) -> np.ndarray:
        """The stored 2-D slice for an exact integer day."""
        idx = np.searchsorted(self.times, day)
        if idx >= len(self.times) or self.times[idx] != day:
            raise OutOfDomain(f"day {day} is not a stored slice")
        return self.values[idx]


@dataclass(frozen=True)
class TrackObservations:
    """Irregular point samples: real-valued day, position, field value."""

    t: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    value: np.ndarray

    def __post_init__(self) -> None:
        t = np.asarray(self.t, dtype=np.float64)
        lat = np.asarray(self.lat, dtype=np.float64)
        lon = np.asarray(self.lon, dtype=np.float64)
        value = np.asarray(self.value, dtype=np.float64)
        n = len(t)
        if not (len(lat) == len(lon) == len(value) == n):
            raise ValueError("t, lat, lon, value must have equal length")
        for name, a in (("t", t), ("lat", lat), ("lon", lon), ("value", value)):
            if a.ndim != 1:
                raise ValueError(f"{name} must be 1-D")
            if n and not np.all(np.isfinite(a)):
                raise ValueError(f"{name} must be finite")
        for name, a in (("t", t), ("lat", lat), ("lon", lon), ("value", value)):
            object.__setattr__(self, name, _frozen(a))

    def __len__(self) -> int:
        return len(self.t)

    def subset(self, index) -> "TrackObservations":
        return TrackObservations(
            self.t[index], self.lat[index], self.lon[index], self.value[index]
        )

    @staticmethod
    def empty() -> "TrackObservations":
        z = np.zeros(0)
        return TrackObservations(z, z, z, z)


@dataclass(frozen=True)
class NeighborhoodSpec:
    """Space-time window: max-norm box half-width in degrees, days."""

    radius_deg: float
    radius_days: float

    def __post_init__(self) -> None:
        if not self.radius_deg > 0:
            raise ValueError("radius_deg must be positive")
        if self.radius_days < 0:
            raise ValueError("radius_days must be non-negative")


# ---------------------------------------------------------------------------
# interpolation core


def _time_brackets(times: np.ndarray, t: np.ndarray):
    """Bracketing slice indices and interpolation weight for each query time.

    For t exactly on a stored day both indices coincide and the weight is 0.
    """
    hi = np.searchsorted(times, t, side="left")
    hi = np.minimum(hi, len(times) - 1)
    exact = times[hi] == t
    lo = np.where(exact, hi, hi - 1)
    span = times[hi] - times[lo]
    with np.errstate(invalid="ignore", divide="ignore"):
        w = np.where(exact, 0.0, (t - times[lo]) / np.where(span == 0, 1, span))
    return lo, hi, w


def _locate(grid: GridSpec, lat: np.ndarray, lon: np.ndarray):
    """Cell indices and intra-cell offsets for bilinear interpolation."""
    fr = (lat - grid.lat_min) / grid.step
    fc = (lon - grid.lon_min) / grid.step
    r0 = np.clip(np.floor(fr).astype(np.int64), 0, grid.n_rows - 2)
    c0 = np.clip(np.floor(fc).astype(np.int64), 0, grid.n_cols - 2)
    return r0, c0, fr - r0, fc - c0


def _eval_points(stack: FieldStack, t, lat, lon):
    """Vectorized space-time interpolation.

    Returns ``(values, ok)`` where ``ok`` is False wherever the point falls
    outside coverage or its four surrounding nodes touch a masked cell on a
    bracketing slice; the corresponding value entries are meaningless.
    """
    t = np.asarray(t, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    times = stack.times

    inside = stack.grid.contains(lat, lon)
    inside &= (t >= times[0]) & (t <= times[-1])
    # Clip so index math stays valid for excluded points.
    tc = np.clip(t, times[0], times[-1])
    lo, hi, wt = _time_brackets(times, tc)
    r0, c0, u, v = _locate(stack.grid, lat, lon)
    r1, c1 = r0 + 1, c0 + 1

    def corners(idx):
        vals = stack.values
        return (vals[idx, r0, c0], vals[idx, r0, c1],
                vals[idx, r1, c0], vals[idx, r1, c1])

    def bilin(idx):
        a, b, c, d = corners(idx)
        return (1 - u) * ((1 - v) * a + v * b) + u * ((1 - v) * c + v * d)

    out = (1 - wt) * bilin(lo)
    mixed = wt != 0
    if np.any(mixed):
        # Guard the second term so masked NaN cells cannot leak through
        # 0 * NaN into points that sit exactly on a slice.
        out = out + np.where(mixed, wt * bilin(hi), 0.0)

    ok = np.asarray(inside, dtype=bool)
    if stack.mask is not None:
        m = stack.mask
        touched = (m[lo, r0, c0] | m[lo, r0, c1] | m[lo, r1, c0] | m[lo, r1, c1]
                   | m[hi, r0, c0] | m[hi, r0, c1] | m[hi, r1, c0] | m[hi, r1, c1])
        ok &= ~touched
    return out, ok


def sample_field(stack: FieldStack, t: float, s: tuple[float, float]) -> float:
    """Interpolated field value at real day ``t`` and position ``s=(lat, lon)``.

    Bilinear in space on the two bracketing time slices, then linear in
    time; exact at grid nodes and stored days.
    """
    lat, lon = s
    if not bool(stack.grid.contains(lat, lon)):
        raise OutOfDomain(f"position ({lat}, {lon}) outside grid box")
    if not (stack.times[0] <= t <= stack.times[-1]):
        raise OutOfDomain(f"time {t} outside [{stack.times[0]}, {stack.times[-1]}]")
    val, ok = _eval_points(stack, np.array([t]), np.array([lat]), np.array([lon]))
    if not ok[0]:
        raise MaskedRegion(f"interpolation at ({t}, {lat}, {lon}) touches masked cells")
    return float(val[0])


def _patch_offsets(half_width: int, step: float):
    """Row-slowest patch offsets in degrees: (dlat, dlon) arrays of length (2w+1)^2."""
    offs = np.arange(-half_width, half_width + 1, dtype=np.float64) * step
    dlat = np.repeat(offs, 2 * half_width + 1)
    dlon = np.tile(offs, 2 * half_width + 1)
    return dlat, dlon


def eval_patches(stack: FieldStack, t, lat, lon, half_width: int):
    """Patch vectors around many points at once.

    Returns ``(patches, ok)`` with ``patches`` of shape (n, (2w+1)^2) in
    row-major order (latitude offset varies slowest) and ``ok`` flagging
    points whose full footprint is inside coverage and unmasked.
    """
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    lat = np.atleast_1d(np.asarray(lat, dtype=np.float64))
    lon = np.atleast_1d(np.asarray(lon, dtype=np.float64))
    dlat, dlon = _patch_offsets(half_width, stack.grid.step)
    qlat = lat[:, None] + dlat[None, :]
    qlon = lon[:, None] + dlon[None, :]
    qt = np.broadcast_to(t[:, None], qlat.shape)
    vals, ok = _eval_points(stack, qt, qlat, qlon)
    return vals, np.all(ok, axis=1)


def extract_patch(stack: FieldStack, t: float, s: tuple[float, float],
                  half_width: int) -> np.ndarray:
    """The (2w+1)^2 interpolated patch centered at ``s``, row-major.

    Every entry equals ``sample_field`` at the node-spaced offset position;
    the footprint must lie inside coverage.
    """
    lat, lon = s
    if not (stack.times[0] <= t <= stack.times[-1]):
        raise OutOfDomain(f"time {t} outside stack coverage")
    dlat, dlon = _patch_offsets(half_width, stack.grid.step)
    if not np.all(stack.grid.contains(lat + dlat, lon + dlon)):
        raise OutOfDomain(f"patch footprint at ({lat}, {lon}) leaves the grid box")
    vals, ok = eval_patches(stack, t, lat, lon, half_width)
    if not ok[0]:
        raise MaskedRegion(f"patch at ({t}, {lat}, {lon}) touches masked cells")
    return vals[0]


def upsample(lr: FieldStack, hr_grid: GridSpec) -> FieldStack:
    """Bilinear per-slice resampling of a stack onto a (finer) grid.

    Constant and bilinear fields are preserved exactly. Raises
    CoverageMismatch if ``hr_grid`` extends beyond the source box.
    """
    g = lr.grid
    tol = _EDGE_TOL * g.step
    if (hr_grid.lat_min < g.lat_min - tol or hr_grid.lat_max > g.lat_max + tol
            or hr_grid.lon_min < g.lon_min - tol or hr_grid.lon_max > g.lon_max + tol):
        raise CoverageMismatch("target grid extends beyond the source grid box")
    lat2, lon2 = np.meshgrid(hr_grid.lats(), hr_grid.lons(), indexing="ij")
    r0, c0, u, v = _locate(g, lat2.ravel(), lon2.ravel())
    r1, c1 = r0 + 1, c0 + 1
    shape = (lr.n_times, hr_grid.n_rows, hr_grid.n_cols)
    out = np.empty(shape)
    for it in range(lr.n_times):
        sl = lr.values[it]
        vals = ((1 - u) * ((1 - v) * sl[r0, c0] + v * sl[r0, c1])
                + u * ((1 - v) * sl[r1, c0] + v * sl[r1, c1]))
        out[it] = vals.reshape(hr_grid.n_rows, hr_grid.n_cols)
    mask = None
    if lr.mask is not None:
        mask = np.empty(shape, dtype=bool)
        for it in range(lr.n_times):
            m = lr.mask[it]
            touched = m[r0, c0] | m[r0, c1] | m[r1, c0] | m[r1, c1]
            mask[it] = touched.reshape(hr_grid.n_rows, hr_grid.n_cols)
    return FieldStack(hr_grid, lr.times, out, mask)


def neighborhood_query(obs: TrackObservations, t0: float, s0: tuple[float, float],
                       spec: NeighborhoodSpec) -> TrackObservations:
    """Records within the space-time box around (t0, s0).

    Time window ``|t - t0| <= radius_days``; spatial window is the max-norm
    box ``max(|dlat|, |dlon|) <= radius_deg``.
    """
    sel = neighborhood_mask(obs, t0, s0, spec)
    return obs.subset(sel)


def neighborhood_mask(obs: TrackObservations, t0: float, s0: tuple[float, float],
                      spec: NeighborhoodSpec) -> np.ndarray:
    lat0, lon0 = s0
    return (
        (np.abs(obs.t - t0) <= spec.radius_days)
        & (np.abs(obs.lat - lat0) <= spec.radius_deg)
        & (np.abs(obs.lon - lon0) <= spec.radius_deg)
    )


def standardize(stack: FieldStack) -> tuple[FieldStack, float, float]:
    """Zero-mean, unit-variance rescaling over the whole stack.

    Returns the rescaled stack together with the removed mean and the
    divisor. Masked cells are excluded from the statistics.
    """
    if stack.mask is not None:
        data = stack.values[~stack.mask]
    else:
        data = stack.values
    mean = float(np.mean(data))
    std = float(np.std(data))
    if std == 0.0:
        std = 1.0
    vals = (stack.values - mean) / std
    if stack.mask is not None:
        vals = np.where(stack.mask, 0.0, vals)
    return FieldStack(stack.grid, stack.times, vals, stack.mask), mean, std
