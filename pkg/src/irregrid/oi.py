"""Low-resolution baseline by optimal interpolation (simple kriging).

A Gaussian covariance in the scaled space-time metric
``d^2 = (dlat^2 + dlon^2) / length_deg^2 + (dt / length_days)^2`` drives a
per-node kriging solve over the nearest observations, around the global
observation mean.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import InsufficientData, SingularSystem
from .fields import FieldStack, GridSpec, TrackObservations

_CHUNK = 512  # analysis nodes per batched solve


@dataclass(frozen=True)
class OICovarianceParams:
    """Gaussian space-time covariance and neighbor cap for the analysis."""

    variance: float                # signal variance (field units^2)
    length_deg: float = 1.0        # spatial decorrelation length (degrees)
    length_days: float = 10.0      # temporal decorrelation scale (days)
    noise_variance: float = 0.0    # observation noise variance
    max_neighbors: int = 100       # observations used per analysis point

    def __post_init__(self) -> None:
        if not self.variance > 0:
            raise ValueError("variance must be positive")
        if not (self.length_deg > 0 and self.length_days > 0):
            raise ValueError("decorrelation lengths must be positive")
        if self.noise_variance < 0:
            raise ValueError("noise_variance must be non-negative")
        if self.max_neighbors < 1:
            raise ValueError("max_neighbors must be at least 1")

    @classmethod
    def for_observations(cls, obs: TrackObservations, **overrides) -> "OICovarianceParams":
        """Defaults tied to the data: variance from the observation spread,
        noise at 1% of it."""
        var = float(np.var(obs.value))
        if var == 0:
            var = 1.0
        params = {"variance": var, "noise_variance": 0.01 * var}
        params.update(overrides)
        return cls(**params)


def oi_reconstruct(obs: TrackObservations, grid: GridSpec, times,
                   params: OICovarianceParams, jobs: int = 1) -> FieldStack:
    """Kriging analysis of the observations on every grid node and day.

    For each analysis point the ``max_neighbors`` nearest observations in
    the scaled metric enter a regularized Gaussian kriging system; the
    estimate is the weighted sum of observation deviations from the global
    mean, plus that mean. Deterministic given inputs.
    """
    if len(obs) == 0:
        raise InsufficientData("optimal interpolation requires at least one observation")
    times = np.asarray(times, dtype=np.int64)
    # Exact repeats of one record carry no new information and would make
    # the zero-noise system singular; collapse them so the analysis is
    # idempotent under duplication. Same-position records with different
    # values are kept (and still trip SingularSystem when noise is zero).
    records = np.column_stack([obs.t, obs.lat, obs.lon, obs.value])
    _, first = np.unique(records, axis=0, return_index=True)
    if len(first) < len(obs):
        obs = obs.subset(np.sort(first))
    scaled = np.column_stack([
        obs.lat / params.length_deg,
        obs.lon / params.length_deg,
        obs.t / params.length_days,
    ])
    tree = cKDTree(scaled)
    mean = float(np.mean(obs.value))
    dev = obs.value - mean
    k = min(params.max_neighbors, len(obs))

    lat2, lon2 = np.meshgrid(grid.lats(), grid.lons(), indexing="ij")
    node_lat = lat2.ravel() / params.length_deg
    node_lon = lon2.ravel() / params.length_deg
    n_nodes = node_lat.size

    def analyze_day(day: int) -> np.ndarray:
        pts = np.column_stack([
            node_lat, node_lon,
            np.full(n_nodes, day / params.length_days),
        ])
        dist, idx = tree.query(pts, k=k)
        dist = dist.reshape(n_nodes, k)
        idx = idx.reshape(n_nodes, k)
        est = np.empty(n_nodes)
        for start in range(0, n_nodes, _CHUNK):
            sl = slice(start, min(start + _CHUNK, n_nodes))
            sel = scaled[idx[sl]]                      # (c, k, 3)
            sq = np.einsum("ckd,ckd->ck", sel, sel)
            inner = sel @ sel.transpose(0, 2, 1)
            d2 = np.maximum(sq[:, :, None] + sq[:, None, :] - 2.0 * inner, 0.0)
            cov = params.variance * np.exp(-d2)
            cov[:, np.arange(k), np.arange(k)] += params.noise_variance
            rhs = params.variance * np.exp(-dist[sl] ** 2)
            try:
                w = np.linalg.solve(cov, rhs[..., None])[..., 0]
            except np.linalg.LinAlgError as exc:
                raise SingularSystem(
                    "kriging system is singular (duplicate observations "
                    "with zero noise variance?)") from exc
            est[sl] = np.einsum("ck,ck->c", w, dev[idx[sl]])
        return est.reshape(grid.n_rows, grid.n_cols) + mean

    values = np.empty((len(times), grid.n_rows, grid.n_cols))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for i, sl in enumerate(pool.map(analyze_day, [int(t) for t in times])):
                values[i] = sl
    else:
        for i, t in enumerate(times):
            values[i] = analyze_day(int(t))
    return FieldStack(grid, times, values)
