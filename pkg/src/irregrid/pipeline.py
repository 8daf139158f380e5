"""Locally-adapted reconstruction pipeline.

The flow: harvest unconstrained operator fits over large training
neighborhoods, learn a dictionary from them, estimate per-tile
coefficients on small calibration neighborhoods around a lattice of
anchor nodes, and average overlapping tile reconstructions into one
high-resolution field. A single global operator fit serves as baseline
and fallback.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.optimize

from .dictionaries import (Coefficients, OperatorDictionary, decode,
                           nnls_code, omp_code, project_code)
from .errors import DimensionMismatch, HarvestTooSmall, UncoveredNode
from .fields import (FieldStack, GridSpec, NeighborhoodSpec, TrackObservations,
                     neighborhood_query)
from .operators import (DesignSystem, OperatorPair, build_design, default_ridge,
                        fit_unconstrained, patch_len, solve_ridge)

_TOL = 1e-9
_DEFAULT_BUDGET = 3


@dataclass(frozen=True)
class HarvestConfig:
    """Sampling plan for the operator training set."""

    n_target: int = 1500
    train_spec: NeighborhoodSpec = NeighborhoodSpec(7.0, 10.0)
    min_rows: int | None = None      # default: 3 rows per unknown
    ridge: float | None = None       # default: scaled per system
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_target < 1:
            raise ValueError("n_target must be at least 1")


@dataclass(frozen=True)
class SRConfig:
    """Calibration lattice and tile layout for the local reconstruction."""

    sr_spec: NeighborhoodSpec = NeighborhoodSpec(2.0, 10.0)
    stride: float | None = None      # lattice spacing, default radius/2
    block: float | None = None       # tile half-width, default radius/2
    fallback: str = "global"         # 'global' or 'lowres'
    coding: str = "reduced"          # 'reduced' or 'fit_then_code'
    min_rows_factor: int = 3         # fallback when rows < factor * k

    def __post_init__(self) -> None:
        if self.fallback not in ("global", "lowres"):
            raise ValueError("fallback must be 'global' or 'lowres'")
        if self.coding not in ("reduced", "fit_then_code"):
            raise ValueError("coding must be 'reduced' or 'fit_then_code'")
        if self.stride is not None and not self.stride > 0:
            raise ValueError("stride must be positive")
        if self.block is not None and not self.block > 0:
            raise ValueError("block must be positive")

    @property
    def stride_deg(self) -> float:
        return self.stride if self.stride is not None else self.sr_spec.radius_deg / 2

    @property
    def block_deg(self) -> float:
        return self.block if self.block is not None else self.sr_spec.radius_deg / 2


class CalibrationTable:
    """Design rows for every usable observation, computed once.

    Because each row depends only on its own observation, a neighborhood's
    design system is an index slice of this table; harvesting and per-node
    coefficient estimation then avoid re-interpolating patches.
    """

    def __init__(self, obs: TrackObservations, aux_hr: FieldStack,
                 lowres_up: FieldStack, half_width: int) -> None:
        system = build_design(obs, aux_hr, lowres_up, half_width)
        self.half_width = half_width
        self.rows = system.rows
        self.rhs = system.rhs
        self.t = obs.t[system.kept]
        self.lat = obs.lat[system.kept]
        self.lon = obs.lon[system.kept]
        self.n_dropped = system.n_dropped

    @property
    def n(self) -> int:
        return len(self.rhs)

    @property
    def m(self) -> int:
        return self.rows.shape[1]

    def select(self, t0: float, s0: tuple[float, float],
               spec: NeighborhoodSpec) -> np.ndarray:
        lat0, lon0 = s0
        return np.flatnonzero(
            (np.abs(self.t - t0) <= spec.radius_days)
            & (np.abs(self.lat - lat0) <= spec.radius_deg)
            & (np.abs(self.lon - lon0) <= spec.radius_deg))


def harvest_operators(obs: TrackObservations, aux_hr: FieldStack,
                      lowres_up: FieldStack, cfg: HarvestConfig,
                      half_width: int = 1, min_samples: int = 1,
                      table: CalibrationTable | None = None):
    """Unconstrained operator fits at seeded random anchors.

    Draws ``n_target`` anchor points uniformly over the space-time domain,
    fits the joint kernel on each training neighborhood, and skips anchors
    with too few rows. Returns the (n, m) sample matrix and the matching
    (n, 3) anchor array of (t, lat, lon). Raises HarvestTooSmall when fewer
    than ``min_samples`` anchors succeed.
    """
    if table is None:
        table = CalibrationTable(obs, aux_hr, lowres_up, half_width)
    rng = np.random.default_rng(cfg.seed)
    g = lowres_up.grid
    t_lo, t_hi = float(lowres_up.times[0]), float(lowres_up.times[-1])
    anchor_t = rng.uniform(t_lo, t_hi, cfg.n_target)
    anchor_lat = rng.uniform(g.lat_min, g.lat_max, cfg.n_target)
    anchor_lon = rng.uniform(g.lon_min, g.lon_max, cfg.n_target)

    m = 2 * patch_len(half_width)
    min_rows = cfg.min_rows if cfg.min_rows is not None else 3 * m
    samples = []
    anchors = []
    for t0, lat0, lon0 in zip(anchor_t, anchor_lat, anchor_lon):
        idx = table.select(t0, (lat0, lon0), cfg.train_spec)
        if len(idx) < min_rows:
            continue
        rows = table.rows[idx]
        rhs = table.rhs[idx]
        ridge = cfg.ridge if cfg.ridge is not None else default_ridge(rows)
        samples.append(solve_ridge(rows, rhs, ridge))
        anchors.append((t0, lat0, lon0))
    if len(samples) < min_samples:
        raise HarvestTooSmall(
            f"only {len(samples)} of {cfg.n_target} anchors had enough rows "
            f"(need {min_samples})")
    return np.asarray(samples), np.asarray(anchors)


def fit_global(obs: TrackObservations, aux_hr: FieldStack,
               lowres_up: FieldStack, min_rows: int | None = None,
               ridge: float | None = None, half_width: int = 1,
               table: CalibrationTable | None = None) -> OperatorPair:
    """One unconstrained fit over the design system of all observations."""
    if table is None:
        table = CalibrationTable(obs, aux_hr, lowres_up, half_width)
    system = DesignSystem(half_width, table.rows, table.rhs,
                          np.arange(table.n), n_dropped=table.n_dropped)
    return fit_unconstrained(system, ridge=ridge, min_rows=min_rows)


def _solve_psd(gram: np.ndarray, lin: np.ndarray) -> np.ndarray:
    """Solve a (near-)PSD system, escalating a relative jitter if needed."""
    scale = float(np.trace(gram)) / max(len(gram), 1)
    if scale <= 0:
        return np.zeros(len(lin))
    for jitter in (0.0, 1e-12, 1e-10, 1e-8):
        try:
            shifted = gram + (jitter * scale) * np.eye(len(gram))
            cho = scipy.linalg.cho_factor(shifted, check_finite=False)
            return scipy.linalg.cho_solve(cho, lin, check_finite=False)
        except scipy.linalg.LinAlgError:
            continue
    sol, *_ = np.linalg.lstsq(gram, lin, rcond=None)
    return sol


def _nnls_psd(gram: np.ndarray, lin: np.ndarray) -> np.ndarray:
    """Exact non-negative LS in Gram form via an active-set solve.

    Factors ``gram = L L^T`` (with an escalating relative jitter when the
    local system is degenerate) and hands the equivalent small dense
    problem min ||L^T a - L^-1 lin|| to the exact solver.
    """
    scale = float(np.trace(gram)) / max(len(gram), 1)
    if scale <= 0:
        return np.zeros(len(lin))
    for jitter in (0.0, 1e-12, 1e-10, 1e-8):
        try:
            chol = np.linalg.cholesky(gram + (jitter * scale) * np.eye(len(gram)))
            break
        except np.linalg.LinAlgError:
            continue
    else:
        chol = np.linalg.cholesky(gram + (1e-6 * scale) * np.eye(len(gram)))
    target = scipy.linalg.solve_triangular(chol, lin, lower=True,
                                           check_finite=False)
    alpha, _ = scipy.optimize.nnls(chol.T, target)
    return alpha


def solve_local_coefficients(dictionary: OperatorDictionary, rows: np.ndarray,
                             rhs: np.ndarray, cfg: SRConfig,
                             global_op: OperatorPair | None):
    """Constrained coefficient estimate for one local design system.

    Reduced mode regresses the right-hand side directly on the k columns
    of ``rows @ atoms`` (plus the mean offset for orthogonal dictionaries)
    under the dictionary's constraint kind. fit_then_code mode first fits
    an unconstrained joint kernel and then codes it. Falls back to the
    global operator (or the zero operator) when the system is too small.
    """
    rows = np.asarray(rows, dtype=np.float64)
    rhs = np.asarray(rhs, dtype=np.float64)
    gram = rows.T @ rows
    lin = rows.T @ rhs
    return solve_local_from_gram(dictionary, gram, lin, len(rhs), cfg,
                                 global_op)


def solve_local_from_gram(dictionary: OperatorDictionary, gram: np.ndarray,
                          lin: np.ndarray, n_rows: int, cfg: SRConfig,
                          global_op: OperatorPair | None):
    """Gram-form core of the local coefficient estimation.

    ``gram = rows.T @ rows`` and ``lin = rows.T @ rhs`` carry everything
    the normal equations need, so callers that evaluate many dictionaries
    on one neighborhood can share them.
    """
    k = dictionary.k
    half_width = (int(round(np.sqrt(dictionary.m // 2))) - 1) // 2
    if n_rows < cfg.min_rows_factor * k:
        if cfg.fallback == "global" and global_op is not None:
            return global_op, {"rows": n_rows, "fallback": "global"}
        return OperatorPair.zeros(half_width), {"rows": n_rows,
                                                "fallback": "lowres"}

    atoms = dictionary.atoms
    budget = int(dictionary.meta.get("t0", _DEFAULT_BUDGET))
    if cfg.coding == "reduced":
        lin_eff = lin
        if np.any(dictionary.mean):
            lin_eff = lin - gram @ dictionary.mean
        red_gram = atoms.T @ gram @ atoms
        red_lin = atoms.T @ lin_eff
        if dictionary.kind == "nonneg":
            alpha = _nnls_psd(red_gram, red_lin)
        else:
            alpha = _solve_psd(red_gram, red_lin)
            if dictionary.kind == "sparse":
                loose = atoms @ alpha
                alpha = omp_code(dictionary, loose, budget).alpha
    else:
        ridge = 1e-6 * float(np.trace(gram)) / gram.shape[0]
        joint = _solve_psd(gram + ridge * np.eye(gram.shape[0]), lin)
        if dictionary.kind == "orthogonal":
            alpha = project_code(dictionary, joint).alpha
        elif dictionary.kind == "sparse":
            alpha = omp_code(dictionary, joint, budget).alpha
        else:
            alpha = nnls_code(dictionary, joint).alpha
    op = decode(dictionary, Coefficients(alpha))
    return op, {"rows": n_rows, "fallback": None, "alpha": alpha}


def local_coefficients(dictionary: OperatorDictionary, obs: TrackObservations,
                       aux_hr: FieldStack, lowres_up: FieldStack, day: float,
                       s_star: tuple[float, float], cfg: SRConfig,
                       global_op: OperatorPair | None,
                       half_width: int = 1):
    """Locally-adapted operator around one space-time anchor."""
    subset = neighborhood_query(obs, day, s_star, cfg.sr_spec)
    system = build_design(subset, aux_hr, lowres_up, half_width)
    return solve_local_coefficients(dictionary, system.rows, system.rhs,
                                    cfg, global_op)


# ---------------------------------------------------------------------------
# tiled reconstruction


def _axis_nodes(lo: float, hi: float, block: float, stride: float) -> list[float]:
    if hi - lo <= 2 * block:
        return [0.5 * (lo + hi)]
    xs = list(np.arange(lo + block, hi - block + _TOL * stride, stride))
    if xs[-1] < hi - block - _TOL * stride:
        xs.append(hi - block)
    return xs


def lattice_nodes(grid: GridSpec, cfg: SRConfig) -> list[tuple[float, float]]:
    """Calibration anchors: a regular lattice inset by the tile half-width.

    Edge tiles are later clamped to the grid so the borders stay covered.
    Row-major ordering (latitude slowest).
    """
    lat_nodes = _axis_nodes(grid.lat_min, grid.lat_max, cfg.block_deg, cfg.stride_deg)
    lon_nodes = _axis_nodes(grid.lon_min, grid.lon_max, cfg.block_deg, cfg.stride_deg)
    return [(la, lo) for la in lat_nodes for lo in lon_nodes]


def _axis_ranges(nodes: list[float], lo: float, hi: float, block: float,
                 axis_min: float, step: float, count: int):
    """Inclusive index ranges of each node's tile, clamped at the borders."""
    out = []
    for i, x in enumerate(nodes):
        a = lo if i == 0 else x - block
        b = hi if i == len(nodes) - 1 else x + block
        i0 = max(0, int(np.ceil((a - axis_min) / step - _TOL)))
        i1 = min(count - 1, int(np.floor((b - axis_min) / step + _TOL)))
        out.append((i0, i1))
    return out


def lattice_tiles(grid: GridSpec, cfg: SRConfig):
    """Lattice nodes with their inclusive (row, col) tile index ranges."""
    lat_nodes = _axis_nodes(grid.lat_min, grid.lat_max, cfg.block_deg, cfg.stride_deg)
    lon_nodes = _axis_nodes(grid.lon_min, grid.lon_max, cfg.block_deg, cfg.stride_deg)
    lat_ranges = _axis_ranges(lat_nodes, grid.lat_min, grid.lat_max, cfg.block_deg,
                              grid.lat_min, grid.step, grid.n_rows)
    lon_ranges = _axis_ranges(lon_nodes, grid.lon_min, grid.lon_max, cfg.block_deg,
                              grid.lon_min, grid.step, grid.n_cols)
    tiles = []
    for la, (r0, r1) in zip(lat_nodes, lat_ranges):
        for lo, (c0, c1) in zip(lon_nodes, lon_ranges):
            tiles.append(((la, lo), (r0, r1, c0, c1)))
    return tiles


def apply_operator(op: OperatorPair, lr_slice: np.ndarray,
                   aux_slice: np.ndarray) -> np.ndarray:
    """Correction field of one operator over a whole slice.

    The border ring whose patch footprint would leave the grid gets a zero
    correction, mirroring how calibration drops such observations.
    """
    w = op.half_width
    n_rows, n_cols = lr_slice.shape
    side = 2 * w + 1
    k_lr = op.kernel_lr.reshape(side, side)
    k_aux = op.kernel_aux.reshape(side, side)
    out = np.zeros((n_rows, n_cols))
    if n_rows <= 2 * w or n_cols <= 2 * w:
        return out
    acc = np.zeros((n_rows - 2 * w, n_cols - 2 * w))
    for i in range(side):
        for j in range(side):
            block_lr = lr_slice[i:n_rows - 2 * w + i, j:n_cols - 2 * w + j]
            block_aux = aux_slice[i:n_rows - 2 * w + i, j:n_cols - 2 * w + j]
            acc += k_lr[i, j] * block_lr + k_aux[i, j] * block_aux
    out[w:n_rows - w, w:n_cols - w] = acc
    return out


def reconstruct(models, aux_hr: FieldStack, lowres_up: FieldStack, day: int,
                cfg: SRConfig) -> np.ndarray:
    """Overlap-averaged high-resolution slice for one day.

    ``models`` is a sequence of OperatorPair aligned with
    ``lattice_nodes(grid, cfg)``. Every node inside a tile receives that
    tile's correction; overlapping tiles are combined by unweighted mean
    and added to the upsampled low-resolution slice.
    """
    grid = lowres_up.grid
    if aux_hr.grid != grid:
        raise DimensionMismatch("auxiliary and low-resolution grids differ")
    tiles = lattice_tiles(grid, cfg)
    if len(models) != len(tiles):
        raise DimensionMismatch(
            f"{len(models)} models for {len(tiles)} lattice nodes")
    lr_slice = lowres_up.slice_at(day)
    aux_slice = aux_hr.slice_at(day)
    acc = np.zeros_like(lr_slice)
    cnt = np.zeros(lr_slice.shape, dtype=np.int64)
    for (_, (r0, r1, c0, c1)), op in zip(tiles, models):
        detail = apply_operator(op, lr_slice, aux_slice)
        acc[r0:r1 + 1, c0:c1 + 1] += detail[r0:r1 + 1, c0:c1 + 1]
        cnt[r0:r1 + 1, c0:c1 + 1] += 1
    if np.any(cnt == 0):
        raise UncoveredNode(
            f"{int(np.sum(cnt == 0))} grid nodes fall outside every tile")
    return lr_slice + acc / cnt


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class RmseReport:
    """Per-day relative errors with their mean and a histogram."""

    days: np.ndarray
    per_day: np.ndarray
    mean: float
    hist_counts: np.ndarray
    hist_edges: np.ndarray


def evaluate_rmse(estimate: FieldStack, truth: FieldStack,
                  bins: int = 30) -> RmseReport:
    """Relative RMSE per day: RMS error over the RMS spatial anomaly of truth."""
    if estimate.grid != truth.grid:
        raise DimensionMismatch("estimate and truth grids differ")
    if not np.array_equal(estimate.times, truth.times):
        raise DimensionMismatch("estimate and truth times differ")
    per_day = np.empty(truth.n_times)
    for i in range(truth.n_times):
        e = estimate.values[i]
        t = truth.values[i]
        valid = np.ones(t.shape, dtype=bool)
        if estimate.mask is not None:
            valid &= ~estimate.mask[i]
        if truth.mask is not None:
            valid &= ~truth.mask[i]
        err = e[valid] - t[valid]
        anom = t[valid] - np.mean(t[valid])
        num = float(np.sqrt(np.mean(err ** 2)))
        den = float(np.sqrt(np.mean(anom ** 2)))
        if den > 0:
            per_day[i] = num / den
        else:
            per_day[i] = 0.0 if num == 0 else np.inf
    counts, edges = np.histogram(per_day, bins=bins)
    return RmseReport(np.asarray(truth.times), per_day, float(np.mean(per_day)),
                      counts, edges)
