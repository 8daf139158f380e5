"""Seeded synthetic observing system: truth fields, along-track sampling,
and the end-to-end comparison experiment.

The truth field is a smooth polynomial background plus drifting Gaussian
eddies; the auxiliary field shares the truth's fine-scale structure (its
high-pass detail) with a smooth confounder and independent noise mixed in,
so it genuinely informs the reconstruction of scales the low-resolution
baseline cannot resolve.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .dictionaries import OperatorDictionary, ksvd_fit, nn_fit, pca_fit
from .errors import HarvestTooSmall, IrregridError
from .fields import (FieldStack, GridSpec, TrackObservations, _eval_points,
                     standardize, upsample)
from .oi import OICovarianceParams, oi_reconstruct
from .operators import OperatorPair
from .pipeline import (CalibrationTable, HarvestConfig, RmseReport, SRConfig,
                       evaluate_rmse, fit_global, harvest_operators,
                       lattice_tiles, reconstruct, solve_local_from_gram)

_DEFAULT_GRID = GridSpec(36.5, 40.0, 1.5, 8.5, 0.05)
_CONFOUNDER_FRACTION = 0.35  # smooth nuisance amplitude relative to detail std


@dataclass(frozen=True)
class TruthParams:
    """Generator settings for the paired truth and auxiliary stacks."""

    grid: GridSpec = _DEFAULT_GRID
    n_days: int = 120
    n_eddies: int = 25
    amp_range: tuple[float, float] = (0.05, 0.25)
    radius_range: tuple[float, float] = (0.06, 0.3)
    drift_range: tuple[float, float] = (0.1, 0.4)
    background_amplitude: float = 0.3
    x_coupling: float = 0.7
    x_noise: float | None = None     # None: 0.3 * detail standard deviation
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_days < 1:
            raise ValueError("n_days must be at least 1")
        if self.n_eddies < 0:
            raise ValueError("n_eddies must be non-negative")
        if self.radius_range[0] <= 0:
            raise ValueError("eddy radii must be positive")


@dataclass(frozen=True)
class TrackParams:
    """Along-track sampling pattern settings."""

    n_tracks_per_day: int = 4
    azimuth_range: tuple[float, float] = (15.0, 165.0)
    spacing: float = 0.05
    obs_noise: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        if self.obs_noise < 0:
            raise ValueError("obs_noise must be non-negative")


def _reflect(x, lo: float, hi: float):
    """Fold positions into [lo, hi] by reflection (continuous triangle wave)."""
    period = 2.0 * (hi - lo)
    y = np.mod(x - lo, period)
    return lo + np.minimum(y, period - y)


def _background(grid: GridSpec, amplitude: float) -> np.ndarray:
    """Fixed low-order polynomial ramp scaled to the requested amplitude."""
    lat2, lon2 = np.meshgrid(grid.lats(), grid.lons(), indexing="ij")
    u = (lat2 - grid.lat_min) / (grid.lat_max - grid.lat_min) - 0.5
    v = (lon2 - grid.lon_min) / (grid.lon_max - grid.lon_min) - 0.5
    ramp = u + 0.6 * v - 0.8 * u * v + 0.4 * v * v
    peak = np.max(np.abs(ramp))
    if peak == 0:
        return np.zeros_like(ramp)
    return amplitude * ramp / peak


def generate_truth(p: TruthParams) -> tuple[FieldStack, FieldStack]:
    """Seeded truth stack and coupled auxiliary stack.

    Truth: background ramp plus Gaussian eddies whose centers drift
    linearly in time (reflecting at the domain walls so the eddy field
    stays stationary over long runs). Auxiliary: coupling times the
    truth's high-pass detail (truth minus a Gaussian blur at the largest
    eddy radius), plus an independent smooth field and white noise.
    """
    rng = np.random.default_rng(p.seed)
    grid = p.grid
    times = np.arange(p.n_days, dtype=np.int64)
    lat2, lon2 = np.meshgrid(grid.lats(), grid.lons(), indexing="ij")

    n = p.n_eddies
    eddy_lat = rng.uniform(grid.lat_min, grid.lat_max, n)
    eddy_lon = rng.uniform(grid.lon_min, grid.lon_max, n)
    eddy_amp = rng.uniform(*p.amp_range, n) * rng.choice([-1.0, 1.0], n)
    eddy_rad = rng.uniform(*p.radius_range, n)
    drift_speed = rng.uniform(*p.drift_range, n)
    drift_dir = rng.uniform(0.0, 2.0 * np.pi, n)
    v_lat = drift_speed * np.sin(drift_dir)
    v_lon = drift_speed * np.cos(drift_dir)

    bg = _background(grid, p.background_amplitude)
    truth = np.empty((p.n_days, grid.n_rows, grid.n_cols))
    for it, day in enumerate(times):
        sl = bg.copy()
        for e in range(n):
            clat = _reflect(eddy_lat[e] + v_lat[e] * day, grid.lat_min, grid.lat_max)
            clon = _reflect(eddy_lon[e] + v_lon[e] * day, grid.lon_min, grid.lon_max)
            r2 = (lat2 - clat) ** 2 + (lon2 - clon) ** 2
            sl += eddy_amp[e] * np.exp(-r2 / (2.0 * eddy_rad[e] ** 2))
        truth[it] = sl

    blur_sigma = p.radius_range[1] / grid.step
    detail = np.empty_like(truth)
    for it in range(p.n_days):
        detail[it] = truth[it] - gaussian_filter(truth[it], blur_sigma,
                                                 mode="nearest")
    detail_std = float(np.std(detail))
    noise_std = p.x_noise if p.x_noise is not None else 0.3 * detail_std
    confounder_std = _CONFOUNDER_FRACTION * detail_std

    aux = p.x_coupling * detail
    smooth = rng.standard_normal(truth.shape)
    for it in range(p.n_days):
        smooth[it] = gaussian_filter(smooth[it], blur_sigma, mode="nearest")
    s_std = float(np.std(smooth))
    if s_std > 0 and confounder_std > 0:
        aux = aux + smooth * (confounder_std / s_std)
    if noise_std > 0:
        aux = aux + rng.standard_normal(truth.shape) * noise_std

    return (FieldStack(grid, times, truth), FieldStack(grid, times, aux))


def _clip_to_box(anchor: np.ndarray, direction: np.ndarray,
                 grid: GridSpec) -> tuple[float, float] | None:
    """Parameter interval of the line anchor + s*direction inside the box."""
    s_lo, s_hi = -np.inf, np.inf
    for coord, d, lo, hi in (
            (anchor[0], direction[0], grid.lat_min, grid.lat_max),
            (anchor[1], direction[1], grid.lon_min, grid.lon_max)):
        if abs(d) < 1e-15:
            if not lo <= coord <= hi:
                return None
            continue
        a = (lo - coord) / d
        b = (hi - coord) / d
        s_lo = max(s_lo, min(a, b))
        s_hi = min(s_hi, max(a, b))
    if s_hi <= s_lo:
        return None
    return float(s_lo), float(s_hi)


def simulate_tracks(truth: FieldStack, p: TrackParams) -> TrackObservations:
    """Straight-line along-track samples of the truth stack.

    Per stored day, ``n_tracks_per_day`` seeded lines (random azimuth and
    anchor) are clipped to the grid box and sampled every ``spacing``
    degrees; observation times carry a seeded sub-day offset (clamped at
    the final day so every sample stays inside time coverage).
    """
    rng = np.random.default_rng(p.seed)
    grid = truth.grid
    t_last = float(truth.times[-1])
    all_t, all_lat, all_lon = [], [], []
    for day in truth.times:
        for _ in range(p.n_tracks_per_day):
            azim = np.deg2rad(rng.uniform(*p.azimuth_range))
            anchor = np.array([
                rng.uniform(grid.lat_min, grid.lat_max),
                rng.uniform(grid.lon_min, grid.lon_max),
            ])
            offset = rng.uniform(0.0, 1.0)
            direction = np.array([np.sin(azim), np.cos(azim)])
            span = _clip_to_box(anchor, direction, grid)
            if span is None:
                continue
            s_lo, s_hi = span
            steps = np.arange(s_lo, s_hi + 1e-12, p.spacing)
            lat = np.clip(anchor[0] + steps * direction[0],
                          grid.lat_min, grid.lat_max)
            lon = np.clip(anchor[1] + steps * direction[1],
                          grid.lon_min, grid.lon_max)
            t = np.full(len(steps), min(float(day) + offset, t_last))
            all_t.append(t)
            all_lat.append(lat)
            all_lon.append(lon)
    if not all_t:
        return TrackObservations.empty()
    t = np.concatenate(all_t)
    lat = np.concatenate(all_lat)
    lon = np.concatenate(all_lon)
    values, ok = _eval_points(truth, t, lat, lon)
    if not np.all(ok):
        raise IrregridError("track sampling produced out-of-coverage points")
    if p.obs_noise > 0:
        values = values + rng.normal(0.0, p.obs_noise, len(values))
    return TrackObservations(t, lat, lon, values)


# ---------------------------------------------------------------------------
# experiment assembly


@dataclass(frozen=True)
class MethodSpec:
    """One dictionary method to evaluate, possibly at several sizes."""

    kind: str                       # 'pca' | 'ksvd' | 'nn' | 'zero'
    k_values: tuple[int, ...] = (2, 5, 10)
    budget: int = 3                 # sparsity budget (ksvd coding)
    iters: int = 30                 # training iterations (ksvd / nn)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("pca", "ksvd", "nn", "zero"):
            raise ValueError(f"unknown method kind {self.kind!r}")
        if any(k < 1 for k in self.k_values):
            raise ValueError("dictionary sizes must be at least 1")


def default_methods() -> tuple[MethodSpec, ...]:
    return (MethodSpec("pca"), MethodSpec("ksvd"), MethodSpec("nn", iters=100))


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to run the seeded comparison end to end."""

    truth: TruthParams = TruthParams()
    tracks: TrackParams = TrackParams(seed=1)
    oi_step: float = 0.125
    oi: OICovarianceParams | None = None   # None: derive from observations
    oi_overrides: dict = field(default_factory=dict)
    harvest: HarvestConfig = HarvestConfig(seed=2)
    sr: SRConfig = SRConfig()
    methods: tuple[MethodSpec, ...] = field(default_factory=default_methods)
    half_width: int = 1
    bins: int = 30
    jobs: int = 4

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Override every stage seed at once (CLI environment hook)."""
        return replace(
            self,
            truth=replace(self.truth, seed=seed),
            tracks=replace(self.tracks, seed=seed),
            harvest=replace(self.harvest, seed=seed),
            methods=tuple(replace(m, seed=seed) for m in self.methods),
        )


@dataclass
class ExperimentReport:
    """Outputs of one experiment run.

    ``series`` maps a column name ('lr', 'global', '<kind>_k<K>') to its
    RmseReport; ``stacks`` holds the matching reconstruction stacks;
    ``failures`` maps combo names to error strings when a method could not
    complete (the rest of the report is still filled in).
    """

    days: np.ndarray
    series: dict[str, RmseReport]
    stacks: dict[str, FieldStack]
    truth: FieldStack
    aux: FieldStack
    observations: TrackObservations
    baseline_lr: FieldStack
    dictionaries: dict[str, OperatorDictionary]
    global_op: OperatorPair | None
    diagnostics: dict[str, dict]
    failures: dict[str, str]


def _combo_name(kind: str, k: int) -> str:
    return f"{kind}_k{k}"


def _train_dictionary(spec: MethodSpec, k: int, samples: np.ndarray):
    if spec.kind == "pca":
        return pca_fit(samples, k)
    if spec.kind == "ksvd":
        return ksvd_fit(samples, k, min(spec.budget, k), iters=spec.iters,
                        seed=spec.seed)
    if spec.kind == "nn":
        return nn_fit(samples, k, iters=spec.iters, seed=spec.seed)
    return None  # 'zero' needs no dictionary


def reconstruct_combos(obs: TrackObservations, aux_std: FieldStack,
                       lowres_up: FieldStack, combos, global_op,
                       sr: SRConfig, half_width: int = 1, jobs: int = 1,
                       table: CalibrationTable | None = None):
    """Daily locally-adapted reconstructions for each (name, dictionary).

    A ``None`` dictionary paints the zero operator everywhere (the smoke
    baseline); when ``global_op`` is given, a 'global' series is added.
    Returns (stacks, fallback_counts) keyed by combo name.
    """
    if table is None:
        table = CalibrationTable(obs, aux_std, lowres_up, half_width)
    grid = lowres_up.grid
    tiles = lattice_tiles(grid, sr)
    fallback_counts = {name: 0 for name, d in combos if d is not None}

    def solve_day(day: int):
        # One Gram accumulation per lattice node, shared by every combo.
        node_grams = []
        for (node, _) in tiles:
            idx = table.select(float(day), node, sr.sr_spec)
            rows = table.rows[idx]
            rhs = table.rhs[idx]
            node_grams.append((rows.T @ rows, rows.T @ rhs, len(idx)))
        out = {}
        counts = {}
        for name, d in combos:
            if d is None:
                models = [OperatorPair.zeros(half_width)] * len(tiles)
            else:
                models = []
                n_fallback = 0
                for gram, lin, n_rows in node_grams:
                    op, diag = solve_local_from_gram(d, gram, lin, n_rows, sr,
                                                     global_op)
                    if diag.get("fallback"):
                        n_fallback += 1
                    models.append(op)
                counts[name] = n_fallback
            out[name] = reconstruct(models, aux_std, lowres_up, day, sr)
        if global_op is not None:
            out["global"] = reconstruct([global_op] * len(tiles), aux_std,
                                        lowres_up, day, sr)
        return out, counts

    day_list = [int(t) for t in lowres_up.times]
    per_day: list[dict] = [None] * len(day_list)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for i, (slices, counts) in enumerate(pool.map(solve_day, day_list)):
                per_day[i] = slices
                for name, c in counts.items():
                    fallback_counts[name] += c
    else:
        for i, day in enumerate(day_list):
            slices, counts = solve_day(day)
            per_day[i] = slices
            for name, c in counts.items():
                fallback_counts[name] += c

    names = [name for name, _ in combos]
    if global_op is not None:
        names.append("global")
    stacks = {}
    for name in names:
        vals = np.stack([per_day[i][name] for i in range(len(day_list))])
        stacks[name] = FieldStack(grid, lowres_up.times, vals)
    return stacks, fallback_counts


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    """Generate data, build the baseline, train, reconstruct, and score.

    Method failures are recorded per combo instead of aborting the run;
    the baseline column is always present.
    """
    truth, aux_raw = generate_truth(config.truth)
    obs = simulate_tracks(truth, config.tracks)
    grid = truth.grid

    lr_grid = GridSpec(grid.lat_min, grid.lat_max, grid.lon_min, grid.lon_max,
                       config.oi_step)
    oi_params = config.oi if config.oi is not None else \
        OICovarianceParams.for_observations(obs, **config.oi_overrides)
    baseline_lr = oi_reconstruct(obs, lr_grid, truth.times, oi_params,
                                 jobs=config.jobs)
    lowres_up = upsample(baseline_lr, grid)
    aux, _, _ = standardize(aux_raw)

    series: dict[str, RmseReport] = {}
    stacks: dict[str, FieldStack] = {}
    failures: dict[str, str] = {}
    diagnostics: dict[str, dict] = {}
    dictionaries: dict[str, OperatorDictionary] = {}

    series["lr"] = evaluate_rmse(lowres_up, truth, bins=config.bins)
    stacks["lr"] = lowres_up

    global_op: OperatorPair | None = None
    if config.methods:
        table = CalibrationTable(obs, aux, lowres_up, config.half_width)
        diagnostics["calibration"] = {"rows": table.n, "dropped": table.n_dropped}
        try:
            global_op = fit_global(obs, aux, lowres_up, table=table)
        except IrregridError as exc:
            failures["global"] = f"{exc.code}: {exc}"

        needs_harvest = any(m.kind != "zero" for m in config.methods)
        samples = anchors = None
        if needs_harvest:
            max_k = max((k for m in config.methods if m.kind != "zero"
                         for k in m.k_values), default=1)
            try:
                samples, anchors = harvest_operators(
                    obs, aux, lowres_up, config.harvest,
                    half_width=config.half_width, min_samples=max_k, table=table)
                diagnostics["harvest"] = {
                    "requested": config.harvest.n_target,
                    "succeeded": len(samples),
                }
            except HarvestTooSmall as exc:
                failures["harvest"] = f"{exc.code}: {exc}"

        combos = []
        for m in config.methods:
            if m.kind == "zero":
                combos.append(("zero", None))
                continue
            for k in m.k_values:
                name = _combo_name(m.kind, k)
                if samples is None:
                    failures[name] = failures.get("harvest", "harvest unavailable")
                    continue
                try:
                    d = _train_dictionary(m, k, samples)
                    dictionaries[name] = d
                    combos.append((name, d))
                except IrregridError as exc:
                    failures[name] = f"{exc.code}: {exc}"

        recon_stacks, fallback_counts = reconstruct_combos(
            obs, aux, lowres_up, combos, global_op, config.sr,
            half_width=config.half_width, jobs=config.jobs, table=table)
        for name, stack in recon_stacks.items():
            stacks[name] = stack
            series[name] = evaluate_rmse(stack, truth, bins=config.bins)
            if name in fallback_counts:
                diagnostics.setdefault(name, {})["fallback_count"] = \
                    fallback_counts[name]

    return ExperimentReport(
        days=np.asarray(truth.times),
        series=series,
        stacks=stacks,
        truth=truth,
        aux=aux_raw,
        observations=obs,
        baseline_lr=baseline_lr,
        dictionaries=dictionaries,
        global_op=global_op,
        diagnostics=diagnostics,
        failures=failures,
    )
