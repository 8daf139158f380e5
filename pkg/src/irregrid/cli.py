"""Command-line pipeline: gen, oi, train, reconstruct, eval, report.

A single JSON config document drives every stage; ``--set key=value``
overrides dotted paths and the IRREGRID_SEED environment variable
overrides every stage seed at once. All stages are deterministic given
identical inputs and seeds.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .dictionaries import load_dictionary, save_dictionary
from .errors import IoError, IrregridError
from .fields import GridSpec, NeighborhoodSpec, standardize, upsample
from .oi import OICovarianceParams, oi_reconstruct
from .operators import OperatorPair
from .pipeline import (CalibrationTable, HarvestConfig, SRConfig, evaluate_rmse,
                       fit_global, harvest_operators)
from .synth import (ExperimentConfig, MethodSpec, TrackParams, TruthParams,
                    _train_dictionary, generate_truth, reconstruct_combos,
                    run_experiment, simulate_tracks)

_DEFAULT_CONFIG: dict = {
    "seed": None,
    "out_dir": "irregrid_out",
    "paths": {},
    "truth": {},
    "tracks": {"seed": 1},
    "oi": {"step": 0.125},
    "harvest": {"seed": 2},
    "sr": {},
    "methods": [
        {"kind": "pca", "k": [2, 5, 10]},
        {"kind": "ksvd", "k": [2, 5, 10]},
        {"kind": "nn", "k": [2, 5, 10], "iters": 100},
    ],
    "half_width": 1,
    "bins": 30,
    "jobs": 4,
    "render_day": None,
}

_FILES = {
    "truth": "truth.fld",
    "aux": "aux.fld",
    "obs": "obs.csv",
    "baseline": "baseline.fld",
    "global_op": "global_op.json",
    "metrics": "metrics.csv",
    "hist": "hist.csv",
    "table": "table.csv",
}


# ---------------------------------------------------------------------------
# configuration plumbing


def _deep_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in extra.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _parse_set(expr: str) -> tuple[list[str], object]:
    if "=" not in expr:
        raise ValueError(f"--set expects key=value, got {expr!r}")
    key, raw = expr.split("=", 1)
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    return key.split("."), val


def load_config(path: str | None, overrides: list[str] | None = None) -> dict:
    cfg = copy.deepcopy(_DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path) as fh:
                cfg = _deep_merge(cfg, json.load(fh))
        except OSError as exc:
            raise IoError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise IoError(f"malformed config {path}: {exc}") from exc
    for expr in overrides or []:
        keys, val = _parse_set(expr)
        node = cfg
        for key in keys[:-1]:
            node = node.setdefault(key, {})
        node[keys[-1]] = val
    env_seed = os.environ.get("IRREGRID_SEED")
    if env_seed is not None:
        cfg["seed"] = int(env_seed)
    return cfg


def _grid_from(cfg: dict | None) -> GridSpec | None:
    if not cfg:
        return None
    return GridSpec(cfg["lat_min"], cfg["lat_max"], cfg["lon_min"],
                    cfg["lon_max"], cfg["step"])


def _truth_params(cfg: dict) -> TruthParams:
    block = dict(cfg.get("truth", {}))
    grid = _grid_from(block.pop("grid", None))
    kwargs = {}
    for key in ("n_days", "n_eddies", "background_amplitude", "x_coupling",
                "x_noise", "seed"):
        if key in block:
            kwargs[key] = block[key]
    for key in ("amp_range", "radius_range", "drift_range"):
        if key in block:
            kwargs[key] = tuple(block[key])
    if grid is not None:
        kwargs["grid"] = grid
    if cfg.get("seed") is not None:
        kwargs["seed"] = cfg["seed"]
    return TruthParams(**kwargs)


def _track_params(cfg: dict) -> TrackParams:
    block = dict(cfg.get("tracks", {}))
    kwargs = {k: block[k] for k in
              ("n_tracks_per_day", "spacing", "obs_noise", "seed") if k in block}
    if "azimuth_range" in block:
        kwargs["azimuth_range"] = tuple(block["azimuth_range"])
    if cfg.get("seed") is not None:
        kwargs["seed"] = cfg["seed"]
    return TrackParams(**kwargs)


def _oi_params(cfg: dict, obs) -> tuple[float, OICovarianceParams]:
    block = dict(cfg.get("oi", {}))
    step = block.pop("step", 0.125)
    known = {k: block[k] for k in
             ("variance", "length_deg", "length_days", "noise_variance",
              "max_neighbors") if block.get(k) is not None}
    if "variance" in known:
        params = OICovarianceParams(**{
            "noise_variance": 0.01 * known["variance"], **known})
    else:
        params = OICovarianceParams.for_observations(obs, **known)
    return step, params


def _harvest_config(cfg: dict) -> HarvestConfig:
    block = dict(cfg.get("harvest", {}))
    spec = NeighborhoodSpec(block.get("radius_deg", 7.0),
                            block.get("radius_days", 10.0))
    kwargs = {k: block[k] for k in
              ("n_target", "min_rows", "ridge", "seed") if k in block}
    if cfg.get("seed") is not None:
        kwargs["seed"] = cfg["seed"]
    return HarvestConfig(train_spec=spec, **kwargs)


def _sr_config(cfg: dict) -> SRConfig:
    block = dict(cfg.get("sr", {}))
    spec = NeighborhoodSpec(block.get("radius_deg", 2.0),
                            block.get("radius_days", 10.0))
    kwargs = {k: block[k] for k in
              ("stride", "block", "fallback", "coding", "min_rows_factor")
              if k in block}
    return SRConfig(sr_spec=spec, **kwargs)


def _method_specs(cfg: dict) -> tuple[MethodSpec, ...]:
    specs = []
    for entry in cfg.get("methods", []):
        kind = entry["kind"]
        kvals = entry.get("k", [10])
        if isinstance(kvals, int):
            kvals = [kvals]
        kwargs = {}
        if "budget" in entry:
            kwargs["budget"] = entry["budget"]
        if "iters" in entry:
            kwargs["iters"] = entry["iters"]
        kwargs["seed"] = cfg["seed"] if cfg.get("seed") is not None \
            else entry.get("seed", 0)
        specs.append(MethodSpec(kind, tuple(kvals), **kwargs))
    return tuple(specs)


def experiment_config(cfg: dict) -> ExperimentConfig:
    oi_block = dict(cfg.get("oi", {}))
    step = oi_block.pop("step", 0.125)
    oi = None
    known = {k: v for k, v in oi_block.items()
             if k in ("variance", "length_deg", "length_days",
                      "noise_variance", "max_neighbors") and v is not None}
    if known.get("variance") is not None:
        known.setdefault("noise_variance", 0.01 * known["variance"])
        oi = OICovarianceParams(**known)
        known = {}
    return ExperimentConfig(
        truth=_truth_params(cfg),
        tracks=_track_params(cfg),
        oi_step=step,
        oi=oi,
        oi_overrides=known,
        harvest=_harvest_config(cfg),
        sr=_sr_config(cfg),
        methods=_method_specs(cfg),
        half_width=cfg.get("half_width", 1),
        bins=cfg.get("bins", 30),
        jobs=cfg.get("jobs", 1),
    )


def _path(cfg: dict, key: str) -> Path:
    name = cfg.get("paths", {}).get(key, _FILES[key])
    return Path(cfg.get("out_dir", ".")) / name


def _combo_names(cfg: dict) -> list[str]:
    names = []
    for m in _method_specs(cfg):
        if m.kind == "zero":
            names.append("zero")
        else:
            names.extend(f"{m.kind}_k{k}" for k in m.k_values)
    return names


def _dict_path(cfg: dict, name: str) -> Path:
    return Path(cfg.get("out_dir", ".")) / f"dict_{name}.json"


def _recon_path(cfg: dict, name: str) -> Path:
    return Path(cfg.get("out_dir", ".")) / f"recon_{name}.fld"


def _require_dir(cfg: dict) -> Path:
    out = Path(cfg.get("out_dir", "."))
    if not out.is_dir():
        raise IoError(f"output directory {out} does not exist")
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(cfg: dict) -> None:
    _require_dir(cfg)
    truth, aux = generate_truth(_truth_params(cfg))
    obs = simulate_tracks(truth, _track_params(cfg))
    fileio.write_fld(_path(cfg, "truth"), truth)
    fileio.write_fld(_path(cfg, "aux"), aux)
    fileio.write_obs(_path(cfg, "obs"), obs)
    print(f"gen: wrote truth/aux stacks ({truth.n_times} days, "
          f"{truth.grid.n_rows}x{truth.grid.n_cols}) and {len(obs)} observations")


def cmd_oi(cfg: dict) -> None:
    _require_dir(cfg)
    obs = fileio.read_obs(_path(cfg, "obs"))
    truth = fileio.read_fld(_path(cfg, "truth"))
    step, params = _oi_params(cfg, obs)
    grid = truth.grid
    lr_grid = GridSpec(grid.lat_min, grid.lat_max, grid.lon_min, grid.lon_max, step)
    baseline = oi_reconstruct(obs, lr_grid, truth.times, params,
                              jobs=cfg.get("jobs", 1))
    fileio.write_fld(_path(cfg, "baseline"), baseline)
    report = evaluate_rmse(upsample(baseline, grid), truth, bins=cfg.get("bins", 30))
    print(f"oi: baseline written; mean relative RMSE vs truth = {report.mean:.6f}")


def _load_stage_inputs(cfg: dict):
    obs = fileio.read_obs(_path(cfg, "obs"))
    aux_raw = fileio.read_fld(_path(cfg, "aux"))
    baseline = fileio.read_fld(_path(cfg, "baseline"))
    lowres_up = upsample(baseline, aux_raw.grid)
    aux, _, _ = standardize(aux_raw)
    return obs, aux, lowres_up


def cmd_train(cfg: dict) -> None:
    _require_dir(cfg)
    obs, aux, lowres_up = _load_stage_inputs(cfg)
    half_width = cfg.get("half_width", 1)
    table = CalibrationTable(obs, aux, lowres_up, half_width)
    global_op = fit_global(obs, aux, lowres_up, table=table)
    _save_operator(_path(cfg, "global_op"), global_op)

    methods = _method_specs(cfg)
    max_k = max((k for m in methods if m.kind != "zero" for k in m.k_values),
                default=0)
    if max_k == 0:
        print("train: no dictionary methods configured; wrote global operator")
        return
    samples, _ = harvest_operators(obs, aux, lowres_up, _harvest_config(cfg),
                                   half_width=half_width, min_samples=max_k,
                                   table=table)
    print(f"train: harvested {len(samples)} operator samples "
          f"(requested {_harvest_config(cfg).n_target})")
    for m in methods:
        if m.kind == "zero":
            continue
        for k in m.k_values:
            d = _train_dictionary(m, k, samples)
            name = f"{m.kind}_k{k}"
            save_dictionary(_dict_path(cfg, name), d)
            print(f"train: wrote dictionary {name}")


def _save_operator(path: Path, op: OperatorPair) -> None:
    doc = {"half_width": op.half_width,
           "kernel_lr": [float(v) for v in op.kernel_lr],
           "kernel_aux": [float(v) for v in op.kernel_aux]}
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def _load_operator(path: Path) -> OperatorPair:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read operator from {path}: {exc}") from exc
    return OperatorPair(doc["half_width"], np.asarray(doc["kernel_lr"]),
                        np.asarray(doc["kernel_aux"]))


def cmd_reconstruct(cfg: dict) -> None:
    _require_dir(cfg)
    obs, aux, lowres_up = _load_stage_inputs(cfg)
    global_op = _load_operator(_path(cfg, "global_op"))
    combos = []
    for name in _combo_names(cfg):
        if name == "zero":
            combos.append(("zero", None))
        else:
            combos.append((name, load_dictionary(_dict_path(cfg, name))))
    stacks, fallback_counts = reconstruct_combos(
        obs, aux, lowres_up, combos, global_op, _sr_config(cfg),
        half_width=cfg.get("half_width", 1), jobs=cfg.get("jobs", 1))
    for name, stack in stacks.items():
        fileio.write_fld(_recon_path(cfg, name), stack)
        note = (f" (fallback tiles: {fallback_counts[name]})"
                if name in fallback_counts else "")
        print(f"reconstruct: wrote {name}{note}")


def _fmt(x: float) -> str:
    return repr(float(x))


def _ordered(columns: dict) -> dict:
    """Baseline first, then the global model, then the method combos."""
    out = {}
    for name in ("lr", "global"):
        if name in columns:
            out[name] = columns[name]
    for name, rep in columns.items():
        if name not in out:
            out[name] = rep
    return out


def _write_metrics(cfg: dict, days, columns: dict) -> None:
    columns = _ordered(columns)
    with open(_path(cfg, "metrics"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["day"] + [f"rmse_{name}" for name in columns])
        for i, day in enumerate(days):
            writer.writerow([int(day)] + [_fmt(columns[name].per_day[i])
                                          for name in columns])


def _write_hist(cfg: dict, columns: dict) -> None:
    columns = _ordered(columns)
    with open(_path(cfg, "hist"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["series", "bin_left", "bin_right", "count"])
        for name, report in columns.items():
            for j in range(len(report.hist_counts)):
                writer.writerow([name, _fmt(report.hist_edges[j]),
                                 _fmt(report.hist_edges[j + 1]),
                                 int(report.hist_counts[j])])


def _write_table(cfg: dict, columns: dict) -> None:
    methods = [m for m in _method_specs(cfg) if m.kind != "zero"]
    k_all = sorted({k for m in methods for k in m.k_values})
    with open(_path(cfg, "table"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method"] + [f"K={k}" for k in k_all])
        for m in methods:
            row = [m.kind]
            for k in k_all:
                name = f"{m.kind}_k{k}"
                if k in m.k_values and name in columns:
                    row.append(_fmt(columns[name].mean))
                else:
                    row.append("")
            writer.writerow(row)
        for name, label in (("global", "global"), ("lr", "lowres")):
            if name in columns:
                writer.writerow([label] + [_fmt(columns[name].mean)] * len(k_all))


def _render(cfg: dict, stacks: dict, day: int) -> None:
    out = Path(cfg.get("out_dir", "."))
    for name, stack in stacks.items():
        if day not in stack.times:
            continue
        vmin, vmax = fileio.write_pgm(out / f"render_{name}.pgm",
                                      stack.slice_at(day))
        sidecar = {"series": name, "day": int(day), "min": vmin, "max": vmax,
                   "rows": stack.grid.n_rows, "cols": stack.grid.n_cols}
        with open(out / f"render_{name}.json", "w") as fh:
            json.dump(sidecar, fh)
            fh.write("\n")


def cmd_eval(cfg: dict, render: bool = False) -> None:
    _require_dir(cfg)
    truth = fileio.read_fld(_path(cfg, "truth"))
    baseline = fileio.read_fld(_path(cfg, "baseline"))
    lowres_up = upsample(baseline, truth.grid)
    bins = cfg.get("bins", 30)
    columns = {"lr": evaluate_rmse(lowres_up, truth, bins=bins)}
    stacks = {"truth": truth, "lr": lowres_up}
    global_recon = _recon_path(cfg, "global")
    if global_recon.exists():
        stack = fileio.read_fld(global_recon)
        stacks["global"] = stack
        columns["global"] = evaluate_rmse(stack, truth, bins=bins)
    for name in _combo_names(cfg):
        path = _recon_path(cfg, name)
        if not path.exists():
            continue
        stack = fileio.read_fld(path)
        stacks[name] = stack
        columns[name] = evaluate_rmse(stack, truth, bins=bins)
    _write_metrics(cfg, truth.times, columns)
    _write_hist(cfg, columns)
    _write_table(cfg, columns)
    if render or cfg.get("render_day") is not None:
        day = cfg.get("render_day")
        day = int(truth.times[len(truth.times) // 2]) if day is None else int(day)
        _render(cfg, stacks, day)
    for name, report in columns.items():
        print(f"eval: {name} mean relative RMSE = {report.mean:.6f}")


def cmd_report(cfg: dict) -> None:
    _require_dir(cfg)
    report = run_experiment(experiment_config(cfg))
    fileio.write_fld(_path(cfg, "truth"), report.truth)
    fileio.write_fld(_path(cfg, "aux"), report.aux)
    fileio.write_obs(_path(cfg, "obs"), report.observations)
    fileio.write_fld(_path(cfg, "baseline"), report.baseline_lr)
    if report.global_op is not None:
        _save_operator(_path(cfg, "global_op"), report.global_op)
    for name, d in report.dictionaries.items():
        save_dictionary(_dict_path(cfg, name), d)
    for name, stack in report.stacks.items():
        if name == "lr":
            continue
        fileio.write_fld(_recon_path(cfg, name), stack)
    _write_metrics(cfg, report.days, report.series)
    _write_hist(cfg, report.series)
    _write_table(cfg, report.series)
    if cfg.get("render_day") is not None:
        stacks = dict(report.stacks)
        stacks["truth"] = report.truth
        _render(cfg, stacks, int(cfg["render_day"]))
    for name, rep in report.series.items():
        print(f"report: {name} mean relative RMSE = {rep.mean:.6f}")
    for name, why in report.failures.items():
        print(f"report: {name} FAILED ({why})")
    for name, diag in report.diagnostics.items():
        extras = ", ".join(f"{k}={v}" for k, v in diag.items())
        print(f"report: diagnostics {name}: {extras}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="irregrid",
        description="Super-resolution of gridded fields from irregular "
                    "point observations.")
    parser.add_argument("--config", "-c", help="JSON configuration file")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE",
                        help="override a dotted config path (JSON value)")
    parser.add_argument("--jobs", type=int, default=None,
                        help="cap worker parallelism")
    parser.add_argument("--out", help="output directory (overrides out_dir)")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", help="generate synthetic truth, auxiliary, and tracks")
    sub.add_parser("oi", help="optimal-interpolation baseline from observations")
    sub.add_parser("train", help="harvest operators and train dictionaries")
    sub.add_parser("reconstruct", help="locally-adapted reconstructions")
    p_eval = sub.add_parser("eval", help="metrics, histograms, optional renders")
    p_eval.add_argument("--render", action="store_true",
                        help="write PGM panels for the render day")
    sub.add_parser("report", help="run the whole pipeline in one go")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        if args.jobs is not None:
            cfg["jobs"] = args.jobs
        if args.out is not None:
            cfg["out_dir"] = args.out
        if args.command == "gen":
            cmd_gen(cfg)
        elif args.command == "oi":
            cmd_oi(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "reconstruct":
            cmd_reconstruct(cfg)
        elif args.command == "eval":
            cmd_eval(cfg, render=args.render)
        elif args.command == "report":
            cmd_report(cfg)
    except IrregridError as exc:
        print(f"error:{exc.code}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error:IoError: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
