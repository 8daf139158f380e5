"""On-disk formats: FLD field stacks, OBS observation CSV, PGM renders.

FLD layout: one JSON header line terminated by ``\\n``, then raw
little-endian float64 values (time-major, then row-major), then, if the
header says ``"mask": true``, one byte per cell per slice (1 = missing).
"""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import numpy as np

from .errors import IoError
from .fields import FieldStack, GridSpec, TrackObservations


def write_fld(path: str | os.PathLike, stack: FieldStack) -> None:
    header = {
        "grid": {
            "lat_min": stack.grid.lat_min,
            "lat_max": stack.grid.lat_max,
            "lon_min": stack.grid.lon_min,
            "lon_max": stack.grid.lon_max,
            "step": stack.grid.step,
        },
        "times": [int(t) for t in stack.times],
        "mask": stack.mask is not None,
    }
    try:
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, separators=(",", ":")).encode("ascii"))
            fh.write(b"\n")
            fh.write(np.ascontiguousarray(stack.values, dtype="<f8").tobytes())
            if stack.mask is not None:
                fh.write(stack.mask.astype(np.uint8).tobytes())
    except OSError as exc:
        raise IoError(f"cannot write field stack to {path}: {exc}") from exc


def read_fld(path: str | os.PathLike) -> FieldStack:
    try:
        with open(path, "rb") as fh:
            header_line = fh.readline()
            payload = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read field stack from {path}: {exc}") from exc
    try:
        header = json.loads(header_line.decode("ascii"))
        grid = GridSpec(**header["grid"])
        times = np.asarray(header["times"], dtype=np.int64)
        n_cells = len(times) * grid.n_rows * grid.n_cols
        values = np.frombuffer(payload, dtype="<f8", count=n_cells)
        values = values.reshape(len(times), grid.n_rows, grid.n_cols)
        mask = None
        if header["mask"]:
            raw = np.frombuffer(payload, dtype=np.uint8, offset=8 * n_cells,
                                count=n_cells)
            mask = raw.reshape(values.shape).astype(bool)
        return FieldStack(grid, times, values.astype(np.float64), mask)
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise IoError(f"malformed field stack file {path}: {exc}") from exc


def write_obs(path: str | os.PathLike, obs: TrackObservations) -> None:
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["t", "lat", "lon", "value"])
            for i in range(len(obs)):
                writer.writerow([repr(float(obs.t[i])), repr(float(obs.lat[i])),
                                 repr(float(obs.lon[i])), repr(float(obs.value[i]))])
    except OSError as exc:
        raise IoError(f"cannot write observations to {path}: {exc}") from exc


def read_obs(path: str | os.PathLike) -> TrackObservations:
    try:
        with open(path, "r", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["t", "lat", "lon", "value"]:
                raise IoError(f"unexpected OBS header in {path}: {header}")
            rows = [(float(r[0]), float(r[1]), float(r[2]), float(r[3]))
                    for r in reader if r]
    except OSError as exc:
        raise IoError(f"cannot read observations from {path}: {exc}") from exc
    except (ValueError, IndexError) as exc:
        raise IoError(f"malformed OBS file {path}: {exc}") from exc
    if not rows:
        return TrackObservations.empty()
    a = np.asarray(rows, dtype=np.float64)
    return TrackObservations(a[:, 0], a[:, 1], a[:, 2], a[:, 3])


def write_pgm(path: str | os.PathLike, field: np.ndarray) -> tuple[float, float]:
    """8-bit binary PGM with per-panel min-max scaling, north up.

    Returns the (min, max) used for the scaling so callers can emit the
    sidecar annotation.
    """
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 2:
        raise ValueError("PGM rendering expects a 2-D slice")
    vmin = float(np.min(field))
    vmax = float(np.max(field))
    span = vmax - vmin
    if span == 0:
        scaled = np.zeros_like(field)
    else:
        scaled = (field - vmin) / span
    byte = np.clip(np.rint(scaled * 255.0), 0, 255).astype(np.uint8)
    byte = byte[::-1, :]  # row 0 of the grid is the southernmost row
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{byte.shape[1]} {byte.shape[0]}\n255\n".encode("ascii"))
            fh.write(byte.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write PGM to {path}: {exc}") from exc
    return vmin, vmax


def ensure_parent(path: str | os.PathLike) -> Path:
    p = Path(path)
    if not p.parent.is_dir():
        raise IoError(f"output directory {p.parent} does not exist")
    return p
