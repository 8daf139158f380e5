"""Paired convolutional operators and their least-squares calibration.

A reconstruction at a point adds a locally fitted correction to the
upsampled low-resolution field: the correction is the dot product of one
kernel with the low-resolution patch plus the dot product of a second
kernel with the auxiliary high-resolution field patch, both interpolated
around the observation position.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import (CoverageMismatch, DimensionMismatch, InsufficientData,
                     SingularSystem)
from .fields import FieldStack, TrackObservations, eval_patches


def patch_len(half_width: int) -> int:
    return (2 * half_width + 1) ** 2


def joint_len(half_width: int) -> int:
    return 2 * patch_len(half_width)


def half_width_from_joint(m: int) -> int:
    """Patch half-width implied by a joint vector length ``m = 2*(2w+1)^2``."""
    if m % 2:
        raise DimensionMismatch(f"joint length {m} is not even")
    side = int(round(np.sqrt(m // 2)))
    if side * side != m // 2 or side % 2 == 0:
        raise DimensionMismatch(f"joint length {m} is not 2*(odd)^2")
    return (side - 1) // 2


@dataclass(frozen=True)
class OperatorPair:
    """The two flattened (2w+1)x(2w+1) kernels of the correction model."""

    half_width: int
    kernel_lr: np.ndarray   # applied to low-resolution patches
    kernel_aux: np.ndarray  # applied to auxiliary-field patches

    def __post_init__(self) -> None:
        p = patch_len(self.half_width)
        k_lr = np.asarray(self.kernel_lr, dtype=np.float64)
        k_aux = np.asarray(self.kernel_aux, dtype=np.float64)
        if k_lr.shape != (p,) or k_aux.shape != (p,):
            raise DimensionMismatch(
                f"kernels must have length {p} for half_width {self.half_width}")
        if not (np.all(np.isfinite(k_lr)) and np.all(np.isfinite(k_aux))):
            raise ValueError("kernel entries must be finite")
        object.__setattr__(self, "kernel_lr", k_lr)
        object.__setattr__(self, "kernel_aux", k_aux)

    @property
    def joint(self) -> np.ndarray:
        return np.concatenate([self.kernel_lr, self.kernel_aux])

    @classmethod
    def from_joint(cls, joint: np.ndarray) -> "OperatorPair":
        joint = np.asarray(joint, dtype=np.float64)
        w = half_width_from_joint(len(joint))
        p = patch_len(w)
        return cls(w, joint[:p], joint[p:])

    @classmethod
    def zeros(cls, half_width: int) -> "OperatorPair":
        p = patch_len(half_width)
        return cls(half_width, np.zeros(p), np.zeros(p))


@dataclass(frozen=True)
class DesignSystem:
    """Stacked regression rows for a set of observations.

    Each row concatenates the low-resolution patch and the auxiliary patch
    at one observation; the right-hand side is the observed value minus the
    interpolated low-resolution value there. ``kept`` indexes the source
    observations that produced rows; the remainder (footprint outside
    coverage or touching masked cells) were dropped and counted.
    ``weights`` is stored for interface completeness; the solver treats all
    rows equally.
    """

    half_width: int
    rows: np.ndarray
    rhs: np.ndarray
    kept: np.ndarray
    n_dropped: int = 0
    weights: np.ndarray | None = None

    def __post_init__(self) -> None:
        rows = np.asarray(self.rows, dtype=np.float64)
        rhs = np.asarray(self.rhs, dtype=np.float64)
        m = joint_len(self.half_width)
        if rows.ndim != 2 or rows.shape[1] != m:
            raise DimensionMismatch(f"rows must be (n, {m})")
        if rhs.shape != (rows.shape[0],):
            raise DimensionMismatch("rhs length must equal the row count")
        if rows.size and not np.all(np.isfinite(rows)):
            raise ValueError("rows must be finite")
        if rhs.size and not np.all(np.isfinite(rhs)):
            raise ValueError("rhs must be finite")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "rhs", rhs)
        object.__setattr__(self, "kept", np.asarray(self.kept, dtype=np.int64))
        if self.weights is None:
            object.__setattr__(self, "weights", np.ones(rows.shape[0]))

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def m(self) -> int:
        return self.rows.shape[1]


def build_design(subset: TrackObservations, aux_hr: FieldStack,
                 lowres_up: FieldStack, half_width: int) -> DesignSystem:
    """One regression row per observation with a fully covered footprint.

    The two stacks must share the high-resolution grid and time coverage.
    Observations whose patch footprint leaves the domain (or touches a
    masked cell) are silently dropped and counted in ``n_dropped``.
    """
    if aux_hr.grid != lowres_up.grid:
        raise CoverageMismatch("auxiliary and low-resolution grids differ")
    if not np.array_equal(aux_hr.times, lowres_up.times):
        raise CoverageMismatch("auxiliary and low-resolution times differ")
    p = patch_len(half_width)
    if len(subset) == 0:
        return DesignSystem(half_width, np.zeros((0, 2 * p)), np.zeros(0),
                            np.zeros(0, dtype=np.int64))
    lr_patches, lr_ok = eval_patches(lowres_up, subset.t, subset.lat, subset.lon,
                                     half_width)
    aux_patches, aux_ok = eval_patches(aux_hr, subset.t, subset.lat, subset.lon,
                                       half_width)
    ok = lr_ok & aux_ok
    kept = np.flatnonzero(ok)
    rows = np.concatenate([lr_patches[kept], aux_patches[kept]], axis=1)
    # The patch center equals the interpolated low-resolution value at the
    # observation position, so the detail target needs no extra sampling.
    center = (p - 1) // 2
    rhs = subset.value[kept] - lr_patches[kept, center]
    return DesignSystem(half_width, rows, rhs, kept,
                        n_dropped=int(len(subset) - len(kept)))


def default_ridge(rows: np.ndarray) -> float:
    """Scaled Tikhonov weight: 1e-6 * trace(A^T A) / m."""
    if rows.size == 0:
        return 0.0
    return 1e-6 * float(np.sum(rows * rows)) / rows.shape[1]


def solve_ridge(rows: np.ndarray, rhs: np.ndarray, ridge: float) -> np.ndarray:
    """Normal-equations solve of min ||A h - b||^2 + ridge ||h||^2."""
    gram = rows.T @ rows
    gram[np.diag_indices_from(gram)] += ridge
    try:
        cho = scipy.linalg.cho_factor(gram, check_finite=False)
        return scipy.linalg.cho_solve(cho, rows.T @ rhs, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise SingularSystem(f"normal equations are singular: {exc}") from exc


def fit_unconstrained(system: DesignSystem, ridge: float | None = None,
                      min_rows: int | None = None) -> OperatorPair:
    """Least-squares fit of the joint kernel vector.

    ``ridge`` defaults to the scaled value from ``default_ridge``;
    ``min_rows`` defaults to three rows per unknown. Raises
    InsufficientData when fewer rows are available and SingularSystem when
    an unregularized system is rank-deficient.
    """
    m = system.m
    if min_rows is None:
        min_rows = 3 * m
    if system.n < min_rows:
        raise InsufficientData(
            f"{system.n} rows < required minimum {min_rows}")
    if ridge is None:
        ridge = default_ridge(system.rows)
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    joint = solve_ridge(system.rows, system.rhs, ridge)
    return OperatorPair.from_joint(joint)


def predict_detail(op: OperatorPair, lr_patch: np.ndarray,
                   aux_patch: np.ndarray) -> float:
    """Correction value for one pair of patches."""
    lr_patch = np.asarray(lr_patch, dtype=np.float64)
    aux_patch = np.asarray(aux_patch, dtype=np.float64)
    if lr_patch.shape != op.kernel_lr.shape or aux_patch.shape != op.kernel_aux.shape:
        raise DimensionMismatch("patch lengths do not match the operator kernels")
    return float(op.kernel_lr @ lr_patch + op.kernel_aux @ aux_patch)
