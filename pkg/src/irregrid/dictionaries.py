"""Joint operator dictionaries and constrained coefficient estimation.

Three dictionary kinds are supported: ``orthogonal`` (mean-centered
orthonormal basis from an SVD), ``sparse`` (unit-norm atoms trained by
alternating greedy coding and per-atom rank-1 updates), and ``nonneg``
(atoms trained by alternating projected-gradient coefficient steps under
an elementwise non-negativity constraint with least-squares atom updates).
Coefficients are shared across the two kernel halves of each atom.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInput, DimensionMismatch, IoError, RankDeficientWarning
from .operators import OperatorPair

KINDS = ("orthogonal", "sparse", "nonneg")


@dataclass(frozen=True)
class OperatorDictionary:
    """K paired atoms over joint kernel vectors of length m.

    ``atoms`` is (m, k), one atom per column. ``mean`` is the centering
    offset (nonzero only for the orthogonal kind). ``meta`` carries
    training provenance (seed, iterations, sparsity budget, objective
    history) and travels with the JSON file format.
    """

    atoms: np.ndarray
    kind: str
    mean: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        atoms = np.asarray(self.atoms, dtype=np.float64)
        if atoms.ndim != 2:
            raise DimensionMismatch("atoms must be a (m, k) matrix")
        if self.kind not in KINDS:
            raise ValueError(f"unknown dictionary kind {self.kind!r}")
        if not np.all(np.isfinite(atoms)):
            raise ValueError("atom entries must be finite")
        mean = self.mean
        if mean is None:
            mean = np.zeros(atoms.shape[0])
        mean = np.asarray(mean, dtype=np.float64)
        if mean.shape != (atoms.shape[0],):
            raise DimensionMismatch("mean length must match the ambient dimension")
        if self.kind == "orthogonal":
            gram = atoms.T @ atoms
            if np.max(np.abs(gram - np.eye(atoms.shape[1]))) > 1e-10:
                raise ValueError("orthogonal atoms must be orthonormal")
        elif self.kind == "sparse":
            norms = np.linalg.norm(atoms, axis=0)
            if np.max(np.abs(norms - 1.0)) > 1e-10:
                raise ValueError("sparse atoms must have unit norm")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "mean", mean)

    @property
    def m(self) -> int:
        return self.atoms.shape[0]

    @property
    def k(self) -> int:
        return self.atoms.shape[1]


@dataclass(frozen=True)
class Coefficients:
    """Decomposition coefficients, one per atom."""

    alpha: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "alpha",
                           np.asarray(self.alpha, dtype=np.float64))


def _require_samples(samples: np.ndarray, k: int) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise DimensionMismatch("samples must be a (n, m) matrix")
    n, m = samples.shape
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    return samples


def _apply_sign_convention(atoms: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive."""
    idx = np.argmax(np.abs(atoms), axis=0)
    signs = np.sign(atoms[idx, np.arange(atoms.shape[1])])
    signs[signs == 0] = 1.0
    return atoms * signs


def _orthonormal_completion(atoms: np.ndarray, k: int) -> np.ndarray:
    """Extend the orthonormal columns of ``atoms`` to k columns.

    Deterministic: candidate directions are the canonical basis vectors,
    orthogonalized (twice, for stability) against everything accepted so
    far.
    """
    m = atoms.shape[0]
    cols = [atoms[:, j] for j in range(atoms.shape[1])]
    for e in range(m):
        if len(cols) >= k:
            break
        v = np.zeros(m)
        v[e] = 1.0
        for _ in range(2):
            for c in cols:
                v = v - (c @ v) * c
        norm = np.linalg.norm(v)
        if norm > 1e-8:
            cols.append(v / norm)
    if len(cols) < k:
        raise ValueError("cannot complete an orthonormal set beyond dimension m")
    return np.column_stack(cols[:k])


def pca_fit(samples: np.ndarray, k: int) -> OperatorDictionary:
    """Orthonormal dictionary: top-k principal directions of the samples.

    Atoms are ordered by decreasing singular value with the sign convention
    that each atom's largest-magnitude entry is positive. If the centered
    samples have rank below k the remaining atoms are a deterministic
    orthonormal completion and a RankDeficientWarning is issued.
    """
    samples = _require_samples(samples, k)
    mean = samples.mean(axis=0)
    centered = samples - mean
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    # Floor the rank tolerance at the raw data scale so that numerically
    # identical samples (centering residue ~eps) register as rank 0.
    scale = max(float(svals[0]) if svals.size else 0.0,
                float(np.linalg.norm(mean)))
    tol = scale * max(samples.shape) * np.finfo(np.float64).eps
    rank = int(np.sum(svals > tol))
    lead = vt[:min(rank, k)].T
    if rank < k:
        warnings.warn(
            f"centered samples have rank {rank} < k={k}; "
            "completing with an orthonormal basis",
            RankDeficientWarning, stacklevel=2)
        atoms = _orthonormal_completion(lead, k)
    else:
        atoms = lead
    atoms = _apply_sign_convention(atoms)
    meta = {"rank": rank}
    if rank < k:
        meta["rank_deficient"] = True
    return OperatorDictionary(atoms, "orthogonal", mean, meta)


def project_code(dictionary: OperatorDictionary, h: np.ndarray) -> Coefficients:
    """Orthogonal projection coefficients of a joint vector."""
    if dictionary.kind != "orthogonal":
        raise ValueError("project_code requires an orthogonal dictionary")
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (dictionary.m,):
        raise DimensionMismatch(f"vector length {h.shape} != ({dictionary.m},)")
    return Coefficients(dictionary.atoms.T @ (h - dictionary.mean))


def omp_code(dictionary: OperatorDictionary, h: np.ndarray, budget: int) -> Coefficients:
    """Greedy sparse coding with least-squares refit on the support.

    Selects the atom with the largest absolute correlation to the current
    residual (ties broken by lowest index), refits on the accumulated
    support, and stops after ``budget`` atoms or when the residual drops
    below 1e-12 times the target norm.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (dictionary.m,):
        raise DimensionMismatch(f"vector length {h.shape} != ({dictionary.m},)")
    if budget < 0:
        raise ValueError("budget must be non-negative")
    alpha = np.zeros(dictionary.k)
    support: list[int] = []
    coef = np.zeros(0)
    residual = h.copy()
    h_norm = np.linalg.norm(h)
    while len(support) < min(budget, dictionary.k):
        if np.linalg.norm(residual) <= 1e-12 * h_norm:
            break
        corr = dictionary.atoms.T @ residual
        best = int(np.argmax(np.abs(corr)))
        if corr[best] == 0.0:
            break
        if best in support:
            break  # numerically stalled; refit already optimal on support
        support.append(best)
        sub = dictionary.atoms[:, support]
        coef, *_ = np.linalg.lstsq(sub, h, rcond=None)
        residual = h - sub @ coef
    if support:
        alpha[np.asarray(support)] = coef
    return Coefficients(alpha)


def _coding_pass(atoms: np.ndarray, samples_t: np.ndarray, budget: int,
                 prev: np.ndarray) -> np.ndarray:
    """OMP-code every sample, never worse than the previous coefficients.

    Keeping a sample's previous code whenever the fresh greedy code fits
    worse makes every coding pass non-increasing in the global objective.
    """
    d = OperatorDictionary(atoms, "sparse")
    codes = np.empty_like(prev)
    for i in range(samples_t.shape[1]):
        s = samples_t[:, i]
        fresh = omp_code(d, s, budget).alpha
        if np.linalg.norm(s - atoms @ fresh) <= np.linalg.norm(s - atoms @ prev[:, i]):
            codes[:, i] = fresh
        else:
            codes[:, i] = prev[:, i]
    return codes


def _seed_atoms(samples: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k distinct normalized samples in seeded random order."""
    n, m = samples.shape
    picked: list[np.ndarray] = []
    for idx in rng.permutation(n):
        v = samples[idx]
        norm = np.linalg.norm(v)
        if norm == 0:
            continue
        v = v / norm
        if any(abs(abs(v @ p) - 1.0) < 1e-12 for p in picked):
            continue
        picked.append(v)
        if len(picked) == k:
            break
    while len(picked) < k:
        v = rng.standard_normal(m)
        picked.append(v / np.linalg.norm(v))
    return np.column_stack(picked)


def ksvd_fit(samples: np.ndarray, k: int, budget: int, iters: int = 30,
             seed: int = 0) -> OperatorDictionary:
    """Sparse dictionary training by alternating coding and atom updates.

    Each outer iteration recodes all samples greedily (keeping a sample's
    previous code when it fits better, so the objective never increases)
    and then updates every atom with the best rank-1 factorization of its
    restricted residual. Unused atoms are replaced by the currently
    worst-represented sample. The Frobenius objective after each outer
    iteration is recorded in ``meta["objective"]``.
    """
    samples = _require_samples(samples, k)
    if not 1 <= budget <= k:
        raise ValueError("budget must satisfy 1 <= budget <= k")
    if not np.any(samples):
        raise DegenerateInput("all training samples are zero")
    rng = np.random.default_rng(seed)
    s_t = samples.T  # (m, n)
    n = samples.shape[0]
    atoms = _seed_atoms(samples, k, rng)
    codes = np.zeros((k, n))
    history: list[float] = []
    for _ in range(iters):
        codes = _coding_pass(atoms, s_t, budget, codes)
        residual = s_t - atoms @ codes
        for j in range(k):
            used = np.flatnonzero(codes[j] != 0)
            if used.size == 0:
                res_norms = np.linalg.norm(residual, axis=0)
                worst = int(np.argmax(res_norms))
                v = s_t[:, worst]
                norm = np.linalg.norm(v)
                if norm > 0:
                    atoms[:, j] = v / norm
                continue
            # Residual with atom j's contribution restored on its support.
            block = residual[:, used] + np.outer(atoms[:, j], codes[j, used])
            u, sv, vt = np.linalg.svd(block, full_matrices=False)
            atoms[:, j] = u[:, 0]
            codes[j, used] = sv[0] * vt[0]
            residual[:, used] = block - np.outer(atoms[:, j], codes[j, used])
        history.append(float(np.linalg.norm(s_t - atoms @ codes)))
    meta = {"seed": seed, "iters": iters, "t0": budget, "objective": history}
    return OperatorDictionary(atoms, "sparse", None, meta)


def _farthest_point_init(samples: np.ndarray, k: int,
                         rng: np.random.Generator) -> np.ndarray:
    """Seeded farthest-point sample selection, returned as unit columns."""
    norms = np.linalg.norm(samples, axis=1)
    candidates = np.flatnonzero(norms > 0)
    first = int(rng.choice(candidates))
    chosen = [first]
    dist = np.linalg.norm(samples - samples[first], axis=1)
    while len(chosen) < k:
        nxt = int(np.argmax(dist))
        if dist[nxt] == 0:
            nxt = int(rng.choice(candidates))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(samples - samples[nxt], axis=1))
    atoms = samples[chosen].T.copy()
    norms = np.linalg.norm(atoms, axis=0)
    norms[norms == 0] = 1.0
    return atoms / norms


def _nonneg_coef_steps(atoms: np.ndarray, s_t: np.ndarray, codes: np.ndarray,
                       max_steps: int = 500, rel_tol: float = 1e-8) -> np.ndarray:
    """Projected-gradient coefficient updates, batched over samples."""
    gram = atoms.T @ atoms
    lam = float(np.max(np.linalg.eigvalsh(gram)))
    if lam <= 0:
        return codes
    step = 1.0 / lam
    target = atoms.T @ s_t
    codes = codes.copy()
    for _ in range(max_steps):
        grad = gram @ codes - target
        nxt = np.maximum(codes - step * grad, 0.0)
        delta = np.linalg.norm(nxt - codes, axis=0)
        scale = np.linalg.norm(codes, axis=0)
        codes = nxt
        if np.all(delta <= rel_tol * np.maximum(scale, 1e-30)):
            break
    return codes


def nn_fit(samples: np.ndarray, k: int, iters: int = 200,
           seed: int = 0) -> OperatorDictionary:
    """Dictionary with non-negative coefficients by alternating minimization.

    Coefficient phase: batched projected gradient descent onto the
    non-negative orthant with step 1/L. Atom phase: regularized
    least-squares update, accepted only if it does not increase the
    Frobenius objective, then atoms rescaled to unit norm (coefficients
    rescaled inversely). Objective history per outer iteration lands in
    ``meta["objective"]``.
    """
    samples = _require_samples(samples, k)
    if not np.any(samples):
        raise DegenerateInput("all training samples are zero")
    rng = np.random.default_rng(seed)
    s_t = samples.T
    n = samples.shape[0]
    atoms = _farthest_point_init(samples, k, rng)
    codes = np.zeros((k, n))
    history: list[float] = []
    for _ in range(iters):
        codes = _nonneg_coef_steps(atoms, s_t, codes)
        obj = float(np.linalg.norm(s_t - atoms @ codes))
        cand_atoms, cand_codes = _nonneg_atom_phase(atoms, codes, s_t)
        cand_obj = float(np.linalg.norm(s_t - cand_atoms @ cand_codes))
        # The tiny ridge in the atom update and the unit-norm rescaling can
        # shift the objective at machine level; accept only improvements so
        # the recorded history is non-increasing by construction.
        if cand_obj <= obj:
            atoms, codes = cand_atoms, cand_codes
            history.append(cand_obj)
        else:
            history.append(obj)
    meta = {"seed": seed, "iters": iters, "objective": history}
    return OperatorDictionary(atoms, "nonneg", None, meta)


def _nonneg_atom_phase(atoms: np.ndarray, codes: np.ndarray,
                       s_t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares atom update, unit-norm rescale, collapsed-atom reseed."""
    gram_c = codes @ codes.T
    gram_c[np.diag_indices_from(gram_c)] += 1e-10
    atoms = np.linalg.solve(gram_c, codes @ s_t.T).T
    codes = codes.copy()
    norms = np.linalg.norm(atoms, axis=0)
    live = norms > 1e-12
    atoms[:, live] /= norms[live]
    codes[live] *= norms[live, None]
    if np.any(~live):
        res_norms = np.linalg.norm(s_t - atoms[:, live] @ codes[live], axis=0)
        for j in np.flatnonzero(~live):
            v = s_t[:, int(np.argmax(res_norms))]
            vn = np.linalg.norm(v)
            if vn > 0:
                atoms[:, j] = v / vn
            else:
                atoms[:, j] = 0.0
                atoms[min(j, atoms.shape[0] - 1), j] = 1.0
            codes[j] = 0.0
    return atoms, codes


def nnls(matrix: np.ndarray, target: np.ndarray, tol: float = 1e-10,
         max_iter: int = 200_000) -> np.ndarray:
    """min ||matrix @ alpha - target||^2 subject to alpha >= 0.

    Projected gradient descent with step 1/L on the Gram form, iterated to
    ``tol`` on the KKT residual (negative-gradient violation and
    complementary slackness).
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    k = matrix.shape[1]
    gram = matrix.T @ matrix
    lin = matrix.T @ target
    lam = float(np.max(np.linalg.eigvalsh(gram))) if k else 0.0
    alpha = np.zeros(k)
    if lam <= 0:
        return alpha
    step = 1.0 / lam
    for _ in range(max_iter):
        grad = gram @ alpha - lin
        kkt = max(float(np.max(-grad, initial=0.0)),
                  float(np.max(np.abs(alpha * grad), initial=0.0)))
        if kkt <= tol:
            break
        alpha = np.maximum(alpha - step * grad, 0.0)
    return alpha


def nnls_code(dictionary: OperatorDictionary, h: np.ndarray) -> Coefficients:
    """Non-negative least-squares coding of a joint vector."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (dictionary.m,):
        raise DimensionMismatch(f"vector length {h.shape} != ({dictionary.m},)")
    return Coefficients(nnls(dictionary.atoms, h))


def decode(dictionary: OperatorDictionary, coeffs: Coefficients | np.ndarray):
    """Joint kernel vector for given coefficients, split into an OperatorPair."""
    from .operators import OperatorPair

    alpha = coeffs.alpha if isinstance(coeffs, Coefficients) else np.asarray(coeffs)
    if alpha.shape != (dictionary.k,):
        raise DimensionMismatch(f"alpha length {alpha.shape} != ({dictionary.k},)")
    joint = dictionary.atoms @ alpha
    if dictionary.kind == "orthogonal":
        joint = joint + dictionary.mean
    return OperatorPair.from_joint(joint)


def save_dictionary(path: str | os.PathLike, dictionary: OperatorDictionary) -> None:
    doc = {
        "m": dictionary.m,
        "k": dictionary.k,
        "kind": dictionary.kind,
        "mean": [float(v) for v in dictionary.mean],
        "atoms": [[float(v) for v in dictionary.atoms[:, j]]
                  for j in range(dictionary.k)],
        "meta": dictionary.meta,
    }
    try:
        with open(path, "w") as fh:
            json.dump(doc, fh)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write dictionary to {path}: {exc}") from exc


def load_dictionary(path: str | os.PathLike) -> OperatorDictionary:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read dictionary from {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise IoError(f"malformed dictionary file {path}: {exc}") from exc
    atoms = np.asarray(doc["atoms"], dtype=np.float64).T
    if atoms.shape != (doc["m"], doc["k"]):
        raise IoError(f"dictionary file {path} has inconsistent dimensions")
    return OperatorDictionary(atoms, doc["kind"],
                              np.asarray(doc["mean"], dtype=np.float64),
                              dict(doc.get("meta", {})))
