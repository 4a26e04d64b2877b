"""
tenkit CPD-ALS - CANDECOMP/PARAFAC by alternating least squares

For each outer iteration and each mode n in ascending order:
    factor_n <- MTTKRP(X, factors, n) @ pinv(Hadamard of every other Gram)
then factor_n's columns are normalized and their norms become lambda.
The fit is monitored without forming the dense model, from the Gram matrices
and the last MTTKRP output.
"""

import time
import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd

from balance import SplitConfig, build_representation
from kernels import OpCount, mttkrp
from tensor_core import (
    ArgumentError, CooTensor, DataError, NumericalFailureError, canonicalize,
)

# ============================================================
# CONFIGURATION
# ============================================================

DEFAULT_RANK = 32
DEFAULT_MAX_ITERS = 50
DEFAULT_FIT_TOL = 1e-6
DEFAULT_FORMAT = 'hbcsf'
SYMMETRY_TOL = 1e-12


# ============================================================
# Small dense linear algebra
# ============================================================

def gram(f):
    """f^T f, symmetrized so round-off cannot break symmetry."""
    f = np.asarray(f, dtype=np.float64)
    g = f.T @ f
    return (g + g.T) / 2


def hadamard_all_but(grams, skip):
    """Elementwise product of every Gram except grams[skip]."""
    if not 0 <= skip < len(grams):
        raise ArgumentError(f"mode {skip} out of range for {len(grams)} Gram matrices")
    rank = np.asarray(grams[0]).shape[0]
    out = np.ones((rank, rank))
    for d, g in enumerate(grams):
        if d != skip:
            out = out * g
    return out


def pinv_spsd(g, tol=None):
    """
    Moore-Penrose pseudo-inverse of a symmetric positive semidefinite matrix.
    Eigenvalues at or below tol * lambda_max are treated as zero; the default
    tol is R * machine epsilon.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ArgumentError(f"expected a square matrix, got shape {g.shape}")
    scale = max(float(np.abs(g).max(initial=0.0)), 1.0)
    if np.abs(g - g.T).max(initial=0.0) > SYMMETRY_TOL * scale:
        raise ArgumentError("matrix is not symmetric")
    if tol is None:
        tol = g.shape[0] * np.finfo(np.float64).eps

    w, v = np.linalg.eigh((g + g.T) / 2)
    top = float(w.max(initial=0.0))
    if top <= 0:
        return np.zeros_like(g)
    keep = w > tol * top
    inv = np.zeros_like(w)
    inv[keep] = 1.0 / w[keep]
    return (v * inv) @ v.T


# ============================================================
# Kruskal model
# ============================================================

@dataclass
class KruskalModel:
    """[[weights; factors[0], ..., factors[N-1]]]"""
    weights: np.ndarray
    factors: list

    @property
    def rank(self):
        return int(self.weights.shape[0])

    @property
    def dims(self):
        return tuple(int(f.shape[0]) for f in self.factors)

    def value_at(self, index):
        rows = np.ones(self.rank)
        for f, i in zip(self.factors, index):
            rows = rows * f[i]
        return float(rows @ self.weights)

    def full(self):
        """Dense reconstruction; only for small shapes."""
        out = np.zeros(self.dims)
        for r in range(self.rank):
            term = self.weights[r]
            for f in self.factors:
                term = np.multiply.outer(term, f[:, r])
            out += term
        return out

    def to_coo(self):
        return kruskal_to_coo(self.weights, self.factors)

    def norm_squared(self):
        return model_norm_squared(self.weights, [gram(f) for f in self.factors])


def kruskal_to_coo(weights, factors):
    """Every nonzero cell of the dense model, as a canonical COO tensor."""
    model = KruskalModel(np.asarray(weights, dtype=np.float64),
                         [np.asarray(f, dtype=np.float64) for f in factors])
    dense = model.full()
    nz = np.argwhere(dense != 0)
    return canonicalize(CooTensor(model.dims, nz, dense[tuple(nz.T)]))


def inner_product(t: CooTensor, weights, factors):
    """<X, model> summed over the nonzeros of X."""
    acc = np.repeat(t.values[:, None], len(weights), axis=1)
    for d, f in enumerate(factors):
        acc *= f[t.indices[:, d]]
    return float(acc.sum(axis=0) @ weights)


def model_norm_squared(weights, grams):
    """||model||^2 = weights^T (Hadamard of all Grams) weights."""
    prod = np.ones_like(grams[0])
    for g in grams:
        prod = prod * g
    return float(weights @ prod @ weights)


def _fit(norm_x, weights, grams, inner):
    residual_sq = max(norm_x ** 2 + model_norm_squared(weights, grams) - 2 * inner, 0.0)
    return 1.0 - np.sqrt(residual_sq) / norm_x


# ============================================================
# ALS
# ============================================================

@dataclass(frozen=True)
class FitRecord:
    iteration: int
    fit: float
    delta: float
    mttkrp_seconds: tuple
    ops: OpCount

    def to_row(self):
        row = {'iteration': self.iteration, 'fit': self.fit, 'delta': self.delta}
        for n, s in enumerate(self.mttkrp_seconds):
            row[f'mttkrp_seconds_mode{n}'] = s
        row['muls'] = self.ops.muls
        row['adds'] = self.ops.adds
        return row


def als_update_mode(rep, model: KruskalModel, mode, grams=None, threads=1):
    """
    Least-squares update of factor `mode` with the others held fixed.
    Returns (new unnormalized factor, MTTKRP output, OpCount).
    """
    grams = grams if grams is not None else [gram(f) for f in model.factors]
    y, ops = mttkrp(rep, model.factors, mode, threads)
    return solve_factor(y, grams, mode), y, ops


def solve_factor(y, grams, mode):
    """y @ pinv(Hadamard of every Gram but grams[mode])."""
    return y @ pinv_spsd(hadamard_all_but(grams, mode))


def _normalize(f):
    norms = np.linalg.norm(f, axis=0)
    safe = np.where(norms <= np.finfo(np.float64).eps, 1.0, norms)
    return f / safe, norms


def random_model(dims, rank, seed=0):
    rng = np.random.default_rng(seed)
    return KruskalModel(np.ones(rank), [rng.random((d, rank)) for d in dims])


def cp_als(t: CooTensor, rank=DEFAULT_RANK, max_iters=DEFAULT_MAX_ITERS, fit_tol=DEFAULT_FIT_TOL,
           fmt=DEFAULT_FORMAT, seed=0, cfg: SplitConfig = None, threads=1, init: KruskalModel = None):
    """
    Rank-`rank` CP decomposition of a canonical tensor.

    One representation per mode is built up front (ALLMODE). Iteration 0 in
    the history is the fit of the initial model. Stops once
    |fit_i - fit_{i-1}| < fit_tol or after max_iters iterations.
    Returns (KruskalModel, [FitRecord, ...]).
    """
    rank = int(rank)
    if rank < 1:
        raise ArgumentError(f"rank must be >= 1, got {rank}")
    if max_iters < 0:
        raise ArgumentError(f"max_iters must be >= 0, got {max_iters}")
    if t.nnz == 0:
        raise DataError("cannot decompose a tensor with no nonzeros")
    if rank > min(t.dims):
        warnings.warn(f"rank {rank} exceeds the smallest dimension {min(t.dims)} (over-complete model)",
                      RuntimeWarning, stacklevel=2)

    reps = [build_representation(t, fmt, n, cfg) for n in range(t.order)]
    model = init if init is not None else random_model(t.dims, rank, seed)
    if model.dims != t.dims:
        raise ArgumentError(f"initial model has dims {model.dims}, tensor has {t.dims}")
    if model.rank != rank:
        raise ArgumentError(f"initial model has rank {model.rank}, expected {rank}")
    model = KruskalModel(np.array(model.weights, dtype=np.float64),
                         [np.array(f, dtype=np.float64) for f in model.factors])

    norm_x = t.norm()
    grams = [gram(f) for f in model.factors]
    fit = _fit(norm_x, model.weights, grams, inner_product(t, model.weights, model.factors))
    history = [FitRecord(0, fit, 0.0, tuple(0.0 for _ in range(t.order)), OpCount())]

    for it in range(1, max_iters + 1):
        seconds = []
        ops = OpCount()
        for n in range(t.order):
            start = time.perf_counter()
            y, count = mttkrp(reps[n], model.factors, n, threads)
            seconds.append(time.perf_counter() - start)
            f = solve_factor(y, grams, n)
            ops = ops + count
            if not np.isfinite(f).all():
                raise NumericalFailureError(f"non-finite values in factor {n}", iteration=it)
            model.factors[n], model.weights = _normalize(f)
            grams[n] = gram(model.factors[n])

        inner = float(((y * model.factors[-1]).sum(axis=0)) @ model.weights)
        new_fit = _fit(norm_x, model.weights, grams, inner)
        if not np.isfinite(new_fit):
            raise NumericalFailureError("fit is not finite", iteration=it)
        delta = new_fit - fit
        history.append(FitRecord(it, new_fit, delta, tuple(seconds), ops))
        fit = new_fit
        if abs(delta) < fit_tol:
            break

    return model, history


def fit_history_frame(history) -> pd.DataFrame:
    return pd.DataFrame([r.to_row() for r in history])
