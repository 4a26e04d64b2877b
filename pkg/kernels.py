"""
tenkit MTTKRP kernels

Mode-n MTTKRP: Y(i,:) = sum over nonzeros with index i in mode n of
value * (Hadamard product of the other modes' factor rows).

Each kernel returns (Y, OpCount). Operation counts follow one convention:
  COO      muls (N-1)MR          adds MR
  CSF      muls (M + n_1..n_{N-2})R    adds (M + n_0..n_{N-3})R
           -> order 3: (2M + F + S)R
  CSL      muls (N-1)M_csl R     adds M_csl R
  HB-CSF   sum of its parts
The dense Khatri-Rao oracle materializes the unfolding and is for checks only.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import singledispatch

import numpy as np

from formats import CslSlices, CsfTensor, HbCsfTensor
from tensor_core import ArgumentError, CapacityError, CooTensor

# ============================================================
# CONFIGURATION
# ============================================================

ORACLE_MAX_SCALARS = 10 ** 7

# FactorMatrix: a (rows, R) float64 ndarray; rows = dimension of its mode
FactorMatrix = np.ndarray


@dataclass(frozen=True)
class OpCount:
    muls: int = 0
    adds: int = 0

    @property
    def total(self):
        return self.muls + self.adds

    def __add__(self, other):
        return OpCount(self.muls + other.muls, self.adds + other.adds)

    def to_dict(self):
        return {'muls': self.muls, 'adds': self.adds, 'total': self.total}


class _Counter:
    """Scalar multiply/add tally, bumped by each vectorized step."""

    def __init__(self):
        self.muls = 0
        self.adds = 0

    def result(self):
        return OpCount(self.muls, self.adds)


# ============================================================
# Argument checks and helpers
# ============================================================

def check_factors(dims, factors, mode):
    """Validate factor shapes against the tensor; returns the rank R."""
    order = len(dims)
    if not 0 <= mode < order:
        raise ArgumentError(f"mode {mode} out of range for order {order}")
    if len(factors) != order:
        raise ArgumentError(f"expected {order} factor matrices, got {len(factors)}")
    ranks = {np.asarray(f).shape[1] for d, f in enumerate(factors) if d != mode}
    if len(ranks) != 1:
        raise ArgumentError(f"factor matrices disagree on rank: {sorted(ranks)}")
    for d, f in enumerate(factors):
        if d != mode and np.asarray(f).shape[0] != dims[d]:
            raise ArgumentError(f"factor {d} has {np.asarray(f).shape[0]} rows, "
                                f"mode {d} has dimension {dims[d]}")
    return ranks.pop()


def _as_factors(factors):
    return [np.asarray(f, dtype=np.float64) for f in factors]


def _segment_sum(acc, ptr):
    """Row sums of acc over the consecutive nonempty segments given by ptr offsets."""
    if ptr.shape[0] <= 1:
        return np.zeros((0, acc.shape[1]))
    return np.add.reduceat(acc, ptr[:-1], axis=0)


def max_relative_deviation(y, ref):
    """Largest row-norm deviation of y from ref, relative to the row norm of ref."""
    y = np.asarray(y, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if y.shape != ref.shape:
        raise ArgumentError(f"shape mismatch {y.shape} vs {ref.shape}")
    if y.size == 0:
        return 0.0
    diff = np.linalg.norm(y - ref, axis=1)
    scale = np.linalg.norm(ref, axis=1)
    floor = max(float(scale.max()), 1.0) * np.finfo(np.float64).tiny
    return float(np.max(diff / np.maximum(scale, floor)))


def _chunks(n, parts):
    bounds = np.linspace(0, n, parts + 1).astype(np.int64)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _run_privatized(jobs, rows, rank, threads):
    """Run jobs (each returning (row_ids, contributions, OpCount)) and reduce into one output."""
    out = np.zeros((rows, rank))
    ops = OpCount()
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda job: job(), jobs))
    else:
        results = [job() for job in jobs]
    for row_ids, contrib, count in results:
        np.add.at(out, row_ids, contrib)
        ops = ops + count
    return out, ops


# ============================================================
# COO
# ============================================================

def _coo_range(t, factors, mode, lo, hi, rank):
    c = _Counter()
    idx = t.indices[lo:hi]
    acc = np.repeat(t.values[lo:hi, None], rank, axis=1)
    for d in range(t.order):
        if d == mode:
            continue
        acc *= factors[d][idx[:, d]]
        c.muls += acc.size
    c.adds += acc.size
    return idx[:, mode].astype(np.int64), acc, c.result()


def mttkrp_coo(t: CooTensor, factors, mode, threads=1):
    """One multiply-add chain per nonzero, scattered into the output rows."""
    factors = _as_factors(factors)
    rank = check_factors(t.dims, factors, mode)
    jobs = [lambda lo=lo, hi=hi: _coo_range(t, factors, mode, lo, hi, rank)
            for lo, hi in _chunks(t.nnz, max(1, threads))]
    return _run_privatized(jobs, t.dims[mode], rank, threads)


# ============================================================
# CSF
# ============================================================

def _csf_fiber_range(csf, factors, f_lo, f_hi, rank):
    """
    Contributions of fibers [f_lo, f_hi). Leaves are reduced into their fiber,
    each fiber result is scaled by its factor row and folded up level by level.
    Returns slice rows (possibly partial slices at the range ends).
    """
    c = _Counter()
    mo = csf.mode_order
    last = csf.order - 2
    fptr = csf.ptr[-1]
    l_lo, l_hi = int(fptr[f_lo]), int(fptr[f_hi])

    acc = csf.values[l_lo:l_hi, None] * factors[mo[-1]][csf.leaf_idx[l_lo:l_hi]]
    c.muls += acc.size
    acc = _segment_sum(acc, fptr[f_lo:f_hi + 1] - l_lo)
    c.adds += (l_hi - l_lo) * rank

    nodes = np.arange(f_lo, f_hi)
    for d in range(last, 0, -1):
        acc *= factors[mo[d]][csf.idx[d][nodes]]
        c.muls += acc.size
        parents = csf.parents(d)[nodes]
        starts = np.flatnonzero(np.concatenate(([True], parents[1:] != parents[:-1])))
        acc = _segment_sum(acc, np.append(starts, parents.shape[0]))
        nodes = parents[starts]
        c.adds += acc.size

    return csf.idx[0][nodes].astype(np.int64), acc, c.result()


def mttkrp_csf(csf: CsfTensor, factors, mode, threads=1, schedule=None):
    """
    CSF kernel for the representation rooted at `mode`.

    Sequential mode walks the whole tree in one pass. With threads > 1 the
    fibers are cut at slice boundaries into per-worker ranges; with a
    BlockSchedule each scheduled unit is one job and units sharing a slice
    accumulate into the same output row.
    """
    factors = _as_factors(factors)
    if csf.mode_order[0] != mode:
        raise ArgumentError(f"CSF is rooted at mode {csf.mode_order[0]}, not mode {mode}")
    rank = check_factors(csf.origin_dims, factors, mode)
    rows = csf.dims[0]
    if csf.nnz == 0:
        return np.zeros((rows, rank)), OpCount()

    if schedule is not None:
        if schedule.fiber_count != csf.fiber_count:
            raise ArgumentError("schedule was built for a different tensor")
        ranges = list(zip(schedule.fiber_lo.tolist(), schedule.fiber_hi.tolist()))
    elif threads > 1:
        slice_fibers = csf.fiber_offsets(0)
        cuts = np.unique(slice_fibers[np.linspace(0, csf.slice_count, threads + 1).astype(np.int64)])
        ranges = [(int(a), int(b)) for a, b in zip(cuts[:-1], cuts[1:])]
    else:
        ranges = [(0, csf.fiber_count)]

    jobs = [lambda lo=lo, hi=hi: _csf_fiber_range(csf, factors, lo, hi, rank) for lo, hi in ranges]
    return _run_privatized(jobs, rows, rank, threads)


def csf_closed_form_ops(csf: CsfTensor, rank):
    """The 2(S + M)R closed form, reported next to the instrumented count."""
    return 2 * (csf.slice_count + csf.nnz) * rank


# ============================================================
# CSL
# ============================================================

def _csl_slice_range(s, factors, s_lo, s_hi):
    c = _Counter()
    mo = s.mode_order
    lo, hi = int(s.slice_ptr[s_lo]), int(s.slice_ptr[s_hi])
    acc = s.values[lo:hi, None] * factors[mo[-1]][s.leaf_idx[lo:hi]]
    c.muls += acc.size
    for col in range(s.order - 2):
        acc *= factors[mo[col + 1]][s.mid_idx[lo:hi, col]]
        c.muls += acc.size
    rows = _segment_sum(acc, s.slice_ptr[s_lo:s_hi + 1] - lo)
    c.adds += acc.size
    return s.slice_idx[s_lo:s_hi].astype(np.int64), rows, c.result()


def mttkrp_csl(s: CslSlices, factors, mode, threads=1):
    """
    Each nonzero multiplies all of its factor rows and adds straight into its
    slice row. With threads > 1 whole slices are dealt out to the workers.
    """
    factors = _as_factors(factors)
    if s.mode_order[0] != mode:
        raise ArgumentError(f"CSL slices are rooted at mode {s.mode_order[0]}, not mode {mode}")
    dims = [0] * s.order
    for d, m in enumerate(s.mode_order):
        dims[m] = s.dims[d]
    rank = check_factors(dims, factors, mode)
    if s.nnz == 0:
        return np.zeros((s.dims[0], rank)), OpCount()

    jobs = [lambda lo=lo, hi=hi: _csl_slice_range(s, factors, lo, hi)
            for lo, hi in _chunks(s.slice_count, max(1, threads))]
    return _run_privatized(jobs, s.dims[0], rank, threads)


# ============================================================
# HB-CSF
# ============================================================

def mttkrp_hbcsf(h: HbCsfTensor, factors, mode, threads=1, schedule=None):
    """Sum of the COO, CSL and CSF sub-kernels; the parts own disjoint output rows."""
    if h.mode_order[0] != mode:
        raise ArgumentError(f"HB-CSF is rooted at mode {h.mode_order[0]}, not mode {mode}")
    y, ops = mttkrp_coo(h.coo_part, factors, mode, threads)
    y_csl, ops_csl = mttkrp_csl(h.csl_part, factors, mode, threads)
    y_csf, ops_csf = mttkrp_csf(h.csf_part, factors, mode, threads, schedule)
    return y + y_csl + y_csf, ops + ops_csl + ops_csf


@singledispatch
def mttkrp(rep, factors, mode, threads=1, schedule=None):
    """MTTKRP over any tenkit representation."""
    raise ArgumentError(f"no MTTKRP kernel for {type(rep).__name__}")


@mttkrp.register
def _(rep: CooTensor, factors, mode, threads=1, schedule=None):
    return mttkrp_coo(rep, factors, mode, threads)


@mttkrp.register
def _(rep: CsfTensor, factors, mode, threads=1, schedule=None):
    return mttkrp_csf(rep, factors, mode, threads, schedule)


@mttkrp.register
def _(rep: CslSlices, factors, mode, threads=1, schedule=None):
    return mttkrp_csl(rep, factors, mode, threads)


@mttkrp.register
def _(rep: HbCsfTensor, factors, mode, threads=1, schedule=None):
    return mttkrp_hbcsf(rep, factors, mode, threads, schedule)


# ============================================================
# Dense Khatri-Rao oracle
# ============================================================

def khatri_rao(a, b):
    """Column-wise Kronecker product; row index a_row * rows(b) + b_row."""
    m, r = a.shape
    n, _ = b.shape
    return (a[:, None, :] * b[None, :, :]).reshape(m * n, r)


def mttkrp_dense_oracle(t: CooTensor, factors, mode, max_scalars=ORACLE_MAX_SCALARS):
    """
    Y = X_(n) (Khatri-Rao of the other factors). Column z of X_(n) enumerates
    the other modes in ascending order with the first one varying fastest
    (z = j + k*J for order 3, mode 0).
    """
    factors = _as_factors(factors)
    rank = check_factors(t.dims, factors, mode)
    others = [d for d in range(t.order) if d != mode]
    cols = int(np.prod([t.dims[d] for d in others]))
    if cols * rank > max_scalars or cols * t.dims[mode] > max_scalars:
        raise CapacityError(f"dense unfolding needs {max(cols * rank, cols * t.dims[mode])} "
                            f"scalars, ceiling is {max_scalars}")

    kr = factors[others[-1]]
    for d in reversed(others[:-1]):
        kr = khatri_rao(kr, factors[d])

    strides = np.cumprod([1] + [t.dims[d] for d in others[:-1]])
    z = (t.indices[:, others].astype(np.int64) * strides).sum(axis=1)
    unfolded = np.zeros((t.dims[mode], cols))
    np.add.at(unfolded, (t.indices[:, mode].astype(np.int64), z), t.values)
    return unfolded @ kr
