"""
tenkit load balancing - B-CSF construction

Two transforms address power-law nonzero distributions:
  fbr-split   fibers longer than fiber_threshold become ceil(n / threshold)
              segments of `threshold` nonzeros (smaller tail), same fiber index
  slc-split   a slice with m nonzeros is worked on by ceil(m / block_size)
              scheduling units instead of being cut itself
imbalance_metrics reports the per-slice / per-fiber spread before and after.
"""

import math
from dataclasses import dataclass

import numpy as np

from formats import (
    CsfTensor, HbCsfTensor, PTR_DTYPE, build_csf, build_hbcsf, mode_order_for,
)
from tensor_core import ArgumentError, CooTensor, INDEX_DTYPE, check_mode_order

# ============================================================
# CONFIGURATION
# ============================================================

DEFAULT_FIBER_THRESHOLD = 128
DEFAULT_BLOCK_SIZE = 512
DEFAULT_WARP_SIZE = 32

FORMATS = ('coo', 'csf', 'bcsf', 'hbcsf')


@dataclass(frozen=True)
class SplitConfig:
    """fiber_threshold may be math.inf (no fiber splitting)."""
    fiber_threshold: float = DEFAULT_FIBER_THRESHOLD
    block_size: int = DEFAULT_BLOCK_SIZE
    warp_size: int = DEFAULT_WARP_SIZE

    def __post_init__(self):
        if not self.fiber_threshold >= 1:
            raise ArgumentError(f"fiber threshold must be >= 1, got {self.fiber_threshold}")
        if self.fiber_threshold != math.inf and self.fiber_threshold != int(self.fiber_threshold):
            raise ArgumentError(f"fiber threshold must be an integer or inf, got {self.fiber_threshold}")
        if self.warp_size < 1 or self.block_size < 1:
            raise ArgumentError("block and warp sizes must be positive")
        if self.block_size % self.warp_size:
            raise ArgumentError(f"warp size {self.warp_size} does not divide block size {self.block_size}")

    def with_threshold(self, threshold):
        return SplitConfig(threshold, self.block_size, self.warp_size)


@dataclass(frozen=True, eq=False)
class BlockSchedule:
    """
    Scheduling units in dispatch order. Unit u works on slice unit_slice[u]
    (a position in the tree's slice arrays) and its fibers [fiber_lo[u], fiber_hi[u]).
    multiplicity[s] is the number of blocks requested for slice s; a slice gets
    fewer units only when it has fewer fibers to hand out.
    """
    unit_slice: np.ndarray
    fiber_lo: np.ndarray
    fiber_hi: np.ndarray
    multiplicity: np.ndarray
    fiber_count: int

    @property
    def unit_count(self):
        return int(self.unit_slice.shape[0])

    def units(self):
        """[(block_id, slice, fiber_lo, fiber_hi), ...]"""
        return [(b, int(s), int(lo), int(hi)) for b, (s, lo, hi)
                in enumerate(zip(self.unit_slice, self.fiber_lo, self.fiber_hi))]

    def units_per_slice(self):
        return np.bincount(self.unit_slice, minlength=self.multiplicity.shape[0])


@dataclass(frozen=True)
class ImbalanceMetrics:
    slices: int
    fibers: int
    nnz: int
    mean_slc: float
    stddev_slc: float
    max_slc: int
    mean_fbr: float
    stddev_fbr: float
    max_fbr: int

    def to_row(self, tensor='', mode=0):
        return {
            'tensor': tensor, 'mode': mode,
            'S': self.slices, 'F': self.fibers, 'M': self.nnz,
            'stddev_slc': self.stddev_slc, 'stddev_fbr': self.stddev_fbr,
            'max_slc': self.max_slc, 'max_fbr': self.max_fbr,
        }


# ============================================================
# Fiber splitting
# ============================================================

def split_fibers(t: CsfTensor, cfg: SplitConfig) -> CsfTensor:
    """Cut every fiber above the threshold into threshold-sized segments."""
    tau = cfg.fiber_threshold
    fiber_nnz = t.fiber_nnz()
    if tau == math.inf or fiber_nnz.size == 0 or fiber_nnz.max() <= tau:
        return t
    tau = int(tau)

    fptr = t.ptr[-1]
    segments = -(-fiber_nnz // tau)
    total = int(segments.sum())
    first_seg = np.cumsum(segments) - segments
    k = np.arange(total) - np.repeat(first_seg, segments)
    seg_starts = np.repeat(fptr[:-1], segments) + k * tau

    new_fptr = np.append(seg_starts, t.nnz).astype(PTR_DTYPE)
    new_fidx = np.repeat(t.idx[-1], segments).astype(INDEX_DTYPE)
    seg_offsets = np.concatenate(([0], np.cumsum(segments)))

    ptr = list(t.ptr)
    idx = list(t.idx)
    ptr[-1] = new_fptr
    idx[-1] = new_fidx
    ptr[-2] = seg_offsets[t.ptr[-2]].astype(PTR_DTYPE)
    for a in ptr + idx:
        a.setflags(write=False)

    return CsfTensor(t.dims, t.mode_order, tuple(ptr), tuple(idx), t.leaf_idx, t.values,
                     split=True)


def build_bcsf(t: CooTensor, mode_order, cfg: SplitConfig) -> CsfTensor:
    """CSF with fibers split as the tree is built."""
    return split_fibers(build_csf(t, mode_order), cfg)


def split_hbcsf(h: HbCsfTensor, cfg: SplitConfig) -> HbCsfTensor:
    """Only the CSF part can hold heavy fibers; the COO and CSL parts are kept."""
    csf = split_fibers(h.csf_part, cfg)
    if csf is h.csf_part:
        return h
    return HbCsfTensor(h.dims, h.mode_order, h.coo_part, h.csl_part, csf)


def build_representation(t: CooTensor, fmt, mode, cfg: SplitConfig = None, mode_order=None):
    """
    Representation of `t` for mode-`mode` MTTKRP. The ALLMODE order rooted at
    `mode` is used unless mode_order is given.
    """
    if fmt not in FORMATS:
        raise ArgumentError(f"unknown format {fmt!r}; expected one of {', '.join(FORMATS)}")
    cfg = cfg or SplitConfig()
    mo = mode_order_for(t.dims, mode) if mode_order is None else check_mode_order(mode_order, t.order)
    if mo[0] != mode:
        raise ArgumentError(f"mode order {mo} is not rooted at mode {mode}")
    if fmt == 'coo':
        return t
    if fmt == 'csf':
        return build_csf(t, mo)
    if fmt == 'bcsf':
        return build_bcsf(t, mo, cfg)
    return split_hbcsf(build_hbcsf(t, mo), cfg)


def representation_csf(rep):
    """The CSF tree the scheduler sees for a representation (None for COO)."""
    if isinstance(rep, CsfTensor):
        return rep
    if isinstance(rep, HbCsfTensor):
        return rep.csf_part
    return None


# ============================================================
# Slice splitting
# ============================================================

def assign_slice_blocks(t: CsfTensor, cfg: SplitConfig) -> BlockSchedule:
    """
    Slice with m nonzeros -> multiplicity max(1, ceil(m / block_size)). Its
    fibers are walked in order and a unit is closed once it holds
    ceil(m / multiplicity) nonzeros.
    """
    slice_fibers = t.fiber_offsets(0)
    fiber_nnz = t.fiber_nnz()
    slice_nnz = t.slice_nnz()
    multiplicity = np.maximum(1, -(-slice_nnz // cfg.block_size)).astype(np.int64)

    unit_slice = []
    lo_list = []
    hi_list = []
    for s in range(t.slice_count):
        f_lo, f_hi = int(slice_fibers[s]), int(slice_fibers[s + 1])
        if multiplicity[s] == 1:
            unit_slice.append(s)
            lo_list.append(f_lo)
            hi_list.append(f_hi)
            continue
        target = -(-int(slice_nnz[s]) // int(multiplicity[s]))
        start = f_lo
        filled = 0
        for f in range(f_lo, f_hi):
            filled += int(fiber_nnz[f])
            if filled >= target and f + 1 < f_hi:
                unit_slice.append(s)
                lo_list.append(start)
                hi_list.append(f + 1)
                start = f + 1
                filled = 0
        unit_slice.append(s)
        lo_list.append(start)
        hi_list.append(f_hi)

    return BlockSchedule(
        unit_slice=np.array(unit_slice, dtype=np.int64),
        fiber_lo=np.array(lo_list, dtype=np.int64),
        fiber_hi=np.array(hi_list, dtype=np.int64),
        multiplicity=multiplicity,
        fiber_count=t.fiber_count,
    )


# ============================================================
# Imbalance metrics
# ============================================================

def _spread(counts):
    if counts.size == 0:
        return 0.0, 0.0, 0
    return float(counts.mean()), float(counts.std()), int(counts.max())


def imbalance_metrics(t: CsfTensor) -> ImbalanceMetrics:
    """Mean / population stddev / max of nonzeros per slice and per fiber (segments count as fibers)."""
    mean_s, std_s, max_s = _spread(t.slice_nnz())
    mean_f, std_f, max_f = _spread(t.fiber_nnz())
    return ImbalanceMetrics(t.slice_count, t.fiber_count, t.nnz,
                            mean_s, std_s, max_s, mean_f, std_f, max_f)
