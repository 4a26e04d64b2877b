"""
tenkit storage formats - CSF trees, CSL slice sets and the HB-CSF hybrid

Index storage is counted in 4-byte words, values excluded:
  COO     N*M
  CSF     sum over non-leaf levels of 2*n_d, plus M   (2S + 2F + M for order 3)
  CSL     2*S + (N-1)*M                               (2S + 2M for order 3)
  HB-CSF  sum of its three parts
Pointer arrays keep the usual n+1 offsets but the sentinel is not counted.
"""

from dataclasses import dataclass, field
from functools import singledispatch

import numpy as np

from tensor_core import (
    ArgumentError, CooTensor, INDEX_DTYPE, VALUE_DTYPE,
    check_mode_order, group_starts, sort_by_mode_order,
)

# ============================================================
# CONFIGURATION
# ============================================================

WORD_BYTES = 4
PTR_DTYPE = np.int64

COO_LABEL = 'COO'
CSL_LABEL = 'CSL'
CSF_LABEL = 'CSF'
SLICE_LABELS = (COO_LABEL, CSL_LABEL, CSF_LABEL)

# pointer arrays are counted at n words, the trailing sentinel is not
STORAGE_CONVENTION = 'pointer arrays counted without their end sentinel'


def _frozen(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


# ============================================================
# CSF
# ============================================================

@dataclass(frozen=True, eq=False)
class CsfTensor:
    """
    Compressed sparse fiber tree under `mode_order`.

    Level d (0 = slices, N-2 = fibers) has idx[d] (n_d node indices) and
    ptr[d] (n_d + 1 offsets into level d+1, the leaves for d = N-2).
    Only nonempty nodes are stored. `split` marks trees whose fibers were cut
    into segments; there sibling fiber indices may repeat.
    """
    dims: tuple                 # permuted: dims[d] is the size of mode mode_order[d]
    mode_order: tuple
    ptr: tuple
    idx: tuple
    leaf_idx: np.ndarray
    values: np.ndarray
    split: bool = False
    _parents: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def order(self):
        return len(self.mode_order)

    @property
    def nnz(self):
        return int(self.values.shape[0])

    @property
    def slice_count(self):
        return int(self.idx[0].shape[0])

    @property
    def fiber_count(self):
        return int(self.idx[-1].shape[0])

    @property
    def level_sizes(self):
        """[n_0, ..., n_{N-2}, M]."""
        return [int(a.shape[0]) for a in self.idx] + [self.nnz]

    @property
    def origin_dims(self):
        out = [0] * self.order
        for d, m in enumerate(self.mode_order):
            out[m] = self.dims[d]
        return tuple(out)

    def leaf_offsets(self, depth):
        """Offsets of each level-`depth` node into the leaf arrays (length n_depth + 1)."""
        offsets = self.ptr[-1]
        for d in range(self.order - 3, depth - 1, -1):
            offsets = offsets[self.ptr[d]]
        return offsets

    def fiber_offsets(self, depth=0):
        """Offsets of each level-`depth` node into the fiber level."""
        last = self.order - 2
        offsets = np.arange(self.fiber_count + 1, dtype=PTR_DTYPE)
        for d in range(last - 1, depth - 1, -1):
            offsets = offsets[self.ptr[d]]
        return offsets

    def slice_nnz(self):
        return np.diff(self.leaf_offsets(0))

    def fiber_nnz(self):
        return np.diff(self.ptr[-1])

    def parents(self, depth):
        """Level depth-1 parent of every level-`depth` node."""
        if depth not in self._parents:
            p = self.ptr[depth - 1]
            self._parents[depth] = np.repeat(np.arange(p.shape[0] - 1), np.diff(p))
        return self._parents[depth]

    def permuted_indices(self):
        """(M, N) index array in tree column order (column d = mode mode_order[d])."""
        out = np.empty((self.nnz, self.order), dtype=INDEX_DTYPE)
        for d in range(self.order - 1):
            out[:, d] = np.repeat(self.idx[d], np.diff(self.leaf_offsets(d)))
        out[:, -1] = self.leaf_idx
        return out

    def flatten(self) -> CooTensor:
        """The entries as a COO tensor in original mode numbering, sorted under mode_order."""
        permuted = self.permuted_indices()
        indices = np.empty_like(permuted)
        indices[:, list(self.mode_order)] = permuted
        return CooTensor(self.origin_dims, indices, self.values, self.mode_order)


def allmode_orders(dims):
    """
    One mode order per mode: the mode itself first, then the remaining modes by
    ascending dimension, ties by ascending mode id.
    """
    order = len(dims)
    out = []
    for n in range(order):
        rest = sorted((m for m in range(order) if m != n), key=lambda m: (dims[m], m))
        out.append((n, *rest))
    return out


def mode_order_for(dims, mode):
    return allmode_orders(dims)[mode]


def _csf_from_sorted(dims, mo, permuted, values):
    """Build the tree from entries already sorted under mo (permuted columns)."""
    order = len(mo)
    m = permuted.shape[0]
    starts = [group_starts(permuted, d) for d in range(order - 1)]

    ptr = []
    idx = []
    for d in range(order - 1):
        idx.append(_frozen(permuted[starts[d], d], INDEX_DTYPE))
        if d < order - 2:
            p = np.searchsorted(starts[d + 1], starts[d])
            p = np.append(p, starts[d + 1].shape[0])
        else:
            p = np.append(starts[d], m)
        ptr.append(_frozen(p, PTR_DTYPE))

    pdims = tuple(dims[x] for x in mo)
    return CsfTensor(pdims, mo, tuple(ptr), tuple(idx),
                     _frozen(permuted[:, -1], INDEX_DTYPE), _frozen(values, VALUE_DTYPE))


def build_csf(t: CooTensor, mode_order=None) -> CsfTensor:
    """
    CSF tree over a canonical tensor. flatten(build_csf(t)) equals
    sort_by_mode_order(t); duplicate coordinates are rejected.
    """
    mo = tuple(range(t.order)) if mode_order is None else check_mode_order(mode_order, t.order)
    s = sort_by_mode_order(t, mo)
    permuted = s.indices[:, list(mo)]
    if s.nnz > 1 and not (permuted[1:] != permuted[:-1]).any(axis=1).all():
        raise ArgumentError("duplicate coordinates; canonicalize the tensor first")
    return _csf_from_sorted(t.dims, mo, permuted, s.values)


# ============================================================
# CSL and slice classification
# ============================================================

@dataclass(frozen=True, eq=False)
class CslSlices:
    """
    Slices whose level-1 nodes each hold one nonzero. slice_ptr points straight
    at the nonzeros; each nonzero keeps all of its indices below the slice level
    (mid_idx columns for modes mode_order[1:-1], leaf_idx for the last mode).
    """
    dims: tuple                 # permuted, like CsfTensor.dims
    mode_order: tuple
    slice_ptr: np.ndarray
    slice_idx: np.ndarray
    mid_idx: np.ndarray         # (M_csl, N-2)
    leaf_idx: np.ndarray
    values: np.ndarray

    @property
    def order(self):
        return len(self.mode_order)

    @property
    def nnz(self):
        return int(self.values.shape[0])

    @property
    def slice_count(self):
        return int(self.slice_idx.shape[0])

    def permuted_indices(self):
        out = np.empty((self.nnz, self.order), dtype=INDEX_DTYPE)
        out[:, 0] = np.repeat(self.slice_idx, np.diff(self.slice_ptr))
        out[:, 1:-1] = self.mid_idx
        out[:, -1] = self.leaf_idx
        return out

    def flatten(self) -> CooTensor:
        permuted = self.permuted_indices()
        indices = np.empty_like(permuted)
        indices[:, list(self.mode_order)] = permuted
        dims = [0] * self.order
        for d, m in enumerate(self.mode_order):
            dims[m] = self.dims[d]
        return CooTensor(tuple(dims), indices, self.values, self.mode_order)


def classify_slices(csf: CsfTensor) -> np.ndarray:
    """
    Per-slice label: COO when the slice has one nonzero, CSL when it has at
    least two and every level-1 node under it holds exactly one, CSF otherwise.
    """
    slice_nnz = csf.slice_nnz()
    children = np.diff(csf.ptr[0])
    labels = np.full(csf.slice_count, CSF_LABEL, dtype='<U3')
    labels[(slice_nnz >= 2) & (slice_nnz == children)] = CSL_LABEL
    labels[slice_nnz == 1] = COO_LABEL
    return labels


def census(csf: CsfTensor):
    """Slice counts per label."""
    labels = classify_slices(csf)
    return {label: int((labels == label).sum()) for label in SLICE_LABELS}


# ============================================================
# HB-CSF
# ============================================================

@dataclass(frozen=True, eq=False)
class HbCsfTensor:
    """Slices partitioned into COO, CSL and CSF parts with disjoint slice sets."""
    dims: tuple                 # origin dims
    mode_order: tuple
    coo_part: CooTensor
    csl_part: CslSlices
    csf_part: CsfTensor

    @property
    def order(self):
        return len(self.mode_order)

    @property
    def nnz(self):
        return self.coo_part.nnz + self.csl_part.nnz + self.csf_part.nnz

    def flatten(self) -> CooTensor:
        parts = [self.coo_part, self.csl_part.flatten(), self.csf_part.flatten()]
        indices = np.concatenate([p.indices for p in parts])
        values = np.concatenate([p.values for p in parts])
        return sort_by_mode_order(CooTensor(self.dims, indices, values), self.mode_order)


def build_hbcsf(t: CooTensor, mode_order=None) -> HbCsfTensor:
    """Classify the slices of build_csf(t) and split the nonzeros three ways."""
    csf = build_csf(t, mode_order)
    mo = csf.mode_order
    labels = classify_slices(csf)
    leaf_labels = np.repeat(labels, csf.slice_nnz())
    permuted = csf.permuted_indices()

    # COO part: single-nonzero slices, kept in slice order
    coo_mask = leaf_labels == COO_LABEL
    coo_idx = np.empty((int(coo_mask.sum()), csf.order), dtype=INDEX_DTYPE)
    coo_idx[:, list(mo)] = permuted[coo_mask]
    coo_part = CooTensor(t.dims, coo_idx, csf.values[coo_mask], mo)

    # CSL part
    csl_mask = leaf_labels == CSL_LABEL
    csl_slices = labels == CSL_LABEL
    csl_counts = csf.slice_nnz()[csl_slices]
    csl_part = CslSlices(
        dims=csf.dims,
        mode_order=mo,
        slice_ptr=_frozen(np.concatenate(([0], np.cumsum(csl_counts))), PTR_DTYPE),
        slice_idx=_frozen(csf.idx[0][csl_slices], INDEX_DTYPE),
        mid_idx=_frozen(permuted[csl_mask][:, 1:-1], INDEX_DTYPE),
        leaf_idx=_frozen(permuted[csl_mask][:, -1], INDEX_DTYPE),
        values=_frozen(csf.values[csl_mask], VALUE_DTYPE),
    )

    # CSF part: rebuilt over the remaining (already sorted) nonzeros
    csf_mask = leaf_labels == CSF_LABEL
    csf_part = _csf_from_sorted(t.dims, mo, permuted[csf_mask], csf.values[csf_mask])

    return HbCsfTensor(t.dims, mo, coo_part, csl_part, csf_part)


# ============================================================
# Storage accounting
# ============================================================

@dataclass(frozen=True)
class StoragePart:
    label: str
    slices: int
    fibers: int
    nnz: int
    words: int

    def to_dict(self):
        return {'label': self.label, 'slices': self.slices, 'fibers': self.fibers,
                'nnz': self.nnz, 'words': self.words}


@dataclass(frozen=True)
class StorageReport:
    """Index words of one representation; values are reported separately."""
    format: str
    index_words: int
    parts: tuple = ()
    nnz: int = 0
    value_bits: int = 64

    @property
    def bytes(self):
        return WORD_BYTES * self.index_words

    @property
    def value_bytes(self):
        return self.nnz * self.value_bits // 8

    def with_value_bits(self, bits):
        if bits not in (32, 64):
            raise ArgumentError(f"value width must be 32 or 64 bits, got {bits}")
        return StorageReport(self.format, self.index_words, self.parts, self.nnz, bits)

    def to_dict(self):
        return {
            'format': self.format,
            'index_words': self.index_words,
            'bytes': self.bytes,
            'value_bytes': self.value_bytes,
            'parts': [p.to_dict() for p in self.parts],
            'convention': STORAGE_CONVENTION,
        }


def _coo_slices(t: CooTensor):
    if t.nnz == 0:
        return 0
    mode = t.sorted_under[0] if t.sorted_under else 0
    return int(np.unique(t.indices[:, mode]).shape[0])


def _coo_part(t: CooTensor):
    return StoragePart(COO_LABEL, _coo_slices(t), t.nnz, t.nnz, t.order * t.nnz)


def _csf_part(t: CsfTensor):
    words = sum(2 * n for n in t.level_sizes[:-1]) + t.nnz
    return StoragePart(CSF_LABEL, t.slice_count, t.fiber_count, t.nnz, words)


def _csl_part(s: CslSlices):
    words = 2 * s.slice_count + (s.order - 1) * s.nnz
    return StoragePart(CSL_LABEL, s.slice_count, s.nnz, s.nnz, words)


@singledispatch
def storage_words(x) -> StorageReport:
    raise ArgumentError(f"no storage accounting for {type(x).__name__}")


@storage_words.register
def _(x: CooTensor):
    part = _coo_part(x)
    return StorageReport('coo', part.words, (part,), x.nnz)


@storage_words.register
def _(x: CsfTensor):
    part = _csf_part(x)
    return StorageReport('bcsf' if x.split else 'csf', part.words, (part,), x.nnz)


@storage_words.register
def _(x: CslSlices):
    part = _csl_part(x)
    return StorageReport('csl', part.words, (part,), x.nnz)


@storage_words.register
def _(x: HbCsfTensor):
    parts = (_coo_part(x.coo_part), _csl_part(x.csl_part), _csf_part(x.csf_part))
    return StorageReport('hbcsf', sum(p.words for p in parts), parts, x.nnz)
