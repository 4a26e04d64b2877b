"""
tenkit tensor core - COO tensors, FROSTT .tns I/O, sorting and population stats

Everything else in tenkit starts from a CooTensor:
  1. parse_frostt / read_tns bring a .tns file in (1-based on disk, 0-based here)
  2. canonicalize merges duplicates and drops exact zeros
  3. sort_by_mode_order lays the entries out for CSF construction
  4. compute_stats reports slice/fiber populations for one mode order
"""

from dataclasses import dataclass
from typing import Iterable, Sequence, TextIO

import numpy as np

# ============================================================
# CONFIGURATION
# ============================================================

INDEX_DTYPE = np.uint32     # 32-bit unsigned indices, as stored by the kernels
VALUE_DTYPE = np.float64
MIN_ORDER = 3
VALUE_DIGITS = 17           # significant digits written per value


# ============================================================
# Errors (shared by every tenkit module)
# ============================================================

class TenkitError(Exception):
    """Base class for all tenkit failures."""


class ArgumentError(TenkitError, ValueError):
    """Bad call arguments: non-permutations, mismatched factors, bad flags."""


class DataError(TenkitError):
    """The tensor data itself is unusable."""


class ParseError(DataError):
    """Malformed .tns content. `line` is the 1-based line number (0 = whole file)."""

    def __init__(self, message, line=0, source=None):
        self.line = line
        self.source = source
        where = f"{source}:" if source else "line "
        prefix = f"{where}{line}: " if line else (f"{source}: " if source else "")
        super().__init__(f"{prefix}{message}")


class ArityError(ParseError):
    """A data line has a different number of indices than the first one."""


class IndexRangeError(ParseError):
    """An index is below 1 or beyond an explicit dimension."""


class EmptyTensorError(ParseError):
    """The stream held no data lines at all."""


class CapacityError(DataError):
    """A dense intermediate would exceed the configured size ceiling."""


class NumericalFailureError(DataError):
    """Non-finite values appeared during an iterative computation."""

    def __init__(self, message, iteration=None):
        self.iteration = iteration
        super().__init__(message if iteration is None else f"iteration {iteration}: {message}")


class CheckFailure(TenkitError):
    """A --check comparison exceeded its tolerance."""


# ============================================================
# Types
# ============================================================

@dataclass(frozen=True, eq=False)
class CooTensor:
    """
    List-of-nonzeros tensor.

    indices is an (M, N) uint32 array, values an (M,) float64 array.
    sorted_under records the mode order the entries are currently sorted by
    (None when unknown). Arrays are made read-only on construction.
    """
    dims: tuple
    indices: np.ndarray
    values: np.ndarray
    sorted_under: tuple = None

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) < MIN_ORDER:
            raise ArgumentError(f"tensor order must be >= {MIN_ORDER}, got {len(dims)}")
        if any(d < 1 for d in dims):
            raise ArgumentError(f"dimensions must be positive: {dims}")

        indices = np.asarray(self.indices)
        if indices.size == 0:
            indices = np.zeros((0, len(dims)), dtype=INDEX_DTYPE)
        if indices.ndim != 2 or indices.shape[1] != len(dims):
            raise ArgumentError(f"indices must be (M, {len(dims)}), got {indices.shape}")
        if indices.shape[0] and (indices.min() < 0 or (indices.max(axis=0) >= np.array(dims)).any()):
            raise IndexRangeError(f"index out of range for dims {dims}")
        indices = np.ascontiguousarray(indices, dtype=INDEX_DTYPE)

        values = np.ascontiguousarray(self.values, dtype=VALUE_DTYPE).reshape(-1)
        if values.shape[0] != indices.shape[0]:
            raise ArgumentError(f"{indices.shape[0]} index tuples but {values.shape[0]} values")

        if self.sorted_under is not None:
            object.__setattr__(self, 'sorted_under', check_mode_order(self.sorted_under, len(dims)))

        indices.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, 'dims', dims)
        object.__setattr__(self, 'indices', indices)
        object.__setattr__(self, 'values', values)

    @classmethod
    def from_entries(cls, entries, dims=None):
        """Build from [(index_tuple, value), ...] with 0-based indices."""
        entries = list(entries)
        if not entries:
            if dims is None:
                raise ArgumentError("dims are required for an empty tensor")
            return cls(tuple(dims), np.zeros((0, len(dims)), dtype=INDEX_DTYPE), np.zeros(0))
        indices = np.array([e[0] for e in entries], dtype=np.int64)
        values = np.array([e[1] for e in entries], dtype=VALUE_DTYPE)
        if dims is None:
            dims = tuple(int(x) + 1 for x in indices.max(axis=0))
        return cls(tuple(dims), indices, values)

    @classmethod
    def empty(cls, dims):
        return cls(tuple(dims), np.zeros((0, len(dims)), dtype=INDEX_DTYPE), np.zeros(0))

    @property
    def order(self):
        return len(self.dims)

    @property
    def nnz(self):
        return int(self.values.shape[0])

    def entries(self):
        """[(index_tuple, value), ...] in the current entry order."""
        return [(tuple(int(x) for x in row), float(v)) for row, v in zip(self.indices, self.values)]

    def entry_multiset(self):
        """Order-independent view of the entries, for equality checks."""
        return sorted(self.entries())

    def norm(self):
        return float(np.sqrt(np.dot(self.values, self.values)))

    def scaled(self, alpha):
        return CooTensor(self.dims, self.indices, self.values * alpha, self.sorted_under)


@dataclass(frozen=True)
class TensorStats:
    """Population statistics of one tensor under one mode order."""
    order: int
    dims: tuple
    nnz: int
    mode_order: tuple
    slice_count: int
    fiber_count: int
    mean_nnz_per_slice: float
    stddev_nnz_per_slice: float
    max_nnz_per_slice: int
    mean_nnz_per_fiber: float
    stddev_nnz_per_fiber: float
    max_nnz_per_fiber: int
    density: float

    def to_dict(self):
        return {
            'order': self.order,
            'dims': list(self.dims),
            'nnz': self.nnz,
            'mode_order': list(self.mode_order),
            'slices': self.slice_count,
            'fibers': self.fiber_count,
            'mean_nnz_per_slice': self.mean_nnz_per_slice,
            'stddev_nnz_per_slice': self.stddev_nnz_per_slice,
            'max_nnz_per_slice': self.max_nnz_per_slice,
            'mean_nnz_per_fiber': self.mean_nnz_per_fiber,
            'stddev_nnz_per_fiber': self.stddev_nnz_per_fiber,
            'max_nnz_per_fiber': self.max_nnz_per_fiber,
            'density': self.density,
        }


# ============================================================
# FROSTT .tns I/O
# ============================================================

def parse_frostt(stream: Iterable[str], dims=None, source=None) -> CooTensor:
    """
    Parse FROSTT text: N 1-based integer indices then one real value per line.

    '#' lines and blank lines are comments. N comes from the first data line.
    dims defaults to the max observed index per mode; an explicit dims must
    cover every index. Duplicate coordinates are kept (see canonicalize).
    """
    rows = []
    vals = []
    arity = None

    for lineno, raw in enumerate(stream, start=1):
        line = raw.strip()
        if not line or line.startswith('#'):
            continue
        fields = line.split()
        if arity is None:
            if len(fields) < MIN_ORDER + 1:
                raise ParseError(f"expected at least {MIN_ORDER} indices and a value, "
                                 f"got {len(fields)} fields", lineno, source)
            arity = len(fields) - 1
        elif len(fields) != arity + 1:
            raise ArityError(f"expected {arity} indices and a value, got {len(fields)} fields",
                             lineno, source)
        if '_' in line:
            raise ParseError(f"digit separators are not allowed: {line!r}", lineno, source)
        try:
            idx = [int(f) for f in fields[:-1]]
            val = float(fields[-1])
        except ValueError:
            raise ParseError(f"non-numeric field in {line!r}", lineno, source) from None
        if not np.isfinite(val):
            raise ParseError(f"value must be finite, got {fields[-1]!r}", lineno, source)
        if min(idx) < 1:
            raise IndexRangeError(f"indices are 1-based, got {min(idx)}", lineno, source)
        if dims is not None and any(i > d for i, d in zip(idx, dims)):
            raise IndexRangeError(f"index beyond explicit dims {tuple(dims)}", lineno, source)
        rows.append(idx)
        vals.append(val)

    if arity is None:
        raise EmptyTensorError("no nonzeros found", 0, source)

    indices = np.array(rows, dtype=np.int64) - 1
    if dims is None:
        dims = tuple(int(x) + 1 for x in indices.max(axis=0))
    elif len(dims) != arity:
        raise ArityError(f"explicit dims have {len(dims)} modes, file has {arity}", 0, source)
    return CooTensor(tuple(dims), indices, np.array(vals, dtype=VALUE_DTYPE))


def write_frostt(t: CooTensor, stream: TextIO):
    """One entry per line, 1-based indices, value to 17 significant digits, current order."""
    fmt = ' '.join(['%d'] * t.order) + f' %.{VALUE_DIGITS}g\n'
    one_based = t.indices.astype(np.int64) + 1
    for row, v in zip(one_based, t.values):
        stream.write(fmt % (*row, v))


def read_tns(path, dims=None) -> CooTensor:
    with open(path, 'r', encoding='utf-8') as f:
        return parse_frostt(f, dims=dims, source=str(path))


def write_tns(t: CooTensor, path):
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        write_frostt(t, f)


# ============================================================
# Canonical form and sorting
# ============================================================

def identity_order(order):
    return tuple(range(order))


def check_mode_order(mode_order, order) -> tuple:
    """Validate a mode order; returns it as a tuple of ints."""
    try:
        mo = tuple(int(m) for m in mode_order)
    except (TypeError, ValueError):
        raise ArgumentError(f"mode order must be a sequence of ints: {mode_order!r}") from None
    if sorted(mo) != list(range(order)):
        raise ArgumentError(f"mode order {mo} is not a permutation of 0..{order - 1}")
    return mo


def canonicalize(t: CooTensor) -> CooTensor:
    """Merge duplicate coordinates by summing, drop exact zeros, sort under identity."""
    if t.nnz == 0:
        return CooTensor(t.dims, t.indices, t.values, identity_order(t.order))
    unique, inverse = np.unique(t.indices, axis=0, return_inverse=True)
    sums = np.zeros(unique.shape[0], dtype=VALUE_DTYPE)
    np.add.at(sums, inverse.reshape(-1), t.values)
    keep = sums != 0.0
    return CooTensor(t.dims, unique[keep], sums[keep], identity_order(t.order))


def sort_permutation(indices, mode_order):
    """Stable lexicographic order of index rows under mode_order."""
    if indices.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    # lexsort uses the last key as the primary one
    keys = [indices[:, m] for m in reversed(mode_order)]
    return np.lexsort(keys)


def sort_by_mode_order(t: CooTensor, mode_order: Sequence[int]) -> CooTensor:
    mo = check_mode_order(mode_order, t.order)
    if t.sorted_under == mo:
        return t
    perm = sort_permutation(t.indices, mo)
    return CooTensor(t.dims, t.indices[perm], t.values[perm], mo)


# ============================================================
# Statistics
# ============================================================

def group_starts(permuted, depth):
    """
    Start positions of runs sharing the first depth+1 columns of a sorted,
    permuted index array (the level-`depth` nodes of the CSF tree).
    """
    m = permuted.shape[0]
    if m == 0:
        return np.zeros(0, dtype=np.int64)
    changed = (permuted[1:, :depth + 1] != permuted[:-1, :depth + 1]).any(axis=1)
    return np.flatnonzero(np.concatenate(([True], changed)))


def run_lengths(starts, total):
    return np.diff(np.append(starts, total))


def _summary(counts):
    if counts.size == 0:
        return 0.0, 0.0, 0
    return float(counts.mean()), float(counts.std()), int(counts.max())


def compute_stats(t: CooTensor, mode_order=None) -> TensorStats:
    """
    Slice = entries sharing indices[mode_order[0]]; fiber = entries sharing the
    first N-1 permuted indices. Population standard deviation over nonempty groups.
    """
    mo = identity_order(t.order) if mode_order is None else check_mode_order(mode_order, t.order)
    s = sort_by_mode_order(t, mo)
    permuted = s.indices[:, list(mo)]
    m = s.nnz

    slice_sizes = run_lengths(group_starts(permuted, 0), m)
    fiber_sizes = run_lengths(group_starts(permuted, t.order - 2), m)
    s_mean, s_std, s_max = _summary(slice_sizes)
    f_mean, f_std, f_max = _summary(fiber_sizes)

    cells = float(np.prod([float(d) for d in t.dims]))
    return TensorStats(
        order=t.order,
        dims=t.dims,
        nnz=m,
        mode_order=mo,
        slice_count=int(slice_sizes.size),
        fiber_count=int(fiber_sizes.size),
        mean_nnz_per_slice=s_mean,
        stddev_nnz_per_slice=s_std,
        max_nnz_per_slice=s_max,
        mean_nnz_per_fiber=f_mean,
        stddev_nnz_per_fiber=f_std,
        max_nnz_per_fiber=f_max,
        density=m / cells,
    )


# ============================================================
# Synthetic power-law tensors
# ============================================================

def _allocate(total, weights, caps):
    """
    Split `total` units over slots proportionally to weights without exceeding
    caps. Largest-weight slots take the rounding remainder. Deterministic.
    """
    alloc = np.zeros(len(weights), dtype=np.int64)
    remaining = int(total)
    while remaining > 0:
        room = caps - alloc
        w = np.where(room > 0, weights, 0.0)
        if w.sum() <= 0:
            raise ArgumentError(f"cannot place {total} nonzeros within capacity {int(caps.sum())}")
        share = np.minimum(np.floor(remaining * w / w.sum()).astype(np.int64), room)
        if share.sum() == 0:
            ranked = np.argsort(-w, kind='stable')
            ranked = ranked[w[ranked] > 0][:remaining]
            share[ranked] = 1
        alloc += share
        remaining -= int(share.sum())
    return alloc


def _zipf_weights(n, skew, rng):
    # rank r gets 1/r^skew; ranks are shuffled so the heavy slot is not always id 0
    ranks = rng.permutation(n) + 1
    return 1.0 / ranks.astype(np.float64) ** skew


def generate_power_law(shape, nnz, skew=1.0, seed=0) -> CooTensor:
    """
    Synthetic tensor with Zipf-like nonzero populations.

    Mode 0 slices draw their nnz with weight 1/rank^skew; inside each slice the
    fibers (the first N-1 indices) are populated the same way and leaf indices
    are drawn without replacement. skew 0 gives near-uniform populations.
    """
    shape = tuple(int(d) for d in shape)
    if len(shape) < MIN_ORDER or any(d < 1 for d in shape):
        raise ArgumentError(f"shape must have >= {MIN_ORDER} positive dims: {shape}")
    if skew < 0:
        raise ArgumentError(f"skew must be >= 0, got {skew}")
    nnz = int(nnz)
    capacity = int(np.prod([float(d) for d in shape]))
    if nnz < 0 or nnz > capacity:
        raise ArgumentError(f"nnz {nnz} exceeds shape capacity {capacity}")

    rng = np.random.default_rng(seed)
    slice_cap = int(np.prod(shape[1:]))
    leaf = shape[-1]
    mid_shape = shape[1:-1]
    fibers_per_slice = int(np.prod(mid_shape))

    slice_counts = _allocate(nnz, _zipf_weights(shape[0], skew, rng),
                             np.full(shape[0], slice_cap, dtype=np.int64))

    blocks = []
    for i in np.flatnonzero(slice_counts):
        fiber_counts = _allocate(slice_counts[i], _zipf_weights(fibers_per_slice, skew, rng),
                                 np.full(fibers_per_slice, leaf, dtype=np.int64))
        fibers = np.flatnonzero(fiber_counts)
        mids = np.stack(np.unravel_index(fibers, mid_shape), axis=1)
        for f, mid in zip(fibers, mids):
            c = int(fiber_counts[f])
            leaves = np.sort(rng.choice(leaf, size=c, replace=False))
            block = np.empty((c, len(shape)), dtype=np.int64)
            block[:, 0] = i
            block[:, 1:-1] = mid
            block[:, -1] = leaves
            blocks.append(block)

    if not blocks:
        return CooTensor.empty(shape)
    indices = np.concatenate(blocks)
    values = 1.0 - rng.random(indices.shape[0])     # (0, 1]
    return canonicalize(CooTensor(shape, indices, values))
