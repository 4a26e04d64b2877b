import numpy as np
import pytest

from tensor_core import CooTensor, canonicalize, write_tns

# Three slices of a 3 x 3 x 4 tensor under mode order (0, 1, 2):
#   slice 0: one nonzero                      -> COO slice
#   slice 1: three fibers of one nonzero      -> CSL slice
#   slice 2: one fiber of four nonzeros       -> CSF slice
# S = 3, F = 5, M = 8
WORKED_EXAMPLE_ENTRIES = [
    ((0, 0, 0), 1.0),
    ((1, 0, 1), 2.0),
    ((1, 1, 2), 3.0),
    ((1, 2, 0), 4.0),
    ((2, 1, 0), 5.0),
    ((2, 1, 1), 6.0),
    ((2, 1, 2), 7.0),
    ((2, 1, 3), 8.0),
]


@pytest.fixture
def worked_example():
    return canonicalize(CooTensor.from_entries(WORKED_EXAMPLE_ENTRIES, dims=(3, 3, 4)))


@pytest.fixture
def worked_example_file(tmp_path, worked_example):
    path = tmp_path / 'example.tns'
    write_tns(worked_example, path)
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def random_tensor(rng, dims, nnz):
    """Canonical tensor with `nnz` distinct random coordinates and values in [0.5, 1.5)."""
    cells = int(np.prod(dims))
    nnz = min(nnz, cells)
    flat = rng.choice(cells, size=nnz, replace=False)
    indices = np.stack(np.unravel_index(flat, dims), axis=1)
    values = rng.random(nnz) + 0.5
    return canonicalize(CooTensor(tuple(dims), indices, values))


def random_factors(rng, dims, rank):
    """Positive entries, so output rows never cancel to near zero."""
    return [rng.random((d, rank)) + 0.1 for d in dims]


@pytest.fixture
def make_tensor():
    return random_tensor


@pytest.fixture
def make_factors():
    return random_factors


def separated_factors(rng, dims, rank):
    """
    Positive factors whose columns sit on disjoint, equal row blocks, so the
    components are orthogonal in every mode and the tensor is block diagonal.
    Entries are uniform in [0.5, 1.5) inside a block and 0 outside; blocks
    are filled column by column, mode by mode.
    """
    factors = []
    for d in dims:
        f = np.zeros((d, rank))
        for r in range(rank):
            lo, hi = r * d // rank, (r + 1) * d // rank
            f[lo:hi, r] = rng.random(hi - lo) + 0.5
        factors.append(f)
    return factors


@pytest.fixture
def make_separated_factors():
    return separated_factors
