import math

import numpy as np
import pytest

from balance import (
    SplitConfig, assign_slice_blocks, build_bcsf, build_representation, imbalance_metrics,
    split_fibers, split_hbcsf,
)
from formats import CsfTensor, HbCsfTensor, build_csf, build_hbcsf, storage_words
from kernels import max_relative_deviation, mttkrp_csf
from tensor_core import ArgumentError, CooTensor, generate_power_law


def full_tensor(dims):
    """Every cell of `dims` set to 1.0, in canonical order."""
    indices = np.indices(dims).reshape(len(dims), -1).T
    return CooTensor(dims, indices, np.ones(indices.shape[0]))


def test_split_config_validation():
    assert SplitConfig().fiber_threshold == 128
    assert SplitConfig(fiber_threshold=math.inf).fiber_threshold == math.inf
    with pytest.raises(ArgumentError):
        SplitConfig(fiber_threshold=0)
    with pytest.raises(ArgumentError):
        SplitConfig(fiber_threshold=2.5)
    with pytest.raises(ArgumentError):
        SplitConfig(block_size=100, warp_size=32)


# ============================================================
# Fiber splitting
# ============================================================

def test_split_worked_example(worked_example):
    csf = build_csf(worked_example, (0, 1, 2))
    split = split_fibers(csf, SplitConfig(fiber_threshold=2, block_size=4, warp_size=1))
    assert split.split
    assert split.fiber_count == 6
    assert split.fiber_nnz().tolist() == [1, 1, 1, 1, 2, 2]
    assert split.idx[1].tolist() == [0, 0, 1, 2, 1, 1]
    assert split.ptr[0].tolist() == [0, 1, 4, 6]
    assert split.slice_nnz().tolist() == [1, 3, 4]
    assert split.flatten().entries() == csf.flatten().entries()
    assert storage_words(split).format == 'bcsf'


def test_split_uneven_tail():
    csf = build_csf(generate_power_law((1, 1, 64), 10, skew=0.0, seed=0), (0, 1, 2))
    split = split_fibers(csf, SplitConfig(fiber_threshold=4, block_size=4, warp_size=1))
    assert split.fiber_nnz().tolist() == [4, 4, 2]


def test_split_single_long_fiber_in_half():
    csf = build_csf(full_tensor((1, 1, 32)), (0, 1, 2))
    split = split_fibers(csf, SplitConfig(fiber_threshold=16))
    assert split.fiber_nnz().tolist() == [16, 16]
    assert split.idx[1].tolist() == [0, 0]
    assert split.slice_nnz().tolist() == [32]


def test_no_split_returns_same_tree(worked_example):
    csf = build_csf(worked_example, (0, 1, 2))
    assert split_fibers(csf, SplitConfig(fiber_threshold=4)) is csf
    assert split_fibers(csf, SplitConfig(fiber_threshold=math.inf)) is csf


def test_split_order_four():
    t = generate_power_law((3, 4, 5, 64), 400, skew=1.5, seed=4)
    csf = build_csf(t, (0, 1, 2, 3))
    split = split_fibers(csf, SplitConfig(fiber_threshold=3, block_size=4, warp_size=1))
    assert split.fiber_nnz().max() <= 3
    assert split.level_sizes[:2] == csf.level_sizes[:2]
    assert split.flatten().entries() == csf.flatten().entries()


def test_split_invariance_with_parallel_schedule(rng, make_factors):
    t = generate_power_law((8, 8, 64), 1500, skew=1.5, seed=3)
    cfg = SplitConfig(fiber_threshold=4, block_size=16, warp_size=4)
    csf = build_csf(t, (0, 1, 2))
    split = split_fibers(csf, cfg)
    schedule = assign_slice_blocks(split, cfg)
    factors = make_factors(rng, t.dims, 8)

    seq, _ = mttkrp_csf(csf, factors, 0)
    par, _ = mttkrp_csf(split, factors, 0, threads=4, schedule=schedule)
    assert max_relative_deviation(par, seq) <= 1e-10
    assert split.fiber_nnz().max() <= 4
    assert split.flatten().entry_multiset() == t.entry_multiset()
    assert schedule.unit_count > split.slice_count


# ============================================================
# Slice splitting
# ============================================================

def test_assign_slice_blocks_worked_example(worked_example):
    csf = build_csf(worked_example, (0, 1, 2))
    schedule = assign_slice_blocks(csf, SplitConfig(block_size=2, warp_size=1))
    assert schedule.multiplicity.tolist() == [1, 2, 2]
    assert schedule.units() == [(0, 0, 0, 1), (1, 1, 1, 3), (2, 1, 3, 4), (3, 2, 4, 5)]
    assert schedule.units_per_slice().tolist() == [1, 2, 1]


def test_assign_slice_blocks_dense_slice():
    # 64 fibers of 32 nonzeros each in one slice
    csf = build_csf(full_tensor((1, 64, 32)), (0, 1, 2))
    assert csf.nnz == 2048
    schedule = assign_slice_blocks(csf, SplitConfig(block_size=512, warp_size=32))
    assert schedule.multiplicity.tolist() == [4]
    assert schedule.units_per_slice().tolist() == [4]
    assert (schedule.fiber_hi - schedule.fiber_lo).tolist() == [16, 16, 16, 16]


def test_assign_slice_blocks_covers_every_fiber():
    t = generate_power_law((16, 16, 128), 3000, skew=1.2, seed=9)
    csf = split_fibers(build_csf(t, (0, 1, 2)), SplitConfig(fiber_threshold=8, block_size=32, warp_size=8))
    schedule = assign_slice_blocks(csf, SplitConfig(block_size=32, warp_size=8))
    assert schedule.fiber_lo[0] == 0
    assert schedule.fiber_hi[-1] == csf.fiber_count
    assert (schedule.fiber_lo[1:] == schedule.fiber_hi[:-1]).all()
    assert (schedule.units_per_slice() <= schedule.multiplicity).all()
    expected = np.maximum(1, -(-csf.slice_nnz() // 32))
    assert schedule.multiplicity.tolist() == expected.tolist()


# ============================================================
# Imbalance metrics
# ============================================================

def test_imbalance_metrics_worked_example(worked_example):
    csf = build_csf(worked_example, (0, 1, 2))
    m = imbalance_metrics(csf)
    assert (m.slices, m.fibers, m.nnz) == (3, 5, 8)
    assert m.stddev_slc == pytest.approx(math.sqrt(14 / 9))
    assert m.max_fbr == 4
    after = imbalance_metrics(split_fibers(csf, SplitConfig(fiber_threshold=2)))
    assert after.max_fbr == 2
    assert after.stddev_fbr < m.stddev_fbr
    assert after.stddev_slc == m.stddev_slc
    row = m.to_row('example', 0)
    assert set(row) == {'tensor', 'mode', 'S', 'F', 'M', 'stddev_slc', 'stddev_fbr', 'max_slc', 'max_fbr'}


# ============================================================
# Representations
# ============================================================

def test_build_representation_formats(worked_example):
    cfg = SplitConfig(fiber_threshold=2)
    assert build_representation(worked_example, 'coo', 0, cfg) is worked_example
    csf = build_representation(worked_example, 'csf', 0, cfg)
    assert isinstance(csf, CsfTensor) and not csf.split
    bcsf = build_representation(worked_example, 'bcsf', 0, cfg)
    assert bcsf.split and bcsf.fiber_nnz().max() == 2
    h = build_representation(worked_example, 'hbcsf', 0, cfg)
    assert isinstance(h, HbCsfTensor)
    assert h.csf_part.split and h.csl_part.nnz == 3
    assert build_representation(worked_example, 'csf', 2).mode_order == (2, 0, 1)


def test_build_representation_errors(worked_example):
    with pytest.raises(ArgumentError):
        build_representation(worked_example, 'dense', 0)
    with pytest.raises(ArgumentError):
        build_representation(worked_example, 'csf', 0, mode_order=(1, 0, 2))


def test_build_bcsf_and_split_hbcsf(worked_example):
    cfg = SplitConfig(fiber_threshold=3)
    assert build_bcsf(worked_example, (0, 1, 2), cfg).fiber_count == 6
    h = build_hbcsf(worked_example, (0, 1, 2))
    split = split_hbcsf(h, cfg)
    assert split.coo_part is h.coo_part and split.csl_part is h.csl_part
    assert split.csf_part.fiber_nnz().tolist() == [3, 1]
    assert split_hbcsf(h, SplitConfig(fiber_threshold=8)) is h
