"""
tenkit scheduling simulator - a cycle model of B-CSF MTTKRP on a GPU

Work mapping: a scheduling unit runs as one thread block, the block's warps
take fiber segments in order (the next idle warp takes the next segment) and a
warp spends ceil(nnz / warp_size) cycles on a segment. Blocks are dispatched in
schedule order to the earliest free slot (num_sms * blocks_per_sm slots).
Fiber combines and slice writes cost nothing. The efficiency and occupancy
figures are model proxies, not profiler counters.
"""

import heapq
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from balance import (
    DEFAULT_BLOCK_SIZE, DEFAULT_WARP_SIZE, BlockSchedule, ImbalanceMetrics, SplitConfig,
    assign_slice_blocks, imbalance_metrics, split_fibers,
)
from formats import CsfTensor
from tensor_core import ArgumentError

# ============================================================
# CONFIGURATION
# ============================================================

DEFAULT_NUM_SMS = 56
DEFAULT_BLOCKS_PER_SM = 1
SWEEP_COLUMNS = ['threshold', 'makespan', 'sm_efficiency_proxy', 'occupancy_proxy',
                 'stddev_fbr', 'stddev_slc']


@dataclass(frozen=True)
class MachineModel:
    num_sms: int = DEFAULT_NUM_SMS
    warps_per_block: int = DEFAULT_BLOCK_SIZE // DEFAULT_WARP_SIZE
    warp_size: int = DEFAULT_WARP_SIZE
    blocks_per_sm: int = DEFAULT_BLOCKS_PER_SM

    def __post_init__(self):
        for name in ('num_sms', 'warps_per_block', 'warp_size', 'blocks_per_sm'):
            if getattr(self, name) < 1:
                raise ArgumentError(f"{name} must be positive, got {getattr(self, name)}")

    @classmethod
    def for_block_size(cls, block_size, warp_size=DEFAULT_WARP_SIZE, num_sms=DEFAULT_NUM_SMS,
                       blocks_per_sm=DEFAULT_BLOCKS_PER_SM):
        if warp_size < 1 or block_size < 1:
            raise ArgumentError("block and warp sizes must be positive")
        if block_size % warp_size:
            raise ArgumentError(f"warp size {warp_size} does not divide block size {block_size}")
        return cls(num_sms, block_size // warp_size, warp_size, blocks_per_sm)

    @property
    def slots(self):
        return self.num_sms * self.blocks_per_sm

    @property
    def block_size(self):
        return self.warps_per_block * self.warp_size


@dataclass(frozen=True)
class SimReport:
    makespan_cycles: int
    per_block_cycles: list
    sm_efficiency_proxy: float
    occupancy_proxy: float
    total_work_cycles: int

    def to_dict(self):
        return {
            'makespan_cycles': self.makespan_cycles,
            'total_work_cycles': self.total_work_cycles,
            'blocks': len(self.per_block_cycles),
            'sm_efficiency_proxy': self.sm_efficiency_proxy,
            'occupancy_proxy': self.occupancy_proxy,
        }


@dataclass(frozen=True)
class SweepPoint:
    threshold: float
    report: SimReport
    metrics: ImbalanceMetrics

    def to_row(self):
        return {
            'threshold': self.threshold,
            'makespan': self.report.makespan_cycles,
            'sm_efficiency_proxy': self.report.sm_efficiency_proxy,
            'occupancy_proxy': self.report.occupancy_proxy,
            'stddev_fbr': self.metrics.stddev_fbr,
            'stddev_slc': self.metrics.stddev_slc,
        }


# ============================================================
# Simulation
# ============================================================

def _check_cover(schedule: BlockSchedule, t: CsfTensor):
    if schedule.fiber_count != t.fiber_count:
        raise ArgumentError(f"schedule covers {schedule.fiber_count} fibers, tensor has {t.fiber_count}")
    if schedule.unit_count == 0:
        if t.fiber_count:
            raise ArgumentError("empty schedule for a nonempty tensor")
        return
    order = np.argsort(schedule.fiber_lo, kind='stable')
    lo = schedule.fiber_lo[order]
    hi = schedule.fiber_hi[order]
    if lo[0] != 0 or hi[-1] != t.fiber_count or (lo[1:] != hi[:-1]).any() or (hi <= lo).any():
        raise ArgumentError("schedule units do not cover every fiber exactly once")
    slice_fibers = t.fiber_offsets(0)
    s = schedule.unit_slice
    if (s < 0).any() or (s >= t.slice_count).any() or \
            (schedule.fiber_lo < slice_fibers[s]).any() or (schedule.fiber_hi > slice_fibers[s + 1]).any():
        raise ArgumentError("schedule unit crosses a slice boundary")


def block_cycles(segment_cycles, warps):
    """Time of one block: segments handed in order to the next idle warp."""
    if len(segment_cycles) <= warps:
        return int(max(segment_cycles, default=0))
    heap = [(0, w) for w in range(warps)]
    for c in segment_cycles:
        busy, w = heapq.heappop(heap)
        heapq.heappush(heap, (busy + int(c), w))
    return max(busy for busy, _ in heap)


def _union_length(intervals):
    total = 0
    end = None
    for a, b in sorted(intervals):
        if end is None or a > end:
            total += b - a
            end = b
        elif b > end:
            total += b - end
            end = b
    return total


def simulate(schedule: BlockSchedule, t: CsfTensor, m: MachineModel) -> SimReport:
    """Makespan and utilization proxies for running `schedule` over `t` on machine `m`."""
    _check_cover(schedule, t)
    cycles = -(-t.fiber_nnz() // m.warp_size)
    total_work = int(cycles.sum())

    per_block = [block_cycles(cycles[lo:hi].tolist(), m.warps_per_block)
                 for lo, hi in zip(schedule.fiber_lo.tolist(), schedule.fiber_hi.tolist())]
    if not per_block:
        return SimReport(0, [], 0.0, 0.0, 0)

    # slot k belongs to SM k % num_sms, so the first wave spreads across SMs
    slots = [(0, k) for k in range(m.slots)]
    heapq.heapify(slots)
    busy = [[] for _ in range(m.num_sms)]
    makespan = 0
    for dur in per_block:
        free_at, k = heapq.heappop(slots)
        end = free_at + dur
        busy[k % m.num_sms].append((free_at, end))
        makespan = max(makespan, end)
        heapq.heappush(slots, (end, k))

    active = sum(_union_length(iv) for iv in busy)
    sm_eff = active / (m.num_sms * makespan) if makespan else 0.0
    occupancy = total_work / active / (m.warps_per_block * m.blocks_per_sm) if active else 0.0
    return SimReport(int(makespan), per_block, float(sm_eff), float(occupancy), total_work)


def one_block_per_slice(t: CsfTensor) -> BlockSchedule:
    """The schedule before slice splitting: each slice is one unit."""
    return assign_slice_blocks(t, SplitConfig(block_size=max(1, int(t.slice_nnz().max(initial=1))),
                                              warp_size=1))


# ============================================================
# Threshold sweep
# ============================================================

def parse_threshold(text):
    text = str(text).strip().lower()
    if text in ('inf', 'infinity', 'none', '∞'):
        return math.inf
    try:
        value = int(text)
    except ValueError:
        raise ArgumentError(f"bad fiber threshold {text!r}") from None
    if value < 1:
        raise ArgumentError(f"fiber threshold must be >= 1, got {value}")
    return value


def sweep_split(t: CsfTensor, thresholds, m: MachineModel, cfg: SplitConfig = None):
    """One simulation per threshold, with fiber splitting and slice blocks applied."""
    thresholds = list(thresholds)
    if not thresholds:
        raise ArgumentError("at least one threshold is required")
    cfg = cfg or SplitConfig(block_size=m.block_size, warp_size=m.warp_size)
    points = []
    for tau in thresholds:
        split = split_fibers(t, cfg.with_threshold(tau))
        schedule = assign_slice_blocks(split, cfg)
        points.append(SweepPoint(tau, simulate(schedule, split, m), imbalance_metrics(split)))
    return points


def sweep_frame(points) -> pd.DataFrame:
    return pd.DataFrame([p.to_row() for p in points], columns=SWEEP_COLUMNS)
