"""
tenkit - sparse tensor format / MTTKRP / CPD toolkit, command-line front end

Usage:
    python tenkit.py inspect  data/nell2.tns [--mode-order 0,2,1] [--xlsx report.xlsx]
    python tenkit.py convert  raw.tns --out clean.tns [--mode-order 2,0,1]
    python tenkit.py mttkrp   data/nell2.tns --format hbcsf --mode 0 --check
    python tenkit.py cpd      data/nell2.tns --rank 16 --iters 20 --out fit.csv
    python tenkit.py simulate data/nell2.tns --thresholds inf,1024,128,32 --out sweep.csv
    python tenkit.py gen      --shape 64,64,4096 --nnz 100000 --skew 2 --out skewed.tns

Add --json (before or after the command) to print one JSON document instead
of the human report. Progress notes go to stderr.

Exit codes: 0 ok, 2 bad arguments, 3 unusable data or unreadable file,
4 --check deviation above tolerance.
"""

import argparse
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from balance import (
    DEFAULT_BLOCK_SIZE, DEFAULT_FIBER_THRESHOLD, DEFAULT_WARP_SIZE, FORMATS, SplitConfig,
    assign_slice_blocks, build_representation, representation_csf,
)
from cpd import DEFAULT_FIT_TOL, DEFAULT_FORMAT, DEFAULT_MAX_ITERS, DEFAULT_RANK, cp_als, fit_history_frame
from formats import allmode_orders, build_csf, census, mode_order_for, storage_words
from kernels import OpCount, csf_closed_form_ops, max_relative_deviation, mttkrp, mttkrp_coo
from sched_sim import (
    DEFAULT_BLOCKS_PER_SM, DEFAULT_NUM_SMS, MachineModel, parse_threshold, sweep_frame, sweep_split,
)
from tensor_core import (
    ArgumentError, CheckFailure, DataError, canonicalize, check_mode_order, compute_stats,
    generate_power_law, read_tns, sort_by_mode_order, write_tns,
)

# ============================================================
# CONFIGURATION
# ============================================================

DEFAULT_REPEATS = 5
DEFAULT_WARMUPS = 1
CHECK_TOLERANCE = 1e-8
DEFAULT_THRESHOLDS = 'inf,1024,128,32'
SEED_ENV = 'TENKIT_SEED'

EXIT_OK = 0
EXIT_ARGUMENT = 2
EXIT_DATA = 3
EXIT_CHECK = 4

BANNER = "=" * 60


# ============================================================
# Argument helpers
# ============================================================

def parse_int_list(text, what):
    try:
        return [int(x) for x in str(text).replace(' ', '').split(',') if x != '']
    except ValueError:
        raise ArgumentError(f"bad {what} {text!r}; expected comma-separated integers") from None


def parse_thresholds(text):
    values = [parse_threshold(x) for x in str(text).split(',') if x.strip()]
    if not values:
        raise ArgumentError("at least one threshold is required")
    return values


def threshold_label(tau):
    return 'inf' if math.isinf(tau) else int(tau)


def resolve_seed(seed):
    """Explicit --seed wins, then TENKIT_SEED, then 0."""
    if seed is not None:
        return seed
    env = os.environ.get(SEED_ENV)
    if env is None or env.strip() == '':
        return 0
    try:
        return int(env)
    except ValueError:
        raise ArgumentError(f"{SEED_ENV}={env!r} is not an integer") from None


def load_tensor(path, dims=None):
    """Read a .tns file and bring it to canonical form."""
    return canonicalize(read_tns(path, dims=dims))


def random_factors(dims, rank, seed):
    rng = np.random.default_rng(seed)
    return [rng.random((d, rank)) for d in dims]


def split_config(args):
    return SplitConfig(fiber_threshold=args.fiber_threshold, block_size=args.block_size,
                       warp_size=args.warp_size)


def _emit_json(doc):
    print(json.dumps(doc, indent=2))


def _note(message):
    print(message, file=sys.stderr)


# ============================================================
# Report builders (shared with app.py)
# ============================================================

def inspect_report(t, name='', mode_orders=None, cfg: SplitConfig = None, value_bits=64):
    """Stats, per-format storage and slice census for every requested mode order."""
    cfg = cfg or SplitConfig()
    if mode_orders is None:
        orders = allmode_orders(t.dims)
    else:
        orders = [check_mode_order(mo, t.order) for mo in mode_orders]

    sections = []
    for mo in orders:
        storage = {}
        for fmt in FORMATS:
            if fmt == 'coo':
                rep = sort_by_mode_order(t, mo)
            else:
                rep = build_representation(t, fmt, mo[0], cfg, mo)
            storage[fmt] = storage_words(rep).with_value_bits(value_bits).to_dict()
        sections.append({
            'mode': mo[0],
            'mode_order': list(mo),
            'stats': compute_stats(t, mo).to_dict(),
            'storage': storage,
            'census': census(build_csf(t, mo)),
        })

    return {
        'tensor': name,
        'order': t.order,
        'dims': list(t.dims),
        'nnz': t.nnz,
        'density': t.nnz / float(np.prod([float(d) for d in t.dims])),
        'fiber_threshold': threshold_label(cfg.fiber_threshold),
        'value_bits': value_bits,
        'modes': sections,
    }


def inspect_frames(report):
    """(stats, storage, census) DataFrames, one row per mode order (per format for storage)."""
    stats_rows = []
    storage_rows = []
    census_rows = []
    for sec in report['modes']:
        order_label = ','.join(str(m) for m in sec['mode_order'])
        s = sec['stats']
        stats_rows.append({
            'mode_order': order_label, 'S': s['slices'], 'F': s['fibers'], 'M': s['nnz'],
            'mean_slc': s['mean_nnz_per_slice'], 'stddev_slc': s['stddev_nnz_per_slice'],
            'max_slc': s['max_nnz_per_slice'], 'mean_fbr': s['mean_nnz_per_fiber'],
            'stddev_fbr': s['stddev_nnz_per_fiber'], 'max_fbr': s['max_nnz_per_fiber'],
        })
        for fmt, rep in sec['storage'].items():
            storage_rows.append({
                'mode_order': order_label, 'format': fmt, 'index_words': rep['index_words'],
                'bytes': rep['bytes'], 'value_bytes': rep['value_bytes'],
            })
        census_rows.append({'mode_order': order_label, **sec['census']})
    return pd.DataFrame(stats_rows), pd.DataFrame(storage_rows), pd.DataFrame(census_rows)


def simulate_report(t, name='', thresholds=None, machine: MachineModel = None, mode=0):
    """Threshold sweep over the mode-`mode` CSF tree; returns (report dict, DataFrame)."""
    machine = machine or MachineModel()
    thresholds = parse_thresholds(DEFAULT_THRESHOLDS) if thresholds is None else thresholds
    if not 0 <= mode < t.order:
        raise ArgumentError(f"mode {mode} out of range for order {t.order}")
    csf = build_csf(t, mode_order_for(t.dims, mode))
    points = sweep_split(csf, thresholds, machine)
    frame = sweep_frame(points)
    frame['threshold'] = [threshold_label(p.threshold) for p in points]
    doc = {
        'tensor': name,
        'mode': mode,
        'machine': {
            'num_sms': machine.num_sms, 'warps_per_block': machine.warps_per_block,
            'warp_size': machine.warp_size, 'blocks_per_sm': machine.blocks_per_sm,
        },
        'note': 'sm_efficiency_proxy and occupancy_proxy are cost-model quantities',
        'sweep': frame.to_dict(orient='records'),
    }
    return doc, frame


# ============================================================
# Benchmark records
# ============================================================

@dataclass
class BenchRecord:
    tensor: str
    format: str
    mode: int
    rank: int
    wall_seconds: float
    ops: OpCount
    preprocessing_seconds: float
    threads: int = 1
    checksum: float = 0.0
    csf_closed_form_ops: int = None
    max_deviation: float = None
    baseline: dict = field(default=None)
    iterations_to_amortize: int = None

    @property
    def gflops(self):
        if self.wall_seconds <= 0:
            return 0.0
        return self.ops.total / self.wall_seconds / 1e9

    def amortize_against(self, base: 'BenchRecord'):
        """
        Kernel calls needed before the extra preprocessing of this format is
        paid back by its faster kernel. None when it never pays back.
        """
        extra_pre = self.preprocessing_seconds - base.preprocessing_seconds
        gain = base.wall_seconds - self.wall_seconds
        if extra_pre <= 0:
            calls = 0
        elif gain <= 0:
            calls = None
        else:
            calls = math.ceil(extra_pre / gain)
        self.baseline = {
            'format': base.format,
            'wall_seconds': base.wall_seconds,
            'preprocessing_seconds': base.preprocessing_seconds,
            'gflops': base.gflops,
        }
        self.iterations_to_amortize = calls
        return calls

    def to_dict(self):
        return {
            'tensor': self.tensor,
            'format': self.format,
            'mode': self.mode,
            'rank': self.rank,
            'threads': self.threads,
            'wall_seconds': self.wall_seconds,
            'preprocessing_seconds': self.preprocessing_seconds,
            'op_count': self.ops.total,
            'muls': self.ops.muls,
            'adds': self.ops.adds,
            'gflops': self.gflops,
            'gflops_basis': 'instrumented multiply + add count',
            'csf_closed_form_ops': self.csf_closed_form_ops,
            'checksum': self.checksum,
            'max_deviation': self.max_deviation,
            'baseline': self.baseline,
            'iterations_to_amortize': self.iterations_to_amortize,
        }


def time_kernel(fn, repeats=DEFAULT_REPEATS, warmups=DEFAULT_WARMUPS):
    """Median wall time of `repeats` calls after `warmups` untimed calls; returns (seconds, last result)."""
    if repeats < 1:
        raise ArgumentError(f"repeats must be >= 1, got {repeats}")
    result = None
    for _ in range(warmups):
        result = fn()
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        result = fn()
        times.append(time.perf_counter() - start)
    return float(np.median(times)), result


def run_mttkrp_bench(t, fmt, mode, factors, cfg: SplitConfig, threads=1, name='',
                     repeats=DEFAULT_REPEATS, warmups=DEFAULT_WARMUPS):
    """Build (timed as preprocessing) and run one representation; returns (BenchRecord, Y)."""
    start = time.perf_counter()
    rep = build_representation(t, fmt, mode, cfg)
    csf = representation_csf(rep)
    schedule = None
    if threads > 1 and fmt in ('bcsf', 'hbcsf') and csf is not None and csf.nnz:
        schedule = assign_slice_blocks(csf, cfg)
    pre = time.perf_counter() - start

    wall, (y, ops) = time_kernel(lambda: mttkrp(rep, factors, mode, threads, schedule), repeats, warmups)
    rank = factors[0].shape[1]
    record = BenchRecord(
        tensor=name, format=fmt, mode=mode, rank=rank, wall_seconds=wall, ops=ops,
        preprocessing_seconds=pre, threads=threads, checksum=float(y.sum()),
        csf_closed_form_ops=csf_closed_form_ops(csf, rank) if fmt in ('csf', 'bcsf') else None,
    )
    return record, y


# ============================================================
# Commands
# ============================================================

def cmd_inspect(args):
    dims = parse_int_list(args.dims, 'dims') if args.dims else None
    t = load_tensor(args.path, dims)
    orders = [parse_int_list(args.mode_order, 'mode order')] if args.mode_order else None
    report = inspect_report(t, Path(args.path).stem, orders, split_config(args), args.value_bits)
    stats_df, storage_df, census_df = inspect_frames(report)

    if args.xlsx:
        with pd.ExcelWriter(args.xlsx, engine='openpyxl') as writer:
            stats_df.to_excel(writer, sheet_name='Stats', index=False)
            storage_df.to_excel(writer, sheet_name='Storage', index=False)
            census_df.to_excel(writer, sheet_name='Census', index=False)
        _note(f"Workbook written: {args.xlsx}")

    if args.json:
        _emit_json(report)
        return EXIT_OK

    print(f"TENSOR {report['tensor']}")
    print(BANNER)
    print(f"  order:   {report['order']}")
    print(f"  dims:    {' x '.join(str(d) for d in report['dims'])}")
    print(f"  nnz:     {report['nnz']:,}")
    print(f"  density: {report['density']:.3e}")
    for sec in report['modes']:
        s = sec['stats']
        print(f"\nMODE ORDER {','.join(str(m) for m in sec['mode_order'])}")
        print("-" * 60)
        print(f"  S={s['slices']}  F={s['fibers']}  M={s['nnz']}")
        print(f"  nnz/slice  mean {s['mean_nnz_per_slice']:.2f}  stddev {s['stddev_nnz_per_slice']:.2f}"
              f"  max {s['max_nnz_per_slice']}")
        print(f"  nnz/fiber  mean {s['mean_nnz_per_fiber']:.2f}  stddev {s['stddev_nnz_per_fiber']:.2f}"
              f"  max {s['max_nnz_per_fiber']}")
        print("  index words: " + '  '.join(f"{fmt.upper()}={rep['index_words']}"
                                           for fmt, rep in sec['storage'].items()))
        print("  slice census: " + '  '.join(f"{k}={v}" for k, v in sec['census'].items()))
    return EXIT_OK


def cmd_convert(args):
    dims = parse_int_list(args.dims, 'dims') if args.dims else None
    t = load_tensor(args.path, dims)
    if args.mode_order:
        t = sort_by_mode_order(t, parse_int_list(args.mode_order, 'mode order'))
    write_tns(t, args.out)
    doc = {'input': str(args.path), 'output': str(args.out), 'dims': list(t.dims), 'nnz': t.nnz,
           'sorted_under': list(t.sorted_under) if t.sorted_under else None}
    if args.json:
        _emit_json(doc)
    else:
        print(f"Wrote {t.nnz:,} nonzeros ({' x '.join(str(d) for d in t.dims)}) to {args.out}")
    return EXIT_OK


def cmd_mttkrp(args):
    t = load_tensor(args.path)
    if not 0 <= args.mode < t.order:
        raise ArgumentError(f"mode {args.mode} out of range for order {t.order}")
    if args.rank < 1:
        raise ArgumentError(f"rank must be >= 1, got {args.rank}")
    cfg = split_config(args)
    factors = random_factors(t.dims, args.rank, resolve_seed(args.seed))
    name = Path(args.path).stem

    _note(f"Running {args.format} MTTKRP, mode {args.mode}, R={args.rank}...")
    record, y = run_mttkrp_bench(t, args.format, args.mode, factors, cfg, args.threads, name,
                                 args.repeats, args.warmups)
    if args.baseline:
        base, _ = run_mttkrp_bench(t, args.baseline, args.mode, factors, cfg, args.threads, name,
                                   args.repeats, args.warmups)
        record.amortize_against(base)
    if args.check:
        ref, _ = mttkrp_coo(t, factors, args.mode)
        record.max_deviation = max_relative_deviation(y, ref)

    if args.csv:
        pd.DataFrame([{k: v for k, v in record.to_dict().items() if k != 'baseline'}]).to_csv(
            args.csv, index=False)

    if args.json:
        _emit_json(record.to_dict())
    else:
        d = record.to_dict()
        print(f"MTTKRP {name}  format={d['format']}  mode={d['mode']}  R={d['rank']}")
        print(BANNER)
        print(f"  preprocessing:  {d['preprocessing_seconds']:.6f} s")
        print(f"  kernel median:  {d['wall_seconds']:.6f} s")
        print(f"  ops:            {d['op_count']:,} ({d['muls']:,} mul + {d['adds']:,} add)")
        if d['csf_closed_form_ops'] is not None:
            print(f"  closed form:    {d['csf_closed_form_ops']:,} (2(S+M)R)")
        print(f"  GFLOPs:         {d['gflops']:.4f}")
        print(f"  checksum:       {d['checksum']:.17g}")
        if d['baseline']:
            calls = d['iterations_to_amortize']
            print(f"  vs {d['baseline']['format']}:  "
                  + ("never amortized" if calls is None else f"amortized after {calls} call(s)"))
        if d['max_deviation'] is not None:
            print(f"  max deviation vs COO: {d['max_deviation']:.3e}")

    if record.max_deviation is not None and record.max_deviation > args.tolerance:
        raise CheckFailure(f"max relative deviation {record.max_deviation:.3e} "
                           f"exceeds tolerance {args.tolerance:.1e}")
    return EXIT_OK


def cmd_cpd(args):
    t = load_tensor(args.path)
    cfg = split_config(args)
    _note(f"CPD-ALS R={args.rank}, format {args.format}, up to {args.iters} iterations...")
    model, history = cp_als(t, rank=args.rank, max_iters=args.iters, fit_tol=args.tol,
                            fmt=args.format, seed=resolve_seed(args.seed), cfg=cfg, threads=args.threads)
    frame = fit_history_frame(history)
    if args.out:
        frame.to_csv(args.out, index=False)
        _note(f"Fit history written: {args.out}")

    if args.json:
        _emit_json({
            'tensor': Path(args.path).stem,
            'rank': model.rank,
            'format': args.format,
            'final_fit': history[-1].fit,
            'iterations': history[-1].iteration,
            'weights': [float(w) for w in model.weights],
            'history': frame.to_dict(orient='records'),
        })
        return EXIT_OK

    print(f"CPD-ALS {Path(args.path).stem}  R={model.rank}  format={args.format}")
    print(BANNER)
    print(frame[['iteration', 'fit', 'delta']].to_string(index=False))
    print(f"\n  final fit: {history[-1].fit:.8f}")
    top = np.sort(model.weights)[::-1][:5]
    print(f"  largest weights: {', '.join(f'{w:.4g}' for w in top)}")
    return EXIT_OK


def cmd_simulate(args):
    t = load_tensor(args.path)
    machine = MachineModel.for_block_size(args.block_size, args.warp_size, args.sms, args.blocks_per_sm)
    doc, frame = simulate_report(t, Path(args.path).stem, parse_thresholds(args.thresholds),
                                 machine, args.mode)
    if args.out:
        frame.to_csv(args.out, index=False)
        _note(f"Sweep written: {args.out}")

    if args.json:
        _emit_json(doc)
    else:
        print(f"SPLIT SWEEP {doc['tensor']}  mode={args.mode}  SMs={machine.num_sms}  "
              f"block={machine.block_size}  warp={machine.warp_size}")
        print(BANNER)
        print(frame.to_string(index=False))
        print("\n  (efficiency and occupancy columns are cost-model proxies)")
    return EXIT_OK


def cmd_gen(args):
    shape = parse_int_list(args.shape, 'shape')
    seed = resolve_seed(args.seed)
    t = generate_power_law(shape, args.nnz, args.skew, seed)
    write_tns(t, args.out)
    doc = {'output': str(args.out), 'dims': list(t.dims), 'nnz': t.nnz, 'skew': args.skew, 'seed': seed}
    if args.json:
        _emit_json(doc)
    else:
        print(f"Generated {t.nnz:,} nonzeros ({' x '.join(str(d) for d in t.dims)}, skew {args.skew}, "
              f"seed {seed}) -> {args.out}")
    return EXIT_OK


# ============================================================
# Parser
# ============================================================

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--json', action='store_true', default=argparse.SUPPRESS,
                        help='Print one JSON document instead of the text report')

    split = argparse.ArgumentParser(add_help=False)
    split.add_argument('--fiber-threshold', type=parse_threshold, default=DEFAULT_FIBER_THRESHOLD,
                       help=f'Fiber split threshold, integer or inf (default {DEFAULT_FIBER_THRESHOLD})')
    split.add_argument('--block-size', type=int, default=DEFAULT_BLOCK_SIZE,
                       help=f'Nonzeros per scheduling unit (default {DEFAULT_BLOCK_SIZE})')
    split.add_argument('--warp-size', type=int, default=DEFAULT_WARP_SIZE,
                       help=f'Warp width (default {DEFAULT_WARP_SIZE})')

    parser = argparse.ArgumentParser(prog='tenkit', description='Sparse tensor formats, MTTKRP and CPD toolkit')
    parser.add_argument('--json', action='store_true', default=False,
                        help='Print one JSON document instead of the text report')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('inspect', parents=[common, split], help='Stats, storage and slice census')
    p.add_argument('path')
    p.add_argument('--dims', help='Explicit dims, e.g. 100,200,300')
    p.add_argument('--mode-order', help='Only this mode order, e.g. 0,2,1 (default: one per mode)')
    p.add_argument('--value-bits', type=int, choices=(32, 64), default=64)
    p.add_argument('--xlsx', help='Also write Stats/Storage/Census sheets to this workbook')
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser('convert', parents=[common], help='Canonicalize (and re-sort) a .tns file')
    p.add_argument('path')
    p.add_argument('--out', required=True)
    p.add_argument('--dims')
    p.add_argument('--mode-order')
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser('mttkrp', parents=[common, split], help='Benchmark one MTTKRP kernel')
    p.add_argument('path')
    p.add_argument('--format', choices=FORMATS, default=DEFAULT_FORMAT)
    p.add_argument('--mode', type=int, default=0)
    p.add_argument('--rank', type=int, default=DEFAULT_RANK)
    p.add_argument('--threads', type=int, default=1)
    p.add_argument('--seed', type=int, default=None, help=f'Factor seed (fallback ${SEED_ENV}, then 0)')
    p.add_argument('--check', action='store_true', help='Compare against the COO kernel')
    p.add_argument('--tolerance', type=float, default=CHECK_TOLERANCE)
    p.add_argument('--baseline', choices=FORMATS, help='Also time this format and report amortization')
    p.add_argument('--repeats', type=int, default=DEFAULT_REPEATS)
    p.add_argument('--warmups', type=int, default=DEFAULT_WARMUPS)
    p.add_argument('--csv', help='Write the benchmark record to this CSV file')
    p.set_defaults(func=cmd_mttkrp)

    p = sub.add_parser('cpd', parents=[common, split], help='CPD-ALS with fit history')
    p.add_argument('path')
    p.add_argument('--rank', type=int, default=DEFAULT_RANK)
    p.add_argument('--iters', type=int, default=DEFAULT_MAX_ITERS)
    p.add_argument('--tol', type=float, default=DEFAULT_FIT_TOL)
    p.add_argument('--format', choices=FORMATS, default=DEFAULT_FORMAT)
    p.add_argument('--threads', type=int, default=1)
    p.add_argument('--seed', type=int, default=None)
    p.add_argument('--out', help='Fit history CSV path')
    p.set_defaults(func=cmd_cpd)

    p = sub.add_parser('simulate', parents=[common], help='Fiber/slice split sweep on the cycle model')
    p.add_argument('path')
    p.add_argument('--thresholds', default=DEFAULT_THRESHOLDS)
    p.add_argument('--sms', type=int, default=DEFAULT_NUM_SMS)
    p.add_argument('--block-size', type=int, default=DEFAULT_BLOCK_SIZE)
    p.add_argument('--warp-size', type=int, default=DEFAULT_WARP_SIZE)
    p.add_argument('--blocks-per-sm', type=int, default=DEFAULT_BLOCKS_PER_SM)
    p.add_argument('--mode', type=int, default=0)
    p.add_argument('--out', help='Sweep CSV path')
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser('gen', parents=[common], help='Write a synthetic power-law tensor')
    p.add_argument('--shape', required=True, help='e.g. 64,64,4096')
    p.add_argument('--nnz', type=int, required=True)
    p.add_argument('--skew', type=float, default=1.0)
    p.add_argument('--seed', type=int, default=None)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_gen)

    return parser


# ============================================================
# MAIN
# ============================================================

def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_ARGUMENT

    try:
        return args.func(args)
    except ArgumentError as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return EXIT_ARGUMENT
    except CheckFailure as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return EXIT_CHECK
    except (DataError, OSError) as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == '__main__':
    sys.exit(main())
