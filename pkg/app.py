"""
tenkit report server - JSON reports over the .tns files in one directory

    GET /                                   tensors available in TENKIT_DATA_DIR
    GET /tensor/<name>/inspect              stats, storage words, slice census
        ?mode_order=0,2,1&fiber_threshold=128&value_bits=64
    GET /tensor/<name>/simulate             split sweep on the cycle model
        ?thresholds=inf,1024,128,32&sms=56&block_size=512&warp_size=32&mode=0

Run locally with `python app.py`, deployed with `gunicorn app:app`.
"""

import os
from functools import lru_cache
from pathlib import Path

from flask import Flask, jsonify, request

from balance import DEFAULT_BLOCK_SIZE, DEFAULT_FIBER_THRESHOLD, DEFAULT_WARP_SIZE, SplitConfig
from sched_sim import DEFAULT_NUM_SMS, MachineModel, parse_threshold
from tenkit import (
    DEFAULT_THRESHOLDS, inspect_report, load_tensor, parse_int_list, parse_thresholds, simulate_report,
)
from tensor_core import ArgumentError, DataError

app = Flask(__name__)
app.config['TENKIT_DATA_DIR'] = os.environ.get('TENKIT_DATA_DIR', 'data')


class TensorNotFound(Exception):
    pass


# Tensor lookup helpers
def data_dir():
    return Path(app.config['TENKIT_DATA_DIR'])


def tensor_path(name):
    if not name or name.startswith('.') or Path(name).name != name:
        raise TensorNotFound(name)
    path = data_dir() / f"{name}.tns"
    if not path.is_file():
        raise TensorNotFound(name)
    return path


@lru_cache(maxsize=8)
def _load_cached(path, mtime):
    return load_tensor(path)


def get_tensor(name):
    path = tensor_path(name)
    return _load_cached(str(path), path.stat().st_mtime)


def int_arg(key, default):
    raw = request.args.get(key)
    if raw is None or raw == '':
        return default
    try:
        return int(raw)
    except ValueError:
        raise ArgumentError(f"query parameter {key} must be an integer, got {raw!r}") from None


# ============================================================
# Error responses
# ============================================================

@app.errorhandler(TensorNotFound)
def tensor_not_found(e):
    return jsonify({'error': f"tensor not found: {e}"}), 404


@app.errorhandler(ArgumentError)
def bad_arguments(e):
    return jsonify({'error': str(e)}), 400


@app.errorhandler(DataError)
def bad_data(e):
    return jsonify({'error': str(e)}), 422


# ============================================================
# Routes
# ============================================================

@app.route('/')
def index():
    root = data_dir()
    tensors = []
    if root.is_dir():
        for p in sorted(root.glob('*.tns')):
            tensors.append({
                'name': p.stem,
                'bytes': p.stat().st_size,
                'inspect': f"/tensor/{p.stem}/inspect",
                'simulate': f"/tensor/{p.stem}/simulate",
            })
    return jsonify({'data_dir': str(root), 'tensors': tensors})


@app.route('/tensor/<name>/inspect')
def tensor_inspect(name):
    t = get_tensor(name)
    mode_order = request.args.get('mode_order')
    orders = [parse_int_list(mode_order, 'mode order')] if mode_order else None
    tau = request.args.get('fiber_threshold', str(DEFAULT_FIBER_THRESHOLD))
    cfg = SplitConfig(fiber_threshold=parse_threshold(tau))
    value_bits = int_arg('value_bits', 64)
    if value_bits not in (32, 64):
        raise ArgumentError(f"value_bits must be 32 or 64, got {value_bits}")
    return jsonify(inspect_report(t, name, orders, cfg, value_bits))


@app.route('/tensor/<name>/simulate')
def tensor_simulate(name):
    t = get_tensor(name)
    thresholds = parse_thresholds(request.args.get('thresholds', DEFAULT_THRESHOLDS))
    machine = MachineModel.for_block_size(
        int_arg('block_size', DEFAULT_BLOCK_SIZE),
        int_arg('warp_size', DEFAULT_WARP_SIZE),
        int_arg('sms', DEFAULT_NUM_SMS),
    )
    doc, _ = simulate_report(t, name, thresholds, machine, int_arg('mode', 0))
    return jsonify(doc)


if __name__ == '__main__':
    app.run(debug=True, use_reloader=False, port=5020)
