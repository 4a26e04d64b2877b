import inspect
import time

import numpy as np
import pytest

import cpd
from balance import build_representation
from cpd import (
    DEFAULT_RANK, KruskalModel, als_update_mode, cp_als, fit_history_frame, gram, hadamard_all_but,
    kruskal_to_coo, model_norm_squared, pinv_spsd, random_model,
)
from tensor_core import ArgumentError, CooTensor, DataError, NumericalFailureError


def exact_rank_tensor(rng, dims, rank):
    factors = [rng.random((d, rank)) + 0.1 for d in dims]
    return kruskal_to_coo(np.ones(rank), factors), factors


def penrose_residual(g, gp):
    return np.linalg.norm(g @ gp @ g - g) / max(np.linalg.norm(g), 1e-300)


# ============================================================
# Gram / Hadamard / pseudo-inverse
# ============================================================

def test_gram_of_orthonormal_columns():
    assert np.allclose(gram(np.eye(5)[:, :3]), np.eye(3), atol=0)


def test_gram_single_row():
    assert gram(np.array([[2.0, 3.0]])).tolist() == [[4.0, 6.0], [6.0, 9.0]]


def test_gram_matches_loops(rng):
    f = rng.standard_normal((7, 3))
    g = gram(f)
    for p in range(3):
        for q in range(3):
            assert abs(g[p, q] - sum(f[i, p] * f[i, q] for i in range(7))) <= 1e-12
    assert (g == g.T).all()


def test_hadamard_all_but(rng):
    grams = [gram(rng.standard_normal((5, 4))) for _ in range(3)]
    assert np.array_equal(hadamard_all_but([grams[0], np.ones((4, 4))], 1), grams[0])
    assert np.allclose(hadamard_all_but(grams, 0), grams[1] * grams[2], rtol=0, atol=1e-12)
    assert np.allclose(hadamard_all_but(grams, 1), grams[0] * grams[2], rtol=0, atol=1e-12)
    four = grams + [gram(rng.standard_normal((6, 4)))]
    assert np.allclose(hadamard_all_but(four, 3), grams[0] * grams[1] * grams[2], rtol=0, atol=1e-12)


def test_pinv_small_cases():
    assert np.allclose(pinv_spsd(np.eye(3)), np.eye(3))
    assert np.allclose(pinv_spsd(np.diag([4.0, 0.0])), np.diag([0.25, 0.0]))
    assert (pinv_spsd(np.zeros((2, 2))) == 0).all()


def test_pinv_penrose_conditions(rng):
    a = rng.standard_normal((8, 12))
    g = a @ a.T
    gp = pinv_spsd(g)
    scale = np.linalg.norm(g)
    assert np.linalg.norm(g @ gp @ g - g) <= 1e-8 * scale
    assert np.linalg.norm(gp @ g @ gp - gp) <= 1e-8 * np.linalg.norm(gp)


def test_pinv_random_and_rank_deficient(rng):
    for _ in range(100):
        r = int(rng.integers(1, 33))
        a = rng.standard_normal((r, r + 4))
        g = gram(a.T)
        assert penrose_residual(g, pinv_spsd(g)) <= 1e-8
    for _ in range(20):
        r = int(rng.integers(2, 33))
        k = int(rng.integers(1, r))
        a = rng.standard_normal((r, k))
        g = gram(a.T)
        assert penrose_residual(g, pinv_spsd(g)) <= 1e-8


def test_pinv_rejects_asymmetric():
    with pytest.raises(ArgumentError):
        pinv_spsd(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ArgumentError):
        pinv_spsd(np.ones((2, 3)))


# ============================================================
# Kruskal model
# ============================================================

def test_model_value_at_matches_dense(rng):
    model = KruskalModel(rng.random(3) + 0.5, [rng.standard_normal((d, 3)) for d in (2, 3, 4)])
    dense = model.full()
    for index in np.ndindex(*model.dims):
        assert abs(model.value_at(index) - dense[index]) <= 1e-10
    assert model.norm_squared() == pytest.approx(float((dense ** 2).sum()), rel=1e-10)


def test_kruskal_to_coo(rng):
    t, factors = exact_rank_tensor(rng, (3, 4, 5), 2)
    assert t.dims == (3, 4, 5)
    assert t.nnz == 60
    model = KruskalModel(np.ones(2), factors)
    for index, value in t.entries()[:10]:
        assert value == pytest.approx(model.value_at(index), rel=1e-12)


# ============================================================
# Mode update
# ============================================================

def test_update_recovers_rank_one_factor(rng):
    t, (a, b, c) = exact_rank_tensor(rng, (6, 7, 8), 1)
    model = random_model(t.dims, 1, seed=4)
    rep = build_representation(t, 'hbcsf', 0)
    new_a, _, _ = als_update_mode(rep, model, 0)
    cos = float(new_a[:, 0] @ a[:, 0]) / (np.linalg.norm(new_a) * np.linalg.norm(a))
    assert cos > 1 - 1e-10


def test_update_of_zero_tensor_is_zero():
    t = CooTensor.empty((3, 4, 5))
    model = random_model(t.dims, 2, seed=1)
    new, _, _ = als_update_mode(t, model, 1)
    assert new.shape == (4, 2)
    assert (new == 0).all()


def test_update_agrees_across_formats(rng):
    t, _ = exact_rank_tensor(rng, (5, 6, 7), 3)
    model = random_model(t.dims, 3, seed=2)
    for mode in range(3):
        ref, _, _ = als_update_mode(build_representation(t, 'coo', mode), model, mode)
        new, _, _ = als_update_mode(build_representation(t, 'hbcsf', mode), model, mode)
        assert np.abs(new - ref).max() <= 1e-9 * max(1.0, np.abs(ref).max())


# ============================================================
# cp_als
# ============================================================

# Components on disjoint row blocks are orthogonal in every mode, so ALS is
# not slowed down by near-collinear columns. Rows 0-4, 0-5 and 0-6 carry
# component 0 and the rest carry component 1; see separated_factors.
@pytest.mark.parametrize('seed', [0, 1, 2, 3])
def test_rank_two_tensor_is_recovered(rng, make_separated_factors, seed):
    t = kruskal_to_coo(np.ones(2), make_separated_factors(rng, (10, 12, 14), 2))
    model, history = cp_als(t, rank=2, max_iters=50, fit_tol=1e-12, seed=seed)
    assert history[-1].fit > 0.9999
    assert len(history) <= 51
    # the Gram identity only resolves the fit to about 1e-8 once the model is exact
    for prev, cur in zip(history, history[1:]):
        if prev.fit < 1 - 1e-6:
            assert cur.fit >= prev.fit - 1e-8
    for f in model.factors:
        assert np.allclose(np.linalg.norm(f, axis=0), 1.0, rtol=0, atol=1e-12)
    assert (model.weights >= 0).all()


def test_rank_one_converges_immediately(rng):
    t, _ = exact_rank_tensor(rng, (4, 5, 6), 1)
    _, history = cp_als(t, rank=1, max_iters=3, fit_tol=1e-12, seed=1)
    assert len(history) <= 4
    assert history[-1].fit > 1 - 1e-6


def test_coo_and_hbcsf_histories_agree(rng):
    t, _ = exact_rank_tensor(rng, (6, 7, 8), 3)
    _, coo = cp_als(t, rank=3, max_iters=10, fit_tol=0.0, fmt='coo', seed=5)
    _, hb = cp_als(t, rank=3, max_iters=10, fit_tol=0.0, fmt='hbcsf', seed=5)
    assert len(coo) == len(hb) == 11
    for a, b in zip(coo, hb):
        assert abs(a.fit - b.fit) <= 1e-7


def test_zero_iterations_reports_initial_fit(worked_example):
    _, history = cp_als(worked_example, rank=2, max_iters=0)
    assert len(history) == 1
    assert history[0].iteration == 0
    assert history[0].fit <= 1


def test_default_rank_is_32():
    assert DEFAULT_RANK == 32
    assert inspect.signature(cp_als).parameters['rank'].default == 32


def test_over_complete_rank_warns(worked_example):
    with pytest.warns(RuntimeWarning):
        cp_als(worked_example, rank=4, max_iters=1)


def test_nan_names_the_iteration():
    t = CooTensor.from_entries([((0, 0, 0), float('nan')), ((1, 1, 1), 1.0)], dims=(2, 2, 2))
    with pytest.raises(NumericalFailureError) as excinfo:
        cp_als(t, rank=1, max_iters=5)
    assert excinfo.value.iteration == 1


def test_bad_arguments(worked_example):
    with pytest.raises(ArgumentError):
        cp_als(worked_example, rank=0)
    with pytest.raises(DataError):
        cp_als(CooTensor.empty((2, 2, 2)), rank=1)


def test_fit_history_frame(rng):
    t, _ = exact_rank_tensor(rng, (4, 5, 6), 2)
    _, history = cp_als(t, rank=2, max_iters=3, fit_tol=0.0)
    frame = fit_history_frame(history)
    assert list(frame.columns) == ['iteration', 'fit', 'delta', 'mttkrp_seconds_mode0',
                                   'mttkrp_seconds_mode1', 'mttkrp_seconds_mode2', 'muls', 'adds']
    assert frame['iteration'].tolist() == [0, 1, 2, 3]
    assert (frame['muls'][1:] > 0).all()


def test_mttkrp_seconds_exclude_the_solve(rng, monkeypatch):
    t, _ = exact_rank_tensor(rng, (4, 5, 6), 2)
    real = cpd.pinv_spsd

    def slow_pinv(g, tol=None):
        time.sleep(0.2)
        return real(g, tol)

    monkeypatch.setattr(cpd, 'pinv_spsd', slow_pinv)
    _, history = cp_als(t, rank=2, max_iters=1, fit_tol=0.0)
    assert len(history[1].mttkrp_seconds) == 3
    assert all(0 <= s < 0.2 for s in history[1].mttkrp_seconds)


def test_model_norm_identity(rng):
    model = KruskalModel(rng.random(2), [rng.random((d, 2)) for d in (3, 3, 3)])
    grams = [gram(f) for f in model.factors]
    assert model_norm_squared(model.weights, grams) == pytest.approx(float((model.full() ** 2).sum()))
