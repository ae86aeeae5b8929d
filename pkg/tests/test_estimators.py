import numpy as np
import pytest

from zoforge.coords import CoordinateSet
from zoforge.engine import Batch, Dense, ModelSpec, ParamVector, ReLU, build_segments, forward, init_params
from zoforge.estimators import Objective, cge, rge, sparse_cge
from zoforge.oracle import backprop_grad


def counting_objective(fn):
    return Objective(fn)


# --------------------------------------------------------------------------
# Objective counter


def test_objective_counts_every_evaluation():
    f = Objective(lambda th: float(th.sum()))
    assert f.queries == 0
    f(np.zeros(3))
    f(np.ones(3))
    assert f.queries == 2


# --------------------------------------------------------------------------
# RGE


def test_rge_linear_exact_for_single_direction():
    f = Objective(lambda th: float(3.0 * th[0]))
    est = rge(f, np.array([0.5]), q=1, mu=0.1, seed=42)
    u = np.random.default_rng(42).standard_normal(1)[0]
    assert est.grad[0] == pytest.approx(3.0 * u * u, rel=1e-12)
    assert est.queries == 2


def test_rge_mu_independent_on_linear():
    a = np.array([1.5, -2.0, 0.25])
    f = lambda th: float(a @ th)
    theta = np.zeros(3)
    g1 = rge(Objective(f), theta, q=8, mu=0.1, seed=7).grad
    g2 = rge(Objective(f), theta, q=8, mu=1e-4, seed=7).grad
    np.testing.assert_allclose(g1, g2, rtol=1e-9, atol=1e-12)


def test_rge_monte_carlo_convergence_linear():
    # frozen-seed Monte Carlo check: q=10000 on a 10-dim linear objective.
    # Per-coordinate sample std of (1/q) sum (u.a) u_i is
    # sqrt((|a|^2 + a_i^2) / q); a 4-sigma band is the derived tolerance.
    rng = np.random.default_rng(123)
    a = rng.standard_normal(10)
    q = 10000
    f = Objective(lambda th: float(a @ th))
    est = rge(f, np.zeros(10), q=q, mu=1e-3, seed=2024)
    assert est.queries == q + 1
    sigma = np.sqrt((a @ a + a**2) / q)
    assert np.all(np.abs(est.grad - a) <= 4.0 * sigma)
    assert np.linalg.norm(est.grad - a) <= 0.05 * np.linalg.norm(a)


def test_rge_deterministic_per_seed():
    f = lambda th: float(np.sin(th).sum())
    theta = np.linspace(-1, 1, 6)
    g1 = rge(Objective(f), theta, q=16, mu=1e-3, seed=5).grad
    g2 = rge(Objective(f), theta, q=16, mu=1e-3, seed=5).grad
    g3 = rge(Objective(f), theta, q=16, mu=1e-3, seed=6).grad
    assert g1.tobytes() == g2.tobytes()
    assert g1.tobytes() != g3.tobytes()


def test_rge_populates_dv_timing():
    f = Objective(lambda th: float(th @ th))
    est = rge(f, np.zeros(64), q=32, mu=1e-3, seed=0)
    assert est.timings.dv > 0
    assert est.timings.mi > 0


# --------------------------------------------------------------------------
# CGE


def test_cge_quadratic_forward_difference_bias():
    f = Objective(lambda th: float(th[0] ** 2 + 2.0 * th[1] ** 2))
    est = cge(f, np.array([1.0, 1.0]), mu=0.1)
    np.testing.assert_allclose(est.grad, [2.1, 4.2], rtol=1e-12)
    assert est.queries == 3
    assert est.timings.dv == 0.0


def test_cge_linear_exact_any_mu():
    a = np.array([3.0, -1.0, 0.5, 2.0])
    f = lambda th: float(a @ th)
    for mu in (1.0, 1e-2, 1e-5):
        est = cge(Objective(f), np.zeros(4), mu=mu)
        np.testing.assert_allclose(est.grad, a, rtol=1e-9, atol=1e-9)


def test_cge_bias_law_on_quadratics():
    # forward difference on 0.5 th' A th: ghat - g == (mu/2) diag(A) exactly
    rng = np.random.default_rng(77)
    for _ in range(20):
        d = int(rng.integers(2, 8))
        diag = rng.uniform(0.5, 4.0, d)
        theta = rng.standard_normal(d)
        mu = float(rng.uniform(1e-4, 0.3))
        f = Objective(lambda th: float(0.5 * th @ (diag * th)))
        est = cge(f, theta, mu)
        bias = est.grad - diag * theta
        np.testing.assert_allclose(bias, 0.5 * mu * diag, rtol=0, atol=1e-9)


def test_cge_error_scales_with_mu_on_mlp():
    spec = ModelSpec([Dense(4, 8), ReLU(), Dense(8, 2)], (4,))
    rng = np.random.default_rng(31)
    pv = init_params(spec, 9, dtype=np.float64)
    batch = Batch(rng.standard_normal((8, 4)), rng.integers(0, 2, 8))
    segments = pv.segments
    f = lambda th: forward(spec, ParamVector(np.asarray(th), segments), batch)[0]
    g = backprop_grad(spec, pv, batch)

    est = cge(Objective(f), pv.data, 1e-4)
    err = np.abs(est.grad - g)
    assert np.all(err <= 1e-2 * np.maximum(1.0, np.abs(g)))

    est_half = cge(Objective(f), pv.data, 5e-5)
    ratio = np.max(np.abs(est_half.grad - g)) / np.max(err)
    assert 0.5 * 0.8 <= ratio <= 0.5 * 1.2  # halving mu halves the error within 20%


# --------------------------------------------------------------------------
# sparse CGE


def test_sparse_cge_full_set_equals_cge():
    f = lambda th: float(np.cos(th).sum())
    theta = np.linspace(0.1, 1.0, 5)
    full = cge(Objective(f), theta, 1e-3)
    sparse = sparse_cge(Objective(f), theta, 1e-3, CoordinateSet.full(5))
    assert full.grad.tobytes() == sparse.grad.tobytes()
    assert full.queries == sparse.queries == 6


def test_sparse_cge_restriction():
    f = lambda th: float(th[0] ** 2 + 2.0 * th[1] ** 2)
    est = sparse_cge(Objective(f), np.array([1.0, 1.0]), 0.1, CoordinateSet(np.array([1]), 2))
    np.testing.assert_allclose(est.grad, [0.0, 4.2], rtol=1e-12)
    assert est.queries == 2


def test_sparse_cge_empty_set():
    f = Objective(lambda th: float(th.sum()))
    est = sparse_cge(f, np.ones(4), 0.1, CoordinateSet.empty(4))
    assert est.queries == 1
    assert np.all(est.grad == 0.0)


def test_sparse_cge_agrees_with_cge_on_active_coords():
    rng = np.random.default_rng(3)
    a = rng.standard_normal(9)
    f = lambda th: float(np.tanh(th) @ a)
    theta = rng.standard_normal(9)
    idx = np.array([0, 3, 4, 8])
    full = cge(Objective(f), theta, 1e-3)
    sparse = sparse_cge(Objective(f), theta, 1e-3, CoordinateSet(idx, 9))
    assert np.all(sparse.grad[idx] == full.grad[idx])  # exact, same arithmetic
    off = np.setdiff1d(np.arange(9), idx)
    assert np.all(sparse.grad[off] == 0.0)


def test_sparse_cge_rejects_out_of_range():
    from zoforge.errors import CoordinateError

    with pytest.raises(CoordinateError):
        CoordinateSet(np.array([0, 9]), 9)
    with pytest.raises(CoordinateError):
        CoordinateSet(np.array([2, 1]), 9)


def test_query_accounting_matches_counter():
    d = 6
    theta = np.zeros(d)
    f1 = Objective(lambda th: float(th @ th))
    est = rge(f1, theta, q=11, mu=1e-3, seed=0)
    assert est.queries == f1.queries == 12
    f2 = Objective(lambda th: float(th @ th))
    est = cge(f2, theta, mu=1e-3)
    assert est.queries == f2.queries == d + 1
    f3 = Objective(lambda th: float(th @ th))
    est = sparse_cge(f3, theta, 1e-3, CoordinateSet(np.array([1, 4]), d))
    assert est.queries == f3.queries == 3
