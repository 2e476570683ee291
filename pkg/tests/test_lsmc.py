import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfgcn.lsmc import (FeedbackPolicy, backward_pass, bsde_residual, evaluate_policy, rebase_coefficients)
from mfgcn.measure import MeasureFlow
from mfgcn.model import LinearStateSpec, ModelSpec, expression_costs
from mfgcn.oracle import solve_riccati
from mfgcn.simulate import TimeGrid, ZeroPolicy, forward_euler, generate_noise

coef = st.floats(-3, 3, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(st.lists(coef, min_size=1, max_size=5), coef, st.floats(0.2, 3), coef, st.floats(0.2, 3), coef)
def test_rebase_preserves_the_polynomial(beta, c, s, c2, s2, x):
    beta = np.array(beta)
    new = rebase_coefficients(beta, c, s, c2, s2)
    old_val = np.polynomial.polynomial.polyval((x - c) / s, beta)
    new_val = np.polynomial.polynomial.polyval((x - c2) / s2, new)
    assert new_val == pytest.approx(old_val, rel=1e-8, abs=1e-8)


def frozen_model(g):
    return ModelSpec(LinearStateSpec(), expression_costs("a**2/2", "0", g))


def run_backward(model, N=5, K=3, M=64, xi=None, seed=0, degree=2):
    grid = TimeGrid(0, 1, N)
    noise = generate_noise(grid, K, M, seed)
    xi = np.linspace(-1, 2, M) if xi is None else xi
    states = forward_euler(model, ZeroPolicy(), grid, noise, xi)
    pol = backward_pass(model, MeasureFlow(states.X), states, grid, noise, degree)
    return pol, states, grid, noise


def test_constant_terminal_gradient():
    pol, st, _, _ = run_backward(frozen_model("x"), N=1)
    np.testing.assert_allclose(st.Y, 1.0, atol=1e-12)
    np.testing.assert_allclose(st.Z, 0.0, atol=1e-12)
    np.testing.assert_allclose(st.Zt, 0.0, atol=1e-12)


def test_frozen_state_quadratic_terminal_cost():
    pol, st, _, _ = run_backward(frozen_model("x**2"))
    np.testing.assert_allclose(st.Y, 2 * st.X, atol=1e-10)
    np.testing.assert_allclose(st.Z, 0.0, atol=1e-10)
    # the fitted table reproduces Y = 2x, including off-sample points
    assert evaluate_policy(pol, 1, 2, 1.5)[0] == pytest.approx(3.0, abs=1e-9)


def test_degree_zero_table_is_constant():
    pol = FeedbackPolicy.constant(4, 2, y=2.5, z=-1.0)
    assert pol.evaluate(1, 3, 17.0) == (2.5, -1.0, 0.0)
    np.testing.assert_array_equal(pol.evaluate(0, 0, np.array([-5.0, 5.0]))[0], [2.5, 2.5])
    with pytest.raises(IndexError):
        pol.evaluate(2, 0, 0.0)


def test_clamp_to_fitted_range():
    pol, st, _, _ = run_backward(frozen_model("x**3"), degree=3)
    c, s = pol.center[2, 0], pol.scale[2, 0]
    edge = evaluate_policy(pol, 0, 2, c + 4 * s)[0]
    assert not pol.was_clamped(0, 2, c + 3.9 * s)
    assert pol.was_clamped(0, 2, c + 10 * s)
    assert evaluate_policy(pol, 0, 2, c + 10 * s)[0] == edge
    assert pol.clamped > 0


def test_degenerate_cloud_falls_back_to_mean():
    pol, st, _, _ = run_backward(frozen_model("x**2"), xi=np.full(64, 0.7))
    assert pol.degenerate[0].all()
    np.testing.assert_allclose(st.Y[..., 0], 1.4, atol=1e-12)
    assert np.all(pol.beta_y[0, :, 1:] == 0)


def test_blend_and_distance(small_eq):
    pol = small_eq.policy
    other = FeedbackPolicy.constant(pol.N, pol.K, y=1.0, degree=pol.degree)
    x = np.linspace(0, 2, 5)
    assert pol.distance(pol) == pytest.approx(0.0, abs=1e-12)
    full = other.blend(pol, 1.0)
    np.testing.assert_allclose(full.evaluate(3, 10, x)[0], pol.evaluate(3, 10, x)[0], atol=1e-12)
    half = other.blend(pol, 0.5)
    np.testing.assert_allclose(half.evaluate(3, 10, x)[0], 0.5 + 0.5 * pol.evaluate(3, 10, x)[0], atol=1e-9)
    assert other.distance(pol) > 0


def test_table_views(small_eq):
    pol = small_eq.policy
    assert pol.tile(2).K == 2 * pol.K
    np.testing.assert_array_equal(pol.take([1, 1]).beta_y[:, 1], pol.beta_y[:, 1])
    assert pol.subgrid(5).N == pol.N - 5
    rows = list(pol.rows())
    assert len(rows) == (pol.N + 1) * pol.K * (pol.degree + 1)
    assert len(rows[0]) == 9


def test_adjoint_is_a_function_of_the_current_state(small_eq, lq_model):
    # on the LQ instance the adjoint at every step is exactly quadratic in X_j
    # within a path, so the fitted table reproduces it to rounding
    st = small_eq.states.copy()
    pol = backward_pass(lq_model, MeasureFlow(st.X), st, small_eq.grid, small_eq.noise)
    for j in (0, 5, 15):
        y = pol.evaluate_step(j, st.buffers["X"][j])[0]
        assert np.max(np.abs(y - st.buffers["Y"][j])) <= 1e-9


def test_terminal_slice_reproduces_terminal_gradient(small_eq, lq_model):
    st, N = small_eq.states, small_eq.grid.N
    y = lq_model.costs.dxg(st.buffers["X"][N], small_eq.flow.batch(N))
    np.testing.assert_allclose(st.buffers["Y"][N], y, atol=1e-12)
    assert np.max(small_eq.policy.residual[N]) <= 1e-9


def test_matches_riccati_oracle(small_eq, lq):
    sol = solve_riccati(lq, small_eq.grid)
    x0 = small_eq.states.buffers["X"][0]
    oracle = sol.P[0] * x0 + sol.R[0] * x0.mean(axis=1, keepdims=True)
    err = np.sqrt(np.mean((small_eq.states.buffers["Y"][0] - oracle) ** 2))
    assert err <= 0.05 * np.sqrt(np.mean(oracle ** 2))


def test_martingale_defect_within_three_standard_errors(small_eq, lq_model):
    mean, se = bsde_residual(lq_model, small_eq.flow, small_eq.states, small_eq.grid, small_eq.noise)
    assert np.mean(np.abs(mean)) <= 3 * np.mean(se)


def test_oracle_adjoint_has_small_defect(lq, lq_model):
    grid = TimeGrid(0, 1, 50)
    sol = solve_riccati(lq, grid)
    noise = generate_noise(grid, 8, 256, 2)
    from mfgcn.lsmc import FeedbackPolicy as FP
    pol = FP.zeros(grid.N, 8, 1)
    pol.beta_y[..., 1] = sol.P[:, None]
    # intercept R mbar needs the per-path mean, so fill it after a first pass
    st = forward_euler(lq_model, pol, grid, noise, 1.0)
    for _ in range(3):
        pol.beta_y[..., 0] = sol.R[:, None] * st.X.mean(axis=1).T
        st = forward_euler(lq_model, pol, grid, noise, 1.0)
    X = st.buffers["X"]
    st.buffers["Y"][:] = sol.P[:, None, None] * X + sol.R[:, None, None] * X.mean(axis=2, keepdims=True)
    st.buffers["Zt"][:] = sol.S[:, None, None] * lq.tsigma
    st.buffers["Z"][:] = sol.P[:, None, None] * lq.sigma
    mean, se = bsde_residual(lq_model, MeasureFlow(st.X), st, grid, noise)
    # the oracle solves the continuous equation; its discrete defect is O(dt) per step
    assert np.mean(np.abs(mean)) <= 5 * grid.dt * grid.dt + 3 * np.mean(se)
