import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfgcn.errors import NumericError, ValidationError
from mfgcn.measure import EmpiricalMeasure1D
from mfgcn.model import (Coefficient, CostSpec, LinearStateSpec, ModelSpec, dx_hbar, e1_costs,
                         expression_costs, gradient_check, hamiltonian, lq_costs, lq_model,
                         minimize_hamiltonian, zero_costs, zero_model)

M0 = EmpiricalMeasure1D.from_samples([0.0, 2.0])
val = st.floats(-5, 5, allow_nan=False)


def model_with(costs, **dyn):
    return ModelSpec(LinearStateSpec.constant(**dyn), costs)


def test_hamiltonian_examples():
    assert hamiltonian(zero_model(), 0.3, 1.0, 2.0, 3.0, 4.0, 5.0, M0) == pytest.approx(0.5)  # only a^2/2 survives
    m = model_with(zero_costs(), b2=1.0)
    assert hamiltonian(m, 0.0, 1.0, 0.0, 2.0, 0.0, 0.0, M0) == pytest.approx(2.5)
    m = model_with(zero_costs(), b1=1.0, b2=1.0)
    assert hamiltonian(m, 0.0, 0.0, 1.0, 3.0, 0.0, 0.0, M0) == pytest.approx(3.0)


def test_minimiser_examples():
    assert minimize_hamiltonian(model_with(zero_costs(), b2=1.0), 0, 1.0, 0.0, 0.0, 0.0) == 0.0
    assert minimize_hamiltonian(model_with(zero_costs(), b2=1.0), 0, 1.0, 2.0, 0.0, 0.0) == pytest.approx(-2.0)
    m = model_with(zero_costs(), b2=0.5, sigma2=1.0)
    assert minimize_hamiltonian(m, 0, 1.0, 2.0, 1.0, 0.0) == pytest.approx(-2.0)


def test_dx_hbar_examples():
    assert dx_hbar(zero_model(), 0.1, 1.0, 2.0, 3.0, 4.0, M0) == 0.0
    m = lq_model(q=0.0, qbar=1.0, s=1.0, qT=1.0, qbarT=0.0, sT=0.0, b1=0.0)
    assert dx_hbar(m, 0.0, 2.0, 0.0, 0.0, 0.0, EmpiricalMeasure1D.dirac(1.0)) == pytest.approx(1.0)
    m = model_with(zero_costs(), b1=0.5)
    assert dx_hbar(m, 0.0, 7.0, 2.0, 0.0, 0.0, M0) == pytest.approx(1.0)


def quartic_costs():
    # daf0 = a + a^3 is not affine: exercises the Newton path
    return expression_costs("a**2/2 + a**4/4 + x**2/2", "(x - mbar)**2/2", "x**2/2", c_f=0.5)


@settings(max_examples=100, deadline=None)
@given(val, val, val, val, val)
def test_minimiser_is_local_minimum(t, x, y, z, zt):
    for costs in (lq_costs(1, 0.5, 0.8, 1, 0.5, 0.8), quartic_costs()):
        m = model_with(costs, b2=1.0, sigma2=0.3, tsigma2=-0.2)
        a = minimize_hamiltonian(m, abs(t), x, y, z, zt)
        h0 = hamiltonian(m, abs(t), a, x, y, z, zt, M0)
        for h in (1e-3, 1e-2):
            assert h0 <= hamiltonian(m, abs(t), a + h, x, y, z, zt, M0) + 1e-12
            assert h0 <= hamiltonian(m, abs(t), a - h, x, y, z, zt, M0) + 1e-12


def test_minimiser_ignores_the_measure():
    m = model_with(quartic_costs(), b2=1.0)
    x = np.linspace(-2, 2, 9)
    a1 = minimize_hamiltonian(m, 0.2, x, 0.7, 0.0, 0.0)
    # dx_hbar with two different measures uses the same minimiser
    d1 = dx_hbar(m, 0.2, x, 0.7, 0.0, 0.0, EmpiricalMeasure1D.dirac(0.0))
    d2 = dx_hbar(m, 0.2, x, 0.7, 0.0, 0.0, EmpiricalMeasure1D.dirac(5.0))
    np.testing.assert_array_equal(d1 - d2, 5.0)  # only the dxf1 = x - mbar term moves
    np.testing.assert_array_equal(a1, minimize_hamiltonian(m, 0.2, x, 0.7, 0.0, 0.0))


def test_newton_matches_brute_force_grid():
    m = model_with(quartic_costs(), b2=1.0)
    grid = np.linspace(-4, 4, 400001)
    for y in (-3.0, -0.5, 0.0, 1.0, 2.5):
        a = minimize_hamiltonian(m, 0.0, 0.3, y, 0.0, 0.0)
        h = hamiltonian(m, 0.0, grid, 0.3, y, 0.0, 0.0, M0)
        assert a == pytest.approx(grid[np.argmin(h)], abs=2e-5)


def test_newton_failure_is_numeric_error():
    bad = CostSpec(lambda t, x, a: 0 * a, lambda t, x, m: 0 * x, lambda x, m: 0 * x, lambda t, x, a: 0 * a,
                   lambda t, x, a: np.sin(a) + 0 * x + 10.0, lambda t, x, m: 0 * x, lambda x, m: 0 * x, c_f=0.5)
    with pytest.raises(NumericError):
        minimize_hamiltonian(model_with(bad, b2=1.0), 0.0, 0.0, 0.0, 0.0, 0.0)


def test_minimiser_lipschitz_within_declared_constant(rng):
    m = lq_model()
    worst = 0.0
    for _ in range(500):
        x, x2, y, y2 = rng.normal(0, 2, 4)
        da = abs(minimize_hamiltonian(m, 0, x, y, 0, 0) - minimize_hamiltonian(m, 0, x2, y2, 0, 0))
        worst = max(worst, da / (abs(x - x2) + abs(y - y2)))
    assert worst <= m.K


@pytest.mark.parametrize("costs", [lq_costs(1, 0.5, 0.8, 1, 0.5, 0.8), e1_costs(), e1_costs(form="integral"),
                                   zero_costs(), quartic_costs()])
def test_declared_gradients_match_finite_differences(costs):
    worst = gradient_check(ModelSpec(LinearStateSpec(), costs))
    assert max(worst.values()) <= 1e-6


def test_dx_hbar_matches_finite_difference_of_minimised_hamiltonian(rng):
    m = model_with(quartic_costs(), b1=0.3, b2=1.0, sigma1=0.2, sigma2=0.1, tsigma1=-0.4)
    meas = EmpiricalMeasure1D.from_samples(rng.normal(size=20))
    for _ in range(20):
        t, x, y, z, zt = rng.uniform(0, 1), *rng.normal(size=4)
        a = minimize_hamiltonian(m, t, x, y, z, zt)
        h = 1e-5
        fd = (hamiltonian(m, t, a, x + h, y, z, zt, meas) - hamiltonian(m, t, a, x - h, y, z, zt, meas)) / (2 * h)
        assert dx_hbar(m, t, x, y, z, zt, meas) == pytest.approx(fd, rel=1e-6, abs=1e-8)


def test_lq_constraint_message():
    with pytest.raises(ValidationError, match=r"q\+qbar-qbar\*s >= 0"):
        lq_costs(0.1, 1.0, 2.0, 1.0, 0.5, 0.8)
    with pytest.raises(ValidationError, match="qT"):
        lq_costs(1.0, 0.5, 0.8, 0.1, 1.0, 2.0)


def test_expression_costs_rejections():
    with pytest.raises(ValidationError) as e:
        expression_costs("a**2/2", "x*a")
    assert e.value.keys == ["costs.f1"]
    with pytest.raises(ValidationError):
        expression_costs("a**2 +")
    with pytest.raises(ValidationError, match="c_f"):
        expression_costs("a**4 + a**2")


def test_expression_costs_closed_form_slope():
    c = expression_costs("3*a**2/2 + x**2", "(x-mbar)**2", "m2")
    assert c.alpha_slope == pytest.approx(3.0)
    assert c.c_f == pytest.approx(1.5)
    assert c.measure_dependent


def test_coefficient_tables():
    c = Coefficient(breaks=[0.0, 0.5], values=[1.0, 2.0])
    assert (c(0.0), c(0.49), c(0.5), c(1.0)) == (1.0, 1.0, 2.0, 2.0)
    assert c.sup(1.0) == 2.0
    assert Coefficient.from_json(c.to_json())(0.7) == 2.0
    assert c.scaled(3)(0.7) == 6.0
    with pytest.raises(ValidationError):
        Coefficient(breaks=[0.5, 0.0], values=[1, 2])


def test_model_invariants():
    with pytest.raises(ValidationError):
        ModelSpec(LinearStateSpec(), zero_costs(), T=0.0)
    with pytest.raises(ValidationError):
        ModelSpec(LinearStateSpec(), zero_costs(), K=-1.0)
    with pytest.raises(ValidationError):
        expression_costs("a**2", c_f=0.0)
