import numpy as np
import pytest

from mfgcn.decoupling import (build_u_table, cloud, decoupling_function, flow_map, lipschitz_in_m,
                              monotonicity_margin, verify_decoupling, verify_semigroup)
from mfgcn.measure import EmpiricalMeasure1D
from mfgcn.mfg import SolverConfig, solve_mfg
from mfgcn.model import LinearStateSpec, ModelSpec, expression_costs
from mfgcn.oracle import mean_path, solve_riccati
from mfgcn.simulate import TimeGrid

from .conftest import canonical_cloud

GRID = TimeGrid(0, 1, 10)
CFG = SolverConfig(K=16, M=256, seed=7)


@pytest.fixture(scope="module")
def eq(lq_model):
    return solve_mfg(lq_model, GRID, canonical_cloud(CFG.M, CFG.seed), CFG)


@pytest.fixture(scope="module")
def ug(lq_model, eq):
    return decoupling_function(lq_model, GRID, canonical_cloud(CFG.M, CFG.seed), CFG, equilibrium=eq)


def frozen(g="x"):
    return ModelSpec(LinearStateSpec(), expression_costs("a**2/2", "0", g))


def test_cloud_representation():
    m = EmpiricalMeasure1D.from_samples(np.arange(8.0))
    np.testing.assert_array_equal(cloud(m, 8), np.arange(8.0))
    np.testing.assert_array_equal(cloud(m, 4), [1, 3, 5, 7])


def test_flow_map_identity_at_start(lq_model, eq):
    m = canonical_cloud(CFG.M, CFG.seed)
    fm = flow_map(lq_model, GRID, 0.0, m, CFG, result=eq)
    for k in (0, 5):
        np.testing.assert_array_equal(fm.x_marginal(k).values, np.sort(m))


def test_frozen_dynamics_keep_the_measure():
    m = canonical_cloud(64, 1)
    fm = flow_map(frozen(), TimeGrid(0, 1, 5), 0.6, m, SolverConfig(K=4, M=64))
    for k in range(4):
        np.testing.assert_array_equal(fm.x_marginal(k).values, np.sort(m))


def test_flow_map_mean_matches_oracle(lq, lq_model, eq):
    fm = flow_map(lq_model, GRID, 0.5, None, CFG, result=eq)
    sol = solve_riccati(lq, GRID)
    mb = mean_path(lq, sol, eq.states.buffers["X"][0].mean(axis=1), eq.noise.dWt)[:, 5]
    se = fm.X.std(axis=1) / np.sqrt(CFG.M)
    bias = 0.05 * np.abs(mb)  # Euler and regression bias of the coarse grid
    assert np.all(np.abs(fm.X.mean(axis=1) - mb) <= 3 * se + bias)


def test_trivial_decoupling_function_is_one():
    ug = decoupling_function(frozen(), TimeGrid(0, 1, 5), canonical_cloud(64, 1), SolverConfig(K=4, M=64))
    np.testing.assert_allclose(ug.U, 1.0, atol=1e-12)
    assert ug.x.size == 21


def test_decoupling_function_matches_oracle(lq, ug):
    sol = solve_riccati(lq, GRID)
    m = canonical_cloud(CFG.M, CFG.seed)
    oracle = sol.P[0] * ug.x + sol.R[0] * m.mean()
    assert np.sqrt(np.mean((ug.U - oracle) ** 2)) <= 0.05 * np.sqrt(np.mean(oracle ** 2))
    assert not ug.flagged and ug.converged


def test_decoupling_function_monotone(ug):
    margin, scale = monotonicity_margin(ug)
    assert scale > 0 and margin >= -0.05


def test_kappa_spread_shrinks_with_particles(lq_model, eq):
    m = canonical_cloud(CFG.M, CFG.seed)
    a = decoupling_function(lq_model, GRID, m, CFG, equilibrium=eq, particles=16)
    b = decoupling_function(lq_model, GRID, m, CFG, equilibrium=eq, particles=64)
    assert 1.5 <= a.kappa_spread.mean() / b.kappa_spread.mean() <= 2.5


def test_lipschitz_in_m_stable(lq_model, ug):
    slopes, _ = lipschitz_in_m(lq_model, GRID, canonical_cloud(CFG.M, CFG.seed), (0.1, 0.2), CFG, base=ug)
    assert max(slopes.values()) <= 1.25 * min(slopes.values())


def test_semigroup_identity_cases(lq_model, eq):
    m = canonical_cloud(CFG.M, CFG.seed)
    assert verify_semigroup(lq_model, GRID, 0.0, 1.0, m, CFG, direct=eq).residual == 0.0  # t = s
    r = verify_semigroup(lq_model, GRID, 0.5, 0.5, m, CFG, direct=eq)
    assert r.residual == 0.0 and r.passed


def test_semigroup_at_start_reproduces_direct_run(lq_model, eq):
    # restarting at s itself on the same noise is the direct run
    m = canonical_cloud(CFG.M, CFG.seed)
    sub = solve_mfg(lq_model, GRID, np.array(eq.states.buffers["X"][0]), CFG, noise=eq.noise.restrict(0))
    np.testing.assert_array_equal(sub.states.buffers["X"], eq.states.buffers["X"])
    rep = verify_semigroup(lq_model, GRID, 0.5, 1.0, m, CFG, direct=eq)
    assert rep.passed and rep.baseline > 0


def test_decoupling_terminal_step_exact(lq_model, eq):
    tab = build_u_table(lq_model, eq, CFG, steps=[GRID.N])
    rep = verify_decoupling(eq.policy, eq.states, eq.flow, tab)
    assert rep.per_step[GRID.N] == 0.0


def test_decoupling_interior_steps(lq_model, eq):
    tab = build_u_table(lq_model, eq, CFG, steps=[2, 5], paths=[0, 1])
    rep = verify_decoupling(eq.policy, eq.states, eq.flow, tab)
    assert rep.max_error <= 0.10
