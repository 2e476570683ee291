import numpy as np
import pytest

from mfgcn.errors import NumericError, ValidationError
from mfgcn.lsmc import FeedbackPolicy
from mfgcn.model import LinearStateSpec, ModelSpec, lq_model, zero_costs
from mfgcn.simulate import (InitialLaw, NoiseBundle, TimeGrid, ZeroPolicy, forward_euler, generate_noise,
                            initial_states)


def free_model(**dyn):
    return ModelSpec(LinearStateSpec.constant(**dyn), zero_costs())


def test_grid_points_and_subgrid():
    g = TimeGrid(0.25, 1.0, 3)
    assert g.dt == 0.25
    np.testing.assert_array_equal(g.times, [0.25, 0.5, 0.75, 1.0])
    sub = g.subgrid(1)
    assert (sub.s, sub.N, sub.offset) == (0.5, 2, 1)
    assert g.index_of(0.75) == 2
    with pytest.raises(ValueError):
        g.index_of(0.6)
    with pytest.raises(ValidationError):
        TimeGrid(1.0, 1.0, 3)
    with pytest.raises(ValidationError):
        TimeGrid(0.0, 1.0, 0)


def test_noise_deterministic_and_seed_sensitive():
    g = TimeGrid(0, 1, 8)
    a, b = generate_noise(g, 3, 5, 11), generate_noise(g, 3, 5, 11)
    np.testing.assert_array_equal(a.dW, b.dW)
    np.testing.assert_array_equal(a.dWt, b.dWt)
    c = generate_noise(g, 3, 5, 12)
    assert a.dW[0, 0, 0] != c.dW[0, 0, 0]
    assert a.dWt[0, 0] != c.dWt[0, 0]


def test_noise_is_keyed_by_index():
    g = TimeGrid(0, 1, 8)
    big, small = generate_noise(g, 4, 10, 3), generate_noise(g, 2, 6, 3)
    np.testing.assert_array_equal(big.dW[:2, :6], small.dW)
    np.testing.assert_array_equal(big.dWt[:2], small.dWt)
    # a sub-grid sees the parent's increments on the shared steps
    sub = generate_noise(g.subgrid(3), 4, 10, 3)
    np.testing.assert_array_equal(sub.dW, big.dW[:, :, 3:])
    np.testing.assert_array_equal(sub.dW, big.restrict(3).dW)
    np.testing.assert_array_equal(big.paths(slice(1, 3)).dWt, big.dWt[1:3])


def test_common_seed_separates_streams():
    g = TimeGrid(0, 1, 4)
    a, b = generate_noise(g, 2, 3, 1, common_seed=9), generate_noise(g, 2, 3, 2, common_seed=9)
    np.testing.assert_array_equal(a.dWt, b.dWt)
    assert not np.array_equal(a.dW, b.dW)


def test_increment_variance():
    g = TimeGrid(0, 1, 10_000)
    dw = generate_noise(g, 1, 1, 5).dW.ravel()
    assert abs(dw.var() / g.dt - 1) <= 0.05


def test_tile_repeats_paths():
    g = TimeGrid(0, 1, 4)
    n = generate_noise(g, 2, 6, 1)
    t = n.tile(3, M=4)
    assert (t.K, t.M) == (6, 4)
    np.testing.assert_array_equal(t.dW[4:6], n.dW[:, :4])
    np.testing.assert_array_equal(t.dWt[2:4], n.dWt)
    with pytest.raises(ValueError):
        n.tile(2, M=7)


def test_memory_budget():
    with pytest.raises(MemoryError):
        generate_noise(TimeGrid(0, 1, 1000), 10_000, 10_000, 0)


def test_initial_law_prefix_and_shapes():
    law = InitialLaw.gaussian(1.0, 0.25)
    np.testing.assert_array_equal(law.sample(10, 4), law.sample(20, 4)[:10])
    x = initial_states(law, 3, 10, 4)
    assert x.shape == (3, 10) and np.all(x == x[0])
    assert np.all(initial_states(2.5, 2, 3, 0) == 2.5)
    np.testing.assert_array_equal(InitialLaw.from_samples([1, 2]).sample(5, 0), [1, 2, 1, 2, 1])
    with pytest.raises(ValidationError):
        initial_states(np.zeros(4), 2, 3, 0)
    with pytest.raises(ValidationError):
        InitialLaw.gaussian(0, -1)


def test_zero_coefficients_freeze_state():
    g = TimeGrid(0, 1, 10)
    xi = np.linspace(-1, 1, 7)
    st = forward_euler(free_model(), ZeroPolicy(), g, generate_noise(g, 2, 7, 0), xi)
    assert np.all(st.X == xi[None, :, None])


def test_constant_drift_exact():
    g = TimeGrid(0.2, 1.0, 8)
    st = forward_euler(free_model(b0=0.7), ZeroPolicy(), g, generate_noise(g, 2, 3, 0), 1.0)
    np.testing.assert_allclose(st.X[..., -1], 1.0 + 0.7 * 0.8, rtol=0, atol=1e-14)


def test_brownian_variance():
    g = TimeGrid(0, 1, 50)
    st = forward_euler(free_model(sigma0=1.0), ZeroPolicy(), g, generate_noise(g, 64, 512, 8), 0.0)
    assert abs(np.var(st.X[..., -1]) - 1.0) <= 0.05


def test_euler_matches_hand_recursion():
    m = lq_model(b0=0.1, b1=-0.4, b2=0.8, sigma=0.3, tsigma=0.2)
    g = TimeGrid(0, 1, 6)
    n = generate_noise(g, 3, 4, 2)
    pol = FeedbackPolicy.constant(g.N, 3, y=0.5)
    st = forward_euler(m, pol, g, n, 1.0)
    x = np.ones((3, 4))
    for j in range(g.N):
        a = -0.8 * 0.5
        x = x + (0.1 - 0.4 * x + 0.8 * a) * g.dt + 0.3 * n.dW[..., j] + 0.2 * n.dWt[:, j, None]
        np.testing.assert_allclose(st.X[..., j + 1], x, rtol=1e-14, atol=1e-14)
    assert np.all(st.alpha == -0.4)


def test_doubling_M_keeps_first_trajectories():
    m = lq_model()
    g = TimeGrid(0, 1, 10)
    law = InitialLaw.gaussian(1, 0.25)
    pol = FeedbackPolicy.constant(g.N, 2, y=0.3)
    a = forward_euler(m, pol, g, generate_noise(g, 2, 8, 5), law.sample(8, 5))
    b = forward_euler(m, pol, g, generate_noise(g, 2, 16, 5), law.sample(16, 5))
    np.testing.assert_array_equal(a.X, b.X[:, :8])


def test_future_increments_do_not_move_the_past():
    m = lq_model()
    g = TimeGrid(0, 1, 10)
    n = generate_noise(g, 2, 8, 5)
    dw, dwt = n._dw.copy(), n._dwt.copy()
    dw[6:] += 1.0
    dwt[6:] -= 1.0
    pert = NoiseBundle(g, 2, 8, 5, _arrays=(dw, dwt))
    pol = FeedbackPolicy.constant(g.N, 2, y=0.3)
    a = forward_euler(m, pol, g, n, 1.0)
    b = forward_euler(m, pol, g, pert, 1.0)
    np.testing.assert_array_equal(a.X[..., :7], b.X[..., :7])
    assert not np.array_equal(a.X[..., 7:], b.X[..., 7:])


def test_no_common_noise_gives_deterministic_conditional_mean():
    m = lq_model(tsigma=0.0)
    g = TimeGrid(0, 1, 20)
    M = 512
    st = forward_euler(m, FeedbackPolicy.constant(g.N, 32, y=0.2), g, generate_noise(g, 32, M, 1),
                       InitialLaw.gaussian(1, 0.25))
    means = st.X[..., -1].mean(axis=1)
    assert means.std() <= 3 * st.X[..., -1].std(axis=1).mean() / np.sqrt(M)


def test_euler_weak_error_first_order():
    m = free_model(b1=1.0, sigma0=0.3)
    errs = []
    for N in (10, 20):
        g = TimeGrid(0, 1, N)
        st = forward_euler(m, ZeroPolicy(), g, generate_noise(g, 64, 512, 3), 1.0)
        errs.append(abs(st.X[..., -1].mean() - np.e))
    assert 1.6 <= errs[0] / errs[1] <= 2.4


def test_blow_up_is_numeric_error():
    m = free_model(b1=1e6)
    g = TimeGrid(0, 1, 200)
    with pytest.raises(NumericError, match="kappa=0"):
        forward_euler(m, ZeroPolicy(), g, generate_noise(g, 1, 2, 0), 1.0)


@pytest.mark.parametrize("threads", [2, 8])
def test_thread_count_does_not_change_results(threads):
    from mfgcn.mfg import SolverConfig, solve_mfg

    m = lq_model()
    g = TimeGrid(0, 1, 6)
    cfg = SolverConfig(K=300, M=16, seed=3, max_outer=3)
    ref = solve_mfg(m, g, InitialLaw.gaussian(1, 0.25), cfg.with_(threads=1))
    other = solve_mfg(m, g, InitialLaw.gaussian(1, 0.25), cfg.with_(threads=threads))
    for f in ("X", "Y", "Z", "Zt", "alpha"):
        assert ref.states.buffers[f].tobytes() == other.states.buffers[f].tobytes()
    assert ref.policy.beta_y.tobytes() == other.policy.beta_y.tobytes()
