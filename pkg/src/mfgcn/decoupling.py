"""Flow maps, the decoupling function U(s, x, m) and checks of their properties.

Every flow map re-solves the equilibrium from its own starting point ``(s, m)``.
Noise is keyed by the global step index, so a solve started at a later grid
point reuses exactly the increments of the parent run on the shared steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .measure import EmpiricalMeasure1D, MeasureBatch, w2_sorted_rows
from .mfg import MFGResult, SolverConfig, solve_individual, solve_mfg
from .model import ModelSpec
from .simulate import TimeGrid, derive_seed, generate_noise

U_GRID_POINTS = 21
U_PARTICLES = 128
SPREAD_FACTOR = 10.0


def cloud(m: EmpiricalMeasure1D | np.ndarray, M: int) -> np.ndarray:
    """M points representing ``m``: the sample itself when sizes agree, else mid-quantiles."""
    v = m.values if isinstance(m, EmpiricalMeasure1D) else np.sort(np.ravel(m))
    if v.size == M:
        return np.array(v)
    return v[((np.arange(M) + 0.5) * v.size / M).astype(int)]


@dataclass
class FlowMapResult:
    s: float
    t: float
    X: np.ndarray  # (K, M) positions at t, per common path
    Y: np.ndarray
    converged: bool
    result: MFGResult | None = field(default=None, repr=False)

    def x_marginal(self, kappa: int) -> EmpiricalMeasure1D:
        return EmpiricalMeasure1D.from_samples(self.X[kappa])

    def y_marginal(self, kappa: int) -> EmpiricalMeasure1D:
        return EmpiricalMeasure1D.from_samples(self.Y[kappa])


def flow_map(model: ModelSpec, grid: TimeGrid, t: float, m, config: SolverConfig = SolverConfig(),
             result: MFGResult | None = None) -> FlowMapResult:
    """Conditional laws at ``t`` of the equilibrium started from ``m`` at ``grid.s``."""
    j = grid.index_of(t)
    res = result or solve_mfg(model, grid, cloud(m, config.M), config)
    st = res.states
    return FlowMapResult(grid.s, t, np.array(st.X[:, :, j]), np.array(st.Y[:, :, j]),
                         res.report.converged, res)


@dataclass
class UGridResult:
    s: float
    x: np.ndarray
    U: np.ndarray
    kappa_spread: np.ndarray
    se: np.ndarray  # standard error of each U value over common paths
    mc_tol: float
    flagged: bool
    converged: bool
    per_path: np.ndarray = field(repr=False, default=None)  # (grid point, kappa)

    def rows(self):
        for x, u, sp in zip(self.x, self.U, self.kappa_spread):
            yield self.s, x, u, sp


def default_x_grid(m, n: int = U_GRID_POINTS) -> np.ndarray:
    v = m.values if isinstance(m, EmpiricalMeasure1D) else np.ravel(m)
    mu, sd = float(np.mean(v)), float(np.std(v))
    if sd == 0:
        sd = 1.0
    return np.linspace(mu - 3 * sd, mu + 3 * sd, n)


def decoupling_function(model: ModelSpec, grid: TimeGrid, m, config: SolverConfig = SolverConfig(),
                        x_grid=None, particles: int | None = None,
                        equilibrium: MFGResult | None = None) -> UGridResult:
    """U(s, x, m) on an x-grid: the time-s adjoint value of a player started at x
    who best-responds to the equilibrium flow from ``(s, m)``.

    All grid points are solved in one vectorised individual problem: the paths
    are tiled once per grid point (sharing the common noise and the frozen
    flow) and each tile is an independent block for the regression stage.
    """
    eq = equilibrium or solve_mfg(model, grid, cloud(m, config.M), config)
    x = default_x_grid(m) if x_grid is None else np.asarray(x_grid, dtype=float)
    G, K = x.size, config.K
    Mi = min(config.M, particles or U_PARTICLES)
    cfg = config.with_(K=K * G, M=Mi, groups=G)
    noise = eq.noise.tile(G, Mi)
    xi = np.broadcast_to(np.repeat(x, K)[:, None], (K * G, Mi))
    ind = solve_individual(model, eq.flow.tile(G), grid, xi, cfg, noise, eq.policy.tile(G))
    y0 = ind.states.buffers["Y"][0].reshape(G, K, Mi).mean(axis=2)
    spread = y0.std(axis=1)
    yN = ind.states.buffers["Y"][grid.N]
    mc_tol = float(np.mean(np.std(yN, axis=1)) / np.sqrt(Mi))
    return UGridResult(grid.s, x, y0.mean(axis=1), spread, spread / np.sqrt(K), mc_tol,
                       bool(np.max(spread) > SPREAD_FACTOR * max(mc_tol, 1e-12)),
                       eq.report.converged and ind.report.converged, y0)


# --- semigroup ---------------------------------------------------------------

@dataclass
class SemigroupReport:
    s: float
    t: float
    u: float
    residual: float
    baseline: float
    passed: bool
    per_path: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {"s": self.s, "t": self.t, "u": self.u, "residual": self.residual,
                "baseline": self.baseline, "pass": self.passed}


def _marginal_gap(xa, ya, xb, yb) -> np.ndarray:
    return w2_sorted_rows(xa, xb) + w2_sorted_rows(ya, yb)


def verify_semigroup(model: ModelSpec, grid: TimeGrid, t: float, u: float, m,
                     config: SolverConfig = SolverConfig(), direct: MFGResult | None = None) -> SemigroupReport:
    """Compare the flow map from s to u with its composition through t.

    The second leg restarts the equilibrium at t from the conditional clouds
    of the direct run, on the same common and individual increments. The
    baseline is the same statistic between two direct runs that differ only
    in their individual noise.
    """
    jt, ju = grid.index_of(t), grid.index_of(u)
    if not 0 <= jt <= ju:
        raise ValueError("need s <= t <= u")
    xi = cloud(m, config.M)
    a = direct or solve_mfg(model, grid, xi, config)
    XA, YA = a.states.buffers["X"][ju], a.states.buffers["Y"][ju]
    if jt == ju:
        per = np.zeros(config.K)
    else:
        sub = grid.subgrid(jt)
        b = solve_mfg(model, sub, np.array(a.states.buffers["X"][jt]), config, noise=a.noise.restrict(jt))
        per = _marginal_gap(XA, YA, b.states.buffers["X"][ju - jt], b.states.buffers["Y"][ju - jt])
    common = config.common_seed if config.common_seed is not None else config.seed
    alt = solve_mfg(model, grid, xi, config.with_(seed=derive_seed(config.seed, 1), common_seed=common))
    base = _marginal_gap(XA, YA, alt.states.buffers["X"][ju], alt.states.buffers["Y"][ju])
    residual, baseline = float(np.mean(per)), float(np.mean(base))
    return SemigroupReport(grid.s, t, u, residual, baseline, residual <= 3 * baseline, per)


# --- decoupling relation along the equilibrium --------------------------------

def build_u_table(model: ModelSpec, eq: MFGResult, config: SolverConfig, steps=None, paths=None,
                  fresh_paths: int = 8) -> dict:
    """U(t_j, X_j, m_j) at the equilibrium particles of selected paths and steps.

    For each selected path, the equilibrium is re-solved from ``(t_j, m_j)``
    on ``fresh_paths`` new common-noise paths and the time-t_j adjoint values
    are averaged over them. The terminal step uses the terminal gradient.
    Returns ``{j: (path indices, U array of shape (len(paths), M))}``.
    """
    grid = eq.grid
    N = grid.N
    paths = np.arange(min(config.K, 8)) if paths is None else np.asarray(paths)
    steps = [N // 5, 2 * N // 5, 3 * N // 5, 4 * N // 5, N] if steps is None else list(steps)
    X = eq.states.buffers["X"]
    table = {}
    common = config.common_seed if config.common_seed is not None else config.seed
    for j in steps:
        if j == N:
            rows = MeasureBatch(eq.flow.batch(N).values[paths], presorted=True)
            table[j] = (paths, model.costs.dxg(X[N][paths], rows))
            continue
        sub = grid.subgrid(j)
        P, F = paths.size, fresh_paths
        cfg = config.with_(K=P * F, groups=P)
        noise = generate_noise(sub, P * F, config.M, derive_seed(config.seed, 17, j), derive_seed(common, 17, j))
        xi = np.repeat(X[j][paths], F, axis=0)
        res = solve_mfg(model, sub, xi, cfg, noise, eq.policy.subgrid(j).take(np.repeat(paths, F)))
        table[j] = (paths, res.states.buffers["Y"][0].reshape(P, F, config.M).mean(axis=1))
    return table


@dataclass
class DecouplingReport:
    per_step: dict
    max_error: float

    def to_dict(self) -> dict:
        return {"per_step": {str(k): v for k, v in self.per_step.items()}, "max_error": self.max_error}


def verify_decoupling(policy, states, flow, u_table: dict) -> DecouplingReport:
    """Relative L2 gap between the equilibrium Y_j and U(t_j, X_j, m_j) per step."""
    per = {}
    Y = states.buffers["Y"]
    for j, (paths, U) in sorted(u_table.items()):
        y = Y[j][paths]
        den = np.sqrt(np.mean(U * U))
        per[j] = float(np.sqrt(np.mean((y - U) ** 2)) / den) if den > 0 else float(np.sqrt(np.mean(y * y)))
    return DecouplingReport(per, max(per.values()) if per else 0.0)


# --- regularity of U -----------------------------------------------------------

def monotonicity_margin(ug: UGridResult) -> tuple[float, float]:
    """Smallest ``(U(x) - U(x')) / (x - x')`` over grid pairs, relative to the slope scale.

    Returns ``(margin, slope_scale)``; the margin is negative when U
    decreases somewhere.
    """
    x, U = ug.x, ug.U
    dx = x[:, None] - x[None, :]
    dU = U[:, None] - U[None, :]
    mask = dx > 0
    slopes = dU[mask] / dx[mask]
    scale = float(np.max(np.abs(np.diff(U) / np.diff(x)))) if x.size > 1 else 0.0
    if scale == 0:
        return 0.0, 0.0
    return float(np.min(slopes) / scale), scale


def lipschitz_in_m(model: ModelSpec, grid: TimeGrid, m, deltas=(0.05, 0.1, 0.2),
                   config: SolverConfig = SolverConfig(), base: UGridResult | None = None):
    """Slopes ``sup_x |U(x, m + delta) - U(x, m)| / delta`` for translated measures.

    A translation by delta moves m by exactly delta in W2. All runs share the
    noise and the x-grid.
    """
    m = m if isinstance(m, EmpiricalMeasure1D) else EmpiricalMeasure1D.from_samples(m)
    base = base or decoupling_function(model, grid, m, config)
    out = {}
    for d in deltas:
        ug = decoupling_function(model, grid, m.shift(d), config, x_grid=base.x)
        out[d] = float(np.max(np.abs(ug.U - base.U)) / d)
    return out, base
