"""Homotopy solver for the discrete forward-backward system.

The family indexed by ``alpha`` in [0, 1] blends the target coefficients with
a monotone base system:

    B_a = a B + (1 - a) (-cbar (c1 Y + c2 Z + c3 Zt)) + phi
    F_a = a F + (1 - a) (-X) + gamma
    G_a = a G + eta

where ``dY = F dt + Z dW + Zt dWt`` (so ``F = -dx_hbar`` for the game). A level
``a0 + delta`` is solved by sweeps in which the part at ``a0`` is evaluated
through the current feedback tables and the ``delta`` increment is frozen at
the particle arrays of the previous sweep.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ValidationError
from .lsmc import FeedbackPolicy, bsde_residual, regress_backward
from .measure import MeasureFlow
from .mfg import SolverConfig
from .model import ModelSpec, dx_hbar, minimize_hamiltonian, reduced_coefficients
from .simulate import NoiseBundle, ParticleStates, TimeGrid, initial_states

MAX_SWEEPS = 200
DELTA_FLOOR = 1 / 64
INNER_TOL = 1e-4
PROBE_DELTAS = (1 / 2, 1 / 4, 1 / 8, 1 / 16)


@dataclass(frozen=True)
class OperatorSpec:
    """Linear maps ``c(t)`` coupling the forward drift to ``(Y, Z, Zt)`` and their adjoints.

    In one dimension the adjoints are the same scalars; they are kept as
    separate fields so that nothing else changes in higher dimension.
    """

    c1: object
    c2: object
    c3: object
    cbar1: object
    cbar2: object
    cbar3: object
    beta: float | None = None

    @classmethod
    def from_model(cls, model: ModelSpec, beta: float | None = None) -> OperatorSpec:
        d = model.dynamics
        return cls(d.b2, d.sigma2, d.tsigma2, d.b2, d.sigma2, d.tsigma2, beta)

    def at(self, t: float) -> tuple[float, float, float]:
        return self.c1(t), self.c2(t), self.c3(t)

    def adjoint_at(self, t: float) -> tuple[float, float, float]:
        return self.cbar1(t), self.cbar2(t), self.cbar3(t)

    def bound(self, T: float) -> float:
        return max(c.sup(T) for c in (self.c1, self.c2, self.c3))


@dataclass
class HomotopyState:
    """Level, drivers and current iterate. Drivers are ``(N, K, M)``, ``eta`` is
    ``(K, M)``; ``None`` means zero."""

    alpha: float
    states: ParticleStates
    policy: FeedbackPolicy
    phi: np.ndarray | None = None
    psi: np.ndarray | None = None
    psit: np.ndarray | None = None
    gamma: np.ndarray | None = None
    eta: np.ndarray | None = None


@dataclass
class LevelLog:
    alpha: float
    delta: float
    sweeps: int
    converged: bool
    contraction: float
    residuals: list = field(default_factory=list)
    y0: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "delta": self.delta, "inner_iterations": self.sweeps,
                "converged": self.converged, "contraction_factor": self.contraction,
                "residuals": list(self.residuals)}


@dataclass
class ContinuationResult:
    states: ParticleStates
    policy: FeedbackPolicy
    log: list
    converged: bool
    noise: NoiseBundle
    grid: TimeGrid
    inner_tol: float
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {"converged": self.converged, "inner_tol": self.inner_tol, "wall_time": self.wall_time,
                "levels": [lv.to_dict() for lv in self.log]}


def _take(a, j):
    return 0.0 if a is None else a[j]


def _contraction(changes: list, floor: float) -> float:
    """Median ratio of successive changes over the last few sweeps; 0 once a
    sweep reproduces its input."""
    r = []
    for a, b in zip(changes[:-1], changes[1:]):
        r.append(0.0 if a <= floor or b <= floor else b / a)
    return float(np.median(r[-5:])) if r else 0.0


class _Level:
    """Sweep operator for the level ``a0 + delta`` with the increment frozen at ``prev``."""

    def __init__(self, model, op, grid, noise, x0, hs: HomotopyState, a0, delta, degree, threads):
        self.model, self.op, self.grid, self.noise, self.x0 = model, op, grid, noise, x0
        self.hs, self.a0, self.delta = hs, a0, delta
        self.degree, self.threads = degree, threads
        self.common = model.dynamics.has_common_noise or hs.psit is not None

    def _frozen(self, prev: ParticleStates, j: int, pflow: MeasureFlow | None):
        b = prev.buffers
        x, y, z, zt, a = (b[f][j] for f in ("X", "Y", "Z", "Zt", "alpha"))
        t = self.grid.t(j)
        c1, c2, c3 = self.op.at(t)
        cb1, cb2, cb3 = self.op.adjoint_at(t)
        lin = c1 * y + c2 * z + c3 * zt
        dr, vol, cvol = reduced_coefficients(self.model, t, x, a)
        out = {"drift": dr + cb1 * lin, "vol": vol + cb2 * lin, "cvol": cvol + cb3 * lin}
        if pflow is not None:
            out["F"] = dx_hbar(self.model, t, x, y, z, zt, pflow.batch(j)) - x
        return out

    def forward(self, policy: FeedbackPolicy, prev: ParticleStates, out: ParticleStates) -> None:
        model, grid, hs, a0, d = self.model, self.grid, self.hs, self.a0, self.delta
        X, A = out.buffers["X"], out.buffers["alpha"]
        X[0] = self.x0
        dt = grid.dt
        for j in range(grid.N + 1):
            t = grid.t(j)
            x = X[j]
            y, z, zt = policy.evaluate_step(j, x)
            a = minimize_hamiltonian(model, t, x, y, z, zt)
            A[j] = a
            if j == grid.N:
                break
            c1, c2, c3 = self.op.at(t)
            cb1, cb2, cb3 = self.op.adjoint_at(t)
            lin = c1 * y + c2 * z + c3 * zt
            b, s, c = reduced_coefficients(model, t, x, a)
            drift = a0 * b - (1 - a0) * cb1 * lin + _take(hs.phi, j)
            vol = a0 * s - (1 - a0) * cb2 * lin + _take(hs.psi, j)
            cvol = a0 * c - (1 - a0) * cb3 * lin + _take(hs.psit, j)
            if d:
                fr = self._frozen(prev, j, None)
                drift = drift + d * fr["drift"]
                vol = vol + d * fr["vol"]
                cvol = cvol + d * fr["cvol"]
            dw, dwt = self.noise.step(j)
            nxt = x + drift * dt + vol * dw + cvol * dwt[:, None]
            if not np.all(np.isfinite(nxt)):
                raise NumericError(f"non-finite state at step {j + 1} (level {a0 + d:.4g})")
            X[j + 1] = nxt
        out.populated["X"] = out.populated["alpha"] = True

    def backward(self, prev: ParticleStates, out: ParticleStates) -> FeedbackPolicy:
        model, grid, hs, a0, d = self.model, self.grid, self.hs, self.a0, self.delta
        X = out.buffers["X"]
        flow = MeasureFlow(out.X)
        pflow = MeasureFlow(prev.X) if d else None
        N = grid.N
        yN = a0 * model.costs.dxg(X[N], flow.batch(N)) if a0 else np.zeros_like(X[N])
        if d:
            yN = yN + d * model.costs.dxg(prev.buffers["X"][N], pflow.batch(N))
        if hs.eta is not None:
            yN = yN + hs.eta
        cache = {}

        def driver(j, sl, x, ystar, z, zt):
            if j not in cache:
                cache.clear()
                cache[j] = (flow.batch(j), self._frozen(prev, j, pflow)["F"] if d else None)
            mj, fr = cache[j]
            r = (1 - a0) * x
            if a0:
                r = r + a0 * dx_hbar(model, grid.t(j), x, ystar, z, zt, mj[sl])
            if d:
                r = r + d * fr[sl]
            if hs.gamma is not None:
                r = r - hs.gamma[j, sl]
            return r

        return regress_backward(out, grid, self.noise, yN, driver, lambda j: np.mean(X[j], axis=1),
                                self.common, self.degree, self.threads)

    def sweep(self, policy, prev, out, damping):
        self.forward(policy, prev, out)
        fit = self.backward(prev, out)
        b = out.buffers
        for j in range(self.grid.N + 1):
            b["alpha"][j] = minimize_hamiltonian(self.model, self.grid.t(j), b["X"][j], b["Y"][j], b["Z"][j],
                                                 b["Zt"][j])
        return fit if damping >= 1.0 else policy.blend(fit, damping)


def _change(a: ParticleStates, b: ParticleStates) -> float:
    return float(max(np.max(np.abs(a.buffers["X"] - b.buffers["X"])),
                     np.max(np.abs(a.buffers["Y"] - b.buffers["Y"]))))


def _run_level(level: _Level, hs: HomotopyState, tol, damping, max_sweeps, alpha, delta):
    """Damped sweeps at one level from the iterate in ``hs``; returns the level log
    and the new iterate, or ``None`` for the iterate on stall."""
    prev = hs.states
    policy = hs.policy
    changes = []
    for k in range(1, max_sweeps + 1):
        out = ParticleStates.empty(level.grid, prev.K, prev.M)
        policy = level.sweep(policy, prev, out, damping)
        ch = _change(out, prev)
        changes.append(ch)
        prev = out
        if not np.isfinite(ch) or (k > 5 and ch > 1e3 * max(changes[0], tol)):
            break
        if ch < tol:
            return LevelLog(alpha, delta, k, True, _contraction(changes, 1e-3 * tol), changes,
                            np.array(prev.buffers["Y"][0])), (prev, policy)
    return LevelLog(alpha, delta, len(changes), False, _contraction(changes, 1e-3 * tol), changes), None


def _blend_gap(model: ModelSpec, op: OperatorSpec, st: ParticleStates, grid: TimeGrid) -> float:
    """Sup distance between the target and base coefficients on the iterate."""
    b = st.buffers
    flow = MeasureFlow(st.X)
    gap = 0.0
    for j in range(grid.N + 1):
        t = grid.t(j)
        x, y, z, zt, a = (b[f][j] for f in ("X", "Y", "Z", "Zt", "alpha"))
        if j == grid.N:
            gap = max(gap, float(np.max(np.abs(model.costs.dxg(x, flow.batch(j))))))
            break
        c1, c2, c3 = op.at(t)
        cb = op.adjoint_at(t)
        lin = c1 * y + c2 * z + c3 * zt
        coef = reduced_coefficients(model, t, x, a)
        gap = max(gap, *(float(np.max(np.abs(cf + cbk * lin))) for cf, cbk in zip(coef, cb)))
        gap = max(gap, float(np.max(np.abs(dx_hbar(model, t, x, y, z, zt, flow.batch(j)) - x))))
    return gap


def _scale(x0) -> float:
    r = float(np.sqrt(np.mean(x0 * x0)))
    return r if r > 0 else 1.0


def _start(grid, noise, x0, degree, drivers, init_perturbation, scale):
    K, M = noise.K, noise.M
    st = ParticleStates.empty(grid, K, M)
    st.buffers["X"][:] = x0
    pol = FeedbackPolicy.zeros(grid.N, K, degree)
    if init_perturbation:
        pol.beta_y[..., 0] += init_perturbation * scale
        st.buffers["Y"][:] += init_perturbation * scale
    return HomotopyState(0.0, st, pol, **(drivers or {}))


def solve_continuation(model: ModelSpec, grid: TimeGrid, noise: NoiseBundle, xi, schedule: int = 8,
                       config: SolverConfig = SolverConfig(), drivers: dict | None = None,
                       init_perturbation: float = 0.0, max_sweeps: int = MAX_SWEEPS,
                       inner_tol: float | None = None) -> ContinuationResult:
    """Homotopy from the base system at alpha = 0 to the target at alpha = 1.

    ``schedule`` is the initial number of levels (step ``1 / schedule``);
    the step halves whenever a level stalls, down to 1/64. ``drivers`` may
    hold ``phi``, ``psi``, ``psit``, ``gamma`` and ``eta``. With
    ``init_perturbation`` the first iterate of the base level is shifted by
    that multiple of the state scale in Y.
    """
    t0 = time.perf_counter()
    if schedule < 1:
        raise ValidationError("schedule needs at least one level", ["schedule"])
    if (noise.grid.N, noise.grid.s) != (grid.N, grid.s):
        raise ValidationError("noise bundle does not match the grid", ["noise"])
    op = OperatorSpec.from_model(model)
    x0 = initial_states(xi, noise.K, noise.M, noise.seed)
    scale = _scale(x0)
    tol = INNER_TOL * scale if inner_tol is None else inner_tol
    hs = _start(grid, noise, x0, config.degree, drivers, init_perturbation, scale)

    log = []
    base = _Level(model, op, grid, noise, x0, hs, 0.0, 0.0, config.degree, config.threads)
    lv, it = _run_level(base, hs, tol, config.damping, max_sweeps, 0.0, 0.0)
    log.append(lv)
    if it is None:
        return ContinuationResult(hs.states, hs.policy, log, False, noise, grid, tol, time.perf_counter() - t0)
    hs.states, hs.policy = it
    if _blend_gap(model, op, hs.states, grid) <= 1e-12 * scale:
        # the target coincides with the base system: alpha = 1 is already solved
        lv.alpha, hs.alpha = 1.0, 1.0
        return ContinuationResult(hs.states, hs.policy, log, True, noise, grid, tol, time.perf_counter() - t0)

    delta = 1.0 / schedule
    alpha = 0.0
    ok = True
    while alpha < 1.0 - 1e-12:
        d = min(delta, 1.0 - alpha)
        level = _Level(model, op, grid, noise, x0, hs, alpha, d, config.degree, config.threads)
        lv, it = _run_level(level, hs, tol, config.damping, max_sweeps, alpha + d, d)
        log.append(lv)
        if it is None:
            if delta / 2 < DELTA_FLOOR - 1e-15:
                ok = False
                break
            delta /= 2
            continue
        hs.states, hs.policy = it
        alpha += d
        hs.alpha = alpha
    return ContinuationResult(hs.states, hs.policy, log, ok, noise, grid, tol, time.perf_counter() - t0)


def random_drivers(grid: TimeGrid, K: int, M: int, seed: int, size: float) -> dict:
    rng = np.random.default_rng(seed)
    shape = (grid.N, K, M)
    return {"phi": size * rng.standard_normal(shape), "gamma": size * rng.standard_normal(shape),
            "eta": size * rng.standard_normal((K, M))}


@dataclass
class ProbeReport:
    alpha: float
    table: list  # (delta, contraction factor)
    largest_passing: float | None

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "table": [{"delta": d, "factor": f} for d, f in self.table],
                "largest_passing_delta": self.largest_passing}


def probe_delta(model: ModelSpec, grid: TimeGrid, noise: NoiseBundle, xi, deltas=PROBE_DELTAS,
                alpha: float = 0.5, sweeps: int = 8, config: SolverConfig = SolverConfig(),
                driver_size: float = 0.1, damping: float = 1.0) -> ProbeReport:
    """Empirical contraction factor of undamped sweeps at level ``alpha + delta``.

    The iterate at ``alpha`` comes from a continuation run on the target
    with random drivers of relative size ``driver_size``; the same drivers
    stay on during the probe sweeps.
    """
    x0 = initial_states(xi, noise.K, noise.M, noise.seed)
    scale = _scale(x0)
    drv = random_drivers(grid, noise.K, noise.M, noise.seed, driver_size * scale) if driver_size else None
    op = OperatorSpec.from_model(model)
    tol = INNER_TOL * scale
    hs = _start(grid, noise, x0, config.degree, drv, 0.0, scale)
    a = 0.0
    for k in range(MAX_SWEEPS):
        d = 0.0 if k == 0 else min(1 / 8, alpha - a)
        level = _Level(model, op, grid, noise, x0, hs, a, d, config.degree, config.threads)
        _, it = _run_level(level, hs, tol, config.damping, MAX_SWEEPS, a + d, d)
        if it is not None:
            hs.states, hs.policy = it
        a += d
        if a >= alpha - 1e-12:
            break
    table = []
    for d in deltas:
        level = _Level(model, op, grid, noise, x0, hs, alpha, d, config.degree, config.threads)
        prev, policy = hs.states, hs.policy
        changes = []
        for _ in range(sweeps):
            out = ParticleStates.empty(grid, noise.K, noise.M)
            try:
                policy = level.sweep(policy, prev, out, damping)
            except NumericError:
                changes.append(float("inf"))
                break
            changes.append(_change(out, prev))
            prev = out
            if not np.isfinite(changes[-1]) or changes[-1] <= 1e-12 * scale:
                break
        f = float("inf") if not np.all(np.isfinite(changes)) else _contraction(changes, 1e-12 * scale)
        table.append((float(d), f))
    passing = [d for d, f in table if f < 1.0]
    return ProbeReport(alpha, table, max(passing) if passing else None)


def fbsde_residual(model: ModelSpec, states: ParticleStates, grid: TimeGrid, noise: NoiseBundle) -> dict:
    """Defects of the original discrete system on ``states``.

    The forward defect is the Euler recursion under the control recorded in
    the states; the backward one is the martingale defect of the adjoint
    equation. Both are per-(kappa, j) means over particles; the report gives
    the mean absolute defect next to the mean standard error.
    """
    b = states.buffers
    K, M, N = states.K, states.M, grid.N
    dt = grid.dt
    fwd = np.zeros((K, N))
    fse = np.zeros((K, N))
    for j in range(N):
        dw, dwt = noise.step(j)
        bb, s, c = reduced_coefficients(model, grid.t(j), b["X"][j], b["alpha"][j])
        e = b["X"][j + 1] - b["X"][j] - bb * dt - s * dw - c * dwt[:, None]
        fwd[:, j] = np.mean(e, axis=1)
        fse[:, j] = np.std(e, axis=1) / np.sqrt(M)
    bwd, bse = bsde_residual(model, MeasureFlow(states.X), states, grid, noise)
    forward, backward = float(np.mean(np.abs(fwd))), float(np.mean(np.abs(bwd)))
    se = float(np.mean(bse) + np.mean(fse))
    return {"forward": forward, "backward": backward, "se": se, "pass": forward + backward <= 3 * se}
