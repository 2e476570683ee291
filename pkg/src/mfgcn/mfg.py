"""Damped Picard iteration for the mean-field equilibrium.

Each outer iteration simulates the particles under the current feedback,
rebuilds the conditional flow, runs the backward regression against it and
blends the new tables into the old ones. Noise is frozen across iterations,
which makes the outer loop a deterministic map.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ValidationError
from .lsmc import FeedbackPolicy, backward_pass
from .measure import MeasureFlow
from .model import ModelSpec, minimize_hamiltonian
from .simulate import (InitialLaw, NoiseBundle, ParticleStates, TimeGrid, forward_euler,
                       generate_noise, initial_states)


@dataclass(frozen=True)
class SolverConfig:
    K: int = 64
    M: int = 512
    seed: int = 42
    common_seed: int | None = None
    max_outer: int = 50
    damping: float = 0.5
    tol_flow: float | None = None  # default 1e-3 * RMS of the initial cloud
    tol_policy: float = 1e-3
    degree: int = 2
    threads: int | None = None
    groups: int = 1  # independent blocks of paths, see backward_pass

    def __post_init__(self):
        if not 0.0 < self.damping <= 1.0:
            raise ValidationError("damping must lie in (0, 1]", ["damping"])
        if self.tol_policy <= 0 or (self.tol_flow is not None and self.tol_flow <= 0):
            raise ValidationError("tolerances must be positive", ["tol"])
        if self.K < 1 or self.M < 1 or self.max_outer < 1:
            raise ValidationError("K, M and max_outer must be positive", ["particles"])
        if not 0 <= self.degree <= 4:
            raise ValidationError("basis degree must be in 0..4", ["degree"])

    def with_(self, **kw) -> SolverConfig:
        return replace(self, **kw)

    def noise(self, grid: TimeGrid) -> NoiseBundle:
        return generate_noise(grid, self.K, self.M, self.seed, self.common_seed)


@dataclass
class SolverReport:
    outer_iters: int = 0
    residual_history: list = field(default_factory=list)  # (flow W2, policy sup) per iteration
    converged: bool = False
    y0_mean: float = float("nan")
    y0_std: float = float("nan")
    wall_time: float = 0.0
    tol_flow: float = 0.0
    tol_policy: float = 0.0
    clamped: int = 0

    def to_dict(self) -> dict:
        return {
            "outer_iters": self.outer_iters,
            "converged": self.converged,
            "residual_history": [{"flow": f, "policy": p} for f, p in self.residual_history],
            "Y0": {"mean": self.y0_mean, "std": self.y0_std},
            "wall_time": self.wall_time,
            "tol_flow": self.tol_flow,
            "tol_policy": self.tol_policy,
            "clamped_evaluations": self.clamped,
        }


@dataclass
class MFGResult:
    """Unpacks as ``policy, flow, states, report``; the noise rides along."""

    policy: FeedbackPolicy
    flow: MeasureFlow
    states: ParticleStates
    report: SolverReport
    noise: NoiseBundle
    grid: TimeGrid

    def __iter__(self):
        return iter((self.policy, self.flow, self.states, self.report))


def _scale(x0: np.ndarray) -> float:
    r = float(np.sqrt(np.mean(x0 * x0)))
    return r if r > 0 else 1.0


def _record_control(model: ModelSpec, states: ParticleStates, grid: TimeGrid) -> None:
    b = states.buffers
    for j in range(grid.N + 1):
        b["alpha"][j] = minimize_hamiltonian(model, grid.t(j), b["X"][j], b["Y"][j], b["Z"][j], b["Zt"][j])


def _iterate(model, grid, xi, config, noise, initial_policy, frozen_flow):
    t0 = time.perf_counter()
    noise = noise or config.noise(grid)
    if (noise.K, noise.M) != (config.K, config.M) or noise.grid.N != grid.N:
        raise ValidationError("noise bundle does not match the configuration", ["noise"])
    x0 = initial_states(xi, config.K, config.M, noise.seed)
    tol_flow = config.tol_flow if config.tol_flow is not None else 1e-3 * _scale(x0)
    report = SolverReport(tol_flow=tol_flow, tol_policy=config.tol_policy)
    policy = initial_policy.copy() if initial_policy is not None else FeedbackPolicy.zeros(grid.N, config.K, config.degree)
    prev_flow = None
    states = ParticleStates.empty(grid, config.K, config.M)
    for it in range(1, config.max_outer + 1):
        forward_euler(model, policy, grid, noise, x0, states, config.threads)
        flow = MeasureFlow(states.X)
        fit = backward_pass(model, flow if frozen_flow is None else frozen_flow, states, grid, noise, config.degree, config.threads,
                           config.groups)
        first = it == 1 and initial_policy is None
        new = fit if first else policy.blend(fit, config.damping)
        res_pol = float("inf") if first else policy.distance(new)
        res_flow = float(np.mean(np.max(flow.distance(prev_flow), axis=1))) if prev_flow is not None else float("inf")
        report.residual_history.append((res_flow, res_pol))
        report.clamped += policy.clamped
        policy, prev_flow = new, flow
        flow_ok = frozen_flow is not None or res_flow < tol_flow
        if flow_ok and res_pol < config.tol_policy:
            report.converged = True
            break
    report.outer_iters = it
    _record_control(model, states, grid)
    y0 = states.buffers["Y"][0]
    report.y0_mean, report.y0_std = float(np.mean(y0)), float(np.std(y0))
    report.wall_time = time.perf_counter() - t0
    return MFGResult(policy, MeasureFlow(states.X, states.Y), states, report, noise, grid)


def solve_mfg(model: ModelSpec, grid: TimeGrid, xi, config: SolverConfig = SolverConfig(),
              noise: NoiseBundle | None = None, initial_policy: FeedbackPolicy | None = None) -> MFGResult:
    """Equilibrium feedback, conditional flow and particle states.

    Non-convergence within ``max_outer`` is reported through
    ``report.converged``; numeric blow-up raises :class:`NumericError`.
    """
    return _iterate(model, grid, xi, config, noise, initial_policy, None)


def solve_individual(model: ModelSpec, frozen_flow: MeasureFlow, grid: TimeGrid, xi,
                     config: SolverConfig = SolverConfig(), noise: NoiseBundle | None = None,
                     initial_policy: FeedbackPolicy | None = None) -> MFGResult:
    """Best response to an exogenous conditional flow (one per common path).

    Path kappa of the frozen flow is paired with common path kappa of the
    noise, so the flow must come from a run with the same common noise.
    """
    if frozen_flow.K != config.K or frozen_flow.N != grid.N:
        raise ValidationError(f"frozen flow has (K, N) = ({frozen_flow.K}, {frozen_flow.N}), "
                              f"expected ({config.K}, {grid.N})", ["flow"])
    return _iterate(model, grid, xi, config, noise, initial_policy, frozen_flow)


__all__ = ["SolverConfig", "SolverReport", "MFGResult", "solve_mfg", "solve_individual", "InitialLaw"]
