"""Analytic linear-quadratic benchmark with common noise.

With ``Y = P x + R mbar`` the adjoint system closes on two Riccati equations
integrated backward in time:

    P' = -2 b1 P + b2^2 P^2 - (q + qbar),            P(T) = qT + qbarT
    R' = -2 b1 R + b2^2 R (2 P + R) + qbar s,         R(T) = -qbarT sT

and the conditional mean follows ``dmbar = (b0 + (b1 - b2^2 (P + R)) mbar) dt + tsigma dWt``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ValidationError
from .model import ModelSpec, lq_model, validate_lq
from .simulate import TimeGrid

BLOWUP = 1e6


@dataclass(frozen=True)
class LQSpec:
    q: float = 1.0
    qbar: float = 0.5
    s: float = 0.8
    qT: float = 1.0
    qbarT: float = 0.5
    sT: float = 0.8
    b1: float = 0.1
    b2: float = 1.0
    sigma: float = 0.3
    tsigma: float = 0.2
    b0: float = 0.0

    def __post_init__(self):
        validate_lq(self.q, self.qbar, self.s, self.qT, self.qbarT, self.sT)
        if self.b2 == 0:
            raise ValidationError("b2 must be non-zero", ["dynamics.b2"])

    @classmethod
    def from_model(cls, model: ModelSpec) -> LQSpec:
        meta = model.meta
        if meta.get("kind") != "lq":
            raise ValidationError("model is not linear-quadratic", ["costs.kind"])
        d = model.dynamics
        for name in ("b1", "b2", "b0", "sigma0", "tsigma0"):
            if not getattr(d, name).is_constant:
                raise ValidationError("oracle needs constant coefficients", [f"dynamics.{name}"])
        for name in ("sigma1", "sigma2", "tsigma1", "tsigma2"):
            if not getattr(d, name).is_zero:
                raise ValidationError("oracle needs state- and control-free volatility", [f"dynamics.{name}"])
        return cls(meta["q"], meta["qbar"], meta["s"], meta["qT"], meta["qbarT"], meta["sT"],
                   b1=d.b1(0.0), b2=d.b2(0.0), sigma=d.sigma0(0.0), tsigma=d.tsigma0(0.0), b0=d.b0(0.0))

    def to_model(self, T: float = 1.0) -> ModelSpec:
        return lq_model(self.q, self.qbar, self.s, self.qT, self.qbarT, self.sT, b0=self.b0, b1=self.b1,
                        b2=self.b2, sigma=self.sigma, tsigma=self.tsigma, T=T)


@dataclass(frozen=True)
class RiccatiSolution:
    grid: TimeGrid
    t: np.ndarray
    P: np.ndarray
    R: np.ndarray
    substeps: int
    rate_integral: np.ndarray  # -int_t^T (b1 - b2^2 (P + R)) ds on the grid

    @property
    def S(self) -> np.ndarray:
        return self.P + self.R

    def index(self, t: float) -> int:
        return self.grid.index_of(t)


def _rhs(lq: LQSpec, v: np.ndarray) -> np.ndarray:
    P, R = v[0], v[1]
    b1, b22 = lq.b1, lq.b2 * lq.b2
    return np.array([
        -2 * b1 * P + b22 * P * P - (lq.q + lq.qbar),
        -2 * b1 * R + b22 * R * (2 * P + R) + lq.qbar * lq.s,
        b1 - b22 * (P + R),
    ])


def solve_riccati(lq: LQSpec, grid: TimeGrid, substeps: int = 10) -> RiccatiSolution:
    """Fixed-step RK4 backward from T with ``substeps`` steps per grid interval."""
    N = grid.N
    h = -grid.dt / substeps
    out = np.empty((N + 1, 3))
    v = np.array([lq.qT + lq.qbarT, -lq.qbarT * lq.sT, 0.0])
    out[N] = v
    for j in range(N - 1, -1, -1):
        for _ in range(substeps):
            k1 = _rhs(lq, v)
            k2 = _rhs(lq, v + 0.5 * h * k1)
            k3 = _rhs(lq, v + 0.5 * h * k2)
            k4 = _rhs(lq, v + h * k3)
            v = v + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.abs(v[:2]) < BLOWUP):
                raise NumericError(f"Riccati solution blew up near t={grid.t(j):.4g}; inadmissible spec")
        out[j] = v
    return RiccatiSolution(grid, grid.times, out[:, 0].copy(), out[:, 1].copy(), substeps, out[:, 2].copy())


def analytic_feedback(lq: LQSpec, sol: RiccatiSolution, t: float, x, mbar):
    j = sol.index(t)
    y = sol.P[j] * np.asarray(x, dtype=float) + sol.R[j] * np.asarray(mbar, dtype=float)
    return y, -lq.b2 * y


def mean_path(lq: LQSpec, sol: RiccatiSolution, mbar0, dWt: np.ndarray | None = None) -> np.ndarray:
    """Conditional mean per common path by exponential integration.

    ``m_{j+1} = e^{A_j} m_j + e^{A_j / 2} (b0 dt + tsigma dWt_j)`` with ``A_j``
    the integral of the mean-reversion rate over the step. ``dWt`` has shape
    ``(K, N)``; ``None`` gives the deterministic path.
    """
    N = sol.grid.N
    A = np.diff(sol.rate_integral)
    if dWt is None:
        dWt = np.zeros((1, N))
    dWt = np.atleast_2d(dWt)
    m = np.empty((dWt.shape[0], N + 1))
    m[:, 0] = mbar0
    for j in range(N):
        m[:, j + 1] = np.exp(A[j]) * m[:, j] + np.exp(0.5 * A[j]) * (lq.b0 * sol.grid.dt + lq.tsigma * dWt[:, j])
    return m


def exogenous_offset(lq: LQSpec, sol: RiccatiSolution, mbar: np.ndarray) -> np.ndarray:
    """Intercept r(t) of ``Y = P x + r`` for a deterministic exogenous mean path.

    Solves ``r' = (b2^2 P - b1) r + qbar s mbar(t)``, ``r(T) = -qbarT sT mbar(T)``
    backward by RK4 with P and mbar linearly interpolated on each grid step.
    """
    N = sol.grid.N
    mbar = np.asarray(mbar, dtype=float)
    b22 = lq.b2 * lq.b2
    r = np.empty(N + 1)
    r[N] = -lq.qbarT * lq.sT * mbar[N]
    h = -sol.grid.dt

    def f(w, rr):  # w: weight of the left node, 0 at the right node
        P = w * sol.P[j] + (1 - w) * sol.P[j + 1]
        m = w * mbar[j] + (1 - w) * mbar[j + 1]
        return (b22 * P - lq.b1) * rr + lq.qbar * lq.s * m

    for j in range(N - 1, -1, -1):
        rr = r[j + 1]
        k1 = f(0.0, rr)
        k2 = f(0.5, rr + 0.5 * h * k1)
        k3 = f(0.5, rr + 0.5 * h * k2)
        k4 = f(1.0, rr + h * k3)
        r[j] = rr + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return r
