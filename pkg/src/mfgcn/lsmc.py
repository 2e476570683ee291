"""Backward least-squares Monte Carlo for the adjoint equation.

Per common path and time step, conditional expectations given ``X_j`` are
polynomial regressions over the M particles of that path. The common-noise
integrand Zt cannot be identified inside a single path (``dWt_j`` is one
number there), so it is estimated across paths: the within-path fits of
``Y_{j+1}`` are evaluated on a shared x-grid and regressed on the common
increments of each path.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np
from scipy.special import ndtri

from . import _parallel
from .errors import NumericError
from .model import ModelSpec, dx_hbar
from .simulate import NoiseBundle, ParticleStates, TimeGrid

CLAMP = 4.0
MIN_PATHS_ZT = 4
_GRID_Q = ndtri(np.linspace(0.1, 0.9, 9))  # standard-normal deciles for the Zt x-grid


def _powers(u: np.ndarray, p: int) -> np.ndarray:
    """Monomials ``u**0 .. u**p`` stacked on a new axis just before the last one."""
    out = np.empty(u.shape[:-1] + (p + 1,) + u.shape[-1:])
    out[..., 0, :] = 1.0
    for v in range(1, p + 1):
        out[..., v, :] = out[..., v - 1, :] * u
    return out


def _horner(beta: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Evaluate ``sum_v beta[..., v] * u**v`` with beta broadcast against u."""
    out = np.zeros(np.broadcast_shapes(beta.shape[:-1], u.shape))
    for v in range(beta.shape[-1] - 1, -1, -1):
        out = out * u + beta[..., v]
    return out


def rebase_coefficients(beta: np.ndarray, center, scale, new_center, new_scale) -> np.ndarray:
    """Re-express ``sum beta_v ((x - c) / s)**v`` in the variable ``(x - c') / s'``.

    With ``u = a + b u'`` for ``a = (c' - c) / s`` and ``b = s' / s``, the
    binomial expansion gives ``beta'_w = sum_v beta_v C(v, w) a**(v-w) b**w``.
    """
    p = beta.shape[-1] - 1
    a = ((np.asarray(new_center) - center) / scale)[..., None]
    b = (np.asarray(new_scale) / scale)[..., None]
    out = np.zeros_like(beta)
    for v in range(p + 1):
        for w in range(v + 1):
            out[..., w] += beta[..., v] * comb(v, w) * a[..., 0] ** (v - w) * b[..., 0] ** w
    return out


@dataclass
class FeedbackPolicy:
    """Per (step, path) polynomial tables for Y, Z and Zt as functions of x.

    Coefficients act on ``u = (x - center) / scale`` with u clamped to
    ``[-4, 4]``; arrays are laid out ``[j, kappa, v]``.
    """

    degree: int
    center: np.ndarray
    scale: np.ndarray
    beta_y: np.ndarray
    beta_z: np.ndarray
    beta_zt: np.ndarray
    residual: np.ndarray
    degenerate: np.ndarray
    clamped: int = 0

    @classmethod
    def zeros(cls, N: int, K: int, degree: int = 2) -> FeedbackPolicy:
        shape = (N + 1, K)
        coef = np.zeros(shape + (degree + 1,))
        return cls(degree, np.zeros(shape), np.ones(shape), coef, coef.copy(), coef.copy(),
                   np.zeros(shape), np.zeros(shape, dtype=bool))

    @classmethod
    def constant(cls, N: int, K: int, y: float = 0.0, z: float = 0.0, zt: float = 0.0, degree: int = 0):
        pol = cls.zeros(N, K, degree)
        pol.beta_y[..., 0], pol.beta_z[..., 0], pol.beta_zt[..., 0] = y, z, zt
        return pol

    @property
    def N(self) -> int:
        return self.center.shape[0] - 1

    @property
    def K(self) -> int:
        return self.center.shape[1]

    def _u(self, j, x, rows):
        c = self.center[j, rows]
        s = self.scale[j, rows]
        if np.ndim(x) > np.ndim(c):
            c, s = c[..., None], s[..., None]
        u = (x - c) / s
        out = np.clip(u, -CLAMP, CLAMP)
        n = int(np.count_nonzero(out != u))
        if n:
            self.clamped += n
        return out

    def evaluate_step(self, j: int, x: np.ndarray, rows: slice = slice(None)):
        """Vectorised (Y, Z, Zt) at step j for x of shape ``(K_rows, M)``."""
        u = self._u(j, x, rows)
        by, bz, bt = (b[j, rows][:, None, :] for b in (self.beta_y, self.beta_z, self.beta_zt))
        return _horner(by, u), _horner(bz, u), _horner(bt, u)

    def evaluate(self, kappa: int, j: int, x):
        """(Y, Z, Zt) for path kappa at step j; x scalar or array."""
        if not (0 <= kappa < self.K and 0 <= j <= self.N):
            raise IndexError(f"(kappa, j) = ({kappa}, {j}) outside the table")
        x = np.asarray(x, dtype=float)
        u = self._u(j, x, kappa)
        vals = tuple(_horner(b[j, kappa], u) for b in (self.beta_y, self.beta_z, self.beta_zt))
        if x.ndim == 0:
            vals = tuple(float(v) for v in vals)
        return vals

    def was_clamped(self, kappa: int, j: int, x) -> bool:
        u = (np.asarray(x, dtype=float) - self.center[j, kappa]) / self.scale[j, kappa]
        return bool(np.any(np.abs(u) > CLAMP))

    def rebased(self, center: np.ndarray, scale: np.ndarray) -> FeedbackPolicy:
        args = (self.center, self.scale, center, scale)
        return FeedbackPolicy(self.degree, center.copy(), scale.copy(),
                              rebase_coefficients(self.beta_y, *args),
                              rebase_coefficients(self.beta_z, *args),
                              rebase_coefficients(self.beta_zt, *args),
                              self.residual.copy(), self.degenerate.copy())

    def blend(self, fit: FeedbackPolicy, lam: float) -> FeedbackPolicy:
        """``(1 - lam) * self + lam * fit`` in the centering of ``fit``."""
        old = self.rebased(fit.center, fit.scale)
        # a degenerate cloud sits at u = 0, where only the intercept is ever used
        for b in (old.beta_y, old.beta_z, old.beta_zt):
            b[..., 1:][fit.degenerate] = 0.0
        mix = lambda a, b: (1.0 - lam) * a + lam * b
        return FeedbackPolicy(fit.degree, fit.center.copy(), fit.scale.copy(),
                              mix(old.beta_y, fit.beta_y), mix(old.beta_z, fit.beta_z),
                              mix(old.beta_zt, fit.beta_zt), fit.residual.copy(), fit.degenerate.copy())

    def distance(self, other: FeedbackPolicy) -> float:
        """Sup-norm coefficient change, comparing in ``other``'s centering."""
        old = self.rebased(other.center, other.scale)
        return float(max(np.max(np.abs(old.beta_y - other.beta_y)),
                         np.max(np.abs(old.beta_z - other.beta_z)),
                         np.max(np.abs(old.beta_zt - other.beta_zt))))

    def copy(self) -> FeedbackPolicy:
        return FeedbackPolicy(self.degree, self.center.copy(), self.scale.copy(), self.beta_y.copy(),
                              self.beta_z.copy(), self.beta_zt.copy(), self.residual.copy(),
                              self.degenerate.copy(), self.clamped)

    def tile(self, reps: int) -> FeedbackPolicy:
        """Repeat the path axis ``reps`` times (block-major)."""
        t = lambda a: np.tile(a, (1, reps) + (1,) * (a.ndim - 2))
        return FeedbackPolicy(self.degree, t(self.center), t(self.scale), t(self.beta_y), t(self.beta_z),
                              t(self.beta_zt), t(self.residual), t(self.degenerate))

    def take(self, idx) -> FeedbackPolicy:
        """Tables of the paths listed in ``idx`` (repeats allowed)."""
        return FeedbackPolicy(self.degree, *(a[:, idx].copy() for a in (
            self.center, self.scale, self.beta_y, self.beta_z, self.beta_zt, self.residual, self.degenerate)))

    def subgrid(self, j0: int) -> FeedbackPolicy:
        """Tables from step ``j0`` on, for a solve started at that step."""
        return FeedbackPolicy(self.degree, *(a[j0:].copy() for a in (
            self.center, self.scale, self.beta_y, self.beta_z, self.beta_zt, self.residual, self.degenerate)))

    def rows(self):
        """Flat records (kappa, step, coeff_index, beta_Y, beta_Z, beta_Zt, center, scale, residual)."""
        for j in range(self.N + 1):
            for k in range(self.K):
                for v in range(self.degree + 1):
                    yield (k, j, v, self.beta_y[j, k, v], self.beta_z[j, k, v], self.beta_zt[j, k, v],
                           self.center[j, k], self.scale[j, k], self.residual[j, k])


def evaluate_policy(policy: FeedbackPolicy, kappa: int, j: int, x):
    return policy.evaluate(kappa, j, x)


class _Fit:
    """Within-path regression design at one step for a block of paths."""

    def __init__(self, x: np.ndarray, degree: int):
        K, M = x.shape
        self.center = np.mean(x, axis=1)
        sd = np.sqrt(np.mean((x - self.center[:, None]) ** 2, axis=1))
        self.degenerate = (sd <= 1e-12 * (1.0 + np.abs(self.center))) | (M <= degree)
        self.scale = np.where(self.degenerate, 1.0, sd)
        u = (x - self.center[:, None]) / self.scale[:, None]
        u[self.degenerate] = 0.0
        self.M = M
        self.p = degree
        self.basis = _powers(u, degree)  # (K, p+1, M)
        q = degree + 1
        gram = np.empty((K, q, q))
        for a in range(q):
            for b in range(a, q):
                gram[:, a, b] = gram[:, b, a] = np.sum(self.basis[:, a] * self.basis[:, b], axis=-1) / M
        for v in range(1, q):
            gram[self.degenerate, v, v] += 1.0
        gram += 1e-12 * np.eye(q)
        self.gram = gram

    def solve(self, *targets: np.ndarray) -> list[np.ndarray]:
        rhs = np.stack([np.sum(self.basis * t[:, None, :], axis=-1) / self.M for t in targets], axis=-1)
        try:
            sol = np.linalg.solve(self.gram, rhs)
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"regression design singular: {exc}") from exc
        return [sol[..., r] for r in range(len(targets))]

    def predict(self, beta: np.ndarray) -> np.ndarray:
        return np.einsum("kv,kvm->km", beta, self.basis)


def _zt_cross_path(fit_c: np.ndarray, centers: np.ndarray, scales: np.ndarray, mbar: np.ndarray,
                   dwt: np.ndarray, degree: int):
    """Zt coefficients per path from the spread of within-path fits across paths.

    ``fit_c[k]`` are the coefficients of ``E[Y_{j+1} | X_j]`` on path k; this
    evaluates them at Gaussian deciles of the pooled cloud, regresses each grid value on
    ``[1, mbar^k, dWt^k]`` across k, and fits the ``dWt`` slopes as a
    polynomial in x, returned in each path's own basis.
    """
    K = fit_c.shape[0]
    pooled_c = float(np.mean(centers))
    pooled_s = float(np.sqrt(np.mean(scales**2) + np.var(centers)))
    if pooled_s <= 0:
        pooled_s = 1.0
    xg = pooled_c + pooled_s * _GRID_Q
    u = np.clip((xg[None, :] - centers[:, None]) / scales[:, None], -CLAMP, CLAMP)
    vals = _horner(fit_c[:, None, :], u)  # (K, G)
    spread_m = np.ptp(mbar) > 1e-12 * (1 + np.max(np.abs(mbar)))
    cols = [np.ones(K), dwt] if not spread_m or K < MIN_PATHS_ZT + 1 else [np.ones(K), mbar, dwt]
    design = np.stack(cols, axis=1)
    coef, *_ = np.linalg.lstsq(design, vals, rcond=None)
    slope = coef[-1]  # (G,)
    qdeg = min(degree, 2, len(xg) - 1)
    ug = (xg - pooled_c) / pooled_s
    gamma = np.polynomial.polynomial.polyfit(ug, slope, qdeg) if np.ptp(ug) > 0 else np.array([np.mean(slope)])
    gamma_full = np.zeros(degree + 1)
    gamma_full[: gamma.size] = gamma
    return rebase_coefficients(np.broadcast_to(gamma_full, (K, degree + 1)),
                               pooled_c, pooled_s, centers, scales)


def backward_pass(model: ModelSpec, flow, states: ParticleStates, grid: TimeGrid, noise: NoiseBundle,
                  degree: int = 2, threads: int | None = None, groups: int = 1) -> FeedbackPolicy:
    """Fill Y, Z, Zt in ``states`` and return the fitted feedback tables.

    ``flow`` supplies the measure argument through ``flow.batch(j)`` (one
    measure per path); it is either the flow of ``states`` itself or a frozen
    exogenous flow. With ``groups > 1`` the paths form that many equal
    consecutive blocks of unrelated problems and the cross-path Zt regression
    runs inside each block.
    """
    X = states.buffers["X"]
    K = states.K
    last = {}

    def driver(j, sl, x, ystar, z, zt):
        if j not in last:
            last.clear()
            last[j] = flow.batch(j)
        return dx_hbar(model, grid.t(j), x, ystar, z, zt, last[j][sl])

    yN = model.costs.dxg(X[grid.N], flow.batch(grid.N))
    # the path mean only helps the Zt regression when the costs see the measure
    if model.coupled:
        mean_of = lambda j: np.ravel(flow.batch(j).mean)
    else:
        mean_of = lambda j: np.zeros(K)
    return regress_backward(states, grid, noise, yN, driver, mean_of, model.dynamics.has_common_noise,
                            degree, threads, groups)


def regress_backward(states: ParticleStates, grid: TimeGrid, noise: NoiseBundle, terminal, driver, mean_of,
                     common: bool, degree: int = 2, threads: int | None = None,
                     groups: int = 1) -> FeedbackPolicy:
    """Regression scheme for ``Y_j = E[Y_{j+1} | X_j] - Zt dWt + driver * dt``.

    ``terminal`` holds Y_N, ``driver(j, rows, x, ystar, z, zt)`` the rate
    added over one step and ``mean_of(j)`` the per-path mean of the state,
    used as a control in the cross-path Zt regression. Zt is estimated only
    when ``common`` is set.
    """
    if not 0 <= degree <= 4:
        raise ValueError("basis degree must be in 0..4")
    K, M, N = states.K, states.M, grid.N
    dt = grid.dt
    X, Y, Z, Zt = (states.buffers[f] for f in ("X", "Y", "Z", "Zt"))
    pol = FeedbackPolicy.zeros(N, K, degree)
    if K % groups:
        raise ValueError(f"{K} paths do not split into {groups} groups")
    Kg = K // groups
    use_zt = common and Kg >= 2

    def fit_table(j, sl, fit, target):
        (beta,) = fit.solve(target)
        pol.center[j, sl], pol.scale[j, sl] = fit.center, fit.scale
        pol.degenerate[j, sl] = fit.degenerate
        pol.beta_y[j, sl] = beta

    # terminal slice
    Y[N] = terminal
    Z[N] = Zt[N] = 0.0

    def terminal(sl):
        fit = _Fit(X[N, sl], degree)
        fit_table(N, sl, fit, Y[N, sl])
        pol.residual[N, sl] = np.sqrt(np.mean((fit.predict(pol.beta_y[N, sl]) - Y[N, sl]) ** 2, axis=1))

    _parallel.run_chunks(terminal, K, threads)

    fits: dict[int, _Fit] = {}
    beta_c = np.empty((K, degree + 1))
    for j in range(N - 1, -1, -1):
        dw, dwt = noise.step(j)
        y1 = Y[j + 1]

        def stage1(sl):
            fit = _Fit(X[j, sl], degree)
            (bc,) = fit.solve(y1[sl])
            # centring the target removes most of the variance of the Z estimate
            (bz,) = fit.solve((y1[sl] - fit.predict(bc)) * dw[sl] / dt)
            fits[sl.start] = fit
            beta_c[sl] = bc
            pol.beta_z[j, sl] = bz
            pol.center[j, sl], pol.scale[j, sl] = fit.center, fit.scale
            pol.degenerate[j, sl] = fit.degenerate

        _parallel.run_chunks(stage1, K, threads)
        if use_zt:
            mbar = mean_of(j)
            for g in range(groups):
                b = slice(g * Kg, (g + 1) * Kg)
                pol.beta_zt[j, b] = _zt_cross_path(beta_c[b], pol.center[j, b], pol.scale[j, b],
                                                    mbar[b], dwt[b], degree)

        def stage2(sl):
            fit = fits[sl.start]
            c = fit.predict(beta_c[sl])
            z = fit.predict(pol.beta_z[j, sl])
            zt = fit.predict(pol.beta_zt[j, sl])
            ystar = c - zt * dwt[sl, None]
            yj = ystar + driver(j, sl, X[j, sl], ystar, z, zt) * dt
            if not np.all(np.isfinite(yj)):
                raise NumericError(f"non-finite adjoint value at step {j}")
            Y[j, sl], Z[j, sl], Zt[j, sl] = yj, z, zt
            pol.residual[j, sl] = np.sqrt(np.mean((y1[sl] - c) ** 2, axis=1))
            (by,) = fit.solve(yj)
            pol.beta_y[j, sl] = by

        _parallel.run_chunks(stage2, K, threads)
        fits.clear()

    states.populated.update(Y=True, Z=True, Zt=True)
    return pol


def bsde_residual(model: ModelSpec, flow, states: ParticleStates, grid: TimeGrid, noise: NoiseBundle):
    """Per (kappa, j) mean over particles of the discrete martingale defect
    ``Y_{j+1} - Y_j + dx_hbar dt - Zt dWt`` and its standard error.

    The idiosyncratic increment is left in the defect: it averages out over
    the particles of a path, and its spread enters the standard error.
    """
    K, M, N = states.K, states.M, grid.N
    dt = grid.dt
    X, Y, Z, Zt = (states.buffers[f] for f in ("X", "Y", "Z", "Zt"))
    mean = np.zeros((K, N))
    se = np.zeros((K, N))
    for j in range(N):
        _, dwt = noise.step(j)
        drv = dx_hbar(model, grid.t(j), X[j], Y[j], Z[j], Zt[j], flow.batch(j))
        d = Y[j + 1] - Y[j] + drv * dt - Zt[j] * dwt[:, None]
        mean[:, j] = np.mean(d, axis=1)
        se[:, j] = np.std(d, axis=1) / np.sqrt(M)
    return mean, se
