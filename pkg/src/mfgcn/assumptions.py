"""Monte Carlo audits of the structural conditions on a model.

Each check samples finite clouds standing in for random variables on an
arbitrary probability space, evaluates the condition's slack per trial and
reports the worst trial. A report passes when its margin is at least
``-tol`` with ``tol`` three bootstrap standard errors of the worst trial's
estimate. Checks whose trials are exact pointwise evaluations carry only a
rounding tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .measure import EmpiricalMeasure1D, w2
from .model import ModelSpec, dx_hbar, minimize_hamiltonian, reduced_coefficients

BOOTSTRAP = 200
FP_FLOOR = 1e-12
POINTWISE_TOL = 1e-9


@dataclass
class AssumptionReport:
    condition_id: str
    passed: bool
    margin: float
    constant_estimate: float
    witness: dict
    trials: int
    seed: int
    tol: float = 0.0
    values: np.ndarray | None = field(default=None, repr=False)  # per-trial slack

    def to_dict(self) -> dict:
        c = self.constant_estimate
        return {"condition_id": self.condition_id, "pass": self.passed, "margin": self.margin,
                "constant_estimate": c if np.isfinite(c) else ("inf" if c > 0 else "-inf"),
                "witness": self.witness, "trials": self.trials, "seed": self.seed, "tol": self.tol}


def gaussian_pairs(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Correlated Gaussian clouds with random means, scales and correlation."""
    mu = rng.normal(0.0, 1.0, 2)
    sd = rng.uniform(0.2, 2.0, 2)
    rho = rng.uniform(-1.0, 1.0)
    z1 = rng.standard_normal(n)
    z2 = rho * z1 + np.sqrt(1 - rho * rho) * rng.standard_normal(n)
    return mu[0] + sd[0] * z1, mu[1] + sd[1] * z2


def _measure(v) -> EmpiricalMeasure1D:
    return EmpiricalMeasure1D.from_samples(v)


def _ratio_se(num: np.ndarray, den: np.ndarray | None, rng: np.random.Generator) -> float:
    """Bootstrap standard error of ``mean(num) / mean(den)`` over particles."""
    n = num.size
    if n < 2:
        return 0.0
    idx = rng.integers(0, n, size=(BOOTSTRAP, n))
    est = num[idx].mean(axis=1)
    if den is not None:
        d = den[idx].mean(axis=1)
        est = np.divide(est, d, out=np.zeros_like(est), where=d > 0)
    return float(np.std(est))


def _witness(**kw) -> dict:
    out = {}
    for k, v in kw.items():
        if isinstance(v, np.ndarray):
            out[k] = v.tolist() if v.size <= 16 else {"n": int(v.size), "mean": float(v.mean()),
                                                      "std": float(v.std())}
        else:
            out[k] = float(v) if isinstance(v, (np.floating, np.integer)) else v
    return out


def _finish(cid, values, per_trial, rng, trials, seed, constant, witness_of, passed_extra=True):
    """Worst trial, its bootstrap tolerance and the report."""
    k = int(np.argmin(values))
    num, den = per_trial[k]
    scale = max(1.0, float(np.max(np.abs(values))))
    tol = 3 * _ratio_se(num, den, rng) + FP_FLOOR * scale
    margin = float(values[k])
    return AssumptionReport(cid, bool(margin >= -tol and passed_extra), margin, float(constant),
                            witness_of(k), trials, seed, tol, np.asarray(values))


# --- mean-field conditions ----------------------------------------------------

def check_weak_monotonicity(model: ModelSpec, trials: int = 200, cloud_size: int = 64, seed: int = 0,
                            sampler: Callable | None = None) -> AssumptionReport:
    """Weak monotonicity of the terminal and running gradients on coupled clouds.

    Per trial, ``E[(dxg(xi, P_xi) - dxg(xi', P_xi')) (xi - xi')]`` and the same
    for ``dxf`` at a random ``(t, alpha)`` shared by both sides; the trial
    value is the smaller of the two.
    """
    rng = np.random.default_rng(seed)
    sampler = sampler or gaussian_pairs
    c = model.costs
    values, per, info = [], [], []
    for _ in range(trials):
        xi, xi2 = sampler(rng, cloud_size)
        t, a = rng.uniform(0, model.T), rng.normal()
        m, m2 = _measure(xi), _measure(xi2)
        d = xi - xi2
        tg = (c.dxg(xi, m) - c.dxg(xi2, m2)) * d
        tf = (c.dxf(t, xi, m, a) - c.dxf(t, xi2, m2, a)) * d
        vg, vf = float(np.mean(tg)), float(np.mean(tf))
        term = "g" if vg <= vf else "f"
        values.append(min(vg, vf))
        per.append((tg if term == "g" else tf, None))
        info.append((term, t, a, xi, xi2))
    values = np.array(values)

    def wit(k):
        term, t, a, xi, xi2 = info[k]
        return _witness(trial=k, term=term, t=t, alpha=a, xi=xi, xi_prime=xi2)

    return _finish("C8", values, per, rng, trials, seed, float(np.min(values)), wit)


def check_ll_monotonicity(model: ModelSpec, trials: int = 200, cloud_size: int = 64, seed: int = 0,
                          sampler: Callable | None = None) -> AssumptionReport:
    """Lasry-Lions monotonicity of ``g`` and ``f1`` on coupled clouds (informational)."""
    rng = np.random.default_rng(seed)
    sampler = sampler or gaussian_pairs
    c = model.costs
    values, per, info = [], [], []
    for _ in range(trials):
        xi, xi2 = sampler(rng, cloud_size)
        t = rng.uniform(0, model.T)
        m, m2 = _measure(xi), _measure(xi2)
        lg = c.g(xi2, m2) + c.g(xi, m) - c.g(xi, m2) - c.g(xi2, m)
        lf = c.f1(t, xi2, m2) + c.f1(t, xi, m) - c.f1(t, xi, m2) - c.f1(t, xi2, m)
        vg, vf = float(np.mean(lg)), float(np.mean(lf))
        term = "g" if vg <= vf else "f1"
        values.append(min(vg, vf))
        per.append((lg if term == "g" else lf, None))
        info.append((term, t, xi, xi2))
    values = np.array(values)

    def wit(k):
        term, t, xi, xi2 = info[k]
        return _witness(trial=k, term=term, t=t, xi=xi, xi_prime=xi2)

    return _finish("LL", values, per, rng, trials, seed, float(np.min(values)), wit)


def check_weak_mean_reverting(model: ModelSpec, trials: int = 200, seed: int = 0) -> AssumptionReport:
    """Weak monotonicity on Dirac clouds ``xi = x``, ``xi' = 0``.

    The margin is the worst ``x (dxh(x, delta_x) - dxh(0, delta_0)) / x^2``
    for ``h`` in ``{g, f}``. The constant estimate is the smallest ``C`` with
    ``x dxh(0, delta_x) >= -C (1 + |x|)`` on the samples.
    """
    rng = np.random.default_rng(seed)
    c = model.costs
    x = rng.normal(0.0, 3.0, trials)
    x[0] = 1.0
    t = rng.uniform(0, model.T, trials)
    zero = _measure([0.0])
    values, lit = np.empty(trials), np.empty(trials)
    for k in range(trials):
        mx = _measure([x[k]])
        vg = x[k] * (c.dxg(x[k], mx) - c.dxg(0.0, zero))
        vf = x[k] * (c.dxf(t[k], x[k], mx, 0.0) - c.dxf(t[k], 0.0, zero, 0.0))
        values[k] = min(float(vg), float(vf)) / max(x[k] * x[k], FP_FLOOR)
        w = min(float(x[k] * c.dxg(0.0, mx)), float(x[k] * c.dxf(t[k], 0.0, mx, 0.0)))
        lit[k] = max(0.0, -w) / (1 + abs(x[k]))
    per = [(np.array([v]), None) for v in values]
    return _finish("WMR", values, per, rng, trials, seed, float(np.max(lit)),
                   lambda k: _witness(trial=k, x=x[k], x_prime=0.0, t=t[k]))


# --- convexity, growth and Lipschitz constants --------------------------------

def check_convexity_lipschitz(model: ModelSpec, trials: int = 200, seed: int = 0,
                              cloud_size: int = 64) -> list[AssumptionReport]:
    """Sampled constants for C2 (Lipschitz in (x, a)), C3 (growth), C4 (convexity)
    and C6 (Lipschitz in m), each checked against the declared constants."""
    rng = np.random.default_rng(seed)
    c, K = model.costs, model.K
    lip, growth, convex, lipm = (np.empty(trials) for _ in range(4))
    info = []
    for k in range(trials):
        t = rng.uniform(0, model.T)
        x, x2, a, a2 = rng.normal(0, 2, 4)
        xi, xi2 = gaussian_pairs(rng, cloud_size)
        m, m2 = _measure(xi), _measure(xi2)
        dxa = abs(x - x2) + abs(a - a2)
        lip[k] = max(abs(c.dxf(t, x, m, a) - c.dxf(t, x2, m, a2)) / dxa,
                     abs(c.daf0(t, x, a) - c.daf0(t, x2, a2)) / dxa,
                     abs(c.dxg(x, m) - c.dxg(x2, m)) / abs(x - x2))
        lin = 1 + abs(x) + abs(a) + np.sqrt(m.second_moment)
        growth[k] = max(abs(c.dxf(t, x, m, a)) / lin, abs(c.daf0(t, x, a)) / lin, abs(c.dxg(x, m)) / lin,
                        abs(c.f(t, 0.0, m, 0.0)) / (1 + m.second_moment),
                        abs(c.g(0.0, m)) / (1 + m.second_moment))
        slack = (c.f(t, x2, m, a2) - c.f(t, x, m, a) - c.dxf(t, x, m, a) * (x2 - x)
                 - c.daf0(t, x, a) * (a2 - a))
        gconv = (c.dxg(x, m) - c.dxg(x2, m)) * (x - x2) / (x - x2) ** 2
        convex[k] = min(float(slack) / (a2 - a) ** 2 - c.c_f, float(gconv))
        dist = w2(m, m2)
        lipm[k] = max(abs(c.dxg(x, m) - c.dxg(x, m2)), abs(c.dxf(t, x, m, a) - c.dxf(t, x, m2, a))) / dist
        info.append(dict(t=t, x=x, x_prime=x2, alpha=a, alpha_prime=a2, m_mean=m.mean, m_prime_mean=m2.mean))

    # every trial here is an exact pointwise evaluation, so the only error is rounding
    reports = []
    for cid, ratios in (("C2", lip), ("C3", growth), ("C6", lipm)):
        kmax = int(np.argmax(ratios))
        tol = POINTWISE_TOL * max(1.0, K)
        margin = float(K - ratios[kmax])
        reports.append(AssumptionReport(cid, margin >= -tol, margin, float(ratios[kmax]),
                                        _witness(trial=kmax, **info[kmax]), trials, seed, tol, K - ratios))
    kmin = int(np.argmin(convex))
    tol = POINTWISE_TOL * max(1.0, c.c_f)
    reports.insert(2, AssumptionReport("C4", bool(convex[kmin] >= -tol), float(convex[kmin]),
                                       float(convex[kmin] + c.c_f), _witness(trial=kmin, **info[kmin]),
                                       trials, seed, tol, convex))
    return reports


def _first_min(v: np.ndarray) -> int:
    """Earliest trial within rounding of the minimum, so ties keep the fixed Dirac pair."""
    lo = float(np.min(v))
    return int(np.flatnonzero(v <= lo + 1e-12 * max(1.0, abs(lo)))[0])


# --- monotonicity of the forward-backward system ------------------------------

def check_fbsde_monotonicity(model: ModelSpec, trials: int = 200, seed: int = 0, cloud_size: int = 64,
                             condition: str = "B6") -> AssumptionReport:
    """Monotonicity of the reduced system with an estimate of its constant beta.

    Per trial, with ``F = -dx_hbar``, ``B`` and the volatilities at the
    Hamiltonian minimiser,

        D = E[dF dX + dB dY + dS dZ + dSt dZt],   Q = E|b2 dY + s2 dZ + st2 dZt|^2,

    and the running slack at ``beta`` is ``(-D - beta Q) / E|d theta|^2``. The
    terminal slack is ``E[dG dX] / E[dX^2]``. ``condition="B6"`` uses the
    clouds' own laws as measure arguments, ``"B2"`` one frozen measure for
    both sides. beta is the largest value keeping every running slack above
    ``-tol``; it is infinite when ``Q`` vanishes on every trial. Trial 0 is
    the Dirac pair ``x = 1``, ``x' = 0``.
    """
    if condition not in ("B2", "B6"):
        raise ValueError("condition must be B2 or B6")
    rng = np.random.default_rng(seed)
    c = model.costs
    run, term, beta_num, qs = (np.empty(trials) for _ in range(4))
    per_run, per_term, info = [], [], []
    for k in range(trials):
        t = rng.uniform(0, model.T)
        if k == 0:
            x, x2 = np.ones(1), np.zeros(1)
            th = [np.zeros(1) for _ in range(3)]
            th2 = [np.zeros(1) for _ in range(3)]
            th[0] = np.array([rng.normal()])
        else:
            x, x2 = gaussian_pairs(rng, cloud_size)
            th = list(gaussian_pairs(rng, cloud_size)) + [rng.normal(0, 1, cloud_size)]
            th2 = list(gaussian_pairs(rng, cloud_size)) + [rng.normal(0, 1, cloud_size)]
        (y, z, zt), (y2, z2, zt2) = th, th2
        if condition == "B6":
            m, m2 = _measure(x), _measure(x2)
        else:
            m = m2 = _measure(np.concatenate([x, x2]))
        _, _, b2, _, _, s2, _, _, c2 = model.dynamics.at(t)
        a = minimize_hamiltonian(model, t, x, y, z, zt)
        a2 = minimize_hamiltonian(model, t, x2, y2, z2, zt2)
        F = -dx_hbar(model, t, x, y, z, zt, m, a)
        F2 = -dx_hbar(model, t, x2, y2, z2, zt2, m2, a2)
        B, S, St = reduced_coefficients(model, t, x, a)
        B2, S2, St2 = reduced_coefficients(model, t, x2, a2)
        dx, dy, dz, dzt = x2 - x, y2 - y, z2 - z, zt2 - zt
        dterm = (F2 - F) * dx + (B2 - B) * dy + (S2 - S) * dz + (St2 - St) * dzt
        q = (b2 * dy + s2 * dz + c2 * dzt) ** 2
        norm = dx * dx + dy * dy + dz * dz + dzt * dzt
        run[k] = -float(np.mean(dterm)) / float(np.mean(norm))
        beta_num[k] = -float(np.mean(dterm))
        qs[k] = float(np.mean(q))
        per_run.append((-dterm, norm))
        gt = (c.dxg(x2, m2) - c.dxg(x, m)) * dx
        term[k] = float(np.mean(gt)) / float(np.mean(dx * dx))
        per_term.append((gt, dx * dx))
        info.append(dict(t=t, x=x, x_prime=x2, y=y, y_prime=y2))

    kr, kt = _first_min(run), _first_min(term)
    tol_r = 3 * _ratio_se(*per_run[kr], rng) + FP_FLOOR * max(1.0, float(np.max(np.abs(run))))
    tol_t = 3 * _ratio_se(*per_term[kt], rng) + FP_FLOOR * max(1.0, float(np.max(np.abs(term))))
    active = qs > FP_FLOOR
    if not np.any(active):
        beta = float("inf")
    else:
        # slack stays above -tol on every trial as long as beta Q <= -D + tol E|d theta|^2
        den = np.array([np.mean(n) for _, n in per_run])
        beta = float(np.min((beta_num[active] + tol_r * den[active]) / qs[active]))
    if run[kr] <= term[kt]:
        margin, tol, k, part = float(run[kr]), tol_r, kr, "running"
    else:
        margin, tol, k, part = float(term[kt]), tol_t, kt, "terminal"
    wit = _witness(trial=k, part=part, **info[k])
    passed = margin >= -tol and beta > 0
    return AssumptionReport(condition, bool(passed), margin, beta, wit, trials, seed, tol, np.minimum(run, term))


def run_all(model: ModelSpec, trials: int = 200, seed: int = 0, cloud_size: int = 64) -> list[AssumptionReport]:
    out = check_convexity_lipschitz(model, trials, seed, cloud_size)
    out.append(check_weak_monotonicity(model, trials, cloud_size, seed))
    out.append(check_ll_monotonicity(model, trials, cloud_size, seed))
    out.append(check_weak_mean_reverting(model, trials, seed))
    out.append(check_fbsde_monotonicity(model, trials, seed, cloud_size, "B2"))
    out.append(check_fbsde_monotonicity(model, trials, seed, cloud_size, "B6"))
    return out
