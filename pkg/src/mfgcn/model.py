"""Linear-convex mean-field game models.

State dynamics are linear and measure independent::

    phi(t, x, a) = phi0(t) + phi1(t) x + phi2(t) a      for phi in b, sigma, tsigma

and the running cost separates as ``f(t, x, m, a) = f0(t, x, a) + f1(t, x, m)``.
Measure arguments are duck-typed: anything exposing ``mean`` and
``second_moment`` works, so the same callbacks serve a single
:class:`~mfgcn.measure.EmpiricalMeasure1D` and a per-path
:class:`~mfgcn.measure.MeasureBatch`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .errors import NumericError, ValidationError

Array = Any  # float or ndarray


class Coefficient:
    """Bounded scalar function of time: constant, piecewise-constant table, or callback."""

    def __init__(self, value: float | Callable[[float], float] = 0.0,
                 breaks: list[float] | None = None, values: list[float] | None = None):
        self._fn = None
        self._const = None
        self._breaks = None
        if breaks is not None:
            if values is None or len(values) != len(breaks):
                raise ValidationError("breakpoint table needs one value per break")
            b = np.asarray(breaks, dtype=float)
            if np.any(np.diff(b) <= 0):
                raise ValidationError("breakpoints must be strictly increasing")
            self._breaks = b
            self._values = np.asarray(values, dtype=float)
        elif callable(value):
            self._fn = value
        else:
            self._const = float(value)

    @classmethod
    def from_json(cls, obj) -> Coefficient:
        if isinstance(obj, (int, float)):
            return cls(float(obj))
        if isinstance(obj, dict) and "breaks" in obj:
            return cls(breaks=obj["breaks"], values=obj["values"])
        raise ValidationError(f"cannot read coefficient from {obj!r}")

    def __call__(self, t: float) -> float:
        if self._const is not None:
            return self._const
        if self._breaks is not None:
            k = int(np.searchsorted(self._breaks, t, side="right")) - 1
            return float(self._values[max(k, 0)])
        return float(self._fn(t))

    @property
    def is_constant(self) -> bool:
        return self._const is not None

    @property
    def is_zero(self) -> bool:
        if self._const is not None:
            return self._const == 0.0
        if self._breaks is not None:
            return bool(np.all(self._values == 0.0))
        return False

    def sup(self, T: float, n: int = 257) -> float:
        if self._const is not None:
            return abs(self._const)
        if self._breaks is not None:
            return float(np.max(np.abs(self._values)))
        return max(abs(self(t)) for t in np.linspace(0.0, T, n))

    def scaled(self, c: float) -> Coefficient:
        if self._const is not None:
            return Coefficient(c * self._const)
        if self._breaks is not None:
            return Coefficient(breaks=list(self._breaks), values=list(c * self._values))
        fn = self._fn
        return Coefficient(lambda t: c * fn(t))

    def to_json(self):
        if self._const is not None:
            return self._const
        if self._breaks is not None:
            return {"breaks": self._breaks.tolist(), "values": self._values.tolist()}
        raise ValidationError("callback coefficients are not serialisable")


_COEF_NAMES = ("b0", "b1", "b2", "sigma0", "sigma1", "sigma2", "tsigma0", "tsigma1", "tsigma2")


def _coef(v=0.0) -> Coefficient:
    return v if isinstance(v, Coefficient) else Coefficient(v)


@dataclass(frozen=True)
class LinearStateSpec:
    b0: Coefficient = field(default_factory=Coefficient)
    b1: Coefficient = field(default_factory=Coefficient)
    b2: Coefficient = field(default_factory=Coefficient)
    sigma0: Coefficient = field(default_factory=Coefficient)
    sigma1: Coefficient = field(default_factory=Coefficient)
    sigma2: Coefficient = field(default_factory=Coefficient)
    tsigma0: Coefficient = field(default_factory=Coefficient)
    tsigma1: Coefficient = field(default_factory=Coefficient)
    tsigma2: Coefficient = field(default_factory=Coefficient)
    state_dim: int = 1
    control_dim: int = 1

    def __post_init__(self):
        for name in _COEF_NAMES:
            object.__setattr__(self, name, _coef(getattr(self, name)))

    @classmethod
    def constant(cls, **kw) -> LinearStateSpec:
        return cls(**{k: Coefficient(v) for k, v in kw.items()})

    def at(self, t: float) -> tuple[float, ...]:
        return tuple(getattr(self, n)(t) for n in _COEF_NAMES)

    def bound(self, T: float) -> float:
        return max(getattr(self, n).sup(T) for n in _COEF_NAMES)

    @property
    def has_common_noise(self) -> bool:
        return not (self.tsigma0.is_zero and self.tsigma1.is_zero and self.tsigma2.is_zero)

    def scaled(self, c: float) -> LinearStateSpec:
        return LinearStateSpec(**{n: getattr(self, n).scaled(c) for n in _COEF_NAMES})

    def to_json(self) -> dict:
        return {n: getattr(self, n).to_json() for n in _COEF_NAMES}


@dataclass(frozen=True)
class CostSpec:
    """Separable convex costs with their gradients.

    ``alpha_slope`` is set when ``daf0`` is affine in the control with that
    slope; the Hamiltonian minimiser then has a closed form. ``daaf0`` is the
    optional second control derivative used by the Newton fallback.
    """

    f0: Callable
    f1: Callable
    g: Callable
    dxf0: Callable
    daf0: Callable
    dxf1: Callable
    dxg: Callable
    c_f: float
    alpha_slope: float | None = None
    daaf0: Callable | None = None
    measure_dependent: bool = True
    description: str = "custom"

    def __post_init__(self):
        if not self.c_f > 0:
            raise ValidationError("strict convexity margin c_f must be positive", ["c_f"])

    def f(self, t, x, m, a):
        return self.f0(t, x, a) + self.f1(t, x, m)

    def dxf(self, t, x, m, a):
        return self.dxf0(t, x, a) + self.dxf1(t, x, m)


@dataclass(frozen=True)
class ModelSpec:
    dynamics: LinearStateSpec
    costs: CostSpec
    T: float = 1.0
    K: float = 10.0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.T > 0:
            raise ValidationError("horizon T must be positive", ["horizon.T"])
        if not self.K > 0:
            raise ValidationError("Lipschitz constant K must be positive", ["lipschitz.K"])

    @property
    def coupled(self) -> bool:
        return self.costs.measure_dependent

    def with_dynamics(self, dynamics: LinearStateSpec) -> ModelSpec:
        return ModelSpec(dynamics, self.costs, self.T, self.K, dict(self.meta))


# --- Hamiltonian -------------------------------------------------------------

def hamiltonian(model: ModelSpec, t, a, x, y, z, zt, m):
    b0, b1, b2, s0, s1, s2, c0, c1, c2 = model.dynamics.at(t)
    return ((b0 + b1 * x + b2 * a) * y + (s0 + s1 * x + s2 * a) * z
            + (c0 + c1 * x + c2 * a) * zt + model.costs.f(t, x, m, a))


def minimize_hamiltonian(model: ModelSpec, t, x, y, z, zt):
    """Unique minimiser of the Hamiltonian in the control.

    Solves ``b2 y + sigma2 z + tsigma2 zt + daf0(t, x, a) = 0``. The measure
    never enters: the state coefficients do not depend on it and the cost
    separates.
    """
    _, _, b2, _, _, s2, _, _, c2 = model.dynamics.at(t)
    costs = model.costs
    r = b2 * np.asarray(y, dtype=float) + s2 * np.asarray(z, dtype=float) + c2 * np.asarray(zt, dtype=float)
    x = np.asarray(x, dtype=float)
    r, x = np.broadcast_arrays(r, x)
    if costs.alpha_slope is not None:
        out = -(r + costs.daf0(t, x, np.zeros_like(x))) / costs.alpha_slope
        return out if out.ndim else float(out)
    return _newton_root(costs, t, x, r)


def _newton_root(costs: CostSpec, t, x, r, tol=1e-12, max_iter=100):
    def h(a):
        return costs.daf0(t, x, a) + r

    h0 = np.asarray(h(np.zeros_like(x)), dtype=float)
    # slope >= 2 c_f puts the root within |h(0)| / (2 c_f) of zero
    width = np.abs(h0) / (2.0 * costs.c_f)
    lo, hi = -width, width.copy()
    a = np.zeros_like(h0)
    for _ in range(max_iter):
        ha = np.asarray(h(a), dtype=float)
        if costs.daaf0 is not None:
            dh = np.asarray(costs.daaf0(t, x, a), dtype=float)
        else:
            eps = 1e-6 * (1.0 + np.abs(a))
            dh = (np.asarray(h(a + eps)) - np.asarray(h(a - eps))) / (2 * eps)
        lo = np.where(ha < 0, a, lo)
        hi = np.where(ha > 0, a, hi)
        step = np.where(dh > 0, ha / np.where(dh > 0, dh, 1.0), np.inf)
        cand = a - step
        bad = ~np.isfinite(cand) | (cand < lo) | (cand > hi)
        new = np.where(bad, 0.5 * (lo + hi), cand)
        done = np.abs(new - a) <= tol * (1.0 + np.abs(a))
        a = new
        if np.all(done):
            # a collapsed bracket without a sign change means there is no root
            if np.any(np.abs(np.asarray(h(a), dtype=float)) > 1e-6 * (1.0 + np.abs(h0))):
                break
            return a if a.ndim else float(a)
    raise NumericError("Hamiltonian minimiser found no root within 100 Newton steps; "
                       "is the cost strictly convex in the control?")


def dx_hbar(model: ModelSpec, t, x, y, z, zt, m, alpha=None):
    """x-derivative of the minimised Hamiltonian (the adjoint driver)."""
    _, b1, _, _, s1, _, _, c1, _ = model.dynamics.at(t)
    if alpha is None:
        alpha = minimize_hamiltonian(model, t, x, y, z, zt)
    return b1 * y + s1 * z + c1 * zt + model.costs.dxf1(t, x, m) + model.costs.dxf0(t, x, alpha)


def reduced_coefficients(model: ModelSpec, t, x, alpha):
    """Drift, idiosyncratic and common volatility under control ``alpha``."""
    b0, b1, b2, s0, s1, s2, c0, c1, c2 = model.dynamics.at(t)
    return b0 + b1 * x + b2 * alpha, s0 + s1 * x + s2 * alpha, c0 + c1 * x + c2 * alpha


# --- constructors -------------------------------------------------------------

def _mbar(m):
    return m.mean


def lq_costs(q: float, qbar: float, s: float, qT: float, qbarT: float, sT: float,
             check: bool = True) -> CostSpec:
    """Costs ``f = (q x^2 + a^2 + qbar (x - s mbar)^2) / 2`` and
    ``g = (qT x^2 + qbarT (x - sT mbar)^2) / 2``."""
    if check:
        validate_lq(q, qbar, s, qT, qbarT, sT)
    return CostSpec(
        f0=lambda t, x, a: 0.5 * (q * x * x + a * a),
        f1=lambda t, x, m: 0.5 * qbar * (x - s * _mbar(m)) ** 2,
        g=lambda x, m: 0.5 * (qT * x * x + qbarT * (x - sT * _mbar(m)) ** 2),
        dxf0=lambda t, x, a: q * x + 0.0 * a,
        daf0=lambda t, x, a: a + 0.0 * x,
        dxf1=lambda t, x, m: qbar * (x - s * _mbar(m)),
        dxg=lambda x, m: qT * x + qbarT * (x - sT * _mbar(m)),
        c_f=0.5,
        alpha_slope=1.0,
        daaf0=lambda t, x, a: np.ones_like(np.asarray(a, dtype=float)),
        measure_dependent=(qbar * s != 0.0 or qbarT * sT != 0.0),
        description="lq",
    )


def validate_lq(q, qbar, s, qT, qbarT, sT) -> None:
    bad = []
    if q + qbar - qbar * s < 0:
        bad.append("q+qbar-qbar*s >= 0")
    if qT + qbarT - qbarT * sT < 0:
        bad.append("qT+qbarT-qbarT*sT >= 0")
    if bad:
        raise ValidationError("LQ constraint violated: " + "; ".join(bad),
                              ["costs.q", "costs.qbar", "costs.s"] if "q+" in bad[0] else ["costs.qT", "costs.qbarT", "costs.sT"])


def lq_model(q=1.0, qbar=0.5, s=0.8, qT=1.0, qbarT=0.5, sT=0.8, b0=0.0, b1=0.1, b2=1.0,
             sigma=0.3, tsigma=0.2, T=1.0, K: float | None = None) -> ModelSpec:
    dyn = LinearStateSpec.constant(b0=b0, b1=b1, b2=b2, sigma0=sigma, tsigma0=tsigma)
    costs = lq_costs(q, qbar, s, qT, qbarT, sT)
    if K is None:
        K = max(1.0, dyn.bound(T), abs(q) + abs(qbar) * (1 + abs(s)),
                abs(qT) + abs(qbarT) * (1 + abs(sT)), 1.0 / costs.c_f)
    meta = {"kind": "lq", "q": q, "qbar": qbar, "s": s, "qT": qT, "qbarT": qbarT, "sT": sT}
    return ModelSpec(dyn, costs, T=T, K=float(K), meta=meta)


def e1_costs(A: float = 0.5, B: float = 1.0, C: float = 1.0, form: str = "mean") -> CostSpec:
    """The two mean-field cost families ``A a^2 + B (x - mbar)^2`` /
    ``A a^2 + B int (x - z)^2 dm(z)`` (and the same shape for g)."""
    if form == "mean":
        f1 = lambda t, x, m: B * (x - _mbar(m)) ** 2
        g = lambda x, m: C * (x - _mbar(m)) ** 2
    elif form == "integral":
        f1 = lambda t, x, m: B * (x * x - 2 * x * _mbar(m) + m.second_moment)
        g = lambda x, m: C * (x * x - 2 * x * _mbar(m) + m.second_moment)
    else:
        raise ValidationError(f"unknown e1 form {form!r}")
    return CostSpec(
        f0=lambda t, x, a: A * a * a + 0.0 * x,
        f1=f1,
        g=g,
        dxf0=lambda t, x, a: 0.0 * x + 0.0 * a,
        daf0=lambda t, x, a: 2 * A * a + 0.0 * x,
        dxf1=lambda t, x, m: 2 * B * (x - _mbar(m)),
        dxg=lambda x, m: 2 * C * (x - _mbar(m)),
        c_f=A,
        alpha_slope=2 * A,
        daaf0=lambda t, x, a: 2 * A * np.ones_like(np.asarray(a, dtype=float)),
        description=f"e1-{form}",
    )


def zero_costs() -> CostSpec:
    """f0 = a^2 / 2, everything else zero."""
    return CostSpec(
        f0=lambda t, x, a: 0.5 * a * a + 0.0 * x,
        f1=lambda t, x, m: 0.0 * x,
        g=lambda x, m: 0.0 * x,
        dxf0=lambda t, x, a: 0.0 * x + 0.0 * a,
        daf0=lambda t, x, a: a + 0.0 * x,
        dxf1=lambda t, x, m: 0.0 * x,
        dxg=lambda x, m: 0.0 * x,
        c_f=0.5,
        alpha_slope=1.0,
        measure_dependent=False,
        description="zero",
    )


_SYMBOLS = ("t", "x", "a", "mbar", "m2")


def expression_costs(f0: str, f1: str = "0", g: str = "0", c_f: float | None = None) -> CostSpec:
    """Costs from expression strings in ``t, x, a, mbar, m2``.

    Gradients are derived symbolically. ``mbar`` and ``m2`` stand for the mean
    and second moment of the measure argument.
    """
    import sympy as sp

    syms = {name: sp.Symbol(name, real=True) for name in _SYMBOLS}
    t, x, a, mbar, m2 = (syms[n] for n in _SYMBOLS)
    bad = []
    exprs = {}
    for key, src, allowed in (("f0", f0, {t, x, a}), ("f1", f1, {t, x, mbar, m2}), ("g", g, {x, mbar, m2})):
        try:
            e = sp.sympify(src, locals=syms)
        except (sp.SympifyError, SyntaxError, TypeError) as exc:
            raise ValidationError(f"cannot parse costs.{key}: {exc}", [f"costs.{key}"]) from exc
        if not e.free_symbols <= allowed:
            bad.append(f"costs.{key}")
        exprs[key] = e
    if bad:
        raise ValidationError("expressions use variables outside their signature: " + ", ".join(bad), bad)

    def with_m(expr, has_t):
        args = (t, x, mbar, m2) if has_t else (x, mbar, m2)
        fn = sp.lambdify(args, expr, modules="numpy")
        if has_t:
            return lambda tt, xx, m: np.asarray(fn(tt, xx, m.mean, m.second_moment), dtype=float) + 0.0 * np.asarray(xx)
        return lambda xx, m: np.asarray(fn(xx, m.mean, m.second_moment), dtype=float) + 0.0 * np.asarray(xx)

    def f0_like(expr):
        fn = sp.lambdify((t, x, a), expr, modules="numpy")
        return lambda tt, xx, aa: np.asarray(fn(tt, xx, aa), dtype=float) + 0.0 * np.asarray(xx) + 0.0 * np.asarray(aa)

    daf0 = sp.diff(exprs["f0"], a)
    daaf0 = sp.diff(daf0, a)
    slope = None
    if sp.diff(daaf0, a) == 0 and daaf0.free_symbols == set():
        slope = float(daaf0)
    if c_f is None:
        if slope is None:
            raise ValidationError("c_f required for costs not quadratic in the control", ["costs.c_f"])
        c_f = slope / 2.0
    md = bool((exprs["f1"].free_symbols | exprs["g"].free_symbols) & {mbar, m2})
    return CostSpec(
        f0=f0_like(exprs["f0"]),
        f1=with_m(exprs["f1"], True),
        g=with_m(exprs["g"], False),
        dxf0=f0_like(sp.diff(exprs["f0"], x)),
        daf0=f0_like(daf0),
        dxf1=with_m(sp.diff(exprs["f1"], x), True),
        dxg=with_m(sp.diff(exprs["g"], x), False),
        c_f=float(c_f),
        alpha_slope=slope,
        daaf0=f0_like(daaf0),
        measure_dependent=md,
        description="custom",
    )


def zero_model(T: float = 1.0) -> ModelSpec:
    return ModelSpec(LinearStateSpec(), zero_costs(), T=T, K=1.0, meta={"kind": "zero"})


def gradient_check(model: ModelSpec, n: int = 64, seed: int = 0) -> dict[str, float]:
    """Worst relative error of each declared gradient against central differences."""
    from .measure import EmpiricalMeasure1D

    rng = np.random.default_rng(seed)
    c = model.costs
    worst = {"dxf0": 0.0, "daf0": 0.0, "dxf1": 0.0, "dxg": 0.0}

    def rel(an, fd):
        return float(np.max(np.abs(an - fd) / np.maximum(1.0, np.maximum(np.abs(an), np.abs(fd)))))

    for _ in range(n):
        t = rng.uniform(0, model.T)
        x, a = rng.normal(0, 2, size=2)
        m = EmpiricalMeasure1D.from_samples(rng.normal(rng.normal(), 1.0 + rng.uniform(), size=16))
        hx = 1e-5 * (1 + abs(x))
        ha = 1e-5 * (1 + abs(a))
        worst["dxf0"] = max(worst["dxf0"], rel(c.dxf0(t, x, a), (c.f0(t, x + hx, a) - c.f0(t, x - hx, a)) / (2 * hx)))
        worst["daf0"] = max(worst["daf0"], rel(c.daf0(t, x, a), (c.f0(t, x, a + ha) - c.f0(t, x, a - ha)) / (2 * ha)))
        worst["dxf1"] = max(worst["dxf1"], rel(c.dxf1(t, x, m), (c.f1(t, x + hx, m) - c.f1(t, x - hx, m)) / (2 * hx)))
        worst["dxg"] = max(worst["dxg"], rel(c.dxg(x, m), (c.g(x + hx, m) - c.g(x - hx, m)) / (2 * hx)))
    return worst


def scaled_model(model: ModelSpec, c: float) -> ModelSpec:
    """Same costs, state coefficients multiplied by ``c`` (Lipschitz stress)."""
    return ModelSpec(model.dynamics.scaled(c), model.costs, model.T, model.K * abs(c), dict(model.meta))


__all__ = [
    "Coefficient", "LinearStateSpec", "CostSpec", "ModelSpec",
    "hamiltonian", "minimize_hamiltonian", "dx_hbar", "reduced_coefficients",
    "lq_costs", "lq_model", "validate_lq", "e1_costs", "zero_costs", "zero_model",
    "expression_costs", "gradient_check", "scaled_model",
]
