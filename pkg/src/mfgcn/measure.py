"""Empirical probability measures on the real line.

Conditional laws are represented as uniform-weight sorted sample clouds. In one
dimension the quadratic Wasserstein distance between two such clouds is exact:
the optimal coupling is the monotone (quantile) coupling.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .simulate import ParticleStates


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure1D:
    """Uniform-weight sample cloud, values sorted ascending."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or v.size == 0:
            raise ValueError("empirical measure needs a non-empty 1-D sample")
        if not np.all(np.isfinite(v)):
            raise ValueError("empirical measure values must be finite")
        if np.any(np.diff(v) < 0):
            v = np.sort(v, kind="stable")
        object.__setattr__(self, "values", _frozen(np.array(v)))

    @classmethod
    def from_samples(cls, samples) -> EmpiricalMeasure1D:
        return cls(np.sort(np.asarray(samples, dtype=float).ravel(), kind="stable"))

    @classmethod
    def dirac(cls, x: float, n: int = 1) -> EmpiricalMeasure1D:
        return cls(np.full(n, float(x)))

    @property
    def n(self) -> int:
        return self.values.size

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def second_moment(self) -> float:
        return second_moment(self)

    @property
    def variance(self) -> float:
        return float(np.var(self.values))

    @property
    def std(self) -> float:
        return float(np.std(self.values))

    def shift(self, c: float) -> EmpiricalMeasure1D:
        return EmpiricalMeasure1D(self.values + c)

    def scale(self, lam: float) -> EmpiricalMeasure1D:
        return EmpiricalMeasure1D.from_samples(self.values * lam)

    def __len__(self) -> int:
        return self.n

    def __repr__(self) -> str:
        return f"EmpiricalMeasure1D(n={self.n}, mean={self.mean:.6g}, std={self.std:.6g})"


@dataclass(frozen=True, eq=False)
class JointCloud:
    """Paired (X, Y) sample cloud; compared marginal by marginal."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self) -> None:
        if np.shape(self.x) != np.shape(self.y) or np.size(self.x) == 0:
            raise ValueError("joint cloud needs paired non-empty samples")

    @property
    def x_marginal(self) -> EmpiricalMeasure1D:
        return EmpiricalMeasure1D.from_samples(self.x)

    @property
    def y_marginal(self) -> EmpiricalMeasure1D:
        return EmpiricalMeasure1D.from_samples(self.y)


def second_moment(m: EmpiricalMeasure1D) -> float:
    v = m.values
    return float(np.mean(v * v))


def w2(a: EmpiricalMeasure1D, b: EmpiricalMeasure1D) -> float:
    """Quadratic Wasserstein distance between two empirical measures.

    Equal sizes use the sorted pairing directly. For unequal sizes both
    quantile functions are piecewise constant; the integral of their squared
    difference is computed exactly on the merged breakpoints
    ``{i * nb} U {k * na}`` (in units of ``1 / (na * nb)``).
    """
    if a.n == 0 or b.n == 0:
        raise ValueError("w2 of an empty measure")
    va, vb = a.values, b.values
    na, nb = va.size, vb.size
    if na == nb:
        d = va - vb
        return float(np.sqrt(np.mean(d * d)))
    total = na * nb
    cuts = np.union1d(np.arange(na + 1) * nb, np.arange(nb + 1) * na)
    left = cuts[:-1]
    widths = np.diff(cuts)
    ia = left // nb
    ib = left // na
    d = va[ia] - vb[ib]
    return float(np.sqrt(np.sum(widths * d * d) / total))


def w2_sorted_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise W2 between equal-size clouds stored along the last axis."""
    d = np.sort(a, axis=-1) - np.sort(b, axis=-1)
    return np.sqrt(np.mean(d * d, axis=-1))


def joint_w2(a: JointCloud, b: JointCloud) -> float:
    """Marginal-sum surrogate for the joint (X, Y) distance."""
    return w2(a.x_marginal, b.x_marginal) + w2(a.y_marginal, b.y_marginal)


class MeasureBatch:
    """One empirical measure per common path, all of the same size.

    Exposes ``mean`` and ``second_moment`` with shape ``(K, 1)`` so that cost
    callbacks written against a single :class:`EmpiricalMeasure1D` broadcast
    unchanged over particle arrays of shape ``(K, M)``.
    """

    def __init__(self, values: np.ndarray, presorted: bool = False):
        v = np.asarray(values, dtype=float)
        if v.ndim != 2 or v.shape[1] == 0:
            raise ValueError("measure batch needs a (K, M) array")
        self._values = v if presorted else np.sort(v, axis=1)
        self._make = None
        self.mean = np.mean(self._values, axis=1, keepdims=True)
        self.second_moment = np.mean(self._values * self._values, axis=1, keepdims=True)

    @classmethod
    def lazy(cls, make_values, mean: np.ndarray, second_moment: np.ndarray) -> MeasureBatch:
        """Batch with known moments whose sorted values are built on first access."""
        b = cls.__new__(cls)
        b._values, b._make = None, make_values
        b.mean, b.second_moment = mean, second_moment
        return b

    @property
    def values(self) -> np.ndarray:
        if self._values is None:
            self._values = self._make()
        return self._values

    @property
    def K(self) -> int:
        return self.mean.shape[0]

    @property
    def variance(self) -> np.ndarray:
        return self.second_moment - self.mean**2

    def __getitem__(self, kappa) -> EmpiricalMeasure1D | MeasureBatch:
        if isinstance(kappa, slice):
            if self._values is None:
                return MeasureBatch.lazy(lambda: self.values[kappa], self.mean[kappa], self.second_moment[kappa])
            return MeasureBatch(self._values[kappa], presorted=True)
        return EmpiricalMeasure1D(self.values[kappa])

    def __len__(self) -> int:
        return self.K


class MeasureFlow:
    """Conditional X-marginals per common path and time step.

    ``values`` has shape ``(K, M, N + 1)``; each ``(kappa, :, j)`` slice is the
    sample of the law of X at step j given common path kappa. The joint (X, Y)
    cloud is kept alongside when available.
    """

    def __init__(self, x: np.ndarray, y: np.ndarray | None = None):
        x = np.asarray(x, dtype=float)
        if x.ndim != 3:
            raise ValueError("measure flow needs a (K, M, N+1) array")
        # time-major sorted copy: per-step slices are contiguous
        self._sorted = np.ascontiguousarray(np.sort(np.moveaxis(x, -1, 0), axis=-1))
        self._y = None if y is None else np.ascontiguousarray(np.moveaxis(np.asarray(y, dtype=float), -1, 0))
        self._x = None if y is None else np.ascontiguousarray(np.moveaxis(x, -1, 0))
        self.mean = np.mean(self._sorted, axis=-1).T
        self.second_moment = np.mean(self._sorted**2, axis=-1).T

    @property
    def K(self) -> int:
        return self._sorted.shape[1]

    @property
    def M(self) -> int:
        return self._sorted.shape[2]

    @property
    def N(self) -> int:
        return self._sorted.shape[0] - 1

    def at(self, kappa: int, j: int) -> EmpiricalMeasure1D:
        self._check(kappa, j)
        return EmpiricalMeasure1D(self._sorted[j, kappa])

    def joint(self, kappa: int, j: int) -> JointCloud:
        if self._y is None:
            raise ValueError("flow carries no Y samples")
        self._check(kappa, j)
        return JointCloud(self._x[j, kappa], self._y[j, kappa])

    def batch(self, j: int) -> MeasureBatch:
        if not 0 <= j <= self.N:
            raise IndexError(f"step {j} outside [0, {self.N}]")
        return MeasureBatch.lazy(lambda: self._sorted[j], self.mean[:, j:j + 1], self.second_moment[:, j:j + 1])

    @classmethod
    def from_sorted(cls, sorted_tm: np.ndarray) -> MeasureFlow:
        """Wrap already sorted time-major ``(N + 1, K, M)`` clouds."""
        flow = cls.__new__(cls)
        flow._sorted = np.ascontiguousarray(sorted_tm)
        flow._x = flow._y = None
        flow.mean = np.mean(flow._sorted, axis=-1).T
        flow.second_moment = np.mean(flow._sorted**2, axis=-1).T
        return flow

    def tile(self, reps: int) -> TiledFlow:
        """Repeat the path axis ``reps`` times (block-major) without copying the clouds."""
        return TiledFlow(self, reps)

    def paths(self, idx) -> MeasureFlow:
        return MeasureFlow.from_sorted(self._sorted[:, idx])

    def steps(self, j0: int) -> MeasureFlow:
        return MeasureFlow.from_sorted(self._sorted[j0:])

    def sorted_values(self) -> np.ndarray:
        """Sorted clouds as a read-only ``(N + 1, K, M)`` view."""
        v = self._sorted.view()
        v.setflags(write=False)
        return v

    def distance(self, other: MeasureFlow) -> np.ndarray:
        """W2 per (kappa, j) between two flows of identical shape."""
        if self._sorted.shape != other._sorted.shape:
            raise ValueError("flows differ in shape")
        d = self._sorted - other._sorted
        return np.sqrt(np.mean(d * d, axis=-1)).T

    def _check(self, kappa: int, j: int) -> None:
        if not 0 <= kappa < self.K:
            raise IndexError(f"common path {kappa} outside [0, {self.K})")
        if not 0 <= j <= self.N:
            raise IndexError(f"step {j} outside [0, {self.N}]")


class TiledFlow:
    """Read-only view of a flow whose paths are repeated ``reps`` times."""

    def __init__(self, base: MeasureFlow, reps: int):
        self.base, self.reps = base, reps
        self.mean = np.tile(base.mean, (reps, 1))
        self.second_moment = np.tile(base.second_moment, (reps, 1))

    @property
    def K(self) -> int:
        return self.base.K * self.reps

    @property
    def N(self) -> int:
        return self.base.N

    def batch(self, j: int) -> MeasureBatch:
        base = self.base.sorted_values()
        return MeasureBatch.lazy(lambda: np.tile(base[j], (self.reps, 1)),
                                 self.mean[:, j:j + 1], self.second_moment[:, j:j + 1])

    def at(self, kappa: int, j: int) -> EmpiricalMeasure1D:
        return self.base.at(kappa % self.base.K, j)


def conditional_empirical(states: ParticleStates, kappa: int, j: int, field: str = "X"):
    """Within-path empirical law of the particles at step j.

    ``field="X"`` gives the X-marginal; ``field="XY"`` the paired cloud.
    """
    K, M, n1 = states.X.shape
    if not 0 <= kappa < K:
        raise IndexError(f"common path {kappa} outside [0, {K})")
    if not 0 <= j < n1:
        raise IndexError(f"step {j} outside [0, {n1 - 1}]")
    if field == "X":
        return EmpiricalMeasure1D.from_samples(states.X[kappa, :, j])
    if field == "XY":
        if not states.populated.get("Y", False):
            raise ValueError("Y not populated")
        return JointCloud(np.array(states.X[kappa, :, j]), np.array(states.Y[kappa, :, j]))
    raise ValueError(f"unknown field {field!r}")
