"""Time grids, two-layer Brownian noise, initial laws and the Euler forward pass.

Particles are indexed ``(kappa, i)``: ``kappa`` labels a common-noise path and
``i`` a particle inside it. The conditional law given the common noise is the
empirical measure of the M particles sharing a path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from . import _parallel
from ._philox import normals
from .errors import NumericError, ValidationError
from .model import ModelSpec, minimize_hamiltonian, reduced_coefficients

INDIVIDUAL, COMMON, INITIAL = 0, 1, 2
MEMORY_BUDGET = 2 * 1024**3  # bytes for one full set of particle arrays


def derive_seed(seed: int, *tags: int) -> int:
    """Independent 63-bit seed derived from ``seed`` and integer tags."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(t) for t in tags]])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_j = s + j * dt`` on ``[s, T]``.

    ``offset`` is the index of ``t_0`` on a parent grid; noise is keyed by the
    global index ``offset + j`` so sub-grids reuse the parent's increments.
    """

    s: float
    T: float
    N: int
    offset: int = 0

    def __post_init__(self):
        if not (0.0 <= self.s < self.T):
            raise ValidationError(f"grid needs 0 <= s < T, got s={self.s}, T={self.T}", ["grid"])
        if self.N < 1:
            raise ValidationError("grid needs at least one step", ["grid"])

    @property
    def dt(self) -> float:
        return (self.T - self.s) / self.N

    def t(self, j: int) -> float:
        return self.s + j * self.dt

    @property
    def times(self) -> np.ndarray:
        return self.s + np.arange(self.N + 1) * self.dt

    def subgrid(self, j0: int) -> TimeGrid:
        if not 0 <= j0 < self.N:
            raise ValueError(f"sub-grid start {j0} outside [0, {self.N})")
        return TimeGrid(self.t(j0), self.T, self.N - j0, self.offset + j0)

    def index_of(self, t: float) -> int:
        j = int(round((t - self.s) / self.dt))
        if not 0 <= j <= self.N or abs(self.t(j) - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not on the grid")
        return j


def check_budget(K: int, M: int, N: int, fields: int = 6) -> None:
    need = 8 * fields * K * M * (N + 1)
    if need > MEMORY_BUDGET:
        raise MemoryError(f"K*M*(N+1) = {K}*{M}*{N + 1} needs about {need / 2**30:.1f} GiB "
                          f"(budget {MEMORY_BUDGET / 2**30:.1f} GiB)")


class NoiseBundle:
    """Individual increments ``dW`` (K, M, N) and common increments ``dWt`` (K, N).

    Increment (kappa, i, j) is a pure function of (seed, kappa, i, offset + j);
    the common one of (common_seed, kappa, offset + j).
    """

    def __init__(self, grid: TimeGrid, K: int, M: int, seed: int, common_seed: int | None = None,
                 _arrays=None):
        self.grid, self.K, self.M = grid, K, M
        self.seed = int(seed)
        self.common_seed = int(seed if common_seed is None else common_seed)
        if _arrays is not None:
            self._dw, self._dwt = _arrays
            return
        N = grid.N
        steps = np.arange(grid.offset, grid.offset + N, dtype=np.uint32)
        kap = np.arange(K, dtype=np.uint32)
        sd = np.sqrt(grid.dt)
        self._dw = np.empty((N, K, M))
        idx = np.arange(M, dtype=np.uint32)
        for j in range(N):
            self._dw[j] = sd * normals(steps[j], idx[None, :], kap[:, None], INDIVIDUAL, self.seed)
        self._dwt = np.ascontiguousarray(sd * normals(steps[:, None], 0, kap[None, :], COMMON, self.common_seed))

    @property
    def dW(self) -> np.ndarray:
        return np.moveaxis(self._dw, 0, -1)

    @property
    def dWt(self) -> np.ndarray:
        return self._dwt.T

    def step(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        """Contiguous ``(K, M)`` individual and ``(K,)`` common increments at step j."""
        return self._dw[j], self._dwt[j]

    def restrict(self, j0: int, j1: int | None = None) -> NoiseBundle:
        """Increments on steps ``[j0, j1)`` as a bundle over the matching sub-grid."""
        j1 = self.grid.N if j1 is None else j1
        g = self.grid
        sub = TimeGrid(g.t(j0), g.t(j1) if j1 < g.N else g.T, j1 - j0, g.offset + j0)
        return NoiseBundle(sub, self.K, self.M, self.seed, self.common_seed,
                           _arrays=(self._dw[j0:j1], self._dwt[j0:j1]))

    def tile(self, reps: int, M: int | None = None) -> NoiseBundle:
        """Repeat the path axis ``reps`` times (block-major), optionally keeping the first M particles."""
        M = self.M if M is None else M
        if M > self.M:
            raise ValueError("cannot tile to more particles than generated")
        dw = np.tile(self._dw[:, :, :M], (1, reps, 1))
        return NoiseBundle(self.grid, self.K * reps, M, self.seed, self.common_seed,
                           _arrays=(dw, np.tile(self._dwt, (1, reps))))

    def paths(self, sl: slice) -> NoiseBundle:
        return NoiseBundle(self.grid, len(range(*sl.indices(self.K))), self.M, self.seed, self.common_seed,
                           _arrays=(np.ascontiguousarray(self._dw[:, sl]), np.ascontiguousarray(self._dwt[:, sl])))


def generate_noise(grid: TimeGrid, K: int, M: int, seed: int, common_seed: int | None = None) -> NoiseBundle:
    if K < 1 or M < 1:
        raise ValidationError("need K >= 1 and M >= 1", ["particles"])
    check_budget(K, M, grid.N)
    return NoiseBundle(grid, K, M, seed, common_seed)


@dataclass(frozen=True)
class InitialLaw:
    """Sampler for the initial law: ``constant``, ``gaussian`` or explicit ``samples``.

    Draws are keyed by particle index, so a larger M extends a smaller sample.
    Explicit samples are cycled when M exceeds their count.
    """

    kind: str = "constant"
    mean: float = 0.0
    var: float = 0.0
    samples: tuple = ()

    def __post_init__(self):
        if self.kind not in ("constant", "gaussian", "samples"):
            raise ValidationError(f"unknown initial law {self.kind!r}", ["xi.kind"])
        if self.kind == "gaussian" and self.var < 0:
            raise ValidationError("initial variance must be non-negative", ["xi.var"])
        if self.kind == "samples" and len(self.samples) == 0:
            raise ValidationError("explicit initial law needs samples", ["xi.samples"])

    @classmethod
    def gaussian(cls, mean: float, var: float) -> InitialLaw:
        return cls("gaussian", float(mean), float(var))

    @classmethod
    def constant(cls, x: float) -> InitialLaw:
        return cls("constant", float(x))

    @classmethod
    def from_samples(cls, values) -> InitialLaw:
        return cls("samples", samples=tuple(float(v) for v in np.ravel(values)))

    def sample(self, M: int, seed: int) -> np.ndarray:
        if self.kind == "constant":
            return np.full(M, self.mean)
        if self.kind == "gaussian":
            i = np.arange(M, dtype=np.uint32)
            return self.mean + np.sqrt(self.var) * normals(i, 0, 0, INITIAL, seed)
        v = np.asarray(self.samples)
        return v[np.arange(M) % v.size]

    @property
    def rms(self) -> float:
        if self.kind == "samples":
            return float(np.sqrt(np.mean(np.square(self.samples))))
        return float(np.sqrt(self.mean**2 + self.var))


def initial_states(xi, K: int, M: int, seed: int) -> np.ndarray:
    """Broadcast an initial-law description to a ``(K, M)`` array.

    ``xi`` may be a number, an :class:`InitialLaw` (same draw on every path),
    an ``(M,)`` array, or a ``(K, M)`` array.
    """
    if isinstance(xi, InitialLaw):
        x0 = xi.sample(M, seed)
    elif np.isscalar(xi):
        x0 = np.full(M, float(xi))
    else:
        x0 = np.asarray(xi, dtype=float)
    if x0.shape == (M,):
        x0 = np.broadcast_to(x0, (K, M))
    if x0.shape != (K, M):
        raise ValidationError(f"initial states of shape {x0.shape} do not fit (K, M) = ({K}, {M})", ["xi"])
    if not np.all(np.isfinite(x0)):
        raise ValidationError("initial states must be finite", ["xi"])
    return np.array(x0, dtype=float)


_FIELDS = ("X", "Y", "Z", "Zt", "alpha")


@dataclass
class ParticleStates:
    """Solution arrays indexed ``[kappa, i, j]``.

    Storage is time-major so that each step is a contiguous ``(K, M)`` block;
    the public attributes are ``(K, M, N + 1)`` views of it.
    """

    grid: TimeGrid
    buffers: dict = field(repr=False)
    populated: dict = field(default_factory=lambda: {f: False for f in _FIELDS})

    @classmethod
    def empty(cls, grid: TimeGrid, K: int, M: int) -> ParticleStates:
        check_budget(K, M, grid.N)
        return cls(grid, {f: np.zeros((grid.N + 1, K, M)) for f in _FIELDS})

    def step(self, name: str, j: int) -> np.ndarray:
        return self.buffers[name][j]

    def __getattr__(self, name):
        if name in _FIELDS:
            return np.moveaxis(self.buffers[name], 0, -1)
        raise AttributeError(name)

    @property
    def K(self) -> int:
        return self.buffers["X"].shape[1]

    @property
    def M(self) -> int:
        return self.buffers["X"].shape[2]

    def copy(self) -> ParticleStates:
        return ParticleStates(self.grid, {k: v.copy() for k, v in self.buffers.items()}, dict(self.populated))


class Policy(Protocol):
    def evaluate_step(self, j: int, x: np.ndarray, rows: slice = slice(None)) -> tuple: ...


def euler_step(model: ModelSpec, t: float, dt: float, x, alpha, dw, dwt):
    b, s, c = reduced_coefficients(model, t, x, alpha)
    return x + b * dt + s * dw + c * dwt


def forward_euler(model: ModelSpec, policy: Policy, grid: TimeGrid, noise: NoiseBundle, xi,
                  states: ParticleStates | None = None, threads: int | None = None) -> ParticleStates:
    """Euler-Maruyama forward pass under the feedback control of ``policy``.

    The control is the Hamiltonian minimiser at the policy values; it does not
    involve the measure, and neither do the state coefficients, so the step
    needs no conditional law.
    """
    K, M = noise.K, noise.M
    if states is None:
        states = ParticleStates.empty(grid, K, M)
    X, A = states.buffers["X"], states.buffers["alpha"]
    X[0] = initial_states(xi, K, M, noise.seed)
    dt = grid.dt

    def run(sl):
        for j in range(grid.N + 1):
            x = X[j, sl]
            y, z, zt = policy.evaluate_step(j, x, sl)
            a = minimize_hamiltonian(model, grid.t(j), x, y, z, zt)
            A[j, sl] = a
            if j == grid.N:
                break
            dw, dwt = noise.step(j)
            with np.errstate(over="ignore", invalid="ignore"):  # reported below
                nxt = euler_step(model, grid.t(j), dt, x, a, dw[sl], dwt[sl, None])
            if not np.all(np.isfinite(nxt)):
                k, i = np.argwhere(~np.isfinite(nxt))[0]
                raise NumericError(f"non-finite state at kappa={k + (sl.start or 0)}, i={i}, j={j + 1}")
            X[j + 1, sl] = nxt

    _parallel.run_chunks(run, K, threads)
    states.populated["X"] = states.populated["alpha"] = True
    return states


class ZeroPolicy:
    """Feedback returning Y = Z = Zt = 0 everywhere."""

    def evaluate_step(self, j, x, rows=slice(None)):
        z = np.zeros_like(x)
        return z, z, z
