"""
Weighted operators and the dual functional.

The dual variable is V = Q^{1/p'} |U|^{p-2} U.  It solves

    |V|^{p'-2} V = R[V],      [R V]_k = Q^{1/p} R_k[Q^{1/p} v_k],

which is the Euler-Lagrange equation of

    J(V) = (1/p') ∫∫ |V|^{p'} - (1/2) ∫∫ V R[V].

The wave field is recovered as U = sum_k e^{i w_k t} R_k[Q^{1/p} v_k].

Pointwise nonlinearities are evaluated on the collocation time samples of
the symmetry class (see ``collocation_samples``), which are in one-to-one
correspondence with the stored modes; ``<V, R V>`` is evaluated modally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numpy.typing import NDArray

from .resolvent import (
    ExponentWindow,
    OperatorSpec,
    ResolventParams,
    admissible_exponents,
    apply_multiplier,
    check_mode_set,
    multiplier,
    power_norm_estimate,
)
from .spectral_domain import (
    TWO_PI,
    SpaceGrid,
    TimeField,
    analyze,
    collocation_samples,
    mode_set,
    oversampled_samples,
    project_symmetry,
    sample_times,
    spacetime_lp,
    synthesize,
    symmetrize_samples,
    time_norm,
)


class PotentialError(ValueError):
    pass


class NehariError(ValueError):
    """Field is not in the positive cone ``<V, R V> > 0``."""


def dual_exponent(p: float) -> float:
    return p / (p - 1.0)


def signed_power(x: NDArray, r: float) -> NDArray:
    """``|x|^{r-2} x`` with the convention 0 -> 0 (valid for r > 1)."""
    return np.sign(x) * np.abs(x) ** (r - 1.0)


@dataclass(frozen=True)
class ProblemParams:
    N: int = 2
    p: float = 3.0
    q: float = 8.0
    s: int = 3
    T: float = TWO_PI
    K: int = 7
    L: float = 16.0
    n: int = 128
    epsilon: float = 1e-3

    def __post_init__(self):
        if not self.p > 2:
            raise ValueError(f"nonlinearity exponent must satisfy p > 2, got p = {self.p}")
        if self.N not in (2, 3):
            raise ValueError(f"dimension must be 2 or 3, got {self.N}")
        if self.s not in (1, 2, 3, 4, 5):
            raise ValueError(f"symmetry class must be in 1..5, got {self.s}")
        if self.K < 0:
            raise ValueError("mode cutoff K must be nonnegative")
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be nonnegative")

    @property
    def pprime(self) -> float:
        return dual_exponent(self.p)

    @property
    def qprime(self) -> float:
        return dual_exponent(self.q)

    def grid(self, workers: int = 1) -> SpaceGrid:
        return SpaceGrid(self.N, self.L, self.n, workers)

    def resolvent_params(self) -> ResolventParams:
        return ResolventParams(self.epsilon, self.T)

    def validate(self, spec: OperatorSpec) -> ExponentWindow:
        """Admissibility of (p, q) and mode compatibility; returns the exponent window with alpha."""
        window = admissible_exponents(self.N, spec, self.p, self.q)
        if not mode_set(self.s, self.K) or not [k for k in mode_set(self.s, self.K) if k > 0]:
            raise ValueError(f"class s={self.s} with K={self.K} has no positive modes")
        check_mode_set(spec, self.s, self.K, self.resolvent_params())
        return window


@dataclass(frozen=True, eq=False)
class Potential:
    """Nonnegative weight Q on the grid with the exponent data it is used with."""

    grid: SpaceGrid
    values: NDArray[np.float64]
    p: float
    q: float
    allow_zero: bool = False

    def __post_init__(self):
        vals = np.array(self.values, float)
        if vals.shape != self.grid.shape:
            raise PotentialError(f"potential has shape {vals.shape}, grid is {self.grid.shape}")
        if not np.all(np.isfinite(vals)):
            raise PotentialError("potential has non-finite values")
        if np.any(vals < 0):
            raise PotentialError(f"potential must be nonnegative (min = {vals.min():.3e})")
        if not self.allow_zero and not np.any(vals > 0):
            raise PotentialError("potential vanishes identically (Q ≢ 0 violated)")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @classmethod
    def gaussian(cls, grid: SpaceGrid, p: float, q: float, amplitude: float = 1.0, width: float = 2.0,
                 center=None) -> "Potential":
        """``Q(x) = A exp(-|x - c|^2 / sigma^2)``."""
        if center is None:
            r2 = grid.radius**2
        else:
            r2 = sum((c - c0) ** 2 for c, c0 in zip(grid.coords(), center))
        return cls(grid, amplitude * np.exp(-r2 / width**2), p, q)

    @property
    def is_zero(self) -> bool:
        return not np.any(self.values > 0)

    @property
    def norm_exponent(self) -> float:
        """``q / (q - p)``, the Lebesgue exponent Q must be integrable in."""
        if not self.q > self.p:
            raise PotentialError(f"q = {self.q:g} must exceed p = {self.p:g} for Q to have a norm")
        return self.q / (self.q - self.p)

    @cached_property
    def norm(self) -> float:
        return self.grid.lp_norm(self.values, self.norm_exponent)

    @cached_property
    def root_p(self) -> NDArray[np.float64]:
        out = self.values ** (1.0 / self.p)
        out.flags.writeable = False
        return out

    @cached_property
    def root_pprime(self) -> NDArray[np.float64]:
        out = self.values ** (1.0 / dual_exponent(self.p))
        out.flags.writeable = False
        return out

    def argmax_point(self) -> tuple[float, ...]:
        idx = np.unravel_index(int(np.argmax(self.values)), self.values.shape)
        return tuple(float(self.grid.x1d[i]) for i in idx)

    def boundary_fraction(self) -> float:
        """Max of Q on the box faces relative to its global max (truncation indicator)."""
        v = self.values
        if self.is_zero:
            return 0.0
        faces = [np.take(v, [0, -1], axis=a) for a in range(v.ndim)]
        return float(max(np.max(f) for f in faces) / np.max(v))


class DualProblem:
    """Bundle of problem data with cached per-mode multipliers.

    Everything here is a pure function of the stored data; instances are
    safe to share between threads once constructed.
    """

    def __init__(self, params: ProblemParams, spec: OperatorSpec, Q: Potential, validate: bool = True):
        if Q.grid != params.grid():
            raise ValueError("potential grid does not match the problem grid")
        if Q.p != params.p or Q.q != params.q:
            raise ValueError("potential exponents do not match the problem")
        self.params = params
        self.spec = spec
        self.Q = Q
        self.grid = Q.grid
        self.window = params.validate(spec) if validate else None
        check_mode_set(spec, params.s, params.K, params.resolvent_params())
        self.modes = mode_set(params.s, params.K)
        self.M = collocation_samples(params.s, params.K)
        self.times = sample_times(self.M, params.T)
        rp = params.resolvent_params()
        self._mult = np.stack([multiplier(spec, self.grid, k, rp) for k in self.modes])

    # -- basic quantities ---------------------------------------------------

    @property
    def p(self) -> float:
        return self.params.p

    @property
    def pprime(self) -> float:
        return self.params.pprime

    @property
    def alpha(self) -> float | None:
        return self.window.alpha if self.window else None

    def zeros(self) -> TimeField:
        return TimeField.zeros(self.grid, self.params.s, self.params.K, self.params.T)

    def field(self, modes: NDArray) -> TimeField:
        return TimeField(self.grid, self.params.s, self.params.K, modes, self.params.T)

    def _check(self, V: TimeField):
        if V.grid != self.grid or V.sym != self.params.s or V.K != self.params.K or V.period != self.params.T:
            raise ValueError("field does not belong to this problem")

    def samples(self, V: TimeField) -> NDArray[np.float64]:
        self._check(V)
        return symmetrize_samples(synthesize(V, self.times), self.params.s)

    def analyze(self, samples: NDArray) -> TimeField:
        return analyze(samples, self.params.s, self.params.K, self.grid, self.params.T)

    def lp_norm(self, V: TimeField, r: float | None = None) -> float:
        """Space-time ``L^r`` norm on collocation samples (default r = p')."""
        r = self.pprime if r is None else r
        return spacetime_lp(self.samples(V), self.grid, r, self.params.T) ** (1.0 / r)

    def pairing(self, V: TimeField, W: TimeField) -> float:
        return V.pairing(W)

    # -- operators --------------------------------------------------------------

    def mode_multiplier(self, k: int) -> NDArray[np.float64]:
        return self._mult[self.modes.index(k)]

    def birman_schwinger_apply(self, k: int, v: NDArray) -> NDArray:
        if k not in self.modes:
            raise ValueError(f"mode {k} not in the mode set {self.modes}")
        w = self.Q.root_p
        return w * apply_multiplier(self.mode_multiplier(k), w * v, self.grid)

    def big_R(self, V: TimeField) -> TimeField:
        """Block-diagonal application ``[R V]_k = R_k^Q v_k`` (one batched FFT)."""
        self._check(V)
        w = self.Q.root_p
        F = self.grid.fft(w * V.modes) * self._mult
        # re-projection only removes FFT rounding that breaks the mode constraints
        return project_symmetry(self.field(w * self.grid.ifft(F)), self.params.s)

    def resolvent_modes(self, V: TimeField) -> TimeField:
        """Unweighted ``u_k = R_k[Q^{1/p} v_k]``."""
        self._check(V)
        F = self.grid.fft(self.Q.root_p * V.modes) * self._mult
        return project_symmetry(self.field(self.grid.ifft(F)), self.params.s)

    def reconstruct_U(self, V: TimeField) -> TimeField:
        return self.resolvent_modes(V)

    def quadratic_form(self, V: TimeField) -> float:
        """``<V, R V>`` evaluated modally."""
        return V.pairing(self.big_R(V))

    # -- duality maps -----------------------------------------------------------

    def duality_forward(self, V: TimeField) -> TimeField:
        """Modes of ``|V|^{p'-2} V`` (pointwise on collocation samples)."""
        return self.analyze(signed_power(self.samples(V), self.pprime))

    def duality_inverse(self, W: TimeField) -> TimeField:
        """Modes of ``|W|^{p-2} W``; inverse of ``duality_forward`` since (p-1)(p'-1) = 1."""
        return self.analyze(signed_power(self.samples(W), self.p))

    # -- functional -----------------------------------------------------------

    def functional_parts(self, V: TimeField) -> tuple[float, float]:
        """``(∫∫|V|^{p'}, <V, R V>)``."""
        power = spacetime_lp(self.samples(V), self.grid, self.pprime, self.params.T)
        return power, self.quadratic_form(V)

    def functional_J(self, V: TimeField) -> float:
        power, quad = self.functional_parts(V)
        return power / self.pprime - 0.5 * quad

    def gradient_J(self, V: TimeField) -> TimeField:
        """Representative G of J'(V) in the modal pairing: ``|V|^{p'-2}V - R V``."""
        return self.duality_forward(V) - self.big_R(V)

    def directional_derivative(self, V: TimeField, W: TimeField) -> float:
        return self.gradient_J(V).pairing(W)

    def residual(self, V: TimeField) -> float:
        """Relative residual ``|| |V|^{p'-2}V - R V ||_p / ||V||_{p'}^{p'-1}``."""
        G = self.gradient_J(V)
        nv = self.lp_norm(V)
        if nv == 0:
            return 0.0
        return self.lp_norm(G, self.p) / nv ** (self.pprime - 1.0)

    def aliasing_fraction(self, V: TimeField, M: int | None = None) -> float:
        """Relative L^2 energy of ``|V|^{p'-2}V`` outside the mode space on fine samples."""
        self._check(V)
        M = M or oversampled_samples(self.params.K)
        fine = signed_power(symmetrize_samples(synthesize(V, sample_times(M, self.params.T)), self.params.s), self.pprime)
        kept = analyze(fine, self.params.s, self.params.K, self.grid, self.params.T)
        back = synthesize(kept, sample_times(M, self.params.T))
        total = np.sum(fine**2)
        return float(math.sqrt(np.sum((fine - back) ** 2) / total)) if total > 0 else 0.0

    # -- positivity trials (A3) and constants ------------------------------------------------

    def band_pass_trial(self, k: int, margin: float = 0.5, width: float = 3.0) -> NDArray[np.float64] | None:
        """Radial band-pass field whose lattice spectrum lies strictly above the resonant sphere.

        Centered at the maximum of Q.  Returns None if the lattice has no
        frequencies above the sphere.
        """
        kappa = TWO_PI * abs(k) / self.params.T
        if self.spec.is_fractional:
            xi_res = kappa ** (1.0 / self.spec.gamma)
        else:
            xi_res = math.sqrt(max(kappa**2 - self.spec.mass**2, 0.0))
        lo = xi_res + margin
        hi = min(lo + width, 0.9 * math.pi / self.grid.h)
        if hi <= lo:
            return None
        xi = np.sqrt(self.grid.xi_sq)
        u = np.clip((xi - lo) / (hi - lo), 0.0, 1.0)
        profile = np.where((xi > lo) & (xi < hi), np.sin(np.pi * u) ** 2, 0.0)
        center = self.Q.argmax_point()
        phase = np.ones(self.grid.shape, complex)
        for axis, c in enumerate(center):
            shape = [1] * self.grid.N
            shape[axis] = self.grid.n
            phase = phase * np.exp(-1j * (self.grid.xi1d * (c + self.grid.L))).reshape(shape)
        # x1d starts at -L, so a spatial shift by c + L places the peak at c
        field_ = self.grid.ifft(profile * phase).real
        return field_ / np.max(np.abs(field_))

    def default_A3_trial(self, k: int, cutoff: float = 1e-8) -> NDArray[np.float64] | None:
        """``Q^{-1/p} 1_{Q > cutoff max Q}`` times the band-pass field."""
        base = self.band_pass_trial(k)
        if base is None:
            return None
        Qv = self.Q.values
        mask = Qv > cutoff * Qv.max()
        inv = np.zeros_like(Qv)
        inv[mask] = Qv[mask] ** (-1.0 / self.p)
        return inv * base

    def check_A3(self, trials: dict[int, NDArray] | None = None) -> dict[int, float]:
        """Quadratic-form values ``∫ w R_k^Q w`` for positive modes (NaN if no trial exists)."""
        out = {}
        for k in [k for k in self.modes if k > 0]:
            w = trials.get(k) if trials is not None else self.default_A3_trial(k)
            if w is None:
                out[k] = float("nan")
                continue
            out[k] = self.grid.inner(w, self.birman_schwinger_apply(k, w))
        return out

    def estimate_C_R(self, trials: int = 8, seed: int = 0, iterations: int = 30,
                     extra: list[TimeField] | None = None) -> float:
        """Lower estimate of ``||R||_{p' -> p}`` on space-time fields of the class.

        Power iteration of the duality map on collocation samples, seeded with
        random fields and optionally with given fields (e.g. a solution).
        """
        rng = np.random.default_rng(seed)
        n_modes = len(self.modes)
        starts = []
        for _ in range(trials):
            z = rng.standard_normal((n_modes, *self.grid.shape)) + 1j * rng.standard_normal(
                (n_modes, *self.grid.shape))
            starts.append(self.samples(project_symmetry(self.field(z * self.Q.root_p), self.params.s)))
        for V in extra or []:
            starts.append(self.samples(V))
        starts = np.stack(starts)
        T, M = self.params.T, self.M
        # the time axis is folded into the batch norm by scaling with (T/M)^{1/r}
        scale_t = T / M

        def apply(batch):
            out = np.empty_like(batch)
            for i, s in enumerate(batch):
                out[i] = self.samples(self.big_R(self.analyze(s)))
            return out

        # embed the time axis into the "spatial" axes: use a grid of dimension N+1
        st_grid = _SpaceTimeNorm(self.grid, scale_t)
        return power_norm_estimate(apply, self.p, st_grid, starts, iterations)


class _SpaceTimeNorm:
    """Adapter giving ``power_norm_estimate`` the space-time quadrature."""

    def __init__(self, grid: SpaceGrid, dt: float):
        self.N = grid.N + 1
        self.axes = tuple(range(-self.N, 0))
        self.cell_volume = grid.cell_volume * dt


@dataclass
class DualState:
    """A dual field attached to its problem."""

    problem: DualProblem
    V: TimeField

    def __post_init__(self):
        self.problem._check(self.V)


def birman_schwinger_apply(state: DualState, k: int, v: NDArray) -> NDArray:
    return state.problem.birman_schwinger_apply(k, v)


def big_R_apply(state: DualState) -> TimeField:
    return state.problem.big_R(state.V)


def functional_J(state: DualState) -> float:
    return state.problem.functional_J(state.V)


def gradient_J(state: DualState) -> TimeField:
    return state.problem.gradient_J(state.V)


def reconstruct_U(state: DualState) -> TimeField:
    return state.problem.reconstruct_U(state.V)


def mountain_pass_constants(C_R: float, pprime: float) -> tuple[float, float]:
    """Radius ``r = (C_R p')^{-1/(2-p')}`` and level ``delta = r^{p'} / (2 p')``."""
    if not C_R > 0:
        raise ValueError("operator norm estimate must be positive")
    if not 1 < pprime < 2:
        raise ValueError("dual exponent must lie in (1, 2)")
    r = (C_R * pprime) ** (-1.0 / (2.0 - pprime))
    return r, r**pprime / (2.0 * pprime)


def cauchy_bound_factor(modes: list[int], alpha: float, p: float) -> float:
    """``(sum_k (k^2+1)^{-alpha p / (2(p-2))})^{(p-2)/p}`` over the given modes."""
    e = alpha * p / (2.0 * (p - 2.0))
    return float(sum((k * k + 1.0) ** (-e) for k in modes) ** ((p - 2.0) / p))


def mixed_norm_samples(samples: NDArray, grid: SpaceGrid, q: float, p: float, period: float) -> float:
    """``||W||_{L^q(L^p)}`` from uniform time samples."""
    inner = time_norm(samples, p, period)
    return float((np.sum(inner**q) * grid.cell_volume) ** (1.0 / q))
