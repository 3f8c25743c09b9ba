"""
Per-mode resolvent operators as Fourier multipliers.

For a radial symbol a(xi) and time frequency kappa = 2 pi k / T the operator

    R_k f = Re[ F^-1( F f / (a(xi) - kappa^2 - i eps) ) ]

is a real, even Fourier multiplier with symbol

    m_k(xi) = d / (d^2 + eps^2),     d = a(xi) - kappa^2.

Because the symbol is real and even, complex inputs are handled by one
complex FFT (linearity).  Small fixed ``eps`` stands in for the
limiting-absorption limit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple, Sequence

import numpy as np
import scipy.special
from numpy.typing import NDArray

from .spectral_domain import TWO_PI, SpaceGrid, mode_set


class ResolventError(ValueError):
    pass


class ZeroModeError(ResolventError):
    """The fractional Laplacian has no distributional inverse at the zero mode."""


class ResonanceError(ResolventError):
    """Klein-Gordon mode with kappa^2 = m^2 (symbol vanishes at xi = 0)."""


class AdmissibilityError(ValueError):
    """Exponents outside the range where the decay estimate is available."""


@dataclass(frozen=True)
class OperatorSpec:
    """Elliptic operator defined by its symbol.

    kind = "fractional_laplacian":  a(xi) = |xi|^(2 gamma)
    kind = "klein_gordon":          a(xi) = |xi|^2 + m^2
    """

    kind: str = "fractional_laplacian"
    gamma: float = 1.0
    mass: float = 0.0

    def __post_init__(self):
        if self.kind == "fractional_laplacian":
            if not self.gamma > 0:
                raise ValueError("fractional order gamma must be positive")
        elif self.kind == "klein_gordon":
            if not self.mass > 0:
                raise ValueError("Klein-Gordon mass m must be positive")
            object.__setattr__(self, "gamma", 1.0)
        else:
            raise ValueError(f"unknown operator kind {self.kind!r}")

    @property
    def is_fractional(self) -> bool:
        return self.kind == "fractional_laplacian"

    def validate_dimension(self, N: int) -> None:
        if self.is_fractional and not self.gamma > N / (N + 1):
            raise ValueError(f"fractional order gamma = {self.gamma} must exceed N/(N+1) = {N / (N + 1):.4g}")

    def symbol(self, xi_sq: NDArray) -> NDArray[np.float64]:
        if self.is_fractional:
            return xi_sq if self.gamma == 1.0 else xi_sq**self.gamma
        return xi_sq + self.mass**2

    def describe(self) -> str:
        if self.is_fractional:
            return f"fractional_laplacian(gamma={self.gamma!r})"
        return f"klein_gordon(m={self.mass!r})"


def laplacian() -> OperatorSpec:
    return OperatorSpec("fractional_laplacian", 1.0)


def biharmonic() -> OperatorSpec:
    return OperatorSpec("fractional_laplacian", 2.0)


def fractional_laplacian(gamma: float) -> OperatorSpec:
    return OperatorSpec("fractional_laplacian", float(gamma))


def klein_gordon(m: float) -> OperatorSpec:
    return OperatorSpec("klein_gordon", mass=float(m))


@dataclass(frozen=True)
class ResolventParams:
    """Regularisation ``epsilon`` and time period (sets kappa = 2 pi k / T)."""

    epsilon: float = 1e-3
    period: float = TWO_PI

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.period <= 0:
            raise ValueError("period must be positive")

    def kappa(self, k: int) -> float:
        return TWO_PI * abs(k) / self.period


def check_mode(spec: OperatorSpec, k: int, params: ResolventParams) -> None:
    """Raise if mode ``k`` has no regularised right inverse for ``spec``."""
    kappa = params.kappa(k)
    if spec.is_fractional:
        if k == 0:
            raise ZeroModeError(
                "no distributional inverse at zero mode for the fractional Laplacian; "
                "use a symmetry class without k = 0 (s = 3 or 5)"
            )
        if params.epsilon == 0:
            raise ResolventError("epsilon = 0 is only allowed for nonresonant Klein-Gordon modes")
    else:
        if math.isclose(kappa**2, spec.mass**2, rel_tol=1e-12, abs_tol=1e-14):
            raise ResonanceError(f"mode k={k} is resonant with the mass: kappa^2 = m^2 = {spec.mass**2:g}")
        if params.epsilon == 0 and kappa**2 > spec.mass**2:
            raise ResolventError(f"epsilon = 0 not allowed for k={k}: kappa^2 > m^2 puts the sphere on the spectrum")


def check_mode_set(spec: OperatorSpec, sym: int, K: int, params: ResolventParams) -> None:
    for k in mode_set(sym, K):
        check_mode(spec, k, params)


@lru_cache(maxsize=256)
def _multiplier(spec: OperatorSpec, grid: SpaceGrid, kappa: float, epsilon: float) -> NDArray[np.float64]:
    d = spec.symbol(grid.xi_sq) - kappa**2
    m = d / (d * d + epsilon * epsilon) if epsilon > 0 else 1.0 / d
    m.flags.writeable = False
    return m


def multiplier(spec: OperatorSpec, grid: SpaceGrid, k: int, params: ResolventParams) -> NDArray[np.float64]:
    """Real, read-only symbol of the regularised resolvent on the FFT lattice."""
    check_mode(spec, k, params)
    return _multiplier(spec, grid, params.kappa(k), float(params.epsilon))


def apply_multiplier(m: NDArray, f: NDArray, grid: SpaceGrid) -> NDArray:
    """Apply a real even multiplier; real input gives real output."""
    out = grid.ifft(grid.fft(f) * m)
    return out.real if np.isrealobj(f) else out


def apply_resolvent(
    spec: OperatorSpec, k: int, params: ResolventParams, f: NDArray, grid: SpaceGrid
) -> NDArray:
    """Regularised resolvent ``R_k f``.  Trailing axes of ``f`` are spatial."""
    return apply_multiplier(multiplier(spec, grid, k, params), f, grid)


def apply_symbol(spec: OperatorSpec, k: int, f: NDArray, grid: SpaceGrid, period: float = TWO_PI) -> NDArray:
    """Spectral application of ``L - kappa^2``."""
    kappa = TWO_PI * abs(k) / period
    d = spec.symbol(grid.xi_sq) - kappa**2
    return apply_multiplier(d, f, grid)


# ---------------------------------------------------------------------------
# kernel oracles
# ---------------------------------------------------------------------------


def kernel_oracle(spec: OperatorSpec, k: int, z, N: int, period: float = TWO_PI):
    """Closed-form convolution kernel of the eps -> 0 resolvent at distance ``z``.

    Supported: gamma = 1 (and Klein-Gordon) in N = 2 and N = 3.  With
    mu^2 = kappa^2 - m^2 (m = 0 for the Laplacian)::

        N = 3, mu^2 > 0:   cos(mu z) / (4 pi z)
        N = 2, mu^2 > 0:  -Y0(mu z) / 4
        N = 3, mu^2 < 0:   exp(-|mu| z) / (4 pi z)
        N = 2, mu^2 < 0:   K0(|mu| z) / (2 pi)
    """
    if not (spec.gamma == 1.0 and N in (2, 3)):
        raise NotImplementedError(f"no closed-form kernel for N={N}, {spec.describe()}")
    z = np.asarray(z, float)
    if np.any(z <= 0):
        raise ValueError("kernel distance must be positive")
    kappa = TWO_PI * abs(k) / period
    mu2 = kappa**2 - (spec.mass**2 if not spec.is_fractional else 0.0)
    if mu2 == 0:
        raise ResonanceError("kernel is not defined at the resonance kappa^2 = m^2")
    mu = math.sqrt(abs(mu2))
    if mu2 > 0:
        out = np.cos(mu * z) / (4 * math.pi * z) if N == 3 else -0.25 * scipy.special.y0(mu * z)
    else:
        out = np.exp(-mu * z) / (4 * math.pi * z) if N == 3 else scipy.special.k0(mu * z) / TWO_PI
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# operator norm estimation
# ---------------------------------------------------------------------------


def _lp(f: NDArray, r: float, grid: SpaceGrid) -> NDArray:
    """Batched L^r norms over trailing spatial axes."""
    return (np.sum(np.abs(f) ** r, axis=grid.axes) * grid.cell_volume) ** (1.0 / r)


def _bcast(v: NDArray, grid: SpaceGrid) -> NDArray:
    return v.reshape(v.shape + (1,) * grid.N)


def power_norm_estimate(
    apply,
    r: float,
    grid: SpaceGrid,
    starts: NDArray,
    iterations: int = 40,
) -> float:
    """Lower bound for the ``L^{r'} -> L^r`` norm of a symmetric operator.

    Runs the duality-map power iteration

        g = A(|Av|^{r-2} Av),   v <- |g|^{r-2} g / || . ||_{r'}

    on a batch of starting fields and returns the best ratio seen.  For
    r = 2 this is the ordinary power method.
    """
    if r < 2:
        raise ValueError("target exponent must be >= 2")
    rp = r / (r - 1.0)
    v = np.array(starts, float, copy=True)
    best = 0.0
    for it in range(iterations + 1):
        nv = _lp(v, rp, grid)
        keep = nv > 0
        if not np.any(keep):
            return 0.0
        v = v[keep] / _bcast(nv[keep], grid)
        Av = apply(v)
        ratios = _lp(Av, r, grid)
        best = max(best, float(np.max(ratios)))
        if it == iterations or best == 0.0:
            break
        g = apply(np.abs(Av) ** (r - 2) * Av)
        v = np.abs(g) ** (r - 2) * g
    return best


def estimate_operator_norm(
    spec: OperatorSpec,
    k: int,
    p: float,
    grid: SpaceGrid,
    params: ResolventParams | None = None,
    Q: NDArray | None = None,
    trials: int = 16,
    seed: int = 0,
    iterations: int = 40,
    extra_starts: NDArray | None = None,
) -> float:
    """Empirical lower estimate of ``||R_k||`` or, with weight ``Q``, of ``||Q^{1/p} R_k Q^{1/p}||``.

    ``p`` is the target exponent: the operator is measured from ``L^{p'}``
    to ``L^p``.  Pass ``p = 2`` for the plain L^2 norm.  The result is
    deterministic for a fixed seed.
    """
    if trials < 16:
        raise ValueError("at least 16 random trials are required")
    params = params or ResolventParams()
    m = multiplier(spec, grid, k, params)
    if Q is not None:
        w = np.asarray(Q, float) ** (1.0 / p)
        if not np.any(w):
            return 0.0

        def apply(v):
            return w * apply_multiplier(m, w * v, grid)
    else:

        def apply(v):
            return apply_multiplier(m, v, grid)

    rng = np.random.default_rng(seed)
    starts = rng.standard_normal((trials, *grid.shape))
    if Q is not None:
        # fields concentrated where the weight lives converge much faster
        starts = starts * w
    if extra_starts is not None:
        starts = np.concatenate([starts, np.asarray(extra_starts, float).reshape(-1, *grid.shape)])
    return power_norm_estimate(apply, p, grid, starts, iterations)


@dataclass
class NormDecayReport:
    """Empirical norms per mode with a log-log fit against ``k^2 + 1``."""

    ks: list[int]
    norms: list[float]
    alpha: float
    slope: float = field(init=False)
    intercept: float = field(init=False)
    fit_residual: float = field(init=False)

    def __post_init__(self):
        x = np.log(np.asarray(self.ks, float) ** 2 + 1.0)
        y = np.log(np.asarray(self.norms, float))
        A = np.column_stack([x, np.ones_like(x)])
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        self.slope, self.intercept = float(coef[0]), float(coef[1])
        self.fit_residual = float(np.sqrt(np.mean((A @ coef - y) ** 2)))

    @property
    def target_slope(self) -> float:
        return -self.alpha / 2

    def passes(self, slack: float = 0.15) -> bool:
        return self.slope <= self.target_slope + slack

    def to_csv(self, epsilon: float) -> str:
        rows = ["k,epsilon,norm_estimate,alpha_target"]
        rows += [f"{k},{epsilon!r},{v:.17g},{self.alpha!r}" for k, v in zip(self.ks, self.norms)]
        rows.append(f"slope,{epsilon!r},{self.slope:.17g},{self.target_slope!r}")
        return "\n".join(rows) + "\n"


def norm_decay_report(
    spec: OperatorSpec,
    ks: Sequence[int],
    p: float,
    grid: SpaceGrid,
    alpha: float,
    params: ResolventParams | None = None,
    Q: NDArray | None = None,
    trials: int = 16,
    seed: int = 0,
    iterations: int = 40,
) -> NormDecayReport:
    norms = [
        estimate_operator_norm(spec, k, p, grid, params, Q, trials, seed, iterations)
        for k in ks
    ]
    return NormDecayReport(list(ks), norms, alpha)


# ---------------------------------------------------------------------------
# exponent windows
# ---------------------------------------------------------------------------


class ExponentWindow(NamedTuple):
    q_min: float
    q_max: float
    alpha: float | None


def decay_exponent(N: int, spec: OperatorSpec, q: float) -> float:
    """Decay rate of ``||R_k||_{q'->q}`` in ``k``: ``2 - N/(gamma q') + N/(gamma q)``."""
    qp = q / (q - 1.0)
    g = spec.gamma
    return 2.0 - N / (g * qp) + N / (g * q)


def p_window(N: int, spec: OperatorSpec) -> tuple[float, float]:
    if N < 2:
        raise AdmissibilityError("dimension must be at least 2")
    g = spec.gamma
    if g == 1.0:
        return 2.0, 2.0 * (N + 1) / (N - 1)
    if N < 3:
        raise AdmissibilityError(f"fractional order gamma={g} needs N >= 3 for the decay estimate")
    denom = (2.0 - g) * N - g
    return 2.0, (2.0 * g * (N + 1) / denom if denom > 0 else math.inf)


def admissible_exponents(N: int, spec: OperatorSpec, p: float, q: float | None = None) -> ExponentWindow:
    """Open window ``(q_min, q_max)`` of admissible space exponents for ``p``.

    With ``q`` given, also checks it lies in the window and that the decay
    rate satisfies ``alpha > 1 - 2/p``; ``alpha`` is then returned.
    """
    spec.validate_dimension(N)
    p_lo, p_hi = p_window(N, spec)
    if not (p_lo < p < p_hi):
        raise AdmissibilityError(f"p = {p} outside the admissible interval ({p_lo:g}, {p_hi:g}) for N={N}")
    g = spec.gamma
    q_min = 2.0 * (N + 1) / (N - 1)
    denom = (N - g) * p - 2.0 * g
    q_max = 2.0 * N * p / denom if denom > 0 else math.inf
    if N > 2 * g:
        q_max = min(q_max, 2.0 * N / (N - 2 * g))
    if not q_min < q_max:
        raise AdmissibilityError(f"empty q window for N={N}, p={p}")
    if q is None:
        return ExponentWindow(q_min, q_max, None)
    if not (q_min < q < q_max):
        raise AdmissibilityError(f"q = {q} outside the admissible interval ({q_min:g}, {q_max:g}) for p={p}")
    alpha = decay_exponent(N, spec, q)
    if not alpha > 1.0 - 2.0 / p:
        raise AdmissibilityError(f"alpha = {alpha:.4g} does not exceed 1 - 2/p = {1 - 2 / p:.4g}")
    return ExponentWindow(q_min, q_max, alpha)
