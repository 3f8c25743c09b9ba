"""
Post-hoc verification of computed breathers.

The weak form tested here is, for Phi(t, x) = e^{-ikt} phi(x),

    ∫∫ U (∂_tt + L) Phi  =  ∫∫ Q |U|^{p-2} U Phi,

which after exact time integration reads

    T ∫ u_k (L - kappa^2) phi dx  =  T ∫ n_k phi dx,    n_k = [Q |U|^{p-2} U]_k.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft

from .dual_problem import DualProblem, Potential, ProblemParams, mixed_norm_samples, signed_power
from .resolvent import (
    AdmissibilityError,
    OperatorSpec,
    apply_symbol,
    norm_decay_report,
)
from .spectral_domain import (
    SpaceGrid,
    TimeField,
    oversampled_samples,
    sample_times,
    synthesize,
    time_norm,
)


class TestFunctionError(ValueError):
    __test__ = False  # keep pytest from collecting this class


class DecaySignalError(ValueError):
    pass


@dataclass(frozen=True)
class Check:
    name: str
    value: float
    tolerance: float
    passed: bool
    informational: bool = False

    def row(self) -> str:
        flag = "info" if self.informational else ("pass" if self.passed else "FAIL")
        return f"{self.name},{self.value:.10g},{self.tolerance:.3g},{flag}"


@dataclass
class VerificationReport:
    checks: list[Check] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def add(self, name: str, value: float, tolerance: float, passed: bool | None = None,
            informational: bool = False, upper: bool = True) -> Check:
        """Record a check; by default it passes when ``value < tolerance`` (``upper``)."""
        if passed is None:
            passed = bool(value < tolerance) if upper else bool(value > tolerance)
        c = Check(name, float(value), float(tolerance), bool(passed), informational)
        self.checks.append(c)
        return c

    def extend(self, other: "VerificationReport") -> "VerificationReport":
        self.checks.extend(other.checks)
        self.notes.extend(other.notes)
        return self

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks if not c.informational)

    def failures(self) -> list[Check]:
        return [c for c in self.checks if not c.passed and not c.informational]

    def get(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_csv(self) -> str:
        return "name,value,tolerance,pass\n" + "".join(c.row() + "\n" for c in self.checks)

    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write(f"verification: {'PASS' if self.passed else 'FAIL'}\n")
        for c in self.checks:
            flag = "info" if c.informational else ("pass" if c.passed else "FAIL")
            buf.write(f"  [{flag}] {c.name} = {c.value:.6g} (tolerance {c.tolerance:.3g})\n")
        for n in self.notes:
            buf.write(f"  note: {n}\n")
        return buf.getvalue()


# ---------------------------------------------------------------------------
# test functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TestFunction:
    """Compact bump ``phi(x) = exp(-|x-c|^2 / (2 (rho/3)^2)) (1 - |x-c|^2/rho^2)_+^4`` times ``e^{-ikt}``."""

    __test__ = False

    center: tuple[float, ...]
    radius: float
    k: int

    def values(self, grid: SpaceGrid) -> np.ndarray:
        r2 = np.zeros(grid.shape)
        for c, c0 in zip(np.meshgrid(*([grid.x1d] * grid.N), indexing="ij", sparse=True), self.center):
            r2 = r2 + (c - c0) ** 2
        u = r2 / self.radius**2
        return np.where(u < 1.0, np.exp(-r2 / (2 * (self.radius / 3.0) ** 2)) * (1.0 - u) ** 4, 0.0)

    def check_support(self, grid: SpaceGrid) -> None:
        margin = 2.0 * grid.h
        for c in self.center:
            if c - self.radius < -grid.L + margin or c + self.radius > grid.L - margin:
                raise TestFunctionError(
                    f"test function support (center {self.center}, radius {self.radius}) "
                    f"is not {margin:g} inside the box"
                )


def random_test_functions(problem: DualProblem, count: int, seed: int,
                          radius_range=(1.0, 4.0), center_radius: float | None = None) -> list[TestFunction]:
    """Random centers, radii and modes ``k`` drawn from the positive mode set."""
    rng = np.random.default_rng(seed)
    g = problem.grid
    center_radius = g.L / 4 if center_radius is None else center_radius
    ks = [k for k in problem.modes if k > 0]
    out = []
    for _ in range(count):
        rho = float(rng.uniform(*radius_range))
        c = tuple(float(x) for x in rng.uniform(-center_radius, center_radius, g.N))
        k = int(ks[rng.integers(len(ks))])
        tf = TestFunction(c, rho, k)
        tf.check_support(g)
        out.append(tf)
    return out


def nonlinearity_coefficient(problem: DualProblem, U: TimeField, k: int, M: int | None = None) -> np.ndarray:
    """k-th time coefficient of ``Q |U|^{p-2} U`` from uniform samples (raw DFT, no projection)."""
    M = M or problem.M
    if abs(k) > M // 2:
        raise ValueError(f"mode {k} is not resolved by {M} samples")
    samples = synthesize(U, sample_times(M, problem.params.T))
    n = problem.Q.values * signed_power(samples, problem.p)
    coeff = scipy.fft.fft(n, axis=0, workers=problem.grid.workers) / M
    return coeff[k % M]


def weak_form_sides(problem: DualProblem, U: TimeField, k: int, phi: np.ndarray,
                    M: int | None = None) -> tuple[complex, complex]:
    """``(T ∫ u_k (L - kappa^2) phi,  T ∫ n_k phi)`` for the test function ``e^{-ikt} phi``."""
    g, T = problem.grid, problem.params.T
    Lphi = apply_symbol(problem.spec, k, phi, g, T)
    uk = U.mode(k)
    lhs = T * np.sum(uk * Lphi) * g.cell_volume
    rhs = T * np.sum(nonlinearity_coefficient(problem, U, k, M) * phi) * g.cell_volume
    return complex(lhs), complex(rhs)


def weak_form_scale(problem: DualProblem, U: TimeField, k: int, phi: np.ndarray, M: int | None = None) -> float:
    """``||U|| ||Phi||`` with both L^2 norms taken over one period and the box.

    For ``Phi = e^{-ikt} phi`` this is ``sqrt(T) ||U||_{L^2(T x box)} ||phi||``.
    ``k`` and ``M`` are accepted for signature compatibility with the sides.
    """
    g, T = problem.grid, problem.params.T
    u_norm = math.sqrt(T * sum(float(np.sum(np.abs(U.mode(j)) ** 2)) for j in U.mode_list) * g.cell_volume)
    phi_norm = math.sqrt(T * float(np.sum(phi**2)) * g.cell_volume)
    return u_norm * phi_norm


def weak_form_residual(problem: DualProblem, U: TimeField, tf: TestFunction, M: int | None = None) -> float:
    """Normalised weak-form residual of ``U`` against one test function (0 for U = 0)."""
    tf.check_support(problem.grid)
    phi = tf.values(problem.grid)
    lhs, rhs = weak_form_sides(problem, U, tf.k, phi, M)
    scale = weak_form_scale(problem, U, tf.k, phi, M)
    if scale == 0:
        return 0.0
    return abs(lhs - rhs) / scale


# ---------------------------------------------------------------------------
# identities
# ---------------------------------------------------------------------------


def duality_round_trip(problem: DualProblem, V: TimeField) -> float:
    """Max relative error of ``|.|^{p'-2}. ∘ |.|^{p-2}.`` on the samples of ``V``."""
    s = problem.samples(V)
    back = signed_power(signed_power(s, problem.p), problem.pprime)
    scale = np.max(np.abs(s))
    return float(np.max(np.abs(back - s)) / scale) if scale > 0 else 0.0


def identity_audit(problem: DualProblem, V: TimeField, U: TimeField | None = None,
                   tol: float = 1e-8) -> VerificationReport:
    rep = VerificationReport()
    U = problem.reconstruct_U(V) if U is None else U
    sv = problem.samples(V)
    su = problem.samples(U)
    sRV = problem.samples(problem.big_R(V))
    w = problem.Q.root_p
    dual = signed_power(sv, problem.pprime)
    scale = max(float(np.max(np.abs(dual))), 1e-300)

    rep.add("reconstruction_identity", float(np.max(np.abs(w * su - sRV)) / max(np.max(np.abs(sRV)), 1e-300)), 1e-10)
    rep.add("duality_identity", float(np.max(np.abs(w * su - dual)) / scale), 1e-10)
    rep.add("duality_round_trip", duality_round_trip(problem, V), 1e-10)
    # at a critical point Q |U|^{p-2} U = Q^{1/p} V
    n = problem.Q.values * signed_power(su, problem.p)
    target = w * sv
    rep.add("nonlinearity_identity", float(np.max(np.abs(n - target)) / max(np.max(np.abs(target)), 1e-300)), 1e-8)

    power, quad = problem.functional_parts(V)
    J = power / problem.pprime - 0.5 * quad
    dJV = problem.gradient_J(V).pairing(V)
    ps_lhs = dJV - 2 * J
    ps_rhs = (1 - 2 / problem.pprime) * power
    rep.add("palais_smale_identity", abs(ps_lhs - ps_rhs) / max(abs(ps_rhs), 1e-300), 1e-10)

    lhs = problem.Q.norm ** (1 / problem.p) * mixed_norm_samples(su, problem.grid, problem.params.q,
                                                                problem.p, problem.params.T)
    rhs = power ** ((problem.pprime - 1) / problem.pprime)
    rep.add("unboundedness_ratio", lhs / rhs if rhs > 0 else float("inf"), 1.0, upper=False)
    rep.add("nehari_identity", abs(dJV) / max(power, 1e-300), tol)
    rep.add("critical_point_residual", problem.residual(V), tol)
    rep.add("J_positive", J, 0.0, upper=False)
    return rep


def decay_profile(U: TimeField, p: float, r_range: tuple[float, float] | None = None,
                  bins: int = 24) -> tuple[float, float]:
    """Log-log slope of the radially averaged ``||U(., x)||_{L^p(T)}`` on an annulus.

    Returns ``(slope, rms fit residual)``; the default annulus is [L/4, L/2].
    """
    g = U.grid
    r_lo, r_hi = r_range or (g.L / 4, g.L / 2)
    samples = U.sample(oversampled_samples(U.K))
    amp = time_norm(samples, p, U.period)
    r = g.radius
    edges = np.linspace(r_lo, r_hi, bins + 1)
    idx = np.digitize(r, edges) - 1
    rs, vals = [], []
    for b in range(bins):
        sel = idx == b
        if np.any(sel):
            rs.append(float(np.mean(r[sel])))
            vals.append(float(np.mean(amp[sel])))
    vals = np.asarray(vals)
    if len(vals) < 2 or np.max(vals) < 1e-12 or np.any(vals <= 0):
        raise DecaySignalError("no decay signal in the annulus")
    x, y = np.log(rs), np.log(vals)
    A = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return float(coef[0]), float(np.sqrt(np.mean((A @ coef - y) ** 2)))


def cauchy_estimate_check(problem: DualProblem, V: TimeField, C1: float) -> tuple[float, float]:
    """``(||R V||_p, C1 * factor * ||V||_{p'})`` for the mode-summed bound."""
    from .dual_problem import cauchy_bound_factor

    alpha = problem.alpha if problem.alpha is not None else 0.0
    lhs = problem.lp_norm(problem.big_R(V), problem.p)
    factor = cauchy_bound_factor([k for k in problem.modes], alpha, problem.p)
    return lhs, C1 * factor * problem.lp_norm(V)


# ---------------------------------------------------------------------------
# assumptions
# ---------------------------------------------------------------------------


def assumption_report(params: ProblemParams, spec: OperatorSpec, Q: Potential,
                      decay_modes=None, trials: int = 16, seed: int = 0, slack: float = 0.15) -> VerificationReport:
    """Checks of the standing hypotheses.

    A1: the exponents lie in the admissible window and the weighted resolvent
    norms decay in k.  A2: Q is nonzero (its norm and boundary decay are
    reported).  A3: each mode admits a trial field with positive quadratic form.
    """
    from .dual_problem import DualProblem

    rep = VerificationReport()
    try:
        window = params.validate(spec)
        rep.add("A1_admissible_exponents", window.alpha, 1 - 2 / params.p, upper=False)
    except (AdmissibilityError, ValueError) as exc:
        rep.add("A1_admissible_exponents", float("nan"), float("nan"), passed=False)
        rep.notes.append(f"A1 admissibility failure: {exc}")
        window = None

    if Q.is_zero:
        rep.add("A2_Q_nonzero", 0.0, 0.0, passed=False)
        rep.add("A3_positivity", 0.0, 0.0, passed=False)
        rep.notes.append("Q ≢ 0 violated")
        return rep
    if window is None:
        return rep
    rep.add("A2_Q_norm", Q.norm, float("inf"), informational=True)
    rep.add("A2_Q_boundary_fraction", Q.boundary_fraction(), 1e-6, informational=True)
    rep.notes.append("A2 (compactness) cannot be tested on a finite grid, where every operator is compact; "
                     "Q norm and boundary decay are reported instead")

    problem = DualProblem(params, spec, Q)
    ks = decay_modes or [k for k in problem.modes if k > 0]
    report = norm_decay_report(spec, ks, params.p, problem.grid, window.alpha, params.resolvent_params(),
                               Q.values, trials, seed)
    rep.add("A1_decay_slope", report.slope, report.target_slope + slack)
    rep.add("A1_decay_fit_residual", report.fit_residual, float("inf"), informational=True)
    a3 = problem.check_A3()
    finite = [v for v in a3.values() if np.isfinite(v)]
    worst = min(finite) if finite else float("nan")
    rep.add("A3_positivity", worst, 0.0, passed=bool(finite) and len(finite) == len(a3) and worst > 0, upper=False)
    for k, v in a3.items():
        rep.add(f"A3_mode_{k}", v, 0.0, upper=False, informational=True)
    return rep


# ---------------------------------------------------------------------------
# full verification
# ---------------------------------------------------------------------------


def verify_solution(problem: DualProblem, V: TimeField, count: int = 20, seed: int = 0,
                    tol: float = 1e-8, weak_tol: float | None = None) -> VerificationReport:
    """Identity audit, randomized weak-form checks, symmetry audit and decay profile."""
    rep = identity_audit(problem, V, tol=tol)
    U = problem.reconstruct_U(V)
    eps = problem.params.epsilon
    weak_tol = max(1e-6, 5 * eps) if weak_tol is None else weak_tol
    tfs = random_test_functions(problem, count, seed)
    res = [weak_form_residual(problem, U, tf) for tf in tfs]
    rep.add("weak_form_max_residual", max(res), weak_tol)
    fine = oversampled_samples(problem.params.K)
    res_fine = [weak_form_residual(problem, U, tf, fine) for tf in tfs]
    rep.add("weak_form_max_residual_oversampled", max(res_fine), weak_tol, informational=True)
    # the ||U|| ||Phi|| scale is dominated by near-resonant box modes of U, which the
    # test functions barely see; the direct side comparison shows the eps-limited defect
    rep.add("weak_form_sides_discrepancy", sides_discrepancy(problem, U, tfs), weak_tol, informational=True)
    rep.add("aliasing_fraction", problem.aliasing_fraction(V), 1.0, informational=True)

    # excluded modes: both sides must vanish
    excluded = [k for k in range(-problem.params.K, problem.params.K + 1) if k not in problem.modes]
    if excluded:
        phi = tfs[0].values(problem.grid)
        worst = max(max(abs(s) for s in weak_form_sides(problem, U, k, phi)) for k in excluded)
        rep.add("excluded_mode_orthogonality", worst, 1e-10)

    imag = _reality_defect(U)
    rep.add("reality_of_U", imag, 1e-10)
    energy = V.energy_spectrum()
    top = max(energy.values())
    active = sum(1 for k, e in energy.items() if k > 0 and e > 1e-6 * top)
    rep.add("active_modes", active, 2, upper=False, passed=active >= 2 if problem.params.s in (3, 5) else True)
    try:
        slope, fit = decay_profile(U, problem.p)
        rep.add("decay_slope", slope, (1 - problem.params.N) / 2, informational=True)
        rep.add("decay_slope_deviation", abs(slope - (1 - problem.params.N) / 2), 0.25, informational=True)
    except DecaySignalError as exc:
        rep.notes.append(str(exc))
    return rep


def _reality_defect(U: TimeField) -> float:
    """Max imaginary part of the synthesized samples relative to the real part."""
    E = np.exp(1j * 2 * np.pi / U.period * np.outer(sample_times(16, U.period), U.mode_list))
    out = (E @ U.modes.reshape(len(U.mode_list), -1))
    scale = np.max(np.abs(out.real))
    return float(np.max(np.abs(out.imag)) / scale) if scale > 0 else 0.0


def weak_residuals(problem: DualProblem, V: TimeField, tfs: list[TestFunction]) -> list[float]:
    U = problem.reconstruct_U(V)
    return [weak_form_residual(problem, U, tf) for tf in tfs]


def sides_discrepancy(problem: DualProblem, U: TimeField, tfs: list[TestFunction],
                      active: float = 1e-6) -> float:
    """Max of ``|lhs - rhs| / max(|lhs|, |rhs|)`` over test functions on active modes.

    A mode is active when its spatial L^2 norm exceeds ``active`` times the
    largest one.  Unlike the normalised residual this compares the two sides
    directly, so it exposes how far the regularised resolvent is from its
    eps -> 0 limit on the given grid.
    """
    energy = U.energy_spectrum()
    top = max(energy.values()) if energy else 0.0
    worst = 0.0
    for tf in tfs:
        if top == 0 or energy.get(tf.k, 0.0) <= active * top:
            continue
        lhs, rhs = weak_form_sides(problem, U, tf.k, tf.values(problem.grid))
        denom = max(abs(lhs), abs(rhs))
        if denom > 0:
            worst = max(worst, abs(lhs - rhs) / denom)
    return worst


def epsilon_refinement(problem: DualProblem, V: TimeField, solve_fn, factor: float = 0.5,
                       count: int = 20, seed: int = 0) -> tuple[VerificationReport, DualProblem, TimeField]:
    """Re-solve at ``factor * eps`` starting from ``V`` and compare weak-form quantities.

    ``solve_fn(problem, V0)`` must return a converged dual field for the new
    problem.  Returns the report, the refined problem and its solution.
    """
    from dataclasses import replace as dc_replace

    params = dc_replace(problem.params, epsilon=problem.params.epsilon * factor)
    refined = DualProblem(params, problem.spec, problem.Q, validate=False)
    V0 = refined.field(V.modes)
    V2 = solve_fn(refined, V0)
    tfs = random_test_functions(problem, count, seed)
    U1, U2 = problem.reconstruct_U(V), refined.reconstruct_U(V2)
    r1 = max(weak_form_residual(problem, U1, tf) for tf in tfs)
    r2 = max(weak_form_residual(refined, U2, tf) for tf in tfs)
    d1, d2 = sides_discrepancy(problem, U1, tfs), sides_discrepancy(refined, U2, tfs)
    J1, J2 = problem.functional_J(V), refined.functional_J(V2)
    rep = VerificationReport()
    rep.add("eps_refinement_weak_residual_ratio", r2 / r1 if r1 > 0 else 0.0, 1.0,
            passed=r2 <= r1 or r2 < 1e-12)
    rep.add("eps_refinement_sides_discrepancy_ratio", d2 / d1 if d1 > 0 else 0.0, 1.0, informational=True)
    rep.add("eps_refinement_J_relative_change", abs(J2 - J1) / abs(J1), 0.02, informational=True)
    return rep, refined, V2
