"""
Iterative schemes for nontrivial critical points of the dual functional.

* ``iterate_fixed_point``: V <- nehari(|R V|^{p-2} R V), the natural fixed-point
  map of ``|V|^{p'-2} V = R V`` with the Nehari normalisation.
* ``mountain_pass_descent``: locate the maximum of J on a ray through a
  mountain-pass basis direction, then descend with Armijo backtracking.  The
  descent step is a mirror step in the geometry of ``(1/p')||V||_{p'}^{p'}``:
  ``|V_new|^{p'-2} V_new = |V|^{p'-2} V - lam G``; lam = 1 would reproduce the
  fixed-point map, so the default step cap keeps the two trajectories distinct.
* ``deflate_and_continue``: start from higher basis directions, damp the
  components along previous solutions, then polish with Newton-Krylov in the
  variable W = |V|^{p'-2} V where the equation ``W = R[|W|^{p-2} W]`` is C^1.
"""

from __future__ import annotations

import io
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize
import scipy.sparse.linalg as sla

from .dual_problem import DualProblem, NehariError, signed_power
from .spectral_domain import TimeField, project_symmetry

log = logging.getLogger(__name__)

SCHEMES = ("nehari_fixed_point", "mountain_pass_descent")


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    scheme: str = "nehari_fixed_point"
    max_iter: int = 2000
    tol: float = 1e-8
    armijo: float = 1e-4
    backtrack: float = 0.5
    max_step: float = 0.5
    seed: int = 0
    deflation_count: int = 1
    init_mode: int | None = None
    noise: float = 1e-3
    angle_threshold: float = 0.1
    reseeds: int = 5
    damped_iter: int = 100
    damping: float = 1.0
    newton_max_iter: int = 30
    gmres_restart: int = 60
    path_points: int = 64

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtracking factor must lie in (0, 1)")
        if not 0 < self.max_step <= 1:
            raise ValueError("max_step must lie in (0, 1]")
        if self.deflation_count < 1:
            raise ValueError("deflation_count must be >= 1")


@dataclass
class IterationLog:
    """Per-iteration records; timings are kept apart so logs are reproducible."""

    rows: list[tuple] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)
    _t0: float = field(default_factory=time.perf_counter, repr=False)

    HEADER = "iter,J,residual,norm_V_pprime,nehari_t"

    def add(self, it: int, J: float, residual: float, norm: float, t: float):
        self.rows.append((it, J, residual, norm, t))
        self.wall_ms.append(1000.0 * (time.perf_counter() - self._t0))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(self.HEADER + "\n")
        for it, J, res, nv, t in self.rows:
            buf.write(f"{it},{J:.17g},{res:.17g},{nv:.17g},{t:.17g}\n")
        return buf.getvalue()

    def timing_csv(self) -> str:
        lines = ["iter,wall_ms"] + [f"{r[0]},{w:.3f}" for r, w in zip(self.rows, self.wall_ms)]
        return "\n".join(lines) + "\n"


@dataclass
class Solution:
    V: TimeField
    U: TimeField
    J_value: float
    residual: float
    iterations: int
    converged: bool
    scheme: str
    nehari_t: list[float]
    log: IterationLog
    mode_energy: dict[int, float]
    notes: list[str] = field(default_factory=list)
    path: "PathMaximum | None" = None

    @property
    def norm_V(self) -> float:
        return float(self.log.rows[-1][3]) if self.log.rows else float("nan")

    def dominant_mode(self) -> int:
        return max(self.mode_energy, key=lambda k: (self.mode_energy[k], -k))


def _mode_energy(problem: DualProblem, V: TimeField) -> dict[int, float]:
    """``||v_k||_{p'}`` for each positive mode."""
    g, pp = problem.grid, problem.pprime
    return {k: g.lp_norm(V.mode(k), pp) for k in problem.modes if k > 0}


def make_solution(problem: DualProblem, V: TimeField, log_: IterationLog, it: int,
                  converged: bool, scheme: str, notes=None) -> Solution:
    return Solution(
        V=V,
        U=problem.reconstruct_U(V),
        J_value=problem.functional_J(V),
        residual=problem.residual(V),
        iterations=it,
        converged=converged,
        scheme=scheme,
        nehari_t=[r[4] for r in log_.rows],
        log=log_,
        mode_energy=_mode_energy(problem, V),
        notes=list(notes or []),
    )


# ---------------------------------------------------------------------------
# Nehari normalisation and the basis of the mountain-pass geometry
# ---------------------------------------------------------------------------


def nehari_factor(problem: DualProblem, power: float, quad: float) -> float:
    if not quad > 0:
        raise NehariError("<V, R V> <= 0: field is not in the positive cone; reseed the initial guess")
    return (power / quad) ** (1.0 / (2.0 - problem.pprime))


def nehari_rescale(problem: DualProblem, V: TimeField) -> tuple[float, TimeField]:
    """Scale ``V`` onto the Nehari set ``J'(tV)[tV] = 0``."""
    power, quad = problem.functional_parts(V)
    t = nehari_factor(problem, power, quad)
    return t, t * V


def _single_mode_field(problem: DualProblem, k: int, w: np.ndarray) -> TimeField:
    """``w(x) T_k(t)`` with ``T_k = sin`` for classes 3, 5 and ``cos`` otherwise."""
    s = problem.params.s
    if s in (3, 5):
        modes = {k: -0.5j * w, -k: 0.5j * w}
    else:
        modes = {k: 0.5 * w, -k: 0.5 * w}
    return TimeField.from_modes(problem.grid, s, problem.params.K, modes, problem.params.T)


@dataclass
class MPGBasis:
    """Normalised single-mode fields ``V_k = w_k T_k`` with ``<V_k, R V_k> = 2``."""

    problem: DualProblem
    ks: list[int]
    fields: dict[int, TimeField]
    weights: dict[int, np.ndarray]

    @classmethod
    def build(cls, problem: DualProblem, ks=None) -> "MPGBasis":
        ks = [k for k in problem.modes if k > 0] if ks is None else list(ks)
        target = 4.0 / problem.params.T
        fields, weights = {}, {}
        for k in ks:
            w = None
            band = problem.band_pass_trial(k)
            candidates = []
            if band is not None:
                candidates.append(band * problem.Q.root_p)
            candidates.append(problem.default_A3_trial(k))
            for c in candidates:
                if c is None:
                    continue
                val = problem.grid.inner(c, problem.birman_schwinger_apply(k, c))
                if val > 0:
                    w = c * math.sqrt(target / val)
                    break
            if w is None:
                log.warning("no positive trial field for mode %d; skipped in the basis", k)
                continue
            weights[k] = w
            fields[k] = _single_mode_field(problem, k, w)
        if not fields:
            raise NehariError("no mode admits a field with positive quadratic form")
        return cls(problem, list(fields), fields, weights)

    def gram(self) -> np.ndarray:
        """Matrix ``<V_k', R V_k>`` over the basis."""
        R = {k: self.problem.big_R(V) for k, V in self.fields.items()}
        return np.array([[self.fields[a].pairing(R[b]) for b in self.ks] for a in self.ks])

    def radius(self, k: int, r: float = 0.0) -> float:
        """``R = max{r, (c^2/p')^{1/(2-p')}}`` for the line through ``V_k``.

        On a one-dimensional span the norm-equivalence constant is
        ``c = max(||V_k||, 1/||V_k||)`` (made > 1).
        """
        pp = self.problem.pprime
        nv = self.problem.lp_norm(self.fields[k])
        c = max(nv, 1.0 / nv) * (1.0 + 1e-12)
        return max(r, (c * c / pp) ** (1.0 / (2.0 - pp)))


def seeded_noise(problem: DualProblem, rng: np.random.Generator) -> TimeField:
    """Random class field localised by ``Q^{1/p}`` with unit L^2 norm."""
    shape = (len(problem.modes), *problem.grid.shape)
    z = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * problem.Q.root_p
    W = project_symmetry(problem.field(z), problem.params.s)
    n = W.l2_norm()
    return W * (1.0 / n) if n > 0 else W


def initial_guess(problem: DualProblem, config: SolverConfig, basis: MPGBasis | None = None,
                  rng: np.random.Generator | None = None, mode: int | None = None) -> TimeField:
    basis = basis or MPGBasis.build(problem)
    rng = rng or np.random.default_rng(config.seed)
    k = mode if mode is not None else (config.init_mode or basis.ks[0])
    if k not in basis.fields:
        raise ValueError(f"mode {k} is not available in the mountain-pass basis {basis.ks}")
    V = basis.fields[k]
    return V + seeded_noise(problem, rng) * (config.noise * V.l2_norm())


# ---------------------------------------------------------------------------
# fixed-point iteration
# ---------------------------------------------------------------------------


def _residual_from(problem: DualProblem, V: TimeField, RV: TimeField) -> tuple[float, float]:
    """(relative residual, ||V||_{p'}) reusing a precomputed ``R V``."""
    sv = problem.samples(V)
    G = problem.analyze(signed_power(sv, problem.pprime)) - RV
    pp = problem.pprime
    T, M, cell = problem.params.T, problem.M, problem.grid.cell_volume
    nv = float((np.sum(np.abs(sv) ** pp) * (T / M) * cell) ** (1.0 / pp))
    if nv == 0:
        return 0.0, 0.0
    return problem.lp_norm(G, problem.p) / nv ** (pp - 1.0), nv


def _J_from(problem: DualProblem, V: TimeField, RV: TimeField, nv: float) -> float:
    return nv**problem.pprime / problem.pprime - 0.5 * V.pairing(RV)


def iterate_fixed_point(problem: DualProblem, config: SolverConfig, V0: TimeField | None = None,
                        previous: list[TimeField] | None = None, damped_iter: int | None = None) -> Solution:
    """Nehari-normalised fixed-point iteration.

    With ``previous`` fields given, the components along each of them (in the
    ``<., R .>`` pairing) are damped after every step for ``damped_iter``
    iterations; the iteration then stops and returns an unconverged solution
    for further polishing.
    """
    rng = np.random.default_rng(config.seed)
    if V0 is None:
        V0 = initial_guess(problem, config, rng=rng)
    if not np.any(V0.modes):
        raise NehariError("initial field is zero; the Nehari scaling is undefined")
    previous = previous or []
    Rprev = [(W, problem.big_R(W)) for W in previous]
    limit = config.max_iter if damped_iter is None else damped_iter

    attempts = 0
    while True:
        try:
            RV = problem.big_R(V0)
            t = nehari_factor(problem, *_parts(problem, V0, RV))
            break
        except NehariError:
            attempts += 1
            if attempts > config.reseeds:
                raise
            log.info("initial guess not in the positive cone; reseeding (%d)", attempts)
            V0 = V0 + seeded_noise(problem, rng) * (V0.l2_norm() * 0.5 * attempts)
    V, RV = t * V0, t * RV

    log_ = IterationLog()
    it = 0
    converged = False
    while True:
        res, nv = _residual_from(problem, V, RV)
        J = _J_from(problem, V, RV, nv)
        log_.add(it, J, res, nv, t)
        if res < config.tol and not previous:
            converged = True
            break
        if it >= limit:
            break
        lam = 1.0
        while True:
            W = problem.duality_inverse(RV) if lam == 1.0 else _relaxed_step(problem, V, RV, lam)
            for P, RP in Rprev:
                c = W.pairing(RP) / P.pairing(RP)
                W = W - (config.damping * c) * P
            RW = problem.big_R(W)
            try:
                t = nehari_factor(problem, *_parts(problem, W, RW))
                break
            except NehariError:
                # the full step left the positive cone; relax towards the current iterate
                lam *= 0.5
                if lam < 1e-6:
                    raise
        V, RV = t * W, t * RW
        it += 1
    if previous:
        converged = res < config.tol
    return make_solution(problem, V, log_, it, converged, "nehari_fixed_point")


def _relaxed_step(problem: DualProblem, V: TimeField, RV: TimeField, lam: float) -> TimeField:
    """``W`` with ``|W|^{p'-2} W = (1 - lam) |V|^{p'-2} V + lam R V`` on samples."""
    dual = signed_power(problem.samples(V), problem.pprime)
    return problem.analyze(signed_power((1.0 - lam) * dual + lam * problem.samples(RV), problem.p))


def _parts(problem: DualProblem, V: TimeField, RV: TimeField) -> tuple[float, float]:
    power = float(np.sum(np.abs(problem.samples(V)) ** problem.pprime)
                  * (problem.params.T / problem.M) * problem.grid.cell_volume)
    return power, V.pairing(RV)


# ---------------------------------------------------------------------------
# mountain-pass descent
# ---------------------------------------------------------------------------


@dataclass
class PathMaximum:
    beta: float
    J: float
    beta_end: float
    J_end: float
    closed_form_beta: float


def path_maximum(problem: DualProblem, direction: TimeField, R_end: float, points: int = 64,
                 max_enlarge: int = 20) -> PathMaximum:
    """Maximum of ``beta -> J(beta V)`` on ``[0, beta_end]`` with ``||beta_end V|| > R_end``.

    The path is sampled, then refined with a bounded scalar search.  If the
    maximum sits at the endpoint, or ``J(beta_end V) >= 0``, the path is
    lengthened.
    """
    power, quad = problem.functional_parts(direction)
    nv = power ** (1.0 / problem.pprime)
    pp = problem.pprime

    def J(beta):
        return beta**pp * power / pp - 0.5 * beta**2 * quad

    beta_end = 1.01 * R_end / nv
    for _ in range(max_enlarge):
        betas = np.linspace(0.0, beta_end, points + 1)
        vals = np.array([J(b) for b in betas])
        i = int(np.argmax(vals))
        if i < points and vals[-1] < 0:
            lo, hi = betas[max(i - 1, 0)], betas[min(i + 1, points)]
            opt = scipy.optimize.minimize_scalar(lambda b: -J(b), bounds=(lo, hi), method="bounded",
                                                 options={"xatol": 1e-12 * max(hi, 1.0)})
            closed = (power / quad) ** (1.0 / (2.0 - pp)) if quad > 0 else float("nan")
            return PathMaximum(float(opt.x), float(-opt.fun), beta_end, float(vals[-1]), closed)
        beta_end *= 2.0
    raise ConvergenceError("path maximum stays at the endpoint; J does not become negative along the path")


def mountain_pass_descent(problem: DualProblem, config: SolverConfig, direction: TimeField | None = None,
                          C_R: float | None = None) -> Solution:
    """Path maximum along a basis direction, then Armijo mirror descent on the Nehari set."""
    rng = np.random.default_rng(config.seed)
    basis = MPGBasis.build(problem)
    if direction is None:
        direction = initial_guess(problem, config, basis, rng)
    k0 = config.init_mode or basis.ks[0]
    r = 0.0
    if C_R is not None:
        from .dual_problem import mountain_pass_constants

        r, _ = mountain_pass_constants(C_R, problem.pprime)
    R_end = max(basis.radius(k0, r), problem.lp_norm(direction) * 1e-12)
    pm = path_maximum(problem, direction, R_end, config.path_points)
    V = pm.beta * direction
    pp, p = problem.pprime, problem.p

    RV = problem.big_R(V)
    t = nehari_factor(problem, *_parts(problem, V, RV))
    V, RV = t * V, t * RV
    res, nv = _residual_from(problem, V, RV)
    J = _J_from(problem, V, RV, nv)
    log_ = IterationLog()
    log_.add(0, J, res, nv, t)
    lam = config.max_step
    it = 0
    converged = res < config.tol
    notes = [f"path maximum beta={pm.beta:.12g} J={pm.J:.12g} (closed form beta={pm.closed_form_beta:.12g})"]
    while not converged and it < config.max_iter:
        sv = problem.samples(V)
        dual = signed_power(sv, pp)
        Gs = dual - problem.samples(RV)
        G = problem.analyze(Gs)
        lam = min(config.max_step, lam / config.backtrack)
        while True:
            W = problem.analyze(signed_power(dual - lam * Gs, p))
            RW = problem.big_R(W)
            tn = nehari_factor(problem, *_parts(problem, W, RW))
            Vn, RVn = tn * W, tn * RW
            _, nvn = _residual_from(problem, Vn, RVn)
            Jn = _J_from(problem, Vn, RVn, nvn)
            decrease = (V - Vn).pairing(G)
            # the roundoff allowance keeps the test meaningful once J is converged to machine precision
            if Jn <= J - config.armijo * decrease + 16 * np.finfo(float).eps * abs(J) or lam < 1e-12:
                break
            lam *= config.backtrack
        V, RV, J, t = Vn, RVn, Jn, tn
        it += 1
        res, nv = _residual_from(problem, V, RV)
        log_.add(it, J, res, nv, t)
        converged = res < config.tol
        if lam < 1e-12 and not converged:
            notes.append("line search stalled")
            break
    sol = make_solution(problem, V, log_, it, converged, "mountain_pass_descent", notes)
    sol.path = pm
    return sol


# ---------------------------------------------------------------------------
# Newton-Krylov polish and deflation
# ---------------------------------------------------------------------------


def newton_polish(problem: DualProblem, V: TimeField, config: SolverConfig,
                  log_: IterationLog | None = None, it0: int = 0) -> tuple[TimeField, IterationLog, int, bool]:
    """Solve ``W = R[|W|^{p-2} W]`` by Newton-GMRES with residual backtracking.

    Works on collocation samples; ``V = |W|^{p-2} W`` on exit.
    """
    p = problem.p
    log_ = log_ or IterationLog()
    shape = (problem.M, *problem.grid.shape)

    def Rs(s):
        return problem.samples(problem.big_R(problem.analyze(s)))

    W = signed_power(problem.samples(V), problem.pprime)
    it = it0
    converged = False
    for _ in range(config.newton_max_iter + 1):
        Vc = problem.analyze(signed_power(W, p))
        RV = problem.big_R(Vc)
        res, nv = _residual_from(problem, Vc, RV)
        log_.add(it, _J_from(problem, Vc, RV, nv), res, nv, 1.0)
        if res < config.tol:
            converged = True
            break
        if it - it0 >= config.newton_max_iter:
            break
        F = W - problem.samples(RV)
        a = (p - 1.0) * np.abs(W) ** (p - 2.0)
        op = sla.LinearOperator((F.size, F.size), dtype=float,
                                matvec=lambda x: (x.reshape(shape) - Rs(a * x.reshape(shape))).ravel())
        d, _info = sla.gmres(op, -F.ravel(), rtol=min(1e-2, 0.1 * res), restart=config.gmres_restart,
                             maxiter=20)
        d = d.reshape(shape)
        fnorm = np.linalg.norm(F)
        step = 1.0
        while step > 1e-4:
            Wn = W + step * d
            Fn = Wn - Rs(signed_power(Wn, p))
            if np.linalg.norm(Fn) < fnorm:
                break
            step *= 0.5
        W = Wn
        it += 1
    return problem.analyze(signed_power(W, p)), log_, it, converged


def r_angle(problem: DualProblem, A: TimeField, B: TimeField) -> float:
    """Angle between two fields in the ``<., R .>`` pairing (sign-insensitive)."""
    RB = problem.big_R(B)
    aa = A.pairing(problem.big_R(A))
    bb = B.pairing(RB)
    if not (aa > 0 and bb > 0):
        return float("nan")
    c = abs(A.pairing(RB)) / math.sqrt(aa * bb)
    return float(math.acos(min(1.0, c)))


def deflate_and_continue(previous: list[Solution], problem: DualProblem, config: SolverConfig) -> Solution:
    """Find a critical point distinct from all ``previous`` solutions.

    Each attempt starts from a higher basis direction (cycling through the
    positive modes, reseeding the noise each round), runs the damped fixed
    point iteration, and polishes with Newton-Krylov.  The result is
    accepted when it converged and its angle to every previous solution
    exceeds ``config.angle_threshold``.
    """
    if not previous:
        return iterate_fixed_point(problem, config)
    basis = MPGBasis.build(problem)
    prev_V = [s.V for s in previous]
    k_first = config.init_mode or basis.ks[0]
    order = [k for k in basis.ks if k > k_first] + [k for k in basis.ks if k <= k_first]
    rng = np.random.default_rng(config.seed + 7919 * len(previous))
    notes = []
    V = None
    for attempt in range(config.reseeds + 1):
        for k in order:
            V0 = initial_guess(problem, config, basis, rng, mode=k)
            try:
                damped = iterate_fixed_point(problem, config, V0, previous=prev_V, damped_iter=config.damped_iter)
            except NehariError as exc:
                notes.append(f"attempt {attempt} start mode {k}: {exc}")
                continue
            V, log_, it, converged = newton_polish(problem, damped.V, config, damped.log, damped.iterations + 1)
            angles = [r_angle(problem, V, P) for P in prev_V]
            ok = converged and all(a > config.angle_threshold for a in angles)
            note = f"attempt {attempt} start mode {k}: converged={converged} angles={[round(a, 6) for a in angles]}"
            notes.append(note)
            log.info(note)
            if ok:
                return make_solution(problem, V, log_, it, True, "deflated_fixed_point+newton", notes)
    if V is None:
        raise ConvergenceError("deflation found no start in the positive cone: " + "; ".join(notes))
    sol = make_solution(problem, V, log_, it, False, "deflated_fixed_point+newton",
                        notes + ["collapsed onto a previous solution or failed to converge"])
    return sol


def solve(problem: DualProblem, config: SolverConfig, C_R: float | None = None) -> list[Solution]:
    """First solution with the configured scheme, then deflation up to ``deflation_count`` solutions."""
    if config.scheme == "nehari_fixed_point":
        first = iterate_fixed_point(problem, config)
    else:
        first = mountain_pass_descent(problem, config, C_R=C_R)
    out = [first]
    while len(out) < config.deflation_count and first.converged:
        nxt = deflate_and_continue(out, problem, config)
        out.append(nxt)
        if not nxt.converged:
            break
    return out


__all__ = [
    "SolverConfig",
    "Solution",
    "IterationLog",
    "MPGBasis",
    "ConvergenceError",
    "nehari_rescale",
    "iterate_fixed_point",
    "mountain_pass_descent",
    "deflate_and_continue",
    "newton_polish",
    "path_maximum",
    "r_angle",
    "solve",
]
