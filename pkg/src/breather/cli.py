"""
Command line entry point: ``breather {solve,verify,sweep,resolvent-bench}``.

Exit codes: 0 pass, 1 verification failure, 2 configuration or input error,
3 non-convergence.  Every manifest starts with the fully resolved
configuration; wall-clock timings go to ``timing.csv`` only, so all other
artifacts are byte-identical for identical config and seed.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import SWEEP_AXES, ConfigError, RunConfig
from .dual_problem import DualProblem, NehariError, PotentialError, mountain_pass_constants
from .resolvent import AdmissibilityError, ResolventError, norm_decay_report
from .solver import ConvergenceError, Solution, deflate_and_continue, iterate_fixed_point, newton_polish, r_angle, solve
from .spectral_domain import SnapshotError, project_symmetry, read_snapshot, write_real_snapshot, write_snapshot
from .verify import (
    DecaySignalError,
    VerificationReport,
    assumption_report,
    decay_profile,
    epsilon_refinement,
    verify_solution,
)

log = logging.getLogger("breather")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_NONCONVERGED = 0, 1, 2, 3


class UsageError(Exception):
    """Invalid configuration or input; maps to exit code 2."""


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# setup
# ---------------------------------------------------------------------------


def build_problem(cfg: RunConfig) -> DualProblem:
    """Validate the configuration and assemble the dual problem."""
    try:
        params = cfg.problem()
        spec = cfg.operator()
        params.validate(spec)
        if cfg["verify.norm_trials"] < 16:
            raise ConfigError("verify.norm_trials must be at least 16")
        grid = params.grid(cfg["run.threads"])
        Q = cfg.potential(grid)
        return DualProblem(params, spec, Q, validate=False)
    except (ConfigError, ResolventError, AdmissibilityError, PotentialError, SnapshotError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _manifest(cfg: RunConfig, sections: dict[str, dict]) -> str:
    out = ["# resolved configuration", cfg.resolved().rstrip("\n")]
    for title, entries in sections.items():
        out.append(f"# {title}")
        out += [f"{k} = {v}" for k, v in entries.items()]
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# verification of a single solution
# ---------------------------------------------------------------------------


def mountain_pass_check(problem: DualProblem, V, seed: int) -> tuple[VerificationReport, float, float]:
    """``J(V) >= delta - 1e-6`` with delta from the empirical norm of ``R``."""
    rep = VerificationReport()
    C_R = problem.estimate_C_R(seed=seed, extra=[V])
    _, delta = mountain_pass_constants(C_R, problem.pprime)
    J = problem.functional_J(V)
    rep.add("C_R_estimate", C_R, float("inf"), informational=True)
    rep.add("J_above_delta", J - delta, -1e-6, upper=False)
    return rep, C_R, delta


def full_verification(cfg: RunConfig, problem: DualProblem, V, previous=()) -> VerificationReport:
    tol = cfg["solver.tol"]
    seed = cfg["run.seed"]
    rep = verify_solution(problem, V, count=cfg["verify.test_functions"], seed=seed, tol=tol)
    rep.extend(mountain_pass_check(problem, V, seed)[0])
    J = problem.functional_J(V)
    for i, P in enumerate(previous, 1):
        rep.add(f"angle_to_solution_{i}", r_angle(problem, V, P), cfg["solver.angle_threshold"], upper=False)
        JP = problem.functional_J(P)
        rep.add(f"J_distinct_from_solution_{i}", abs(J - JP) / abs(JP), 1e-4, upper=False)
    if cfg["verify.epsilon_refinement"]:
        solver_cfg = cfg.solver()

        def refine(prob, V0):
            sol = iterate_fixed_point(prob, solver_cfg, V0)
            if not sol.converged:
                V1, *_ = newton_polish(prob, sol.V, solver_cfg)
                return V1
            return sol.V

        rep.extend(epsilon_refinement(problem, V, refine, count=cfg["verify.test_functions"], seed=seed)[0])
    if cfg["verify.cross_check"] and not previous:
        other = "mountain_pass_descent" if cfg["solver.scheme"] == "nehari_fixed_point" else "nehari_fixed_point"
        sol = solve(problem, replace(cfg.solver(), scheme=other, deflation_count=1))[0]
        rep.add("cross_scheme_J_relative_difference", abs(sol.J_value - J) / abs(J), 1e-4,
                passed=sol.converged and abs(sol.J_value - J) < 1e-4 * abs(J))
    return rep


def _solution_sections(sol: Solution, rep: VerificationReport) -> dict[str, dict]:
    diag = {
        "scheme": sol.scheme,
        "converged": str(sol.converged).lower(),
        "iterations": sol.iterations,
        "J_value": _fmt(sol.J_value),
        "residual": _fmt(sol.residual),
        "norm_V_pprime": _fmt(sol.norm_V),
        "dominant_mode": sol.dominant_mode(),
    }
    energy = {f"mode_{k}_norm_pprime": _fmt(v) for k, v in sorted(sol.mode_energy.items())}
    checks = {c.name: f"{c.value!r} ({'info' if c.informational else ('pass' if c.passed else 'FAIL')})"
              for c in rep.checks}
    sections = {"solution": diag, "mode energies": energy, "verification": checks}
    if sol.notes:
        sections["notes"] = {f"note_{i}": n for i, n in enumerate(sol.notes)}
    return sections


def write_solution(cfg: RunConfig, directory: Path, sol: Solution, rep: VerificationReport | None) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    if cfg["output.snapshots"]:
        write_snapshot(directory / "V.snap", sol.V)
        write_snapshot(directory / "U.snap", sol.U)
    _write(directory / "iterations.csv", sol.log.to_csv())
    _write(directory / "timing.csv", sol.log.timing_csv())
    rep = rep or VerificationReport()
    _write(directory / "verification.txt", rep.to_text())
    _write(directory / "verification.csv", rep.to_csv())
    _write(directory / "manifest.txt", _manifest(cfg, _solution_sections(sol, rep)))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_solve(cfg: RunConfig) -> int:
    problem = build_problem(cfg)
    out = Path(cfg["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    write_real_snapshot(out / "potential.snap", problem.grid, problem.Q.values)

    assumptions = assumption_report(problem.params, problem.spec, problem.Q, cfg["verify.decay_modes"],
                                    trials=cfg["verify.norm_trials"], seed=cfg["run.seed"])
    _write(out / "assumptions.txt", assumptions.to_text())
    _write(out / "assumptions.csv", assumptions.to_csv())
    if not assumptions.passed:
        log.warning("assumption checks failed: %s", [c.name for c in assumptions.failures()])

    solver_cfg = cfg.solver()
    try:
        first = solve(problem, replace(solver_cfg, deflation_count=1))[0]
    except NehariError as exc:
        _write(out / "manifest.txt", _manifest(cfg, {"run": {"status": "no_start", "error": str(exc)}}))
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    solutions = [first]
    status = "ok"
    while solutions[-1].converged and len(solutions) < solver_cfg.deflation_count:
        try:
            nxt = deflate_and_continue(solutions, problem, solver_cfg)
        except ConvergenceError as exc:
            status = f"deflation failed: {exc}"
            break
        solutions.append(nxt)

    exit_code = EXIT_OK
    summary = {"status": status, "solutions": len(solutions), "assumptions": "pass" if assumptions.passed else "FAIL"}
    previous = []
    for i, sol in enumerate(solutions, 1):
        d = out / f"solution_{i}"
        if not sol.converged:
            write_solution(cfg, d, sol, None)
            summary[f"solution_{i}"] = f"not converged (residual {sol.residual!r})"
            exit_code = EXIT_NONCONVERGED
            break
        rep = full_verification(cfg, problem, sol.V, previous)
        write_solution(cfg, d, sol, rep)
        summary[f"solution_{i}"] = f"J={sol.J_value!r} residual={sol.residual!r} " \
                                   f"verification={'pass' if rep.passed else 'FAIL'}"
        print(f"solution {i}: J = {sol.J_value:.12g}, residual = {sol.residual:.3e}, "
              f"verification {'pass' if rep.passed else 'FAIL'}")
        if not rep.passed and exit_code == EXIT_OK:
            for c in rep.failures():
                print(f"  failed: {c.name} = {c.value:.6g} (tolerance {c.tolerance:.3g})")
            exit_code = EXIT_VERIFY
        previous.append(sol.V)
    if status != "ok" and exit_code == EXIT_OK:
        exit_code = EXIT_NONCONVERGED
    _write(out / "manifest.txt", _manifest(cfg, {"run": summary}))
    return exit_code


def cmd_verify(cfg: RunConfig, solution_dir: Path) -> int:
    problem = build_problem(cfg)
    path = Path(solution_dir) / "V.snap"
    try:
        V = read_snapshot(path, cfg["run.threads"])
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc
    except SnapshotError as exc:
        raise UsageError(str(exc)) from exc
    p = problem.params
    if V.grid != problem.grid or V.sym != p.s or V.K != p.K or not math.isclose(V.period, p.T):
        raise UsageError(f"{path}: snapshot discretization does not match the configuration")
    V = problem.field(V.modes)
    defect = float(np.max(np.abs(project_symmetry(V, p.s).modes - V.modes)))
    if defect > 1e-10 * max(float(np.max(np.abs(V.modes))), 1e-300):
        raise UsageError(f"{path}: snapshot is not a real field of symmetry class s = {p.s}")
    rep = verify_solution(problem, V, count=cfg["verify.test_functions"], seed=cfg["run.seed"],
                          tol=cfg["solver.tol"])
    rep.extend(mountain_pass_check(problem, V, cfg["run.seed"])[0])
    out = Path(cfg["output.dir"])
    _write(out / "reverification.txt", rep.to_text())
    _write(out / "reverification.csv", rep.to_csv())
    print(rep.to_text(), end="")
    return EXIT_OK if rep.passed else EXIT_VERIFY


def cmd_sweep(cfg: RunConfig, axis: str | None = None) -> int:
    axis = axis or cfg["sweep.axis"]
    if axis not in SWEEP_AXES:
        raise UsageError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    values = cfg["sweep.values"]
    if not values:
        raise UsageError("sweep.values must list at least one value")
    key = SWEEP_AXES[axis]
    runs = []
    for v in values:
        if key == "problem.K":
            if v != int(v):
                raise UsageError(f"k_cutoff values must be integers, got {v}")
            v = int(v)
        sub = RunConfig({**cfg.values, key: v, "solver.deflation_count": 1})
        runs.append((v, sub, build_problem(sub)))  # validates every sub-run before computing

    out = Path(cfg["output.dir"])
    all_modes = sorted({k for _, _, prob in runs for k in prob.modes if k > 0})
    header = ["value", "J_value", "residual", "converged", "iterations", "J_relative_change",
              "decay_slope"] + [f"mode_{k}" for k in all_modes]
    rows = [",".join(["axis=" + axis] + header[1:])]
    prev_J = None
    exit_code = EXIT_OK
    for v, sub, prob in runs:
        sol = solve(prob, sub.solver())[0]
        if not sol.converged:
            exit_code = EXIT_NONCONVERGED
        change = abs(sol.J_value - prev_J) / abs(prev_J) if prev_J else float("nan")
        prev_J = sol.J_value
        try:
            slope, _ = decay_profile(sol.U, prob.p)
        except DecaySignalError:
            slope = float("nan")
        energy = [sol.mode_energy.get(k, float("nan")) for k in all_modes]
        cells = [repr(v), _fmt(sol.J_value), _fmt(sol.residual), str(sol.converged).lower(), str(sol.iterations),
                 _fmt(change), _fmt(slope)] + [_fmt(e) for e in energy]
        rows.append(",".join(cells))
        print(f"{axis} = {v}: J = {sol.J_value:.12g}, residual = {sol.residual:.3e}")
    _write(out / "sweep.csv", "\n".join(rows) + "\n")
    _write(out / "manifest.txt", _manifest(cfg, {"sweep": {"axis": axis, "runs": len(runs)}}))
    return exit_code


def cmd_resolvent_bench(cfg: RunConfig) -> int:
    problem = build_problem(cfg)
    window = problem.params.validate(problem.spec)
    ks = cfg["bench.modes"] or list(range(1, 16))
    report = norm_decay_report(problem.spec, ks, problem.p, problem.grid, window.alpha,
                               problem.params.resolvent_params(), problem.Q.values,
                               cfg["verify.norm_trials"], cfg["run.seed"])
    text = report.to_csv(problem.params.epsilon)
    out = Path(cfg["output.dir"])
    _write(out / "resolvent_bench.csv", text)
    _write(out / "manifest.txt", _manifest(cfg, {"resolvent bench": {
        "slope": _fmt(report.slope), "target_slope": _fmt(report.target_slope),
        "passes": str(report.passes()).lower()}}))
    print(text, end="")
    return EXIT_OK if report.passes() else EXIT_VERIFY


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="breather", description="Compute and verify time-periodic breathers.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="flat key = value configuration file")
    common.add_argument("--out", help="output directory (overrides output.dir)")
    common.add_argument("--seed", type=int, help="random seed (overrides run.seed)")
    common.add_argument("--threads", type=int, help="FFT worker threads (overrides run.threads)")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="override a configuration key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="solve, deflate and verify")
    v = sub.add_parser("verify", parents=[common], help="re-verify a stored solution directory")
    v.add_argument("solution_dir")
    s = sub.add_parser("sweep", parents=[common], help="refinement study along one axis")
    s.add_argument("--axis", choices=sorted(SWEEP_AXES))
    sub.add_parser("resolvent-bench", parents=[common], help="operator-norm decay of the weighted resolvents")
    return parser


def load_config(args) -> RunConfig:
    overrides = list(args.override)
    if args.out is not None:
        overrides.append(f"output.dir={args.out}")
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.threads is not None:
        overrides.append(f"run.threads={args.threads}")
    return RunConfig.load(args.config, overrides)


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        if args.command == "solve":
            return cmd_solve(cfg)
        if args.command == "verify":
            return cmd_verify(cfg, Path(args.solution_dir))
        if args.command == "sweep":
            return cmd_sweep(cfg, args.axis)
        return cmd_resolvent_bench(cfg)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
