"""
Flat ``key = value`` run configuration.

Keys are dotted (``problem.p``, ``solver.tol`` ...).  Blank lines and ``#``
comments are ignored, booleans are ``true``/``false``, and unknown keys are
rejected.  ``RunConfig.resolved()`` lists every key with its effective value
so manifests can reproduce a run exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

from .dual_problem import Potential, ProblemParams
from .resolvent import OperatorSpec
from .solver import SolverConfig
from .spectral_domain import SpaceGrid, read_real_snapshot


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    if s.lower() == "true":
        return True
    if s.lower() == "false":
        return False
    raise ValueError(f"expected true/false, got {s!r}")


def _optional_int(s: str):
    return None if s.lower() in ("auto", "none", "") else int(s)


def _int_list(s: str) -> list[int]:
    """``1,2,5`` or ``1..15``."""
    s = s.strip()
    if ".." in s:
        a, b = s.split("..")
        return list(range(int(a), int(b) + 1))
    return [int(x) for x in s.split(",") if x.strip()]


def _float_list(s: str) -> list[float]:
    return [float(x) for x in s.split(",") if x.strip()]


def _float(s: str) -> float:
    if s.strip().lower() in ("2pi", "2*pi"):
        return 2 * math.pi
    return float(s)


# key -> (parser, default)
SCHEMA: dict[str, tuple] = {
    "problem.N": (int, 2),
    "problem.p": (_float, 3.0),
    "problem.q": (_float, 8.0),
    "problem.s": (int, 3),
    "problem.T": (_float, 2 * math.pi),
    "problem.K": (int, 7),
    "problem.L": (_float, 16.0),
    "problem.n": (int, 128),
    "problem.epsilon": (_float, 1e-3),
    "problem.operator": (str, "fractional_laplacian"),
    "problem.gamma": (_float, 1.0),
    "problem.mass": (_float, 0.0),
    "potential.kind": (str, "gaussian"),
    "potential.amplitude": (_float, 1.0),
    "potential.width": (_float, 2.0),
    "potential.file": (str, ""),
    "solver.scheme": (str, "nehari_fixed_point"),
    "solver.max_iter": (int, 2000),
    "solver.tol": (_float, 1e-8),
    "solver.armijo": (_float, 1e-4),
    "solver.backtrack": (_float, 0.5),
    "solver.max_step": (_float, 0.5),
    "solver.deflation_count": (int, 1),
    "solver.init_mode": (_optional_int, None),
    "solver.noise": (_float, 1e-3),
    "solver.angle_threshold": (_float, 0.1),
    "solver.reseeds": (int, 5),
    "solver.damped_iter": (int, 100),
    "solver.damping": (_float, 1.0),
    "solver.newton_max_iter": (int, 30),
    "solver.gmres_restart": (int, 60),
    "solver.path_points": (int, 64),
    "verify.test_functions": (int, 20),
    "verify.decay_modes": (_int_list, None),
    "verify.norm_trials": (int, 16),
    "verify.epsilon_refinement": (_bool, False),
    "verify.cross_check": (_bool, False),
    "output.dir": (str, "out"),
    "output.snapshots": (_bool, True),
    "run.seed": (int, 0),
    "run.threads": (int, 1),
    "sweep.axis": (str, "epsilon"),
    "sweep.values": (_float_list, None),
    "bench.modes": (_int_list, None),
}

SWEEP_AXES = {"k_cutoff": "problem.K", "epsilon": "problem.epsilon", "box": "problem.L", "p": "problem.p"}


def _format(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ",".join(_format(v) for v in value)
    return str(value)


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        out[key.strip()] = value.strip()
    return out


@dataclass
class RunConfig:
    values: dict

    @classmethod
    def from_mapping(cls, raw: dict[str, str]) -> "RunConfig":
        unknown = sorted(set(raw) - set(SCHEMA))
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        values = {}
        for key, (parser, default) in SCHEMA.items():
            if key in raw:
                try:
                    values[key] = parser(raw[key])
                except ValueError as exc:
                    raise ConfigError(f"bad value for {key}: {raw[key]!r} ({exc})") from exc
            else:
                values[key] = default
        return cls(values)

    @classmethod
    def load(cls, path, overrides: list[str] | None = None) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        raw = parse_text(text, str(path))
        for ov in overrides or []:
            key, sep, value = ov.partition("=")
            if not sep:
                raise ConfigError(f"override must be key=value, got {ov!r}")
            raw[key.strip()] = value.strip()
        return cls.from_mapping(raw)

    def with_values(self, **updates) -> "RunConfig":
        vals = dict(self.values)
        for k, v in updates.items():
            key = k.replace("__", ".")
            if key not in SCHEMA:
                raise ConfigError(f"unknown configuration key {key}")
            vals[key] = v
        return RunConfig(vals)

    def __getitem__(self, key):
        return self.values[key]

    def resolved(self) -> str:
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in SCHEMA)

    # -- typed views ----------------------------------------------------------

    def problem(self) -> ProblemParams:
        v = self.values
        try:
            return ProblemParams(N=v["problem.N"], p=v["problem.p"], q=v["problem.q"], s=v["problem.s"],
                                 T=v["problem.T"], K=v["problem.K"], L=v["problem.L"], n=v["problem.n"],
                                 epsilon=v["problem.epsilon"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def operator(self) -> OperatorSpec:
        v = self.values
        try:
            if v["problem.operator"] == "klein_gordon":
                return OperatorSpec("klein_gordon", mass=v["problem.mass"])
            return OperatorSpec(v["problem.operator"], gamma=v["problem.gamma"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def solver(self) -> SolverConfig:
        v = self.values
        kw = {f.name: v[f"solver.{f.name}"] for f in fields(SolverConfig) if f"solver.{f.name}" in v}
        kw["seed"] = v["run.seed"]
        try:
            return SolverConfig(**kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def grid(self) -> SpaceGrid:
        return self.problem().grid(self.values["run.threads"])

    def potential(self, grid: SpaceGrid | None = None) -> Potential:
        v = self.values
        grid = grid or self.grid()
        params = self.problem()
        if v["potential.kind"] == "gaussian":
            return Potential.gaussian(grid, params.p, params.q, v["potential.amplitude"], v["potential.width"])
        if v["potential.kind"] == "file":
            if not v["potential.file"]:
                raise ConfigError("potential.kind = file requires potential.file")
            fgrid, values = read_real_snapshot(v["potential.file"], grid.workers)
            if fgrid != grid:
                raise ConfigError("potential file grid does not match the problem grid")
            return Potential(grid, values, params.p, params.q)
        raise ConfigError(f"unknown potential.kind {v['potential.kind']!r}")
