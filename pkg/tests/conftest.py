import numpy as np
import pytest

from breather.dual_problem import DualProblem, Potential, ProblemParams
from breather.resolvent import laplacian
from breather.solver import SolverConfig, iterate_fixed_point
from breather.spectral_domain import project_symmetry

# tolerance used for benchmark solves: the pointwise duality identity is checked at 1e-10
BENCH_TOL = 1e-12


def make_problem(**kw) -> DualProblem:
    params = ProblemParams(**kw)
    Q = Potential.gaussian(params.grid(), params.p, params.q)
    return DualProblem(params, laplacian(), Q)


def random_field(problem: DualProblem, rng: np.random.Generator, localized: bool = True):
    shape = (len(problem.modes), *problem.grid.shape)
    z = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    if localized:
        z = z * problem.Q.root_p
    return project_symmetry(problem.field(z), problem.params.s)


@pytest.fixture(scope="session")
def small_problem():
    """Coarse grid for fast operator tests."""
    return make_problem(K=3, L=8.0, n=32, epsilon=1e-2)


@pytest.fixture(scope="session")
def bench_problem():
    return make_problem()


@pytest.fixture(scope="session")
def bench_solution(bench_problem):
    sol = iterate_fixed_point(bench_problem, SolverConfig(tol=BENCH_TOL))
    assert sol.converged
    return sol


# -- acceptance summary ----------------------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed and rep.when != "call":
        detail = f"{rep.when} error"
    _ACCEPTANCE[number] = (title, rep.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} {number:2d}. {title}: {detail}")
