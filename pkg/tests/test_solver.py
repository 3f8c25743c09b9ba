import math

import numpy as np
import pytest

from breather.dual_problem import NehariError, mountain_pass_constants
from breather.solver import (
    MPGBasis,
    SolverConfig,
    deflate_and_continue,
    iterate_fixed_point,
    nehari_factor,
    nehari_rescale,
    path_maximum,
    r_angle,
)

from conftest import BENCH_TOL, make_problem, random_field


@pytest.fixture(scope="module")
def coarse():
    # same parameters as configs/small.conf
    return make_problem(K=3, L=16.0, n=64, epsilon=1e-3)


@pytest.fixture(scope="module")
def coarse_solution(coarse):
    sol = iterate_fixed_point(coarse, SolverConfig(tol=1e-12))
    assert sol.converged
    return sol


# -- configuration ------------------------------------------------------------------


@pytest.mark.parametrize(
    "kw",
    [{"tol": 0.0}, {"max_iter": 0}, {"scheme": "newton"}, {"backtrack": 1.0}, {"deflation_count": 0}],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SolverConfig(**kw)


def test_config_defaults():
    c = SolverConfig()
    assert (c.tol, c.max_iter, c.armijo, c.backtrack) == (1e-8, 2000, 1e-4, 0.5)


# -- Nehari normalisation -----------------------------------------------------------


def test_nehari_factor_example(coarse):
    t = nehari_factor(coarse, 1.0, 2.0)
    assert t == pytest.approx(0.25)
    assert t**1.5 * 1.0 == pytest.approx(t**2 * 2.0) == pytest.approx(0.125)
    J = (1 / 1.5 - 0.5) * t**1.5
    assert J == pytest.approx(0.0208333, abs=1e-7)


def test_nehari_rescale_lands_on_nehari_set(coarse):
    V = random_field(coarse, np.random.default_rng(0))
    t, W = nehari_rescale(coarse, V)
    power, _ = coarse.functional_parts(W)
    assert abs(coarse.directional_derivative(W, W)) < 1e-10 * power
    t2, _ = nehari_rescale(coarse, W)
    assert t2 == pytest.approx(1.0, abs=1e-10)


def test_nehari_rejects_nonpositive_form(coarse):
    with pytest.raises(NehariError, match="positive cone"):
        nehari_factor(coarse, 1.0, 0.0)


def test_zero_initial_field_is_an_error(coarse):
    with pytest.raises(NehariError):
        iterate_fixed_point(coarse, SolverConfig(), V0=coarse.zeros())


# -- basis and path maximum ------------------------------------------------------------


def test_basis_is_R_orthonormal(coarse):
    basis = MPGBasis.build(coarse)
    G = basis.gram()
    np.testing.assert_allclose(G, 2 * np.eye(len(basis.ks)), atol=1e-8)


def test_path_maximum_matches_closed_form(coarse):
    basis = MPGBasis.build(coarse)
    V1 = basis.fields[basis.ks[0]]
    P = coarse.lp_norm(V1) ** coarse.pprime
    pp = coarse.pprime
    # J(beta V1) = beta^p' P / p' - beta^2, maximised where beta^(p'-1) P = 2 beta
    beta_star = (P / 2) ** (1 / (2 - pp))
    pm = path_maximum(coarse, V1, basis.radius(basis.ks[0]))
    assert pm.beta == pytest.approx(beta_star, rel=1e-6)
    assert pm.J == pytest.approx(beta_star**pp * P / pp - beta_star**2, rel=1e-6)


def test_path_endpoint_is_negative(coarse):
    basis = MPGBasis.build(coarse)
    k = basis.ks[0]
    V1 = basis.fields[k]
    C_R = coarse.estimate_C_R(seed=0)
    r, _ = mountain_pass_constants(C_R, coarse.pprime)
    R1 = basis.radius(k, r)
    beta = 1.01 * R1 / coarse.lp_norm(V1)
    assert coarse.functional_J(beta * V1) < 0


# -- fixed point and deflation --------------------------------------------------------


def test_fixed_point_contract(coarse, coarse_solution):
    sol = coarse_solution
    assert sol.residual < 1e-12 and sol.J_value > 0
    assert sol.residual == pytest.approx(coarse.residual(sol.V), rel=1e-6)
    power, _ = coarse.functional_parts(sol.V)
    assert abs(coarse.directional_derivative(sol.V, sol.V)) < 1e-8 * power
    assert len(sol.nehari_t) == sol.iterations + 1


def test_fixed_point_is_deterministic(coarse, coarse_solution):
    again = iterate_fixed_point(coarse, SolverConfig(tol=1e-12))
    assert again.log.to_csv() == coarse_solution.log.to_csv()
    assert np.array_equal(again.V.modes, coarse_solution.V.modes)


def test_relaxed_step_keeps_positive_cone_fallback(coarse, coarse_solution):
    # at a fixed point the relaxed step with any lambda reproduces the iterate
    from breather.solver import _relaxed_step

    V = coarse_solution.V
    W = _relaxed_step(coarse, V, coarse.big_R(V), 0.5)
    assert np.max(np.abs(W.modes - V.modes)) < 1e-9 * np.max(np.abs(V.modes))


def test_deflation_without_previous_is_fixed_point(coarse, coarse_solution):
    sol = deflate_and_continue([], coarse, SolverConfig(tol=1e-12))
    assert sol.log.to_csv() == coarse_solution.log.to_csv()


def test_deflation_finds_distinct_solution(coarse, coarse_solution):
    second = deflate_and_continue([coarse_solution], coarse, SolverConfig(tol=1e-12))
    assert second.converged and second.residual < 1e-12
    assert r_angle(coarse, second.V, coarse_solution.V) > 0.1
    assert second.norm_V > coarse_solution.norm_V or second.dominant_mode() != coarse_solution.dominant_mode()


def test_r_angle_of_field_with_itself(coarse, coarse_solution):
    assert r_angle(coarse, coarse_solution.V, -2.0 * coarse_solution.V) == pytest.approx(0.0, abs=1e-7)


# -- benchmark -------------------------------------------------------------------------------


def test_benchmark_converges_above_mountain_pass_level(bench_problem, bench_solution):
    assert bench_solution.residual < 1e-8
    C_R = bench_problem.estimate_C_R(seed=0, extra=[bench_solution.V])
    _, delta = mountain_pass_constants(C_R, bench_problem.pprime)
    assert bench_solution.J_value >= delta - 1e-6


def test_doubling_K_changes_J_by_less_than_one_percent(bench_solution):
    fine = make_problem(K=15)
    sol = iterate_fixed_point(fine, SolverConfig(tol=BENCH_TOL))
    assert sol.converged
    assert abs(sol.J_value - bench_solution.J_value) < 0.01 * bench_solution.J_value
    assert math.isfinite(sol.J_value)
