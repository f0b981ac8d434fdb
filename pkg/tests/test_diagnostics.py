import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from odegrad import ode
from odegrad.autodiff import constant_field, linear_field, mlp_field
from odegrad.diagnostics import (adjoint_norm_bound, bound_report, delta_a_bound, fd_gradient,
                                 gradient_error, hessian_mixed_norm_estimate, log_norm, reference_adjoint,
                                 reference_solution, sample_grid)
from odegrad.errors import ConfigError, DimensionError, NonFiniteError
from odegrad.grad import MethodConfig, OdeProblem, forward, grad
from odegrad.interp import BaryInterpolant, make_grid
from odegrad.ode import SolverConfig
from odegrad.problems import mlp_case

from conftest import rel_inf

# -- logarithmic norm ------------------------------------------------------------------------------------


def test_log_norm_examples():
    assert abs(log_norm(np.diag([-1.0, -3.0])) + 1.0) <= 1e-12
    assert abs(log_norm([[0.0, 1.0], [-1.0, 0.0]])) <= 1e-12
    assert abs(log_norm([[0.0, 2.0], [0.0, 0.0]]) - 1.0) <= 1e-12


def test_log_norm_rejects_bad_input():
    with pytest.raises(DimensionError):
        log_norm(np.zeros((2, 3)))
    with pytest.raises(NonFiniteError):
        log_norm([[np.inf, 0.0], [0.0, 1.0]])


mat5 = arrays(np.float64, (5, 5), elements=st.floats(-10, 10, allow_nan=False))


@settings(max_examples=60, deadline=None)
@given(A=mat5, B=mat5)
def test_log_norm_subadditive(A, B):
    assert log_norm(A + B) <= log_norm(A) + log_norm(B) + 1e-10


@settings(max_examples=60, deadline=None)
@given(A=mat5, alpha=st.floats(0, 100))
def test_log_norm_positive_homogeneous(A, alpha):
    assert abs(log_norm(alpha * A) - alpha * log_norm(A)) <= 1e-12 * max(1.0, abs(alpha * log_norm(A)))


@settings(max_examples=30, deadline=None)
@given(A=arrays(np.float64, (3, 3), elements=st.floats(-2, 2)), x0=arrays(np.float64, 3, elements=st.floats(-2, 2)),
       b=arrays(np.float64, 3, elements=st.floats(-2, 2)))
def test_lemma_bound_for_linear_family(A, x0, b):
    # x' = A x + b; ||x(t)|| <= e^{mu t} ||x0|| + ||b|| (e^{mu t} - 1) / mu
    mu = log_norm(A)
    sol = ode.solve(lambda x, t: A @ x + b, x0, (0.0, 1.0), SolverConfig.tol(1e-11))
    for t in np.linspace(0.0, 1.0, 101):
        growth = t if abs(mu) < 1e-12 else math.expm1(mu * t) / mu
        bound = math.exp(mu * t) * np.linalg.norm(x0) + np.linalg.norm(b) * growth
        assert np.linalg.norm(sol(t)) <= bound * (1 + 1e-8) + 1e-9


def test_sample_grid():
    ts = sample_grid((0.0, 2.0), 5)
    assert ts[0] == 0.0 and ts[-1] == 2.0
    assert np.all(np.diff(ts) > 0)
    with pytest.raises(ConfigError):
        sample_grid((0.0, 1.0), 1)


# -- adjoint norm bound ------------------------------------------------------------------------------------------


def _linear(theta, tol=1e-10):
    problem = OdeProblem(linear_field(theta), [1.0], (0.0, 1.0), SolverConfig.tol(tol))
    return problem, reference_solution(problem)


def test_adjoint_bound_flat_for_zero_field():
    problem, sol = _linear(0.0)
    bound = adjoint_norm_bound(problem, sol, [2.0], 33)
    np.testing.assert_allclose(bound.values, 2.0, rtol=0, atol=1e-15)


@pytest.mark.parametrize("theta", [-1.0, 0.5])
def test_adjoint_bound_closed_form(theta):
    # mu = theta is constant, so the bound is ||seed|| exp(theta (t1 - t)), the exact adjoint norm
    problem, sol = _linear(theta)
    bound = adjoint_norm_bound(problem, sol, [1.0], 65)
    np.testing.assert_allclose(bound.values, np.exp(theta * (1.0 - bound.times)), rtol=1e-12)
    assert bound.values[-1] == 1.0


def test_adjoint_bound_dominates_measured():
    for seed in range(3):
        case = mlp_case(seed, 1e-8)
        sol = reference_solution(case.problem)
        bound = adjoint_norm_bound(case.problem, sol, case.seed, 101)
        adj = reference_adjoint(case.problem, case.seed, sol=sol)
        measured = np.linalg.norm(adj.dense_eval_many(bound.times)[:, :4], axis=1)
        assert np.all(measured <= bound.values * (1 + 1e-9))


# -- delta a bound ------------------------------------------------------------------------------------------------


def test_delta_a_bound_zero_for_exact_interpolant():
    # states of a constant field are linear in t, which BLI reproduces exactly
    problem = OdeProblem(constant_field([1.0, -2.0]), [0.0, 0.0], (0.0, 1.0), SolverConfig.tol(1e-10))
    sol = reference_solution(problem)
    g = make_grid(4, problem.span)
    interp = BaryInterpolant(g, np.stack([sol(t) for t in g.nodes]))
    xi = delta_a_bound(problem, sol, interp, [1.0, 1.0], 33)
    np.testing.assert_array_equal(xi.values, 0.0)


def test_delta_a_bound_zero_seed():
    case = mlp_case(0, 1e-8)
    sol = reference_solution(case.problem)
    _, art = forward(case.problem, MethodConfig.irdm(4))
    xi = delta_a_bound(case.problem, sol, art.interpolant, np.zeros(4), 33)
    np.testing.assert_array_equal(xi.values, 0.0)


def test_bound_report_dominance_and_invariants():
    case = mlp_case(0, 1e-10)
    rep = bound_report(case.problem, 3, case.seed, quad_points=101)
    assert rep.a_norm_bound[-1] == pytest.approx(np.linalg.norm(case.seed))
    assert rep.delta_a_bound[-1] == 0.0
    assert np.all(rep.delta_a_bound >= 0) and np.all(rep.a_norm_bound > 0)
    assert np.all(rep.measured_a_norm <= rep.a_norm_bound * 1.1)
    assert np.all(rep.measured_delta_a <= rep.delta_a_bound * 1.1)
    assert rep.interp_error_max > 0 and rep.measured_E > 0
    buf = io.StringIO()
    rep.to_csv(buf)
    rows = buf.getvalue().strip().splitlines()
    assert rows[0] == "t,measured_a_norm,a_norm_bound,measured_delta_a,delta_a_bound"
    assert len(rows) == 102


# -- gradient error and finite differences --------------------------------------------------------------------------


def test_gradient_error_self_comparison():
    case = mlp_case(0, 1e-7)
    err = gradient_error(case.problem, MethodConfig.direct(), case.seed, case.problem.cfg)
    assert err.l1 <= 1e-12 and err.l2 <= 1e-12


def test_gradient_error_rejects_looser_reference():
    case = mlp_case(0, 1e-7)
    with pytest.raises(ConfigError):
        gradient_error(case.problem, MethodConfig.rdm(), case.seed, SolverConfig.tol(1e-5))


def test_gradient_error_linear_analytic():
    problem, _ = _linear(1.0, tol=1e-8)
    for m in (MethodConfig.rdm(), MethodConfig.irdm(16), MethodConfig.checkpoint(4)):
        got = grad(problem, m, [1.0]).dL_dtheta[0]
        assert abs(got - math.e) <= 1e-5
        err = gradient_error(problem, m, [1.0], SolverConfig.tol(1e-12))
        assert err.l1 <= 1e-5
        assert abs(err.reference_grad[0] - math.e) <= 1e-9


def test_gradient_error_decreases_with_tolerance():
    errs = []
    for tol in (1e-3, 1e-5, 1e-7):
        case = mlp_case(4, tol, hidden=8)
        errs.append(gradient_error(case.problem, MethodConfig.irdm(16), case.seed, SolverConfig.tol(1e-10)).l1)
    assert errs[0] > errs[1] > errs[2]


def test_fd_examples():
    problem, _ = _linear(0.0)
    fd = fd_gradient(problem, lambda z: z[0])
    assert abs(fd.dL_dtheta[0] - 1.0) <= 1e-6
    const = OdeProblem(constant_field([0.7]), [0.0], (0.0, 1.0))
    assert abs(fd_gradient(const, [1.0]).dL_dtheta[0] - 1.0) <= 1e-8


def test_fd_agrees_with_direct():
    case = mlp_case(2, 1e-10)
    fd = fd_gradient(case.problem, case.loss)
    direct = grad(case.problem, MethodConfig.direct(), case.seed)
    assert rel_inf(direct.dL_dtheta, fd.dL_dtheta) <= 1e-4
    assert rel_inf(direct.dL_dz0, fd.dL_dz0) <= 1e-4


def test_fd_validation():
    problem, _ = _linear(0.0)
    with pytest.raises(ConfigError):
        fd_gradient(problem, [1.0], h=0.0)
    with pytest.raises(NonFiniteError):
        fd_gradient(problem, lambda z: math.nan)


# -- mixed second derivative ------------------------------------------------------------------------------------------


def test_mixed_hessian_linear_scalar():
    assert abs(hessian_mixed_norm_estimate(linear_field(0.7), [0.4], 0.0) - 1.0) <= 1e-3


def test_mixed_hessian_constant_field():
    assert abs(hessian_mixed_norm_estimate(constant_field([1.0, 2.0]), [0.3, 0.1], 0.0)) <= 1e-6


def test_mixed_hessian_step_robust():
    field = mlp_field(3, 6, seed=1)
    z = np.array([0.2, -0.3, 0.5])
    full = hessian_mixed_norm_estimate(field, z, 0.0)
    assert full > 0

    # exact spectral norm of the map built with half the finite-difference step
    d, p = 3, field.param_dim
    eps = 0.5e-4 * (1.0 + np.linalg.norm(z))
    T = np.empty((d * p, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = eps
        T[:, j] = ((field.jacobian_params(z + e, 0.0) - field.jacobian_params(z - e, 0.0)) / (2 * eps)).ravel()
    half = np.linalg.norm(T, 2)
    assert abs(full - half) <= 0.05 * half
    assert hessian_mixed_norm_estimate(field, z, 0.0, seed=5) == pytest.approx(full, rel=1e-6)
