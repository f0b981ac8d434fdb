import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from odegrad import ode
from odegrad.autodiff import constant_field, linear_field, mlp_field
from odegrad.diagnostics import fd_gradient
from odegrad.errors import ConfigError, DimensionError, SpanError
from odegrad.grad import (MethodConfig, OdeProblem, backward, forward, grad, mse_loss,
                          trajectory_grad)
from odegrad.ode import SolverConfig
from odegrad.problems import cubic_trajectory, mlp_case
from odegrad.train import OptimizerConfig, train

from conftest import rel_inf

ALL = [MethodConfig.direct(), MethodConfig.rdm(), MethodConfig.irdm(16), MethodConfig.checkpoint(8)]
IDS = [m.label for m in ALL]


def scalar_problem(theta, tol=1e-8):
    return OdeProblem(linear_field(theta), [1.0], (0.0, 1.0), SolverConfig.tol(tol))


# -- forward ----------------------------------------------------------------------------------------


@pytest.mark.parametrize("mcfg", ALL, ids=IDS)
def test_forward_zero_field(mcfg):
    z1, _ = forward(scalar_problem(0.0), mcfg)
    assert z1[0] == 1.0


def test_forward_same_across_methods():
    ends = [forward(scalar_problem(1.0), m)[0][0] for m in ALL]
    assert abs(ends[0] - math.e) <= 1e-6
    assert len(set(ends)) == 1


def test_irdm_nodes_hold_exact_states():
    tol = 1e-8
    _, art = forward(scalar_problem(1.0, tol), MethodConfig.irdm(8))
    interp = art.interpolant
    np.testing.assert_allclose(interp.node_values[:, 0], np.exp(interp.grid.nodes), rtol=0, atol=10 * tol)


# -- analytic gradients ----------------------------------------------------------------------------------


@pytest.mark.parametrize("mcfg", ALL, ids=IDS)
def test_linear_theta_zero(mcfg):
    res = grad(scalar_problem(0.0), mcfg, [1.0])
    assert abs(res.dL_dtheta[0] - 1.0) <= 1e-5
    assert abs(res.dL_dz0[0] - 1.0) <= 1e-5


@pytest.mark.parametrize("mcfg", ALL, ids=IDS)
def test_linear_theta_one(mcfg):
    res = grad(scalar_problem(1.0), mcfg, [1.0])
    assert abs(res.dL_dtheta[0] - math.e) <= 1e-5
    assert abs(res.dL_dz0[0] - math.e) <= 1e-5


@pytest.mark.parametrize("mcfg", ALL, ids=IDS)
def test_zero_seed(mcfg):
    case = mlp_case(0, 1e-6)
    res = grad(case.problem, mcfg, np.zeros(4))
    np.testing.assert_array_equal(res.dL_dtheta, 0.0)
    np.testing.assert_array_equal(res.dL_dz0, 0.0)


def test_constant_field_gradient():
    problem = OdeProblem(constant_field([0.5, -1.0]), [0.0, 0.0], (0.0, 2.0), SolverConfig.tol(1e-8))
    for m in ALL:
        res = grad(problem, m, [1.0, 3.0])
        np.testing.assert_allclose(res.dL_dtheta, [2.0, 6.0], atol=1e-10)
        np.testing.assert_allclose(res.dL_dz0, [1.0, 3.0], atol=1e-12)


@pytest.fixture(scope="module")
def mlp_reference():
    case = mlp_case(1, 1e-10)
    fd = fd_gradient(case.problem, case.loss)
    return case, fd


@pytest.mark.parametrize("mcfg", ALL, ids=IDS)
def test_mlp_matches_finite_differences(mcfg, mlp_reference):
    case, fd = mlp_reference
    res = grad(case.problem, mcfg, case.seed)
    assert rel_inf(res.dL_dtheta, fd.dL_dtheta) <= 1e-4
    assert rel_inf(res.dL_dz0, fd.dL_dz0) <= 1e-4


def test_cross_method_agreement():
    case = mlp_case(2, 1e-8, hidden=6)
    grads = [grad(case.problem, m, case.seed).dL_dtheta for m in ALL]
    for a in grads:
        for b in grads:
            assert rel_inf(a, b) <= 1e-4


@settings(max_examples=8, deadline=None)
@given(alpha=st.floats(-10, 10).filter(lambda x: abs(x) > 1e-3), which=st.integers(0, 3))
def test_gradient_linear_in_seed(alpha, which):
    case = mlp_case(3, 1e-7)
    mcfg = ALL[which]
    a = np.array([0.3, -1.0, 2.0, 0.5])
    base = grad(case.problem, mcfg, a)
    scaled = grad(case.problem, mcfg, alpha * a)
    if mcfg.method in ("direct", "checkpoint"):
        tol = 1e-10
    else:
        # adaptive backward solves see a scaled adjoint, so step choices differ slightly
        tol = 1e-5
    assert rel_inf(scaled.dL_dtheta, alpha * base.dL_dtheta) <= tol


# -- structure and accounting -------------------------------------------------------------------------------


def test_backward_dimensions():
    case = mlp_case(0, 1e-6)
    d, p = 4, case.problem.field.param_dim
    assert grad(case.problem, MethodConfig.irdm(8), case.seed).stats.backward_dim == d + p
    assert grad(case.problem, MethodConfig.rdm(), case.seed).stats.backward_dim == 2 * d + p


def test_peak_stored_state_ordering():
    problem = OdeProblem(mlp_field(3, 8, seed=4), [0.5, -0.5, 1.0], (0.0, 6.0), SolverConfig.tol(1e-8))
    seed = np.ones(3)
    peak = {m.method: grad(problem, m, seed).stats.peak_stored_states
            for m in (MethodConfig.rdm(), MethodConfig.irdm(8), MethodConfig.checkpoint(16),
                      MethodConfig.direct())}
    assert peak["rdm"] == 1
    assert peak["irdm"] == 9
    assert peak["rdm"] <= peak["irdm"] <= peak["checkpoint"] <= peak["direct"]


def test_nfe_accounting_per_method():
    case = mlp_case(5, 1e-7)
    problem = case.problem
    direct = grad(problem, MethodConfig.direct(), case.seed)
    assert direct.stats.backward_nfe == 0
    assert direct.stats.forward_nfe == ode.solve(problem.field, problem.z0, problem.span, problem.cfg).nfe

    irdm = grad(problem, MethodConfig.irdm(8), case.seed)
    assert irdm.stats.backward_nfe == irdm.backward_solution.nfe

    ck = grad(problem, MethodConfig.checkpoint(4), case.seed)
    _, art = forward(problem, MethodConfig.checkpoint(4))
    edges = list(art.checkpoint_times) + [problem.span[1]]
    resolve = sum(ode.solve(problem.field, z, (edges[k], edges[k + 1]), problem.cfg).nfe
                  for k, z in enumerate(art.checkpoint_states))
    assert ck.stats.backward_nfe == resolve


def test_backward_checks_inputs():
    case = mlp_case(0, 1e-6)
    _, art = forward(case.problem, MethodConfig.rdm())
    with pytest.raises(ConfigError):
        backward(case.problem, MethodConfig.direct(), art, case.seed)
    with pytest.raises(DimensionError):
        backward(case.problem, MethodConfig.rdm(), art, np.ones(3))
    with pytest.raises(SpanError):
        backward(case.problem.with_span(0.0, 2.0), MethodConfig.rdm(), art, case.seed)


def test_method_config_validation():
    with pytest.raises(ConfigError):
        MethodConfig("adjoint")
    with pytest.raises(ConfigError):
        MethodConfig("rdm", N=4)
    with pytest.raises(ConfigError):
        MethodConfig("irdm")
    with pytest.raises(ConfigError):
        MethodConfig.irdm(8, "spline")
    with pytest.raises(ConfigError):
        MethodConfig("direct", K=3)
    assert MethodConfig.checkpoint().K == 8


def test_problem_validation():
    with pytest.raises(DimensionError):
        OdeProblem(linear_field(1.0), [1.0, 2.0], (0.0, 1.0))
    with pytest.raises(ConfigError):
        OdeProblem(linear_field(1.0), [1.0], (1.0, 0.0))


def test_backward_tolerance_override():
    case = mlp_case(0, 1e-5)
    loose = grad(case.problem, MethodConfig.rdm(), case.seed)
    tight = grad(case.problem, MethodConfig.rdm(backward_cfg=SolverConfig.tol(1e-10)), case.seed)
    assert tight.stats.backward_nfe > loose.stats.backward_nfe


# -- trajectory losses ----------------------------------------------------------------------------------------


def test_mse_loss_gradient():
    states = np.array([[1.0, 2.0], [0.0, -1.0]])
    targets = np.zeros((2, 2))
    value, cot = mse_loss(states, targets)
    assert value == pytest.approx(1.5)
    np.testing.assert_allclose(cot, states / 2)


@pytest.mark.parametrize("mcfg", ALL, ids=IDS)
def test_trajectory_grad_matches_fd(mcfg):
    field = mlp_field(2, 5, seed=9)
    problem = OdeProblem(field, [1.0, 0.0], (0.0, 1.0), SolverConfig.tol(1e-10))
    times = np.array([0.0, 0.25, 0.6, 1.0])
    targets = np.random.default_rng(0).normal(size=(4, 2))
    tg = trajectory_grad(problem, mcfg, times, targets)

    probe = field.copy()

    def loss(theta):
        probe.set_params(theta)
        _, states = ode.solve_with_outputs(probe, problem.z0, problem.span, SolverConfig.tol(1e-12), times)
        return mse_loss(states, targets)[0]

    theta = field.params.values.copy()
    h = 1e-5
    fd = np.array([(loss(theta + h * e) - loss(theta - h * e)) / (2 * h) for e in np.eye(theta.size)])
    assert rel_inf(tg.result.dL_dtheta, fd) <= 1e-5


def test_trajectory_grad_validation():
    problem = scalar_problem(1.0)
    with pytest.raises(ConfigError):
        trajectory_grad(problem, MethodConfig.rdm(), [0.5, 0.2], [[1.0], [1.0]])
    with pytest.raises(SpanError):
        trajectory_grad(problem, MethodConfig.rdm(), [0.5, 1.5], [[1.0], [1.0]])


# -- training ---------------------------------------------------------------------------------------------------


def test_zero_epochs():
    problem = scalar_problem(0.3)
    trace = train(problem, MethodConfig.rdm(), [1.0], [[2.0]], OptimizerConfig("adam", lr=0.05), 0)
    assert len(trace) == 0
    assert problem.field.params.values[0] == 0.3


@pytest.mark.parametrize("mcfg", [MethodConfig.rdm(), MethodConfig.irdm(8)], ids=["rdm", "irdm"])
def test_fit_ln2(mcfg):
    problem = scalar_problem(0.0)
    trace = train(problem, mcfg, [1.0], [[2.0]], OptimizerConfig("adam", lr=0.05), 500)
    assert trace.error is None and len(trace) == 500
    assert abs(problem.field.params.values[0] - math.log(2)) <= 1e-3


@pytest.mark.parametrize("mcfg", ALL, ids=IDS)
def test_loss_decreases_on_cubic_fit(mcfg):
    times, states = cubic_trajectory()
    problem = OdeProblem(mlp_field(2, 16, seed=0), [1.0, 0.0], (0.0, 2.0), SolverConfig.tol(1e-5))
    trace = train(problem, mcfg, times, states, OptimizerConfig("adam", lr=0.01), 10)
    losses = [r.loss for r in trace.records]
    assert losses[-1] < losses[0]
    nfe = [r.forward_nfe + r.backward_nfe for r in trace.records]
    assert all(b > a for a, b in zip(nfe, nfe[1:]))


def test_sgd_momentum_step():
    opt = OptimizerConfig("sgd", lr=0.1, momentum=0.5).build(2)
    p = opt.step(np.zeros(2), np.array([1.0, -2.0]))
    p = opt.step(p, np.array([1.0, -2.0]))
    np.testing.assert_allclose(p, [-0.25, 0.5])


def test_training_stops_on_failure():
    problem = OdeProblem(linear_field(1.0), [1.0], (0.0, 1.0), SolverConfig.tol(1e-6, max_steps=30))
    trace = train(problem, MethodConfig.rdm(), [1.0], [[1e6]], OptimizerConfig("sgd", lr=10.0), 50)
    assert trace.error is not None
    assert len(trace) < 50


def test_trace_csv():
    import io

    problem = scalar_problem(0.0)
    trace = train(problem, MethodConfig.direct(), [1.0], [[2.0]], OptimizerConfig("adam", lr=0.05), 3)
    buf = io.StringIO()
    trace.to_csv(buf)
    rows = buf.getvalue().strip().splitlines()
    assert rows[0] == "epoch,loss,forward_nfe,backward_nfe,cumulative_wall_ms"
    assert len(rows) == 4


def test_optimizer_validation():
    with pytest.raises(ConfigError):
        OptimizerConfig("rmsprop")
    with pytest.raises(ConfigError):
        OptimizerConfig("adam", lr=0.0)
