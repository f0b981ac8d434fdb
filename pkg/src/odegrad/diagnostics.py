"""Error-bound diagnostics for gradients computed with interpolated activations.

All bounds run backwards from t1.  With J(t) = df/dz along the trajectory the
adjoint obeys da/dt = -J^T a, so in reversed time its norm grows at most at
rate mu[J] (logarithmic 2-norm):

    ||a(t)||  <= ||a(t1)|| * phi(t),                phi(t) = exp(int_t^t1 mu[J])
    ||da(t)|| <= phi(t) * int_t^t1 r(s) / phi(s) ds,  r = ||(J~ - J)^T a~||

where a~ is the adjoint computed with interpolated states and J~ the
Jacobian at those states.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ode
from .autodiff import VectorField
from .errors import ConfigError, DimensionError, NonFiniteError
from .grad import MethodConfig, OdeProblem, adjoint_system, forward, grad
from .interp import interp_error
from .ode import DenseSolution, SolverConfig

REFERENCE_TOL = 1e-10


def log_norm(A) -> float:
    """Logarithmic 2-norm: largest eigenvalue of the symmetric part of ``A``."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"log_norm needs a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NonFiniteError("log_norm needs a finite matrix")
    return float(np.linalg.eigvalsh(0.5 * (A + A.T))[-1])


def sample_grid(span, quad_points: int) -> np.ndarray:
    """Chebyshev-Lobatto points on the span (ends included), ascending."""
    if quad_points < 2:
        raise ConfigError("quad_points must be at least 2")
    t0, t1 = span
    x = -np.cos(np.pi * np.arange(quad_points) / (quad_points - 1))
    ts = t0 + 0.5 * (x + 1.0) * (t1 - t0)
    ts[0], ts[-1] = t0, t1
    return ts


def _tail_integral(ts, values):
    """Cumulative trapezoid int_{t}^{t_end} values, evaluated at every grid point."""
    out = np.zeros_like(values, dtype=np.float64)
    seg = 0.5 * np.diff(ts) * (values[1:] + values[:-1])
    out[:-1] = np.cumsum(seg[::-1])[::-1]
    return out


@dataclass
class BoundSamples:
    times: np.ndarray
    values: np.ndarray
    mu: np.ndarray | None = None
    mu_integral: np.ndarray | None = None


def _mu_along(field: VectorField, states: Callable, ts):
    return np.array([log_norm(field.jacobian_state(states(t), t)) for t in ts])


def adjoint_norm_bound(problem: OdeProblem, sol: DenseSolution, seed,
                       quad_points: int = 129) -> BoundSamples:
    ts = sample_grid(problem.span, quad_points)
    mu = _mu_along(problem.field, sol.dense_eval, ts)
    integral = _tail_integral(ts, mu)
    bound = np.linalg.norm(seed) * np.exp(integral)
    return BoundSamples(ts, bound, mu, integral)


def delta_a_bound(problem: OdeProblem, sol: DenseSolution, interp, seed, quad_points: int = 129,
                  perturbed_adjoint: DenseSolution | None = None) -> BoundSamples:
    """Bound on the adjoint perturbation caused by replacing z(t) with ``interp``.

    ``sol`` supplies the exact states; ``perturbed_adjoint`` is the backward
    solution of the reduced system driven by ``interp`` (solved here if omitted).
    """
    field = problem.field
    d = field.state_dim
    ts = sample_grid(problem.span, quad_points)
    if perturbed_adjoint is None:
        perturbed_adjoint = _reduced_adjoint(problem, interp, seed, problem.cfg)
    mu = np.empty(ts.size)
    r = np.empty(ts.size)
    for i, t in enumerate(ts):
        J = field.jacobian_state(sol.dense_eval(t), t)
        J_tilde = field.jacobian_state(interp(t), t)
        a_tilde = perturbed_adjoint.dense_eval(t)[:d]
        mu[i] = log_norm(J)
        r[i] = np.linalg.norm((J_tilde - J).T @ a_tilde)
    integral = _tail_integral(ts, mu)
    phi = np.exp(integral)
    xi = phi * _tail_integral(ts, r / phi)
    return BoundSamples(ts, xi, mu, integral)


def _reduced_adjoint(problem: OdeProblem, state_source, seed, cfg: SolverConfig) -> DenseSolution:
    s1 = np.concatenate([np.asarray(seed, dtype=np.float64), np.zeros(problem.field.param_dim)])
    t0, t1 = problem.span
    return ode.solve(adjoint_system(problem.field, state_source), s1, (t1, t0), cfg)


def reference_solution(problem: OdeProblem, tol: float = REFERENCE_TOL) -> DenseSolution:
    return ode.solve(problem.field, problem.z0, problem.span, SolverConfig.tol(tol))


def reference_adjoint(problem: OdeProblem, seed, tol: float = REFERENCE_TOL,
                      sol: DenseSolution | None = None) -> DenseSolution:
    """Adjoint and parameter-gradient trajectory driven by tight-tolerance dense states."""
    sol = sol or reference_solution(problem, tol)
    return _reduced_adjoint(problem, sol.dense_eval, seed, SolverConfig.tol(tol))


@dataclass
class GradientError:
    l1: float
    l2: float
    diff: np.ndarray
    method_grad: np.ndarray
    reference_grad: np.ndarray


def gradient_error(problem: OdeProblem, mcfg: MethodConfig, seed,
                   reference_cfg: SolverConfig) -> GradientError:
    """Distance from the method's dL/dtheta to direct backprop at ``reference_cfg``."""
    if reference_cfg.rtol > problem.cfg.rtol or reference_cfg.atol > problem.cfg.atol:
        raise ConfigError("reference tolerance must not be looser than the method's")
    got = grad(problem, mcfg, seed).dL_dtheta
    ref_problem = OdeProblem(problem.field, problem.z0, problem.span, reference_cfg)
    ref = grad(ref_problem, MethodConfig.direct(), seed).dL_dtheta
    diff = got - ref
    return GradientError(float(np.abs(diff).sum()), float(np.linalg.norm(diff)), diff, got, ref)


@dataclass
class FdGradient:
    dL_dtheta: np.ndarray
    dL_dz0: np.ndarray


def fd_gradient(problem: OdeProblem, loss, h: float = 1e-5, tol: float = REFERENCE_TOL) -> FdGradient:
    """Central differences of the loss through tight-tolerance solves.

    ``loss`` is a callable of z(t1) or a cotangent vector ``c`` meaning L = c . z(t1).
    """
    if not h > 0:
        raise ConfigError("finite-difference step must be positive")
    if not callable(loss):
        c = np.asarray(loss, dtype=np.float64)
        loss = lambda z1: float(c @ z1)  # noqa: E731
    cfg = SolverConfig.tol(tol)
    probe = problem.field.copy()
    theta = problem.field.params.values.copy()

    def value(th, z0):
        probe.set_params(th)
        out = loss(ode.solve(probe, z0, problem.span, cfg).y_end)
        if not np.isfinite(out):
            raise NonFiniteError("loss is not finite")
        return out

    def central(base, other, perturb_theta):
        out = np.empty(base.size)
        for i in range(base.size):
            e = np.zeros(base.size)
            e[i] = h
            if perturb_theta:
                out[i] = (value(base + e, other) - value(base - e, other)) / (2 * h)
            else:
                out[i] = (value(other, base + e) - value(other, base - e)) / (2 * h)
        return out

    return FdGradient(central(theta, problem.z0, True), central(problem.z0, theta, False))


def hessian_mixed_norm_estimate(field: VectorField, z, t, iterations: int = 20, seed: int = 0) -> float:
    """Spectral-norm estimate of d2f/(dtheta dz) from finite differences of VJPs.

    The tensor T[i, :, j] = d/dz_j (e_i^T df/dtheta) is assembled by central
    differences along each state direction, then the norm of the map
    v -> T v (state -> d x p matrices, Frobenius) is found by power iteration.
    """
    z = np.asarray(z, dtype=np.float64)
    d, p = field.state_dim, field.param_dim
    if p == 0:
        return 0.0
    eps = 1e-4 * (1.0 + np.linalg.norm(z))
    T = np.empty((d * p, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = eps
        jp = field.jacobian_params(z + e, t)
        jm = field.jacobian_params(z - e, t)
        T[:, j] = ((jp - jm) / (2 * eps)).reshape(-1)
    v = np.random.default_rng(seed).standard_normal(d)
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iterations):
        w = T.T @ (T @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        sigma = float(np.linalg.norm(T @ v))
    return sigma


@dataclass
class BoundReport:
    times: np.ndarray
    mu: np.ndarray
    mu_integral: np.ndarray
    a_norm_bound: np.ndarray
    delta_a_bound: np.ndarray
    measured_a_norm: np.ndarray
    measured_delta_a: np.ndarray
    interp_error_max: float
    measured_E: float
    dfdtheta_norm_max: float
    mixed_hessian_max: float

    def to_csv(self, fh):
        w = csv.writer(fh)
        w.writerow(["t", "measured_a_norm", "a_norm_bound", "measured_delta_a", "delta_a_bound"])
        for row in zip(self.times, self.measured_a_norm, self.a_norm_bound, self.measured_delta_a,
                       self.delta_a_bound):
            w.writerow([f"{v:.17g}" for v in row])


def bound_report(problem: OdeProblem, N: int, seed, quad_points: int = 129,
                 interp_kind: str = "bli") -> BoundReport:
    """Measured adjoint quantities next to their bounds for IRDM with grid size ``N``."""
    field = problem.field
    d = field.state_dim
    seed = np.asarray(seed, dtype=np.float64)
    sol = reference_solution(problem)
    exact = reference_adjoint(problem, seed, sol=sol)
    mcfg = MethodConfig.irdm(N, interp_kind)
    _, art = forward(problem, mcfg)
    interp = art.interpolant
    tilde = _reduced_adjoint(problem, interp, seed, problem.cfg)

    a_bound = adjoint_norm_bound(problem, sol, seed, quad_points)
    da_bound = delta_a_bound(problem, sol, interp, seed, quad_points, perturbed_adjoint=tilde)
    ts = a_bound.times
    a_exact = exact.dense_eval_many(ts)[:, :d]
    a_tilde = tilde.dense_eval_many(ts)[:, :d]
    measured_E = float(np.linalg.norm(tilde.y_end[d:] - exact.y_end[d:]))
    dfdtheta = max(np.linalg.norm(field.jacobian_params(sol(t), t), 2) for t in ts)
    mixed = max(hessian_mixed_norm_estimate(field, sol(t), t) for t in ts[:: max(1, len(ts) // 16)])
    return BoundReport(
        times=ts,
        mu=a_bound.mu,
        mu_integral=a_bound.mu_integral,
        a_norm_bound=a_bound.values,
        delta_a_bound=da_bound.values,
        measured_a_norm=np.linalg.norm(a_exact, axis=1),
        measured_delta_a=np.linalg.norm(a_tilde - a_exact, axis=1),
        interp_error_max=interp_error(interp, sol.dense_eval, quad_points),
        measured_E=measured_E,
        dfdtheta_norm_max=float(dfdtheta),
        mixed_hessian_max=float(mixed),
    )
