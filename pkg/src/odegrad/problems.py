"""Test systems shared by the benchmarks and the test-suite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import cubic_field, mlp_field
from .grad import OdeProblem
from .ode import SolverConfig, solve, solve_with_outputs

# Weakly contractive rotation for the dz/dt = A z^3 toy system.
CUBIC_A = np.array([[-0.1, 2.0], [-2.0, -0.1]])
# Small enough that a 5-node grid resolves the trajectory below the 1e-7 solver error.
SWEEP_Z0 = np.array([0.6, 0.0])
SWEEP_SPAN = (0.0, 1.0)
SWEEP_PERTURBATION = 0.1

COLLAPSE_Z0 = np.array([2.0, 1.0])
COLLAPSE_SPAN = (0.0, 5.0)
MILD_COLLAPSE_SPAN = (0.0, 1.0)
COLLAPSE_PERTURBATION = 0.05

TRAJ_Z0 = np.array([1.0, 0.0])
TRAJ_SPAN = (0.0, 2.0)
TRAJ_SAMPLES = 20

EXACT_TOL = 1e-12


@dataclass
class SquaredError:
    """L(z1) = 0.5 * ||z1 - target||^2."""

    target: np.ndarray

    def __call__(self, z1) -> float:
        diff = np.asarray(z1) - self.target
        return 0.5 * float(diff @ diff)

    def cotangent(self, z1) -> np.ndarray:
        return np.asarray(z1) - self.target


@dataclass
class TerminalCase:
    problem: OdeProblem
    loss: object
    seed: np.ndarray


def _terminal_case(field, z0, span, tol, target) -> TerminalCase:
    loss = SquaredError(target)
    z1 = solve(field, z0, span, SolverConfig.tol(EXACT_TOL)).y_end
    return TerminalCase(OdeProblem(field, z0, span, SolverConfig.tol(tol)), loss, loss.cotangent(z1))


def sweep_case(seed: int, tol: float) -> TerminalCase:
    """Cubic field W z^3 with W = A + noise, fitted to the endpoint of the true A z^3 trajectory."""
    rng = np.random.default_rng(seed)
    field = cubic_field(CUBIC_A + SWEEP_PERTURBATION * rng.standard_normal((2, 2)))
    target = solve(cubic_field(CUBIC_A), SWEEP_Z0, SWEEP_SPAN, SolverConfig.tol(EXACT_TOL)).y_end
    return _terminal_case(field, SWEEP_Z0, SWEEP_SPAN, tol, target)


def collapse_case(seed: int, tol: float, span=COLLAPSE_SPAN) -> TerminalCase:
    """W z^3 with W = -I + noise, fitted to the endpoint of dz/dt = -z^3 (decays towards zero)."""
    rng = np.random.default_rng(seed)
    field = cubic_field(-np.eye(2) + COLLAPSE_PERTURBATION * rng.standard_normal((2, 2)))
    target = solve(cubic_field(-np.eye(2)), COLLAPSE_Z0, span, SolverConfig.tol(EXACT_TOL)).y_end
    return _terminal_case(field, COLLAPSE_Z0, span, tol, target)


def mlp_case(seed: int, tol: float, state_dim: int = 4, hidden: int = 4, span=(0.0, 1.0)) -> TerminalCase:
    """Seeded tanh MLP field with loss L = sum(z(t1))."""
    rng = np.random.default_rng(seed)
    field = mlp_field(state_dim, hidden, seed=seed)
    z0 = rng.uniform(-1.0, 1.0, state_dim)
    seed_vec = np.ones(state_dim)
    return TerminalCase(OdeProblem(field, z0, span, SolverConfig.tol(tol)),
                        lambda z1: float(np.sum(z1)), seed_vec)


def cubic_trajectory(z0=TRAJ_Z0, span=TRAJ_SPAN, samples: int = TRAJ_SAMPLES):
    """Sample times (excluding t0) and states of the true A z^3 system."""
    times = np.linspace(span[0], span[1], samples + 1)[1:]
    _, states = solve_with_outputs(cubic_field(CUBIC_A), z0, span, SolverConfig.tol(EXACT_TOL), times)
    return times, states
