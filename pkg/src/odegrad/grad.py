"""Four ways to differentiate a loss on z(t1) through an adaptive DOPRI5 solve.

``direct``      reverse sweep through every stage of the accepted steps (discrete adjoint)
``rdm``         backward solve of the augmented system (z, a, dL/dtheta)
``irdm``        backward solve of (a, dL/dtheta) only, with z read from an interpolant
                built on states stored during the forward pass
``checkpoint``  states stored at K uniform times; each interval is re-solved forward
                and swept in reverse, right to left
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field
from typing import Sequence

import numpy as np

from . import ode
from .autodiff import VectorField
from .errors import ConfigError, DimensionError, NonFiniteError, SpanError
from .interp import BaryInterpolant, PiecewiseInterpolant, make_grid
from .ode import DenseSolution, SolverConfig

METHODS = ("direct", "rdm", "irdm", "checkpoint")
INTERP_KINDS = ("bli", "linear", "cubic")


@dataclass
class OdeProblem:
    field: VectorField
    z0: np.ndarray
    span: tuple[float, float]
    cfg: SolverConfig = dc_field(default_factory=SolverConfig)

    def __post_init__(self):
        self.z0 = np.array(self.z0, dtype=np.float64).reshape(-1)
        self.span = (float(self.span[0]), float(self.span[1]))
        if self.z0.size != self.field.state_dim:
            raise DimensionError(f"z0 has {self.z0.size} entries, field expects {self.field.state_dim}")
        if not self.span[0] < self.span[1]:
            raise ConfigError("problem span must satisfy t0 < t1")

    @property
    def state_dim(self) -> int:
        return self.field.state_dim

    def with_span(self, t0, t1, z0=None) -> "OdeProblem":
        return OdeProblem(self.field, self.z0 if z0 is None else z0, (t0, t1), self.cfg)


@dataclass(frozen=True)
class MethodConfig:
    method: str
    N: int | None = None
    K: int | None = None
    interp_kind: str | None = None
    backward_cfg: SolverConfig | None = None

    def __post_init__(self):
        m = self.method
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; expected one of {METHODS}")
        if m == "irdm":
            if self.N is None or self.N < 1:
                raise ConfigError("irdm needs a grid size N >= 1")
            if self.interp_kind is None:
                object.__setattr__(self, "interp_kind", "bli")
            if self.interp_kind not in INTERP_KINDS:
                raise ConfigError(f"unknown interp_kind {self.interp_kind!r}")
        elif self.N is not None or self.interp_kind is not None:
            raise ConfigError("N and interp_kind apply to irdm only")
        if m == "checkpoint":
            if self.K is None:
                object.__setattr__(self, "K", 8)
            if self.K < 1:
                raise ConfigError("checkpoint count K must be >= 1")
        elif self.K is not None:
            raise ConfigError("K applies to checkpoint only")

    @classmethod
    def direct(cls, **kw):
        return cls("direct", **kw)

    @classmethod
    def rdm(cls, **kw):
        return cls("rdm", **kw)

    @classmethod
    def irdm(cls, N: int = 16, interp_kind: str = "bli", **kw):
        return cls("irdm", N=N, interp_kind=interp_kind, **kw)

    @classmethod
    def checkpoint(cls, K: int = 8, **kw):
        return cls("checkpoint", K=K, **kw)

    @property
    def label(self) -> str:
        if self.method == "irdm":
            return f"irdm[{self.interp_kind},N={self.N}]"
        if self.method == "checkpoint":
            return f"checkpoint[K={self.K}]"
        return self.method


@dataclass
class ForwardArtifacts:
    method: str
    span: tuple[float, float]
    z1: np.ndarray
    forward_nfe: int
    stored_states: int
    solution: DenseSolution | None = None
    interpolant: BaryInterpolant | PiecewiseInterpolant | None = None
    checkpoint_times: np.ndarray | None = None
    checkpoint_states: np.ndarray | None = None


@dataclass
class GradStats:
    forward_nfe: int = 0
    backward_nfe: int = 0
    peak_stored_states: int = 0
    wall_time: float = 0.0
    backward_dim: int = 0


@dataclass
class GradientResult:
    dL_dtheta: np.ndarray
    dL_dz0: np.ndarray
    stats: GradStats
    backward_solution: DenseSolution | None = None


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------


def _taped_rhs(field: VectorField):
    return lambda z, t: field.eval(z, t)


def forward(problem: OdeProblem, mcfg: MethodConfig) -> tuple[np.ndarray, ForwardArtifacts]:
    field, span, cfg = problem.field, problem.span, problem.cfg
    m = mcfg.method
    if m == "direct":
        sol = ode.solve(_taped_rhs(field), problem.z0, span, cfg, record_aux=True)
        art = ForwardArtifacts(m, span, sol.y_end.copy(), sol.nfe, 1 + 6 * sol.n_accepted, solution=sol)
    elif m == "rdm":
        sol = ode.solve(field, problem.z0, span, cfg)
        art = ForwardArtifacts(m, span, sol.y_end.copy(), sol.nfe, 1)
    elif m == "irdm":
        interp, nfe = _build_interpolant(problem, mcfg)
        art = ForwardArtifacts(m, span, interp.z1, nfe, interp.n_stored, interpolant=interp)
    else:
        t0, t1 = span
        times = t0 + (t1 - t0) * np.arange(mcfg.K) / mcfg.K
        sol, states = ode.solve_with_outputs(field, problem.z0, span, cfg, times)
        states[0] = problem.z0
        art = ForwardArtifacts(m, span, sol.y_end.copy(), sol.nfe, mcfg.K,
                               checkpoint_times=times, checkpoint_states=states)
    return art.z1, art


def _build_interpolant(problem: OdeProblem, mcfg: MethodConfig):
    field, span = problem.field, problem.span
    if mcfg.interp_kind == "bli":
        grid = make_grid(mcfg.N, span)
        sol, states = ode.solve_with_outputs(field, problem.z0, span, problem.cfg, grid.nodes[::-1])
        interp = BaryInterpolant(grid, states[::-1])
        nfe = sol.nfe
    else:
        # Piecewise interpolants need the span ends, so they store N + 1 uniform states.
        times = np.linspace(span[0], span[1], mcfg.N + 1)
        sol, states = ode.solve_with_outputs(field, problem.z0, span, problem.cfg, times)
        derivs = None
        nfe = sol.nfe
        if mcfg.interp_kind == "cubic":
            derivs = np.stack([field(z, t) for z, t in zip(states, times)])
            nfe += len(times)
        interp = PiecewiseInterpolant(mcfg.interp_kind, times, states, derivs)
    interp.z1 = sol.y_end.copy()
    return interp, nfe


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------


def reverse_sweep(field: VectorField, sol: DenseSolution, a1) -> tuple[np.ndarray, np.ndarray]:
    """Discrete adjoint of the accepted DOPRI5 steps recorded with tapes in ``sol.aux``.

    Step sizes are treated as constants; only the stage arithmetic is differentiated.
    """
    if sol.aux is None:
        raise ConfigError("solution was recorded without tapes")
    a = np.array(a1, dtype=np.float64)
    g = np.zeros(field.param_dim)
    A, B = ode._A_ROWS, ode.B
    for n in range(sol.n_steps - 1, -1, -1):
        h = sol.t[n + 1] - sol.t[n]
        tapes = sol.aux[n]
        kbar = [h * B[i] * a for i in range(6)]
        ybar = a.copy()
        for i in range(5, -1, -1):
            gz, gth = field.vjp(tapes[i], kbar[i])
            g += gth
            ybar += gz
            row = A[i]
            for j in range(i):
                if row[j] != 0.0:
                    kbar[j] += (h * row[j]) * gz
        a = ybar
    return a, g


def _rdm_rhs(field: VectorField):
    d = field.state_dim

    def rhs(s, t):
        z, a = s[:d], s[d:2 * d]
        dz, tape = field.eval(z, t)
        gz, gth = field.vjp(tape, a)
        return np.concatenate([dz, -gz, -gth])

    return rhs


def _irdm_rhs(field: VectorField, interp):
    d = field.state_dim

    def rhs(s, t):
        _, tape = field.eval(interp(t), t)
        gz, gth = field.vjp(tape, s[:d])
        return np.concatenate([-gz, -gth])

    return rhs


def adjoint_system(field: VectorField, state_source):
    """Right-hand side of the reduced backward system (a, dL/dtheta) given z(t) from ``state_source``."""
    return _irdm_rhs(field, state_source)


def backward(problem: OdeProblem, mcfg: MethodConfig, art: ForwardArtifacts, seed) -> GradientResult:
    field = problem.field
    d, p = field.state_dim, field.param_dim
    seed = np.asarray(seed, dtype=np.float64).reshape(-1)
    if seed.size != d:
        raise DimensionError(f"seed has {seed.size} entries, expected {d}")
    if art.method != mcfg.method:
        raise ConfigError(f"artifacts from {art.method!r} passed to {mcfg.method!r} backward")
    if art.span != problem.span:
        raise SpanError("artifacts were produced for a different span")
    t0, t1 = problem.span
    bcfg = mcfg.backward_cfg or problem.cfg
    stats = GradStats(forward_nfe=art.forward_nfe)
    bsol = None
    m = mcfg.method

    if m == "direct":
        a0, g = reverse_sweep(field, art.solution, seed)
        stats.peak_stored_states = art.stored_states
        stats.backward_dim = d
    elif m == "rdm":
        s1 = np.concatenate([art.z1, seed, np.zeros(p)])
        bsol = ode.solve(_rdm_rhs(field), s1, (t1, t0), bcfg)
        a0, g = bsol.y_end[d:2 * d], bsol.y_end[2 * d:]
        stats.backward_nfe = bsol.nfe
        stats.peak_stored_states = 1
        stats.backward_dim = s1.size
    elif m == "irdm":
        interp = art.interpolant
        if tuple(interp.span) != problem.span:
            raise SpanError("interpolant span does not match the problem span")
        s1 = np.concatenate([seed, np.zeros(p)])
        bsol = ode.solve(_irdm_rhs(field, interp), s1, (t1, t0), bcfg)
        a0, g = bsol.y_end[:d], bsol.y_end[d:]
        stats.backward_nfe = bsol.nfe
        stats.peak_stored_states = art.stored_states
        stats.backward_dim = s1.size
    else:
        times = list(art.checkpoint_times) + [t1]
        a0, g = seed.copy(), np.zeros(p)
        widest = 0
        for k in range(len(times) - 2, -1, -1):
            seg = ode.solve(_taped_rhs(field), art.checkpoint_states[k], (times[k], times[k + 1]),
                            problem.cfg, record_aux=True)
            stats.backward_nfe += seg.nfe
            widest = max(widest, 1 + 6 * seg.n_accepted)
            a0, gk = reverse_sweep(field, seg, a0)
            g += gk
        stats.peak_stored_states = art.stored_states + widest
        stats.backward_dim = d

    a0 = np.array(a0)
    g = np.array(g)
    if not (np.all(np.isfinite(a0)) and np.all(np.isfinite(g))):
        raise NonFiniteError(f"{m} backward produced non-finite gradients")
    return GradientResult(g, a0, stats, bsol)


def grad(problem: OdeProblem, mcfg: MethodConfig, seed) -> GradientResult:
    start = time.perf_counter()
    _, art = forward(problem, mcfg)
    res = backward(problem, mcfg, art, seed)
    res.stats.wall_time = time.perf_counter() - start
    return res


# ---------------------------------------------------------------------------
# Trajectory losses
# ---------------------------------------------------------------------------


@dataclass
class TrajectoryGradient:
    loss: float
    states: np.ndarray
    result: GradientResult


def mse_loss(states: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over samples and components, with its gradient wrt ``states``."""
    diff = states - targets
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def trajectory_grad(problem: OdeProblem, mcfg: MethodConfig, times: Sequence[float], targets,
                    loss=mse_loss) -> TrajectoryGradient:
    """Gradient of ``loss(z(times), targets)`` by splitting the span at the sample times.

    Every segment is an independent forward solve; the backward pass runs the
    segments right to left, adding each sample's loss cotangent to the adjoint
    carried in from the right.
    """
    start = time.perf_counter()
    t0 = problem.span[0]
    times = np.asarray(times, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64).reshape(times.size, -1)
    if times.size == 0:
        raise ConfigError("need at least one sample time")
    if np.any(np.diff(times) <= 0):
        raise ConfigError("sample times must be strictly increasing")
    if times[0] < t0 or times[-1] > problem.span[1]:
        raise SpanError("sample times must lie within the problem span")

    stats = GradStats()
    states = np.empty((times.size, problem.state_dim))
    segments = []
    z, left = problem.z0, t0
    for i, t in enumerate(times):
        if t > left:
            seg = problem.with_span(left, t, z)
            z, art = forward(seg, mcfg)
            segments.append((i, seg, art))
            stats.forward_nfe += art.forward_nfe
        states[i] = z
        left = t

    value, cot = loss(states, targets)
    g = np.zeros(problem.field.param_dim)
    a = np.zeros(problem.state_dim)
    pending = set(range(times.size))
    for i, seg, art in reversed(segments):
        a = a + cot[i]
        pending.discard(i)
        res = backward(seg, mcfg, art, a)
        g += res.dL_dtheta
        a = res.dL_dz0
        stats.backward_nfe += res.stats.backward_nfe
        stats.peak_stored_states += res.stats.peak_stored_states
        stats.backward_dim = res.stats.backward_dim
    for i in pending:  # samples at t0
        a = a + cot[i]
    stats.wall_time = time.perf_counter() - start
    return TrajectoryGradient(value, states, GradientResult(g, a, stats))
