"""Dormand-Prince 5(4) with PI step control and 4th-order dense output.

Dense output follows Shampine's scheme: a 4th-order estimate of the state at
the step midpoint is formed from the seven stages, then a quartic Hermite
polynomial is fitted through (y0, f0), (y1, f1) and the midpoint.  Evaluating
it needs no right-hand-side calls, so output times never affect the step
sequence or the NFE count.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import (ConfigError, MaxStepsExceeded, NonFiniteError, NonFiniteStateError,
                     SpanError, StepSizeTooSmall)

C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_A_ROWS = [np.array(r) for r in A]
B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# 5th-order minus embedded 4th-order weights
E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])
# 4th-order midpoint weights (Shampine 1986)
C_MID = np.array([
    6025192743 / 30085553152 / 2, 0.0, 51252292925 / 65400821598 / 2,
    -2691868925 / 45128329728 / 2, 187940372067 / 1594534317056 / 2,
    -1776094331 / 19743644256 / 2, 11237099 / 235043384 / 2,
])

# PI controller exponents and factor clamps
_ALPHA = 0.7 / 5
_BETA = 0.4 / 5
_FAC_MIN = 0.2
_FAC_MAX = 10.0


@dataclass(frozen=True)
class SolverConfig:
    rtol: float = 1e-7
    atol: float = 1e-9
    h_init: float | None = None
    h_max: float = math.inf
    max_steps: int = 100_000
    safety: float = 0.9

    def __post_init__(self):
        if not (self.rtol > 0 and self.atol > 0):
            raise ConfigError("rtol and atol must be positive")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be at least 1")
        if not 0 < self.safety < 1:
            raise ConfigError("safety must lie in (0, 1)")
        if self.h_init is not None and not self.h_init > 0:
            raise ConfigError("h_init must be positive")
        if not self.h_max > 0:
            raise ConfigError("h_max must be positive")

    @classmethod
    def tol(cls, tol: float, **kw) -> "SolverConfig":
        return cls(rtol=tol, atol=tol, **kw)

    def replace(self, **kw) -> "SolverConfig":
        return SolverConfig(**{**self.__dict__, **kw})


@dataclass
class NfeCounter:
    forward_nfe: int = 0
    backward_nfe: int = 0


class DenseSolution:
    """Accepted steps of one solve plus their dense interpolants.

    ``t`` has the step endpoints (n_steps + 1), ``y`` the states there and
    ``k`` the seven stage derivatives of every step.  ``aux`` optionally holds
    per-step side data returned by the right-hand side (e.g. autodiff tapes).
    """

    def __init__(self, span, t, y, k, nfe, n_accepted, n_rejected, aux=None):
        self.span = (float(span[0]), float(span[1]))
        self.t = np.asarray(t, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64)
        self.k = np.asarray(k, dtype=np.float64).reshape(len(self.t) - 1, 7, self.y.shape[1])
        self.nfe = int(nfe)
        self.n_accepted = int(n_accepted)
        self.n_rejected = int(n_rejected)
        self.aux = aux
        self.direction = 1.0 if self.span[1] >= self.span[0] else -1.0
        self.h = np.diff(self.t)
        # Quartic coefficients, lowest power first, in x = (t - t_k) / h_k.
        if len(self.h):
            h = self.h[:, None]
            y0, y1 = self.y[:-1], self.y[1:]
            f0, f1 = self.k[:, 0], self.k[:, 6]
            ymid = y0 + h * np.einsum("s,nsd->nd", C_MID, self.k)
            self._coef = np.stack([
                y0,
                h * f0,
                h * (f1 - 4 * f0) - 11 * y0 - 5 * y1 + 16 * ymid,
                h * (5 * f0 - 3 * f1) + 18 * y0 + 14 * y1 - 32 * ymid,
                2 * h * (f1 - f0) - 8 * (y1 + y0) + 16 * ymid,
            ], axis=1)
        else:
            self._coef = np.zeros((0, 5, self.y.shape[1]))
        self._key = self.direction * self.t

    @property
    def n_steps(self) -> int:
        return len(self.t) - 1

    @property
    def y_end(self) -> np.ndarray:
        return self.y[-1]

    @property
    def t_end(self) -> float:
        return float(self.t[-1])

    def contains(self, t: float) -> bool:
        lo, hi = sorted((self.t[0], self.t[-1]))
        return lo <= t <= hi

    def dense_eval(self, t: float) -> np.ndarray:
        t = float(t)
        if not self.contains(t):
            raise SpanError(f"t={t} outside solution span [{self.t[0]}, {self.t[-1]}]")
        key = self.direction * t
        i = int(np.searchsorted(self._key, key, side="left"))
        if i < len(self.t) and self._key[i] == key:
            return self.y[i].copy()
        i -= 1
        x = (t - self.t[i]) / self.h[i]
        c = self._coef[i]
        return c[0] + x * (c[1] + x * (c[2] + x * (c[3] + x * c[4])))

    __call__ = dense_eval

    def dense_eval_many(self, ts: Sequence[float]) -> np.ndarray:
        return np.stack([self.dense_eval(t) for t in ts]) if len(ts) else np.zeros((0, self.y.shape[1]))

    def to_csv(self, fh):
        """One row per step endpoint: t, h (step leaving it, blank on the last row), state."""
        w = csv.writer(fh)
        d = self.y.shape[1]
        w.writerow(["t", "h"] + [f"z{i}" for i in range(d)])
        for i, t in enumerate(self.t):
            h = f"{self.h[i]:.17g}" if i < self.n_steps else ""
            w.writerow([f"{t:.17g}", h] + [f"{v:.17g}" for v in self.y[i]])


def _rms(x):
    return math.sqrt(float(np.dot(x, x)) / x.size)


def _call(rhs, z, t, record_aux):
    out = rhs(z, t)
    if record_aux:
        dz, aux = out
    else:
        dz, aux = out, None
    return np.asarray(dz, dtype=np.float64), aux


def _initial_step(rhs, t0, y0, f0, direction, cfg, record_aux, span_len):
    """Hairer-Norsett-Wanner starting step; costs one extra rhs evaluation."""
    sc = cfg.atol + cfg.rtol * np.abs(y0)
    d0 = _rms(y0 / sc)
    d1 = _rms(f0 / sc)
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    h0 = min(h0, span_len)
    y1 = y0 + direction * h0 * f0
    f1, _ = _call(rhs, y1, t0 + direction * h0, record_aux)
    d2 = _rms((f1 - f0) / sc) / h0
    if max(d1, d2) <= 1e-15:
        # Locally constant solution: nothing for the controller to resolve.
        return min(cfg.h_max, span_len)
    h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, cfg.h_max, span_len)


def solve(rhs: Callable, z0, span, cfg: SolverConfig | None = None, *,
          record_aux: bool = False) -> DenseSolution:
    """Integrate dz/dt = rhs(z, t) from span[0] to span[1] (either direction).

    With ``record_aux`` the rhs must return ``(dz, aux)``; the aux objects of
    the seven stages of every accepted step are kept in ``solution.aux`` (stage
    one of a step shares the object of the previous step's seventh stage).
    """
    cfg = cfg or SolverConfig()
    t0, t1 = float(span[0]), float(span[1])
    if t0 == t1:
        raise ConfigError("span must have non-zero length")
    y = np.array(z0, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(y)):
        raise NonFiniteError("initial state is not finite")
    direction = 1.0 if t1 > t0 else -1.0
    span_len = abs(t1 - t0)

    f, f_aux = _call(rhs, y, t0, record_aux)
    nfe = 1
    if cfg.h_init is None:
        h = _initial_step(rhs, t0, y, f, direction, cfg, record_aux, span_len)
        nfe += 1
    else:
        h = min(cfg.h_init, cfg.h_max, span_len)

    ts, ys, ks, auxs = [t0], [y.copy()], [], [] if record_aux else None
    t = t0
    err_prev = 1.0
    n_acc = n_rej = 0
    last_rejected = False
    k = np.empty((7, y.size))

    def partial():
        return DenseSolution((t0, t1), ts, ys, np.array(ks).reshape(-1, 7, y.size), nfe, n_acc, n_rej,
                             auxs)

    while True:
        remaining = abs(t1 - t)
        if remaining <= 0.0:
            break
        if n_acc + n_rej >= cfg.max_steps:
            raise MaxStepsExceeded(f"max_steps={cfg.max_steps} exceeded at t={t}", partial(),
                                   step=n_acc, t=t)
        last = h >= remaining
        if last:
            h = remaining
        if h < 16 * np.finfo(float).eps * max(abs(t), 1.0):
            raise StepSizeTooSmall(f"step size underflow at t={t}", partial(), step=n_acc, t=t)
        hs = direction * h
        t_new = t1 if last else t + hs

        k[0] = f
        stage_aux = [f_aux]
        for i in range(1, 7):
            yi = y + hs * (_A_ROWS[i] @ k[:i])
            ti = t_new if i >= 5 else t + C[i] * hs
            k[i], aux_i = _call(rhs, yi, ti, record_aux)
            stage_aux.append(aux_i)
        nfe += 6
        y_new = yi  # row 7 of A equals B: the last stage input is the 5th-order solution
        if not np.all(np.isfinite(y_new)) or not np.all(np.isfinite(k)):
            raise NonFiniteStateError(f"non-finite state in step {n_acc} at t={t}", partial(),
                                      step=n_acc, t=t)
        sc = cfg.atol + cfg.rtol * np.maximum(np.abs(y), np.abs(y_new))
        err = _rms(hs * (E @ k) / sc)

        if err <= 1.0:
            n_acc += 1
            ts.append(t_new)
            ys.append(y_new.copy())
            ks.append(k.copy())
            if record_aux:
                auxs.append(stage_aux)
            t, y = t_new, y_new
            f, f_aux = k[6].copy(), stage_aux[6]
            if err == 0.0:
                fac = _FAC_MAX
            else:
                fac = cfg.safety * err ** (-_ALPHA) * err_prev ** _BETA
            fac = min(_FAC_MAX, max(_FAC_MIN, fac))
            if last_rejected:
                fac = min(fac, 1.0)
            err_prev = max(err, 1e-4)
            last_rejected = False
        else:
            n_rej += 1
            fac = max(_FAC_MIN, cfg.safety * err ** (-1 / 5))
            last_rejected = True
        h = min(h * fac, cfg.h_max)

    return DenseSolution((t0, t1), ts, ys, np.array(ks).reshape(-1, 7, y.size), nfe, n_acc, n_rej, auxs)


def solve_fixed(rhs: Callable, z0, span, n_steps: int, *, record_aux: bool = False) -> DenseSolution:
    """Fixed-step DOPRI5 without error control, for order measurements."""
    if n_steps < 1:
        raise ConfigError("n_steps must be at least 1")
    t0, t1 = float(span[0]), float(span[1])
    y = np.array(z0, dtype=np.float64).reshape(-1)
    grid = np.linspace(t0, t1, n_steps + 1)
    f, f_aux = _call(rhs, y, t0, record_aux)
    nfe = 1
    ys, ks, auxs = [y.copy()], [], [] if record_aux else None
    k = np.empty((7, y.size))
    for n in range(n_steps):
        t, t_new = grid[n], grid[n + 1]
        hs = t_new - t
        k[0] = f
        stage_aux = [f_aux]
        for i in range(1, 7):
            yi = y + hs * (_A_ROWS[i] @ k[:i])
            k[i], aux_i = _call(rhs, yi, t_new if i >= 5 else t + C[i] * hs, record_aux)
            stage_aux.append(aux_i)
        nfe += 6
        y = yi
        ys.append(y.copy())
        ks.append(k.copy())
        if record_aux:
            auxs.append(stage_aux)
        f, f_aux = k[6].copy(), stage_aux[6]
    return DenseSolution((t0, t1), grid, ys, np.array(ks), nfe, n_steps, 0, auxs)


def _check_outputs(t_out, span):
    t_out = np.asarray(t_out, dtype=np.float64).reshape(-1)
    t0, t1 = span
    direction = 1.0 if t1 > t0 else -1.0
    if np.any(np.diff(direction * t_out) < 0):
        raise SpanError("output times must be sorted in the direction of integration")
    lo, hi = sorted((t0, t1))
    if t_out.size and (t_out.min() < lo or t_out.max() > hi):
        raise SpanError("output times must lie within the span")
    return t_out


def solve_with_outputs(rhs: Callable, z0, span, cfg: SolverConfig | None, t_out, *,
                       record_aux: bool = False) -> tuple[DenseSolution, np.ndarray]:
    """Solve and read states at ``t_out`` from the dense output (no forced steps)."""
    t_out = _check_outputs(t_out, (float(span[0]), float(span[1])))
    sol = solve(rhs, z0, span, cfg, record_aux=record_aux)
    return sol, sol.dense_eval_many(t_out)
