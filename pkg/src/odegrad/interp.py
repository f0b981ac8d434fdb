"""Chebyshev grids, barycentric Lagrange interpolation and piecewise interpolants."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, DimensionError, NonFiniteError, SpanError

NODE_GUARD = 1e-14
# Slack for query times produced by floating-point stage arithmetic at the span ends.
_SPAN_SLACK = 1e-12


def _check_in_span(t, lo, hi):
    slack = _SPAN_SLACK * (hi - lo)
    if not (lo - slack <= t <= hi + slack):
        raise SpanError(f"t={t} outside interpolation span [{lo}, {hi}]")


@dataclass(frozen=True)
class ChebyshevGrid:
    """First-kind Chebyshev points on [t0, t1] with their barycentric weights.

    Index n pairs x_n = cos((2n+1)pi/(2N+2)) with w_n = (-1)^n sin((2n+1)pi/(2N+2)),
    so ``nodes`` run from near t1 down to near t0.  ``ascending()`` gives the
    same pairs sorted by time.
    """

    N: int
    span: tuple[float, float]
    nodes: np.ndarray
    weights: np.ndarray

    def ascending(self) -> tuple[np.ndarray, np.ndarray]:
        return self.nodes[::-1].copy(), self.weights[::-1].copy()

    def __len__(self):
        return self.N + 1


def make_grid(N: int, span) -> ChebyshevGrid:
    if int(N) != N or N < 1:
        raise ConfigError(f"Chebyshev grid size N must be an integer >= 1, got {N}")
    t0, t1 = float(span[0]), float(span[1])
    if not t0 < t1:
        raise ConfigError("grid span must satisfy t0 < t1")
    n = np.arange(N + 1)
    angle = (2 * n + 1) * math.pi / (2 * N + 2)
    x = np.cos(angle)
    weights = np.where(n % 2 == 0, 1.0, -1.0) * np.sin(angle)
    nodes = t0 + 0.5 * (x + 1.0) * (t1 - t0)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return ChebyshevGrid(int(N), (t0, t1), nodes, weights)


class BaryInterpolant:
    """Barycentric Lagrange interpolant of a vector trajectory on a Chebyshev grid."""

    def __init__(self, grid: ChebyshevGrid, node_values):
        values = np.array(node_values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[0] != grid.N + 1:
            raise DimensionError(f"need {grid.N + 1} node values, got {values.shape[0]}")
        if not np.all(np.isfinite(values)):
            raise NonFiniteError("node values must be finite")
        values.setflags(write=False)
        self.grid = grid
        self.node_values = values
        self._guard = NODE_GUARD * (grid.span[1] - grid.span[0])

    @property
    def span(self):
        return self.grid.span

    @property
    def n_stored(self) -> int:
        return self.grid.N + 1

    def __call__(self, t: float) -> np.ndarray:
        return self.eval(t)

    def eval(self, t: float) -> np.ndarray:
        t = float(t)
        _check_in_span(t, *self.grid.span)
        diff = t - self.grid.nodes
        hit = np.flatnonzero(np.abs(diff) <= self._guard)
        if hit.size:
            return self.node_values[hit[0]].copy()
        c = self.grid.weights / diff
        return (c @ self.node_values) / c.sum()

    def to_csv(self, fh):
        w = csv.writer(fh)
        d = self.node_values.shape[1]
        w.writerow(["t"] + [f"z{i}" for i in range(d)])
        times, _ = self.grid.ascending()
        for t, row in zip(times, self.node_values[::-1]):
            w.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in row])


def bary_eval(interp: BaryInterpolant, t: float) -> np.ndarray:
    return interp.eval(t)


def interp_error(interp, reference: Callable[[float], np.ndarray], sample_count: int) -> float:
    """Max over a uniform sample grid of the componentwise-max interpolation error."""
    if sample_count < 2:
        raise ConfigError("sample_count must be at least 2")
    t0, t1 = interp.span
    worst = 0.0
    for t in np.linspace(t0, t1, sample_count):
        err = np.max(np.abs(np.asarray(interp(t)) - np.asarray(reference(t))))
        worst = max(worst, float(err))
    return worst


class PiecewiseInterpolant:
    """Piecewise-linear or cubic Hermite interpolation through stored states."""

    KINDS = ("linear", "cubic")

    def __init__(self, kind: str, times, values, derivatives=None):
        if kind == "cubic-hermite":
            kind = "cubic"
        if kind not in self.KINDS:
            raise ConfigError(f"unknown piecewise kind {kind!r}")
        times = np.asarray(times, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if times.ndim != 1 or times.size < 2 or values.shape[0] != times.size:
            raise DimensionError("need at least two node times with one value row each")
        if np.any(np.diff(times) <= 0):
            raise ConfigError("node times must be strictly increasing")
        if kind == "cubic":
            if derivatives is None:
                raise ConfigError("cubic Hermite interpolation needs node derivatives")
            derivatives = np.asarray(derivatives, dtype=np.float64).reshape(values.shape)
        self.kind = kind
        self.times = times
        self.values = values
        self.derivatives = derivatives

    @property
    def span(self):
        return float(self.times[0]), float(self.times[-1])

    @property
    def n_stored(self) -> int:
        return self.times.size

    def __call__(self, t: float) -> np.ndarray:
        return self.eval(t)

    def eval(self, t: float) -> np.ndarray:
        t = float(t)
        _check_in_span(t, *self.span)
        ts = self.times
        i = int(np.searchsorted(ts, t, side="right")) - 1
        i = min(max(i, 0), ts.size - 2)
        if t == ts[i]:
            return self.values[i].copy()
        if t == ts[i + 1]:
            return self.values[i + 1].copy()
        h = ts[i + 1] - ts[i]
        s = (t - ts[i]) / h
        y0, y1 = self.values[i], self.values[i + 1]
        if self.kind == "linear":
            return (1 - s) * y0 + s * y1
        d0, d1 = self.derivatives[i], self.derivatives[i + 1]
        h00 = (1 + 2 * s) * (1 - s) ** 2
        h10 = s * (1 - s) ** 2
        h01 = s * s * (3 - 2 * s)
        h11 = s * s * (s - 1)
        return h00 * y0 + h10 * h * d0 + h01 * y1 + h11 * h * d1


def piecewise_eval(kind: str, times, values, derivatives, t: float) -> np.ndarray:
    return PiecewiseInterpolant(kind, times, values, derivatives).eval(t)
