"""Full-batch training of a neural ODE on sampled trajectory data."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import ConfigError, OdeGradError
from .grad import MethodConfig, OdeProblem, trajectory_grad


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.kind!r}")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")

    def build(self, size: int):
        return Adam(size, self) if self.kind == "adam" else Sgd(size, self)


class Sgd:
    def __init__(self, size, cfg: OptimizerConfig):
        self.cfg = cfg
        self.velocity = np.zeros(size)

    def step(self, params, grad):
        if self.cfg.momentum:
            self.velocity = self.cfg.momentum * self.velocity + grad
            grad = self.velocity
        return params - self.cfg.lr * grad


class Adam:
    def __init__(self, size, cfg: OptimizerConfig):
        self.cfg = cfg
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.n = 0

    def step(self, params, grad):
        b1, b2 = self.cfg.betas
        self.n += 1
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad * grad
        m_hat = self.m / (1 - b1 ** self.n)
        v_hat = self.v / (1 - b2 ** self.n)
        return params - self.cfg.lr * m_hat / (np.sqrt(v_hat) + self.cfg.eps)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    forward_nfe: int
    backward_nfe: int
    cumulative_wall_ms: float


@dataclass
class TrainingTrace:
    method: str
    records: list[EpochRecord] = dc_field(default_factory=list)
    error: str | None = None

    def __len__(self):
        return len(self.records)

    @property
    def final_loss(self) -> float:
        return self.records[-1].loss if self.records else math.nan

    @property
    def total_nfe(self) -> int:
        if not self.records:
            return 0
        return self.records[-1].forward_nfe + self.records[-1].backward_nfe

    def to_csv(self, fh):
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "forward_nfe", "backward_nfe", "cumulative_wall_ms"])
        for r in self.records:
            w.writerow([r.epoch, f"{r.loss:.17g}", r.forward_nfe, r.backward_nfe,
                        f"{r.cumulative_wall_ms:.3f}"])


def train(problem: OdeProblem, mcfg: MethodConfig, times, targets, optimizer: OptimizerConfig,
          epochs: int) -> TrainingTrace:
    """Minimise the mse between z(times) and ``targets``; updates ``problem.field`` in place.

    Each epoch is one full-batch gradient step.  NFE columns are cumulative.
    A non-finite loss or a solver failure stops training and is recorded in
    ``trace.error``.
    """
    if epochs < 0:
        raise ConfigError("epochs must be non-negative")
    field = problem.field
    opt = optimizer.build(field.param_dim)
    trace = TrainingTrace(mcfg.label)
    fwd = bwd = 0
    start = time.perf_counter()
    for epoch in range(epochs):
        try:
            tg = trajectory_grad(problem, mcfg, times, targets)
        except OdeGradError as exc:
            trace.error = f"epoch {epoch}: {type(exc).__name__}: {exc}"
            break
        if not math.isfinite(tg.loss):
            trace.error = f"epoch {epoch}: non-finite loss"
            break
        fwd += tg.result.stats.forward_nfe
        bwd += tg.result.stats.backward_nfe
        trace.records.append(EpochRecord(epoch, tg.loss, fwd, bwd,
                                         1e3 * (time.perf_counter() - start)))
        new = opt.step(field.params.values, tg.result.dL_dtheta)
        if not np.all(np.isfinite(new)):
            trace.error = f"epoch {epoch}: non-finite parameters"
            break
        field.set_params(new)
    return trace
