"""Desk-scale gradient-accuracy and NFE experiments.

Every experiment expands its config into independent cells, runs them
(optionally on a thread pool) and returns rows in cell order, so the output
does not depend on ``jobs``.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import problems
from ..diagnostics import fd_gradient
from ..errors import OdeGradError, SolverError
from ..grad import MethodConfig, OdeProblem, grad
from ..ode import SolverConfig
from ..train import OptimizerConfig, train
from .config import ExperimentConfig

log = logging.getLogger(__name__)

TIMING_COLUMNS = ("wall_ms", "cumulative_wall_ms")


@dataclass
class ExperimentResult:
    experiment: str
    columns: list[str]
    rows: list[dict]
    summary: dict = field(default_factory=dict)

    @property
    def unrecoverable(self) -> list[dict]:
        return [r for r in self.rows if str(r.get("status", "ok")).startswith("error")]


def build_method(name: str, N: int | None = None, K: int | None = None,
                 interp_kind: str = "bli") -> MethodConfig:
    if name == "irdm":
        return MethodConfig.irdm(N, interp_kind)
    if name == "checkpoint":
        return MethodConfig.checkpoint(K)
    return MethodConfig(name)


def _status(exc: Exception) -> str:
    kind = "solver_failure" if isinstance(exc, SolverError) else "error"
    return f"{kind}: {type(exc).__name__}: {exc}"


def run_cells(cells: list, fn: Callable, jobs: int = 1) -> list:
    """Apply ``fn`` to every cell; failures become status strings instead of exceptions."""

    def guarded(cell):
        start = time.perf_counter()
        try:
            out = fn(cell)
            out.setdefault("status", "ok")
        except OdeGradError as exc:
            out = {"status": _status(exc)}
        except Exception as exc:  # noqa: BLE001 - a broken cell must not abort the sweep
            log.exception("cell %r crashed", cell)
            out = {"status": f"error: {type(exc).__name__}: {exc}"}
        out["wall_ms"] = 1e3 * (time.perf_counter() - start)
        return out

    if jobs <= 1:
        return [guarded(c) for c in cells]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(guarded, cells))


def _l1_l2(diff):
    return float(np.abs(diff).sum()), float(np.linalg.norm(diff))


# ---------------------------------------------------------------------------
# Tolerance x grid-size sweep
# ---------------------------------------------------------------------------

SWEEP_COLUMNS = ["experiment", "seed", "method", "interp_kind", "tol", "N", "K", "l1_error", "l2_error",
                 "forward_nfe", "backward_nfe", "status", "wall_ms"]


def exp_tol_grid_sweep(cfg: ExperimentConfig) -> ExperimentResult:
    """Gradient error of each method against direct backprop at ``reference_tol``."""
    refs = {}
    for seed in cfg.seeds:
        case = problems.sweep_case(seed, cfg.reference_tol)
        refs[seed] = grad(case.problem, MethodConfig.direct(), case.seed).dL_dtheta

    cells = []
    for seed in cfg.seeds:
        for method in cfg.methods:
            for tol in cfg.tolerances:
                if method == "irdm":
                    cells += [(seed, method, tol, n, None) for n in cfg.N]
                elif method == "checkpoint":
                    cells += [(seed, method, tol, None, k) for k in cfg.K]
                else:
                    cells.append((seed, method, tol, None, None))

    def run(cell):
        seed, method, tol, n, k = cell
        case = problems.sweep_case(seed, tol)
        res = grad(case.problem, build_method(method, n, k), case.seed)
        l1, l2 = _l1_l2(res.dL_dtheta - refs[seed])
        return dict(l1_error=l1, l2_error=l2, forward_nfe=res.stats.forward_nfe,
                    backward_nfe=res.stats.backward_nfe)

    rows = []
    for cell, out in zip(cells, run_cells(cells, run, cfg.jobs)):
        seed, method, tol, n, k = cell
        rows.append(dict(experiment=cfg.experiment, seed=seed, method=method,
                         interp_kind="bli" if method == "irdm" else "", tol=tol, N=n, K=k, **out))
    return ExperimentResult(cfg.experiment, SWEEP_COLUMNS, rows, sweep_summary(rows, cfg))


def sweep_summary(rows, cfg: ExperimentConfig) -> dict:
    """Per seed: does each N column fall with tolerance, and is error vs N non-monotonic at the loosest tol."""
    summary = {}
    tols = sorted(cfg.tolerances, reverse=True)
    for seed in cfg.seeds:
        table = {(r["tol"], r["N"]): r.get("l1_error") for r in rows
                 if r["seed"] == seed and r["method"] == "irdm"}
        columns = {}
        for n in cfg.N:
            errs = [table.get((t, n)) for t in tols]
            columns[n] = None not in errs and all(a > b for a, b in zip(errs, errs[1:]))
        loose = [table.get((tols[0], n)) for n in sorted(cfg.N)]
        if None in loose or len(loose) < 3:
            nonmono = interior_min = False
        else:
            d = np.diff(loose)
            nonmono = not (np.all(d <= 0) or np.all(d >= 0))
            interior_min = min(loose[1:-1]) < min(loose[0], loose[-1])
        summary[seed] = dict(columns_decreasing=columns, loose_tol_nonmonotonic=bool(nonmono),
                             loose_tol_interior_minimum=bool(interior_min))
    return summary


# ---------------------------------------------------------------------------
# Collapsing system: RDM vs IRDM backward NFE
# ---------------------------------------------------------------------------

COLLAPSE_COLUMNS = ["experiment", "seed", "method", "tol", "N", "forward_nfe", "backward_nfe",
                    "rdm_to_irdm_nfe_ratio", "rel_error", "status", "wall_ms"]


def exp_collapse_nfe(cfg: ExperimentConfig, span=problems.COLLAPSE_SPAN) -> ExperimentResult:
    oracles = {}
    for seed in cfg.seeds:
        case = problems.collapse_case(seed, cfg.tolerances[0], span)
        oracles[seed] = fd_gradient(case.problem, case.loss).dL_dtheta

    methods = [m for m in cfg.methods if m in ("rdm", "irdm")] or ["rdm", "irdm"]
    n = cfg.N[0]
    cells = [(seed, tol, m) for seed in cfg.seeds for tol in cfg.tolerances for m in methods]

    def run(cell):
        seed, tol, method = cell
        case = problems.collapse_case(seed, tol, span)
        res = grad(case.problem, build_method(method, n), case.seed)
        ref = oracles[seed]
        rel = float(np.abs(res.dL_dtheta - ref).max() / max(np.abs(ref).max(), 1e-8))
        return dict(forward_nfe=res.stats.forward_nfe, backward_nfe=res.stats.backward_nfe, rel_error=rel)

    rows = []
    for (seed, tol, method), out in zip(cells, run_cells(cells, run, cfg.jobs)):
        rows.append(dict(experiment=cfg.experiment, seed=seed, method=method, tol=tol,
                         N=n if method == "irdm" else None, rdm_to_irdm_nfe_ratio=None, **out))
    summary = {}
    for seed in cfg.seeds:
        for tol in cfg.tolerances:
            pick = {r["method"]: r for r in rows if r["seed"] == seed and r["tol"] == tol}
            rdm, irdm = pick.get("rdm"), pick.get("irdm")
            if rdm and irdm and rdm["status"] == "ok" and irdm["status"] == "ok":
                ratio = rdm["backward_nfe"] / irdm["backward_nfe"]
                irdm["rdm_to_irdm_nfe_ratio"] = ratio
                summary[(seed, tol)] = dict(ratio=ratio, irdm_cheaper=irdm["backward_nfe"] < rdm["backward_nfe"])
            else:
                summary[(seed, tol)] = dict(ratio=None, irdm_cheaper=bool(irdm and irdm["status"] == "ok"))
    return ExperimentResult(cfg.experiment, COLLAPSE_COLUMNS, rows, summary)


# ---------------------------------------------------------------------------
# Trajectory fitting
# ---------------------------------------------------------------------------

TRAJ_COLUMNS = ["experiment", "seed", "method", "tol", "N", "K", "epoch", "loss", "forward_nfe",
                "backward_nfe", "status", "cumulative_wall_ms"]


def exp_traj_fit(cfg: ExperimentConfig, hidden: int = 16) -> ExperimentResult:
    times, states = problems.cubic_trajectory()
    tol = cfg.tolerances[0]
    n, k = cfg.N[0], cfg.K[0]
    cells = [(seed, m) for seed in cfg.seeds for m in cfg.methods]

    def run(cell):
        seed, method = cell
        from ..autodiff import mlp_field

        field = mlp_field(2, hidden, seed=seed)
        problem = OdeProblem(field, problems.TRAJ_Z0, problems.TRAJ_SPAN, SolverConfig.tol(tol))
        mcfg = build_method(method, n, k)
        trace = train(problem, mcfg, times, states, OptimizerConfig("adam", lr=cfg.lr), cfg.epochs)
        return dict(trace=trace)

    rows, summary = [], {}
    for (seed, method), out in zip(cells, run_cells(cells, run, cfg.jobs)):
        base = dict(experiment=cfg.experiment, seed=seed, method=method, tol=tol,
                    N=n if method == "irdm" else None, K=k if method == "checkpoint" else None)
        trace = out.get("trace")
        if trace is None:
            rows.append(dict(base, epoch=None, loss=None, forward_nfe=None, backward_nfe=None,
                             status=out["status"], cumulative_wall_ms=out["wall_ms"]))
            continue
        status = "ok" if trace.error is None else f"diverged: {trace.error}"
        for rec in trace.records:
            rows.append(dict(base, epoch=rec.epoch, loss=rec.loss, forward_nfe=rec.forward_nfe,
                             backward_nfe=rec.backward_nfe, status=status,
                             cumulative_wall_ms=rec.cumulative_wall_ms))
        summary[(seed, method)] = dict(final_loss=trace.final_loss, total_nfe=trace.total_nfe,
                                       epochs=len(trace), error=trace.error)
    return ExperimentResult(cfg.experiment, TRAJ_COLUMNS, rows, summary)


# ---------------------------------------------------------------------------
# Interpolant comparison
# ---------------------------------------------------------------------------

INTERP_COLUMNS = ["experiment", "seed", "method", "interp_kind", "tol", "N", "l1_error", "l2_error",
                  "forward_nfe", "backward_nfe", "status", "wall_ms"]


def exp_interp_compare(cfg: ExperimentConfig, hidden: int = 8) -> ExperimentResult:
    refs = {}
    for seed in cfg.seeds:
        case = problems.mlp_case(seed, cfg.reference_tol, hidden=hidden)
        refs[seed] = grad(case.problem, MethodConfig.direct(), case.seed).dL_dtheta
    cells = [(seed, tol, n, kind) for seed in cfg.seeds for tol in cfg.tolerances for n in cfg.N
             for kind in cfg.interp_kinds]

    def run(cell):
        seed, tol, n, kind = cell
        case = problems.mlp_case(seed, tol, hidden=hidden)
        res = grad(case.problem, MethodConfig.irdm(n, kind), case.seed)
        l1, l2 = _l1_l2(res.dL_dtheta - refs[seed])
        return dict(l1_error=l1, l2_error=l2, forward_nfe=res.stats.forward_nfe,
                    backward_nfe=res.stats.backward_nfe)

    rows = []
    for (seed, tol, n, kind), out in zip(cells, run_cells(cells, run, cfg.jobs)):
        rows.append(dict(experiment=cfg.experiment, seed=seed, method="irdm", interp_kind=kind, tol=tol,
                         N=n, **out))
    summary = {}
    for seed in cfg.seeds:
        for tol in cfg.tolerances:
            for n in cfg.N:
                errs = {r["interp_kind"]: r.get("l1_error") for r in rows
                        if r["seed"] == seed and r["tol"] == tol and r["N"] == n}
                summary[(seed, tol, n)] = errs
    return ExperimentResult(cfg.experiment, INTERP_COLUMNS, rows, summary)


EXPERIMENT_FUNCS = {
    "tol_grid_sweep": exp_tol_grid_sweep,
    "collapse_nfe": exp_collapse_nfe,
    "traj_fit": exp_traj_fit,
    "interp_compare": exp_interp_compare,
}


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    return EXPERIMENT_FUNCS[cfg.experiment](cfg)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.17g}"
    return str(value)


def write_csv(result: ExperimentResult, path) -> None:
    """RFC-4180 CSV (CRLF line ends, header row, 17 significant digits)."""
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(result.columns)
        for row in result.rows:
            w.writerow([_fmt(row.get(c)) for c in result.columns])
