"""Experiment configuration: flat ``key = value`` text files.

Lists are comma separated; ``#`` starts a comment.  Unknown keys are errors.

    seed = 0
    methods = direct, rdm, irdm, checkpoint
    tolerances = 1e-3, 1e-5, 1e-7
    N = 4, 8, 16, 32, 64
    K = 8
    repeat = 1
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from ..errors import ConfigError
from ..grad import INTERP_KINDS, METHODS

EXPERIMENTS = ("tol_grid_sweep", "collapse_nfe", "traj_fit", "interp_compare")

_DEFAULTS = {
    "tol_grid_sweep": dict(methods=["irdm"], tolerances=[1e-3, 1e-5, 1e-7], N=[4, 8, 16, 32, 64],
                           reference_tol=1e-7),
    "collapse_nfe": dict(methods=["rdm", "irdm"], tolerances=[1e-5, 1e-7], N=[16], repeat=3),
    "traj_fit": dict(methods=list(METHODS), tolerances=[1e-5], N=[8], K=[4], epochs=300, lr=0.01),
    "interp_compare": dict(methods=["irdm"], tolerances=[1e-7], N=[8, 32],
                           interp_kinds=list(INTERP_KINDS), repeat=3, reference_tol=1e-10),
}


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int = 0
    methods: list[str] = field(default_factory=list)
    tolerances: list[float] = field(default_factory=list)
    N: list[int] = field(default_factory=list)
    K: list[int] = field(default_factory=lambda: [8])
    interp_kinds: list[str] = field(default_factory=lambda: ["bli"])
    repeat: int = 1
    jobs: int = 1
    epochs: int = 300
    lr: float = 0.01
    reference_tol: float = 1e-10
    out_dir: Path = Path("bench_out")

    def validate(self) -> "ExperimentConfig":
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        for name in ("methods", "tolerances", "N"):
            if not getattr(self, name):
                raise ConfigError(f"{name} must not be empty")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}")
        bad = [k for k in self.interp_kinds if k not in INTERP_KINDS]
        if bad:
            raise ConfigError(f"unknown interp kinds {bad}")
        if any(not t > 0 for t in self.tolerances + [self.reference_tol]):
            raise ConfigError("tolerances must be positive")
        if any(n < 1 for n in self.N) or any(k < 1 for k in self.K):
            raise ConfigError("N and K entries must be >= 1")
        if self.repeat < 1 or self.jobs < 1:
            raise ConfigError("repeat and jobs must be >= 1")
        if self.epochs < 0 or not self.lr > 0:
            raise ConfigError("epochs must be >= 0 and lr > 0")
        return self

    @property
    def seeds(self) -> list[int]:
        return [self.seed + r for r in range(self.repeat)]


_LIST_TYPES = {"methods": str, "tolerances": float, "N": int, "K": int, "interp_kinds": str}
_SCALAR_TYPES = {"seed": int, "repeat": int, "jobs": int, "epochs": int, "lr": float,
                 "reference_tol": float, "out_dir": Path, "experiment": str}


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key in _LIST_TYPES:
                values[key] = [_LIST_TYPES[key](v.strip()) for v in value.split(",") if v.strip()]
            elif key in _SCALAR_TYPES:
                values[key] = _SCALAR_TYPES[key](value)
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from None
    return values


def load_config(experiment: str, path: str | Path | None = None, **overrides) -> ExperimentConfig:
    """Defaults for ``experiment`` < config file < ODEGRAD_* env vars < explicit overrides."""
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment!r}; expected one of {EXPERIMENTS}")
    values = dict(_DEFAULTS[experiment])
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        file_values = parse_config_text(text)
        if file_values.pop("experiment", experiment) != experiment:
            raise ConfigError("config file names a different experiment")
        values.update(file_values)
    for env, key in (("ODEGRAD_SEED", "seed"), ("ODEGRAD_JOBS", "jobs")):
        if os.environ.get(env):
            try:
                values[key] = int(os.environ[env])
            except ValueError:
                raise ConfigError(f"{env} must be an integer") from None
    values.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    return ExperimentConfig(experiment=experiment, **values).validate()


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(cfg, **kw).validate()
