"""Experiment configuration: YAML file, defaults and command-line overrides.

Schema (every key optional; defaults are the benchmark values)::

    model: pvtol
    pvtol:
      mu: 0.4
      tau: 0.1
      horizon: 15
      u_lower: [-1.5, -0.5]
      u_upper: [1.5, 0.5]
      velocity_limits: {y1_dot: 0.3, y2_dot: 0.3, theta_dot: 0.2}
      penalty_weight: 1000.0
      terminal_penalties: false  # true: exact penalties also enter gamma * l(z_N)
    scenario:
      targets: [0.2, 0.5, 1.0, 2.0]
      steps: null            # null: 300 for d <= 0.5, else 600
      x0: [0, 0, 0, 0, 0, 0] # or "target" to start at x_ref
      u0: [1.0, 0.0]
    cost:
      variants: [full, no_derivative, nominal]
      gammas: [1, 5, 50, 100, 1000, 5000]
    solver:
      max_iterations: 15
      memory_size: 10
      armijo_c: 1.0e-4
      backtrack: 0.5
      gradient_tolerance: 1.0e-8
      max_linesearch_steps: 30
      reset_on_penalty_change: false
    check:
      ell_floor: 1.0e-3
      decrease_tolerance: 1.0e-6
      beta_min: 0.0
      hard_decrease_gamma: 100.0
      gradient_instances: 10
      gradient_tolerance: 1.0e-6
      fd_step: 1.0e-6
      contraction_probes: 4
      contraction_iterations: 200
    output:
      dir: results
      log_y: false
    jobs: null               # null: number of CPUs
    seed: 0

The ``nominal`` variant ignores the gamma list and appears once per target.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .cost import Variant
from .ocp import SolverConfig
from .pvtol import GAMMAS, HOVER, TARGETS, PvtolParams, Scenario

OUT_ENV = "NMPCLAB_OUT"


class ConfigError(ValueError):
    """Invalid configuration; the CLI maps it to exit code 2."""


@dataclass(frozen=True)
class CheckConfig:
    ell_floor: float = 1e-3
    decrease_tolerance: float = 1e-6
    beta_min: float = 0.0
    hard_decrease_gamma: float = 100.0
    gradient_instances: int = 10
    gradient_tolerance: float = 1e-6
    fd_step: float = 1e-6
    contraction_probes: int = 4
    contraction_iterations: int = 200


@dataclass(frozen=True)
class Cell:
    """One grid point of a sweep."""

    variant: Variant
    gamma: float
    d: float
    steps: int

    @property
    def stem(self) -> str:
        return f"{self.variant.value}_{self.gamma:g}_{self.d:g}"


@dataclass(frozen=True)
class ExperimentConfig:
    model: str = "pvtol"
    params: PvtolParams = field(default_factory=PvtolParams)
    targets: tuple[float, ...] = TARGETS
    steps: int | None = None
    x0: tuple[float, ...] | str = (0.0,) * 6
    u0: tuple[float, ...] = HOVER
    variants: tuple[Variant, ...] = (Variant.FULL, Variant.NO_DERIVATIVE, Variant.NOMINAL)
    gammas: tuple[float, ...] = GAMMAS
    solver: SolverConfig = field(default_factory=SolverConfig)
    check: CheckConfig = field(default_factory=CheckConfig)
    out_dir: Path = Path("results")
    log_y: bool = False
    jobs: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.model != "pvtol":
            raise ConfigError(f"unknown model {self.model!r}; only 'pvtol' is available")
        if not self.targets:
            raise ConfigError("target list is empty")
        if any(not (d > 0 and math.isfinite(d)) for d in self.targets):
            raise ConfigError(f"targets must be positive, got {list(self.targets)}")
        if not self.variants:
            raise ConfigError("variant list is empty")
        if not self.gammas:
            raise ConfigError("gamma list is empty")
        if any(not (g > 0 and math.isfinite(g)) for g in self.gammas):
            raise ConfigError(f"gammas must be positive, got {list(self.gammas)}")
        if self.steps is not None and self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.jobs is not None and self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")
        if isinstance(self.x0, str):
            if self.x0 != "target":
                raise ConfigError("scenario.x0 must be a list of 6 numbers or 'target'")
        elif len(self.x0) != 6:
            raise ConfigError("scenario.x0 needs 6 entries")
        if len(self.u0) != 2:
            raise ConfigError("scenario.u0 needs 2 entries")

    def steps_for(self, d: float) -> int:
        if self.steps is not None:
            return self.steps
        return 300 if d <= 0.5 else 600

    def scenario(self, d: float) -> Scenario:
        x0 = (d, d, 0.0, 0.0, 0.0, 0.0) if self.x0 == "target" else tuple(self.x0)
        return Scenario(d, self.steps_for(d), x0, tuple(self.u0))

    def cells(self) -> list[Cell]:
        out = []
        for d in self.targets:
            for v in self.variants:
                gammas = (0.0,) if v is Variant.NOMINAL else self.gammas
                for g in gammas:
                    out.append(Cell(v, float(g), float(d), self.steps_for(d)))
        return out

    @property
    def n_jobs(self) -> int:
        return self.jobs or os.cpu_count() or 1

    def to_dict(self) -> dict[str, Any]:
        p = self.params
        return {
            "model": self.model,
            "pvtol": {
                "mu": p.mu,
                "tau": p.tau,
                "horizon": p.horizon,
                "u_lower": list(p.u_lower),
                "u_upper": list(p.u_upper),
                "velocity_limits": dict(p.velocity_limits),
                "penalty_weight": p.penalty_weight,
                "terminal_penalties": p.terminal_penalties,
            },
            "scenario": {
                "targets": list(self.targets),
                "steps": self.steps,
                "x0": self.x0 if isinstance(self.x0, str) else list(self.x0),
                "u0": list(self.u0),
            },
            "cost": {"variants": [v.value for v in self.variants], "gammas": list(self.gammas)},
            "solver": dataclasses.asdict(self.solver),
            "check": dataclasses.asdict(self.check),
            "output": {"dir": str(self.out_dir), "log_y": self.log_y},
            "jobs": self.jobs,
            "seed": self.seed,
        }


_SECTIONS = {"model", "pvtol", "scenario", "cost", "solver", "check", "output", "jobs", "seed"}


def _section(raw: dict, key: str) -> dict:
    value = raw.get(key) or {}
    if not isinstance(value, dict):
        raise ConfigError(f"section {key!r} must be a mapping")
    return value


def _known(section: dict, cls, name: str) -> dict:
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return section


def _floats(values, name: str) -> tuple[float, ...]:
    if not isinstance(values, (list, tuple)):
        values = [values]
    try:
        return tuple(float(v) for v in values)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be numbers, got {values!r}") from None


def from_dict(raw: dict | None) -> ExperimentConfig:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a mapping at the top level")
    unknown = set(raw) - _SECTIONS
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    try:
        pv = dict(_section(raw, "pvtol"))
        for key in ("u_lower", "u_upper"):
            if key in pv:
                pv[key] = _floats(pv[key], f"pvtol.{key}")
        params = PvtolParams(**_known(pv, PvtolParams, "pvtol"))
        sc = _section(raw, "scenario")
        _known_keys(sc, {"targets", "steps", "x0", "u0"}, "scenario")
        cost = _section(raw, "cost")
        _known_keys(cost, {"variants", "gammas"}, "cost")
        out = _section(raw, "output")
        _known_keys(out, {"dir", "log_y"}, "output")
        kwargs: dict[str, Any] = {
            "model": raw.get("model", "pvtol"),
            "params": params,
            "solver": SolverConfig(**_known(_section(raw, "solver"), SolverConfig, "solver")),
            "check": CheckConfig(**_known(_section(raw, "check"), CheckConfig, "check")),
        }
        if "targets" in sc:
            kwargs["targets"] = _floats(sc["targets"], "scenario.targets")
        if sc.get("steps") is not None:
            kwargs["steps"] = int(sc["steps"])
        if "x0" in sc:
            kwargs["x0"] = sc["x0"] if isinstance(sc["x0"], str) else _floats(sc["x0"], "scenario.x0")
        if "u0" in sc:
            kwargs["u0"] = _floats(sc["u0"], "scenario.u0")
        if "variants" in cost:
            names = cost["variants"] if isinstance(cost["variants"], list) else [cost["variants"]]
            kwargs["variants"] = tuple(Variant.parse(v) for v in names)
        if "gammas" in cost:
            kwargs["gammas"] = _floats(cost["gammas"], "cost.gammas")
        if "dir" in out:
            kwargs["out_dir"] = Path(out["dir"])
        if "log_y" in out:
            kwargs["log_y"] = bool(out["log_y"])
        if raw.get("jobs") is not None:
            kwargs["jobs"] = int(raw["jobs"])
        if raw.get("seed") is not None:
            kwargs["seed"] = int(raw["seed"])
        return ExperimentConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _known_keys(section: dict, names: set[str], name: str) -> None:
    unknown = set(section) - names
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return from_dict(raw)


def apply_overrides(
    cfg: ExperimentConfig,
    *,
    gammas=None,
    targets=None,
    variants=None,
    steps=None,
    out=None,
    log_y=None,
    jobs=None,
    seed=None,
) -> ExperimentConfig:
    """Command-line values win over the file; ``NMPCLAB_OUT`` sits in between."""
    changes: dict[str, Any] = {}
    if gammas:
        changes["gammas"] = tuple(float(g) for g in gammas)
    if targets:
        changes["targets"] = tuple(float(d) for d in targets)
    if variants:
        try:
            changes["variants"] = tuple(Variant.parse(v) for v in variants)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if steps is not None:
        changes["steps"] = int(steps)
    if out is not None:
        changes["out_dir"] = Path(out)
    elif os.environ.get(OUT_ENV):
        changes["out_dir"] = Path(os.environ[OUT_ENV])
    if log_y:
        changes["log_y"] = True
    if jobs is not None:
        changes["jobs"] = int(jobs)
    if seed is not None:
        changes["seed"] = int(seed)
    try:
        return dataclasses.replace(cfg, **changes)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
