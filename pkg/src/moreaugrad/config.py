"""Experiment configuration: a flat JSON document with validated fields.

Precedence, lowest to highest: built-in defaults, per-experiment defaults
(:data:`EXPERIMENT_DEFAULTS`), the JSON config file, command-line flags.
Unknown keys are rejected and every field is validated before any
computation starts.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .envelope import PRESETS
from .optimize import ORACLES

EXPERIMENTS = ("pendulum", "train-mlp", "envelope-check", "grid-search")
DATASETS = ("auto", "synth", "idx")
LOSSES = ("squared", "logistic")
ACTIVATIONS = ("tanh", "softplus", "relu", "identity")
GRID_PARAMS = ("step", "gamma", "alpha", "beta", "kappa")


class ConfigError(ValueError):
    """Raised for malformed, unknown or out-of-range configuration values."""


def _powers_of_two(lo: int, hi: int):
    return [2.0 ** e for e in range(lo, hi + 1)]


@dataclass(frozen=True)
class ExperimentConfig:
    """All settings of one experiment run.

    Attributes
    ----------
    experiment : str
        ``pendulum``, ``train-mlp``, ``envelope-check`` or ``grid-search``.
    oracle, solver : str
        Oracle family and inner-solver preset (``theory`` or ``practice``).
    gamma, alpha, beta, kappa, step, mu : float
        State step, parameter step, multiplier step, penalty weight, outer
        gradient-descent step ``delta`` and parameter regularization weight.
    geometric : bool
        Geometric per-layer schedule (pendulum) or constant steps (MLP).
    horizon, iters, dt, rho, baseline_step :
        Pendulum horizon, iteration budget, discretization step, velocity
        penalty and, when not ``None``, the step of a gradient-descent
        baseline run written next to the main curve.
    hidden, activation, loss, epochs, batch_size :
        MLP architecture and mini-batch settings.
    dataset, images, labels, limit, test_fraction :
        Data source (``auto`` picks IDX files when both paths are set).
    blob_classes, blob_per_class, blob_dim, blob_sigma :
        Synthetic Gaussian-blob fallback.
    grid_target, grid_param, grid, grid_budget :
        Grid search: experiment to tune, parameter name, candidate values
        and the iteration (epoch) budget of the area selection rule.
    instances :
        Instance count of the property suite.
    seed, out :
        Random seed and output directory.
    """

    experiment: str = "pendulum"
    oracle: str = "moreau"
    solver: str = "practice"
    gamma: float = 0.5
    alpha: float = 128.0
    beta: float = 1.0
    kappa: float = 1.0
    step: float = 0.5
    mu: float = 0.0
    geometric: bool = True
    horizon: int = 50
    iters: int = 200
    dt: float = 0.1
    rho: float = 0.1
    baseline_step: float | None = None
    hidden: list = field(default_factory=lambda: [64])
    activation: str = "relu"
    loss: str = "squared"
    epochs: int = 10
    batch_size: int = 256
    dataset: str = "auto"
    images: str | None = None
    labels: str | None = None
    limit: int = 1000
    test_fraction: float = 0.0
    blob_classes: int = 10
    blob_per_class: int = 100
    blob_dim: int = 20
    blob_sigma: float = 0.3
    grid_target: str = "pendulum"
    grid_param: str = "step"
    grid: list = field(default_factory=lambda: _powers_of_two(-7, 4))
    grid_budget: int = 50
    instances: int = 10
    seed: int = 0
    out: str = "out"

    # ---------------------------------------------------------------- parsing

    @classmethod
    def keys(cls):
        return tuple(f.name for f in fields(cls))

    @classmethod
    def from_dict(cls, data: dict, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        """Overlay ``data`` on ``base`` (or the per-experiment defaults) and validate."""
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        unknown = sorted(set(data) - set(cls.keys()))
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        if base is None:
            experiment = data.get("experiment", cls.experiment)
            base = cls.defaults_for(experiment) if experiment in EXPERIMENTS else cls()
        cfg = replace(base, **{k: _coerce(k, v) for k, v in data.items()})
        cfg.validate()
        return cfg

    @classmethod
    def defaults_for(cls, experiment: str) -> "ExperimentConfig":
        return replace(cls(), experiment=experiment, **EXPERIMENT_DEFAULTS.get(experiment, {}))

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "ExperimentConfig":
        """Read a JSON file and apply ``overrides`` (e.g. command-line flags) on top."""
        try:
            data = json.loads(Path(path).read_text())
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        except json.JSONDecodeError as err:
            raise ConfigError(f"config {path} is not valid JSON: {err}") from err
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        return cls.from_dict({**data, **(overrides or {})})

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    # ------------------------------------------------------------- validation

    def validate(self):
        """Check every field; raises :class:`ConfigError` on the first problem."""
        _choice("experiment", self.experiment, EXPERIMENTS)
        _choice("oracle", self.oracle, ORACLES)
        _choice("solver", self.solver, tuple(PRESETS))
        _choice("activation", self.activation, ACTIVATIONS)
        _choice("loss", self.loss, LOSSES)
        _choice("dataset", self.dataset, DATASETS)
        _choice("grid_target", self.grid_target, ("pendulum", "train-mlp"))
        _choice("grid_param", self.grid_param, GRID_PARAMS)
        for name in ("gamma", "dt"):
            _positive(name, getattr(self, name))
        for name in ("alpha", "beta", "kappa", "step", "mu", "rho"):
            _nonnegative(name, getattr(self, name))
        if self.baseline_step is not None:
            _nonnegative("baseline_step", self.baseline_step)
        for name in ("horizon", "epochs", "batch_size", "limit", "blob_classes", "blob_per_class", "blob_dim",
                     "instances", "grid_budget"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.iters < 0:
            raise ConfigError("iters must be non-negative")
        if not 0 <= self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in [0, 1)")
        _nonnegative("blob_sigma", self.blob_sigma)
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ConfigError("hidden must be a non-empty list of positive layer widths")
        if not self.grid:
            raise ConfigError("grid must contain at least one candidate")
        for v in self.grid:
            _nonnegative("grid value", v)
        if self.geometric and self.gamma > 1 and self.oracle in ("moreau", "auglag", "reg-targetprop"):
            raise ConfigError("a geometric schedule needs gamma <= 1; set geometric to false for larger gamma")
        if self.oracle == "targetprop" and not self.kappa > 0:
            raise ConfigError("targetprop needs kappa > 0")
        if self.dataset == "idx" and not (self.images and self.labels):
            raise ConfigError("dataset 'idx' needs both images and labels paths")
        if bool(self.images) != bool(self.labels):
            raise ConfigError("images and labels paths must be given together")


EXPERIMENT_DEFAULTS = {
    "pendulum": dict(oracle="moreau", solver="practice", gamma=0.5, alpha=128.0, step=0.5,
                     geometric=True, horizon=50, iters=200),
    "train-mlp": dict(oracle="moreau", solver="practice", gamma=1.0, alpha=2.0, step=4.0, geometric=False,
                      mu=1e-6, epochs=10, batch_size=256),
    "envelope-check": dict(solver="theory"),
    "grid-search": dict(oracle="backprop", grid_target="pendulum", grid_param="step"),
}

_FLOAT = {"gamma", "alpha", "beta", "kappa", "step", "mu", "dt", "rho", "baseline_step", "test_fraction",
          "blob_sigma"}
_INT = {"horizon", "iters", "epochs", "batch_size", "limit", "blob_classes", "blob_per_class", "blob_dim",
        "grid_budget", "instances", "seed"}
_STR = {"experiment", "oracle", "solver", "activation", "loss", "dataset", "grid_target", "grid_param", "out"}
_OPT_STR = {"images", "labels"}


def _coerce(key, value):
    """Type-check one raw JSON value (ints are accepted where floats are expected)."""
    if key in _FLOAT:
        if value is None and key == "baseline_step":
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ConfigError(f"{key} must be a finite number, got {value!r}")
        return float(value)
    if key in _INT:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return int(value)
    if key in _STR:
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string, got {value!r}")
        return value
    if key in _OPT_STR:
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"{key} must be a path string or null, got {value!r}")
        return value
    if key == "geometric":
        if not isinstance(value, bool):
            raise ConfigError(f"geometric must be true or false, got {value!r}")
        return value
    if key == "hidden":
        if not isinstance(value, list) or any(isinstance(v, bool) or not isinstance(v, int) for v in value):
            raise ConfigError(f"hidden must be a list of integers, got {value!r}")
        return list(value)
    if key == "grid":
        if not isinstance(value, list) or any(isinstance(v, bool) or not isinstance(v, (int, float))
                                              for v in value):
            raise ConfigError(f"grid must be a list of numbers, got {value!r}")
        return [float(v) for v in value]
    raise ConfigError(f"unknown configuration key {key!r}")


def _choice(name, value, allowed):
    if value not in allowed:
        raise ConfigError(f"{name} must be one of {', '.join(allowed)}; got {value!r}")


def _positive(name, value):
    if not value > 0:
        raise ConfigError(f"{name} must be positive, got {value!r}")


def _nonnegative(name, value):
    if not value >= 0:
        raise ConfigError(f"{name} must be non-negative, got {value!r}")
