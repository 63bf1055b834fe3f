"""Command-line entry point.

Usage::

    moreaugrad pendulum|train-mlp|envelope-check|grid-search [--config PATH]
               [--seed N] [--out DIR] [--oracle NAME]

Each run writes ``<out>/config.json`` (the fully resolved configuration, which
can be fed back with ``--config``) and ``<out>/summary.json``. Training runs
also write ``<out>/curve.csv`` with header
``iter,train_loss,test_loss,test_acc,grad_norm,seconds``; the ``seconds``
column is left empty so equal configurations give byte-identical files
(wall-clock time goes to the summary).

Exit codes: 0 on success, 1 when the run diverged, 2 on configuration or
input errors.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checks
from .config import EXPERIMENTS, ConfigError, ExperimentConfig
from .data import Dataset, DatasetError, load_idx_dataset, synth_blobs
from .experiments import PendulumParams, build_mlp, build_pendulum_chain, swing_up_error
from .optimize import (ORACLES, GridSearchError, RunRecord, gradient_descent, grid_search, make_oracle,
                       minibatch_loop, record_summary, run_batch)

log = logging.getLogger("moreaugrad")

EXIT_OK, EXIT_DIVERGED, EXIT_CONFIG = 0, 1, 2
SWING_UP_TOLERANCE = 0.2


def oracle_from_config(cfg: ExperimentConfig):
    return make_oracle(cfg.oracle, cfg.solver, step=cfg.step, gamma=cfg.gamma, alpha=cfg.alpha, beta=cfg.beta,
                       kappa=cfg.kappa, geometric=cfg.geometric, mu=cfg.mu)


# ------------------------------------------------------------------ drivers


def pendulum_run(cfg: ExperimentConfig):
    """Control a pendulum from zero controls; returns ``(record, extra summary)``."""
    p = PendulumParams(dt=cfg.dt, horizon=cfg.horizon, rho=cfg.rho)
    chain, h = build_pendulum_chain(p)
    w, record = run_batch(chain, h, p.x0, chain.zero_params(), oracle_from_config(cfg), cfg.iters)
    theta, omega = (float(v) for v in _final_state(chain, w, p.x0))
    return record, {"final_theta": theta, "final_omega": omega,
                    "swing_up_error": swing_up_error(theta),
                    "swing_up_reached": swing_up_error(theta) <= SWING_UP_TOLERANCE}


def _final_state(chain, w, x0):
    from .chain import forward
    return forward(chain, w, x0)[-1]


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    """IDX files when configured (``dataset`` ``idx`` or ``auto`` with paths), else Gaussian blobs."""
    if cfg.dataset == "idx" or (cfg.dataset == "auto" and cfg.images):
        ds = load_idx_dataset(cfg.images, cfg.labels, cfg.limit)
    else:
        ds = synth_blobs(cfg.blob_classes, cfg.blob_per_class, cfg.blob_dim, cfg.seed, cfg.blob_sigma)
        if ds.n > cfg.limit:
            ds = Dataset(ds.inputs[:cfg.limit], ds.labels[:cfg.limit], ds.n_classes)
    return ds.split(cfg.test_fraction)


def mlp_run(cfg: ExperimentConfig, dataset: Dataset | None = None):
    """Mini-batch training of an MLP classifier; returns ``(record, extra summary)``."""
    ds = load_dataset(cfg) if dataset is None else dataset
    if cfg.batch_size > ds.n:
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds the {ds.n} training samples")
    chain = build_mlp(ds.dim, cfg.hidden, ds.n_classes, cfg.activation)
    _, record = minibatch_loop(ds, chain, oracle_from_config(cfg), cfg.epochs, cfg.batch_size, cfg.seed,
                               loss=cfg.loss)
    return record, {"n_train": ds.n, "n_test": 0 if not ds.has_test else len(ds.test_labels),
                    "input_dim": ds.dim, "n_classes": ds.n_classes}


def _write_json(path: Path, data):
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.bool_):
        return bool(v)
    raise TypeError(f"cannot serialize {type(v).__name__}")


def _finite_or_none(v):
    return v if v is None or math.isfinite(v) else None


def _train_outputs(out: Path, cfg, record: RunRecord, extra: dict, started: float) -> int:
    record.to_csv(out / "curve.csv")
    summary = {"experiment": cfg.experiment, "oracle": cfg.oracle, **record_summary(record), **extra,
               "wall_seconds": round(time.perf_counter() - started, 3)}
    _write_json(out / "summary.json", summary)
    best = summary.get("best_train_loss")
    print(f"{cfg.experiment} [{cfg.oracle}]: best train loss {best!r} after {summary.get('iterations')} "
          f"iterations{' (diverged: ' + record.message + ')' if record.diverged else ''}")
    return EXIT_DIVERGED if record.diverged else EXIT_OK


def run_pendulum(cfg: ExperimentConfig, out: Path, started: float) -> int:
    record, extra = pendulum_run(cfg)
    if cfg.baseline_step is not None:
        p = PendulumParams(dt=cfg.dt, horizon=cfg.horizon, rho=cfg.rho)
        chain, h = build_pendulum_chain(p)
        _, base = gradient_descent(chain, h, p.x0, chain.zero_params(), cfg.baseline_step, cfg.iters, cfg.mu)
        base.to_csv(out / "baseline.csv")
        extra["baseline"] = {"step": cfg.baseline_step, **record_summary(base)}
    return _train_outputs(out, cfg, record, extra, started)


def run_mlp(cfg: ExperimentConfig, out: Path, started: float) -> int:
    record, extra = mlp_run(cfg)
    return _train_outputs(out, cfg, record, extra, started)


def run_envelope_check(cfg: ExperimentConfig, out: Path, started: float) -> int:
    results = checks.property_suite(cfg.instances, cfg.seed)
    for r in results:
        print(r.line())
    with open(out / "checks.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["name", "passed", "worst", "tolerance", "instances", "detail"])
        writer.writeheader()
        for r in results:
            writer.writerow(r.as_dict())
    _write_json(out / "summary.json", {"experiment": cfg.experiment, "checks": [r.as_dict() for r in results],
                                       "all_passed": all(r.passed for r in results),
                                       "wall_seconds": round(time.perf_counter() - started, 3)})
    return EXIT_OK


def run_grid_search(cfg: ExperimentConfig, out: Path, started: float) -> int:
    target = replace(cfg, experiment=cfg.grid_target)
    dataset = load_dataset(target) if cfg.grid_target == "train-mlp" else None

    def run(cand: dict) -> RunRecord:
        c = replace(target, **cand)
        c.validate()
        record, _ = pendulum_run(c) if cfg.grid_target == "pendulum" else mlp_run(c, dataset)
        return record

    candidates = [{cfg.grid_param: float(v)} for v in cfg.grid]
    try:
        result = grid_search(candidates, run, cfg.grid_budget)
    except GridSearchError as err:
        _write_json(out / "summary.json", {"experiment": cfg.experiment, "error": str(err)})
        print(f"grid-search: {err}")
        return EXIT_DIVERGED
    with open(out / "grid.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([cfg.grid_param, "area", "final_best", "diverged"])
        for row in result.table:
            writer.writerow([repr(row[cfg.grid_param]), repr(row["area"]), repr(row["final_best"]),
                             int(row["diverged"])])
            print(f"{cfg.grid_param}={row[cfg.grid_param]:<12g} area={row['area']:<14.6g} "
                  f"best={row['final_best']:<12.6g}{' diverged' if row['diverged'] else ''}")
    result.best_record.to_csv(out / "curve.csv")
    table = [{k: _finite_or_none(v) if isinstance(v, float) else v for k, v in row.items()}
             for row in result.table]
    _write_json(out / "summary.json", {"experiment": cfg.experiment, "target": cfg.grid_target,
                                       "param": cfg.grid_param, "budget": cfg.grid_budget,
                                       "best": result.best, "table": table,
                                       "best_record": record_summary(result.best_record),
                                       "wall_seconds": round(time.perf_counter() - started, 3)})
    print(f"grid-search: selected {cfg.grid_param}={result.best[cfg.grid_param]!r}")
    return EXIT_OK


DRIVERS = {
    "pendulum": run_pendulum,
    "train-mlp": run_mlp,
    "envelope-check": run_envelope_check,
    "grid-search": run_grid_search,
}


def run(cfg: ExperimentConfig) -> int:
    """Execute ``cfg`` and write its artifacts; returns the exit code."""
    started = time.perf_counter()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    with np.errstate(over="ignore", invalid="ignore"):
        return DRIVERS[cfg.experiment](cfg, out, started)


# ---------------------------------------------------------------------- CLI


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moreaugrad",
                                     description="Moreau-envelope gradient oracles for chains of computations.")
    parser.add_argument("experiment", choices=EXPERIMENTS)
    parser.add_argument("--config", help="flat JSON configuration file")
    parser.add_argument("--seed", type=int, help="random seed (overrides the config)")
    parser.add_argument("--out", help="output directory (overrides the config)")
    parser.add_argument("--oracle", choices=ORACLES, help="oracle family (overrides the config)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parser


def config_from_args(args) -> ExperimentConfig:
    overrides = {"experiment": args.experiment}
    for key in ("seed", "out", "oracle"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    if args.config:
        return ExperimentConfig.load(args.config, overrides)
    return ExperimentConfig.from_dict(overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        return run(cfg)
    except (ConfigError, DatasetError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
