"""Outer optimization loops, run records, grid search and bound checks."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .chain import BlockParams, Chain, forward, schedule
from .data import Dataset, one_hot
from .envelope import PRESETS, THEORY, InnerSolverConfig
from .numerics import DivergenceError, NonFiniteError, make_rng
from .objectives import Logistic, MeanSquaredError, Objective
from .oracles import (AugLagConfig, Mode, OracleOutput, apply_update, auglag_oracle, backprop,
                      moreau_oracle, proximal_backprop, reg_target_prop, target_prop, update_norm)

CSV_COLUMNS = ("iter", "train_loss", "test_loss", "test_acc", "grad_norm", "seconds")
DIVERGENCE_FACTOR = 1e6
ORACLES = ("backprop", "moreau", "auglag", "targetprop", "reg-targetprop", "proxbp")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


@dataclass
class RunRecord:
    """Per-iteration (or per-epoch) log of a run.

    Each row holds ``iter``, ``train_loss``, ``test_loss``, ``test_acc``,
    ``grad_norm`` (norm of the parameter update) and ``seconds`` (elapsed
    monotonic time, millisecond precision), plus ``train_acc`` for
    classification runs. Missing values are ``None``.
    """

    rows: list = field(default_factory=list)
    diverged: bool = False
    message: str = ""
    solver: dict = field(default_factory=dict)

    def absorb(self, out: OracleOutput):
        """Accumulate the inner-solver statistics reported by an oracle."""
        stats = out.info.get("solver") if out.info else None
        if not stats:
            return
        for key, v in stats.items():
            if key == "max_residual":
                self.solver[key] = max(self.solver.get(key, 0.0), float(v))
            else:
                self.solver[key] = self.solver.get(key, 0) + int(v)

    def add(self, iter, train_loss, test_loss=None, test_acc=None, grad_norm=None, seconds=None,
            train_acc=None):
        self.rows.append(dict(iter=int(iter), train_loss=train_loss, test_loss=test_loss, test_acc=test_acc,
                              grad_norm=grad_norm, seconds=seconds, train_acc=train_acc))

    def column(self, name) -> np.ndarray:
        return np.array([np.nan if r[name] is None else r[name] for r in self.rows], dtype=np.float64)

    @property
    def train_losses(self) -> np.ndarray:
        return self.column("train_loss")

    def best_so_far(self, name: str = "train_loss") -> np.ndarray:
        """Running minimum of a column (non-finite values are skipped)."""
        v = self.column(name)
        v = np.where(np.isfinite(v), v, np.inf)
        return np.minimum.accumulate(v) if v.size else v

    def final(self, name: str = "train_loss"):
        return self.rows[-1][name] if self.rows else None

    def area(self, budget: int | None = None) -> float:
        """Trapezoidal area under the best-so-far training loss over the
        first ``budget`` iterations (all rows when ``None``)."""
        b = self.best_so_far()
        if budget is not None:
            b = b[: budget + 1]
        if b.size == 0 or not np.all(np.isfinite(b)):
            return math.inf
        if b.size == 1:
            return 0.0
        return float(np.sum(0.5 * (b[1:] + b[:-1])))

    def to_csv(self, path=None, include_seconds: bool = False) -> str:
        """Serialize to CSV with header ``iter,train_loss,test_loss,test_acc,grad_norm,seconds``.

        The ``seconds`` column is left empty unless ``include_seconds`` so
        that reruns produce byte-identical files.
        """
        lines = [",".join(CSV_COLUMNS)]
        for r in self.rows:
            vals = [r[c] for c in CSV_COLUMNS]
            if not include_seconds:
                vals[-1] = None
            lines.append(",".join(_fmt(v) for v in vals))
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


class Stopwatch:
    def __init__(self):
        self.t0 = time.perf_counter()

    def __call__(self) -> float:
        return round(time.perf_counter() - self.t0, 3)


@dataclass(frozen=True)
class OracleSpec:
    """Oracle family plus hyperparameters, callable as ``spec(chain, w, x0, h)``.

    Attributes
    ----------
    kind : str
        One of ``backprop``, ``moreau``, ``auglag``, ``targetprop``,
        ``reg-targetprop``, ``proxbp``.
    step : float
        Outer step ``delta`` of classical gradient descent.
    gamma, alpha, beta, kappa : float
        Base state step, parameter step, multiplier step and penalty weight.
    geometric : bool
        Use ``gamma_t = gamma^(tau - t + 1)``, ``alpha_t = alpha gamma_{t+1}``
        (otherwise constant steps).
    mu : float
        Weight of the ``(mu / 2) ||w_t||^2`` regularizer.
    solver : InnerSolverConfig
    """

    kind: str = "backprop"
    step: float = 1.0
    gamma: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0
    kappa: float = 0.0
    geometric: bool = True
    mu: float = 0.0
    solver: InnerSolverConfig = THEORY

    def __post_init__(self):
        if self.kind not in ORACLES:
            raise ValueError(f"unknown oracle {self.kind!r}; expected one of {ORACLES}")
        for name in ("step", "alpha"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non-negative")
        if not (self.gamma > 0 and self.beta >= 0 and self.kappa >= 0 and self.mu >= 0):
            raise ValueError("need gamma > 0 and non-negative beta, kappa, mu")
        if self.geometric and self.kind in ("moreau", "auglag", "reg-targetprop") and self.gamma > 1:
            raise ValueError("a geometric schedule needs gamma <= 1")
        if self.kind == "targetprop" and not self.kappa > 0:
            raise ValueError("target propagation needs kappa > 0")

    @property
    def mode(self) -> Mode:
        return Mode.DELTA if self.kind in ("backprop", "moreau") else Mode.REPLACEMENT

    def schedules(self, tau: int):
        if self.geometric:
            return schedule(self.gamma, self.alpha, tau)
        return (self.gamma,) * tau, (self.alpha,) * tau

    def __call__(self, chain: Chain, params: BlockParams, x0, h: Objective) -> OracleOutput:
        k = self.kind
        if k == "backprop":
            out = backprop(chain, params, x0, h, self.mu)
            return OracleOutput(Mode.DELTA, out.blocks.scale(self.step), out.info)
        gammas, alphas = self.schedules(chain.depth)
        if k == "moreau":
            return moreau_oracle(chain, params, x0, h, gammas, alphas, self.solver, self.mu)
        if k == "auglag":
            cfg = AugLagConfig(self.kappa, (self.beta,) * chain.depth, gammas, alphas, self.mu, self.solver)
            return auglag_oracle(chain, params, x0, h, cfg)
        if k == "targetprop":
            return target_prop(chain, params, x0, h, self.kappa, self.solver, self.mu)
        if k == "reg-targetprop":
            return reg_target_prop(chain, params, x0, h, self.kappa, gammas, alphas, self.solver, self.mu)
        return proximal_backprop(chain, params, x0, h, self.alpha, self.solver, self.mu)


def make_oracle(kind: str, solver: str | InnerSolverConfig = "theory", **hyper) -> OracleSpec:
    """Build an :class:`OracleSpec`; ``solver`` may name a preset."""
    if isinstance(solver, str):
        if solver not in PRESETS:
            raise ValueError(f"unknown solver preset {solver!r}; expected one of {tuple(PRESETS)}")
        solver = PRESETS[solver]
    return OracleSpec(kind=kind, solver=solver, **hyper)


def _is_divergent(value, initial) -> bool:
    if value is None or not math.isfinite(value):
        return True
    return value > DIVERGENCE_FACTOR * max(abs(initial), 1e-300)


def run_batch(chain: Chain, h: Objective, x0, w0: BlockParams, oracle: Callable, iters: int):
    """Full-batch loop: ``w <- update(w, oracle(chain, w, x0, h))`` for ``iters`` steps.

    The objective ``h(f(w, x0))`` is recorded before the first step and after
    every step. The run stops early (``record.diverged``) when the objective
    becomes non-finite, exceeds ``1e6`` times its initial value, or an inner
    solver diverges.
    """
    if iters < 0:
        raise ValueError("iteration budget must be non-negative")
    clock = Stopwatch()
    record = RunRecord()
    w = w0
    f0 = h.value(forward(chain, w, x0)[-1])
    record.add(0, f0, seconds=clock())
    for k in range(1, iters + 1):
        try:
            out = oracle(chain, w, x0, h)
            record.absorb(out)
            w_new = apply_update(w, out)
            value = h.value(forward(chain, w_new, x0)[-1])
        except (NonFiniteError, DivergenceError, FloatingPointError) as err:
            record.diverged, record.message = True, f"iteration {k}: {err}"
            break
        if _is_divergent(value, f0):
            record.add(k, value if math.isfinite(value) else None, grad_norm=None, seconds=clock())
            record.diverged, record.message = True, f"iteration {k}: objective {value!r} diverged"
            break
        record.add(k, value, grad_norm=update_norm(w, out), seconds=clock())
        w = w_new
    return w, record


def gradient_descent(chain, h, x0, w0, step: float, iters: int, mu: float = 0.0):
    """Classical gradient descent ``w <- w - step * grad``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    return run_batch(chain, h, x0, w0, OracleSpec("backprop", step=step, mu=mu), iters)


def moreau_gd(chain, h, x0, w0, gammas: Sequence[float], alphas: Sequence[float], iters: int,
              cfg: InnerSolverConfig = THEORY, mu: float = 0.0):
    """Gradient descent with Moreau gradients: ``w_t <- w_t - g_t``."""
    def oracle(c, w, x, hh):
        return moreau_oracle(c, w, x, hh, gammas, alphas, cfg, mu)
    return run_batch(chain, h, x0, w0, oracle, iters)


def al_mgd(chain, h, x0, w0, cfg: AugLagConfig, iters: int):
    """Augmented-Lagrangian variant: parameters are replaced by ``w^+``."""
    return run_batch(chain, h, x0, w0, lambda c, w, x, hh: auglag_oracle(c, w, x, hh, cfg), iters)


def make_head(loss: str, labels, n_classes: int) -> Objective:
    """Mini-batch loss head for stacked network outputs."""
    labels = np.asarray(labels, dtype=np.int64)
    if loss == "squared":
        return MeanSquaredError(one_hot(labels, n_classes).reshape(-1), labels.size)
    if loss == "logistic":
        return Logistic(labels, n_classes)
    raise ValueError(f"unknown loss {loss!r}; expected 'squared' or 'logistic'")


def evaluate(chain: Chain, w: BlockParams, X, y, n_classes: int, loss: str):
    """Return ``(loss, accuracy)`` on a full split, evaluated in fixed order."""
    out = forward(chain, w, np.asarray(X).reshape(-1))[-1].reshape(len(y), n_classes)
    value = make_head(loss, y, n_classes).value(out.reshape(-1))
    return value, float(np.mean(np.argmax(out, axis=1) == y))


def minibatch_loop(dataset: Dataset, chain: Chain, oracle: Callable, epochs: int, batch_size: int,
                   seed: int, w0: BlockParams | None = None, loss: str = "squared"):
    """Mini-batch stochastic loop over shuffled partitions.

    Each epoch draws a permutation from the seeded generator and walks it in
    consecutive batches of ``batch_size`` (the last batch may be smaller).
    Metrics on the full train (and test) split are recorded before training
    and after every epoch; ``iter`` counts epochs.

    Returns
    -------
    (BlockParams, RunRecord)
    """
    if dataset.n == 0:
        raise ValueError("empty dataset")
    if not 1 <= batch_size <= dataset.n:
        raise ValueError("batch size must lie in [1, n]")
    if chain.input_dim != dataset.dim or chain.output_dim != dataset.n_classes:
        raise ValueError(f"chain maps {chain.input_dim} -> {chain.output_dim} but data has dimension "
                         f"{dataset.dim} and {dataset.n_classes} classes")
    rng = make_rng(seed)
    w = chain.init_params(make_rng(seed + 1)) if w0 is None else w0
    clock = Stopwatch()
    record = RunRecord()

    def log(epoch, gnorm):
        tr_loss, tr_acc = evaluate(chain, w, dataset.inputs, dataset.labels, dataset.n_classes, loss)
        te_loss = te_acc = None
        if dataset.has_test:
            te_loss, te_acc = evaluate(chain, w, dataset.test_inputs, dataset.test_labels, dataset.n_classes, loss)
        record.add(epoch, tr_loss, te_loss, te_acc, gnorm, clock(), train_acc=tr_acc)
        return tr_loss

    f0 = log(0, None)
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(dataset.n)
        gnorm = None
        try:
            for start in range(0, dataset.n, batch_size):
                idx = perm[start:start + batch_size]
                h = make_head(loss, dataset.labels[idx], dataset.n_classes)
                out = oracle(chain, w, dataset.inputs[idx].reshape(-1), h)
                record.absorb(out)
                gnorm = update_norm(w, out)
                w = apply_update(w, out)
            value = log(epoch, gnorm)
        except (NonFiniteError, DivergenceError, FloatingPointError) as err:
            record.diverged, record.message = True, f"epoch {epoch}: {err}"
            break
        if _is_divergent(value, f0):
            record.diverged, record.message = True, f"epoch {epoch}: objective {value!r} diverged"
            break
    return w, record


class GridSearchError(RuntimeError):
    """Raised when every candidate of a grid search diverged."""

    def __init__(self, message, records):
        super().__init__(message)
        self.records = records


@dataclass(frozen=True)
class GridResult:
    best: dict
    best_record: RunRecord
    table: list


def grid_search(candidates: Sequence[dict], run: Callable[[dict], RunRecord], budget: int) -> GridResult:
    """Evaluate candidates and select the smallest area under the
    best-so-far training curve over ``budget`` iterations.

    Diverged candidates are reported in the table but never selected.
    Ties keep the earliest candidate.
    """
    candidates = list(candidates)
    if not candidates:
        raise ValueError("empty grid")
    table, records = [], []
    best_i, best_area = None, math.inf
    for i, cand in enumerate(candidates):
        rec = run(dict(cand))
        area = math.inf if rec.diverged else rec.area(budget)
        records.append(rec)
        table.append({**cand, "area": area, "diverged": rec.diverged,
                      "final_best": float(rec.best_so_far()[-1]) if rec.rows else math.inf})
        if area < best_area:
            best_i, best_area = i, area
    if best_i is None:
        raise GridSearchError("all grid candidates diverged: " +
                              "; ".join(f"{c} -> {r.message}" for c, r in zip(candidates, records)), records)
    return GridResult(dict(candidates[best_i]), records[best_i], table)


@dataclass(frozen=True)
class BoundReport:
    """Per-``k`` values of ``min_{i<k} ||grad f(x_i)||^2`` and the bound
    ``(8 / (5 delta k)) (f_0 - f*) + 8 eps^2``."""

    min_sq_grad: np.ndarray
    bound: np.ndarray

    @property
    def satisfied(self) -> bool:
        return bool(np.all(self.min_sq_grad <= self.bound))

    @property
    def worst_ratio(self) -> float:
        return float(np.max(self.min_sq_grad / self.bound))


def check_approx_gd_bound(grad_norms, f0: float, delta: float, eps: float, f_star: float,
                          L: float | None = None) -> BoundReport:
    """Check the approximate gradient descent bound along a trajectory.

    Parameters
    ----------
    grad_norms : sequence of float
        ``||grad f(x_i)||`` for ``i = 0..K-1``.
    f0, f_star : float
        Initial and optimal objective values.
    delta : float
        Step size, required to satisfy ``delta <= 1 / (2L)`` when ``L`` is given.
    eps : float
        Bound on the per-step gradient error.
    """
    if L is not None and delta > 1.0 / (2.0 * L) * (1 + 1e-12):
        raise ValueError("the bound requires delta <= 1 / (2L)")
    g2 = np.asarray(grad_norms, dtype=np.float64) ** 2
    k = np.arange(1, g2.size + 1)
    bound = 8.0 / (5.0 * delta * k) * (f0 - f_star) + 8.0 * eps ** 2
    return BoundReport(np.minimum.accumulate(g2), bound)


def approx_gradient_descent(grad: Callable, x0, delta: float, iters: int, eps: float, rng):
    """Gradient descent whose gradients are perturbed by noise of norm exactly ``eps``.

    Returns the iterates ``x_0..x_iters`` and the exact gradient norms at
    ``x_0..x_{iters-1}``.
    """
    x = np.array(x0, dtype=np.float64)
    xs, norms = [x.copy()], []
    for _ in range(iters):
        g = np.asarray(grad(x), dtype=np.float64)
        norms.append(float(np.linalg.norm(g)))
        e = rng.normal(size=x.size)
        e *= eps / np.linalg.norm(e)
        x = x - delta * (g + e)
        xs.append(x.copy())
    return xs, np.array(norms)


def record_summary(record: RunRecord) -> dict:
    """Final and best metrics of a record, for JSON summaries."""
    if not record.rows:
        return {"diverged": record.diverged, "message": record.message}
    last = record.rows[-1]
    best = record.best_so_far()
    return {
        "iterations": last["iter"],
        "initial_train_loss": record.rows[0]["train_loss"],
        "final_train_loss": last["train_loss"],
        "best_train_loss": float(best[-1]) if np.isfinite(best[-1]) else None,
        "final_train_acc": last.get("train_acc"),
        "final_test_loss": last["test_loss"],
        "final_test_acc": last["test_acc"],
        "diverged": record.diverged,
        "message": record.message,
        "solver": dict(record.solver),
    }

