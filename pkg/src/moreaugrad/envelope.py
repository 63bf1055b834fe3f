"""Moreau envelopes and their gradients.

Conventions: for a step ``alpha >= 0`` the Moreau gradient of ``alpha f`` at
``x`` is ``grad env(alpha f)(x) = -y*`` with
``y* = argmin_y alpha f(x + y) + ||y||^2 / 2``. The step is part of the
definition, so ``alpha * grad env_alpha(f) = grad env(alpha f)``.

The inner subproblems are solved either in closed form (quadratics, linear
forms, soft-thresholding) or by one of two iterative methods configured by
:class:`InnerSolverConfig`:

* ``"gradient-descent"`` -- tolerance-driven gradient descent with a
  Goldstein line search and Barzilai-Borwein trial steps;
* ``"quasi-newton-2step"`` -- exactly one Goldstein gradient step followed by
  one Barzilai-Borwein step, the cheap solver used for training.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .numerics import DivergenceError
from .objectives import Objective

METHODS = ("gradient-descent", "quasi-newton-2step")


@dataclass(frozen=True)
class InnerSolverConfig:
    """Configuration of the algorithm used for argmin subproblems.

    Attributes
    ----------
    method : {"gradient-descent", "quasi-newton-2step"}
        Iterative method used when no closed form applies.
    max_iters : int
        Iteration budget of the gradient-descent method.
    grad_tol : float
        Stopping tolerance on the subproblem gradient norm; it is multiplied
        by ``max(1, ||anchor||)``.
    goldstein_c : float
        Goldstein constant ``c`` in ``(0, 1/2)``.
    expansion, backtrack : float
        Step multipliers used when the trial step is too short / too long.
    initial_step : float
        First trial step of the line search.
    max_halvings : int
        Line-search failure threshold.
    use_closed_form : bool
        Use closed forms whenever the subproblem structure allows it.
    """

    method: str = "gradient-descent"
    max_iters: int = 10_000
    grad_tol: float = 1e-9
    goldstein_c: float = 0.25
    expansion: float = 2.0
    backtrack: float = 0.5
    initial_step: float = 1.0
    max_halvings: int = 50
    use_closed_form: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown inner solver method {self.method!r}; expected one of {METHODS}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not self.grad_tol > 0:
            raise ValueError("grad_tol must be positive")
        if not 0 < self.goldstein_c < 0.5:
            raise ValueError("goldstein_c must lie in (0, 0.5)")
        if not (self.expansion > 1 and 0 < self.backtrack < 1 and self.initial_step > 0):
            raise ValueError("need expansion > 1, 0 < backtrack < 1 and initial_step > 0")


THEORY = InnerSolverConfig()
PRACTICE = InnerSolverConfig(method="quasi-newton-2step", max_iters=2)
PRESETS = {"theory": THEORY, "practice": PRACTICE}


@dataclass(frozen=True)
class SolveResult:
    """Outcome of an inner solve: the minimizer and solver diagnostics."""

    y: np.ndarray
    iterations: int
    residual: float
    converged: bool
    line_search_failed: bool = False
    closed_form: bool = False


@dataclass(frozen=True)
class EnvelopeResult:
    """Moreau envelope data at a point.

    ``envelope_value`` is ``env(alpha f)(x) = alpha f(x + y*) + ||y*||^2 / 2``,
    which never exceeds ``alpha f(x)``.
    """

    minimizer: np.ndarray
    moreau_gradient: np.ndarray
    envelope_value: float
    iterations: int
    residual: float
    converged: bool = True


def _goldstein(fun, y, f0, g, s0, cfg):
    """Goldstein line search along ``-g``.

    Returns ``(ok, step, y_new, f_new)``. The accepted step satisfies
    ``f0 - (1-c) s |g|^2 <= f_new <= f0 - c s |g|^2``.
    """
    slope = -float(g @ g)
    c = cfg.goldstein_c
    lo, hi = 0.0, math.inf
    s = s0
    halvings = expansions = 0
    best = None
    while True:
        y_new = y - s * g
        f_new = float(fun(y_new))
        if not math.isfinite(f_new) or f_new > f0 + c * s * slope:
            hi = s
            halvings += 1
            if halvings > cfg.max_halvings:
                break
            s = 0.5 * (lo + hi) if lo > 0 else s * cfg.backtrack
        elif f_new < f0 + (1.0 - c) * s * slope:
            lo = s
            best = (s, y_new, f_new)
            expansions += 1
            if expansions > cfg.max_halvings:
                break
            s = 0.5 * (lo + hi) if math.isfinite(hi) else s * cfg.expansion
        else:
            return True, s, y_new, f_new
    if best is not None:
        # Sufficient decrease holds at ``lo``; accept it.
        return True, best[0], best[1], best[2]
    return False, 0.0, y, f0


def _bb_step(dy, dg):
    den = float(dg @ dg)
    if den == 0.0:
        return 1.0
    return min(max(float(dy @ dg) / den, 1e-8), 1e8)


def quasi_newton_2step(fun: Callable, grad: Callable, y0, cfg: InnerSolverConfig = PRACTICE) -> SolveResult:
    """Two-step solver: one Goldstein gradient step, then one Barzilai-Borwein step.

    The BB step is ``s = <dy, dg> / <dg, dg>`` clamped to ``[1e-8, 1e8]``.
    If the line search fails, ``y0`` is returned with
    ``line_search_failed=True``.
    """
    y0 = np.asarray(y0, dtype=np.float64)
    g0 = np.asarray(grad(y0), dtype=np.float64)
    r0 = float(np.linalg.norm(g0))
    if r0 == 0.0:
        return SolveResult(y0.copy(), 0, 0.0, True)
    f0 = float(fun(y0))
    if not math.isfinite(f0):
        raise DivergenceError("inner objective is not finite at the starting point", [f0])
    ok, _, y1, _ = _goldstein(fun, y0, f0, g0, cfg.initial_step, cfg)
    if not ok:
        return SolveResult(y0.copy(), 0, r0, False, line_search_failed=True)
    g1 = np.asarray(grad(y1), dtype=np.float64)
    y2 = y1 - _bb_step(y1 - y0, g1 - g0) * g1
    g2 = np.asarray(grad(y2), dtype=np.float64)
    r2 = float(np.linalg.norm(g2))
    if not math.isfinite(r2):
        raise DivergenceError("inner objective diverged in the Barzilai-Borwein step", [f0, float(fun(y1))])
    if r2 > float(np.linalg.norm(g1)) and not float(fun(y2)) <= float(fun(y1)):
        # A non-monotone BB step on a non-convex subproblem; keep the safe point.
        r1 = float(np.linalg.norm(g1))
        return SolveResult(y1, 2, r1, r1 <= cfg.grad_tol)
    return SolveResult(y2, 2, r2, r2 <= cfg.grad_tol)


def gradient_descent_solve(fun: Callable, grad: Callable, y0, cfg: InnerSolverConfig = THEORY,
                           tol: float | None = None) -> SolveResult:
    """Tolerance-driven gradient descent.

    Steps are found with a Goldstein line search whose trial step is the
    previous Barzilai-Borwein estimate. Once function values stop resolving
    progress (round-off), the method continues with a fixed step as long as
    the gradient norm decreases.
    """
    tol = cfg.grad_tol if tol is None else tol
    y = np.array(y0, dtype=np.float64)
    f = float(fun(y))
    g = np.asarray(grad(y), dtype=np.float64)
    r = float(np.linalg.norm(g))
    trace = [f]
    if not (math.isfinite(f) and math.isfinite(r)):
        raise DivergenceError("inner objective is not finite at the starting point", trace)
    s_trial = cfg.initial_step
    s_fixed = None
    failed = False
    k = 0
    while k < cfg.max_iters and r > tol:
        k += 1
        if s_fixed is None:
            ok, s, y_new, f_new = _goldstein(fun, y, f, g, s_trial, cfg)
            if not ok or f_new >= f:
                s_fixed = s if ok and s > 0 else s_trial
                continue
            g_new = np.asarray(grad(y_new), dtype=np.float64)
            s_trial = _bb_step(y_new - y, g_new - g)
            y, f, g = y_new, f_new, g_new
        else:
            y_new = y - s_fixed * g
            g_new = np.asarray(grad(y_new), dtype=np.float64)
            if not float(np.linalg.norm(g_new)) < r:
                s_fixed *= 0.5
                if s_fixed < 1e-20:
                    failed = True
                    break
                continue
            y, g = y_new, g_new
            f = float(fun(y))
        r = float(np.linalg.norm(g))
        trace.append(f)
        if len(trace) > 10:
            del trace[0]
        if not (math.isfinite(f) and math.isfinite(r)):
            raise DivergenceError("inner gradient descent diverged", trace)
    return SolveResult(y, k, r, r <= tol, line_search_failed=failed)


def solve_subproblem(fun, grad, y0, cfg: InnerSolverConfig, tol_scale: float = 1.0) -> SolveResult:
    """Run the configured iterative method on a smooth subproblem."""
    if cfg.method == "quasi-newton-2step":
        return quasi_newton_2step(fun, grad, y0, cfg)
    return gradient_descent_solve(fun, grad, y0, cfg, tol=cfg.grad_tol * max(1.0, tol_scale))


def minimize_proximal(G, grad_G, anchor, rho: float, cfg: InnerSolverConfig, closed_form=None) -> SolveResult:
    """Minimize ``G(u) + (rho / 2) ||u - anchor||^2`` and return the displacement.

    The iterative path works on the step-scaled form
    ``G(anchor + y) / rho + ||y||^2 / 2`` (or on ``G(anchor + y)`` when
    ``rho == 0``) starting from ``y = 0``.

    Parameters
    ----------
    closed_form : callable, optional
        Zero-argument callable returning the exact displacement; used when
        ``cfg.use_closed_form`` is set.
    """
    a = np.asarray(anchor, dtype=np.float64)
    if closed_form is not None and cfg.use_closed_form:
        y = np.asarray(closed_form(), dtype=np.float64)
        return SolveResult(y, 0, 0.0, True, closed_form=True)
    if rho > 0:
        step = 1.0 / rho

        def fun(y):
            return step * G(a + y) + 0.5 * float(y @ y)

        def grad(y):
            return step * grad_G(a + y) + y
    else:
        def fun(y):
            return G(a + y)

        def grad(y):
            return grad_G(a + y)
    return solve_subproblem(fun, grad, np.zeros_like(a), cfg, float(np.linalg.norm(a)))


def moreau_grad(f: Objective, x, alpha: float, cfg: InnerSolverConfig = THEORY) -> EnvelopeResult:
    """Moreau gradient ``grad env(alpha f)(x)``.

    Uses :meth:`Objective.prox_step` when available (and allowed by ``cfg``),
    otherwise the configured iterative method on
    ``alpha f(x + y) + ||y||^2 / 2`` from ``y = 0``.

    Raises
    ------
    DivergenceError
        If the inner iterations diverge.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if alpha == 0:
        zero = np.zeros_like(x)
        return EnvelopeResult(zero, zero.copy(), 0.0, 0, 0.0)
    y = f.prox_step(x, alpha) if cfg.use_closed_form else None
    if y is not None:
        y = np.asarray(y, dtype=np.float64)
        iters, converged = 0, True
    else:
        res = solve_subproblem(lambda v: alpha * f.value(x + v) + 0.5 * float(v @ v),
                               lambda v: alpha * f.grad(x + v) + v,
                               np.zeros_like(x), cfg, float(np.linalg.norm(x)))
        y, iters, converged = res.y, res.iterations, res.converged
    residual = float(np.linalg.norm(alpha * f.grad(x + y) + y))
    value = alpha * f.value(x + y) + 0.5 * float(y @ y)
    return EnvelopeResult(y, -y, value, iters, residual, converged)


class ClosedFormUnavailable(ValueError):
    """Raised by :func:`closed_form_prox` for objectives without a closed form."""


def closed_form_prox(f: Objective, x, alpha: float) -> EnvelopeResult:
    """Exact Moreau gradient for quadratics, linear forms, squared distances
    and the absolute value.

    Raises
    ------
    ClosedFormUnavailable
        For any other objective; use :func:`moreau_grad` instead.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = f.prox_step(x, alpha) if alpha > 0 else np.zeros_like(x)
    if y is None:
        raise ClosedFormUnavailable(
            f"no closed-form proximal step for {f.kind!r} objectives; use moreau_grad with an iterative solver")
    y = np.asarray(y, dtype=np.float64)
    value = alpha * f.value(x + y) + 0.5 * float(y @ y)
    residual = float(np.linalg.norm(alpha * f.grad(x + y) + y)) if alpha > 0 else 0.0
    return EnvelopeResult(y, -y, value, 0, residual)


def envelope_gap_check(f: Objective, x, alpha: float, cfg: InnerSolverConfig = THEORY) -> float:
    """Return ``|f(x) - env_alpha(f)(x)|`` with ``env_alpha(f) = env(alpha f) / alpha``.

    For an ``ell``-Lipschitz ``f`` this gap is at most ``alpha ell^2``.
    """
    if alpha <= 0:
        return 0.0
    res = moreau_grad(f, x, alpha, cfg)
    return abs(f.value(x) - res.envelope_value / alpha)


class AffineMap:
    """Smooth map ``x -> A x + c`` (exposes its matrix for closed forms)."""

    def __init__(self, A, c=None):
        self.A = np.asarray(A, dtype=np.float64)
        self.c = np.zeros(self.A.shape[0]) if c is None else np.asarray(c, dtype=np.float64)

    def __call__(self, x):
        return self.A @ x + self.c

    def vjp(self, x, lam):
        return self.A.T @ lam


class LayerMap:
    """View of a chain layer as a map of its input with parameters held fixed."""

    def __init__(self, layer, w):
        self.layer = layer
        self.w = np.asarray(w, dtype=np.float64)

    def __call__(self, x):
        return self.layer(self.w, x)

    def vjp(self, x, lam):
        return self.layer.vjp(self.w, x, lam)[1]


def linear_form_prox(g, x, mu, cfg: InnerSolverConfig = THEORY) -> SolveResult:
    """Minimizer ``y(mu) = argmin_y mu^T g(x + y) + ||y||^2 / 2``."""
    x = np.asarray(x, dtype=np.float64)
    if isinstance(g, AffineMap) and cfg.use_closed_form:
        return SolveResult(-(g.A.T @ mu), 0, 0.0, True, closed_form=True)
    return solve_subproblem(lambda y: float(mu @ g(x + y)) + 0.5 * float(y @ y),
                            lambda y: g.vjp(x + y, mu) + y,
                            np.zeros_like(x), cfg, float(np.linalg.norm(x)))


@dataclass(frozen=True)
class DualResult:
    """Outcome of :func:`dual_prox_gradient`.

    ``moreau_gradient`` is ``-y*``; ``envelope_estimate`` is the final value
    of the dual objective, which equals ``env(alpha f o g)(x)`` at the optimum.
    """

    mu: np.ndarray
    y: np.ndarray
    moreau_gradient: np.ndarray
    envelope_estimate: float
    iterations: int
    dual_values: tuple = field(default=())


def dual_prox_gradient(f: Objective, g, x, alpha: float, beta: float, iters: int = 500,
                       cfg: InnerSolverConfig = THEORY, tol: float = 1e-13) -> DualResult:
    """Moreau gradient of ``alpha f o g`` by proximal-gradient ascent on the dual.

    Starting from ``mu = 0`` the iteration is::

        y(mu)  = argmin_y mu^T g(x + y) + ||y||^2 / 2
        mu    <- beta * grad env((alpha / beta) f)(mu / beta + g(x + y(mu)))

    i.e. a proximal gradient step on ``c(mu) - (alpha f)^*(mu)`` with
    ``c(mu) = env(mu^T g)(x)``. The conjugate is never formed: at the new
    iterate ``mu = alpha grad f(p)`` where ``p`` is the proximal point, so
    ``(alpha f)^*(mu) = mu^T p - alpha f(p)``.

    Valid for ``alpha <= 1 / (2 ell_f L_g)`` and ``beta <= 1 / (2 ell_g^2)``.

    Raises
    ------
    DivergenceError
        If the dual objective decreases over 10 consecutive iterations.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if not (alpha > 0 and beta > 0):
        raise ValueError("alpha and beta must be positive")
    gx = np.asarray(g(x), dtype=np.float64)
    mu = np.zeros_like(gx)
    y = np.zeros_like(x)
    values = []
    decreases = 0
    k = 0
    for k in range(1, iters + 1):
        gxy = g(x + y)
        z = mu / beta + gxy
        env = moreau_grad(f, z, alpha / beta, cfg)
        p = z + env.minimizer
        mu_new = beta * env.moreau_gradient
        y = linear_form_prox(g, x, mu_new, cfg).y
        dual = float(mu_new @ g(x + y)) + 0.5 * float(y @ y) - (float(mu_new @ p) - alpha * f.value(p))
        if values and dual < values[-1] - 1e-12 * (1.0 + abs(values[-1])):
            decreases += 1
            if decreases >= 10:
                raise DivergenceError("dual objective decreased over 10 consecutive iterations; "
                                      "check the step sizes alpha and beta", values[-10:])
        else:
            decreases = 0
        values.append(dual)
        done = float(np.linalg.norm(mu_new - mu)) <= tol * max(1.0, float(np.linalg.norm(mu_new)))
        mu = mu_new
        if done:
            break
    return DualResult(mu, y, -y, values[-1] if values else 0.0, k, tuple(values))


def one_step_dual(f: Objective, g, x, alpha: float, beta: float, cfg: InnerSolverConfig = THEORY) -> np.ndarray:
    """Single-envelope dual estimate ``mu_hat = (beta / alpha) grad env((alpha / beta) f)(g(x))``.

    ``alpha * mu_hat`` is the first iterate of :func:`dual_prox_gradient`.
    """
    if not (alpha > 0 and beta > 0):
        raise ValueError("alpha and beta must be positive")
    gx = np.asarray(g(np.asarray(x, dtype=np.float64)), dtype=np.float64)
    return (beta / alpha) * moreau_grad(f, gx, alpha / beta, cfg).moreau_gradient


def one_step_moreau_gradient(f: Objective, g, x, alpha: float, beta: float,
                             cfg: InnerSolverConfig = THEORY) -> np.ndarray:
    """Approximate Moreau gradient ``grad env(alpha mu_hat^T g)(x)``."""
    mu_hat = one_step_dual(f, g, x, alpha, beta, cfg)
    return -linear_form_prox(g, x, alpha * mu_hat, cfg).y


def with_method(cfg: InnerSolverConfig, **changes) -> InnerSolverConfig:
    """Return a copy of ``cfg`` with some fields replaced."""
    return replace(cfg, **changes)
