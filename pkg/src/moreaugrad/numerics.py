"""Dense linear-algebra helpers, seeded randomness and verification oracles.

Vectors and matrices are plain ``numpy.float64`` arrays. The helpers in this
module only add the validation the rest of the package relies on (finite
entries, matching dimensions) plus two independent oracles used to certify
the fast paths: central finite differences and a long-horizon gradient
descent minimizer.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class NumericsError(ValueError):
    """Base class for structured numerical errors."""


class NonFiniteError(NumericsError):
    """Raised when a NaN or infinite value is found.

    Attributes
    ----------
    index : int or None
        Offending coordinate (or layer, depending on the caller), if known.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DimensionError(NumericsError):
    """Raised when two operands have incompatible dimensions."""

    def __init__(self, message, expected=None, actual=None):
        super().__init__(message)
        self.expected = expected
        self.actual = actual


class DivergenceError(NumericsError):
    """Raised when an iterative method is detected to diverge.

    Attributes
    ----------
    trace : list of float
        The last objective values seen before giving up.
    """

    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = list(trace)


def as_vec(data, name="vector") -> np.ndarray:
    """Return ``data`` as a finite 1-D float64 array (copy)."""
    v = np.array(data, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise DimensionError(f"{name} must have positive dimension", 1, 0)
    bad = np.flatnonzero(~np.isfinite(v))
    if bad.size:
        raise NonFiniteError(f"{name} has a non-finite entry at index {bad[0]}", int(bad[0]))
    return v


def as_mat(data, name="matrix") -> np.ndarray:
    """Return ``data`` as a finite 2-D float64 array (copy)."""
    a = np.array(data, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise DimensionError(f"{name} must be a non-empty 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        i, j = np.argwhere(~np.isfinite(a))[0]
        raise NonFiniteError(f"{name} has a non-finite entry at ({i}, {j})", int(i))
    return a


def matvec(A, x) -> np.ndarray:
    """Dense matrix-vector product with dimension checking.

    Raises
    ------
    DimensionError
        If ``A.shape[1] != x.size``; the message names both dimensions.
    """
    A = np.asarray(A, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if A.ndim != 2 or x.ndim != 1 or A.shape[1] != x.shape[0]:
        raise DimensionError(
            f"matvec: matrix has {A.shape[-1] if A.ndim else 0} columns "
            f"but vector has dimension {x.shape[0] if x.ndim else 0}",
            expected=A.shape[-1] if A.ndim else None,
            actual=x.shape[0] if x.ndim else None,
        )
    return A @ x


def make_rng(seed: int) -> np.random.Generator:
    """Return a generator backed by the counter-based Philox bit generator.

    Philox streams depend only on the seed (not on the platform), and the
    generator can be split into independent children with ``spawn``.
    """
    return np.random.Generator(np.random.Philox(int(seed) % 2**64))


def default_fd_step(x) -> float:
    """Default central-difference step ``1e-5 * max(1, ||x||_inf)``."""
    return 1e-5 * max(1.0, float(np.max(np.abs(x))) if np.size(x) else 1.0)


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float | None = None) -> np.ndarray:
    """Central finite-difference gradient of a scalar function.

    Parameters
    ----------
    f : callable
        Scalar function of a 1-D array.
    x : array_like
        Evaluation point.
    h : float, optional
        Step; defaults to ``1e-5 * max(1, ||x||_inf)``.

    Returns
    -------
    ndarray
        ``(f(x + h e_i) - f(x - h e_i)) / (2h)`` for every coordinate ``i``.

    Raises
    ------
    NonFiniteError
        If ``f`` returns a non-finite value; ``index`` is the coordinate.
    """
    x = np.array(x, dtype=np.float64).reshape(-1)
    if h is None:
        h = default_fd_step(x)
    if not h > 0:
        raise ValueError("finite-difference step must be positive")
    g = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        fp = float(f(xp))
        fm = float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite function value while perturbing coordinate {i}", i)
        g[i] = (fp - fm) / (2.0 * h)
    return g


@dataclass(frozen=True)
class ArgminResult:
    """Outcome of :func:`brute_force_argmin`."""

    x: np.ndarray
    grad_norm: float
    iterations: int
    converged: bool


def brute_force_argmin(f, grad, x0, budget: int = 200_000, tol: float = 1e-8) -> ArgminResult:
    """Minimize a (caller-asserted) strongly convex function by plain gradient descent.

    This is deliberately a simple and slow method, independent of the
    solvers used in the library: the step is first reduced until the
    objective decreases (diminishing phase) and then kept fixed; it is halved
    again whenever the objective increases and cautiously doubled after long
    runs of successful steps.

    Parameters
    ----------
    f, grad : callable
        Objective and its gradient.
    x0 : array_like
        Starting point.
    budget : int
        Maximum number of gradient steps.
    tol : float
        Stop once the gradient norm is at most ``tol``.

    Returns
    -------
    ArgminResult
        ``converged`` is False when the budget was exhausted.

    Raises
    ------
    DivergenceError
        If the objective increases over 100 consecutive steps or becomes
        non-finite.
    """
    x = np.array(x0, dtype=np.float64).reshape(-1)
    fx = float(f(x))
    g = np.asarray(grad(x), dtype=np.float64)
    step = 1.0
    increases = 0
    successes = 0
    trace = [fx]
    for k in range(budget):
        gn = float(np.linalg.norm(g))
        if gn <= tol:
            return ArgminResult(x, gn, k, True)
        x_new = x - step * g
        f_new = float(f(x_new))
        # Increases at round-off level are not treated as failures: close to
        # the minimizer f stops resolving progress while the gradient still does.
        if not np.isfinite(f_new) or f_new > fx + 1e-13 * (1.0 + abs(fx)):
            increases += 1
            if increases >= 100:
                raise DivergenceError("brute_force_argmin: objective increased over 100 consecutive steps", trace[-10:])
            step *= 0.5
            successes = 0
            continue
        increases = 0
        x, fx = x_new, f_new
        g = np.asarray(grad(x), dtype=np.float64)
        trace.append(fx)
        if len(trace) > 20:
            del trace[0]
        successes += 1
        if successes >= 50:
            step *= 2.0
            successes = 0
    gn = float(np.linalg.norm(g))
    return ArgminResult(x, gn, budget, gn <= tol)
