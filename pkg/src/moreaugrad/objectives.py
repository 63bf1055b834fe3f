"""Scalar objectives ``h`` applied to the chain output.

Every objective provides ``value`` and ``grad``. Objectives whose proximal
subproblem has a closed form also implement :meth:`Objective.prox_step`,
which returns the minimizer ``y*`` of ``step * h(x + y) + ||y||^2 / 2``;
the others return ``None`` and are handled by an iterative solver.
"""
from __future__ import annotations

import numpy as np

from .numerics import DimensionError, as_mat, as_vec


class Objective:
    """Base class. ``kind`` names the family for reporting."""

    kind = "custom"

    def value(self, z) -> float:
        raise NotImplementedError

    def grad(self, z) -> np.ndarray:
        raise NotImplementedError

    def prox_step(self, x, step):
        """Closed-form minimizer of ``step * h(x + y) + ||y||^2 / 2``, or None."""
        return None

    def __call__(self, z) -> float:
        return self.value(z)


class DiagonalQuadratic(Objective):
    """``h(z) = sum_i c_i (z_i - t_i)^2 / 2`` with non-negative weights ``c``."""

    kind = "diagonal-quadratic"

    def __init__(self, weights, center):
        self.center = as_vec(center, "center")
        w = np.broadcast_to(np.asarray(weights, dtype=np.float64), self.center.shape).copy()
        if np.any(w < 0):
            raise ValueError("weights must be non-negative")
        self.weights = w

    def _check(self, z):
        z = np.asarray(z, dtype=np.float64).reshape(-1)
        if z.size != self.center.size:
            raise DimensionError(f"{self.kind} objective expects dimension {self.center.size}, got {z.size}",
                                 expected=self.center.size, actual=z.size)
        return z

    def value(self, z):
        r = self._check(z) - self.center
        return 0.5 * float(np.sum(self.weights * r * r))

    def grad(self, z):
        return self.weights * (self._check(z) - self.center)

    def prox_step(self, x, step):
        x = self._check(x)
        sc = step * self.weights
        return sc * (self.center - x) / (1.0 + sc)


class SquaredDistance(DiagonalQuadratic):
    """``h(z) = ||z - a||^2 / 2``."""

    kind = "squared-distance"

    def __init__(self, anchor):
        anchor = as_vec(anchor, "anchor")
        super().__init__(np.ones_like(anchor), anchor)


class SquaredLoss(DiagonalQuadratic):
    """Mean squared loss over stacked samples: ``(1 / 2m) ||z - y||^2``.

    Parameters
    ----------
    targets : array_like
        Stacked targets (e.g. one-hot rows) of ``m`` samples.
    n_samples : int
        Number of stacked samples ``m`` used for averaging.
    """

    kind = "squared-loss-to-target"

    def __init__(self, targets, n_samples: int = 1):
        targets = as_vec(targets, "targets")
        if n_samples < 1 or targets.size % n_samples:
            raise DimensionError("target length must be a multiple of the sample count",
                                 expected=n_samples, actual=targets.size)
        self.n_samples = int(n_samples)
        super().__init__(np.full(targets.size, 1.0 / n_samples), targets)


class MeanSquaredError(DiagonalQuadratic):
    """Mean of squared errors over all stacked entries: ``||z - y||^2 / (m q)``.

    ``q`` is the per-sample target dimension; this is the usual
    deep-learning normalization of the squared loss.
    """

    kind = "squared-loss-to-target"

    def __init__(self, targets, n_samples: int = 1):
        targets = as_vec(targets, "targets")
        if n_samples < 1 or targets.size % n_samples:
            raise DimensionError("target length must be a multiple of the sample count",
                                 expected=n_samples, actual=targets.size)
        self.n_samples = int(n_samples)
        super().__init__(np.full(targets.size, 2.0 / targets.size), targets)


class PendulumCost(DiagonalQuadratic):
    """Terminal cost ``(theta - pi)^2 + rho * omega^2`` of the swing-up task."""

    kind = "pendulum-terminal"

    def __init__(self, rho: float = 0.1, target_angle: float = np.pi):
        self.rho = float(rho)
        super().__init__([2.0, 2.0 * self.rho], [target_angle, 0.0])


class LinearForm(Objective):
    """``h(z) = lam^T z``."""

    kind = "linear-form"

    def __init__(self, lam):
        self.lam = as_vec(lam, "lam")

    def value(self, z):
        return float(self.lam @ np.asarray(z, dtype=np.float64).reshape(-1))

    def grad(self, z):
        return self.lam.copy()

    def prox_step(self, x, step):
        return -step * self.lam


class Constant(Objective):
    """Constant objective."""

    kind = "constant"

    def __init__(self, c: float = 0.0, dim: int | None = None):
        self.c = float(c)
        self.dim = dim

    def value(self, z):
        return self.c

    def grad(self, z):
        return np.zeros(np.size(z))

    def prox_step(self, x, step):
        return np.zeros(np.size(x))


class Quadratic(Objective):
    """``h(z) = z^T Q z / 2 + b^T z`` with symmetric ``Q``."""

    kind = "quadratic"

    def __init__(self, Q, b=None):
        Q = as_mat(Q, "Q")
        if Q.shape[0] != Q.shape[1]:
            raise DimensionError("Q must be square", Q.shape[0], Q.shape[1])
        self.Q = 0.5 * (Q + Q.T)
        self.b = np.zeros(Q.shape[0]) if b is None else as_vec(b, "b")

    def value(self, z):
        z = np.asarray(z, dtype=np.float64).reshape(-1)
        return 0.5 * float(z @ self.Q @ z) + float(self.b @ z)

    def grad(self, z):
        return self.Q @ np.asarray(z, dtype=np.float64).reshape(-1) + self.b

    def prox_step(self, x, step):
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        n = x.size
        return np.linalg.solve(np.eye(n) + step * self.Q, -step * (self.Q @ x + self.b))


class AbsoluteValue(Objective):
    """``h(z) = sum_i |z_i|`` (the l1 norm); subgradient 0 at 0."""

    kind = "absolute-value"

    def value(self, z):
        return float(np.sum(np.abs(z)))

    def grad(self, z):
        return np.sign(np.asarray(z, dtype=np.float64).reshape(-1))

    def prox_step(self, x, step):
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        return -np.sign(x) * np.minimum(np.abs(x), step)


class AffineNorm(Objective):
    """``h(z) = ||A z - b||_2``; Lipschitz with constant ``||A||_2``."""

    kind = "affine-norm"

    def __init__(self, A, b):
        self.A = as_mat(A, "A")
        self.b = as_vec(b, "b")

    @property
    def lipschitz(self) -> float:
        return float(np.linalg.norm(self.A, 2))

    def value(self, z):
        return float(np.linalg.norm(self.A @ np.asarray(z, dtype=np.float64).reshape(-1) - self.b))

    def grad(self, z):
        r = self.A @ np.asarray(z, dtype=np.float64).reshape(-1) - self.b
        n = np.linalg.norm(r)
        return self.A.T @ (r / n) if n > 0 else np.zeros(self.A.shape[1])


class Logistic(Objective):
    """Mean multinomial logistic loss of stacked score vectors.

    Parameters
    ----------
    labels : array_like of int
        Class index of each stacked sample.
    n_classes : int
        Number of scores per sample.
    """

    kind = "logistic"

    def __init__(self, labels, n_classes: int):
        self.labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        self.n_classes = int(n_classes)
        if np.any(self.labels < 0) or np.any(self.labels >= n_classes):
            raise ValueError("labels must lie in [0, n_classes)")

    def _scores(self, z):
        z = np.asarray(z, dtype=np.float64).reshape(-1)
        if z.size != self.labels.size * self.n_classes:
            raise DimensionError("score vector does not match labels",
                                 expected=self.labels.size * self.n_classes, actual=z.size)
        return z.reshape(self.labels.size, self.n_classes)

    def value(self, z):
        S = self._scores(z)
        lse = np.logaddexp.reduce(S, axis=1)
        return float(np.mean(lse - S[np.arange(len(S)), self.labels]))

    def grad(self, z):
        S = self._scores(z)
        P = np.exp(S - np.logaddexp.reduce(S, axis=1)[:, None])
        P[np.arange(len(S)), self.labels] -= 1.0
        return (P / len(S)).reshape(-1)


class Custom(Objective):
    """Objective defined by user callables."""

    kind = "custom"

    def __init__(self, value, grad, prox_step=None):
        self._value, self._grad, self._prox = value, grad, prox_step

    def value(self, z):
        return float(self._value(np.asarray(z, dtype=np.float64)))

    def grad(self, z):
        return np.asarray(self._grad(np.asarray(z, dtype=np.float64)), dtype=np.float64)

    def prox_step(self, x, step):
        return None if self._prox is None else np.asarray(self._prox(x, step), dtype=np.float64)
