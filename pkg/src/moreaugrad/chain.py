"""Parameterized chains of computations.

A chain maps parameters ``w = (w_1, ..., w_tau)`` and an input ``x_0`` to
``x_tau`` through ``x_t = phi_t(w_t, x_{t-1})``. Layers work on *stacked*
batches: an input of length ``m * in_features`` is read as ``m`` samples, so
the same layer object serves single-sample and mini-batch evaluation.

Blocks are indexed from 0 in code; the docstrings use ``t = 1..tau`` when
talking about the mathematical objects.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import DimensionError, NonFiniteError, as_vec

ACTIVATIONS = ("tanh", "softplus", "relu", "identity")

# (Lipschitz constant, smoothness constant) of the scalar activation.
# 4 / (3 sqrt 3) = 0.7698004 bounds |tanh''|; it is kept at four decimals
# (0.7698, below the exact value by 4e-7).
ACTIVATION_CONSTANTS = {
    "tanh": (1.0, 0.7698),
    "softplus": (1.0, 0.25),
    "relu": (1.0, math.inf),
    "identity": (1.0, 0.0),
}


def activate(kind: str, z: np.ndarray):
    """Return ``(sigma(z), sigma'(z))`` elementwise.

    ReLU uses the subgradient 0 at the kink.
    """
    if kind == "tanh":
        s = np.tanh(z)
        return s, 1.0 - s * s
    if kind == "softplus":
        return np.logaddexp(0.0, z), 0.5 * (1.0 + np.tanh(0.5 * z))
    if kind == "relu":
        pos = z > 0
        return np.where(pos, z, 0.0), pos.astype(np.float64)
    if kind == "identity":
        return z.copy(), np.ones_like(z)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def _solve_shifted(shift: float, gram: np.ndarray, kappa: float, rhs: np.ndarray) -> np.ndarray:
    """Solve ``(shift I + kappa G) y = rhs`` for symmetric PSD ``G``.

    Falls back to the minimum-norm least-squares solution when the system is
    singular (zero shift on a rank-deficient Gram matrix).
    """
    M = kappa * gram + shift * np.eye(gram.shape[0])
    try:
        if shift > 0:
            return np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError:
        pass
    return np.linalg.lstsq(M, rhs, rcond=None)[0]


class Layer:
    """Base class of a chain layer ``phi(w, x)``.

    Subclasses define ``kind``, ``in_features``, ``out_features``,
    ``param_dim`` and implement :meth:`__call__` and :meth:`vjp`.
    """

    kind = "layer"
    smooth = True
    in_features: int
    out_features: int
    param_dim: int

    def batch_size(self, x) -> int:
        n = np.size(x)
        if n == 0 or n % self.in_features:
            raise DimensionError(
                f"{self.kind} layer expects input dimension a multiple of {self.in_features}, got {n}",
                expected=self.in_features, actual=n)
        return n // self.in_features

    def _check_w(self, w):
        if np.size(w) != self.param_dim:
            raise DimensionError(
                f"{self.kind} layer expects {self.param_dim} parameters, got {np.size(w)}",
                expected=self.param_dim, actual=np.size(w))

    def __call__(self, w, x) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, w, x, lam):
        """Return ``(d phi/dw^T lam, d phi/dx^T lam)``."""
        raise NotImplementedError

    def jacobians(self, w, x):
        """Dense Jacobians ``(d phi/dw, d phi/dx)`` built row by row from :meth:`vjp`."""
        out = self(w, x)
        Jw = np.zeros((out.size, self.param_dim))
        Jx = np.zeros((out.size, np.size(x)))
        e = np.zeros(out.size)
        for i in range(out.size):
            e[i] = 1.0
            Jw[i], Jx[i] = self.vjp(w, x, e)
            e[i] = 0.0
        return Jw, Jx

    def is_affine_in(self, block: str) -> bool:
        """Whether ``phi`` is affine in ``block`` (``"w"`` or ``"x"``)."""
        return False

    def solve_normal(self, block, w, x, rhs, shift, kappa):
        """Solve ``(shift I + kappa A^T A) y = rhs`` where ``A`` is the (constant)
        derivative of ``phi`` with respect to ``block``. Only for affine blocks."""
        raise NotImplementedError(f"{self.kind} layer is not affine in {block}")

    def constants(self, w):
        """Return ``(ell, L)``: Lipschitz and smoothness bounds of ``phi(w, .)``."""
        raise NotImplementedError

    def init_params(self, rng) -> np.ndarray:
        return np.zeros(self.param_dim)

    def describe(self) -> dict:
        return {"kind": self.kind, "in": self.in_features, "out": self.out_features}


class Dense(Layer):
    """Fully connected layer ``x -> W^T x + b`` applied to every sample.

    Parameters are ``vec([W; b^T])``, i.e. the ``(in + 1) x out`` matrix whose
    last row is the bias, flattened row-major.
    """

    kind = "fully-connected"

    def __init__(self, in_features: int, out_features: int):
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        self.param_dim = (self.in_features + 1) * self.out_features

    def unpack(self, w):
        self._check_w(w)
        Wb = np.asarray(w, dtype=np.float64).reshape(self.in_features + 1, self.out_features)
        return Wb[:-1], Wb[-1]

    def _rows(self, x):
        m = self.batch_size(x)
        return np.asarray(x, dtype=np.float64).reshape(m, self.in_features)

    def pre_activation(self, w, x):
        W, b = self.unpack(w)
        return self._rows(x) @ W + b

    def __call__(self, w, x):
        return self.pre_activation(w, x).reshape(-1)

    def _vjp_pre(self, w, x, L):
        W, _ = self.unpack(w)
        X = self._rows(x)
        gW = X.T @ L
        gb = L.sum(axis=0)
        gx = L @ W.T
        return np.vstack([gW, gb]).reshape(-1), gx.reshape(-1)

    def vjp(self, w, x, lam):
        L = np.asarray(lam, dtype=np.float64).reshape(-1, self.out_features)
        return self._vjp_pre(w, x, L)

    def is_affine_in(self, block):
        return True

    def solve_normal(self, block, w, x, rhs, shift, kappa):
        if block == "w":
            X = self._rows(x)
            Z = np.hstack([X, np.ones((X.shape[0], 1))])
            R = np.asarray(rhs).reshape(self.in_features + 1, self.out_features)
            return _solve_shifted(shift, Z.T @ Z, kappa, R).reshape(-1)
        W, _ = self.unpack(w)
        R = np.asarray(rhs).reshape(-1, self.in_features)
        return _solve_shifted(shift, W @ W.T, kappa, R.T).T.reshape(-1)

    def constants(self, w):
        W, _ = self.unpack(w)
        return float(np.linalg.norm(W)), 0.0

    def init_params(self, rng):
        W = rng.normal(0.0, 1.0 / math.sqrt(self.in_features), (self.in_features, self.out_features))
        return np.vstack([W, np.zeros((1, self.out_features))]).reshape(-1)


class DenseActivation(Dense):
    """Composite layer ``x -> sigma(W^T x + b)``."""

    kind = "dense-activation"

    def __init__(self, in_features: int, out_features: int, activation: str = "tanh"):
        super().__init__(in_features, out_features)
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")
        self.activation = activation
        self.smooth = activation != "relu"

    def __call__(self, w, x):
        return activate(self.activation, self.pre_activation(w, x))[0].reshape(-1)

    def vjp(self, w, x, lam):
        _, ds = activate(self.activation, self.pre_activation(w, x))
        L = np.asarray(lam, dtype=np.float64).reshape(-1, self.out_features) * ds
        return self._vjp_pre(w, x, L)

    def is_affine_in(self, block):
        return self.activation == "identity"

    def constants(self, w):
        W, _ = self.unpack(w)
        ell_s, L_s = ACTIVATION_CONSTANTS[self.activation]
        nW = float(np.linalg.norm(W))
        return ell_s * nW, L_s * nW * nW

    def describe(self):
        return {**super().describe(), "activation": self.activation}


class Activation(Layer):
    """Parameter-free elementwise activation layer."""

    kind = "elementwise-activation"

    def __init__(self, features: int, activation: str = "tanh"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")
        self.in_features = self.out_features = int(features)
        self.param_dim = 0
        self.activation = activation
        self.smooth = activation != "relu"

    def __call__(self, w, x):
        self._check_w(w)
        self.batch_size(x)
        return activate(self.activation, np.asarray(x, dtype=np.float64).reshape(-1))[0]

    def vjp(self, w, x, lam):
        _, ds = activate(self.activation, np.asarray(x, dtype=np.float64).reshape(-1))
        return np.zeros(0), np.asarray(lam, dtype=np.float64).reshape(-1) * ds

    def is_affine_in(self, block):
        return block == "w" or self.activation == "identity"

    def solve_normal(self, block, w, x, rhs, shift, kappa):
        rhs = np.asarray(rhs, dtype=np.float64)
        if block == "w":
            return np.zeros(0)
        return rhs / (shift + kappa) if shift + kappa > 0 else np.zeros_like(rhs)

    def constants(self, w):
        return ACTIVATION_CONSTANTS[self.activation]

    def describe(self):
        return {**super().describe(), "activation": self.activation}


class PendulumStep(Layer):
    """One explicit Euler step of a damped pendulum driven by a scalar torque.

    The state is ``(theta, omega)``; the parameter is the control ``w``::

        theta_t = theta + dt * omega
        omega_t = omega + dt * (-(g / l) sin(theta) - friction / (m l^2) * omega + w / (m l^2))
    """

    kind = "pendulum-step"

    def __init__(self, dt=0.1, gravity=9.81, length=1.0, mass=1.0, friction=0.01):
        self.dt, self.gravity, self.length, self.mass, self.friction = (
            float(dt), float(gravity), float(length), float(mass), float(friction))
        self.in_features = self.out_features = 2
        self.param_dim = 1
        inertia = self.mass * self.length ** 2
        self._damp = self.dt * self.friction / inertia
        self._gain = self.dt / inertia
        self._spring = self.dt * self.gravity / self.length

    def __call__(self, w, x):
        self._check_w(w)
        S = np.asarray(x, dtype=np.float64).reshape(self.batch_size(x), 2)
        th, om = S[:, 0], S[:, 1]
        u = float(np.asarray(w).reshape(-1)[0])
        out = np.empty_like(S)
        out[:, 0] = th + self.dt * om
        out[:, 1] = om - self._spring * np.sin(th) - self._damp * om + self._gain * u
        return out.reshape(-1)

    def vjp(self, w, x, lam):
        S = np.asarray(x, dtype=np.float64).reshape(self.batch_size(x), 2)
        L = np.asarray(lam, dtype=np.float64).reshape(-1, 2)
        a, b = L[:, 0], L[:, 1]
        gx = np.empty_like(S)
        gx[:, 0] = a - b * self._spring * np.cos(S[:, 0])
        gx[:, 1] = a * self.dt + b * (1.0 - self._damp)
        return np.array([self._gain * b.sum()]), gx.reshape(-1)

    def is_affine_in(self, block):
        return block == "w"

    def solve_normal(self, block, w, x, rhs, shift, kappa):
        if block != "w":
            raise NotImplementedError("pendulum step is not affine in the state")
        m = self.batch_size(x)
        rhs = np.asarray(rhs, dtype=np.float64).reshape(-1)
        M = shift + kappa * m * self._gain ** 2
        return rhs / M if M > 0 else np.zeros_like(rhs)

    def constants(self, w):
        J = np.array([[1.0, self.dt], [self._spring, abs(1.0 - self._damp)]])
        return float(np.linalg.norm(J, 2)), self._spring

    def describe(self):
        return {**super().describe(), "dt": self.dt, "gravity": self.gravity,
                "length": self.length, "mass": self.mass, "friction": self.friction}


class BlockParams:
    """Block-structured parameter vector ``w = (w_1; ...; w_tau)``.

    Instances are immutable: :meth:`insert` and the arithmetic helpers return
    new objects.
    """

    __slots__ = ("blocks",)

    def __init__(self, blocks: Sequence):
        arrs = []
        for t, b in enumerate(blocks):
            a = np.array(b, dtype=np.float64).reshape(-1)
            if not np.all(np.isfinite(a)):
                raise NonFiniteError(f"parameter block {t} has non-finite entries", t)
            a.setflags(write=False)
            arrs.append(a)
        self.blocks = tuple(arrs)

    def __len__(self):
        return len(self.blocks)

    def __getitem__(self, t) -> np.ndarray:
        return self.blocks[t]

    def extract(self, t) -> np.ndarray:
        return self.blocks[t]

    def insert(self, t, v) -> "BlockParams":
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if v.size != self.blocks[t].size:
            raise DimensionError(f"block {t} has dimension {self.blocks[t].size}, got {v.size}",
                                 expected=self.blocks[t].size, actual=v.size)
        blocks = list(self.blocks)
        blocks[t] = v
        return BlockParams(blocks)

    @property
    def dims(self):
        return tuple(b.size for b in self.blocks)

    def flat(self) -> np.ndarray:
        return np.concatenate(self.blocks) if self.blocks else np.zeros(0)

    @classmethod
    def from_flat(cls, dims, v) -> "BlockParams":
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if v.size != sum(dims):
            raise DimensionError(f"expected {sum(dims)} parameters, got {v.size}", sum(dims), v.size)
        return cls(np.split(v, np.cumsum(dims)[:-1]))

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat()))

    def __sub__(self, other) -> "BlockParams":
        return BlockParams([a - b for a, b in zip(self.blocks, _blocks(other))])

    def __add__(self, other) -> "BlockParams":
        return BlockParams([a + b for a, b in zip(self.blocks, _blocks(other))])

    def scale(self, c: float) -> "BlockParams":
        return BlockParams([c * a for a in self.blocks])

    def __eq__(self, other):
        return isinstance(other, BlockParams) and len(self) == len(other) and all(
            np.array_equal(a, b) for a, b in zip(self.blocks, other.blocks))

    def __repr__(self):
        return f"BlockParams(dims={self.dims})"


def _blocks(x):
    return x.blocks if isinstance(x, BlockParams) else x


class Chain:
    """Ordered sequence of layers with matching per-sample dimensions."""

    def __init__(self, layers: Sequence[Layer]):
        layers = tuple(layers)
        if not layers:
            raise ValueError("a chain needs at least one layer")
        for t in range(1, len(layers)):
            if layers[t].in_features != layers[t - 1].out_features:
                raise DimensionError(
                    f"layer {t} expects input dimension {layers[t].in_features} but layer {t - 1} "
                    f"outputs {layers[t - 1].out_features}",
                    expected=layers[t].in_features, actual=layers[t - 1].out_features)
        self.layers = layers

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_features

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_features

    @property
    def param_dims(self):
        return tuple(layer.param_dim for layer in self.layers)

    def init_params(self, rng) -> BlockParams:
        return BlockParams([layer.init_params(rng) for layer in self.layers])

    def zero_params(self) -> BlockParams:
        return BlockParams([np.zeros(p) for p in self.param_dims])

    def check_params(self, params: BlockParams):
        if len(params) != self.depth:
            raise DimensionError(f"expected {self.depth} parameter blocks, got {len(params)}",
                                 expected=self.depth, actual=len(params))
        for t, (layer, b) in enumerate(zip(self.layers, params.blocks)):
            if b.size != layer.param_dim:
                raise DimensionError(f"block {t} has dimension {b.size}, layer expects {layer.param_dim}",
                                     expected=layer.param_dim, actual=b.size)

    def describe(self):
        return [layer.describe() for layer in self.layers]


def forward(chain: Chain, params: BlockParams, x0) -> list:
    """Evaluate the chain and return all states ``[x_0, ..., x_tau]``.

    Raises
    ------
    NonFiniteError
        If a state becomes non-finite; ``index`` is the 0-based layer index.
    """
    chain.check_params(params)
    x = as_vec(x0, "input")
    chain.layers[0].batch_size(x)
    states = [x]
    for t, layer in enumerate(chain.layers):
        x = layer(params[t], x)
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"state produced by layer {t} ({layer.kind}) is not finite", t)
        states.append(x)
    return states


def layer_jacobians(layer: Layer, w, x):
    """Return the dense Jacobians ``(d phi/dw, d phi/dx)`` of one layer."""
    return layer.jacobians(np.asarray(w, dtype=np.float64), np.asarray(x, dtype=np.float64))


def layer_constants(chain: Chain, params: BlockParams):
    """Analytic per-layer ``(ell, L)`` bounds at the given parameters."""
    return [layer.constants(params[t]) for t, layer in enumerate(chain.layers)]


@dataclass(frozen=True)
class LipschitzEstimates:
    """Prefix bounds ``ell_t``, ``L_t`` for ``t = 0..tau`` (``ell_0 = L_0 = 0``)."""

    ell: tuple
    L: tuple

    @property
    def ell_f(self) -> float:
        return self.ell[-1]

    @property
    def L_f(self) -> float:
        return self.L[-1]


def lipschitz_estimates(chain: Chain, constants) -> LipschitzEstimates:
    """Compose per-layer bounds along the chain.

    Uses ``ell_t = ell_phi + ell_{t-1} ell_phi`` and
    ``L_t = L_{t-1} ell_phi + L_phi (1 + ell_{t-1})^2``.
    """
    constants = list(constants)
    if len(constants) != chain.depth:
        raise DimensionError(f"expected {chain.depth} layer constants, got {len(constants)}",
                             expected=chain.depth, actual=len(constants))
    ell, L = [0.0], [0.0]
    for e, s in constants:
        if not (e >= 0 and s >= 0):
            raise ValueError("layer constants must be non-negative")
        ell.append(e + ell[-1] * e)
        L.append(L[-1] * e + s * (1.0 + ell[-2]) ** 2)
    return LipschitzEstimates(tuple(ell), tuple(L))


@dataclass(frozen=True)
class StepsizeBounds:
    """Constants ``c_1..c_tau`` and the admissible steps derived from them.

    ``gamma_max[t]`` bounds ``gamma_t`` for ``t = 0..tau-1`` by ``1 / c_{t+1}``
    and ``alpha_max[t]`` bounds the parameter step of layer ``t + 1`` by
    ``1 / c_{t+1}``. An infinite value means the bound is vacuous
    (``c = 0``).
    """

    c: tuple
    gamma_max: tuple

    @property
    def alpha_max(self):
        return self.gamma_max

    @property
    def unbounded(self):
        return tuple(math.isinf(g) for g in self.gamma_max)


def theoretical_stepsizes(chain: Chain, ell_h: float, constants) -> StepsizeBounds:
    """Step-size bounds ``c_t = ell_h L_phi_t prod_{s > t} ell_phi_s``."""
    constants = list(constants)
    if len(constants) != chain.depth:
        raise DimensionError(f"expected {chain.depth} layer constants, got {len(constants)}",
                             expected=chain.depth, actual=len(constants))
    c = []
    for t in range(chain.depth):
        prod = 1.0
        for e, _ in constants[t + 1:]:
            prod *= e
        c.append(ell_h * constants[t][1] * prod)
    gmax = tuple(math.inf if ct == 0 else 1.0 / ct for ct in c)
    return StepsizeBounds(tuple(c), gmax)


def schedule(gamma: float, alpha: float, tau: int):
    """Geometric step-size schedule.

    Returns ``(gammas, alphas)`` with ``gamma_t = gamma^(tau - t + 1)`` and
    ``alpha_t = alpha * gamma_{t+1}`` for ``t = 1..tau``, where
    ``gamma_{tau+1} = 1`` so the last layer's parameter step is ``alpha``.

    In terms of the normalized multipliers ``lam_hat_t = gamma_t lam_t`` the
    state steps all use ``gamma`` and the parameter steps all use
    ``alpha / gamma``.
    """
    if not 0 < gamma <= 1:
        raise ValueError("gamma must lie in (0, 1]")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if tau < 1:
        raise ValueError("tau must be at least 1")
    gammas = tuple(gamma ** (tau - t + 1) for t in range(1, tau + 1))
    alphas = tuple(alpha * (gammas[t] if t < tau else 1.0) for t in range(1, tau + 1))
    return gammas, alphas
