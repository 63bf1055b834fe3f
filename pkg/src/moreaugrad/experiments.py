"""Experiment builders: pendulum swing-up control and MLP classification."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .chain import Activation, Chain, Dense, DenseActivation, PendulumStep
from .objectives import PendulumCost


@dataclass(frozen=True)
class PendulumParams:
    """Physical and discretization constants of the swing-up task."""

    mass: float = 1.0
    length: float = 1.0
    friction: float = 0.01
    gravity: float = 9.81
    dt: float = 0.1
    horizon: int = 50
    rho: float = 0.1
    theta0: float = 0.0
    omega0: float = 0.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if not (self.mass > 0 and self.length > 0):
            raise ValueError("mass and length must be positive")

    @property
    def x0(self) -> np.ndarray:
        return np.array([self.theta0, self.omega0])


def build_pendulum_chain(p: PendulumParams):
    """Return ``(chain, objective)``: ``horizon`` pendulum steps with one
    scalar control each and the terminal cost ``(theta - pi)^2 + rho omega^2``."""
    step = PendulumStep(p.dt, p.gravity, p.length, p.mass, p.friction)
    return Chain([step] * p.horizon), PendulumCost(p.rho)


def build_mlp(input_dim: int, hidden, n_outputs: int, activation: str = "relu",
              output_activation: str = "identity") -> Chain:
    """Multilayer perceptron of composite affine+activation layers.

    Hidden layers use ``activation``; the output layer is affine when
    ``output_activation == "identity"``.
    """
    dims = [int(input_dim), *[int(h) for h in hidden], int(n_outputs)]
    layers = [DenseActivation(dims[i], dims[i + 1], activation) for i in range(len(dims) - 2)]
    if output_activation == "identity":
        layers.append(Dense(dims[-2], dims[-1]))
    else:
        layers.append(DenseActivation(dims[-2], dims[-1], output_activation))
    return Chain(layers)


def build_chain_from_specs(specs) -> Chain:
    """Build a chain from a list of layer descriptions.

    Each item is a mapping with ``kind`` (``fully-connected``,
    ``dense-activation``, ``elementwise-activation``), dimensions ``in`` and
    ``out`` (or ``features``) and, where relevant, ``activation``.
    """
    layers = []
    for i, s in enumerate(specs):
        kind = s.get("kind")
        if kind == "fully-connected":
            layers.append(Dense(s["in"], s["out"]))
        elif kind == "dense-activation":
            layers.append(DenseActivation(s["in"], s["out"], s.get("activation", "tanh")))
        elif kind == "elementwise-activation":
            layers.append(Activation(s.get("features", s.get("in")), s.get("activation", "tanh")))
        else:
            raise ValueError(f"layer {i}: unknown kind {kind!r}")
    return Chain(layers)


def swing_up_error(theta: float) -> float:
    """Angular distance to the upright position, wrapped to ``[0, pi]``."""
    return abs((theta - math.pi + math.pi) % (2 * math.pi) - math.pi)
