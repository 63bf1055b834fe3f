"""Moreau-envelope gradient oracles for chains of computations.

Layers ``x_t = phi_t(w_t, x_{t-1})`` are composed into a :class:`Chain`.
Besides classical backpropagation, the package provides oracles that replace
each gradient by a Moreau gradient (a proximal displacement), an
augmented-Lagrangian variant, target propagation and proximal backprop, plus
outer loops, experiments and numerical property checks.
"""
from .chain import (Activation, BlockParams, Chain, Dense, DenseActivation, PendulumStep, forward,
                    lipschitz_estimates, schedule, theoretical_stepsizes)
from .envelope import PRACTICE, THEORY, InnerSolverConfig, dual_prox_gradient, moreau_grad
from .numerics import DimensionError, DivergenceError, NonFiniteError, brute_force_argmin, make_rng
from .oracles import (AugLagConfig, Mode, OracleOutput, apply_update, auglag_oracle, backprop,
                      moreau_oracle, proximal_backprop, reg_target_prop, target_prop)
from .optimize import RunRecord, gradient_descent, make_oracle, minibatch_loop, moreau_gd

__version__ = "0.1.0"

__all__ = [
    "Activation", "AugLagConfig", "BlockParams", "Chain", "Dense", "DenseActivation", "DimensionError",
    "DivergenceError", "InnerSolverConfig", "Mode", "NonFiniteError", "OracleOutput", "PRACTICE",
    "PendulumStep", "RunRecord", "THEORY", "apply_update", "auglag_oracle", "backprop", "brute_force_argmin",
    "dual_prox_gradient", "forward", "gradient_descent", "lipschitz_estimates", "make_oracle", "make_rng",
    "minibatch_loop", "moreau_gd", "moreau_grad", "moreau_oracle", "proximal_backprop", "reg_target_prop",
    "schedule", "target_prop", "theoretical_stepsizes",
]
