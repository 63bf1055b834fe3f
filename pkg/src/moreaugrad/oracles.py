"""First-order oracles over a chain of computations.

All oracles run a forward pass and then sweep the layers backwards. The
Moreau, augmented-Lagrangian and target-propagation families reduce every
backward step to one *layer-local* subproblem over a single block ``u``
(the layer parameters ``w_t`` or its input ``x_{t-1}``)::

    minimize_u  lam^T phi(u) + (kappa / 2) ||phi(u) - target||^2
                + (mu / 2) ||u||^2 + (rho / 2) ||u - anchor||^2

with the anchor at the current point. Blocks in which the layer is affine
give a quadratic problem solved in closed form; all other blocks use the
configured inner solver warm-started at the anchor.

Outputs come in two modes: ``DELTA`` (classical and Moreau gradients, the
update is ``w - g``) and ``REPLACEMENT`` (augmented-Lagrangian and
target-propagation variants, the update is ``w <- g``).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .chain import BlockParams, Chain, Layer, forward
from .envelope import THEORY, InnerSolverConfig, SolveResult, minimize_proximal
from .numerics import DimensionError, DivergenceError
from .objectives import Objective


class Mode(enum.Enum):
    """How an oracle output is applied to the parameters."""

    DELTA = "delta"
    REPLACEMENT = "replacement"


@dataclass(frozen=True)
class OracleOutput:
    """Per-block oracle output together with its update mode.

    ``info`` carries diagnostics (multipliers, targets, solver statistics).
    """

    mode: Mode
    blocks: BlockParams
    info: dict = field(default_factory=dict, compare=False)


def apply_update(params: BlockParams, out: OracleOutput) -> BlockParams:
    """Apply an oracle output: ``w - g`` for deltas, ``g`` for replacements."""
    if out.mode is Mode.DELTA:
        return params - out.blocks
    if out.mode is Mode.REPLACEMENT:
        return out.blocks
    raise TypeError(f"unknown oracle mode {out.mode!r}")


def update_norm(params: BlockParams, out: OracleOutput) -> float:
    """Norm of the parameter change the output would cause."""
    if out.mode is Mode.DELTA:
        return out.blocks.norm()
    return (out.blocks - params).norm()


@dataclass(frozen=True)
class LocalProblem:
    """Data of a layer-local subproblem (see the module docstring)."""

    lam: np.ndarray | None = None
    rho: float = 0.0
    kappa: float = 0.0
    target: np.ndarray | None = None
    mu: float = 0.0


class SolverStats:
    """Accumulates inner-solver statistics over a backward pass."""

    def __init__(self):
        self.solves = 0
        self.closed_form = 0
        self.iterations = 0
        self.max_residual = 0.0
        self.line_search_failures = 0

    def add(self, res: SolveResult):
        self.solves += 1
        self.closed_form += int(res.closed_form)
        self.iterations += res.iterations
        self.max_residual = max(self.max_residual, res.residual)
        self.line_search_failures += int(res.line_search_failed)

    def as_dict(self):
        return dict(solves=self.solves, closed_form=self.closed_form, iterations=self.iterations,
                    max_residual=self.max_residual, line_search_failures=self.line_search_failures)


def solve_local(layer: Layer, block: str, w, x, prob: LocalProblem,
                cfg: InnerSolverConfig = THEORY) -> SolveResult:
    """Solve a layer-local subproblem and return the displacement from the anchor.

    Parameters
    ----------
    layer : Layer
    block : {"w", "x"}
        Variable block; the other block is held fixed.
    w, x : ndarray
        Current layer parameters and layer input (the anchor is one of them).
    prob : LocalProblem
    cfg : InnerSolverConfig
    """
    if block not in ("w", "x"):
        raise ValueError("block must be 'w' or 'x'")
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    anchor = w if block == "w" else x
    if anchor.size == 0:
        return SolveResult(np.zeros(0), 0, 0.0, True, closed_form=True)

    if block == "w":
        def phi(u):
            return layer(u, x)

        def vjp(u, r):
            return layer.vjp(u, x, r)[0]
    else:
        def phi(u):
            return layer(w, u)

        def vjp(u, r):
            return layer.vjp(w, u, r)[1]

    lam, kappa, target, mu = prob.lam, prob.kappa, prob.target, prob.mu
    if kappa > 0 and target is None:
        raise ValueError("a positive penalty weight needs a target")

    def G(u):
        z = phi(u)
        val = float(lam @ z) if lam is not None else 0.0
        if kappa > 0:
            d = z - target
            val += 0.5 * kappa * float(d @ d)
        if mu > 0:
            val += 0.5 * mu * float(u @ u)
        return val

    def grad_G(u):
        if kappa > 0:
            r = kappa * (phi(u) - target)
            if lam is not None:
                r = lam + r
        elif lam is not None:
            r = lam
        else:
            r = None
        g = vjp(u, r) if r is not None else np.zeros_like(u)
        if mu > 0:
            g = g + mu * u
        return g

    closed = None
    if layer.is_affine_in(block):
        def closed():
            return layer.solve_normal(block, w, x, -grad_G(anchor), prob.rho + mu, kappa)
    return minimize_proximal(G, grad_G, anchor, prob.rho, cfg, closed)


def solve_head(h: Objective, x, rho: float, cfg: InnerSolverConfig = THEORY) -> SolveResult:
    """Displacement minimizing ``h(x + y) + (rho / 2) ||y||^2`` (``rho > 0``)."""
    x = np.asarray(x, dtype=np.float64)
    if not rho > 0:
        raise ValueError("the head subproblem needs a positive proximity weight")
    closed = None
    if cfg.use_closed_form:
        y = h.prox_step(x, 1.0 / rho)
        if y is not None:
            closed = lambda: y  # noqa: E731
    return minimize_proximal(h.value, h.grad, x, rho, cfg, closed)


class OracleTape:
    """States of a forward pass plus the layer-local forms built on them.

    Parameters
    ----------
    chain, params : Chain, BlockParams
    states : list of ndarray
        ``[x_0, ..., x_tau]`` as returned by :func:`forward`.
    cfg : InnerSolverConfig
        Inner solver used by the non-linear forms.
    mu : float
        Weight of the ``(mu / 2) ||w_t||^2`` regularizer in parameter forms.
    """

    def __init__(self, chain: Chain, params: BlockParams, states, cfg: InnerSolverConfig = THEORY,
                 mu: float = 0.0):
        if len(states) != chain.depth + 1:
            raise DimensionError("tape needs tau + 1 states", chain.depth + 1, len(states))
        self.chain = chain
        self.params = params
        self.states = list(states)
        self.cfg = cfg
        self.mu = float(mu)
        self.stats = SolverStats()

    def __len__(self):
        return self.chain.depth

    @property
    def output(self):
        return self.states[-1]

    def linear_forms(self, t: int, lam):
        """Classical transposed Jacobian products ``(d phi_t/dw^T lam, d phi_t/dx^T lam)``."""
        return self.chain.layers[t].vjp(self.params[t], self.states[t], lam)

    def local(self, t: int, block: str, prob: LocalProblem) -> SolveResult:
        """Solve a layer-local subproblem of layer ``t`` (0-based)."""
        try:
            res = solve_local(self.chain.layers[t], block, self.params[t], self.states[t], prob, self.cfg)
        except DivergenceError as err:
            form = "parameter" if block == "w" else "state"
            raise DivergenceError(f"inner solver diverged on the {form} form of layer {t}: {err}",
                                  err.trace) from err
        self.stats.add(res)
        return res

    def moreau_x(self, t: int, lam, step: float) -> np.ndarray:
        """``grad env(step * lam^T phi_t(w_t, .))(x_{t-1})``."""
        return -self.local(t, "x", LocalProblem(lam=np.asarray(lam, dtype=np.float64), rho=1.0 / step)).y

    def moreau_w(self, t: int, lam, step: float) -> np.ndarray:
        """``grad env(step * (lam^T phi_t(., x_{t-1}) + r_t))(w_t)``."""
        prob = LocalProblem(lam=np.asarray(lam, dtype=np.float64), rho=1.0 / step, mu=self.mu)
        return -self.local(t, "w", prob).y


def backprop(chain: Chain, params: BlockParams, x0, h: Objective, mu: float = 0.0) -> OracleOutput:
    """Classical gradient of ``h(f(w, x0)) + (mu / 2) ||w||^2`` by reverse sweep.

    ``lam_tau = grad h(x_tau)``, ``lam_{t-1} = d phi_t/dx^T lam_t`` and
    ``g_t = d phi_t/dw^T lam_t (+ mu w_t)``. ``info`` holds the multipliers
    and the objective value.
    """
    states = forward(chain, params, x0)
    lam = np.asarray(h.grad(states[-1]), dtype=np.float64)
    lams = [None] * chain.depth
    grads = [None] * chain.depth
    for t in range(chain.depth - 1, -1, -1):
        lams[t] = lam
        gw, lam = chain.layers[t].vjp(params[t], states[t], lam)
        grads[t] = gw + mu * params[t] if mu else gw
    value = h.value(states[-1])
    if mu:
        value += 0.5 * mu * float(params.flat() @ params.flat())
    return OracleOutput(Mode.DELTA, BlockParams(grads),
                        {"states": states, "multipliers": lams, "objective": value})


def moreau_forward(chain: Chain, params: BlockParams, x0, cfg: InnerSolverConfig = THEORY,
                   mu: float = 0.0):
    """Forward pass storing the layer-local forms; returns ``(x_tau, tape)``."""
    states = forward(chain, params, x0)
    return states[-1], OracleTape(chain, params, states, cfg, mu)


def _check_schedule(name, values, tau):
    values = tuple(float(v) for v in values)
    if len(values) != tau:
        raise DimensionError(f"{name} schedule needs {tau} entries, got {len(values)}", tau, len(values))
    if any(not v > 0 for v in values):
        raise ValueError(f"{name} schedule must be positive")
    return values


def moreau_backward(tape: OracleTape, h: Objective, gammas: Sequence[float],
                    alphas: Sequence[float]) -> OracleOutput:
    """Moreau-gradient backward pass.

    ``lam_tau = gamma_tau^-1 grad env(gamma_tau h)(x_tau)``, then for
    ``t = tau..1``::

        g_t       = grad env(alpha_t lam_t^T phi_t(., x_{t-1}))(w_t)
        lam_{t-1} = gamma_{t-1}^-1 grad env(gamma_{t-1} lam_t^T phi_t(w_t, .))(x_{t-1})

    Raises
    ------
    DivergenceError
        If an inner solve diverges; the message names the layer and form.
    """
    tau = len(tape)
    gammas = _check_schedule("gamma", gammas, tau)
    alphas = _check_schedule("alpha", alphas, tau)
    res = solve_head(h, tape.output, 1.0 / gammas[-1], tape.cfg)
    tape.stats.add(res)
    lam = (1.0 / gammas[-1]) * (-res.y)
    lams = [None] * tau
    grads = [None] * tau
    for t in range(tau - 1, -1, -1):
        lams[t] = lam
        grads[t] = tape.moreau_w(t, lam, alphas[t])
        if t > 0:
            rho = 1.0 / gammas[t - 1]
            y = tape.local(t, "x", LocalProblem(lam=lam, rho=rho)).y
            lam = rho * (-y)
    return OracleOutput(Mode.DELTA, BlockParams(grads),
                        {"multipliers": lams, "solver": tape.stats.as_dict()})


def moreau_oracle(chain, params, x0, h, gammas, alphas, cfg: InnerSolverConfig = THEORY,
                  mu: float = 0.0) -> OracleOutput:
    """Convenience wrapper: :func:`moreau_forward` followed by :func:`moreau_backward`."""
    _, tape = moreau_forward(chain, params, x0, cfg, mu)
    return moreau_backward(tape, h, gammas, alphas)


@dataclass(frozen=True)
class AugLagConfig:
    """Parameters of the augmented-Lagrangian oracle.

    Attributes
    ----------
    kappa : float
        Penalty weight (>= 0).
    betas, gammas, alphas : tuple of float
        Per-layer multiplier steps (>= 0), state steps and parameter steps.
    mu : float
        Weight of the decomposable regularizer ``(mu / 2) ||w_t||^2``.
    solver : InnerSolverConfig
    """

    kappa: float
    betas: tuple
    gammas: tuple
    alphas: tuple
    mu: float = 0.0
    solver: InnerSolverConfig = THEORY

    def __post_init__(self):
        if not self.kappa >= 0:
            raise ValueError("kappa must be non-negative")
        tau = len(self.gammas)
        object.__setattr__(self, "gammas", _check_schedule("gamma", self.gammas, tau))
        object.__setattr__(self, "alphas", _check_schedule("alpha", self.alphas, tau))
        betas = tuple(float(b) for b in self.betas)
        if len(betas) != tau or any(not b >= 0 for b in betas):
            raise ValueError("need one non-negative beta per layer")
        object.__setattr__(self, "betas", betas)
        if not self.mu >= 0:
            raise ValueError("mu must be non-negative")

    @classmethod
    def from_base(cls, tau: int, gamma: float, alpha: float, beta: float, kappa: float,
                  mu: float = 0.0, solver: InnerSolverConfig = THEORY, geometric: bool = True):
        """Build per-layer schedules from base values (geometric schedule if requested)."""
        from .chain import schedule

        if geometric:
            gammas, alphas = schedule(gamma, alpha, tau)
        else:
            gammas, alphas = (gamma,) * tau, (alpha,) * tau
        return cls(kappa, (beta,) * tau, gammas, alphas, mu, solver)


def auglag_forward(chain: Chain, params: BlockParams, x0, cfg: AugLagConfig):
    """Forward pass for the augmented-Lagrangian oracle; returns ``(x_tau, tape)``."""
    if len(cfg.gammas) != chain.depth:
        raise DimensionError("schedule length does not match the chain", chain.depth, len(cfg.gammas))
    states = forward(chain, params, x0)
    return states[-1], OracleTape(chain, params, states, cfg.solver, cfg.mu)


def auglag_backward(tape: OracleTape, h: Objective, cfg: AugLagConfig) -> OracleOutput:
    """Block-coordinate proximal pass on the augmented Lagrangian.

    ``x_tau^+`` minimizes ``h + ((1/gamma_tau + kappa) / 2) ||. - x_tau||^2``;
    then for ``t = tau..1``::

        lam_t^+   = beta_t (x_t - x_t^+)
        w_t^+     = argmin_v lam_t^+T phi_t(v, x_{t-1}) + ||v - w_t||^2 / (2 alpha_t)
                             + (kappa/2) ||phi_t(v, x_{t-1}) - x_t^+||^2 + r_t(v)
        x_{t-1}^+ = argmin_y lam_t^+T phi_t(w_t, y) + ((1/gamma_{t-1} + kappa)/2) ||y - x_{t-1}||^2
                             + (kappa/2) ||phi_t(w_t, y) - x_t^+||^2

    Returns the new parameters ``w^+`` in replacement mode.
    """
    tau = len(tape)
    kappa = cfg.kappa
    res = solve_head(h, tape.output, 1.0 / cfg.gammas[-1] + kappa, tape.cfg)
    tape.stats.add(res)
    y = res.y
    new = [None] * tau
    lams = [None] * tau
    targets = [None] * tau
    for t in range(tau - 1, -1, -1):
        lam = cfg.betas[t] * (-y)
        target = tape.states[t + 1] + y
        lams[t], targets[t] = lam, target
        yw = tape.local(t, "w", LocalProblem(lam=lam, rho=1.0 / cfg.alphas[t], kappa=kappa,
                                             target=target, mu=cfg.mu)).y
        new[t] = tape.params[t] + yw
        if t > 0:
            prob = LocalProblem(lam=lam, rho=1.0 / cfg.gammas[t - 1] + kappa, kappa=kappa, target=target)
            y = tape.local(t, "x", prob).y
    return OracleOutput(Mode.REPLACEMENT, BlockParams(new),
                        {"multipliers": lams, "targets": targets, "solver": tape.stats.as_dict()})


def auglag_oracle(chain, params, x0, h, cfg: AugLagConfig) -> OracleOutput:
    """Convenience wrapper: :func:`auglag_forward` followed by :func:`auglag_backward`."""
    _, tape = auglag_forward(chain, params, x0, cfg)
    return auglag_backward(tape, h, cfg)


def target_prop(chain: Chain, params: BlockParams, x0, h: Objective, kappa: float,
                cfg: InnerSolverConfig = THEORY, mu: float = 0.0) -> OracleOutput:
    """Target propagation with regularized layer inverses.

    ``x_tau^+ = x_tau - grad env(h / kappa)(x_tau)``; then for ``t = tau..1``
    the parameters are fitted to the target,
    ``w_t^+ = argmin_v ||phi_t(v, x_{t-1}) - x_t^+||^2 / 2`` (from ``w_t``),
    and the target is propagated through an approximate inverse,
    ``x_{t-1}^+ = argmin_y ||phi_t(w_t, y) - x_t^+||^2 / 2`` (from ``x_{t-1}``).
    """
    if not kappa > 0:
        raise ValueError("target propagation needs kappa > 0")
    states = forward(chain, params, x0)
    tape = OracleTape(chain, params, states, cfg, mu)
    res = solve_head(h, states[-1], kappa, cfg)
    tape.stats.add(res)
    target = states[-1] + res.y
    new = [None] * chain.depth
    targets = [None] * chain.depth
    for t in range(chain.depth - 1, -1, -1):
        targets[t] = target
        new[t] = params[t] + tape.local(t, "w", LocalProblem(kappa=1.0, target=target, mu=mu)).y
        if t > 0:
            target = states[t] + tape.local(t, "x", LocalProblem(kappa=1.0, target=target)).y
    return OracleOutput(Mode.REPLACEMENT, BlockParams(new),
                        {"targets": targets, "solver": tape.stats.as_dict()})


def reg_target_prop(chain: Chain, params: BlockParams, x0, h: Objective, kappa: float,
                    gammas: Sequence[float], alphas: Sequence[float],
                    cfg: InnerSolverConfig = THEORY, mu: float = 0.0) -> OracleOutput:
    """Proximal point pass on the penalized formulation.

    Same sweep as :func:`target_prop` with proximity terms:
    ``x_tau^+`` minimizes ``h + ((kappa + 1/gamma_tau)/2) ||. - x_tau||^2``,
    the parameter fit adds ``||v - w_t||^2 / (2 alpha_t)`` and the inverse
    adds ``((kappa + 1/gamma_{t-1})/2) ||y - x_{t-1}||^2``.
    """
    if not kappa >= 0:
        raise ValueError("kappa must be non-negative")
    tau = chain.depth
    gammas = _check_schedule("gamma", gammas, tau)
    alphas = _check_schedule("alpha", alphas, tau)
    states = forward(chain, params, x0)
    tape = OracleTape(chain, params, states, cfg, mu)
    res = solve_head(h, states[-1], 1.0 / gammas[-1] + kappa, cfg)
    tape.stats.add(res)
    y = res.y
    new = [None] * tau
    targets = [None] * tau
    for t in range(tau - 1, -1, -1):
        target = states[t + 1] + y
        targets[t] = target
        new[t] = params[t] + tape.local(t, "w", LocalProblem(rho=1.0 / alphas[t], kappa=kappa,
                                                             target=target, mu=mu)).y
        if t > 0:
            y = tape.local(t, "x", LocalProblem(rho=1.0 / gammas[t - 1] + kappa, kappa=kappa, target=target)).y
    return OracleOutput(Mode.REPLACEMENT, BlockParams(new),
                        {"targets": targets, "solver": tape.stats.as_dict()})


def proximal_backprop(chain: Chain, params: BlockParams, x0, h: Objective, alpha: float,
                      cfg: InnerSolverConfig = THEORY, mu: float = 0.0) -> OracleOutput:
    """Proximal back-propagation.

    Multipliers are back-propagated classically, each layer gets the target
    ``z_t = x_t - lam_t`` and its parameters take a proximal step
    ``w_t^+ = argmin_v ||v - w_t||^2 / (2 alpha) + ||phi_t(v, x_{t-1}) - z_t||^2 / 2``.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    states = forward(chain, params, x0)
    tape = OracleTape(chain, params, states, cfg, mu)
    lam = np.asarray(h.grad(states[-1]), dtype=np.float64)
    new = [None] * chain.depth
    targets = [None] * chain.depth
    lams = [None] * chain.depth
    for t in range(chain.depth - 1, -1, -1):
        lams[t] = lam
        z = states[t + 1] - lam
        targets[t] = z
        new[t] = params[t] + tape.local(t, "w", LocalProblem(rho=1.0 / alpha, kappa=1.0, target=z, mu=mu)).y
        lam = tape.linear_forms(t, lam)[1]
    return OracleOutput(Mode.REPLACEMENT, BlockParams(new),
                        {"multipliers": lams, "targets": targets, "solver": tape.stats.as_dict()})
