"""Numerical property checks of the gradient oracles.

Every check compares a library computation with an independent route
(finite differences, a brute-force argmin, an analytic formula or a
different oracle family) over random instances and returns a
:class:`CheckResult` holding the worst discrepancy seen.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .chain import BlockParams, Chain, DenseActivation, forward
from .envelope import THEORY, InnerSolverConfig, LayerMap, closed_form_prox, dual_prox_gradient, envelope_gap_check
from .numerics import brute_force_argmin, finite_difference_gradient, make_rng
from .objectives import AbsoluteValue, AffineNorm, LinearForm, Quadratic, SquaredLoss
from .oracles import AugLagConfig, auglag_oracle, backprop, moreau_oracle, reg_target_prop

TANH_CURVATURE = 0.7698003589195010  # max |tanh''|


@dataclass(frozen=True)
class CheckResult:
    """Outcome of one property check.

    Attributes
    ----------
    name : str
    passed : bool
    worst : float
        Largest discrepancy (or, for bounds, largest ``measured - bound``).
    tolerance : float
    instances : int
    detail : str
    """

    name: str
    passed: bool
    worst: float
    tolerance: float
    instances: int
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        text = f"{status}  {self.name:<24s} worst={self.worst:.3e}  tol={self.tolerance:.1e}  n={self.instances}"
        return f"{text}  {self.detail}" if self.detail else text

    def as_dict(self) -> dict:
        return dict(name=self.name, passed=self.passed, worst=self.worst, tolerance=self.tolerance,
                    instances=self.instances, detail=self.detail)


def _result(name, errors, tol, detail="", strict=False):
    worst = float(np.max(errors)) if len(errors) else 0.0
    passed = bool(worst < tol) if strict else bool(worst <= tol)
    return CheckResult(name, passed, worst, tol, len(errors), detail)


def random_smooth_chain(rng, tau: int, max_dim: int = 8, activations=("tanh", "softplus"), scale: float = 0.5):
    """Random chain of affine+activation layers with a squared-loss head.

    Returns ``(chain, params, x0, head)``; parameters include random biases.
    """
    dims = [int(d) for d in rng.integers(1, max_dim + 1, size=tau + 1)]
    acts = [activations[int(i)] for i in rng.integers(0, len(activations), size=tau)]
    chain = Chain([DenseActivation(dims[t], dims[t + 1], acts[t]) for t in range(tau)])
    params = BlockParams([w + scale * rng.normal(size=w.size) for w in chain.init_params(rng)])
    x0 = rng.normal(size=dims[0])
    head = SquaredLoss(rng.normal(size=dims[-1]))
    return chain, params, x0, head


def _flat_objective(chain, params, x0, h):
    dims = params.dims

    def f(v):
        return h.value(forward(chain, BlockParams.from_flat(dims, v), x0)[-1])
    return f


def check_backprop_fd(instances: int = 100, seed: int = 0, tol: float = 1e-5, max_tau: int = 4) -> CheckResult:
    """Backprop against central finite differences on random smooth chains (relative error)."""
    rng = make_rng(seed)
    errors = []
    for _ in range(instances):
        tau = int(rng.integers(1, max_tau + 1))
        chain, params, x0, h = random_smooth_chain(rng, tau)
        g = backprop(chain, params, x0, h).blocks.flat()
        fd = finite_difference_gradient(_flat_objective(chain, params, x0, h), params.flat())
        errors.append(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12))
    return _result("backprop-vs-fd", errors, tol)


def random_composition(rng, max_dim: int = 5):
    """Random convex quadratic ``f`` composed with an affine+tanh map ``g``.

    Returns ``(f, g, x, alpha, beta)`` with ``alpha = 1 / (2 ell_f L_g)`` and
    ``beta = 1 / (2 ell_g^2)``, where ``ell_f`` bounds ``||grad f||`` on the
    range of ``g`` (a cube, since tanh is bounded).
    """
    d, n = (int(v) for v in rng.integers(1, max_dim + 1, size=2))
    B = rng.normal(size=(n, n))
    Q = B.T @ B / n + 0.1 * np.eye(n)
    b = rng.normal(size=n)
    f = Quadratic(Q, b)
    layer = DenseActivation(d, n, "tanh")
    w = layer.init_params(rng) + 0.3 * rng.normal(size=layer.param_dim)
    g = LayerMap(layer, w)
    A = w.reshape(d + 1, n)[:d]
    normA = float(np.linalg.norm(A, 2))
    ell_f = float(np.linalg.norm(Q, 2)) * np.sqrt(n) + float(np.linalg.norm(b))
    L_g = TANH_CURVATURE * normA ** 2
    alpha = 1.0 / (2.0 * ell_f * max(L_g, 1e-12))
    beta = 1.0 / (2.0 * max(normA, 1e-12) ** 2)
    x = rng.normal(size=d)
    return f, g, x, alpha, beta


def primal_envelope_minimizer(f, g, x, alpha):
    """Brute-force ``argmin_y alpha f(g(x + y)) + ||y||^2 / 2``."""
    def fun(y):
        return alpha * f.value(g(x + y)) + 0.5 * float(y @ y)

    def grad(y):
        return alpha * g.vjp(x + y, f.grad(g(x + y))) + y
    return brute_force_argmin(fun, grad, np.zeros_like(x), tol=1e-12).x


def check_dual_chain_rule(instances: int = 20, seed: int = 0, tol: float = 1e-4) -> CheckResult:
    """Dual proximal-gradient Moreau gradient of ``alpha f o g`` against a primal brute-force argmin."""
    rng = make_rng(seed)
    errors = []
    for _ in range(instances):
        f, g, x, alpha, beta = random_composition(rng)
        dual = dual_prox_gradient(f, g, x, alpha, beta, iters=5000)
        y_star = primal_envelope_minimizer(f, g, x, alpha)
        errors.append(np.linalg.norm(dual.moreau_gradient + y_star))
    return _result("dual-chain-rule", errors, tol)


def check_gap_bound(instances: int = 20, seed: int = 0, alphas=(0.1, 1.0), slack: float = 1e-12,
                    cfg: InnerSolverConfig = THEORY) -> CheckResult:
    """``|f(x) - env_alpha(f)(x)| < alpha ell^2`` for ``|.|`` and ``||A . - b||``.

    ``worst`` is the largest ``gap - alpha ell^2`` (negative when all pass).
    """
    rng = make_rng(seed)
    margins = []
    for _ in range(instances):
        d = int(rng.integers(1, 6))
        m = int(rng.integers(1, 6))
        absval = AbsoluteValue()
        affine = AffineNorm(rng.normal(size=(m, d)), rng.normal(size=m))
        x = 2.0 * rng.normal(size=d)
        for f, ell in ((absval, np.sqrt(d)), (affine, affine.lipschitz)):
            for a in alphas:
                margins.append(envelope_gap_check(f, x, a, cfg) - a * ell ** 2)
    return _result("envelope-gap-bound", margins, slack, strict=True)


def check_closed_forms(instances: int = 20, seed: int = 0, tol: float = 1e-12) -> CheckResult:
    """Closed-form proximal steps against analytic formulas (relative error)."""
    rng = make_rng(seed)
    errors = []

    def rel(a, b):
        return np.linalg.norm(a - b) / max(1.0, np.linalg.norm(b))

    for _ in range(instances):
        d = int(rng.integers(1, 8))
        x = rng.normal(size=d)
        a = float(rng.uniform(0.01, 3.0))
        B = rng.normal(size=(d, d))
        Q, b = B.T @ B, rng.normal(size=d)
        # argmin_z (1/2) z^T Q z + b^T z + ||z - x||^2 / (2a)  =>  (aQ + I) z = x - a b
        z_quad = np.linalg.solve(a * Q + np.eye(d), x - a * b)
        errors.append(rel(x + closed_form_prox(Quadratic(Q, b), x, a).minimizer, z_quad))
        lam = rng.normal(size=d)
        errors.append(rel(closed_form_prox(LinearForm(lam), x, a).moreau_gradient, a * lam))
        z_soft = np.sign(x) * np.maximum(np.abs(x) - a, 0.0)
        errors.append(rel(x + closed_form_prox(AbsoluteValue(), x, a).minimizer, z_soft))
    return _result("closed-form-prox", errors, tol)


def tanh_chain(rng, tau: int, max_dim: int = 4):
    """Random tanh chain with a squared-loss head; returns ``(chain, params, x0, head)``."""
    return random_smooth_chain(rng, tau, max_dim=max_dim, activations=("tanh",))


def check_reductions(seeds: int = 10, tol: float = 1e-10, tau: int = 3, gamma: float = 0.5,
                     alpha: float = 0.5, kappa: float = 0.7, cfg: InnerSolverConfig = THEORY) -> CheckResult:
    """``auglag(kappa=0, beta_t=1/gamma_t) == moreau`` and ``auglag(beta=0) == reg_target_prop``.

    The Moreau delta ``g`` is compared through the replacement ``w - g``.
    """
    from .chain import schedule

    errors = []
    for s in range(seeds):
        chain, params, x0, h = tanh_chain(make_rng(s), tau)
        gammas, alphas = schedule(gamma, alpha, tau)
        mor = moreau_oracle(chain, params, x0, h, gammas, alphas, cfg)
        al = auglag_oracle(chain, params, x0, h,
                           AugLagConfig(0.0, tuple(1.0 / g for g in gammas), gammas, alphas, 0.0, cfg))
        errors.append((params - mor.blocks - al.blocks).norm())
        al0 = auglag_oracle(chain, params, x0, h, AugLagConfig(kappa, (0.0,) * tau, gammas, alphas, 0.0, cfg))
        rtp = reg_target_prop(chain, params, x0, h, kappa, gammas, alphas, cfg)
        errors.append((al0.blocks - rtp.blocks).norm())
    return _result("reduction-web", errors, tol)


def small_alpha_error(chain, params, x0, h, gamma: float, alpha: float, cfg: InnerSolverConfig = THEORY) -> float:
    """Largest per-layer ``||g_t / alpha - grad_t|| / ||grad_t||`` with constant steps."""
    tau = chain.depth
    g = moreau_oracle(chain, params, x0, h, (gamma,) * tau, (alpha,) * tau, cfg).blocks
    bp = backprop(chain, params, x0, h).blocks
    return max(np.linalg.norm(g[t] / alpha - bp[t]) / max(np.linalg.norm(bp[t]), 1e-300) for t in range(tau))


def check_small_alpha(instances: int = 5, seed: int = 0, gamma: float = 1.0, alpha: float = 1e-5,
                      tol: float = 1e-3, tau: int = 2) -> CheckResult:
    """Moreau gradients divided by ``alpha`` against backprop on tanh chains."""
    rng = make_rng(seed)
    errors = [small_alpha_error(*tanh_chain(rng, tau), gamma, alpha) for _ in range(instances)]
    return _result(f"small-alpha(gamma={gamma:g})", errors, tol)


def property_suite(instances: int = 10, seed: int = 0):
    """Run every check at a reduced instance count; returns a list of results."""
    return [
        check_backprop_fd(instances, seed),
        check_dual_chain_rule(max(1, instances // 2), seed),
        check_gap_bound(instances, seed),
        check_closed_forms(instances, seed),
        check_reductions(max(1, instances // 2)),
        check_small_alpha(max(1, instances // 2), seed, gamma=1e-5, alpha=1e-5),
    ]
