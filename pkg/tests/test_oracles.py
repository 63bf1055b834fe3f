import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moreaugrad.chain import BlockParams, Chain, Dense, DenseActivation, forward, schedule
from moreaugrad.checks import check_backprop_fd, check_reductions, tanh_chain
from moreaugrad.envelope import PRACTICE, THEORY, with_method
from moreaugrad.numerics import DimensionError, DivergenceError, brute_force_argmin, make_rng
from moreaugrad.objectives import Constant, Custom, LinearForm, SquaredDistance, SquaredLoss
from moreaugrad.oracles import (AugLagConfig, LocalProblem, Mode, OracleOutput, OracleTape, apply_update,
                                auglag_oracle, backprop, moreau_forward, moreau_oracle, proximal_backprop,
                                reg_target_prop, solve_local, target_prop, update_norm)

ITERATIVE = with_method(THEORY, use_closed_form=False)


def linear_chain(rng, dims=(3, 4, 2)):
    chain = Chain([Dense(dims[t], dims[t + 1]) for t in range(len(dims) - 1)])
    params = BlockParams([w + 0.3 * rng.normal(size=w.size) for w in chain.init_params(rng)])
    return chain, params, rng.normal(size=dims[0])


# -------------------------------------------------------------------- backprop


def test_backprop_matches_finite_differences():
    assert check_backprop_fd(instances=20, seed=1).passed


def test_backprop_linear_chain_linear_head_by_hand():
    # f(w) = c^T (W2^T (W1^T x + b1) + b2): gradients are outer products.
    rng = make_rng(0)
    chain, params, x0 = linear_chain(rng, (2, 3, 1))
    c = np.array([2.0])
    out = backprop(chain, params, x0, LinearForm(c))
    W2, _ = chain.layers[1].unpack(params[1])
    x1 = forward(chain, params, x0)[1]
    np.testing.assert_allclose(out.blocks[1], np.concatenate([x1 * c[0], c]), atol=1e-14)
    lam1 = W2 @ c
    np.testing.assert_allclose(out.blocks[0], np.vstack([np.outer(x0, lam1), lam1]).reshape(-1), atol=1e-14)


def test_backprop_constant_head_gives_zero_gradient():
    rng = make_rng(1)
    chain, params, x0, _ = tanh_chain(rng, 3)
    out = backprop(chain, params, x0, Constant(1.0, chain.output_dim))
    assert out.mode is Mode.DELTA
    assert out.blocks.norm() == 0.0


def test_backprop_regularizer_adds_mu_w():
    rng = make_rng(2)
    chain, params, x0, h = tanh_chain(rng, 2)
    plain, reg = backprop(chain, params, x0, h), backprop(chain, params, x0, h, mu=0.3)
    for t in range(2):
        np.testing.assert_allclose(reg.blocks[t] - plain.blocks[t], 0.3 * params[t], atol=1e-15)


# ------------------------------------------------------------------- the tape


def test_tape_forms_vanish_for_zero_multiplier():
    rng = make_rng(3)
    chain, params, x0, _ = tanh_chain(rng, 2)
    _, tape = moreau_forward(chain, params, x0)
    zero = np.zeros(chain.layers[1].out_features)
    np.testing.assert_allclose(tape.moreau_x(1, zero, 0.7), 0.0, atol=1e-15)
    np.testing.assert_allclose(tape.moreau_w(1, zero, 0.7), 0.0, atol=1e-15)


def test_tape_closed_form_matches_iterative_solve():
    rng = make_rng(4)
    chain, params, x0 = linear_chain(rng)
    lam = rng.normal(size=4)
    states = forward(chain, params, x0)
    exact = OracleTape(chain, params, states, THEORY)
    iterative = OracleTape(chain, params, states, ITERATIVE)
    for form in ("moreau_x", "moreau_w"):
        a, b = getattr(exact, form)(0, lam, 0.5), getattr(iterative, form)(0, lam, 0.5)
        np.testing.assert_allclose(a, b, atol=1e-8)
    assert exact.stats.closed_form == 2 and iterative.stats.closed_form == 0


def test_tape_requires_all_states():
    rng = make_rng(5)
    chain, params, x0 = linear_chain(rng)
    with pytest.raises(DimensionError):
        OracleTape(chain, params, forward(chain, params, x0)[:-1])


def test_solve_local_validates_inputs():
    layer = Dense(2, 2)
    w = layer.init_params(make_rng(0))
    with pytest.raises(ValueError):
        solve_local(layer, "z", w, np.ones(2), LocalProblem(rho=1.0))
    with pytest.raises(ValueError):
        solve_local(layer, "w", w, np.ones(2), LocalProblem(rho=1.0, kappa=1.0))


# -------------------------------------------------------------- Moreau oracle


def test_moreau_on_linear_chain_linear_head_is_scaled_backprop():
    # Every subproblem is linear, so each Moreau gradient equals alpha_t times the gradient.
    rng = make_rng(6)
    chain, params, x0 = linear_chain(rng)
    h = LinearForm(rng.normal(size=2))
    gammas, alphas = (0.3, 0.6), (0.2, 1.5)
    mor = moreau_oracle(chain, params, x0, h, gammas, alphas)
    bp = backprop(chain, params, x0, h)
    for t in range(2):
        np.testing.assert_allclose(mor.blocks[t], alphas[t] * bp.blocks[t], atol=1e-12)


def test_moreau_single_layer_quadratic_head_by_hand():
    # tau = 1, Dense layer, h = (1/2)||z - y||^2: lam = (z - y) / (1 + gamma).
    rng = make_rng(7)
    chain, params, x0 = linear_chain(rng, (2, 2))
    y = rng.normal(size=2)
    gamma, alpha = 0.4, 0.8
    out = moreau_oracle(chain, params, x0, SquaredDistance(y), (gamma,), (alpha,))
    z = forward(chain, params, x0)[-1]
    lam = (z - y) / (1 + gamma)
    np.testing.assert_allclose(out.info["multipliers"][0], lam, atol=1e-14)
    zx = np.append(x0, 1.0)
    # grad env(alpha lam^T (W^T x + b))(w) = alpha * vec(zx lam^T) for an affine function of w
    np.testing.assert_allclose(out.blocks[0], alpha * np.outer(zx, lam).reshape(-1), atol=1e-14)


def test_moreau_schedule_length_checked():
    rng = make_rng(8)
    chain, params, x0, h = tanh_chain(rng, 2)
    with pytest.raises(DimensionError):
        moreau_oracle(chain, params, x0, h, (0.5,), (0.5,))
    with pytest.raises(ValueError):
        moreau_oracle(chain, params, x0, h, (0.5, 0.0), (0.5, 0.5))


def test_moreau_constant_head_gives_zero():
    rng = make_rng(9)
    chain, params, x0, _ = tanh_chain(rng, 3)
    gammas, alphas = schedule(0.5, 1.0, 3)
    out = moreau_oracle(chain, params, x0, Constant(0.0, chain.output_dim), gammas, alphas)
    assert out.blocks.norm() == 0.0


def test_moreau_practice_solver_reports_statistics():
    rng = make_rng(10)
    chain, params, x0, h = tanh_chain(rng, 3)
    gammas, alphas = schedule(0.5, 1.0, 3)
    out = moreau_oracle(chain, params, x0, h, gammas, alphas, PRACTICE)
    stats = out.info["solver"]
    assert stats["solves"] == 1 + 3 + 2
    assert stats["iterations"] <= 2 * stats["solves"]


def test_moreau_dual_norm_bound():
    # ||grad env(alpha f)(x)|| <= alpha * Lipschitz(f): here f = lam^T phi(., x) with a tanh layer.
    rng = make_rng(11)
    for _ in range(10):
        chain, params, x0, _ = tanh_chain(rng, 1)
        _, tape = moreau_forward(chain, params, x0)
        lam = rng.normal(size=chain.output_dim)
        alpha = float(rng.uniform(0.1, 2.0))
        g = tape.moreau_w(0, lam, alpha)
        lip = np.linalg.norm(lam) * np.linalg.norm(np.append(x0, 1.0))  # |tanh'| <= 1
        assert np.linalg.norm(g) <= alpha * lip + 1e-10


@pytest.mark.filterwarnings("ignore:invalid value")
def test_inner_divergence_names_layer_and_form():
    # A non-finite head value makes every line-search trial fail.
    rng = make_rng(12)
    chain, params, x0, _ = tanh_chain(rng, 2)
    h = Custom(lambda z: float("nan"), lambda z: np.ones_like(z))
    with pytest.raises(DivergenceError):
        moreau_oracle(chain, params, x0, h, (0.5, 0.5), (0.5, 0.5), ITERATIVE)

    layer = DenseActivation(2, 2, "tanh")
    w = layer.init_params(rng)
    tape = OracleTape(Chain([layer]), BlockParams([w]), [np.ones(2), layer(w, np.ones(2))], ITERATIVE)
    with pytest.raises(DivergenceError, match="state form of layer 0"):
        tape.local(0, "x", LocalProblem(lam=np.array([np.inf, 0.0]), rho=1.0))


# --------------------------------------------------------- augmented Lagrangian


def test_reductions_hold_exactly():
    res = check_reductions(seeds=3)
    assert res.passed and res.worst == 0.0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 1.0), st.floats(0.05, 2.0))
def test_auglag_kappa_zero_equals_moreau_property(seed, gamma, alpha):
    chain, params, x0, h = tanh_chain(make_rng(seed), 2)
    gammas, alphas = schedule(gamma, alpha, 2)
    mor = moreau_oracle(chain, params, x0, h, gammas, alphas)
    al = auglag_oracle(chain, params, x0, h, AugLagConfig(0.0, tuple(1 / g for g in gammas), gammas, alphas))
    assert (apply_update(params, mor) - apply_update(params, al)).norm() <= 1e-12


def test_auglag_constant_head_keeps_parameters():
    rng = make_rng(13)
    chain, params, x0, _ = tanh_chain(rng, 3)
    cfg = AugLagConfig.from_base(3, 0.5, 1.0, 2.0, 0.7)
    out = auglag_oracle(chain, params, x0, Constant(0.0, chain.output_dim), cfg)
    assert out.mode is Mode.REPLACEMENT
    assert (out.blocks - params).norm() <= 1e-12


def test_auglag_large_kappa_fits_targets():
    # With a huge penalty the single affine layer matches its target almost exactly.
    rng = make_rng(14)
    chain, params, x0 = linear_chain(rng, (3, 2))
    y = rng.normal(size=2)
    cfg = AugLagConfig(1e8, (0.0,), (1.0,), (1.0,))
    out = auglag_oracle(chain, params, x0, SquaredDistance(y), cfg)
    target = out.info["targets"][0]
    np.testing.assert_allclose(chain.layers[0](out.blocks[0], x0), target, atol=1e-6)


def test_auglag_config_validation():
    with pytest.raises(ValueError):
        AugLagConfig(-1.0, (1.0,), (1.0,), (1.0,))
    with pytest.raises(ValueError):
        AugLagConfig(1.0, (-1.0,), (1.0,), (1.0,))
    with pytest.raises(ValueError):
        AugLagConfig(1.0, (1.0, 1.0), (1.0,), (1.0,))
    cfg = AugLagConfig.from_base(2, 32.0, 8.0, 0.1, 1.0, geometric=False)
    assert cfg.gammas == (32.0, 32.0) and cfg.alphas == (8.0, 8.0)


def test_auglag_schedule_must_match_chain():
    rng = make_rng(15)
    chain, params, x0, h = tanh_chain(rng, 2)
    with pytest.raises(DimensionError):
        auglag_oracle(chain, params, x0, h, AugLagConfig.from_base(3, 0.5, 1.0, 1.0, 1.0))


# ---------------------------------------------------------- target propagation


def test_target_prop_inverts_invertible_affine_layers():
    rng = make_rng(16)
    chain = Chain([Dense(2, 2), Dense(2, 2)])
    params = BlockParams([np.array([2.0, 0.5, -0.3, 1.5, 0.1, 0.2]), np.array([1.0, 0.2, 0.4, -1.0, 0.0, 0.3])])
    x0, y = rng.normal(size=2), rng.normal(size=2)
    out = target_prop(chain, params, x0, SquaredDistance(y), kappa=1.0)
    t0, t1 = out.info["targets"]
    # The propagated target is mapped exactly onto the next one by the current layer.
    np.testing.assert_allclose(chain.layers[1](params[1], t0), t1, atol=1e-12)
    # Each parameter fit reproduces its target from the current input.
    np.testing.assert_allclose(chain.layers[1](out.blocks[1], forward(chain, params, x0)[1]), t1, atol=1e-12)
    np.testing.assert_allclose(chain.layers[0](out.blocks[0], x0), t0, atol=1e-12)
    # The output target is the proximal point of h / kappa.
    z = forward(chain, params, x0)[-1]
    np.testing.assert_allclose(t1, (z + y) / 2, atol=1e-14)


def test_target_prop_needs_positive_kappa():
    rng = make_rng(17)
    chain, params, x0 = linear_chain(rng)
    with pytest.raises(ValueError):
        target_prop(chain, params, x0, LinearForm(np.ones(2)), kappa=0.0)


def test_reg_target_prop_single_layer_approaches_target_prop():
    rng = make_rng(18)
    chain, params, x0 = linear_chain(rng, (3, 2))
    h = SquaredDistance(rng.normal(size=2))
    tp = target_prop(chain, params, x0, h, kappa=2.0)
    for big, tol in ((1e4, 1e-2), (1e8, 1e-6)):
        rtp = reg_target_prop(chain, params, x0, h, 2.0, (big,), (big,))
        assert (rtp.blocks - tp.blocks).norm() <= tol


def test_reg_target_prop_small_alpha_keeps_parameters():
    rng = make_rng(19)
    chain, params, x0, h = tanh_chain(rng, 2)
    prev = np.inf
    for alpha in (1e-1, 1e-3, 1e-5):
        out = reg_target_prop(chain, params, x0, h, 1.0, (0.5, 0.5), (alpha, alpha))
        dist = (out.blocks - params).norm()
        assert dist < prev
        prev = dist
    assert prev <= 1e-4


# ----------------------------------------------------------- proximal backprop


def test_proximal_backprop_matches_brute_force():
    rng = make_rng(20)
    chain, params, x0, h = tanh_chain(rng, 2)
    alpha = 0.3
    out = proximal_backprop(chain, params, x0, h, alpha)
    states = forward(chain, params, x0)
    for t in range(2):
        layer, z, w = chain.layers[t], out.info["targets"][t], params[t]

        def fun(v):
            r = layer(v, states[t]) - z
            return 0.5 * float((v - w) @ (v - w)) / alpha + 0.5 * float(r @ r)

        def grad(v):
            return (v - w) / alpha + layer.vjp(v, states[t], layer(v, states[t]) - z)[0]
        ref = brute_force_argmin(fun, grad, w.copy(), tol=1e-12)
        np.testing.assert_allclose(out.blocks[t], ref.x, atol=1e-7)


def test_proximal_backprop_targets_use_classical_multipliers():
    rng = make_rng(21)
    chain, params, x0, h = tanh_chain(rng, 3)
    out = proximal_backprop(chain, params, x0, h, 0.5)
    bp = backprop(chain, params, x0, h)
    states = forward(chain, params, x0)
    for t in range(3):
        np.testing.assert_allclose(out.info["targets"][t], states[t + 1] - bp.info["multipliers"][t], atol=1e-14)
    with pytest.raises(ValueError):
        proximal_backprop(chain, params, x0, h, 0.0)


# --------------------------------------------------------------- apply / norm


def test_apply_update_and_update_norm():
    w = BlockParams([np.ones(2), np.zeros(1)])
    g = BlockParams([np.full(2, 0.5), np.ones(1)])
    delta = OracleOutput(Mode.DELTA, g)
    repl = OracleOutput(Mode.REPLACEMENT, g)
    assert apply_update(w, delta) == BlockParams([np.full(2, 0.5), -np.ones(1)])
    assert apply_update(w, repl) == g
    assert update_norm(w, delta) == pytest.approx(g.norm())
    assert update_norm(w, repl) == pytest.approx((g - w).norm())


def test_squared_loss_head_batched_chain():
    # Two samples stacked: backprop on the batch equals the sum of per-sample gradients.
    rng = make_rng(22)
    chain, params, _ = linear_chain(rng, (2, 2))
    X, Y = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
    batch = backprop(chain, params, X.reshape(-1), SquaredLoss(Y.reshape(-1), 2)).blocks[0]
    single = sum(backprop(chain, params, X[i], SquaredLoss(Y[i], 1)).blocks[0] for i in range(2)) / 2
    np.testing.assert_allclose(batch, single, atol=1e-14)


def test_reg_target_prop_last_layer_approaches_target_prop_but_inverse_keeps_penalty():
    # The state update keeps its (kappa / 2)||y||^2 proximity as gamma -> inf, so only
    # the last layer reduces to target propagation on a deeper chain.
    rng = make_rng(23)
    chain = Chain([Dense(2, 2), Dense(2, 2)])
    params = BlockParams([np.array([2.0, 0.5, -0.3, 1.5, 0.1, 0.2]), np.array([1.0, 0.2, 0.4, -1.0, 0.0, 0.3])])
    x0, h = rng.normal(size=2), SquaredDistance(rng.normal(size=2))
    tp = target_prop(chain, params, x0, h, kappa=1.0)
    rtp = reg_target_prop(chain, params, x0, h, 1.0, (1e6, 1e6), (1e6, 1e6))
    assert np.linalg.norm(rtp.blocks[1] - tp.blocks[1]) <= 1e-4
    assert np.linalg.norm(rtp.blocks[0] - tp.blocks[0]) > 1e-2


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 1.0))
def test_moreau_multipliers_bounded_by_lipschitz_products(seed, gamma):
    # ||lam_t|| <= ell_h prod_{s > t} ell_phi_s with ell_h = sqrt(2) for a one-sample logistic head
    # and ell_phi_s = ||W_s||_2 for tanh layers.
    from moreaugrad.objectives import Logistic

    rng = make_rng(seed)
    chain, params, x0, _ = tanh_chain(rng, 3)
    k = chain.output_dim
    h = Logistic([int(rng.integers(0, k))], k)
    gammas, alphas = schedule(gamma, 1.0, 3)
    lams = moreau_oracle(chain, params, x0, h, gammas, alphas).info["multipliers"]
    ells = [np.linalg.norm(layer.unpack(params[t])[0], 2) for t, layer in enumerate(chain.layers)]
    for t in range(3):
        bound = np.sqrt(2.0) * np.prod(ells[t + 1:])
        assert np.linalg.norm(lams[t]) <= bound * (1 + 1e-9)


@pytest.mark.parametrize("kind", ["auglag", "targetprop", "reg-targetprop", "proxbp"])
def test_replacement_oracles_stay_finite_on_pendulum(kind):
    from moreaugrad.experiments import PendulumParams, build_pendulum_chain
    from moreaugrad.optimize import make_oracle, run_batch

    p = PendulumParams(horizon=10)
    chain, h = build_pendulum_chain(p)
    spec = make_oracle(kind, "practice", gamma=0.5, alpha=1.0, beta=1.0, kappa=1.0)
    w, rec = run_batch(chain, h, p.x0, chain.zero_params(), spec, 10)
    assert np.all(np.isfinite(w.flat()))
    assert not rec.diverged
    assert np.all(np.isfinite(rec.train_losses))
