import math

import numpy as np
import pytest

from moreaugrad.chain import Chain, Dense, forward, schedule
from moreaugrad.checks import tanh_chain
from moreaugrad.data import synth_blobs
from moreaugrad.experiments import build_mlp
from moreaugrad.numerics import make_rng
from moreaugrad.objectives import Constant, SquaredDistance
from moreaugrad.oracles import AugLagConfig
from moreaugrad.optimize import (CSV_COLUMNS, GridSearchError, OracleSpec, RunRecord, al_mgd,
                                 approx_gradient_descent, check_approx_gd_bound, gradient_descent, grid_search,
                                 make_head, make_oracle, minibatch_loop, moreau_gd, record_summary, run_batch)


def regression_problem(seed=0):
    # h(W^T x + b) with h = (1/2)||. - y||^2: a convex quadratic in the parameters.
    rng = make_rng(seed)
    chain = Chain([Dense(3, 2)])
    return chain, SquaredDistance(rng.normal(size=2)), rng.normal(size=3), chain.init_params(rng)


# ------------------------------------------------------------------ RunRecord


def test_run_record_csv_format():
    rec = RunRecord()
    rec.add(0, 1.5, seconds=0.25)
    rec.add(1, 0.5, test_loss=0.75, test_acc=0.5, grad_norm=2.0, seconds=0.5)
    text = rec.to_csv()
    lines = text.splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS) == "iter,train_loss,test_loss,test_acc,grad_norm,seconds"
    assert lines[1] == "0,1.5,,,,"
    assert lines[2] == "1,0.5,0.75,0.5,2.0,"
    assert rec.to_csv(include_seconds=True).splitlines()[2].endswith(",0.5")


def test_run_record_csv_round_trips_floats(tmp_path):
    rec = RunRecord()
    v = 0.1 + 0.2
    rec.add(0, v)
    rec.to_csv(tmp_path / "c.csv")
    assert float((tmp_path / "c.csv").read_text().splitlines()[1].split(",")[1]) == v


def test_best_so_far_and_area():
    rec = RunRecord()
    for k, v in enumerate([4.0, 2.0, 3.0, 1.0]):
        rec.add(k, v)
    np.testing.assert_array_equal(rec.best_so_far(), [4.0, 2.0, 2.0, 1.0])
    assert rec.area() == pytest.approx(3.0 + 2.0 + 1.5)
    assert rec.area(budget=1) == pytest.approx(3.0)
    rec.add(4, None)
    assert rec.best_so_far()[-1] == 1.0


def test_area_of_non_finite_curve_is_infinite():
    rec = RunRecord()
    rec.add(0, None)
    assert rec.area() == math.inf


def test_record_summary_fields():
    rec = RunRecord()
    rec.add(0, 2.0)
    rec.add(1, 1.0, grad_norm=0.5)
    s = record_summary(rec)
    assert s["initial_train_loss"] == 2.0 and s["best_train_loss"] == 1.0 and s["iterations"] == 1
    assert record_summary(RunRecord())["diverged"] is False


# ----------------------------------------------------------------- batch loops


def test_gradient_descent_converges_on_quadratic():
    chain, h, x0, w0 = regression_problem()
    _, rec = gradient_descent(chain, h, x0, w0, step=0.1, iters=300)
    assert not rec.diverged
    assert rec.final() <= 1e-10
    assert np.all(np.diff(rec.train_losses) <= 1e-15)


def test_zero_step_leaves_parameters_unchanged():
    chain, h, x0, w0 = regression_problem(1)
    w, rec = gradient_descent(chain, h, x0, w0, step=0.0, iters=5)
    assert w == w0
    assert np.all(rec.train_losses == rec.train_losses[0])


def test_zero_iterations_records_initial_value_only():
    chain, h, x0, w0 = regression_problem(2)
    w, rec = gradient_descent(chain, h, x0, w0, step=0.1, iters=0)
    assert w == w0 and len(rec.rows) == 1
    assert rec.rows[0]["train_loss"] == h.value(forward(chain, w0, x0)[-1])


def test_runs_are_deterministic():
    rng = make_rng(3)
    chain, params, x0, h = tanh_chain(rng, 3)
    gammas, alphas = schedule(0.5, 0.5, 3)
    a = moreau_gd(chain, h, x0, params, gammas, alphas, 10)
    b = moreau_gd(chain, h, x0, params, gammas, alphas, 10)
    assert a[0] == b[0]
    assert a[1].to_csv() == b[1].to_csv()


def test_large_step_flags_divergence():
    chain, h, x0, w0 = regression_problem(4)
    _, rec = gradient_descent(chain, h, x0, w0, step=50.0, iters=100)
    assert rec.diverged and "diverged" in rec.message
    assert rec.rows[-1]["train_loss"] is None or rec.rows[-1]["train_loss"] > 1e6 * rec.rows[0]["train_loss"]


def test_auglag_with_huge_beta_is_flagged_diverged():
    # Affine layers: nothing saturates, so an oversized multiplier step blows the loss up.
    _, h, x0, _ = regression_problem(5)
    chain = Chain([Dense(3, 3), Dense(3, 2)])
    cfg = AugLagConfig.from_base(2, 1.0, 1.0, 1e8, 0.0)
    _, rec = al_mgd(chain, h, x0, chain.init_params(make_rng(0)), cfg, 20)
    assert rec.diverged and rec.message.startswith("iteration 1")


def test_constant_objective_never_moves():
    rng = make_rng(6)
    chain, params, x0, _ = tanh_chain(rng, 2)
    w, rec = run_batch(chain, Constant(1.0, chain.output_dim), x0, params,
                       make_oracle("moreau", gamma=0.5, alpha=1.0), 3)
    assert w == params and not rec.diverged


def test_negative_iteration_budget_rejected():
    chain, h, x0, w0 = regression_problem()
    with pytest.raises(ValueError):
        gradient_descent(chain, h, x0, w0, 0.1, -1)


def test_run_collects_solver_statistics():
    rng = make_rng(7)
    chain, params, x0, h = tanh_chain(rng, 2)
    _, rec = run_batch(chain, h, x0, params, make_oracle("moreau", "practice", gamma=0.5, alpha=1.0), 4)
    assert rec.solver["solves"] == 4 * (1 + 2 + 1)


# -------------------------------------------------------------- oracle specs


@pytest.mark.parametrize("kind", ["backprop", "moreau", "auglag", "reg-targetprop", "proxbp"])
def test_every_oracle_decreases_a_regression_loss(kind):
    chain, h, x0, w0 = regression_problem(8)
    spec = make_oracle(kind, step=0.1, gamma=0.5, alpha=0.2, beta=2.0, kappa=0.5)
    _, rec = run_batch(chain, h, x0, w0, spec, 30)
    assert not rec.diverged
    assert rec.final() < rec.rows[0]["train_loss"]


def test_target_prop_spec_requires_kappa():
    with pytest.raises(ValueError):
        OracleSpec("targetprop", kappa=0.0)
    assert make_oracle("targetprop", kappa=1.0).mode.value == "replacement"


def test_oracle_spec_validation():
    with pytest.raises(ValueError):
        OracleSpec("sgd")
    with pytest.raises(ValueError):
        OracleSpec("moreau", gamma=32.0)
    spec = OracleSpec("auglag", gamma=32.0, alpha=8.0, beta=0.1, geometric=False)
    assert spec.schedules(3) == ((32.0,) * 3, (8.0,) * 3)
    with pytest.raises(ValueError):
        make_oracle("moreau", solver="fast")


# ------------------------------------------------------------------ minibatch


def test_minibatch_full_batch_equals_batch_gradient_descent():
    data = synth_blobs(2, 5, 3, seed=0)
    chain = Chain([Dense(3, 2)])
    w0 = chain.init_params(make_rng(1))
    spec = make_oracle("backprop", step=0.5)
    w_mb, rec = minibatch_loop(data, chain, spec, epochs=3, batch_size=data.n, seed=0, w0=w0)
    # Full-batch epochs visit every sample once; ordering changes nothing for the mean loss.
    h = make_head("squared", data.labels, 2)
    w_gd, _ = gradient_descent(chain, h, data.inputs.reshape(-1), w0, 0.5, 3)
    assert (w_mb - w_gd).norm() <= 1e-12
    assert len(rec.rows) == 4


def test_minibatch_validates_shapes():
    data = synth_blobs(2, 5, 3, seed=0)
    with pytest.raises(ValueError):
        minibatch_loop(data, Chain([Dense(2, 2)]), make_oracle("backprop"), 1, 2, 0)
    with pytest.raises(ValueError):
        minibatch_loop(data, Chain([Dense(3, 2)]), make_oracle("backprop"), 1, 0, 0)


def test_minibatch_records_test_metrics():
    data = synth_blobs(3, 20, 2, seed=1, sigma=0.3).split(0.25)
    chain = build_mlp(2, [8], 3, "tanh")
    _, rec = minibatch_loop(data, chain, make_oracle("backprop", step=1.0), 5, 10, seed=0)
    assert rec.rows[-1]["test_acc"] is not None
    assert rec.rows[-1]["train_acc"] >= 0.9


def test_make_head_losses():
    h = make_head("squared", [0, 1], 2)
    assert h.value(np.array([1.0, 0.0, 0.0, 1.0])) == 0.0
    assert make_head("logistic", [0, 1], 2).value(np.zeros(4)) == pytest.approx(math.log(2.0))
    with pytest.raises(ValueError):
        make_head("hinge", [0], 2)


# ---------------------------------------------------------------- grid search


def test_grid_search_single_candidate():
    chain, h, x0, w0 = regression_problem()
    res = grid_search([{"step": 0.1}], lambda c: gradient_descent(chain, h, x0, w0, c["step"], 10)[1], 10)
    assert res.best == {"step": 0.1}
    assert len(res.table) == 1 and not res.table[0]["diverged"]


def test_grid_search_picks_largest_stable_step_on_quadratic():
    chain, h, x0, w0 = regression_problem(9)
    L = np.linalg.norm(np.append(x0, 1.0)) ** 2  # curvature of the loss in each output column
    grid = [{"step": 2.0 ** k} for k in range(-7, 5)]
    res = grid_search(grid, lambda c: gradient_descent(chain, h, x0, w0, c["step"], 50)[1], 50)
    # Steps below 2 / L contract; the largest of them has the smallest area.
    assert res.best["step"] == max(c["step"] for c in grid if c["step"] < 2.0 / L)
    assert any(row["diverged"] for row in res.table)


def test_grid_search_all_diverged_raises():
    chain, h, x0, w0 = regression_problem()
    with pytest.raises(GridSearchError) as err:
        grid_search([{"step": 100.0}], lambda c: gradient_descent(chain, h, x0, w0, c["step"], 50)[1], 50)
    assert len(err.value.records) == 1
    with pytest.raises(ValueError):
        grid_search([], lambda c: None, 1)


# ----------------------------------------------------- approximate GD bound


def test_approx_gd_bound_first_step_formula():
    rep = check_approx_gd_bound([2.0, 1.0], f0=3.0, delta=0.5, eps=0.1, f_star=1.0)
    assert rep.bound[0] == pytest.approx(8.0 / 2.5 * 2.0 + 0.08)
    np.testing.assert_array_equal(rep.min_sq_grad, [4.0, 1.0])
    with pytest.raises(ValueError):
        check_approx_gd_bound([1.0], 1.0, 1.0, 0.0, 0.0, L=1.0)


def test_approx_gd_bound_holds_on_random_quadratics():
    for seed in range(20):
        rng = make_rng(seed)
        B = rng.normal(size=(4, 4))
        Q = B.T @ B + 0.1 * np.eye(4)
        L = float(np.linalg.eigvalsh(Q)[-1])
        delta, eps = 1.0 / (2.0 * L), 0.1
        x0 = rng.normal(size=4) * 3
        _, norms = approx_gradient_descent(lambda x: Q @ x, x0, delta, 1000, eps, rng)
        rep = check_approx_gd_bound(norms, 0.5 * x0 @ Q @ x0, delta, eps, 0.0, L)
        assert rep.satisfied, (seed, rep.worst_ratio)
