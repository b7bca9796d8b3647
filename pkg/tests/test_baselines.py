"""Tests for the competing estimators.

The GMM closed form, the Newey-West values, and the MA(1) recursion are
checked against hand arithmetic. The smoothed search likelihood is checked
against brute-force enumeration on a discretized two-option instance, and
against the combinatorial factor count at the lambda = 0 limit where every
logistic factor equals one half.
"""

import math

import numpy as np
import pytest
from scipy import optimize

from nne.ar1 import ar1_moments, ar1_population_moments, simulate_ar1
from nne.baselines import (
    GmmSpec,
    SmleSpec,
    beta_from_lag1_moment,
    gmm_ar1,
    indirect_inference_ar1,
    lasso_poly_train,
    ma1_ls_alpha,
    ma1_ls_residuals,
    ma1_ls_sse,
    moment_contributions,
    newey_west,
    polynomial_features,
    polynomial_powers,
    smle_search,
    smm_ar1,
    smm_simulated_moments,
    smoothed_loglik,
)
from nne.core import RngStream, TrainingSet
from nne.search import (
    DEFAULT_TRUE_PARAMS,
    SEARCH_SPACE,
    ConsumerGrid,
    SearchParams,
    draw_epsilons,
    generate_covariates,
    simulate_from_epsilons,
    simulate_search,
    _as_arrays,
)


# ---------------------------------------------------------------------------
# GMM / SMM on the AR(1)


def test_lag1_moment_inversion_hand_values():
    # beta/(1-beta^2) at beta=0.6 is 0.6/0.64 = 0.9375
    assert beta_from_lag1_moment(0.9375) == pytest.approx(0.6, abs=1e-12)
    assert beta_from_lag1_moment(0.0) == 0.0
    assert beta_from_lag1_moment(-0.3) == 0.0
    assert beta_from_lag1_moment(1e4) == pytest.approx(0.999, abs=1e-12)


@pytest.mark.parametrize("seed", [0, 7, 42])
def test_gmm_single_moment_matches_numeric_minimization(seed):
    y = simulate_ar1(0.6, 100, RngStream(seed, ("gmm_series",)))
    m = ar1_moments(y, 1)[0]
    closed = gmm_ar1(y, GmmSpec(1))

    res = optimize.minimize_scalar(
        lambda b: (ar1_population_moments(b, 1)[0] - m) ** 2,
        bounds=(0.0, 0.999),
        method="bounded",
        options={"xatol": 1e-12},
    )
    assert abs(closed - res.x) <= 1e-8


def test_gmm_spec_validation():
    with pytest.raises(ValueError):
        GmmSpec(7)
    with pytest.raises(ValueError):
        GmmSpec(1, weighting="optimal")
    with pytest.raises(ValueError):
        GmmSpec(1, R=0)
    y = simulate_ar1(0.5, 60, RngStream(0, ("gmm_val",)))
    with pytest.raises(ValueError, match="smm_ar1"):
        gmm_ar1(y, GmmSpec(1, R=100))


def test_newey_west_hand_values():
    # single column (1, 2, 3), one lag: demeaned (-1, 0, 1),
    # Gamma0 = 2/3, Gamma1 = 0, weight 1/2 -> S = 2/3
    s = newey_west(np.array([[1.0], [2.0], [3.0]]), lags=1)
    assert s.shape == (1, 1)
    assert s[0, 0] == pytest.approx(2.0 / 3.0, abs=1e-12)

    # alternating (1, -1, 1, -1): Gamma0 = 1, Gamma1 = -3/4,
    # S = 1 + 0.5 * 2 * (-3/4) = 1/4
    s = newey_west(np.array([[1.0], [-1.0], [1.0], [-1.0]]), lags=1)
    assert s[0, 0] == pytest.approx(0.25, abs=1e-12)


def test_newey_west_psd_on_every_draw():
    for seed in range(50):
        y = simulate_ar1(0.6, 100, RngStream(seed, ("hac",)))
        contribs = moment_contributions(y, 6)
        assert contribs.shape == (97, 9)  # aligned on the lag-3 common range
        s = newey_west(contribs, lags=5)
        assert np.allclose(s, s.T, atol=0.0)
        assert np.linalg.eigvalsh(s).min() >= -1e-10


@pytest.mark.parametrize("spec_id", [2, 3, 4, 5, 6])
def test_gmm_two_step_runs_inside_bounds(spec_id):
    y = simulate_ar1(0.6, 100, RngStream(3, ("gmm_rows",)))
    est = gmm_ar1(y, GmmSpec(spec_id))
    est_id = gmm_ar1(y, GmmSpec(spec_id, weighting="identity"))
    for value in (est, est_id):
        assert 0.0 <= value <= 0.999
    assert abs(est - est_id) < 0.25


def test_smm_common_random_numbers():
    y = simulate_ar1(0.6, 100, RngStream(11, ("smm_data",)))
    spec = GmmSpec(1, weighting="identity")

    a = smm_ar1(y, spec, R=200, rng=RngStream(5, ("smm",)))
    b = smm_ar1(y, spec, R=200, rng=RngStream(5, ("smm",)))
    assert a == b

    # same seed, same beta -> identical simulated moments; and the shocks do
    # not depend on beta, so re-drawing with the same stream is reproducible
    g1 = smm_simulated_moments(0.7, 1, n=100, R=50, rng=RngStream(9, ("g",)))
    g2 = smm_simulated_moments(0.7, 1, n=100, R=50, rng=RngStream(9, ("g",)))
    g3 = smm_simulated_moments(0.3, 1, n=100, R=50, rng=RngStream(9, ("g",)))
    assert np.array_equal(g1, g2)
    assert not np.array_equal(g1, g3)


def test_smm_large_r_close_to_gmm():
    y = simulate_ar1(0.6, 100, RngStream(11, ("smm_data",)))
    spec = GmmSpec(1, weighting="identity")
    est_smm = smm_ar1(y, spec, R=10_000, rng=RngStream(1, ("smm_big",)))
    est_gmm = gmm_ar1(y, GmmSpec(1))
    assert abs(est_smm - est_gmm) <= 0.01


def test_smm_r1_noisier_than_large_r():
    y = simulate_ar1(0.6, 100, RngStream(21, ("smm_noise",)))
    spec = GmmSpec(1, weighting="identity")
    small = [smm_ar1(y, spec, R=1, rng=RngStream(s, ("r1",))) for s in range(25)]
    big = [smm_ar1(y, spec, R=1000, rng=RngStream(s, ("rbig",))) for s in range(25)]
    assert np.std(small) > np.std(big)


# ---------------------------------------------------------------------------
# Indirect inference


def test_ma1_ac_route_bit_identical_to_smm():
    y = simulate_ar1(0.6, 100, RngStream(2, ("ii_data",)))
    via_ii = indirect_inference_ar1(y, "ma1_ac", R=77, rng=RngStream(13, ("ii",)))
    via_smm = smm_ar1(y, GmmSpec(1, weighting="identity"), R=77, rng=RngStream(13, ("ii",)))
    assert via_ii == via_smm

    with pytest.raises(ValueError):
        indirect_inference_ar1(y, "ma2", R=10, rng=RngStream(0, ("x",)))


def test_ma1_ls_recursion_hand_example():
    eps = ma1_ls_residuals(np.array([1.0, 0.5]), 0.5)
    assert np.array_equal(eps, np.array([1.0, 0.0]))
    assert ma1_ls_sse(np.array([1.0, 0.5]), 0.5) == 1.0


def test_ma1_ls_alpha_recovers_ma_coefficient():
    gen = RngStream(6, ("ma1",)).generator()
    e = gen.standard_normal(5001)
    y = e[1:] + 0.5 * e[:-1]
    assert abs(ma1_ls_alpha(y) - 0.5) < 0.05

    # pooled panel fit of identical rows minimizes the same function
    # (agreement is limited by the optimizer's xatol, not arithmetic)
    panel = np.vstack([y, y, y])
    assert ma1_ls_alpha(panel) == pytest.approx(ma1_ls_alpha(y), abs=1e-6)


def test_ma1_ls_route_centered_at_truth():
    # Monte Carlo oracle: same-length simulation inside the estimator washes
    # out the auxiliary-statistic bias, so the fitted betas center on 0.6.
    root = RngStream(2026, ("ii_mc",))
    estimates = []
    for rep in range(200):
        y = simulate_ar1(0.6, 100, root.substream(rep, "data"))
        estimates.append(
            indirect_inference_ar1(y, "ma1_ls", R=50, rng=root.substream(rep, "fit"))
        )
    estimates = np.array(estimates)
    mc_se = estimates.std(ddof=1) / math.sqrt(len(estimates))
    assert abs(estimates.mean() - 0.6) <= 2.0 * mc_se


# ---------------------------------------------------------------------------
# Smoothed search likelihood


def _search_dataset(seed, n, J, params=DEFAULT_TRUE_PARAMS):
    stream = RngStream(seed, ("smle_data",))
    grid = generate_covariates(n, J, stream.substream("grid"))
    outcomes = simulate_search(params, grid, stream.substream("eps"))
    return grid, outcomes


def test_smoothed_loglik_lambda_zero_counts_inequalities():
    grid, outcomes = _search_dataset(4, 40, 6)
    arrays = _as_arrays(outcomes, grid)
    k = arrays.n_search
    n_unsearched = (grid.valid & ~arrays.searched).sum(axis=1)
    # per consumer: (k-1) consecutive ordering + (k-1) continuation
    # + 1 purchase, plus one ordering tail when any option is unsearched
    # and one stopping factor per unsearched option
    count = (2 * k - 1 + (n_unsearched > 0) + n_unsearched).sum()
    expected = count * math.log(0.5)

    got = smoothed_loglik(
        DEFAULT_TRUE_PARAMS, grid, outcomes, lam=0.0, R=7, rng=RngStream(3, ("z",))
    )
    assert got == pytest.approx(expected, rel=1e-12)


def test_smoothed_loglik_deterministic_given_seed():
    grid, outcomes = _search_dataset(5, 60, 8)
    args = (DEFAULT_TRUE_PARAMS, grid, outcomes)
    a = smoothed_loglik(*args, lam=7.0, R=20, rng=RngStream(8, ("ll",)))
    b = smoothed_loglik(*args, lam=7.0, R=20, rng=RngStream(8, ("ll",)))
    c = smoothed_loglik(*args, lam=7.0, R=20, rng=RngStream(9, ("ll",)))
    assert a == b
    assert a != c
    assert np.isfinite(a)


def test_smoothed_loglik_consumer_order_invariant():
    grid, outcomes = _search_dataset(6, 50, 7)
    value = smoothed_loglik(
        DEFAULT_TRUE_PARAMS, grid, outcomes, lam=7.0, R=16, rng=RngStream(1, ("p",))
    )

    perm = RngStream(2, ("perm",)).generator().permutation(grid.n)
    permuted_grid = ConsumerGrid(
        stars=grid.stars[perm],
        review=grid.review[perm],
        location=grid.location[perm],
        chain=grid.chain[perm],
        promotion=grid.promotion[perm],
        log_price=grid.log_price[perm],
        rank=grid.rank[perm],
        valid=grid.valid[perm],
    )
    permuted_outcomes = [outcomes[i] for i in perm]
    value_perm = smoothed_loglik(
        DEFAULT_TRUE_PARAMS,
        permuted_grid,
        permuted_outcomes,
        lam=7.0,
        R=16,
        rng=RngStream(1, ("p",)),
    )
    assert value_perm == value


def test_smoothed_loglik_truth_dominates_distant_theta():
    far = SearchParams(
        beta=(-0.4, 0.3, -0.3, 0.3, -0.3, 0.3), eta=4.5, delta0=-2.2, delta1=-0.2
    )
    wins = 0
    for seed in range(100):
        grid, outcomes = _search_dataset(100 + seed, 1000, 30)
        eval_rng = RngStream(seed, ("ll_eval",))
        at_truth = smoothed_loglik(
            DEFAULT_TRUE_PARAMS, grid, outcomes, lam=7.0, R=50, rng=eval_rng
        )
        at_far = smoothed_loglik(far, grid, outcomes, lam=7.0, R=50, rng=eval_rng)
        wins += at_truth > at_far
    assert wins >= 95


def test_smoothed_loglik_rejects_bad_inputs():
    grid, outcomes = _search_dataset(7, 10, 4)
    with pytest.raises(ValueError):
        smoothed_loglik(DEFAULT_TRUE_PARAMS, grid, outcomes, lam=-1.0, R=5, rng=RngStream(0, ("x",)))
    with pytest.raises(ValueError):
        smoothed_loglik(DEFAULT_TRUE_PARAMS, grid, outcomes, lam=1.0, R=0, rng=RngStream(0, ("x",)))
    with pytest.raises(ValueError):
        smoothed_loglik(DEFAULT_TRUE_PARAMS, grid, outcomes, lam=1.0, R=5, rng=None)


def test_large_lambda_matches_enumeration_on_two_option_instance():
    # Discretize each epsilon to four support points. With every combination
    # injected as a draw, the lambda -> inf likelihood of an outcome must equal
    # the share of combinations whose simulated walk reproduces it exactly.
    params = SearchParams(
        beta=DEFAULT_TRUE_PARAMS.beta, eta=0.2, delta0=-1.0, delta1=0.1
    )
    grid = generate_covariates(1, 2, RngStream(12, ("enum_grid",)))
    support = np.array([-1.37, -0.42, 0.31, 1.18])

    outcomes_seen = {}
    for a in support:
        for b in support:
            for c in support:
                out = simulate_from_epsilons(
                    params, grid, np.array([a]), np.array([[b, c]])
                )[0]
                bought_at = np.flatnonzero(out.bought)
                key = (out.search_order, int(bought_at[0]) if bought_at.size else -1)
                entry = outcomes_seen.setdefault(key, [out, 0])
                entry[1] += 1

    assert len(outcomes_seen) >= 3  # parameters produce a non-degenerate instance
    total = sum(count for _, count in outcomes_seen.values())
    assert total == 64

    e0 = np.repeat(support, 16)
    es = np.column_stack(
        [np.tile(np.repeat(support, 4), 4), np.tile(support, 16)]
    )
    for (order, bought), (outcome, count) in outcomes_seen.items():
        loglik = smoothed_loglik(
            params, grid, [outcome], lam=1e6, R=64, draws=(e0, es)
        )
        assert math.exp(loglik) == pytest.approx(count / 64.0, abs=1e-3)


# ---------------------------------------------------------------------------
# SMLE search driver


def test_smle_spec_defaults_and_validation():
    spec = SmleSpec(lam=7.0, R=50)
    assert spec.budget == 500
    assert np.array_equal(spec.start_vector(), SEARCH_SPACE.center())

    custom = SmleSpec(lam=3.0, R=10, start=tuple(DEFAULT_TRUE_PARAMS.to_vector()))
    assert np.array_equal(custom.start_vector(), DEFAULT_TRUE_PARAMS.to_vector())

    with pytest.raises(ValueError):
        SmleSpec(lam=0.0, R=50)
    with pytest.raises(ValueError):
        SmleSpec(lam=7.0, R=0)
    with pytest.raises(ValueError):
        SmleSpec(lam=7.0, R=50, start=(1.0, 2.0))


def test_smle_search_smoke_and_determinism():
    grid, outcomes = _search_dataset(30, 120, 5)
    spec = SmleSpec(lam=7.0, R=8, budget=60)

    result = smle_search(grid, outcomes, spec, RngStream(4, ("smle",)))
    assert result.theta.shape == (SEARCH_SPACE.dim,)
    assert np.all(np.isfinite(result.theta))
    assert result.se.shape == (SEARCH_SPACE.dim,)
    assert np.all(result.se > 0.0)
    assert result.sim_burden == spec.R * result.n_evals
    assert result.n_evals >= spec.budget  # simplex spends its budget, then SEs
    assert result.converged is False  # 60 evaluations cannot converge in 9-d

    # the simplex never returns a point worse than its start
    start_ll = smoothed_loglik(
        spec.start_vector(), grid, outcomes, lam=7.0, R=8, rng=RngStream(4, ("smle",))
    )
    assert result.loglik >= start_ll

    again = smle_search(grid, outcomes, spec, RngStream(4, ("smle",)))
    assert np.array_equal(again.theta, result.theta)
    assert np.array_equal(again.se, result.se)


# ---------------------------------------------------------------------------
# Lasso polynomial learner


def test_polynomial_feature_counts_and_values():
    assert len(polynomial_powers(10, 2)) == 65
    assert len(polynomial_powers(10, 3)) == 285

    powers = polynomial_powers(2, 2)
    feats = polynomial_features(np.array([[2.0, 3.0]]), powers)
    assert np.array_equal(feats[0], np.array([2.0, 3.0, 4.0, 6.0, 9.0]))


def _synthetic_examples(L, q, weight, noise, seed, nonlinear=False):
    gen = RngStream(seed, ("lasso_data",)).generator()
    m = gen.standard_normal((L, q))
    if nonlinear:
        theta = 2.0 * m[:, 0] ** 2 - m[:, 2] + noise * gen.standard_normal(L)
        theta = theta[:, None]
    else:
        theta = m @ weight + noise * gen.standard_normal((L, weight.shape[1]))
    return TrainingSet(thetas=theta, moments=m, attempts=L)


def test_lasso_zero_penalty_degree_one_matches_ols():
    gen = RngStream(1, ("lasso_w",)).generator()
    weight = gen.standard_normal((6, 2))
    examples = _synthetic_examples(200, 6, weight, 0.1, seed=2)

    model = lasso_poly_train(examples, degree=1, reg_grid=[0.0], rng=RngStream(9, ("l",)))
    tr = model.train_idx
    m_tr = examples.moments[tr]
    t_tr = examples.thetas[tr]

    design = np.column_stack([np.ones(len(tr)), m_tr])
    coef, *_ = np.linalg.lstsq(design, t_tr, rcond=None)
    ols_resid = t_tr - design @ coef
    model_resid = t_tr - model.predict(m_tr)
    for j in range(t_tr.shape[1]):
        assert np.linalg.norm(model_resid[:, j]) == pytest.approx(
            np.linalg.norm(ols_resid[:, j]), abs=1e-8
        )


def test_lasso_large_penalty_collapses_to_train_mean():
    gen = RngStream(3, ("lasso_w2",)).generator()
    weight = gen.standard_normal((4, 1))
    examples = _synthetic_examples(150, 4, weight, 0.05, seed=4)

    model = lasso_poly_train(examples, degree=2, reg_grid=[1e6], rng=RngStream(5, ("l2",)))
    preds = model.predict(examples.moments)
    train_mean = examples.thetas[model.train_idx].mean(axis=0)
    assert np.allclose(preds, train_mean[None, :], atol=1e-9)


def test_lasso_validation_selects_fitting_penalty():
    examples = _synthetic_examples(600, 4, None, 0.01, seed=7, nonlinear=True)
    model = lasso_poly_train(
        examples, degree=2, reg_grid=[1e3, 1.0, 1e-4], rng=RngStream(6, ("l3",))
    )
    assert model.best_reg[0] == pytest.approx(1e-4)

    val = model.val_idx
    resid = examples.thetas[val, 0] - model.predict(examples.moments[val])[:, 0]
    assert np.sqrt((resid**2).mean()) < 0.05

    assert model.val_mse.shape == (1, 3)
    # grid order is preserved in the validation-loss table
    assert model.val_mse[0, 0] >= model.val_mse[0, 2]


def test_lasso_deterministic_given_seed():
    gen = RngStream(8, ("lasso_w3",)).generator()
    weight = gen.standard_normal((5, 2))
    examples = _synthetic_examples(180, 5, weight, 0.1, seed=9)

    a = lasso_poly_train(examples, degree=2, reg_grid=[0.1, 0.01], rng=RngStream(1, ("d",)))
    b = lasso_poly_train(examples, degree=2, reg_grid=[0.1, 0.01], rng=RngStream(1, ("d",)))
    assert np.array_equal(a.coef, b.coef)
    assert np.array_equal(a.intercept, b.intercept)
    assert np.array_equal(a.train_idx, b.train_idx)

    with pytest.raises(ValueError):
        lasso_poly_train(examples, degree=4, reg_grid=[0.1], rng=RngStream(1, ("d",)))


def test_lasso_accepts_tuple_input():
    gen = RngStream(2, ("lasso_w4",)).generator()
    weight = gen.standard_normal((3, 1))
    examples = _synthetic_examples(120, 3, weight, 0.1, seed=3)

    a = lasso_poly_train(examples, degree=1, reg_grid=[0.01], rng=RngStream(4, ("t",)))
    b = lasso_poly_train(
        (examples.thetas, examples.moments), degree=1, reg_grid=[0.01], rng=RngStream(4, ("t",))
    )
    assert np.array_equal(a.coef, b.coef)
