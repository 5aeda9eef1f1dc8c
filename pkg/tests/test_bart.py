import numpy as np
import pytest
from scipy.special import ndtr
from scipy.stats import invgamma

from lrtwostage.bart import (
    BartChain,
    BartHyper,
    DegenerateResponseError,
    acceptance_rate,
    calibrate_lambda,
    cut_grid,
    fit_bart,
    ols_sigma,
    posterior_predictive_pvalue,
    predict_posterior,
    prior_tree_sizes,
    vip,
)

SMALL = BartHyper(m=50, n_burn=100, n_keep=50)
PRIOR_PROBS = (0.05, 0.55, 0.28, 0.09, 0.03)


@pytest.fixture(scope="module")
def linear_data():
    rng = np.random.default_rng(0)
    X = rng.uniform(size=(500, 10))
    y = 3 * X[:, 0] + rng.normal(0, 0.1, 500)
    return X, y


@pytest.fixture(scope="module")
def linear_chain(linear_data):
    X, y = linear_data
    return fit_bart(X, y, "continuous", seed=1)


@pytest.fixture(scope="module")
def binary_fit():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(300, 4))
    y = (rng.random(300) < ndtr(X[:, 0])).astype(float)
    return X, y, fit_bart(X, y, "binary", SMALL, seed=3)


def test_hyper_validation():
    for kw in (dict(m=0), dict(alpha=1.0), dict(beta=-1), dict(k=0), dict(nu=0), dict(q=1.0)):
        with pytest.raises(ValueError):
            BartHyper(**kw)
    with pytest.raises(ValueError):
        BartHyper.from_dict({"trees": 5})


def test_constant_response():
    X = np.random.default_rng(0).normal(size=(30, 2))
    with pytest.raises(DegenerateResponseError, match="degenerate response"):
        fit_bart(X, np.ones(30), "continuous", SMALL)


def test_input_checks():
    X = np.random.default_rng(0).normal(size=(30, 2))
    y = X[:, 0].copy()
    with pytest.raises(ValueError):
        fit_bart(X[:10], y[:10], "continuous", SMALL)
    y[3] = np.nan
    with pytest.raises(ValueError):
        fit_bart(X, y, "continuous", SMALL)
    with pytest.raises(ValueError):
        fit_bart(X, np.r_[np.zeros(15), 2 * np.ones(15)], "binary", SMALL)


def test_cut_grid_within_range():
    rng = np.random.default_rng(0)
    X = np.column_stack([rng.normal(size=400), rng.integers(0, 3, 400), np.ones(400)])
    cuts, n = cut_grid(X, 100)
    assert n[0] <= 100 and n[1] == 2 and n[2] == 0
    np.testing.assert_allclose(cuts[1, :2], [0.5, 1.5])
    for v in range(2):
        c = cuts[v, :n[v]]
        assert np.all(np.diff(c) > 0)
        assert c.min() >= X[:, v].min() and c.max() < X[:, v].max()


def test_lambda_calibration_quantile(linear_data):
    X, y = linear_data
    yt = (y - y.min()) / (y.max() - y.min()) - 0.5
    s = ols_sigma(X, yt)
    lam = calibrate_lambda(s, 3.0, 0.9)
    # P(sigma < s) = P(sigma^2 < s^2) under InvGamma(nu/2, scale=nu*lam/2)
    assert invgamma.cdf(s**2, 1.5, scale=1.5 * lam) == pytest.approx(0.90, abs=1e-10)


def test_leaf_prior_scale(linear_chain, binary_fit):
    h = linear_chain.hyper
    assert h.k * np.sqrt(h.m) * linear_chain.sigma_mu == pytest.approx(0.5)
    b = binary_fit[2]
    assert b.hyper.k * np.sqrt(b.hyper.m) * b.sigma_mu == pytest.approx(3.0)


def test_linear_rmse(linear_chain):
    Xt = np.random.default_rng(9).uniform(size=(1000, 10))
    pred = predict_posterior(linear_chain, Xt).posterior_mean()
    assert np.sqrt(np.mean((pred - 3 * Xt[:, 0]) ** 2)) < 0.5


def test_chain_shapes_and_sigma(linear_chain):
    assert linear_chain.n_keep == 100
    assert linear_chain.roots.shape == (100, 200)
    assert np.all(linear_chain.sigma > 0)


def test_acceptance_rate_in_range(linear_chain):
    assert 0.05 < acceptance_rate(linear_chain) < 0.95


def test_prediction_is_sum_of_leaves(linear_chain, linear_data):
    X, _ = linear_data
    x = X[7]
    for k in (0, 50, 99):
        f = sum(linear_chain.tree(k, j).predict_one(x) for j in range(linear_chain.hyper.m))
        assert linear_chain.predict_latent(X[7:8])[k, 0] == pytest.approx(f, abs=1e-12)
        pred = predict_posterior(linear_chain, X[7:8]).values[k, 0]
        assert pred == pytest.approx(linear_chain.latent_to_scale(np.array([f]))[0], abs=1e-12)


def test_trees_are_binary(linear_chain):
    for j in range(0, 200, 17):
        t = linear_chain.tree(5, j)
        internal = t.feat >= 0
        assert np.all(t.left[internal] >= 0) and np.all(t.right[internal] >= 0)
        assert np.all(t.left[~internal] == -1)
        assert t.n_leaves == internal.sum() + 1


def test_posterior_mean_identity(binary_fit):
    X, _, chain = binary_fit
    sd = predict_posterior(chain, X[:40])
    np.testing.assert_allclose(sd.posterior_mean(), sd.values.mean(axis=0), atol=1e-12)
    assert sd.scale == "probability"
    assert np.all((sd.values > 0) & (sd.values < 1))
    assert sd.K == chain.hyper.n_keep


def test_predict_column_mismatch(binary_fit):
    with pytest.raises(ValueError):
        predict_posterior(binary_fit[2], np.zeros((3, 5)))


def test_reproducible():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(60, 3))
    y = X[:, 0] + rng.normal(size=60)
    a = predict_posterior(fit_bart(X, y, "continuous", SMALL, seed=4), X).values
    b = predict_posterior(fit_bart(X, y, "continuous", SMALL, seed=4), X).values
    c = predict_posterior(fit_bart(X, y, "continuous", SMALL, seed=5), X).values
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_json_round_trip(binary_fit, tmp_path):
    X, _, chain = binary_fit
    chain.to_json(tmp_path / "c.json")
    back = BartChain.from_json(tmp_path / "c.json")
    np.testing.assert_array_equal(predict_posterior(back, X).values,
                                  predict_posterior(chain, X).values)
    np.testing.assert_array_equal(back.split_counts, chain.split_counts)


def test_vip_normalised_and_signal(linear_data):
    X, y = linear_data
    chain = fit_bart(X, y, "continuous", BartHyper(m=20), seed=2)
    v = vip(chain)
    np.testing.assert_allclose(v.per_draw.sum(axis=1), 1.0, atol=1e-12)
    assert np.argmax(v.mean) == 0
    assert np.all(v.lower <= v.mean) and np.all(v.mean <= v.upper)


def test_vip_zero_split_draw_is_uniform(binary_fit):
    chain = binary_fit[2]
    import copy
    c = copy.copy(chain)
    c.split_counts = chain.split_counts.copy()
    c.split_counts[0] = 0
    np.testing.assert_allclose(vip(c).per_draw[0], 1.0 / chain.p)


def test_ppc_range_and_errors(binary_fit, linear_chain):
    X, y, chain = binary_fit
    p = posterior_predictive_pvalue(chain, y, 200, seed=0)
    assert 0.05 <= p <= 0.95
    with pytest.raises(ValueError):
        posterior_predictive_pvalue(linear_chain, np.zeros(500), 10)


def test_ppc_symmetry_oracle(binary_fit):
    X, y, chain = binary_fit
    import copy
    c = copy.copy(chain)
    c.train_draws = np.full_like(chain.train_draws, y.mean())
    assert posterior_predictive_pvalue(c, y, 200, seed=1) == pytest.approx(0.5, abs=0.1)


def test_ppc_observed_zero(binary_fit):
    X, y, chain = binary_fit
    assert posterior_predictive_pvalue(chain, np.zeros_like(y), 50, seed=0) == 1.0


@pytest.mark.parametrize("method", ["direct", "mcmc"])
def test_prior_tree_sizes(method):
    sizes = prior_tree_sizes(BartHyper(m=200, n_burn=100, n_keep=100), seed=0, method=method)
    assert sizes.size >= 10_000
    freq = np.bincount(sizes, minlength=6)[1:6] / sizes.size
    np.testing.assert_allclose(freq, PRIOR_PROBS, atol=0.02)
