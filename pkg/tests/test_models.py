import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import multivariate_normal

from conftest import central_diff, rel_err
from robustvi.families import VariationalParams, log_density, sample
from robustvi.models import (
    BimodalTarget, EightSchools, EpochBatcher, GaussianTarget, LinearRegression, LinRegSpec,
    LogisticRegression, design_covariance, eight_schools, linreg_generate, linreg_posterior,
    linreg_posterior_moments, load_csv_dataset, load_eight_schools_data, minibatch,
    synthetic_logistic, logistic_model,
)


def small_models():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((6, 3))
    return [
        linreg_generate(LinRegSpec(dim=3, n=6, gamma=0.5, seed=2))[0],
        LogisticRegression(X, (rng.uniform(size=6) < 0.5).astype(float)),
        EightSchools(rng.normal(0, 10, 6), rng.uniform(5, 15, 6), "CP"),
        EightSchools(rng.normal(0, 10, 6), rng.uniform(5, 15, 6), "NCP"),
    ]


def all_models():
    return small_models() + [
        eight_schools("CP"), eight_schools("NCP"),
        GaussianTarget([1.0, -1.0], [[2.0, 0.6], [0.6, 1.0]]), BimodalTarget(),
    ]


def test_design_covariance():
    np.testing.assert_array_equal(design_covariance(3, 0.0), np.eye(3))
    np.testing.assert_allclose(design_covariance(3, 0.9)[0], [1, 0.9, 0.81])
    with pytest.raises(ValueError):
        design_covariance(3, 1.0)
    with pytest.raises(ValueError):
        linreg_generate(LinRegSpec(dim=2, gamma=-0.1))


def test_generated_covariates_law_of_large_numbers():
    _, data = linreg_generate(LinRegSpec(dim=2, n=1000, gamma=0.0, seed=5))
    assert np.max(np.abs(np.cov(data.X.T) - np.eye(2))) < 0.1


def test_posterior_hand_example():
    mean, cov = linreg_posterior_moments(np.array([[1.0]]), np.array([1.0]), 0.4)
    assert cov[0, 0] == pytest.approx(2 / 7)
    assert mean[0] == pytest.approx(5 / 7)


def test_posterior_without_data_is_prior():
    mean, cov = linreg_posterior_moments(np.zeros((0, 3)), np.zeros(0), 0.4)
    np.testing.assert_array_equal(mean, np.zeros(3))
    np.testing.assert_allclose(cov, np.eye(3))


@given(st.integers(1, 6), st.floats(0, 0.95), st.integers(0, 10**6))
@settings(max_examples=25, deadline=None)
def test_conjugacy_identity(dim, gamma, seed):
    spec = LinRegSpec(dim=dim, n=40, gamma=gamma, seed=seed)
    model, data = linreg_generate(spec)
    mean, cov = linreg_posterior(spec, data)
    thetas = np.random.default_rng(seed).standard_normal((10, dim))
    gap = model.log_joint(thetas) - multivariate_normal(mean, cov).logpdf(thetas)
    assert np.ptp(gap) < 1e-8
    assert gap[0] == pytest.approx(model.log_evidence(), abs=1e-8)


def test_kl_at_exact_posterior_is_zero():
    model, _ = linreg_generate(LinRegSpec(dim=4, gamma=0.9, seed=1))
    p = VariationalParams.from_moments("full_rank", *model.analytic_moments)
    theta = sample(p, np.random.default_rng(0).standard_normal((4000, 4)))
    lw = model.log_joint(theta) - log_density(p, theta) - model.log_evidence()
    assert np.max(np.abs(lw)) < 1e-7


def test_logistic_examples():
    m = LogisticRegression(np.array([[1.0], [2.0]]), np.array([1.0, 0.0]))
    np.testing.assert_allclose(m._log_lik_terms(np.zeros((1, 1)), np.arange(2)), -np.log(2) * np.ones((1, 2)))
    one = LogisticRegression(np.array([[1.0]]), np.array([1.0]))
    assert one.grad_log_lik(np.zeros(1))[0] == pytest.approx(0.5)
    with pytest.raises(ValueError):
        LogisticRegression(np.ones((2, 1)), np.array([0.0, 2.0]))


def test_ncp_at_zero():
    m = eight_schools("NCP")
    theta = np.zeros(m.dim)
    lp = m.log_prior(theta)
    hyper = (-0.5 * (np.log(2 * np.pi) + 2 * np.log(5.0)) + np.log(2 / np.pi) - np.log(5.0)
             - np.log1p(1 / 25.0))
    assert lp - hyper == pytest.approx(8 * (-0.5 * np.log(2 * np.pi)), abs=1e-12)


def test_cp_ncp_agree_after_reparameterization():
    cp, ncp = eight_schools("CP"), eight_schools("NCP")
    rng = np.random.default_rng(8)
    for _ in range(20):
        x = rng.normal(0, 1.5, ncp.dim)
        mu, log_tau, z = x[0], x[1], x[2:]
        y = np.concatenate([[mu, log_tau], mu + np.exp(log_tau) * z])
        assert ncp.log_joint(x) == pytest.approx(cp.log_joint(y) + cp.num_groups * log_tau, rel=1e-12)


def test_eight_schools_bundled_data():
    y, s = load_eight_schools_data()
    np.testing.assert_array_equal(y, [28, 8, -3, 7, -1, 1, 18, 12])
    np.testing.assert_array_equal(s, [15, 10, 16, 11, 9, 11, 10, 18])
    assert eight_schools().dim == 10
    with pytest.raises(ValueError):
        eight_schools("XP")


@pytest.mark.parametrize("model", all_models(), ids=lambda m: m.name)
def test_gradients_match_finite_differences(model):
    rng = np.random.default_rng(0)
    for _ in range(100):
        theta = rng.normal(0, 1.0, model.dim)
        assert rel_err(model.grad_log_joint(theta), central_diff(model.log_joint, theta)) < 1e-5
        if model.data_size:
            i = int(rng.integers(model.data_size))
            fd = central_diff(lambda t: model.log_lik_term(t, i), theta)
            assert rel_err(model.grad_log_lik_term(theta, i), fd) < 1e-5


@pytest.mark.parametrize("model", all_models(), ids=lambda m: m.name)
def test_log_joint_factorizes(model):
    theta = np.random.default_rng(1).normal(size=(3, model.dim))
    terms = sum(model.log_lik_term(theta, i) for i in range(model.data_size))
    np.testing.assert_allclose(model.log_joint(theta), model.log_prior(theta) + terms, rtol=1e-12)


@pytest.mark.parametrize("model", small_models(), ids=lambda m: m.name)
@pytest.mark.parametrize("size", [1, 2, 3])
def test_minibatch_unbiased_over_all_subsets(model, size):
    theta = np.random.default_rng(2).normal(size=(2, model.dim))
    full_v, full_g = minibatch(model, model.all_indices, theta)
    subsets = list(itertools.combinations(range(model.data_size), size))
    vals, grads = zip(*(minibatch(model, list(s), theta) for s in subsets))
    np.testing.assert_allclose(np.mean(vals, axis=0), full_v, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(np.mean(grads, axis=0), full_g, rtol=1e-10, atol=1e-10)


def test_minibatch_examples():
    model = small_models()[0]
    theta = np.ones(3)
    v, g = minibatch(model, model.all_indices, theta)
    assert v == pytest.approx(model.log_lik(theta))
    twin = LinearRegression(np.ones((2, 1)), np.ones(2))
    assert minibatch(twin, [1], np.zeros(1))[0] == pytest.approx(twin.log_lik(np.zeros(1)))
    with pytest.raises(ValueError):
        minibatch(model, [], theta)
    with pytest.raises(IndexError):
        minibatch(model, [99], theta)


def test_epoch_batcher_covers_each_epoch():
    b = EpochBatcher(10, 3, np.random.default_rng(0))
    seen = np.concatenate([b.next() for _ in range(4)])
    assert sorted(seen[:10].tolist()) == list(range(10))
    assert EpochBatcher(10, 50, np.random.default_rng(0)).next().size == 10
    assert EpochBatcher(0, 5, np.random.default_rng(0)).next().size == 0


def test_csv_loader(tmp_path):
    good = tmp_path / "d.csv"
    good.write_text("x1,x2,y\n1,2,1\n3,4,0\n")
    ds = load_csv_dataset(good)
    np.testing.assert_array_equal(ds.X, [[1, 2], [3, 4]])
    assert logistic_model(ds).dim == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("x1,y\n1,2\n3,oops\n")
    with pytest.raises(ValueError, match="bad.csv:3"):
        load_csv_dataset(bad)
    ragged = tmp_path / "ragged.csv"
    ragged.write_text("x1,y\n1,2,3\n")
    with pytest.raises(ValueError, match="ragged.csv:2"):
        load_csv_dataset(ragged)


def test_synthetic_logistic_labels_binary():
    ds = synthetic_logistic(50, 3, seed=1)
    assert set(np.unique(ds.y)) <= {0.0, 1.0}
