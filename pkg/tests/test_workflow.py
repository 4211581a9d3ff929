import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robustvi.diagnostics import IterateChains
from robustvi.families import VariationalParams
from robustvi.models import BimodalTarget, GaussianTarget, LinRegSpec, linreg_generate
from robustvi.optimizers import DivergenceError
from robustvi.workflow import WorkflowConfig, delbo_rule, iterate_average, ou_theory_check, run


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gaussian_sanity_run_converges(seed):
    model = GaussianTarget(np.zeros(2), np.eye(2))
    res = run(model, "full_rank", WorkflowConfig(seed=seed))
    assert not res.warned_nonconvergence and res.rule_fired == "mcse"
    assert np.max(np.abs(res.lambda_bar.location)) < 3 * np.max(res.diagnostics.mcse)
    assert res.T_stop >= res.T0 + 100
    assert res.iterate_khat_max <= 1.0


def test_averaged_iterate_recomputable_from_trace():
    model = GaussianTarget(np.zeros(2), np.eye(2))
    res = run(model, "full_rank", WorkflowConfig(seed=1))
    keep = res.trace_iterations > res.T0
    flat = res.trace[:, keep].reshape(-1, res.trace.shape[2]).mean(axis=0)
    np.testing.assert_allclose(res.lambda_bar.flatten(), flat, atol=1e-12)
    assert res.average_start == res.T0 + 1
    assert res.elbo_trace.shape == (1, res.T_stop)


def test_bimodal_separated_chains_warn():
    cfg = WorkflowConfig(num_chains=2, init_locations=[[-3.0], [3.0]], t_max=5000, seed=1)
    res = run(BimodalTarget(), "mean_field", cfg)
    assert res.warned_nonconvergence and res.rule_fired == "rhat" and res.T0 is None
    assert all(r >= 1.1 for _, r in res.rhat_history)
    assert res.lambda_bar.num_params == 2


def test_single_chain_path_completes():
    model, _ = linreg_generate(LinRegSpec(dim=2, seed=0))
    res = run(model, "full_rank", WorkflowConfig(t_max=600, seed=3))
    assert res.T_stop <= 600 and len(res.rhat_history) >= 1
    assert np.isfinite(res.rhat_history[-1][1])


def test_threads_do_not_change_results(monkeypatch):
    model, _ = linreg_generate(LinRegSpec(dim=2, seed=0))
    cfg = dict(t_max=1000, num_chains=3, seed=5)
    a = run(model, "full_rank", WorkflowConfig(**cfg))
    monkeypatch.setenv("ROBUSTVI_THREADS", "3")
    b = run(model, "full_rank", WorkflowConfig(**cfg))
    np.testing.assert_array_equal(a.trace, b.trace)
    np.testing.assert_array_equal(a.elbo_trace, b.elbo_trace)


def test_delbo_baseline_stops_on_constant_target():
    model = GaussianTarget(np.zeros(1), np.eye(1))
    res = run(model, "mean_field", WorkflowConfig(stopping_rule="delbo", delbo_epsilon=10.0, seed=0))
    assert res.rule_fired == "delbo" and res.T_stop == 200 and not res.warned_nonconvergence


def test_divergence_reports_partial_trace():
    model, _ = linreg_generate(LinRegSpec(dim=2, seed=0))
    with pytest.raises(DivergenceError) as info:
        run(model, "mean_field", WorkflowConfig(optimizer="sgd", eta=5.0, seed=0))
    assert info.value.partial_elbo.shape[0] == 1


def test_config_validation():
    for bad in (dict(rhat_cutoff=1.0), dict(mcse_cutoff=0), dict(window=7), dict(num_chains=0),
                dict(stopping_rule="never")):
        with pytest.raises(ValueError):
            WorkflowConfig(**bad).validate()


def test_iterate_average_examples():
    one = iterate_average(np.array([[[0.5, 0.0, 0.0]]])[:, :, :2], "mean_field", 1)
    np.testing.assert_array_equal(one.flatten(), [0.5, 0.0])
    two = iterate_average(np.array([[[0.0, 2.0], [2.0, 0.0]]]), "mean_field", 1)
    np.testing.assert_array_equal(two.flatten(), [1.0, 1.0])
    chains = IterateChains(np.arange(12.0).reshape(1, 6, 2), start_iteration=10)
    np.testing.assert_array_equal(iterate_average(chains, "mean_field", 1, start=14).flatten(), [9.0, 10.0])
    with pytest.raises(ValueError):
        iterate_average(chains, "mean_field", 1, start=16)


def test_average_of_log_scale_differs_from_average_of_moments():
    a = VariationalParams("mean_field", np.zeros(1), np.array([0.0]))
    b = VariationalParams("mean_field", np.zeros(1), np.array([2.0]))
    avg = iterate_average(np.stack([a.flatten(), b.flatten()])[None], "mean_field", 1)
    var_of_avg = np.exp(2 * avg.scale[0])
    avg_of_var = 0.5 * (np.exp(0.0) + np.exp(4.0))
    assert var_of_avg == pytest.approx(np.e**2)
    assert var_of_avg < avg_of_var


@given(st.integers(1, 5), st.integers(1, 6), st.integers(1, 40), st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_iterate_average_is_pooled_mean(J, P, T, seed):
    x = np.random.default_rng(seed).standard_normal((J, T, 2 * P))
    np.testing.assert_allclose(iterate_average(x, "mean_field", P).flatten(),
                               x.reshape(-1, 2 * P).mean(axis=0), rtol=1e-12, atol=1e-12)


def test_ou_check_examples():
    a, abar = ou_theory_check(1.0, 1, 1, 10_000, seed=1)
    assert a == pytest.approx(1.0, rel=0.05)
    a, abar = ou_theory_check(0.1, 50, 10, 10_000, seed=2)
    assert a == pytest.approx(0.5, rel=0.05)
    assert abar / a == pytest.approx(0.1, rel=0.05)
    a, abar = ou_theory_check(0.1, 10, 100, 1000, seed=3)
    assert abar == pytest.approx(0.001, rel=0.05)


def test_delbo_rule_examples():
    assert delbo_rule(np.full(200, -5.0), 100, 0.01)
    assert not delbo_rule(np.full(150, -5.0), 100, 0.01)
    slope, level = 0.001, -100.0
    trace = level + slope * np.arange(200)
    # window means differ by window * slope
    prev = trace[:100].mean()
    expect = 100 * slope / abs(prev) < 0.01
    assert delbo_rule(trace, 100, 0.01) == expect
    assert not delbo_rule(level + 2.0 * np.arange(200), 100, 0.01)
    rng = np.random.default_rng(0)
    hits = np.mean([delbo_rule(-1.0 + 50 * rng.standard_normal(200), 100, 0.01) for _ in range(500)])
    assert hits < 0.05
