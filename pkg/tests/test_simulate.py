import math

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from lvm import Binomial, Model, ModelError, Poisson, Uniform, Weibull, estimate, sim
from lvm.moments import model_moments
from lvm.ram import compile_model
from lvm.simulate import FixedData, parameter_vector, sim_from_fit, square
from tests.oracles import independent as ref


def implied(model, params=None):
    table = compile_model(model)
    theta, _ = parameter_vector(table, params)
    q = len(table.exogenous)
    mb = model_moments(table, theta, exo_mean=np.zeros(q), exo_cov=np.eye(q), derivatives=False)
    return table, mb


def test_zero_rows_keep_columns(m1):
    frame = sim(m1, 0, seed=1)
    assert len(frame) == 0
    assert set(m1.manifest()) <= set(frame.columns)


def test_negative_size_rejected(m1):
    with pytest.raises(ValueError):
        sim(m1, -1)


def test_default_covariance_matches_implied_moments(m1):
    table, mb = implied(m1)
    n = 200000
    frame = sim(m1, n, seed=2)
    emp = np.cov(frame[table.observed].to_numpy(), rowvar=False)
    d = np.diag(mb.omega)
    se = np.sqrt((np.outer(d, d) + mb.omega ** 2) / n)
    assert np.all(np.abs(emp - mb.omega) < 4 * se)
    mean_se = np.sqrt(d / n)
    assert np.all(np.abs(frame[table.observed].mean().to_numpy() - mb.xi) < 4 * mean_se)


@pytest.mark.xfail(strict=False, reason="a fixed 0.05 bound is about 1.4 sampling SE for "
                                        "the largest implied variances (11) at this size")
def test_default_covariance_within_fixed_bound(m1):
    table, mb = implied(m1)
    frame = sim(m1, 200000, seed=2)
    emp = np.cov(frame[table.observed].to_numpy(), rowvar=False)
    assert np.max(np.abs(emp - mb.omega)) < 0.05


def test_moment_error_shrinks_like_root_n(m1):
    table, mb = implied(m1)

    def err(n, seed):
        frame = sim(m1, n, seed=seed)
        return np.abs(np.cov(frame[table.observed].to_numpy(), rowvar=False) - mb.omega).mean()

    small = np.mean([err(2000, s) for s in range(20)])
    large = np.mean([err(8000, 100 + s) for s in range(20)])
    assert 0.35 < large / small < 0.7


def test_seed_determinism(m1):
    a = sim(m1, 50, seed=3)
    b = sim(m1, 50, seed=3)
    pd.testing.assert_frame_equal(a, b)
    assert not sim(m1, 50, seed=4).equals(a)


def test_override_equals_fixing_in_model():
    m = Model("y ~ x", "z ~ y")
    fixed = m.copy().regression("z ~ y", value=0.7)
    fixed.covariance("z", value=2.0)
    a = sim(m, 100, params={"z<-y": 0.7, "z<->z": 2.0}, seed=5)
    b = sim(fixed, 100, seed=5)
    pd.testing.assert_frame_equal(a, b)


def test_binomial_fixed_probability():
    m = Model()
    m.distribution("x", Binomial(p=0.4))
    n = 20000
    x = sim(m, n, seed=6)["x"]
    assert abs(x.mean() - 0.4) < 4 * math.sqrt(0.24 / n)
    assert set(np.unique(x)) == {0.0, 1.0}


def test_cloglog_at_zero_predictor():
    m = Model()
    m.distribution("y", Binomial(link="cloglog"))
    m.intercept("y", 0.0)
    m.covariance("y", value=1.0)
    n = 40000
    y = sim(m, n, seed=7)["y"]
    p = 1 - math.exp(-1)
    assert abs(y.mean() - p) < 4 * math.sqrt(p * (1 - p) / n)


def test_logit_and_probit_links_follow_inverse_link():
    for link, inv in (("logit", lambda e: 1 / (1 + np.exp(-e))), ("probit", stats.norm.cdf)):
        m = Model()
        m.distribution("y", Binomial(link=link))
        m.intercept("y", 0.8)
        m.covariance("y", value=1.0)
        n = 40000
        y = sim(m, n, seed=8)["y"]
        p = inv(0.8)
        assert abs(y.mean() - p) < 4 * math.sqrt(p * (1 - p) / n)


def test_poisson_log_link_binned_means():
    m = Model("z ~ x")
    m.distribution("z", Poisson())
    n = 100000
    frame = sim(m, n, params={"z": 0.5, "z<-x": 0.3}, seed=9)
    bins = pd.cut(frame["x"], [-1.5, -0.5, 0.5, 1.5])
    for interval, group in frame.groupby(bins, observed=True):
        expected = np.exp(0.5 + 0.3 * group["x"]).mean()
        assert abs(group["z"].mean() - expected) < 4 * math.sqrt(expected / len(group))


def test_uniform_standardized_to_mean_and_variance():
    m = Model()
    m.distribution("u", Uniform())
    m.intercept("u", 2.0)
    m.covariance("u", value=3.0)
    u = sim(m, 100000, seed=10)["u"]
    assert abs(u.mean() - 2.0) < 0.03
    assert abs(u.var() - 3.0) < 0.05
    half = math.sqrt(12 * 3.0) / 2
    assert u.min() >= 2.0 - half and u.max() <= 2.0 + half


def test_weibull_times_follow_baseline_distribution():
    m = Model()
    m.distribution("t", Weibull(1.25, 2.0))
    m.intercept("t", 0.0)
    m.covariance("t", value=1.0)
    t = sim(m, 20000, seed=11)
    assert "t_event" not in t.columns
    assert stats.kstest(t["t"], stats.weibull_min(2.0, scale=1.25).cdf).pvalue > 0.01


def test_weibull_censoring_adds_event_column():
    m = Model()
    m.distribution("t", Weibull(1.25, 2.0, cens=1.0))
    m.intercept("t", 0.0)
    m.covariance("t", value=1.0)
    t = sim(m, 5000, seed=12)
    assert t["t"].max() <= 1.0
    assert set(np.unique(t["t_event"])) == {0.0, 1.0}
    assert np.all(t.loc[t["t_event"] == 0, "t"] == 1.0)


def test_weibull_rejects_nonpositive_parameters():
    with pytest.raises(ModelError):
        Weibull(0.0, 2.0)
    with pytest.raises(ModelError):
        Weibull(1.0, -1.0)


def test_fixed_data_length_must_match():
    m = Model()
    m.distribution("x", FixedData((1.0, 2.0, 3.0)))
    assert sim(m, 3, seed=13)["x"].tolist() == [1.0, 2.0, 3.0]
    with pytest.raises(ModelError):
        sim(m, 4, seed=13)


def _tail_model(df=None, shared=True):
    m = Model()
    m.covariance(["y1", "y2"], value=[1.0, 1.0])
    m.intercept(["y1", "y2"], [0.0, 0.0])
    if df is not None:
        m.heavytail(["y1", "y2"], df=df, shared=shared)
    return m


def test_heavytail_variance_inflation():
    frame = sim(_tail_model(3), 200000, seed=14)
    assert abs(frame["y1"].var() - 3.0) < 0.15


def test_heavytail_large_df_is_nearly_gaussian():
    frame = sim(_tail_model(10000), 200000, seed=15)
    assert abs(stats.kurtosis(frame["y1"], fisher=False) - 3.0) < 0.1


def test_shared_heavytail_uses_one_draw_per_row():
    plain = sim(_tail_model(), 1000, seed=16)
    tail = sim(_tail_model(3), 1000, seed=16)
    r1 = tail["y1"] / plain["y1"]
    r2 = tail["y2"] / plain["y2"]
    assert np.allclose(r1, r2, rtol=1e-12)
    separate = sim(_tail_model(3, shared=False), 1000, seed=16)
    assert not np.allclose(separate["y1"] / plain["y1"], separate["y2"] / plain["y2"])


def test_heavytail_preserves_mean():
    m = Model("y ~ x")
    plain = sim(m, 50000, seed=17)["y"]
    heavy = sim(m.copy().heavytail("y", df=5), 50000, seed=17)["y"]
    se = math.sqrt(2 * (1 + 5 / 3) / 50000)
    assert abs(plain.mean() - heavy.mean()) < 4 * se


def test_heavytail_rejects_double_membership():
    m = _tail_model(3)
    with pytest.raises(ModelError):
        m.heavytail("y1", df=4)
    with pytest.raises(ModelError):
        _tail_model().heavytail("y1", df=0)


def test_identity_functional_leaves_output_unchanged():
    m = Model("y ~ x")
    f = m.copy().functional("y", "x", lambda x: x)
    pd.testing.assert_frame_equal(sim(m, 200, seed=18), sim(f, 200, seed=18))


def test_square_functional_recovered_by_regression():
    m = Model("y3 ~ x + z")
    m.functional("y3", "x", square)
    b1 = 0.6
    frame = sim(m, 100000, params={"y3<-x": b1}, seed=19)
    beta, _ = ref.ols(np.column_stack([frame["x"] ** 2, frame["z"]]), frame["y3"].to_numpy())
    assert abs(beta[1] - b1) < 0.02 and abs(beta[2] - 1.0) < 0.02


def test_functional_only_affects_simulation():
    m = Model("y ~ x")
    plain = sim(m, 500, seed=20)
    f = m.copy().functional("y", "x", square)
    assert not sim(f, 500, seed=20).equals(plain)
    a = estimate(m, plain)
    b = estimate(f, plain)
    assert np.array_equal(a.theta, b.theta)


def test_copy_variable_duplicates_source():
    m = Model("y ~ x")
    m.copy_variable("x", "x2")
    m.regression("z", "x2")
    frame = sim(m, 100, seed=21)
    assert np.array_equal(frame["x"], frame["x2"])


def test_feedback_loop_uses_reduced_form():
    m = Model("y1 ~ y2 + x", "y2 ~ y1")
    params = {"y1<-y2": 0.4, "y2<-y1": -0.3}
    table, mb = implied(m, params)
    frame = sim(m, 200000, params=params, seed=22)
    emp = np.cov(frame[table.observed].to_numpy(), rowvar=False)
    assert np.max(np.abs(emp - mb.omega)) < 0.05


def test_cycle_through_non_gaussian_node_rejected():
    m = Model("y1 ~ y2", "y2 ~ y1")
    m.distribution("y1", Binomial())
    with pytest.raises(ModelError):
        sim(m, 10, params={"y1<-y2": 0.3, "y2<-y1": 0.3}, seed=23)


def test_sim_from_fit_reuses_exogenous_columns():
    m = Model("y1 + y2 ~ u", "u ~ x")
    m.latent("u")
    frame = sim(m, 300, seed=24)
    fit = estimate(m, frame)
    again = sim_from_fit(fit, seed=25)
    assert np.array_equal(again["x"].to_numpy(), frame["x"].to_numpy())
    with pytest.raises(ValueError):
        sim_from_fit(fit, n=10, seed=25)


def test_sim_from_fit_draws_exogenous_from_fitted_moments():
    m = Model("y ~ x")
    frame = sim(m, 300, params={"x": 2.0}, seed=26)
    fit = estimate(m, frame)
    n = 100000
    new = sim_from_fit(fit, n=n, xfix=False, seed=27)
    assert len(new) == n
    sd = frame["x"].std(ddof=0)
    assert abs(new["x"].mean() - frame["x"].mean()) < 4 * sd / math.sqrt(n)


def test_parametric_refits_center_on_estimate():
    m = Model("y1 + y2 + y3 ~ u")
    m.latent("u")
    fit = estimate(m, sim(m, 200, seed=28))
    reps = np.array([estimate(m, sim_from_fit(fit, seed=1000 + r)).theta for r in range(200)])
    mc_se = reps.std(axis=0, ddof=1) / math.sqrt(len(reps))
    assert np.all(np.abs(reps.mean(axis=0) - fit.theta) < 3 * mc_se + 1e-3 * np.abs(fit.theta))
