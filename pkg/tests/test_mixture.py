import json
from pathlib import Path

import numpy as np
import pytest

from lvm import Binomial, Model, estimate, sim
from lvm.data import faithful
from lvm.estimate import EstimationError
from lvm.mixture import DegenerateSolution, MixtureControl, em_fit, mvnmix, posterior
from tests.oracles import independent as ref

FROZEN = json.loads((Path(__file__).parent / "oracles" / "frozen.json").read_text())


def mixture_regression_model():
    m = Model("Y ~ X")
    m.covariance("X", value="v")
    m.baptize()
    m.intercept(["Y", "X"], None)
    return m


def confounded_data(n, seed):
    m = Model("Y ~ X + Z", "X ~ Z")
    m.distribution("Z", Binomial())
    return sim(m, n, params={"Y<-Z": 2}, seed=seed)


def test_identical_components_give_prior():
    pi = np.array([0.3, 0.7])
    ld = np.tile(np.random.default_rng(1).normal(size=(10, 1)), (1, 2))
    assert np.array_equal(posterior(pi, ld), np.tile(pi, (10, 1)))


def test_far_apart_components():
    ld = np.array([[ref.normal_loglik(np.array([0.0]), 1.0),
                    ref.normal_loglik(np.array([-100.0]), 1.0)]])
    post = posterior([0.5, 0.5], ld)
    assert post[0, 0] > 1 - 1e-10
    assert np.allclose(post[0], FROZEN["posterior_far_apart"])
    oracle = ref.posterior_by_density_ratio([0.5, 0.5], [0.0, 100.0], [1.0, 1.0], 0.0)
    assert post[0, 0] == pytest.approx(oracle[0], abs=1e-12)


def test_posterior_rows_sum_to_one():
    rng = np.random.default_rng(2)
    for _ in range(20):
        K = rng.integers(2, 6)
        pi = rng.dirichlet(np.ones(K))
        ld = rng.normal(scale=50, size=(30, K))
        assert np.allclose(posterior(pi, ld).sum(axis=1), 1.0)


def test_faithful_two_classes():
    data = faithful()
    assert data.shape == (272, 2)
    fit = mvnmix(data, 2, control=MixtureControl(seed=3))
    order = np.argsort([m[0] for m in fit.means])
    means = np.array(fit.means)[order]
    pi = fit.pi[order]
    frozen = FROZEN["faithful"]
    assert np.allclose(means[0], [2.036, 54.48], atol=0.05)
    assert np.allclose(means[1], [4.290, 79.97], atol=0.05)
    assert np.allclose(pi, [0.356, 0.644], atol=0.02)
    assert np.allclose(means, frozen["means"], atol=1e-3)
    assert fit.loglik == pytest.approx(frozen["loglik"], abs=1e-3)
    assert np.all(np.diff(fit.trace) >= -1e-10)


def test_faithful_against_independent_em():
    data = faithful().to_numpy()
    fit = mvnmix(faithful(), 2, control=MixtureControl(seed=4))
    pooled = np.cov(data, rowvar=False, bias=True)
    _, _, _, trace = ref.gaussian_mixture_em(data, [[2, 55], [4.3, 80]], [pooled, pooled],
                                             [0.5, 0.5])
    assert fit.loglik == pytest.approx(trace[-1], abs=1e-4)
    assert np.all(np.diff(trace) >= -1e-10)


def test_single_class_is_sample_moments():
    data = faithful()
    fit = mvnmix(data, 1)
    Z = data.to_numpy()
    assert np.allclose(fit.means[0], Z.mean(axis=0))
    assert np.allclose(fit.covs[0], np.cov(Z, rowvar=False, bias=True))
    assert fit.loglik == pytest.approx(ref.mvn_loglik(Z, Z.mean(axis=0),
                                                      np.cov(Z, rowvar=False, bias=True)))


def test_single_class_structured_equals_mle():
    m = Model("y1 + y2 + y3 ~ u")
    m.latent("u")
    frame = sim(m, 300, seed=5)
    fit = estimate(m, frame)
    mix = em_fit(m, frame, K=1)
    assert mix.loglik == pytest.approx(fit.loglik, abs=1e-8)


def test_generic_em_matches_closed_form():
    data = faithful()
    m = Model()
    m.covariance(["eruptions", "waiting"])
    m.covariance("eruptions ~ waiting")
    m.intercept(["eruptions", "waiting"], None)
    generic = em_fit(m, data, K=2, control=MixtureControl(seed=6, nstart=3))
    closed = mvnmix(data, 2, control=MixtureControl(seed=6))
    assert generic.loglik == pytest.approx(closed.loglik, abs=1e-4)


def test_em_trace_is_monotone_for_mixture_regression():
    fit = em_fit(mixture_regression_model(), confounded_data(500, 7), K=2,
                 control=MixtureControl(seed=7, nstart=2))
    assert np.all(np.diff(fit.trace) >= -1e-10)
    assert fit.names.count("Y<-X") == 1
    assert abs(fit.theta[fit.names.index("Y<-X")] - 1) < 0.25
    assert fit.aic() == pytest.approx(-2 * fit.loglik + 2 * (len(fit.names) + 1))


def test_label_switching_gives_same_loglik():
    data = faithful()
    a = mvnmix(data, 2, control=MixtureControl(start=[[2, 55], [4.3, 80]], nstart=1))
    b = mvnmix(data, 2, control=MixtureControl(start=[[4.3, 80], [2, 55]], nstart=1))
    assert a.loglik == pytest.approx(b.loglik, abs=1e-8)
    assert np.allclose(a.pi, b.pi[::-1], atol=1e-6)
    assert np.allclose(a.means[0], b.means[1], atol=1e-5)


def test_classification_em_assigns_by_posterior():
    data = faithful()
    fit = mvnmix(data, 2, control=MixtureControl(seed=8, variant="CEM"))
    again = posterior(fit.pi, fit._logdens(fit.theta, data))
    assert np.array_equal(fit.classify(), np.argmax(again, axis=1))
    pi_hard = np.bincount(fit.classify(), minlength=2) / len(data)
    assert np.allclose(np.sort(pi_hard), np.sort(fit.pi), atol=1e-12)


def test_stochastic_em_close_to_em():
    rng = np.random.default_rng(9)
    Z = np.vstack([rng.normal([0, 0], 1, (300, 2)), rng.normal([6, 6], 1, (300, 2))])
    import pandas as pd
    data = pd.DataFrame(Z, columns=["a", "b"])
    em = mvnmix(data, 2, control=MixtureControl(seed=10))
    st = mvnmix(data, 2, control=MixtureControl(seed=10, variant="StEM", max_iter=200))
    order_em = np.argsort([m[0] for m in em.means])
    order_st = np.argsort([m[0] for m in st.means])
    for i, j in zip(order_em, order_st):
        se = np.sqrt(np.diag(em.covs[i]) / (em.pi[i] * len(data)))
        assert np.all(np.abs(np.asarray(st.means[j]) - em.means[i]) < 3 * se)


def test_degenerate_and_invalid_inputs():
    import pandas as pd
    data = pd.DataFrame({"a": [0.0, 1.0, 2.0], "b": [1.0, 0.0, 1.0]})
    with pytest.raises(EstimationError):
        mvnmix(data, 2)
    with pytest.raises(ValueError):
        mvnmix(faithful(), 2, variant="bogus")
    point = pd.DataFrame({"a": np.r_[np.zeros(20), np.random.default_rng(0).normal(size=40)]})
    with pytest.raises(DegenerateSolution, match="start 1"):
        mvnmix(point, 2, control=MixtureControl(seed=11, nstart=4))
