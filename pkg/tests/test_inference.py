import json
import math
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from lvm import (Model, bootstrap, builtin, confint, constraint_estimates, effects, equivalence,
                 estimate, gof, identify, lrt, modelsearch, robust_vcov, score_test, sim,
                 standardized, wald)
from lvm.inference import _chisq, candidate_edges, p_adjust
from lvm.model import Constraint
from tests.oracles import independent as ref

FROZEN = json.loads((Path(__file__).parent / "oracles" / "frozen.json").read_text())

LOADINGS = ["y2<-u1", "y3<-u1", "z2<-u2", "z3<-u2"]


@pytest.fixture(scope="module")
def m1_fits():
    from tests.conftest import build_m1
    m1 = build_m1()
    frame = sim(m1, 400, seed=101)
    e = estimate(m1, frame, param="hybrid")
    m1a = m1.copy()
    m1a.regression("z1 + z2 + z3 ~ u2", value=1)
    m1a.regression("y1 + y2 + y3 ~ u1", value=1)
    m1b = m1a.copy()
    m1b.cancel(["u2", "u1"])
    ea = estimate(m1a, frame, param="hybrid")
    eb = estimate(m1b, frame, param="hybrid")
    return m1, frame, e, ea, eb


def one_factor():
    m = Model("y1 + y2 + y3 ~ u")
    m.latent("u")
    return m


def test_lrt_degrees_of_freedom(m1_fits):
    _, _, e, ea, eb = m1_fits
    assert lrt(ea, e).df == 4
    assert lrt(eb, ea).df == 1
    assert lrt(ea, e).statistic >= 0


def test_lrt_identical_fits(m1_fits):
    e = m1_fits[2]
    res = lrt(e, e)
    assert res.statistic == 0 and res.df == 0


def test_chi_square_tail_against_series():
    p = _chisq(6.6542, 4, "x").p_value
    assert p == pytest.approx(FROZEN["chi2_sf_q6.6542_df4"], abs=1e-12)
    assert round(p, 4) == 0.1553
    assert p == pytest.approx(ref.chi2_sf_even_df(6.6542, 4), abs=1e-12)


def test_wald_single_parameter(m1_fits):
    e = m1_fits[2]
    j = e.index("u2<-u1")
    res = wald(e, ["u2<-u1"])
    assert res.df == 1
    assert res.statistic == pytest.approx((e.theta[j] / e.se[j]) ** 2, rel=1e-10)


def test_wald_loadings_and_intercept_contrast(m1_fits):
    m1, _, e, _, _ = m1_fits
    assert wald(e, LOADINGS, rhs=[1, 1, 1, 1]).df == 4
    contrast = {v: 1.0 for v in m1.endogenous()}
    assert len(contrast) == 6
    assert wald(e, contrast).df == 1
    ident = np.eye(len(e.theta))
    assert wald(e, ident, rhs=e.theta).statistic == pytest.approx(0.0, abs=1e-12)


def test_score_test_degrees_of_freedom(m1_fits):
    e = m1_fits[2]
    one = score_test(e, "z3 ~ z2")
    two = score_test(e, ["z3 ~ z2", "z1 ~ z2"])
    assert one.df == 1 and two.df == 2
    assert one.statistic >= 0 and two.statistic >= one.statistic - 1e-9


def test_three_tests_agree_asymptotically():
    m = Model("y1 + y2 + y3 ~ u", "u ~ x")
    m.latent("u")
    frame = sim(m, 20000, seed=102)
    small = estimate(m, frame)
    big_model = m.copy().regression("y2", "x")
    big = estimate(big_model, frame)
    s = score_test(small, "y2 <- x").statistic
    lr = lrt(small, big).statistic
    w = wald(big, ["y2<-x"]).statistic
    assert 0.9 < s / lr < 1.1 and 0.9 < w / lr < 1.1


def test_p_adjust_properties():
    p = np.random.default_rng(103).uniform(size=30) ** 2
    holm = p_adjust(p, "holm")
    bh = p_adjust(p, "bh")
    assert np.all(holm >= p) and np.all(bh >= p)
    order = np.argsort(p)
    assert np.all(np.diff(holm[order]) >= 0)
    assert np.all(np.diff(bh[order]) >= 0)
    via_scipy = stats.false_discovery_control(p)
    assert np.allclose(bh, via_scipy)


def test_modelsearch_table(m1_fits):
    e = m1_fits[2]
    table = modelsearch(e)
    assert len(table) == len(candidate_edges(e.models[0]))
    assert list(table.columns) == ["extension", "kind", "statistic", "p", "holm", "bh"]
    assert np.all(np.diff(table["statistic"]) <= 0)
    ok = table["p"].notna()
    assert np.all(table.loc[ok, "holm"] >= table.loc[ok, "p"])
    first = table.iloc[0]
    assert score_test(e, first["extension"]).statistic == pytest.approx(first["statistic"], rel=1e-8)


def test_candidates_keep_exogenous_set(m1):
    exo = set(m1.exogenous())
    for kind, a, b in candidate_edges(m1):
        assert a not in exo and (kind == "reg" or b not in exo)


@pytest.mark.slow
def test_modelsearch_null_monte_carlo():
    m = one_factor()
    hits = 0
    reps = 200
    for r in range(reps):
        fit = estimate(m, sim(m, 300, seed=10_000 + r))
        table = modelsearch(fit)
        hits += bool((table["holm"].head(5) < 0.05).any())
    assert hits / reps <= 0.07


def _equivalence_model():
    m = Model("y1 + y2 + y3 ~ u", "u ~ x")
    m.latent("u")
    m.covariance("y1 ~ y2")
    return m


def test_equivalence_finds_direct_effect_on_third_indicator():
    m = _equivalence_model()
    fit = estimate(m, sim(m, 100, seed=1))
    report = equivalence(fit, "y1 ~ y2")
    assert report.focus == "y1<->y2"
    assert "y3<-x" in set(report.equivalent["extension"])
    for stat in report.equivalent["statistic"]:
        assert abs(stat - report.statistic) < 1e-4 * max(1.0, report.statistic)


def test_equivalence_baseline_equals_own_score_statistic():
    m = _equivalence_model()
    m.remove_covariance("y1", "y2")
    fit = estimate(m, sim(_equivalence_model(), 100, seed=2))
    report = equivalence(fit, "y1 ~ y2")
    own = modelsearch(fit).set_index("extension").loc["y1<->y2", "statistic"]
    assert report.statistic == pytest.approx(own, rel=1e-10)


def test_equivalence_excludes_focus_in_either_orientation(m1_fits):
    e = m1_fits[2]
    report = equivalence(e, "z3 ~ z2")
    assert "z2<->z3" not in set(report.equivalent["extension"])
    assert "z3<->z2" not in set(report.equivalent["extension"])


def test_equivalence_empty_when_statistics_differ(m1_fits):
    e = m1_fits[2]
    report = equivalence(e, "y1 <- x1")
    direct = {}
    for edge in candidate_edges(e.models[0]):
        name = f"{edge[1]}<->{edge[2]}" if edge[0] == "cov" else f"{edge[1]}<-{edge[2]}"
        if name == "y1<-x1":
            continue
        direct[name] = score_test(e, name.replace("<->", " ~ ")).statistic
    scale = max(1.0, report.statistic)
    close = {k for k, v in direct.items() if abs(v - report.statistic) < 1e-4 * scale}
    assert close == set(report.equivalent["extension"])
    assert close == set()


def test_effects_identity(m1_fits):
    e = m1_fits[2]
    rep = effects(e, "z3", "x1")
    assert rep.total.estimate - (rep.direct.estimate + sum(p.estimate for _, p in rep.paths)
                                 - rep.direct.estimate) == pytest.approx(0.0, abs=1e-15)
    assert rep.total.estimate == pytest.approx(rep.direct.estimate + rep.indirect.estimate, abs=1e-15)
    assert rep.direct.estimate == 0.0 and math.isnan(rep.direct.se)
    assert len(rep.paths) == 2


def test_effects_without_path(m1_fits):
    e = m1_fits[2]
    rep = effects(e, "y1", "z1")
    assert rep.total.estimate == 0.0 and rep.paths == []
    assert math.isnan(rep.direct.se)


def test_effect_of_two_step_chain_uses_product_rule():
    m = Model("b ~ a", "c ~ b")
    fit = estimate(m, sim(m, 100, seed=4))
    fit.theta[fit.index("b<-a")] = 2.0
    fit.theta[fit.index("c<-b")] = 3.0
    fit.vcov = np.eye(len(fit.theta))
    rep = effects(fit, "c", "a")
    assert rep.total.estimate == 6.0
    assert rep.total.se == pytest.approx(math.sqrt(3 ** 2 + 2 ** 2))


def test_constraint_estimates_identity_and_exp(m1_fits):
    e = m1_fits[2]
    name = "u2<-u1"
    j = e.index(name)
    tab = constraint_estimates(e, [Constraint("ident", (name,), **builtin("identity"))])
    assert tab.loc["ident", "estimate"] == e.theta[j]
    assert tab.loc["ident", "se"] == pytest.approx(e.se[j], rel=1e-12)
    tab = constraint_estimates(e, [Constraint("ex", (name,), **builtin("exp"))])
    assert tab.loc["ex", "estimate"] == pytest.approx(math.exp(e.theta[j]))
    assert tab.loc["ex", "se"] == pytest.approx(math.exp(e.theta[j]) * e.se[j], rel=1e-10)
    assert tab.loc["inv(ex)", "lower"] < tab.loc["inv(ex)", "upper"]


def test_delta_method_gradient_routes_agree(m1_fits):
    e = m1_fits[2]
    args = ("u2<-u1", "y2<-u1")
    prod = builtin("product")
    with_grad = constraint_estimates(e, [Constraint("g", args, prod["fn"], prod["grad"])])
    numeric = constraint_estimates(e, [Constraint("g", args, prod["fn"])])
    assert with_grad.loc["g", "se"] == pytest.approx(numeric.loc["g", "se"], rel=1e-5)


def test_z_transform_interval_maps_through_tanh():
    m = Model()
    m.covariance(["a", "b"])
    m.covariance(["a", "b"], value=["va", "vb"])
    m.covariance("a ~ b", value="cab")
    frame = sim(Model("a ~ b"), 300, seed=5)
    fit = estimate(m, frame)
    c = Constraint("rho", ("cab", "va", "vb"), **builtin("atanh-z"))
    tab = constraint_estimates(fit, [c])
    lo, hi = tab.loc["rho", "lower"], tab.loc["rho", "upper"]
    assert tab.loc["inv(rho)", "lower"] == pytest.approx(math.tanh(lo))
    assert tab.loc["inv(rho)", "upper"] == pytest.approx(math.tanh(hi))
    r = np.corrcoef(frame["a"], frame["b"])[0, 1]
    assert tab.loc["inv(rho)", "estimate"] == pytest.approx(r, abs=1e-6)


def test_profile_equals_wald_for_quadratic_loglik():
    m = Model()
    m.covariance("y", value=1.0)
    y = np.random.default_rng(6).normal(0.3, 1.0, 200)
    fit = estimate(m, pd.DataFrame({"y": y}))
    w = confint(fit, "y", method="wald")
    p = confint(fit, "y", method="profile")
    assert np.allclose(w.to_numpy(), p.to_numpy(), atol=1e-6)


def test_confidence_interval_nesting(m1_fits):
    e = m1_fits[2]
    for method in ("wald", "profile"):
        wide = confint(e, "u2<-u1", level=0.95, method=method).iloc[0]
        narrow = confint(e, "u2<-u1", level=0.5, method=method).iloc[0]
        assert wide["lower"] < narrow["lower"] < narrow["upper"] < wide["upper"]


@pytest.mark.slow
def test_wald_interval_coverage():
    m = one_factor()
    covered = 0
    reps = 500
    for r in range(reps):
        fit = estimate(m, sim(m, 500, seed=20_000 + r))
        lo, hi = confint(fit, "y2<-u").iloc[0]
        covered += lo <= 1.0 <= hi
    assert 0.93 <= covered / reps <= 0.97


def test_robust_vcov_with_singleton_clusters_matches_model_based():
    m = one_factor()
    frame = sim(m, 20000, seed=7)
    fit = estimate(m, frame)
    V = robust_vcov(fit)
    ratio = np.sqrt(np.diag(V)) / fit.se
    assert np.all((ratio > 0.9) & (ratio < 1.1))


def test_robust_vcov_duplicated_rows():
    m = Model("y ~ x")
    base = sim(m, 60, seed=8)
    frame = pd.concat([base, base], ignore_index=True)
    frame["id"] = np.tile(np.arange(len(base)), 2)
    fit = estimate(m, frame)
    V = robust_vcov(fit, "id")
    ids, S = fit.lik.score_rows(fit.theta)
    first = np.argsort(ids)[: len(base)]
    K = len(base)
    meat = K / (K - 1) * 4 * S[first].T @ S[first]
    H = np.linalg.inv(fit.lik.information(fit.theta, "hessian"))
    assert np.allclose(V, H @ meat @ H, rtol=1e-8, atol=1e-12)


def test_cluster_argument_switches_to_robust():
    m = Model("y ~ x")
    frame = sim(m, 100, seed=9)
    frame["g"] = np.arange(100) // 4
    fit = estimate(m, frame, cluster="g")
    assert fit.vcov_type == "robust"
    assert np.allclose(fit.vcov, robust_vcov(fit, "g"))


def test_bootstrap_forced_indices_reproduce_estimate(m1_fits):
    e = m1_fits[2]
    res = bootstrap(e, R=1, seed=1, indices=[np.arange(e.n)])
    assert np.allclose(res.replicates[0], e.theta, atol=1e-6)


def test_bootstrap_is_deterministic_and_thread_invariant():
    m = one_factor()
    fit = estimate(m, sim(m, 200, seed=10))
    a = bootstrap(fit, R=8, seed=42)
    b = bootstrap(fit, R=8, seed=42)
    c = bootstrap(fit, R=8, seed=42, n_jobs=3)
    assert np.array_equal(a.replicates, b.replicates)
    assert np.array_equal(a.replicates, c.replicates)
    ci = a.ci()
    for j in range(len(a.names)):
        assert ci[j, 0] in a.replicates[:, j] and ci[j, 1] in a.replicates[:, j]
    pa = bootstrap(fit, R=4, seed=3, mode="parametric")
    pb = bootstrap(fit, R=4, seed=3, mode="parametric")
    assert np.array_equal(pa.replicates, pb.replicates)


@pytest.mark.slow
def test_bootstrap_se_matches_asymptotic_se():
    m = one_factor()
    fit = estimate(m, sim(m, 500, seed=11))
    res = bootstrap(fit, R=500, seed=12, n_jobs=4)
    for name in ("y2<-u", "y3<-u"):
        j = fit.index(name)
        assert abs(res.se[j] / fit.se[j] - 1) < 0.15


def test_gof_saturated_and_two_factor(m1_fits):
    e = m1_fits[2]
    report = gof(e)
    assert report.df == 16 and e.npar == 23
    sat = Model("y1 + y2 ~ x")
    sat.covariance("y1 ~ y2")
    fit = estimate(sat, sim(sat, 100, seed=13))
    r = gof(fit)
    assert r.df == 0 and r.chisq == pytest.approx(0.0, abs=1e-7)


def test_aic_difference_equals_two_minus_lrt(m1_fits):
    _, _, e, ea, _ = m1_fits
    m = e.models[0].copy()
    m.covariance("z3 ~ z2")
    bigger = estimate(m, e.groups[0].frame, identified=True)
    assert bigger.npar == e.npar + 1
    assert bigger.aic() - e.aic() == pytest.approx(2 - lrt(e, bigger).statistic, abs=1e-8)


def test_standardized_estimates_are_correlations_for_simple_regression():
    m = Model("y ~ x")
    frame = sim(m, 500, seed=14)
    fit = estimate(m, frame)
    std = standardized(fit)
    r = np.corrcoef(frame["x"], frame["y"])[0, 1]
    assert std.loc["y<-x", "std.xy"] == pytest.approx(r, abs=1e-6)
