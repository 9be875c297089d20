import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from lvm import EstimationError, Model, ModelError, build_plan, builtin, sim, wald
from lvm import covariate
from lvm.iv import iv_estimate
from lvm.ram import compile_model
from lvm.simulate import DEFAULTS
from tests.oracles import independent as ref

HERE = Path(__file__).parent
FROZEN = json.loads((HERE / "oracles" / "frozen.json").read_text())
MIV_PARAMS = {"y1<->v1": 0.5}


def test_plan_surrogates_and_instruments(miv):
    plan = build_plan(miv)
    assert set(plan.surrogates.values()) == {"y1", "v1", "z1"}
    assert set(plan.instruments("eta3")) == {"x1", "x2"}
    assert "Surrogate variables: y1,v1,z1" in str(plan)
    assert list(plan.table().columns) == ["Response", "Instruments"]


def test_exogenous_regression_plan_degenerates_to_ols():
    plan = build_plan(Model("y ~ x"))
    assert plan.surrogates == {}
    assert plan.instruments("y") == ["x"]


def test_latent_without_unit_indicator_rejected():
    m = Model("y1 + y2 ~ u")
    m.latent("u")
    with pytest.raises(ModelError):
        build_plan(m)


def test_random_slope_and_constraints_rejected():
    slope = Model("y ~ x")
    slope.regression("y", "x", value=covariate("s"))
    with pytest.raises(ModelError):
        build_plan(slope)
    constrained = Model("y ~ x")
    constrained.regression("y ~ x", value="b")
    constrained.constrain("b", ["a"], **{k: v for k, v in builtin("exp").items()})
    with pytest.raises(ModelError):
        build_plan(constrained)


def test_covariance_edge_never_grows_instrument_sets(miv):
    without = miv.copy()
    without.remove_covariance("y1", "v1")
    a = build_plan(without)
    b = build_plan(miv)
    for eq in b.equations:
        assert set(eq.instruments) <= set(a.instruments(eq.label))
    assert any(set(eq.instruments) < set(a.instruments(eq.label)) for eq in b.equations)


def test_exogenous_design_equals_ols():
    m = Model("y ~ x1 + x2")
    frame = sim(m, 500, seed=1)
    fit = iv_estimate(m, frame)
    X = frame[["x1", "x2"]].to_numpy()
    beta, s2 = ref.ols(X, frame["y"].to_numpy())
    assert fit.theta[fit.index("y")] == pytest.approx(beta[0], abs=1e-8)
    assert fit.theta[fit.index("y<-x1")] == pytest.approx(beta[1], abs=1e-8)
    assert fit.theta[fit.index("y<-x2")] == pytest.approx(beta[2], abs=1e-8)
    assert fit.theta[fit.index("y<->y")] == pytest.approx(s2, rel=1e-6)


def test_just_identified_ratio():
    frame = pd.read_csv(HERE / "oracles" / "data" / "iv.csv")
    m = Model("y ~ x", "x ~ i")
    m.covariance("y ~ x")
    fit = iv_estimate(m, frame)
    plan = fit.extra["plan"]
    assert plan.instruments("y") == ["i"]
    direct = ref.iv_ratio(frame["i"].to_numpy(), frame["x"].to_numpy(), frame["y"].to_numpy())
    assert fit.theta[fit.index("y<-x")] == pytest.approx(direct, rel=1e-10)
    assert fit.theta[fit.index("y<-x")] == pytest.approx(FROZEN["iv_ratio"], rel=1e-10)
    ols = ref.ols(frame[["x"]].to_numpy(), frame["y"].to_numpy())[0][1]
    assert abs(ols - direct) > 0.05


def _true_value(table, src, payload):
    if src == "fixed":
        return payload
    return DEFAULTS[table.kinds[payload]]


def test_instruments_uncorrelated_with_composite_residuals(miv):
    table = compile_model(miv)
    plan = build_plan(miv)
    n = 20000
    frame = sim(miv, n, params=MIV_PARAMS, seed=2)
    for eq in plan.equations:
        u = frame[eq.response].to_numpy().copy()
        for src, payload, col in eq.terms:
            x = 1.0 if col is None else frame[col].to_numpy()
            u -= _true_value(table, src, payload) * x
        for inst in eq.instruments:
            z = frame[inst].to_numpy()
            prod = (z - z.mean()) * (u - u.mean())
            assert abs(prod.mean()) < 4 * prod.std() / np.sqrt(n), (eq.label, inst)


def test_miv_consistency(miv):
    frame = sim(miv, 10000, params=MIV_PARAMS, seed=3)
    fit = iv_estimate(miv, frame)
    plan = fit.extra["plan"]
    table = fit.table
    coef = sorted({p for eq in plan.equations for src, p, col in eq.terms
                   if src == "param" and col is not None})
    assert coef
    for p in coef:
        name = table.names[p]
        j = fit.index(name)
        assert abs(fit.theta[j] - 1.0) < 4 * fit.se[j], name
    assert wald(fit, [table.names[p] for p in coef], rhs=[1.0] * len(coef)).df == len(coef)


def test_variance_step_can_be_skipped(miv):
    frame = sim(miv, 2000, params=MIV_PARAMS, seed=4)
    with_var = iv_estimate(miv, frame)
    without = iv_estimate(miv, frame, variance=False)
    j = with_var.index("y2<-eta1")
    assert without.theta[j] == with_var.theta[j]
    assert not without.extra["variances_estimated"]


def test_under_identified_equation_rejected():
    m = Model("y ~ x")
    m.covariance("y ~ x")
    m.covariance("x", value="vx")
    with pytest.raises((EstimationError, ModelError)):
        iv_estimate(m, sim(m, 200, seed=5))
