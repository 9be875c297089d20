import numpy as np
import pytest

from lvm import Model


def build_m1() -> Model:
    """Two measurement models linked by a structural regression."""
    m = Model()
    m.regression("u1 + u2 ~ x1 + x2")
    m.regression("y1 + y2 + y3 ~ u1")
    m.regression("z1 + z2 + z3 ~ u2")
    m.latent(["u1", "u2"])
    m.cancel(["u1", "u2"])
    m.regression("u2 ~ u1")
    return m


def build_mregr() -> Model:
    """Multivariate regression with the slot restrictions used throughout the docs."""
    m = Model("y1 + y2 + y3 ~ x + z")
    m.regression("y1 + y2 + y3 ~ x", value="b1")
    m.regression("y1 + y2 + y3 ~ z", value=1)
    m.regression("y1 + y2 ~ x + z", value=[1, "a", 2, "b"])
    m.regression("w ~ y1 + y2 + y3", value="beta")
    m.regression("w ~ y1 + y2 + y3", value=None)
    m.covariance("y1 ~ y1 + y2", value=["v1", 0.5])
    m.covariance(["y1", "y2"], value="v")
    m.covariance(["y1", "y2"], value=["v", 0.3])
    m.covariance(["y1", "y2", "y3"], value="r1", pairwise=True)
    m.covariance("y1 + y2 ~ y2 + y3", value=[0.5, "r", "r0", 0.3])
    m.intercept(["y1", "y2", "y3"], "mu")
    m.intercept(["y1", "y2", "y3"], ["mu", "mu", 0])
    return m


def build_miv() -> Model:
    """Three-factor model with surrogate indicators and a correlated error pair."""
    m = Model()
    m.regression("y1 + y2 + y3 ~ eta1")
    m.regression("v1 + v2 + v3 ~ eta2")
    m.regression("z1 + z2 + z3 ~ eta3")
    m.latent(["eta1", "eta2", "eta3"])
    m.regression("eta1 ~ eta2 + eta3 + x2")
    m.regression("eta2 ~ eta3 + x1")
    m.regression("eta3 ~ x1")
    m.covariance("y1 ~ v1")
    m.regression("y2 ~ x2")
    for y, e in [("y1", "eta1"), ("v1", "eta2"), ("z1", "eta3")]:
        m.regression(y, e, value=1)
        m.intercept(y, 0)
    return m


@pytest.fixture
def m1():
    return build_m1()


@pytest.fixture
def mregr():
    return build_mregr()


@pytest.fixture
def miv():
    return build_miv()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
