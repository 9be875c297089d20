"""Simulation from a model specification.

Unspecified parameters default to intercept 0, slope 1, residual variance 1
and residual covariance 0.5.  Exogenous variables are standard normal unless
a distribution is attached or values are supplied.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from graphlib import TopologicalSorter

import numpy as np
import pandas as pd
from scipy import special, stats
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .model import Model, ModelError
from .ram import ParameterTable, compile_model

DEFAULTS = {"mean": 0.0, "regression": 1.0, "variance": 1.0,
            "covariance": 0.5, "extra": 0.0}


# --------------------------------------------------------- distributions
@dataclass(frozen=True)
class Normal:
    def draw(self, rng, mu, var, n):
        return mu + np.sqrt(var) * rng.standard_normal(n)


_LINKS = {
    "logit": special.expit,
    "probit": stats.norm.cdf,
    "cloglog": lambda x: -np.expm1(-np.exp(x)),
}


@dataclass(frozen=True)
class Binomial:
    """Bernoulli outcome; success probability is ``link^-1(eta)`` unless
    ``p`` is given."""

    link: str = "logit"
    p: float | None = None

    def __post_init__(self):
        if self.link not in _LINKS:
            raise ModelError(f"unknown link {self.link!r}")

    def draw(self, rng, mu, var, n):
        prob = np.full(n, self.p) if self.p is not None else _LINKS[self.link](mu)
        return (rng.random(n) < prob).astype(float)


@dataclass(frozen=True)
class Poisson:
    lam: float | None = None

    def draw(self, rng, mu, var, n):
        lam = np.full(n, self.lam) if self.lam is not None else np.exp(mu)
        return rng.poisson(lam).astype(float)


@dataclass(frozen=True)
class Uniform:
    """Uniform with the requested mean and variance."""

    def draw(self, rng, mu, var, n):
        return mu + np.sqrt(12 * var) * (rng.random(n) - 0.5)


@dataclass(frozen=True)
class Weibull:
    """Proportional-hazards Weibull event time.

    Baseline survival is exp(-(t/scale)^shape) and the linear predictor
    multiplies the hazard by exp(eta).  A finite ``cens`` is an
    administrative censoring time; the event indicator is then returned in a
    companion ``<name>_event`` column.
    """

    scale: float = 1.25
    shape: float = 2.0
    cens: float = math.inf

    def __post_init__(self):
        if not (self.scale > 0 and self.shape > 0):
            raise ModelError("Weibull scale and shape must be positive")

    def draw(self, rng, mu, var, n):
        e = rng.exponential(size=n)
        t = self.scale * (e * np.exp(-mu)) ** (1.0 / self.shape)
        if math.isinf(self.cens):
            return t
        return np.minimum(t, self.cens), (t <= self.cens).astype(float)


@dataclass(frozen=True)
class FixedData:
    values: tuple

    def draw(self, rng, mu, var, n):
        vals = np.asarray(self.values, dtype=float)
        if len(vals) != n:
            raise ModelError("fixed data length differs from the sample size")
        return vals.copy()


# -------------------------------------------------------------- helpers
def _sqrt_psd(S: np.ndarray) -> np.ndarray:
    if S.size == 0:
        return S
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(S)
        if w.min() < -1e-10 * max(1.0, abs(w).max()):
            raise ModelError("residual covariance is not positive semi-definite")
        return V * np.sqrt(np.clip(w, 0, None))


def parameter_vector(table: ParameterTable, params=None) -> tuple[np.ndarray, dict]:
    """Default parameter values with overrides; also returns exogenous
    overrides (``x`` for a mean, ``x<->x`` or ``x1<->x2`` for covariances)."""
    theta = np.array([DEFAULTS.get(k, 0.0) if k != "mixed" else
                      _first_slot_default(table, i) for i, k in enumerate(table.kinds)])
    exo_over: dict = {}
    exo = set(table.exogenous)
    for name, val in (params or {}).items():
        if name in table.index:
            theta[table.index[name]] = val
            continue
        parts = name.split("<->")
        if all(p in exo for p in parts):
            exo_over[tuple(parts)] = float(val)
            continue
        warnings.warn(f"parameter {name!r} is not in the model; ignored")
    return theta, exo_over


def _first_slot_default(table, i):
    for s in table.slots:
        if s.source == "param" and s.payload == i:
            if s.mat == "v":
                return DEFAULTS["mean"]
            if s.mat == "A":
                return DEFAULTS["regression"]
            return DEFAULTS["variance"] if s.row == s.col else DEFAULTS["covariance"]
    return 0.0


def _exo_moments(model: Model, table: ParameterTable, exo_over: dict):
    xs = table.exogenous
    q = len(xs)
    mean = np.zeros(q)
    cov = np.eye(q)
    icpt = model.intercepts()
    for i, x in enumerate(xs):
        b = icpt.get(x)
        if b is not None and b.is_fixed:
            mean[i] = b.value
    for key, val in exo_over.items():
        if len(key) == 1:
            mean[xs.index(key[0])] = val
        else:
            i, j = xs.index(key[0]), xs.index(key[1])
            cov[i, j] = cov[j, i] = val
    return mean, cov


def sim(model: Model, n: int, params: dict | None = None, seed=None,
        data: pd.DataFrame | None = None, theta=None, exo_moments=None,
        latent: bool = True) -> pd.DataFrame:
    """Draw ``n`` rows from ``model``.

    ``params`` overrides parameters by label, display name or positional
    key.  ``data`` supplies covariate columns and, when they are present,
    the exogenous variables themselves.  ``theta`` gives the whole
    parameter vector in table order instead of defaults.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    table = compile_model(model)
    if theta is None:
        theta, exo_over = parameter_vector(table, params)
    else:
        theta = np.asarray(theta, dtype=float)
        _, exo_over = parameter_vector(table, {k: v for k, v in (params or {}).items()
                                               if k not in table.index})
    if exo_moments is not None:
        xmean, xcov = (np.asarray(a, float) for a in exo_moments)
    else:
        xmean, xcov = _exo_moments(model, table, exo_over)

    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    vars_ = table.vars
    m = len(vars_)
    streams = [np.random.default_rng(s) for s in root.spawn(3 + m)]
    rng_resid, rng_exo, rng_tail = streams[:3]
    rng_var = dict(zip(vars_, streams[3:]))

    pos = {v: i for i, v in enumerate(vars_)}
    exo = set(table.exogenous) - set(model.copies)
    values: dict[str, np.ndarray] = {}
    extra_cols: dict[str, np.ndarray] = {}

    # per-slot structure
    derived_rowwise = table.rowwise and any(s.source == "derived" for s in table.slots)
    A, P, v = table.materialize(theta, _dummy_row(table), xmean, xcov)
    coef_source = {}
    for s in table.slots:
        if s.mat == "A":
            coef_source[(s.row, s.col)] = s
        if s.mat == "P" and s.source == "derived" and derived_rowwise:
            raise ModelError("covariate-dependent variances are not supported in simulation")

    # exogenous variables
    given = set(data.columns) if data is not None else set()
    if data is not None and len(data) != n:
        raise ValueError("supplied data must have n rows")
    xs = table.exogenous
    gauss_x = [x for x in xs if x not in given and x not in model.distributions
               and x not in model.copies]
    if gauss_x:
        idx = [xs.index(x) for x in gauss_x]
        L = _sqrt_psd(xcov[np.ix_(idx, idx)])
        draws = rng_exo.standard_normal((n, len(idx))) @ L.T + xmean[idx]
        for j, x in enumerate(gauss_x):
            values[x] = draws[:, j]
    for x in xs:
        if x in model.copies:
            continue
        if x in given:
            values[x] = data[x].to_numpy(dtype=float)
        elif x in model.distributions:
            i = xs.index(x)
            out = model.distributions[x].draw(rng_var[x], np.full(n, xmean[i]), xcov[i, i], n)
            values[x], ev = (out if isinstance(out, tuple) else (out, None))
            if ev is not None:
                extra_cols[x] = ev

    # residuals of all non-exogenous variables, drawn jointly
    inner = [u for u in vars_ if u not in exo and u not in model.copies]
    inner_idx = [pos[u] for u in inner]
    Lr = _sqrt_psd(P[np.ix_(inner_idx, inner_idx)])
    eps = rng_resid.standard_normal((n, len(inner))) @ Lr.T if inner else np.zeros((n, 0))
    for h in model.heavytails:
        Q = rng_tail.chisquare(h.df, size=n)
        scale = np.sqrt(h.df / Q)
        for u in h.variables:
            if u in exo:
                raise ModelError(f"heavy-tail variable {u!r} must not be exogenous")
            eps[:, inner.index(u)] *= scale
    resid = {u: eps[:, j] for j, u in enumerate(inner)}

    def column(name):
        if name in values:
            return values[name]
        if data is not None and name in data.columns:
            return data[name].to_numpy(dtype=float)
        raise ModelError(f"covariate {name!r} is not available for simulation")

    # dependency graph among non-exogenous variables
    deps: dict[str, set] = {u: set() for u in vars_}
    for (r, c), s in coef_source.items():
        deps[vars_[r]].add(vars_[c])
        if s.source == "covariate" and s.payload in pos:
            deps[vars_[r]].add(s.payload)
    for alias, src in model.copies.items():
        deps[alias].add(src)
    if derived_rowwise:
        for s in table.slots:
            if s.source == "derived":
                for cv in table.covariate_columns:
                    if cv in pos:
                        deps[vars_[s.row]].add(cv)

    derived_cache = {}

    def coef(r, c):
        s = coef_source[(r, c)]
        if s.source == "covariate":
            return column(s.payload)
        if s.source == "derived" and derived_rowwise:
            return _derived_column(s.payload)
        return A[r, c]

    def intercept(r):
        for s in table.slots:
            if s.mat == "v" and s.row == r and s.source == "derived" and derived_rowwise:
                return _derived_column(s.payload)
        return v[r]

    def _derived_column(label):
        if label in derived_cache:
            return derived_cache[label]
        cols = [c for c in table.covariate_columns]
        mat = np.column_stack([column(c) for c in cols])
        uniq, inv = np.unique(mat, axis=0, return_inverse=True)
        vals = np.array([table.derived_values(theta, dict(zip(cols, row)))[label]
                         for row in uniq])
        derived_cache[label] = vals[np.asarray(inv).ravel()]
        return derived_cache[label]

    # strongly connected components in topological order
    nodes = [u for u in vars_ if u not in exo]
    nidx = {u: i for i, u in enumerate(nodes)}
    rows, cols_ = [], []
    for u in nodes:
        for d_ in deps[u]:
            if d_ in nidx:
                rows.append(nidx[u])
                cols_.append(nidx[d_])
    graph = csr_matrix((np.ones(len(rows)), (rows, cols_)), shape=(len(nodes), len(nodes)))
    ncomp, labels = connected_components(graph, directed=True, connection="strong")
    comps: dict[int, list[str]] = {}
    for u in nodes:
        comps.setdefault(labels[nidx[u]], []).append(u)
    ts = TopologicalSorter()
    for cid, members in comps.items():
        preds = {labels[nidx[d_]] for u in members for d_ in deps[u]
                 if d_ in nidx and labels[nidx[d_]] != cid}
        ts.add(cid, *preds)

    for cid in ts.static_order():
        members = comps[cid]
        if len(members) == 1:
            u = members[0]
            if u in model.copies:
                values[u] = values[model.copies[u]].copy()
                continue
            r = pos[u]
            eta = np.full(n, 0.0) + intercept(r)
            for (rr, c), s in coef_source.items():
                if rr != r:
                    continue
                parent = vars_[c]
                x = values[parent]
                f = model.functionals.get((u, parent))
                if f is not None:
                    x = np.asarray(f[0](x), dtype=float)
                eta = eta + coef(r, c) * x
            dist = model.distributions.get(u)
            if dist is None or isinstance(dist, Normal):
                values[u] = eta + resid[u]
            else:
                out = dist.draw(rng_var[u], eta, P[r, r], n)
                if isinstance(out, tuple):
                    values[u], extra_cols[u] = out
                else:
                    values[u] = out
        else:
            for u in members:
                if u in model.distributions and not isinstance(model.distributions[u], Normal):
                    raise ModelError(f"cycle through non-Gaussian variable {u!r}")
                if any((u, w) in model.functionals for w in members):
                    raise ModelError("functional effects inside a cycle are not supported")
            idx = [pos[u] for u in members]
            ASS = A[np.ix_(idx, idx)]
            rhs = np.column_stack([intercept(r) + resid[vars_[r]] for r in idx])
            for j, r in enumerate(idx):
                for (rr, c), s in coef_source.items():
                    if rr == r and c not in idx:
                        rhs[:, j] += coef(r, c) * values[vars_[c]]
            try:
                sol = np.linalg.solve(np.eye(len(idx)) - ASS, rhs.T).T
            except np.linalg.LinAlgError:
                raise ModelError("feedback loop with singular I - A; "
                                 "supply other coefficients") from None
            for j, u in enumerate(members):
                values[u] = sol[:, j]

    out_cols = {}
    for u in vars_:
        if not latent and u in table.latent:
            continue
        out_cols[u] = values[u]
        if u in extra_cols:
            out_cols[f"{u}_event"] = extra_cols[u]
    for c in table.covariate_columns:
        if c not in out_cols and data is not None and c in data.columns:
            out_cols[c] = data[c].to_numpy()
    return pd.DataFrame(out_cols)


def _dummy_row(table):
    if not table.rowwise:
        return None
    return {c: 0.0 for c in table.covariate_columns}


# ------------------------------------------------------------- functions
def square(x):
    return np.asarray(x) ** 2


square.builtin_name = "square"

FUNCTIONALS = {
    "square": square,
    "exp": np.exp,
    "log": np.log,
    "identity": lambda x: np.asarray(x),
    "abs": np.abs,
    "sin": np.sin,
    "cos": np.cos,
}


def sim_from_fit(fit, n: int | None = None, params: dict | None = None,
                 seed=None, xfix: bool = True, group: int = 0) -> pd.DataFrame:
    """Simulate from the fitted parameters of group ``group``.

    With ``xfix`` the exogenous columns of the fitted data are reused;
    otherwise they are drawn from a normal distribution with the fitted
    empirical mean and covariance.
    """
    table = fit.tables[group]
    model = fit.models[group]
    theta = fit.theta[fit.indices[group]].copy()
    for k, val in (params or {}).items():
        theta[table.lookup(k)] = val
    gd = fit.groups[group]
    frame = gd.frame
    block = gd.blocks[0]
    if xfix and table.exogenous:
        if n is not None and n != len(frame):
            raise ValueError("n must equal the number of fitted rows when xfix is set")
        n = len(frame)
        data = frame[table.exogenous + [c for c in table.covariate_columns
                                        if c not in table.exogenous]].reset_index(drop=True)
        return sim(model, n, seed=seed, data=data, theta=theta,
                   exo_moments=(block.exo_mean, block.exo_cov))
    n = n or len(frame)
    data = None
    extra = [c for c in table.covariate_columns if c not in table.vars]
    if extra:
        data = frame[extra].sample(n, replace=True, random_state=np.random.default_rng(seed).integers(2**31)).reset_index(drop=True)
    return sim(model, n, seed=seed, theta=theta, data=data,
               exo_moments=(block.exo_mean, block.exo_cov))
