"""Inference on fitted models: tests, model search, effects, delta method,
confidence intervals, bootstrap and goodness of fit."""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import pandas as pd
from scipy import optimize as spopt, stats

from .estimate import (EstimationError, FitResult, Likelihood, compute_vcov,
                       estimate, gaussian_loglik, invert_information,
                       optimize, prepare_group)
from .model import Constraint, Model, ModelError
from .ram import compile_model, numeric_gradient
from .simulate import sim_from_fit


@dataclass
class TestResult:
    statistic: float
    df: int
    p_value: float
    method: str
    note: str = ""

    def __repr__(self) -> str:
        return (f"{self.method}: statistic = {self.statistic:.4f}, df = {self.df}, "
                f"p-value = {self.p_value:.4g}")


def _chisq(stat, df, method, note=""):
    p = float(stats.chi2.sf(stat, df)) if df > 0 else float("nan")
    return TestResult(float(stat), int(df), p, method, note)


# ---------------------------------------------------------------- tests
def lrt(fit_small: FitResult, fit_large: FitResult) -> TestResult:
    """Likelihood ratio test of nested models."""
    note = ""
    if not set(fit_small.names) <= set(fit_large.names):
        note = "parameter names are not nested; check the models"
        warnings.warn(note)
    stat = 2 * (fit_large.loglik - fit_small.loglik)
    df = fit_large.npar - fit_small.npar
    return _chisq(stat, df, "Likelihood ratio test", note)


def wald(fit: FitResult, contrast=None, rhs=None, vcov=None) -> TestResult:
    """Wald test of ``C theta = rhs``.

    ``contrast`` is a list of parameter names (each tested against zero or
    the matching entry of ``rhs``), a dict of name -> coefficient for one
    linear combination, a list of such dicts, or a matrix.
    """
    p = len(fit.theta)
    if isinstance(contrast, dict):
        contrast = [contrast]
    if isinstance(contrast, np.ndarray):
        C = np.atleast_2d(contrast).astype(float)
    else:
        rows = []
        for item in contrast:
            r = np.zeros(p)
            if isinstance(item, str):
                r[fit.index(item)] = 1.0
            else:
                for name, coef in item.items():
                    r[fit.index(name)] += coef
            rows.append(r)
        C = np.array(rows)
    rhs = np.zeros(C.shape[0]) if rhs is None else np.atleast_1d(np.asarray(rhs, float))
    V = fit.vcov if vcov is None else vcov
    d = C @ fit.theta - rhs
    stat = float(d @ np.linalg.solve(C @ V @ C.T, d))
    return _chisq(stat, np.linalg.matrix_rank(C), "Wald test")


def _parse_edge(spec) -> tuple[str, str, str]:
    """``"a <- b"`` regression, ``"a ~ b"`` or ``"a <-> b"`` covariance."""
    if isinstance(spec, tuple):
        return spec
    s = spec.replace(" ", "")
    if "<->" in s:
        a, b = s.split("<->")
        return ("cov", a, b)
    if "<-" in s:
        a, b = s.split("<-")
        return ("reg", a, b)
    if "~" in s:
        a, b = s.split("~")
        return ("cov", a, b)
    raise ValueError(f"cannot parse edge {spec!r}")


def _edge_name(edge):
    kind, a, b = edge
    return f"{a}<->{b}" if kind == "cov" else f"{a}<-{b}"


def _has_edge(model: Model, edge) -> bool:
    kind, a, b = edge
    if kind == "cov":
        return model.has_covariance(a, b)
    return (a, b) in model.regressions()


def _extended(fit: FitResult, edges):
    """Score and expected information of the model extended by ``edges``,
    evaluated at the current estimates with the new parameters at zero."""
    if len(fit.models) != 1:
        raise EstimationError("score tests are implemented for single-group fits")
    old_model, old_table = fit.models[0], fit.tables[0]
    big = old_model.copy()
    for e in edges:
        kind, a, b = e
        for v in (a, b):
            if v not in old_model.declared():
                raise ModelError(f"unknown variable {v!r}")
        if _has_edge(old_model, e):
            raise ModelError(f"{_edge_name(e)} is already in the model")
        if kind == "cov":
            big.covariance(a, b)
        else:
            big.regression(a, b)
    if big.exogenous() != old_model.exogenous():
        raise ModelError("the extension changes the set of exogenous variables")
    table = compile_model(big)
    old_slot = {(s.mat, s.row, s.col): s for s in old_table.slots}
    theta = np.zeros(table.n_params)
    new_param = {}
    for s in table.slots:
        if s.source != "param":
            continue
        o = old_slot.get((s.mat, s.row, s.col))
        if o is not None and o.source == "param":
            theta[s.payload] = fit.theta[fit.indices[0][o.payload]]
        elif o is None:
            new_param[(s.mat, s.row, s.col)] = s.payload
    pos = {v: i for i, v in enumerate(table.vars)}
    new_idx = []
    for kind, a, b in edges:
        if kind == "cov":
            i, j = sorted((pos[a], pos[b]))
            key = ("P", i, j) if ("P", i, j) in new_param else ("P", j, i)
        else:
            key = ("A", pos[a], pos[b])
        new_idx.append(new_param[key])
    gd = fit.groups[0]
    g = prepare_group(table, gd.frame, np.arange(table.n_params), missing=fit.options.missing)
    lik = Likelihood(g.blocks, table.param_names())
    S = lik.score(theta)
    I = lik.information(theta, "expected")
    old = [j for j in range(table.n_params) if j not in new_idx]
    return S, I, old, new_idx


def _score_stat(S, I, idx):
    idx = list(idx)
    s = S[idx]
    return float(s @ np.linalg.solve(I[np.ix_(idx, idx)], s))


def score_test(fit: FitResult, additions) -> TestResult:
    """Score (Lagrange multiplier) test for adding edges to a fitted model."""
    if isinstance(additions, (str, tuple)):
        additions = [additions]
    edges = [_parse_edge(a) for a in additions]
    S, I, old, new = _extended(fit, edges)
    stat = _score_stat(S, I, old + new)
    return _chisq(stat, len(new), "Score test",
                  ", ".join(_edge_name(e) for e in edges))


def p_adjust(p, method: str = "holm") -> np.ndarray:
    p = np.asarray(p, dtype=float)
    m = len(p)
    order = np.argsort(p)
    ps = p[order]
    if method == "holm":
        adj = np.maximum.accumulate(ps * (m - np.arange(m)))
    elif method in ("bh", "BH", "fdr"):
        adj = ps * m / np.arange(1, m + 1)
        adj = np.minimum.accumulate(adj[::-1])[::-1]
    else:
        raise ValueError(f"unknown adjustment {method!r}")
    out = np.empty(m)
    out[order] = np.clip(adj, 0, 1)
    return out


def candidate_edges(model: Model, kind: str = "both") -> list[tuple]:
    """Absent edges that keep the exogenous set unchanged."""
    exo = set(model.exogenous())
    inner = [v for v in model.vars() if v not in exo]
    regs = model.regressions()
    out = []
    if kind in ("both", "covariance"):
        for i, a in enumerate(inner):
            for b in inner[i + 1:]:
                if not model.has_covariance(a, b):
                    out.append(("cov", a, b))
    if kind in ("both", "regression"):
        for to in inner:
            for fr in model.vars():
                if fr != to and (to, fr) not in regs and (fr, to) not in regs:
                    out.append(("reg", to, fr))
    return out


def _edge_key(edge) -> tuple:
    """Identity of an edge; covariances are unordered."""
    kind, a, b = edge
    return (kind, frozenset((a, b))) if kind == "cov" else (kind, a, b)


def modelsearch(fit: FitResult, kind: str = "both", exclude=()) -> pd.DataFrame:
    """One-parameter score tests for every candidate extension."""
    excl = {_edge_key(_parse_edge(e)) for e in exclude}
    edges = [e for e in candidate_edges(fit.models[0], kind) if _edge_key(e) not in excl]
    if not edges:
        return pd.DataFrame(columns=["extension", "kind", "statistic", "p", "holm", "bh"])
    S, I, old, new = _extended(fit, edges)
    rows = []
    for e, j in zip(edges, new):
        try:
            stat = _score_stat(S, I, old + [j])
        except np.linalg.LinAlgError:
            stat = float("nan")
        rows.append((_edge_name(e), "covariance" if e[0] == "cov" else "regression", stat))
    df = pd.DataFrame(rows, columns=["extension", "kind", "statistic"])
    df["p"] = stats.chi2.sf(df["statistic"], 1)
    ok = df["p"].notna()
    df["holm"] = np.nan
    df["bh"] = np.nan
    df.loc[ok, "holm"] = p_adjust(df.loc[ok, "p"].to_numpy(), "holm")
    df.loc[ok, "bh"] = p_adjust(df.loc[ok, "p"].to_numpy(), "bh")
    return df.sort_values("statistic", ascending=False, kind="stable").reset_index(drop=True)


@dataclass
class EquivalenceReport:
    focus: str
    statistic: float
    equivalent: pd.DataFrame
    improvements: pd.DataFrame


def equivalence(fit: FitResult, focus, tol: float = 1e-4, kind: str = "both") -> EquivalenceReport:
    """Extensions that are empirically equivalent to adding ``focus``.

    If ``focus`` is part of the fitted model it is dropped and the reduced
    model is refitted first.
    """
    edge = _parse_edge(focus)
    base = fit
    if _has_edge(fit.models[0], edge):
        reduced = fit.models[0].copy()
        if edge[0] == "cov":
            reduced.remove_covariance(edge[1], edge[2])
        else:
            reduced.remove_regression(edge[1], edge[2])
        base = estimate(reduced, fit.groups[0].frame, identified=True,
                        missing=fit.options.missing, options=fit.options)
    s0 = score_test(base, [edge]).statistic
    search = modelsearch(base, kind, exclude=[edge])
    scale = max(1.0, abs(s0))
    eq = search[np.abs(search["statistic"] - s0) < tol * scale]
    better = search[search["statistic"] > s0 + tol * scale]
    return EquivalenceReport(_edge_name(edge), s0, eq.reset_index(drop=True),
                             better.reset_index(drop=True))


# -------------------------------------------------------------- effects
@dataclass
class Effect:
    estimate: float
    se: float

    @property
    def z(self) -> float:
        return self.estimate / self.se if self.se > 0 else float("nan")

    @property
    def p(self) -> float:
        return float(2 * stats.norm.sf(abs(self.z))) if self.se > 0 else float("nan")


@dataclass
class EffectsReport:
    outcome: str
    exposure: str
    total: Effect
    direct: Effect
    indirect: Effect
    paths: list
    note: str = ""

    def table(self) -> pd.DataFrame:
        rows = [("Total", self.total), ("Direct", self.direct), ("Indirect", self.indirect)]
        rows += [("->".join(p), e) for p, e in self.paths]
        return pd.DataFrame([(n, e.estimate, e.se, e.z, e.p) for n, e in rows],
                            columns=["effect", "estimate", "se", "z", "p"]).set_index("effect")


def _coef_functions(fit: FitResult, group: int = 0):
    """Value and gradient (w.r.t. global theta) of every A entry."""
    t = fit.tables[group]
    idx = fit.indices[group]
    local = fit.theta[idx]
    block = fit.groups[group].blocks[0]
    A, _, _ = t.materialize(local, None if not t.rowwise else {c: np.nan for c in t.covariate_columns},
                            block.exo_mean, block.exo_cov)
    slots, J = t.slot_jacobian(local, None)
    grads = {}
    for s, row in zip(slots, J):
        if s.mat == "A":
            g = np.zeros(len(fit.theta))
            np.add.at(g, idx, row)
            grads[(s.row, s.col)] = g
    covs = {(s.row, s.col) for s in t.slots if s.source == "covariate"}
    return A, grads, covs


def effects(fit: FitResult, outcome: str, exposure: str | None = None) -> EffectsReport:
    """Total, direct and indirect effects of ``exposure`` on ``outcome``.

    The total effect is the sum over simple directed paths of the product of
    path coefficients; standard errors use the delta method.
    """
    if exposure is None:
        lhs, rhs = outcome.split("~")
        outcome, exposure = lhs.strip(), rhs.strip()
    model = fit.models[0]
    t = fit.tables[0]
    pos = {v: i for i, v in enumerate(t.vars)}
    A, grads, covs = _coef_functions(fit)
    paths = model.path(outcome, exposure)
    V = fit.vcov
    p = len(fit.theta)

    def product(path):
        est = 1.0
        factors = []
        for a, b in zip(path[:-1], path[1:]):
            key = (pos[b], pos[a])
            if key in covs:
                raise ModelError("effects through covariate-bound slopes are not defined")
            factors.append((A[key], grads.get(key, np.zeros(p))))
            est *= A[key]
        g = np.zeros(p)
        for i, (_, gi) in enumerate(factors):
            others = np.prod([f for j, (f, _) in enumerate(factors) if j != i])
            g += others * gi
        return est, g

    def make(est, g):
        return Effect(float(est), float(math.sqrt(max(g @ V @ g, 0.0))))

    tot_e, tot_g = 0.0, np.zeros(p)
    dir_e, dir_g, has_direct = 0.0, np.zeros(p), False
    per_path = []
    for path in paths:
        e, g = product(path)
        per_path.append((path, make(e, g)))
        tot_e += e
        tot_g = tot_g + g
        if len(path) == 2:
            dir_e, dir_g, has_direct = e, g, True
    note = "" if paths else "no directed path between the variables"
    direct = make(dir_e, dir_g) if has_direct else Effect(0.0, float("nan"))
    return EffectsReport(outcome, exposure, make(tot_e, tot_g), direct,
                         make(tot_e - dir_e, tot_g - dir_g), per_path, note)


# ------------------------------------------------------- delta method
def constraint_estimates(fit: FitResult, extra: Sequence[Constraint] = (),
                         level: float = 0.95) -> pd.DataFrame:
    """Delta-method inference for model constraints and extra functions."""
    t = fit.tables[0]
    idx = fit.indices[0]
    p = len(fit.theta)
    local = fit.theta[idx]
    known: dict[str, tuple[float, np.ndarray]] = {}
    if t.derived_order:
        covdep = set()
        for lab in t.derived_order:
            c = t.constraints[lab]
            if any(t.arg_sources[a][0] == "covariate" or
                   (t.arg_sources[a][0] == "derived" and a in covdep) for a in c.args):
                covdep.add(lab)
        if len(covdep) < len(t.derived_order):
            vals = t.derived_values(local, None) if not covdep else {}
            jac = t.derived_jacobian(local, None) if not covdep else {}
            for lab in t.derived_order:
                if lab in vals:
                    g = np.zeros(p)
                    np.add.at(g, idx, jac[lab])
                    known[lab] = (vals[lab], g)

    def resolve(name):
        if name in known:
            return known[name]
        g = np.zeros(p)
        j = fit.index(name)
        g[j] = 1.0
        return fit.theta[j], g

    rows = []
    zc = stats.norm.ppf(0.5 + level / 2)

    def add(name, est, g, inv=None):
        se = math.sqrt(max(g @ fit.vcov @ g, 0.0))
        z = est / se if se > 0 else float("nan")
        pv = 2 * stats.norm.sf(abs(z)) if se > 0 else float("nan")
        rows.append((name, est, se, z, pv, est - zc * se, est + zc * se))
        if inv is not None:
            lo, hi = sorted((float(inv(est - zc * se)), float(inv(est + zc * se))))
            rows.append((f"inv({name})", float(inv(est)), float("nan"), float("nan"),
                         float("nan"), lo, hi))

    for lab in t.derived_order:
        if lab in known:
            add(lab, known[lab][0], known[lab][1], t.constraints[lab].inv)
    for c in extra:
        vals, grads = zip(*[resolve(a) for a in c.args]) if c.args else ((), ())
        args = np.array(vals, dtype=float)
        est = c(args)
        ga = np.asarray(c.grad(args), float) if c.grad is not None else numeric_gradient(c, args)
        g = sum(gi * gv for gi, gv in zip(ga, grads)) if grads else np.zeros(p)
        known[c.target] = (est, g)
        add(c.target, est, g, c.inv)
    return pd.DataFrame(rows, columns=["name", "estimate", "se", "z", "p", "lower", "upper"]
                        ).set_index("name")


# ------------------------------------------------- confidence intervals
def confint(fit: FitResult, parm=None, level: float = 0.95, method: str = "wald") -> pd.DataFrame:
    names = fit.names if parm is None else ([parm] if isinstance(parm, str) else list(parm))
    idx = [fit.index(n) for n in names]
    if method == "wald":
        z = stats.norm.ppf(0.5 + level / 2)
        se = fit.se
        out = [(fit.names[j], fit.theta[j] - z * se[j], fit.theta[j] + z * se[j]) for j in idx]
    elif method == "profile":
        out = [(fit.names[j],) + _profile_interval(fit, j, level) for j in idx]
    else:
        raise ValueError(f"unknown interval method {method!r}")
    return pd.DataFrame(out, columns=["name", "lower", "upper"]).set_index("name")


def _profile_interval(fit: FitResult, j: int, level: float):
    crit = stats.chi2.ppf(level, 1)
    lik = fit.lik
    ll_hat = fit.extra.get("loglik_joint", lik.loglik(fit.theta))
    free = np.ones(len(fit.theta), bool) if fit.fixed is None else ~fit.fixed
    free_j = free.copy()
    free_j[j] = False
    log_mask = np.array([k == "variance" for k in fit.kinds])
    opts = replace(fit.options, tol=1e-8, optimizer="fisher_scoring")
    warm = {"theta": fit.theta.copy()}

    def g(c):
        th = warm["theta"].copy()
        th[j] = c
        if not np.isfinite(lik.loglik(th)):
            th = fit.theta.copy()
            th[j] = c
            if not np.isfinite(lik.loglik(th)):
                return np.inf
        try:
            res = optimize(lik, th, opts, free_j, log_mask)
        except EstimationError:
            return np.inf
        warm["theta"] = res.theta
        return 2 * (ll_hat - res.loglik) - crit

    est = fit.theta[j]
    se = fit.se[j] if fit.se[j] > 0 else max(abs(est), 1.0) * 0.1
    bounds = []
    for sign in (-1, 1):
        warm["theta"] = fit.theta.copy()
        inner, outer = est, None
        for k in range(12):
            c = est + sign * se * 2 ** (k - 1) * 2
            if fit.kinds[j] == "variance" and c <= 0:
                c = inner / 2
            val = g(c)
            if val > 0:
                outer = c
                break
            inner = c
        if outer is None:
            bounds.append(sign * np.inf)
            continue
        warm["theta"] = fit.theta.copy()
        bounds.append(spopt.brentq(g, inner, outer, xtol=1e-7 * max(1, abs(est))))
    return tuple(sorted(bounds))


# ---------------------------------------------------------- robust vcov
def _cluster_lookup(fit: FitResult, cluster):
    if cluster is None:
        if fit.cluster is None:
            return None
        return lambda ids: fit.cluster[ids]
    if isinstance(cluster, str):
        mapping = {}
        for gd in fit.groups:
            if cluster not in gd.frame.columns:
                raise KeyError(f"cluster column {cluster!r} not in data")
            mapping.update(zip(gd.ids, gd.frame[cluster].astype(str)))
        return lambda ids: np.array([mapping[i] for i in ids])
    arr = np.asarray(cluster)
    mapping = dict(zip(np.concatenate([gd.ids for gd in fit.groups]), arr))
    return lambda ids: np.array([mapping[i] for i in ids])


def robust_vcov(fit: FitResult, cluster=None) -> np.ndarray:
    """Sandwich covariance with optional cluster-summed scores."""
    free = np.ones(len(fit.theta), bool) if fit.fixed is None else ~fit.fixed
    return compute_vcov(fit.lik, fit.theta, "robust", _cluster_lookup(fit, cluster), free)


# ------------------------------------------------------------ bootstrap
@dataclass
class BootstrapResult:
    names: list
    estimate: np.ndarray
    replicates: np.ndarray
    failures: int

    @property
    def bias(self) -> np.ndarray:
        return np.nanmean(self.replicates, axis=0) - self.estimate

    @property
    def se(self) -> np.ndarray:
        return np.nanstd(self.replicates, axis=0, ddof=1)

    def ci(self, level: float = 0.95) -> np.ndarray:
        a = (1 - level) / 2
        reps = self.replicates
        out = np.empty((reps.shape[1], 2))
        for j in range(reps.shape[1]):
            col = reps[:, j][np.isfinite(reps[:, j])]
            out[j] = np.quantile(col, [a, 1 - a], method="inverted_cdf")
        return out

    def table(self, level: float = 0.95) -> pd.DataFrame:
        ci = self.ci(level)
        return pd.DataFrame({"estimate": self.estimate, "bias": self.bias, "se": self.se,
                             "lower": ci[:, 0], "upper": ci[:, 1]}, index=self.names)


def bootstrap(fit: FitResult, R: int = 100, mode: str = "nonparametric",
              statistic: Callable | None = None, seed=None, indices=None,
              n_jobs: int = 1) -> BootstrapResult:
    """Bootstrap a statistic of the fit (default: all parameters).

    Replicate ``r`` draws from its own random stream derived from ``seed``
    and ``r``, so results do not depend on ``n_jobs``.  ``indices`` may give
    the resampled row positions of each replicate explicitly.
    """
    if mode not in ("nonparametric", "parametric"):
        raise ValueError(f"unknown bootstrap mode {mode!r}")
    stat = statistic or (lambda f: f.theta)
    est = np.atleast_1d(np.asarray(stat(fit), dtype=float))
    names = fit.names if statistic is None else [f"s{i + 1}" for i in range(len(est))]
    children = np.random.SeedSequence(seed).spawn(R)
    opts = replace(fit.options, vcov="expected")

    def one(r):
        rng = np.random.default_rng(children[r])
        frames = []
        for g, gd in enumerate(fit.groups):
            if mode == "parametric":
                frames.append(sim_from_fit(fit, seed=children[r], group=g))
            else:
                ix = (indices[r] if indices is not None and g == 0
                      else rng.integers(0, len(gd.frame), len(gd.frame)))
                frames.append(gd.frame.iloc[ix].reset_index(drop=True))
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                f = estimate(fit.models if len(fit.models) > 1 else fit.models[0],
                             frames if len(frames) > 1 else frames[0],
                             identified=True, start=fit.theta, missing=fit.options.missing,
                             options=opts,
                             fixed=None if fit.fixed is None else
                             {fit.names[j]: fit.theta[j] for j in np.flatnonzero(fit.fixed)})
            return np.atleast_1d(np.asarray(stat(f), dtype=float))
        except (EstimationError, ModelError, np.linalg.LinAlgError):
            return None

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as ex:
            results = list(ex.map(one, range(R)))
    else:
        results = [one(r) for r in range(R)]
    reps = np.full((R, len(est)), np.nan)
    fails = 0
    for r, v in enumerate(results):
        if v is None:
            fails += 1
        else:
            reps[r] = v
    return BootstrapResult(list(names), est, reps, fails)


# --------------------------------------------------------- goodness of fit
@dataclass
class GofReport:
    loglik: float
    npar: int
    aic: float
    bic: float
    chisq: float | None
    df: int | None
    p_value: float | None
    rmsea: float | None
    saturated_loglik: float | None
    information_rank: int
    information_condition: float
    score_norm2: float

    def __repr__(self) -> str:
        lines = [f"Log-Likelihood = {self.loglik:.4f}", f"AIC = {self.aic:.3f}",
                 f"BIC = {self.bic:.3f}"]
        if self.chisq is not None:
            lines.append(f"Chi-squared statistic: Q = {self.chisq:.4f}, df = {self.df}, "
                         f"P(Q>q) = {self.p_value:.4g}")
        lines.append(f"rank(Information) = {self.information_rank} "
                     f"(p={self.npar}), condition = {self.information_condition:.3g}")
        return "\n".join(lines)


def saturated_loglik(fit: FitResult) -> float | None:
    """Conditional log-likelihood of the unrestricted Gaussian model."""
    total = 0.0
    for gd in fit.groups:
        if len(gd.blocks) != 1 or len(gd.blocks[0].cells) != 1:
            return None
        b = gd.blocks[0]
        st = b.cells[0].stats
        total += gaussian_loglik(st.cov, st.mean, st)
        if len(b.table.exogenous):
            total -= gaussian_loglik(b.exo_cov, b.exo_mean, st.subset(b.exo_local))
    return total


def gof(fit: FitResult) -> GofReport:
    I = fit.information("expected")
    free = np.ones(len(fit.theta), bool) if fit.fixed is None else ~fit.fixed
    I = I[np.ix_(free, free)]
    sv = np.linalg.svd(I, compute_uv=False)
    rank = int(np.sum(sv > sv.max() * 1e-10)) if len(sv) else 0
    cond = float(sv.min() / sv.max()) if len(sv) and sv.max() > 0 else 0.0
    sat = saturated_loglik(fit)
    chisq = df = pval = rmsea = None
    if sat is not None:
        chisq = max(2 * (sat - fit.loglik), 0.0)
        moments = 0
        for t in fit.tables:
            ky = t.k - len(t.exogenous)
            q = len(t.exogenous)
            moments += ky + ky * (ky + 1) // 2 + ky * q
        df = moments - fit.npar
        pval = float(stats.chi2.sf(chisq, df)) if df > 0 else float("nan")
        if df > 0 and fit.n > 1:
            rmsea = math.sqrt(max(chisq - df, 0) / (df * (fit.n - 1)))
    return GofReport(fit.loglik, fit.npar, fit.aic(), fit.bic(), chisq, df, pval, rmsea,
                     sat, rank, cond, float(np.sum(fit.score[free] ** 2)))


# ------------------------------------------------------- standardisation
def standardized(fit: FitResult, group: int = 0) -> pd.DataFrame:
    """Estimates standardised by model-implied total standard deviations."""
    t = fit.tables[group]
    local = fit.theta[fit.indices[group]]
    b = fit.groups[group].blocks[0]
    row = {c: np.nan for c in t.covariate_columns} if t.rowwise else None
    A, P, v = t.materialize(local, row, b.exo_mean, b.exo_cov)
    M = np.linalg.inv(np.eye(t.m) - A)
    sd = np.sqrt(np.diag(M @ P @ M.T))
    rows = []
    for s in t.slots:
        if s.source != "param":
            continue
        name = t.param_names()[s.payload]
        if s.mat == "A":
            val = A[s.row, s.col] * sd[s.col] / sd[s.row]
        elif s.mat == "P":
            val = P[s.row, s.col] / (sd[s.row] * sd[s.col])
        else:
            val = v[s.row] / sd[s.row]
        rows.append((name, local[s.payload], val))
    return pd.DataFrame(rows, columns=["name", "estimate", "std.xy"]).drop_duplicates(
        "name").set_index("name")
