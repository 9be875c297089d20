"""Two-stage least squares for structural equation models with instruments
selected from the model structure."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .data import as_frame, numeric_columns
from .estimate import EstimationError, FitResult, estimate
from .model import Model, ModelError, identify
from .ram import ParameterTable, compile_model


@dataclass
class Equation:
    label: str                 # response as displayed: latent name or variable
    response: str              # observed column on the left-hand side
    terms: list                # (source, param index or fixed value, column or None)
    errors: list[str]          # error terms in the composite residual
    instruments: list[str] = field(default_factory=list)

    @property
    def predictors(self) -> list[str]:
        return [col for _, _, col in self.terms if col is not None]


@dataclass
class IvPlan:
    surrogates: dict[str, str]
    equations: list[Equation]

    def table(self) -> pd.DataFrame:
        return pd.DataFrame({"Response": [e.label for e in self.equations],
                             "Instruments": [",".join(e.instruments) for e in self.equations]})

    def instruments(self, label: str) -> list[str]:
        for e in self.equations:
            if e.label == label:
                return e.instruments
        raise KeyError(label)

    def __str__(self) -> str:
        return (f"Surrogate variables: {','.join(self.surrogates.values())}\n"
                + self.table().to_string(index=False))


def _check_sem(table: ParameterTable):
    for s in table.slots:
        if s.source == "covariate":
            raise ModelError("instrumental variable estimation does not support random slopes")
        if s.source == "derived":
            raise ModelError("instrumental variable estimation does not support constraints")


def _slot_map(table):
    return {(s.mat, s.row, s.col): s for s in table.slots}


def _surrogates(table: ParameterTable) -> dict[str, str]:
    slots = _slot_map(table)
    pos = {v: i for i, v in enumerate(table.vars)}
    out = {}
    for lat in table.latent:
        j = pos[lat]
        for y in table.observed:
            i = pos[y]
            s = slots.get(("A", i, j))
            if s is None or s.source != "fixed" or s.payload != 1:
                continue
            parents = [k for (m, r, k) in slots if m == "A" and r == i]
            icpt = slots.get(("v", i, -1))
            if parents == [j] and icpt is not None and icpt.source == "fixed" and icpt.payload == 0:
                out[lat] = y
                break
        else:
            raise ModelError(f"latent variable {lat!r} has no indicator with loading "
                             "fixed to 1 and intercept fixed to 0")
    return out


def _reach(table: ParameterTable) -> np.ndarray:
    """reach[i, e]: the error of variable e enters variable i."""
    m = table.m
    R = np.eye(m, dtype=bool)
    adj = np.zeros((m, m), dtype=bool)
    for s in table.slots:
        if s.mat == "A" and not (s.source == "fixed" and s.payload == 0):
            adj[s.row, s.col] = True
    for _ in range(m):
        new = R | (adj.astype(int) @ R.astype(int) > 0)
        if (new == R).all():
            break
        R = new
    return R


def _error_support(table: ParameterTable) -> np.ndarray:
    """Pairs of error terms that may covary."""
    m = table.m
    S = np.eye(m, dtype=bool)
    for s in table.slots:
        if s.mat == "P" and not (s.source == "fixed" and s.payload == 0):
            S[s.row, s.col] = S[s.col, s.row] = True
    ex = [table.vars.index(x) for x in table.exogenous]
    S[np.ix_(ex, ex)] = True
    return S


def build_plan(model: Model) -> IvPlan:
    """Surrogate indicators, equations and instrument sets for ``model``."""
    table = compile_model(model)
    return _plan(table)


def _plan(table: ParameterTable) -> IvPlan:
    _check_sem(table)
    sur = _surrogates(table)
    pos = {v: i for i, v in enumerate(table.vars)}
    slots = _slot_map(table)
    exo = set(table.exogenous)
    reach = _reach(table)
    support = _error_support(table)

    def equation(label, response, target):
        t = pos[target]
        terms, errors = [], [target]
        if target != response:
            errors.append(response)
        s = slots.get(("v", t, -1))
        if s is not None:
            terms.append((s.source, s.payload, None))
        for (mat, r, c), s in slots.items():
            if mat != "A" or r != t:
                continue
            pred = table.vars[c]
            if pred in sur:
                col = sur[pred]
                if not (s.source == "fixed" and s.payload == 0):
                    errors.append(col)
            else:
                col = pred
            terms.append((s.source, s.payload, col))
        return Equation(label, response, terms, errors)

    eqs = []
    surrogate_cols = set(sur.values())
    for v in table.vars:
        if v in table.latent:
            eqs.append(equation(v, sur[v], v))
        elif v not in exo and v not in surrogate_cols:
            eqs.append(equation(v, v, v))
    for e in eqs:
        err = [pos[x] for x in e.errors]
        for cand in table.observed:
            src = np.flatnonzero(reach[pos[cand]])
            if not support[np.ix_(src, err)].any():
                e.instruments.append(cand)
    return IvPlan(sur, eqs)


def _stacked_2sls(eqs, frame, n_params):
    """Stacked 2SLS across equations; returns (params, estimates, vcov)."""
    cols = sorted({p for e in eqs for src, p, _ in e.terms if src == "param"})
    where = {p: j for j, p in enumerate(cols)}
    n = len(frame)
    one = np.ones(n)
    XtX = np.zeros((len(cols), len(cols)))
    Xty = np.zeros(len(cols))
    Xhats, Xs, ys = [], [], []
    for e in eqs:
        y = numeric_columns(frame, [e.response])[:, 0].copy()
        X = np.zeros((n, len(cols)))
        for src, p, col in e.terms:
            x = one if col is None else numeric_columns(frame, [col])[:, 0]
            if src == "param":
                X[:, where[p]] += x
            else:
                y -= p * x
        Z = np.column_stack([one] + [numeric_columns(frame, [c])[:, 0] for c in e.instruments])
        used = np.flatnonzero(np.abs(X).sum(axis=0) > 0)
        if np.linalg.matrix_rank(Z) < len(used):
            raise EstimationError(f"equation for {e.label!r} is under-identified: "
                                  f"{Z.shape[1]} instruments for {len(used)} coefficients")
        coef, *_ = np.linalg.lstsq(Z, X, rcond=None)
        Xhat = Z @ coef
        XtX += Xhat.T @ X
        Xty += Xhat.T @ y
        Xhats.append(Xhat)
        Xs.append(X)
        ys.append(y)
    beta = np.linalg.solve(XtX, Xty)
    U = np.column_stack([y - X @ beta for y, X in zip(ys, Xs)])
    Sigma = U.T @ U / n
    meat = np.zeros_like(XtX)
    for a, Xa in enumerate(Xhats):
        for b, Xb in enumerate(Xhats):
            meat += Sigma[a, b] * (Xa.T @ Xb)
    bread = np.linalg.inv(XtX)
    V = bread @ meat @ bread.T
    return cols, beta, (V + V.T) / 2


def iv_estimate(model: Model, data, *, fix: bool = False, variance: bool = True) -> FitResult:
    """Instrumental variable estimates of all intercepts and slopes.

    Variance and covariance parameters are then estimated by maximum
    likelihood with the slopes and intercepts held at their IV estimates
    (unless ``variance=False``).  With ``fix=True`` the model is first
    identified by fixing a reference indicator per latent variable.
    """
    if fix:
        model = identify(model, "relative")
    table = compile_model(model)
    plan = _plan(table)
    frame = as_frame(data)
    Z = numeric_columns(frame, table.observed)
    frame = frame.loc[~np.isnan(Z).any(axis=1)].reset_index(drop=True)
    cols, beta, V = _stacked_2sls(plan.equations, frame, table.n_params)
    names = table.param_names()
    fixed = {names[p]: b for p, b in zip(cols, beta)}
    rest = [i for i in range(table.n_params) if i not in set(cols)]
    if not rest:
        variance = False
    if variance:
        fit = estimate(model, frame, identified=True, fixed=fixed)
    else:
        fit = estimate(model, frame, identified=True, fixed=fixed, iter_max=0)
    p = len(fit.theta)
    full = np.zeros((p, p))
    g = [fit.index(names[c]) for c in cols]
    full[np.ix_(g, g)] = V
    if variance:
        r = [fit.index(names[i]) for i in rest]
        full[np.ix_(r, r)] = fit.vcov[np.ix_(r, r)]
    fit.vcov = full
    fit.fixed = None
    fit.vcov_type = "iv"
    fit.estimator = "iv"
    fit.extra["plan"] = plan
    fit.extra["variances_estimated"] = variance
    return fit
