"""Finite mixtures of latent variable models fitted by EM (with the
classification and stochastic variants) and Gaussian mixtures with
closed-form M-steps."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.special import logsumexp

from .data import SufficientStats, as_frame, numeric_columns
from .estimate import (Block, Cell, EstimationError, FitOptions, Likelihood,
                       cell_row_logdens, estimate, global_parameters, optimize,
                       prepare_group)
from .model import Model, ModelError, identify
from .ram import compile_model

VARIANTS = ("EM", "CEM", "StEM")


class DegenerateSolution(EstimationError):
    """A component collapsed onto a point mass."""


@dataclass
class MixtureControl:
    nstart: int = 5
    tol: float = 1e-8
    max_iter: int = 1000
    variant: str = "EM"
    seed: int | None = None
    start: dict | np.ndarray | None = None
    start_pi: np.ndarray | None = None
    param: str = "relative"
    burnin: float = 0.5


@dataclass
class MixtureFit:
    names: list[str]
    theta: np.ndarray
    pi: np.ndarray
    posterior: np.ndarray
    trace: list[float]
    variant: str
    loglik: float
    npar: int
    converged: bool
    iterations: int
    degenerate_starts: list[str] = field(default_factory=list)
    models: list[Model] = field(default_factory=list)
    means: list[np.ndarray] | None = None
    covs: list[np.ndarray] | None = None
    columns: list[str] | None = None
    _logdens: Callable | None = field(default=None, repr=False)
    _gradient: Callable | None = field(default=None, repr=False)
    _vcov: np.ndarray | None = field(default=None, repr=False)

    @property
    def K(self) -> int:
        return len(self.pi)

    def aic(self) -> float:
        return -2 * self.loglik + 2 * self.npar

    def classify(self) -> np.ndarray:
        return np.argmax(self.posterior, axis=1)

    def posterior_for(self, data) -> np.ndarray:
        """Posterior class probabilities for new rows."""
        ld = self._logdens(self.theta, as_frame(data))
        return posterior(self.pi, ld)

    def vcov(self) -> np.ndarray:
        """Inverse observed information of (theta, pi_1..pi_{K-1})."""
        if self._vcov is None:
            if self._gradient is None:
                raise EstimationError("standard errors are not available for this fit")
            x0 = np.concatenate([self.theta, self.pi[:-1]])
            p = len(x0)
            H = np.zeros((p, p))
            for j in range(p):
                h = 1e-5 * max(1.0, abs(x0[j]))
                up, dn = x0.copy(), x0.copy()
                up[j] += h
                dn[j] -= h
                H[:, j] = (self._gradient(up) - self._gradient(dn)) / (2 * h)
            H = (H + H.T) / 2
            self._vcov = np.linalg.pinv(-H)
        return self._vcov

    def score_norm2(self) -> float:
        if self._gradient is None:
            return float("nan")
        g = self._gradient(np.concatenate([self.theta, self.pi[:-1]]))
        return float(g @ g)

    def coef(self) -> pd.DataFrame:
        se = np.sqrt(np.clip(np.diag(self.vcov()), 0, None))
        names = self.names + [f"pi{j + 1}" for j in range(self.K - 1)]
        est = np.concatenate([self.theta, self.pi[:-1]])
        return pd.DataFrame({"Estimate": est, "Std. Error": se}, index=names)

    def summary(self) -> str:
        lines = [f"Mixture ({self.variant}), K = {self.K}"]
        counts = np.bincount(self.classify(), minlength=self.K)
        for j in range(self.K):
            lines.append(f"Class {j + 1} (n={counts[j]}, Prior={self.pi[j]:.4f})")
            if self.means is not None:
                for c, m in zip(self.columns, self.means[j]):
                    lines.append(f"  {c:<12} {m: .5f}")
        lines.append(f"Log-Likelihood = {self.loglik:.4f}")
        lines.append(f"AIC = {self.aic():.3f}")
        return "\n".join(lines)

    __str__ = summary


def posterior(pi, logdens) -> np.ndarray:
    """Posterior class probabilities from log densities (n x K)."""
    logdens = np.atleast_2d(logdens)
    top = np.max(logdens, axis=1, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise EstimationError("all component densities vanish for some row")
    w = np.asarray(pi, float)[None, :] * np.exp(logdens - top)
    total = w.sum(axis=1, keepdims=True)
    if not np.all(total > 0):
        raise EstimationError("all component densities vanish for some row")
    return w / total


def _mixture_loglik(pi, logdens) -> float:
    with np.errstate(divide="ignore"):
        return float(np.sum(logsumexp(np.log(pi)[None, :] + logdens, axis=1)))


def _hard(post, rng, variant):
    n, K = post.shape
    if variant == "CEM":
        lab = np.argmax(post, axis=1)
    else:
        u = rng.random(n)[:, None]
        lab = np.minimum((u > np.cumsum(post, axis=1)).sum(axis=1), K - 1)
    return np.eye(K)[lab]


# ------------------------------------------------------ structured models
class _Problem:
    """Components, their unweighted likelihoods and weighted M-step data."""

    def __init__(self, models, frame, param, identified):
        ident = models if identified else [identify(m, param) for m in models]
        self.models = ident
        self.tables = [compile_model(m) for m in ident]
        self.names, self.kinds, self.indices = global_parameters(self.tables)
        self.frame = frame
        self.groups = []
        for j, (t, idx) in enumerate(zip(self.tables, self.indices)):
            gd = prepare_group(t, frame, idx, group=j)
            if gd.n_dropped:
                raise EstimationError("mixture models need complete data on modelled variables")
            self.groups.append(gd)
        self.liks = [Likelihood(gd.blocks, self.names) for gd in self.groups]
        self.n = len(frame)
        t0 = self.tables[0]
        Z = numeric_columns(frame, t0.observed)
        self.data_var = np.var(Z, axis=0)
        if len(t0.exogenous):
            b = self.groups[0].blocks[0]
            self.exo_ld = cell_row_logdens(b.exo_cov, b.exo_mean, Z[:, t0.exo_pos])
        else:
            self.exo_ld = np.zeros(self.n)
        self.variance_params = [i for i, k in enumerate(self.kinds) if k == "variance"]

    def logdens(self, theta, frame=None) -> np.ndarray:
        if frame is None:
            liks = self.liks
            n = self.n
        else:
            liks = [Likelihood(prepare_group(t, frame, idx).blocks, self.names)
                    for t, idx in zip(self.tables, self.indices)]
            n = len(frame)
        out = np.empty((n, len(liks)))
        for j, lik in enumerate(liks):
            ids, ld = lik.row_logdens(theta)
            out[ids, j] = ld
        return out

    def weighted(self, W) -> Likelihood:
        blocks = []
        for j, gd in enumerate(self.groups):
            for b in gd.blocks:
                cells = []
                for c in b.cells:
                    w = W[c.ids, j]
                    if w.sum() <= 0:
                        continue
                    cells.append(Cell(c.row, c.Z, w, c.ids, SufficientStats.from_rows(c.Z, w)))
                if cells:
                    blocks.append(Block(b.table, b.index, b.obs, cells,
                                        b.exo_mean, b.exo_cov, j))
        return Likelihood(blocks, self.names)

    def gradient(self, x) -> np.ndarray:
        """Observed-data score in (theta, pi_1..pi_{K-1})."""
        pi = np.append(x[len(self.names):], 1 - np.sum(x[len(self.names):]))
        theta = x[:len(self.names)]
        ld = self.logdens(theta)
        post = posterior(pi, ld)
        g_theta = self.weighted(post).score(theta)
        g_pi = post[:, :-1].sum(axis=0) / pi[:-1] - post[:, -1].sum() / pi[-1]
        return np.concatenate([g_theta, g_pi])


def _start_from_pooled(prob: _Problem, pooled, rng) -> np.ndarray:
    """Randomly perturbed pooled estimates, redrawn until every component
    density is finite."""
    for _ in range(50):
        theta = _perturb(prob, pooled, rng)
        if np.all(np.isfinite(prob.logdens(theta))):
            return theta
    return _perturb(prob, pooled, rng, 0.0)


def _perturb(prob: _Problem, pooled, rng, size: float = 0.3) -> np.ndarray:
    theta = np.full(len(prob.names), np.nan)
    for t, idx in zip(prob.tables, prob.indices):
        for i, nm in enumerate(t.names):
            g = idx[i]
            if not np.isnan(theta[g]):
                continue
            base = pooled.get(nm, np.nan)
            if np.isnan(base):
                base = 1.0 if prob.kinds[g] == "variance" else 0.0
            kind = prob.kinds[g]
            if kind == "variance":
                theta[g] = base * math.exp(size * rng.standard_normal())
            elif kind == "mean":
                var = t.vars[[s for s in t.slots if s.source == "param" and s.payload == i][0].row]
                pos = t.observed.index(var) if var in t.observed else None
                scale = prob.data_var[pos] if pos is not None else 1.0
                theta[g] = base + size * math.sqrt(scale) * rng.standard_normal()
            else:
                theta[g] = base + size * max(abs(base), 1.0) ** 0.5 * rng.standard_normal()
    return theta


def _user_start(prob: _Problem, start) -> np.ndarray:
    if isinstance(start, dict):
        theta = np.zeros(len(prob.names))
        for k, v in start.items():
            if k not in prob.names:
                raise KeyError(f"unknown parameter {k!r} in start values")
            theta[prob.names.index(k)] = v
        return theta
    return np.asarray(start, dtype=float).copy()


def _check_degenerate(prob, theta, W):
    if np.any(W.sum(axis=0) <= 1e-8 * prob.n):
        raise DegenerateSolution("a component lost all its members")
    floor = 1e-8 * float(np.min(prob.data_var)) if len(prob.data_var) else 1e-8
    if any(theta[i] < floor for i in prob.variance_params):
        raise DegenerateSolution("a component variance collapsed to zero")


def _run_one(prob: _Problem, theta, pi, control: MixtureControl, rng):
    opts = FitOptions(tol=1e-9, iter_max=200)
    log_mask = np.array([k == "variance" for k in prob.kinds])
    ld = prob.logdens(theta)
    ll = _mixture_loglik(pi, ld)
    trace = [ll - prob.exo_ld.sum()]
    converged = False
    keep_th, keep_pi = [], []
    it = 0
    for it in range(1, control.max_iter + 1):
        post = posterior(pi, ld)
        W = post if control.variant == "EM" else _hard(post, rng, control.variant)
        pi = W.mean(axis=0)
        if np.any(pi <= 0):
            raise DegenerateSolution("a component lost all its members")
        wl = prob.weighted(W)
        res = optimize(wl, theta, opts, None, log_mask)
        theta = res.theta
        _check_degenerate(prob, theta, W)
        ld = prob.logdens(theta)
        new = _mixture_loglik(pi, ld)
        if not np.isfinite(new):
            raise DegenerateSolution("non-finite log-likelihood")
        trace.append(new - prob.exo_ld.sum())
        if control.variant == "StEM":
            if it > control.burnin * control.max_iter:
                keep_th.append(theta.copy())
                keep_pi.append(pi.copy())
            continue
        if abs(new - ll) < control.tol * (1 + abs(new)):
            converged = True
            ll = new
            break
        ll = new
    if control.variant == "StEM":
        theta = np.mean(keep_th, axis=0)
        pi = np.mean(keep_pi, axis=0)
        ld = prob.logdens(theta)
        ll = _mixture_loglik(pi, ld)
        converged = True
    return theta, pi, ld, ll, trace, converged, it


def em_fit(models, data, K: int | None = None, control: MixtureControl | None = None,
           identified: bool = False, **kw) -> MixtureFit:
    """Fit a finite mixture of latent variable models.

    ``models`` is a list with one model per class, or a single model used
    for all ``K`` classes.  Parameters sharing a label are common to all
    classes; unlabelled ones are class specific.
    """
    control = replace(control or MixtureControl(), **kw)
    if control.variant not in VARIANTS:
        raise ValueError(f"unknown EM variant {control.variant!r}")
    if isinstance(models, Model):
        if K is None or K < 1:
            raise ValueError("K must be a positive integer")
        models = [models] * K
    K = len(models)
    frame = as_frame(data)
    prob = _Problem(list(models), frame, control.param, identified)
    rng = np.random.default_rng(control.seed)

    pooled = estimate(prob.models[0], frame, identified=True)
    pooled_vals = {nm: pooled.theta[pooled.index(nm)] for nm in pooled.table.names
                   if nm in pooled.table.index}

    best = None
    degenerate = []
    nstart = 1 if K == 1 else control.nstart
    for s in range(nstart):
        if control.start is not None and s == 0:
            theta0 = _user_start(prob, control.start)
        elif K == 1:
            theta0 = _start_from_pooled(prob, pooled_vals, np.random.default_rng(0))
            theta0 = np.array([pooled_vals.get(nm, v) for nm, v in
                               zip(prob.tables[0].names, theta0)])
        else:
            theta0 = _start_from_pooled(prob, pooled_vals, rng)
        pi0 = (np.asarray(control.start_pi, float) if control.start_pi is not None and s == 0
               else np.full(K, 1.0 / K))
        try:
            out = _run_one(prob, theta0, pi0, control, rng)
        except (EstimationError, np.linalg.LinAlgError) as exc:
            degenerate.append(f"start {s + 1}: {exc}")
            continue
        if best is None or out[3] > best[3]:
            best = out
    if best is None:
        raise DegenerateSolution("all starts degenerated: " + "; ".join(degenerate))
    theta, pi, ld, ll, trace, converged, it = best
    npar = len(prob.names) + K - 1
    return MixtureFit(prob.names, theta, pi, posterior(pi, ld), trace, control.variant,
                      ll - prob.exo_ld.sum(), npar, converged, it, degenerate,
                      prob.models, _logdens=lambda th, fr: prob.logdens(th, fr),
                      _gradient=prob.gradient if K > 1 else
                      (lambda x: prob.liks[0].score(x)))


# ------------------------------------------------- Gaussian mixtures
def _mvn_logdens(Z, means, covs):
    out = np.empty((Z.shape[0], len(means)))
    for j, (m, S) in enumerate(zip(means, covs)):
        out[:, j] = cell_row_logdens(S, m, Z)
    return out


def _mvn_run(Z, means, covs, pi, control, rng, floor):
    n, d = Z.shape
    ld = _mvn_logdens(Z, means, covs)
    ll = _mixture_loglik(pi, ld)
    trace = [ll]
    converged = False
    keep = []
    it = 0
    for it in range(1, control.max_iter + 1):
        post = posterior(pi, ld)
        W = post if control.variant == "EM" else _hard(post, rng, control.variant)
        nk = W.sum(axis=0)
        if np.any(nk < d + 1):
            raise DegenerateSolution("a component has too few members")
        pi = nk / n
        means, covs = [], []
        for j in range(W.shape[1]):
            st = SufficientStats.from_rows(Z, W[:, j])
            if np.linalg.eigvalsh(st.cov).min() < floor:
                raise DegenerateSolution("a component covariance is singular")
            means.append(st.mean)
            covs.append(st.cov)
        ld = _mvn_logdens(Z, means, covs)
        new = _mixture_loglik(pi, ld)
        trace.append(new)
        if control.variant == "StEM":
            if it > control.burnin * control.max_iter:
                keep.append((pi, means, covs))
            continue
        if abs(new - ll) < control.tol * (1 + abs(new)):
            converged = True
            ll = new
            break
        ll = new
    if control.variant == "StEM":
        pi = np.mean([k[0] for k in keep], axis=0)
        means = list(np.mean([k[1] for k in keep], axis=0))
        covs = list(np.mean([k[2] for k in keep], axis=0))
        ld = _mvn_logdens(Z, means, covs)
        ll = _mixture_loglik(pi, ld)
        converged = True
    return means, covs, pi, ld, ll, trace, converged, it


def mvnmix(data, K: int, columns=None, control: MixtureControl | None = None,
           **kw) -> MixtureFit:
    """Mixture of K multivariate normals with unstructured means and covariances."""
    control = replace(control or MixtureControl(), **kw)
    if control.variant not in VARIANTS:
        raise ValueError(f"unknown EM variant {control.variant!r}")
    frame = as_frame(data)
    columns = list(columns or frame.select_dtypes("number").columns)
    Z = numeric_columns(frame, columns)
    if np.isnan(Z).any():
        raise EstimationError("mvnmix needs complete data")
    n, d = Z.shape
    if n <= K * (d + 1):
        raise EstimationError("too few rows for the number of components")
    pooled = SufficientStats.from_rows(Z)
    floor = 1e-8 * float(np.min(np.diag(pooled.cov)))
    rng = np.random.default_rng(control.seed)
    sd = np.sqrt(np.diag(pooled.cov))
    best, degenerate = None, []
    nstart = 1 if K == 1 else control.nstart
    for s in range(nstart):
        if control.start is not None and s == 0:
            means0 = [np.asarray(m, float) for m in control.start]
        else:
            means0 = [pooled.mean + 0.3 * sd * rng.standard_normal(d) for _ in range(K)]
        covs0 = [pooled.cov.copy() for _ in range(K)]
        pi0 = (np.asarray(control.start_pi, float) if control.start_pi is not None and s == 0
               else np.full(K, 1.0 / K))
        try:
            out = _mvn_run(Z, means0, covs0, pi0, control, rng, floor)
        except (EstimationError, np.linalg.LinAlgError) as exc:
            degenerate.append(f"start {s + 1}: {exc}")
            continue
        if best is None or out[4] > best[4]:
            best = out
    if best is None:
        raise DegenerateSolution("all starts degenerated: " + "; ".join(degenerate))
    means, covs, pi, ld, ll, trace, converged, it = best
    names, theta = [], []
    tri = [(a, b) for b in range(d) for a in range(b, d)]
    for j in range(K):
        for a in range(d):
            names.append(f"{columns[a]}@{j + 1}")
            theta.append(means[j][a])
        for a, b in tri:
            nm = (f"{columns[a]}<->{columns[a]}" if a == b else f"{columns[a]}<->{columns[b]}")
            names.append(f"{nm}@{j + 1}")
            theta.append(covs[j][a, b])
    npar = K * (d + d * (d + 1) // 2) + K - 1

    def logdens(th, fr):
        return _mvn_logdens(numeric_columns(fr, columns), means, covs)

    return MixtureFit(names, np.array(theta), pi, posterior(pi, ld), trace, control.variant,
                      ll, npar, converged, it, degenerate, means=means, covs=covs,
                      columns=columns, _logdens=logdens)
