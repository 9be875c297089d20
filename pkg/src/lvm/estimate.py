"""Maximum likelihood estimation for one or more groups of data.

Exogenous variables enter the joint likelihood with mean and covariance
fixed at their empirical (ML) values.  The joint density then factorises
into the conditional density of the endogenous variables times a constant,
so estimates, scores and information matrices are those of the conditional
model.  Reported log-likelihoods are conditional.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy import linalg, optimize as spopt, stats

from .data import SufficientStats, as_frame, numeric_columns
from .model import Model, ModelError, identify
from .moments import d2_moments, model_moments
from .ram import ParameterTable, compile_model

LOG2PI = math.log(2 * math.pi)


class EstimationError(RuntimeError):
    """Raised when a fit cannot be computed."""


@dataclass
class FitOptions:
    estimator: str = "gaussian"
    optimizer: str = "fisher_scoring"
    constrain_variances: bool = True
    iter_max: int = 500
    tol: float = 1e-9
    gamma: float = 1.0
    trace: bool = False
    missing: bool = False
    param: str = "relative"
    vcov: str | None = None


# ------------------------------------------------------- per-cell algebra
@dataclass
class Cell:
    """Rows sharing one observed pattern and one covariate configuration."""

    row: dict | None
    Z: np.ndarray
    w: np.ndarray | None
    ids: np.ndarray
    stats: SufficientStats
    vw: np.ndarray | None = None     # per-variable weights (weighted estimator)


@dataclass
class Block:
    table: ParameterTable
    index: np.ndarray        # local parameter -> global parameter
    obs: np.ndarray          # observed positions present in this block
    cells: list[Cell]
    exo_mean: np.ndarray
    exo_cov: np.ndarray
    group: int = 0

    @property
    def exo_local(self) -> np.ndarray:
        pos = {o: i for i, o in enumerate(self.obs)}
        return np.array([pos[e] for e in self.table.exo_pos], dtype=int)


def _chol(omega):
    try:
        L = np.linalg.cholesky(omega)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(L)):
        return None
    return L


def gaussian_loglik(omega, xi, st: SufficientStats) -> float:
    """Sufficient-statistic Gaussian log-likelihood (divisor-n covariance)."""
    L = _chol(omega)
    if L is None:
        return -np.inf
    k = len(xi)
    u = st.mean - xi
    T = st.cov + np.outer(u, u)
    Linv = linalg.solve_triangular(L, np.eye(k), lower=True)
    W = Linv.T @ Linv
    logdet = 2 * np.log(np.diag(L)).sum()
    return -0.5 * st.n * (k * LOG2PI + logdet + np.sum(W * T))


def _inverse(omega):
    L = _chol(omega)
    if L is None:
        raise EstimationError("model-implied covariance is not positive definite")
    k = omega.shape[0]
    Linv = linalg.solve_triangular(L, np.eye(k), lower=True)
    return Linv.T @ Linv


def cell_score(omega, xi, d_omega, d_xi, st: SufficientStats) -> np.ndarray:
    W = _inverse(omega)
    u = st.mean - xi
    T = st.cov + np.outer(u, u)
    R = W @ T @ W - W
    return st.n * (0.5 * np.einsum("pab,ab->p", d_omega, R) + d_xi.T @ (W @ u))


def cell_information(omega, d_omega, d_xi, n) -> np.ndarray:
    W = _inverse(omega)
    X = np.einsum("ab,pbc->pac", W, d_omega)
    return n * (0.5 * np.einsum("pab,qba->pq", X, X) + d_xi.T @ W @ d_xi)


def cell_hessian(omega, xi, d_omega, d_xi, d2o, d2x, st: SufficientStats) -> np.ndarray:
    """Second derivative matrix of the cell log-likelihood."""
    W = _inverse(omega)
    u = st.mean - xi
    T = st.cov + np.outer(u, u)
    WTW = W @ T @ W
    X = np.einsum("ab,pbc->pac", W, d_omega)
    Wu = W @ u
    Wdxi = W @ d_xi
    t1 = np.einsum("ab,pqba->pq", W, d2o)
    t2 = np.einsum("qab,pba->pq", X, X)
    t3 = np.einsum("pqab,ba->pq", d2o, WTW)
    t4 = 2 * np.einsum("pab,qbc,ca->pq", X, X, W @ T)
    t5 = 2 * np.einsum("a,pab,bq->pq", Wu, d_omega, Wdxi)
    t7 = -2 * np.einsum("pqa,a->pq", d2x, Wu)
    t8 = 2 * d_xi.T @ Wdxi
    H = -0.5 * st.n * (t1 - t2 - t3 + t4 + t5 + t5.T + t7 + t8)
    return (H + H.T) / 2


def cell_row_scores(omega, xi, d_omega, d_xi, Z, w=None) -> np.ndarray:
    W = _inverse(omega)
    WU = (Z - xi) @ W
    base = -0.5 * np.einsum("ab,pba->p", W, d_omega)
    quad = 0.5 * np.einsum("na,pab,nb->np", WU, d_omega, WU)
    out = base + quad + WU @ d_xi
    if w is not None:
        out = out * w[:, None]
    return out


def cell_row_logdens(omega, xi, Z) -> np.ndarray:
    L = _chol(omega)
    if L is None:
        return np.full(Z.shape[0], -np.inf)
    k = len(xi)
    R = linalg.solve_triangular(L, (Z - xi).T, lower=True)
    return -0.5 * (k * LOG2PI + 2 * np.log(np.diag(L)).sum() + np.sum(R * R, axis=0))


def weighted_row_scores(omega, xi, d_omega, d_xi, Z, VW) -> np.ndarray:
    """Per-row weighted estimating functions with diagonal variable weights.

    Row i contributes -1/2 dOmega' vec(W - W u u' W Wt_i) + dxi' W Wt_i u,
    where Wt_i = diag(VW[i]) multiplies the data-dependent terms only.
    """
    W = _inverse(omega)
    U = np.where(np.isnan(Z), 0.0, Z - xi)
    WU = U @ W
    base = -0.5 * np.einsum("ab,pba->p", W, d_omega)
    quad = 0.5 * np.einsum("na,pab,nb,nb->np", WU, d_omega, WU, VW)
    mean = (U * VW) @ W @ d_xi
    return base + quad + mean


# ------------------------------------------------------------ likelihood
class Likelihood:
    """Sum of Gaussian log-likelihood contributions over blocks."""

    def __init__(self, blocks: list[Block], names: list[str]):
        self.blocks = blocks
        self.names = list(names)
        self.p = len(names)
        self.n_total = sum(c.stats.n for b in blocks for c in b.cells)
        self._cache_key = None
        self._cache_store: dict = {}

    def _cache(self, theta) -> dict:
        """Moments computed at the most recent parameter vector."""
        key = theta.tobytes()
        if key != self._cache_key:
            self._cache_key = key
            self._cache_store = {}
        return self._cache_store

    def _moments(self, block, cell, theta, derivatives=True, cache=None):
        base = (id(block), None if cell.row is None else id(cell))
        key = base + (derivatives,)
        if cache is not None:
            if key in cache:
                return cache[key]
            if base + (True,) in cache:
                return cache[base + (True,)]
        local = theta[block.index]
        mb = model_moments(block.table, local, cell.row, block.exo_mean,
                           block.exo_cov, derivatives=derivatives)
        o = block.obs
        res = (mb.omega[np.ix_(o, o)], mb.xi[o],
               mb.d_omega_arr[:, o][:, :, o] if derivatives else None,
               mb.d_xi[o] if derivatives else None)
        if cache is not None:
            cache[key] = res
        return res

    def loglik(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        total = 0.0
        cache = self._cache(theta)
        for b in self.blocks:
            for c in b.cells:
                try:
                    om, xi, _, _ = self._moments(b, c, theta, False, cache)
                except ModelError:
                    return -np.inf
                ll = gaussian_loglik(om, xi, c.stats)
                if not np.isfinite(ll):
                    return -np.inf
                total += ll
        return total

    def exo_loglik(self) -> float:
        """Log-likelihood of the exogenous block at its empirical moments."""
        total = 0.0
        for b in self.blocks:
            if not len(b.table.exogenous):
                continue
            el = b.exo_local
            for c in b.cells:
                total += gaussian_loglik(b.exo_cov, b.exo_mean, c.stats.subset(el))
        return total

    def score(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        out = np.zeros(self.p)
        cache = self._cache(theta)
        for b in self.blocks:
            for c in b.cells:
                om, xi, do, dx = self._moments(b, c, theta, True, cache)
                np.add.at(out, b.index, cell_score(om, xi, do, dx, c.stats))
        return out

    def score_rows(self, theta) -> tuple[np.ndarray, np.ndarray]:
        """(row ids, per-row scores); rows follow block/cell order."""
        theta = np.asarray(theta, dtype=float)
        ids, mats = [], []
        cache = self._cache(theta)
        for b in self.blocks:
            for c in b.cells:
                om, xi, do, dx = self._moments(b, c, theta, True, cache)
                local = cell_row_scores(om, xi, do, dx, c.Z, c.w)
                S = np.zeros((len(c.ids), self.p))
                np.add.at(S.T, b.index, local.T)
                ids.append(c.ids)
                mats.append(S)
        return np.concatenate(ids), np.vstack(mats)

    def weighted_score_rows(self, theta) -> tuple[np.ndarray, np.ndarray]:
        theta = np.asarray(theta, dtype=float)
        ids, mats = [], []
        cache = self._cache(theta)
        for b in self.blocks:
            for c in b.cells:
                om, xi, do, dx = self._moments(b, c, theta, True, cache)
                local = weighted_row_scores(om, xi, do, dx, c.Z, c.vw)
                S = np.zeros((len(c.ids), self.p))
                np.add.at(S.T, b.index, local.T)
                ids.append(c.ids)
                mats.append(S)
        return np.concatenate(ids), np.vstack(mats)

    def row_logdens(self, theta) -> tuple[np.ndarray, np.ndarray]:
        theta = np.asarray(theta, dtype=float)
        ids, vals = [], []
        cache = self._cache(theta)
        for b in self.blocks:
            for c in b.cells:
                try:
                    om, xi, _, _ = self._moments(b, c, theta, False, cache)
                    vals.append(cell_row_logdens(om, xi, c.Z))
                except ModelError:
                    vals.append(np.full(len(c.ids), -np.inf))
                ids.append(c.ids)
        return np.concatenate(ids), np.concatenate(vals)

    def analytic_hessian_available(self) -> bool:
        return not any(b.table.has_derived for b in self.blocks)

    def hessian(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if not self.analytic_hessian_available():
            return self.numeric_hessian(theta)
        H = np.zeros((self.p, self.p))
        cache = self._cache(theta)
        for b in self.blocks:
            d2cache: dict = {}
            for c in b.cells:
                om, xi, do, dx = self._moments(b, c, theta, True, cache)
                key = None if c.row is None else id(c)
                if key not in d2cache:
                    d2o, d2x = d2_moments(b.table, theta[b.index], c.row,
                                          b.exo_mean, b.exo_cov)
                    o = b.obs
                    d2cache[key] = (d2o[:, :, o][:, :, :, o], d2x[:, :, o])
                d2o, d2x = d2cache[key]
                Hc = cell_hessian(om, xi, do, dx, d2o, d2x, c.stats)
                H[np.ix_(b.index, b.index)] += Hc
        return H

    def numeric_hessian(self, theta) -> np.ndarray:
        p = self.p
        H = np.zeros((p, p))
        for j in range(p):
            h = 1e-5 * max(1.0, abs(theta[j]))
            up, dn = theta.copy(), theta.copy()
            up[j] += h
            dn[j] -= h
            H[:, j] = (self.score(up) - self.score(dn)) / (2 * h)
        return (H + H.T) / 2

    def information(self, theta, kind: str = "expected") -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if kind == "expected":
            out = np.zeros((self.p, self.p))
            cache = self._cache(theta)
            for b in self.blocks:
                for c in b.cells:
                    om, xi, do, dx = self._moments(b, c, theta, True, cache)
                    out[np.ix_(b.index, b.index)] += cell_information(om, do, dx, c.stats.n)
            return out
        if kind == "hessian":
            return -self.hessian(theta)
        if kind == "outer":
            _, S = self.score_rows(theta)
            return S.T @ S
        raise ValueError(f"unknown information type {kind!r}")


# ------------------------------------------------------------ data setup
def _cells_for(table, Z, C, w, ids, vw=None):
    if not table.rowwise:
        return [Cell(None, Z, w, ids, SufficientStats.from_rows(Z, w),
                     None if vw is None else vw)]
    uniq, inv = np.unique(C, axis=0, return_inverse=True)
    inv = np.asarray(inv).ravel()
    cells = []
    for j, vals in enumerate(uniq):
        sel = inv == j
        row = dict(zip(table.covariate_columns, vals))
        ww = None if w is None else w[sel]
        cells.append(Cell(row, Z[sel], ww, ids[sel],
                          SufficientStats.from_rows(Z[sel], ww),
                          None if vw is None else vw[sel]))
    return cells


@dataclass
class GroupData:
    frame: pd.DataFrame       # retained rows
    ids: np.ndarray           # global row ids of retained rows
    blocks: list[Block]
    n_dropped: int = 0
    patterns: int = 1


def prepare_group(table: ParameterTable, frame, index, missing=False,
                  weights=None, var_weights=None, group=0, id_offset=0) -> GroupData:
    """Split the data of one group into likelihood blocks."""
    frame = as_frame(frame)
    Zall = numeric_columns(frame, table.observed)
    Call = numeric_columns(frame, table.covariate_columns)
    exo_pos, endo_pos = table.exo_pos, table.endo_pos
    bad_aux = np.isnan(Call).any(axis=1) | np.isnan(Zall[:, exo_pos]).any(axis=1)
    if missing:
        if len(endo_pos) and np.isnan(Zall[:, endo_pos]).all(axis=0).any():
            raise EstimationError("a variable is missing in all rows")
        keep = ~bad_aux & (~np.isnan(Zall[:, endo_pos])).any(axis=1) if len(endo_pos) else ~bad_aux
    else:
        keep = ~bad_aux & ~np.isnan(Zall).any(axis=1)
    w = None
    if weights is not None:
        w = np.asarray(weights, dtype=float)
        keep &= ~np.isnan(w)
    vw = None
    if var_weights is not None:
        vw = np.asarray(var_weights, dtype=float)
        keep &= ~np.isnan(vw).any(axis=1)
    if keep.sum() == 0:
        raise EstimationError("no usable rows in data")
    Z, C = Zall[keep], Call[keep]
    ww = None if w is None else w[keep]
    vww = None if vw is None else vw[keep]
    ids = id_offset + np.flatnonzero(keep)
    xs = SufficientStats.from_rows(Z[:, exo_pos], ww)
    blocks = []
    mask = ~np.isnan(Z)
    patterns = np.unique(mask, axis=0)
    for pat in patterns[::-1]:
        sel = (mask == pat).all(axis=1)
        obs = np.flatnonzero(pat)
        cells = _cells_for(table, Z[sel][:, obs], C[sel],
                           None if ww is None else ww[sel], ids[sel],
                           None if vww is None else vww[sel][:, obs])
        blocks.append(Block(table, np.asarray(index), obs, cells, xs.mean, xs.cov, group))
    return GroupData(frame.iloc[np.flatnonzero(keep)].reset_index(drop=True), ids,
                     blocks, int((~keep).sum()), len(patterns))


# ---------------------------------------------------- global parameters
def global_parameters(tables: list[ParameterTable]):
    """Union of group parameters: labels are shared, others group-specific."""
    names, kinds, indices = [], [], []
    by_label: dict[str, int] = {}
    multi = len(tables) > 1
    for g, t in enumerate(tables):
        for lab in t.labels:
            for h, other in enumerate(tables):
                if lab and lab in other.constraints:
                    raise ModelError(
                        f"label {lab!r} is free in one group and derived in another")
    for g, t in enumerate(tables):
        idx = []
        for i in range(t.n_params):
            lab = t.labels[i]
            if lab and lab in by_label:
                j = by_label[lab]
                if kinds[j] != t.kinds[i]:
                    kinds[j] = "mixed"
            else:
                j = len(names)
                nm = lab or t.names[i]
                if multi and not lab:
                    nm = f"{nm}@{g + 1}"
                names.append(nm)
                kinds.append(t.kinds[i])
                if lab:
                    by_label[lab] = j
            idx.append(j)
        indices.append(np.array(idx, dtype=int))
    return names, kinds, indices


def starting_values(tables, indices, frames, p) -> np.ndarray:
    """Sample means for intercepts, 1 for regressions, half the sample
    variance for residual variances, 0 for covariances."""
    theta = np.full(p, np.nan)
    for t, idx, fr in zip(tables, indices, frames):
        Z = numeric_columns(fr, t.observed)
        mean = np.nanmean(Z, axis=0) if len(Z) else np.zeros(t.k)
        var = np.nanvar(Z, axis=0) if len(Z) else np.ones(t.k)
        var = np.where(np.isfinite(var) & (var > 0), var, 1.0)
        obs_pos = {v: i for i, v in enumerate(t.observed)}
        for s in t.slots:
            if s.source != "param" or not np.isnan(theta[idx[s.payload]]):
                continue
            name = t.vars[s.row]
            if s.mat == "v":
                val = mean[obs_pos[name]] if name in obs_pos else 0.0
            elif s.mat == "A":
                val = 1.0
            elif s.row != s.col:
                val = 0.0
            elif name in obs_pos:
                val = 0.5 * var[obs_pos[name]]
            else:
                kids = [obs_pos[t.vars[c.row]] for c in t.slots
                        if c.mat == "A" and c.col == s.row and t.vars[c.row] in obs_pos]
                val = 0.5 * float(np.mean(var[kids])) if kids else 1.0
            theta[idx[s.payload]] = val
    theta[np.isnan(theta)] = 0.0
    return theta


def _alternative_starts(tables, indices, theta0):
    """Fallback starts when the default one is not admissible."""
    alt1 = theta0.copy()
    alt2 = theta0.copy()
    for t, idx in zip(tables, indices):
        lat = set(t.latent)
        for s in t.slots:
            if s.source != "param":
                continue
            if s.mat == "A" and t.vars[s.col] not in lat:
                alt1[idx[s.payload]] = 0.0
            if s.mat == "A":
                alt2[idx[s.payload]] = 0.0 if t.vars[s.col] not in lat else 0.5
            if s.mat == "P" and s.row != s.col:
                alt1[idx[s.payload]] = 0.0
                alt2[idx[s.payload]] = 0.0
    return [alt1, alt2]


# ------------------------------------------------------------- optimizer
@dataclass
class OptimResult:
    theta: np.ndarray
    loglik: float
    score: np.ndarray
    iterations: int
    converged: bool
    message: str = ""
    trace: list = field(default_factory=list)


def _solve(I, S):
    try:
        return np.linalg.solve(I, S)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(I, S, rcond=None)[0]


def optimize(lik: Likelihood, theta0, options: FitOptions, free=None,
             log_mask=None, objective=None) -> OptimResult:
    """Maximise the log-likelihood over the ``free`` coordinates.

    Variance parameters listed in ``log_mask`` are optimised on the log
    scale.  Newton-type updates use step-halving whenever the objective
    fails to increase; a non positive definite model covariance counts as
    minus infinity.
    """
    theta = np.asarray(theta0, dtype=float).copy()
    p = len(theta)
    free = np.ones(p, bool) if free is None else np.asarray(free, bool)
    log_mask = np.zeros(p, bool) if log_mask is None else (np.asarray(log_mask, bool) & free)
    if not options.constrain_variances:
        log_mask = np.zeros(p, bool)
    theta[log_mask & (theta <= 0)] = 0.1
    fidx = np.flatnonzero(free)
    N = max(lik.n_total, 1.0)

    def to_theta(phi):
        th = theta.copy()
        th[fidx] = np.where(log_mask[fidx], np.exp(phi), phi)
        return th

    phi = np.where(log_mask[fidx], np.log(np.where(log_mask[fidx], theta[fidx], 1.0)), theta[fidx])
    if options.optimizer == "quasi":
        return _quasi(lik, to_theta, phi, fidx, options)

    th = to_theta(phi)
    ll = lik.loglik(th)
    if not np.isfinite(ll):
        raise EstimationError("starting values give a non-admissible model")
    converged = False
    best_score = np.inf
    extra = 0
    it = 0
    change = np.inf
    trace = [ll]
    for it in range(1, options.iter_max + 1):
        S = lik.score(th)[fidx]
        D = np.where(log_mask[fidx], th[fidx], 1.0)
        Sphi = D * S
        # judge stationarity on both scales: a variance far too large has a
        # tiny score on the natural scale but not on the log scale
        smax = max(np.max(np.abs(S)), np.max(np.abs(Sphi))) if len(S) else 0.0
        if converged:
            if smax >= best_score / 2 or extra >= 3:
                break
            extra += 1
        elif smax / N < options.tol and change < math.sqrt(options.tol):
            converged = True
            best_score = smax
            extra += 1
        best_score = min(best_score, smax)
        kind = "hessian" if options.optimizer == "newton_raphson" else "expected"
        I = lik.information(th, kind)[np.ix_(fidx, fidx)]
        Iphi = I * np.outer(D, D)
        if kind == "hessian":
            Iphi = Iphi - np.diag(np.where(log_mask[fidx], Sphi, 0.0))
            if _chol(Iphi) is None:
                I = lik.information(th, "expected")[np.ix_(fidx, fidx)]
                Iphi = I * np.outer(D, D)
        step = _solve(Iphi, Sphi)
        # at most a factor e^3 change of any variance per iteration
        big = np.max(np.abs(step[log_mask[fidx]])) if log_mask[fidx].any() else 0.0
        if big > 3.0:
            step = step * (3.0 / big)
        gamma = options.gamma
        accepted = False
        for _ in range(60):
            cand = phi + gamma * step
            th_c = to_theta(cand)
            ll_c = lik.loglik(th_c)
            if np.isfinite(ll_c) and ll_c >= ll - 1e-12 * abs(ll):
                accepted = True
                break
            gamma /= 2
        if options.trace:
            print(f"iter {it}: loglik={ll:.8f} max|score|={smax:.3e}")
        if not accepted:
            if smax / N < math.sqrt(options.tol):
                converged = True
            break
        change = abs(ll_c - ll) / (abs(ll) + options.tol)
        phi, th, ll = cand, th_c, ll_c
        trace.append(ll)
        if not converged and change < options.tol * 1e-3 and smax / N < math.sqrt(options.tol):
            converged = True
    score = lik.score(th)
    return OptimResult(th, ll, score, it, converged,
                       "converged" if converged else "iteration limit or stalled", trace)


def _quasi(lik, to_theta, phi0, fidx, options):
    N = max(lik.n_total, 1.0)

    def f(phi):
        ll = lik.loglik(to_theta(phi))
        return 1e100 if not np.isfinite(ll) else -ll / N

    res = spopt.minimize(f, phi0, method="BFGS",
                         options={"maxiter": options.iter_max * 10, "gtol": 1e-10})
    th = to_theta(res.x)
    score = lik.score(th)
    ok = np.max(np.abs(score[fidx])) / N < 1e-5 if len(fidx) else True
    return OptimResult(th, lik.loglik(th), score, int(res.nit), bool(ok), str(res.message))


# ------------------------------------------------------------ fit result
@dataclass
class FitResult:
    models: list[Model]
    tables: list[ParameterTable]
    lik: Likelihood
    names: list[str]
    kinds: list[str]
    indices: list[np.ndarray]
    theta: np.ndarray
    vcov: np.ndarray
    vcov_type: str
    loglik: float
    score: np.ndarray
    converged: bool
    iterations: int
    options: FitOptions
    groups: list[GroupData]
    estimator: str = "gaussian"
    cluster: np.ndarray | None = None
    fixed: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def model(self) -> Model:
        return self.models[0]

    @property
    def table(self) -> ParameterTable:
        return self.tables[0]

    @property
    def n(self) -> int:
        return int(sum(len(g.ids) for g in self.groups))

    @property
    def npar(self) -> int:
        free = np.ones(len(self.theta), bool) if self.fixed is None else ~self.fixed
        return int(free.sum())

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0, None))

    def index(self, name: str) -> int:
        if name in self.names:
            return self.names.index(name)
        for t, idx in zip(self.tables, self.indices):
            if name in t.index:
                return int(idx[t.index[name]])
        raise KeyError(f"unknown parameter {name!r}")

    def value(self, name: str) -> float:
        return float(self.theta[self.index(name)])

    def coef(self) -> pd.DataFrame:
        se = self.se
        with np.errstate(divide="ignore", invalid="ignore"):
            z = self.theta / se
        pval = 2 * stats.norm.sf(np.abs(z))
        pval = np.where(np.array(self.kinds) == "variance", np.nan, pval)
        return pd.DataFrame({"Estimate": self.theta, "Std. Error": se,
                             "Z value": z, "P-value": pval}, index=self.names)

    def information(self, kind: str = "expected") -> np.ndarray:
        return self.lik.information(self.theta, kind)

    def aic(self) -> float:
        return -2 * self.loglik + 2 * self.npar

    def bic(self) -> float:
        n_obs = 0
        for g in self.groups:
            for b in g.blocks:
                n_endo = len(b.obs) - len(b.table.exogenous)
                n_obs += sum(c.stats.n for c in b.cells) * n_endo
        return -2 * self.loglik + self.npar * math.log(max(n_obs, 1))

    def summary(self) -> str:
        tab = self.coef()
        lines = [f"Estimator: {self.estimator}", f"Number of rows in data = {self.n}",
                 "-" * 60, tab.to_string(float_format=lambda v: f"{v: .5f}"),
                 "-" * 60,
                 f"Log-Likelihood = {self.loglik:.4f}", f"AIC = {self.aic():.3f}",
                 f"BIC = {self.bic():.3f}", f"vcov: {self.vcov_type}",
                 f"converged: {self.converged} ({self.iterations} iterations)"]
        return "\n".join(lines)

    __str__ = summary


def invert_information(I: np.ndarray) -> np.ndarray:
    try:
        c = np.linalg.cond(I)
    except np.linalg.LinAlgError:
        c = np.inf
    if not np.isfinite(c) or c > 1e14:
        warnings.warn("information matrix is singular; using a pseudo-inverse")
        return np.linalg.pinv(I)
    return np.linalg.inv(I)


def sandwich(bread_info: np.ndarray, S_rows: np.ndarray, clusters=None) -> np.ndarray:
    """H^-1 (K/(K-1) sum_c S_c S_c') H^-1 with per-cluster summed scores."""
    if clusters is None:
        Sc = S_rows
    else:
        codes, inv = np.unique(clusters, return_inverse=True)
        Sc = np.zeros((len(codes), S_rows.shape[1]))
        np.add.at(Sc, np.asarray(inv).ravel(), S_rows)
    K = Sc.shape[0]
    meat = Sc.T @ Sc * (K / (K - 1) if K > 1 else 1.0)
    Hinv = invert_information(bread_info)
    return Hinv @ meat @ Hinv


def compute_vcov(fit_lik: Likelihood, theta, kind: str, cluster_of_row=None,
                 free=None) -> np.ndarray:
    p = len(theta)
    free = np.ones(p, bool) if free is None else free
    f = np.flatnonzero(free)
    V = np.zeros((p, p))
    if kind == "robust":
        H = fit_lik.information(theta, "hessian")[np.ix_(f, f)]
        ids, S = fit_lik.score_rows(theta)
        cl = None if cluster_of_row is None else cluster_of_row(ids)
        V[np.ix_(f, f)] = sandwich(H, S[:, f], cl)
    else:
        V[np.ix_(f, f)] = invert_information(fit_lik.information(theta, kind)[np.ix_(f, f)])
    return V


def _as_list(x):
    return list(x) if isinstance(x, (list, tuple)) else [x]


def _start_vector(start, names, tables, indices, theta0):
    theta = theta0.copy()
    if start is None:
        return theta
    if isinstance(start, dict):
        for k, v in start.items():
            for t, idx in zip(tables, indices):
                if k in t.index:
                    theta[idx[t.index[k]]] = v
                    break
            else:
                if k in names:
                    theta[names.index(k)] = v
                else:
                    raise KeyError(f"unknown parameter {k!r} in start values")
        return theta
    start = np.asarray(start, dtype=float)
    if start.shape != theta.shape:
        raise ValueError("start vector has the wrong length")
    return start.copy()


def estimate(model, data, *, param: str = "relative", missing: bool = False,
             cluster: str | None = None, weights=None, start=None, fixed=None,
             options: FitOptions | None = None, identified: bool = False,
             **kw) -> FitResult:
    """Fit one model (or a list of models, one per data set) by ML.

    ``weights`` maps variable names to weight columns (or is a single
    column name for all variables) and switches to the weighted
    estimating-equation estimator.  ``fixed`` maps parameter names to values
    held constant during optimisation.
    """
    opts = replace(options or FitOptions(), **{k: v for k, v in kw.items()
                                                if k in FitOptions.__dataclass_fields__})
    unknown = set(kw) - set(FitOptions.__dataclass_fields__)
    if unknown:
        raise TypeError(f"unknown options: {', '.join(sorted(unknown))}")
    opts.missing = missing or opts.missing
    opts.param = param
    models = _as_list(model)
    frames = [as_frame(d) for d in _as_list(data)]
    if len(models) != len(frames):
        raise ValueError("need one data set per model")
    ident = models if identified else [identify(m, param) for m in models]
    tables = [compile_model(m) for m in ident]
    names, kinds, indices = global_parameters(tables)
    if not names:
        raise ModelError("model has no free parameters")
    groups = []
    offset = 0
    for g, (t, fr) in enumerate(zip(tables, frames)):
        vw = None
        if weights is not None:
            vw = _variable_weights(t, fr, weights)
        gd = prepare_group(t, fr, indices[g], missing=opts.missing,
                           var_weights=vw, group=g, id_offset=offset)
        offset += len(fr)
        groups.append(gd)
    blocks = [b for gd in groups for b in gd.blocks]
    lik = Likelihood(blocks, names)
    p = len(names)
    theta0 = starting_values(tables, indices, [gd.frame for gd in groups], p)
    theta0 = _start_vector(start, names, tables, indices, theta0)
    free = np.ones(p, bool)
    if fixed:
        fx = _start_vector(fixed, names, tables, indices, np.full(p, np.nan))
        free = np.isnan(fx)
        theta0[~free] = fx[~free]
    log_mask = np.array([k == "variance" for k in kinds])

    cluster_ids = None
    if cluster is not None:
        cl = []
        for gd, fr in zip(groups, frames):
            if cluster not in fr.columns:
                raise KeyError(f"cluster column {cluster!r} not in data")
            cl.append(np.asarray(fr[cluster].astype(str)))
        allc = np.concatenate(cl)
        cluster_ids = allc

    if weights is not None:
        opts.estimator = "weighted"
        res = _solve_weighted(lik, theta0, opts, free, log_mask)
    else:
        res = None
        for cand in [theta0] + (_alternative_starts(tables, indices, theta0)
                                if start is None else []):
            if np.isfinite(lik.loglik(cand)):
                res = optimize(lik, cand, opts, free, log_mask)
                break
        if res is None:
            raise EstimationError("no admissible starting values found")
    if not res.converged and opts.iter_max > 0:
        warnings.warn("optimizer did not converge")

    def row_cluster(ids):
        return cluster_ids[ids]

    incomplete = opts.missing and any(gd.patterns > 1 for gd in groups)
    vtype = opts.vcov or ("robust" if cluster else "hessian" if incomplete else "expected")
    if opts.estimator == "weighted":
        vtype = "robust"
        V = _weighted_vcov(lik, res.theta, free, row_cluster if cluster else None)
    else:
        V = compute_vcov(lik, res.theta, vtype, row_cluster if cluster else None, free)
    ll = res.loglik - lik.exo_loglik()
    fit = FitResult(ident, tables, lik, names, kinds, indices, res.theta, V, vtype,
                    ll, res.score, res.converged, res.iterations, opts, groups,
                    estimator=opts.estimator, cluster=cluster_ids,
                    fixed=~free if fixed else None)
    fit.extra["loglik_joint"] = res.loglik
    fit.extra["trace"] = res.trace
    fit.extra["cluster_name"] = cluster
    return fit


# ------------------------------------------------- weighted estimation
def _variable_weights(table, frame, weights):
    n = len(frame)
    k = table.k
    VW = np.ones((n, k))
    if isinstance(weights, str):
        col = numeric_columns(frame, [weights])[:, 0]
        VW *= col[:, None]
        VW[:, table.exo_pos] = 1.0
        return VW
    if isinstance(weights, dict):
        for var, colname in weights.items():
            j = table.observed.index(var)
            VW[:, j] = numeric_columns(frame, [colname])[:, 0]
        return VW
    W = np.asarray(weights, dtype=float)
    if W.ndim == 1:
        VW *= W[:, None]
        VW[:, table.exo_pos] = 1.0
        return VW
    return W


def _solve_weighted(lik, theta0, opts, free, log_mask):
    """Root of the summed weighted estimating equations by scoring steps."""
    theta = theta0.copy()
    f = np.flatnonzero(free)
    N = max(lik.n_total, 1.0)

    def U(th):
        _, S = lik.weighted_score_rows(th)
        return S.sum(axis=0)[f]

    u = U(theta)
    conv = False
    it = 0
    for it in range(1, opts.iter_max + 1):
        if np.max(np.abs(u)) / N < opts.tol:
            conv = True
            break
        I = lik.information(theta, "expected")[np.ix_(f, f)]
        step = _solve(I, u)
        gamma = 1.0
        for _ in range(40):
            cand = theta.copy()
            cand[f] += gamma * step
            if np.isfinite(lik.loglik(cand)):
                uc = U(cand)
                if np.max(np.abs(uc)) < np.max(np.abs(u)) or gamma < 1e-3:
                    break
            gamma /= 2
        theta, u = cand, uc
    return OptimResult(theta, lik.loglik(theta), lik.weighted_score_rows(theta)[1].sum(0),
                       it, conv)


def _weighted_vcov(lik, theta, free, row_cluster=None):
    f = np.flatnonzero(free)
    p = len(theta)
    J = np.zeros((len(f), len(f)))
    for a, j in enumerate(f):
        h = 1e-6 * max(1.0, abs(theta[j]))
        up, dn = theta.copy(), theta.copy()
        up[j] += h
        dn[j] -= h
        J[:, a] = -(lik.weighted_score_rows(up)[1].sum(0)[f]
                    - lik.weighted_score_rows(dn)[1].sum(0)[f]) / (2 * h)
    ids, S = lik.weighted_score_rows(theta)
    V = np.zeros((p, p))
    V[np.ix_(f, f)] = sandwich(J, S[:, f], None if row_cluster is None else row_cluster(ids))
    return V


# ------------------------------------------------------ model-level helpers
def loglik(table: ParameterTable, theta, st: SufficientStats, exo_mean=None, exo_cov=None):
    mb = model_moments(table, theta, None, exo_mean, exo_cov, derivatives=False)
    return gaussian_loglik(mb.omega, mb.xi, st)


def score(table: ParameterTable, theta, st: SufficientStats, exo_mean=None, exo_cov=None):
    mb = model_moments(table, theta, None, exo_mean, exo_cov)
    return cell_score(mb.omega, mb.xi, mb.d_omega_arr, mb.d_xi, st)


def information(table: ParameterTable, theta, n: float, exo_mean=None, exo_cov=None):
    mb = model_moments(table, theta, None, exo_mean, exo_cov)
    return cell_information(mb.omega, mb.d_omega_arr, mb.d_xi, n)
