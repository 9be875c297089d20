"""Model-implied moments and their analytic derivatives."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelError
from .ram import CancellationMatrix, ParameterTable, SelectionMatrix


def vec(a: np.ndarray) -> np.ndarray:
    """Column-stacking vectorisation."""
    return np.asarray(a).reshape(-1, order="F")


def commutation_permutation(m: int, n: int) -> np.ndarray:
    """Index array ``perm`` with ``vec(A.T) == vec(A)[perm]`` for A (m x n)."""
    i, j = np.meshgrid(np.arange(m), np.arange(n), indexing="ij")
    perm = np.empty(m * n, dtype=int)
    perm[(j + i * n).ravel()] = (i + j * m).ravel()
    return perm


def commutation_matrix(m: int, n: int) -> np.ndarray:
    """The mn x mn permutation matrix K with ``K vec(A) = vec(A.T)``."""
    K = np.zeros((m * n, m * n))
    K[np.arange(m * n), commutation_permutation(m, n)] = 1.0
    return K


@dataclass
class MomentBundle:
    A: np.ndarray
    P: np.ndarray
    v: np.ndarray
    M: np.ndarray          # (I - A)^{-1}
    G: np.ndarray          # J (I - A)^{-1}
    omega: np.ndarray
    xi: np.ndarray
    d_omega_arr: np.ndarray | None = None   # (p, k, k)
    d_xi: np.ndarray | None = None          # (k, p)

    @property
    def d_omega(self) -> np.ndarray:
        """d vec(Omega) / d theta' as a (k^2 x p) matrix."""
        p, k, _ = self.d_omega_arr.shape
        return self.d_omega_arr.transpose(2, 1, 0).reshape(k * k, p)


def _inverse_structure(A: np.ndarray) -> np.ndarray:
    m = A.shape[0]
    IA = np.eye(m) - A
    try:
        M = np.linalg.solve(IA, np.eye(m))
    except np.linalg.LinAlgError:
        raise ModelError("I - A is singular") from None
    if not np.all(np.isfinite(M)):
        raise ModelError("I - A is singular")
    return M


def model_moments(table: ParameterTable, theta, row=None, exo_mean=None,
                  exo_cov=None, derivatives: bool = True) -> MomentBundle:
    """Omega = G P G', xi = G v and (optionally) their first derivatives."""
    A, P, v = table.materialize(theta, row, exo_mean, exo_cov)
    M = _inverse_structure(A)
    obs = np.arange(table.k)
    G = M[obs]
    omega = G @ P @ G.T
    omega = (omega + omega.T) / 2
    xi = G @ v
    out = MomentBundle(A, P, v, M, G, omega, xi)
    if derivatives:
        out.d_omega_arr, out.d_xi = _first_derivatives(table, theta, row, out)
    return out


def _first_derivatives(table, theta, row, mb: MomentBundle):
    slots, J = table.slot_jacobian(theta, row)
    k = table.k
    p = table.n_params
    G, M, P, v = mb.G, mb.M, mb.P, mb.v
    Q = G @ P @ M.T            # column c: G P M[c, :]'
    Mv = M @ v
    X = np.zeros((len(slots), k, k))   # non-symmetrised dOmega pieces
    dxi = np.zeros((len(slots), k))
    for s_i, s in enumerate(slots):
        if s.mat == "A":
            X[s_i] = np.outer(G[:, s.row], Q[:, s.col])
            dxi[s_i] = G[:, s.row] * Mv[s.col]
        elif s.mat == "P":
            X[s_i] = np.outer(G[:, s.row], G[:, s.col])
        else:
            dxi[s_i] = G[:, s.row]
    # (I + K) vec X, i.e. X + X'; a diagonal P slot enters once
    sym = X + X.transpose(0, 2, 1)
    for s_i, s in enumerate(slots):
        if s.mat == "P" and s.row == s.col:
            sym[s_i] = X[s_i]
    d_omega = np.einsum("sp,sab->pab", J, sym) if len(slots) else np.zeros((p, k, k))
    d_xi = (J.T @ dxi).T if len(slots) else np.zeros((k, p))
    return d_omega, d_xi


def d_moments(table: ParameterTable, theta, row=None, exo_mean=None, exo_cov=None):
    """(d vec Omega / d theta', d xi / d theta')."""
    mb = model_moments(table, theta, row, exo_mean, exo_cov)
    return mb.d_omega, mb.d_xi


def _parameter_matrices(table: ParameterTable):
    """dA/dtheta_i, dP/dtheta_i, dv/dtheta_i for a linear parameterisation."""
    if table.has_derived:
        raise ModelError("analytic second derivatives need linear constraints only")
    p, m = table.n_params, table.m
    dA = np.zeros((p, m, m))
    dP = np.zeros((p, m, m))
    dv = np.zeros((p, m))
    for s in table.slots:
        if s.source != "param":
            continue
        i = s.payload
        if s.mat == "A":
            dA[i, s.row, s.col] += 1
        elif s.mat == "P":
            dP[i, s.row, s.col] += 1
            if s.row != s.col:
                dP[i, s.col, s.row] += 1
        else:
            dv[i, s.row] += 1
    return dA, dP, dv


def d2_moments(table: ParameterTable, theta, row=None, exo_mean=None, exo_cov=None):
    """Second derivatives of Omega (p, p, k, k) and xi (p, p, k).

    d2G_ij = G (A_i M A_j + A_j M A_i) M with M = (I - A)^{-1}; the second
    derivatives of Omega = G P G' and xi = G v then follow from the product
    rule.
    """
    mb = model_moments(table, theta, row, exo_mean, exo_cov, derivatives=False)
    dA, dP, dv = _parameter_matrices(table)
    G, M, P, v = mb.G, mb.M, mb.P, mb.v
    D = np.einsum("pab,bc->pac", dA, M)                 # A_i M
    Gi = np.einsum("ka,pab->pkb", G, D)                  # dG_i = G A_i M
    DD = np.einsum("pab,qbc->pqac", D, D)                # A_i M A_j M
    Gij = np.einsum("ka,pqab->pqkb", G, DD + DD.transpose(1, 0, 2, 3))
    a = np.einsum("pqka,ab,lb->pqkl", Gij, P, G)          # G_ij P G'
    t = np.einsum("pka,qab,lb->pqkl", Gi, dP, G)          # G_i P_j G'
    u = np.einsum("pka,ab,qlb->pqkl", Gi, P, Gi)          # G_i P G_j'
    base = a + t + t.transpose(1, 0, 2, 3) + u
    d2o = base + base.transpose(0, 1, 3, 2)
    d2x = (np.einsum("pqka,a->pqk", Gij, v)
           + np.einsum("pka,qa->pqk", Gi, dv)
           + np.einsum("qka,pa->pqk", Gi, dv))
    # exact symmetry in the two parameter indices
    d2o = (d2o + d2o.transpose(1, 0, 2, 3)) / 2
    d2x = (d2x + d2x.transpose(1, 0, 2)) / 2
    return d2o, d2x


def conditional_moments(table: ParameterTable, theta, given: dict[str, float]):
    """Mean and covariance of the remaining observed variables given values
    of (a subset of) the exogenous variables."""
    exo = set(table.exogenous)
    for x in given:
        if x not in exo:
            raise ModelError(f"{x!r} is not exogenous")
    A, P, v = table.materialize(theta, given if table.rowwise else None)
    M = _inverse_structure(A)
    pos = {name: i for i, name in enumerate(table.vars)}
    xs = [pos[x] for x in given]
    cancel = CancellationMatrix(table.m, xs)
    vx = np.zeros(table.m)
    for x, val in given.items():
        vx[pos[x]] = val
    obs_keep = [i for i, name in enumerate(table.observed) if name not in given]
    JY = SelectionMatrix(table.m, [i for i in range(table.m) if i not in obs_keep])
    mean = JY.apply(M @ (cancel.apply(v) + vx))
    pP = cancel.apply(cancel.apply(P).T).T
    cov = JY.apply(JY.apply(M @ pP @ M.T).T).T
    names = [table.observed[i] for i in obs_keep]
    return names, mean, cov
