"""Reticular action model matrices and the compiled parameter table.

The structural vector U holds the observed variables (declaration order)
followed by the latent ones.  With regression matrix A (row = response,
column = predictor), residual covariance P and intercepts v the model reads
``U = v + A U + e`` with ``Var(e) = P``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .model import Model, ModelError, slot_name


# ------------------------------------------------------ zero-one matrices
class SelectionMatrix:
    """Identity of size n with the rows in ``drop`` removed (0-based)."""

    def __init__(self, n: int, drop: Iterable[int]):
        drop = sorted(set(int(i) for i in drop))
        if any(i < 0 or i >= n for i in drop):
            raise IndexError("selection index out of range")
        self.n = n
        self.keep = np.array([i for i in range(n) if i not in drop], dtype=int)

    def dense(self) -> np.ndarray:
        return np.eye(self.n)[self.keep]

    __array__ = lambda self, dtype=None, copy=None: self.dense()

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Equivalent to ``J @ x`` without forming J."""
        return np.asarray(x)[self.keep]


class CancellationMatrix:
    """Identity of size n with the diagonal entries in ``zero`` set to 0."""

    def __init__(self, n: int, zero: Iterable[int]):
        zero = sorted(set(int(i) for i in zero))
        if any(i < 0 or i >= n for i in zero):
            raise IndexError("cancellation index out of range")
        self.n = n
        self.diag = np.ones(n)
        self.diag[zero] = 0.0

    def dense(self) -> np.ndarray:
        return np.diag(self.diag)

    __array__ = lambda self, dtype=None, copy=None: self.dense()

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        return x * self.diag.reshape((-1,) + (1,) * (x.ndim - 1))


def selection_matrix(n: int, drop: Iterable[int]) -> np.ndarray:
    return SelectionMatrix(n, drop).dense()


def cancellation_matrix(n: int, zero: Iterable[int]) -> np.ndarray:
    return CancellationMatrix(n, zero).dense()


# ------------------------------------------------------- parameter table
@dataclass
class Slot:
    mat: str          # 'A', 'P' or 'v'
    row: int
    col: int          # -1 for intercepts
    source: str       # 'param', 'fixed', 'covariate', 'derived'
    payload: object   # theta index, value, column name or constraint label


@dataclass
class ParameterTable:
    """Compiled model: where every free parameter lives in (A, P, v)."""

    model: Model
    vars: list[str]
    observed: list[str]
    latent: list[str]
    exogenous: list[str]
    keys: list[str]
    names: list[str]
    labels: list[str | None]
    kinds: list[str]
    slots: list[Slot]
    constraints: dict
    derived_order: list[str]
    arg_sources: dict
    covariate_columns: list[str]
    rowwise: bool
    index: dict = field(default_factory=dict)

    @property
    def n_params(self) -> int:
        return len(self.keys)

    @property
    def m(self) -> int:
        return len(self.vars)

    @property
    def k(self) -> int:
        return len(self.observed)

    @property
    def exo_pos(self) -> np.ndarray:
        """Positions of exogenous variables within the observed vector."""
        return np.array([self.observed.index(x) for x in self.exogenous], dtype=int)

    @property
    def endo_pos(self) -> np.ndarray:
        exo = set(self.exogenous)
        return np.array([i for i, v in enumerate(self.observed) if v not in exo], dtype=int)

    @property
    def has_derived(self) -> bool:
        return any(s.source == "derived" for s in self.slots)

    def param_names(self) -> list[str]:
        """Label when present, otherwise display name."""
        return [lab or nm for lab, nm in zip(self.labels, self.names)]

    def lookup(self, name: str) -> int:
        """Parameter index from a label, display name or positional key."""
        if name in self.index:
            return self.index[name]
        raise KeyError(f"unknown parameter {name!r}")

    def variance_mask(self) -> np.ndarray:
        return np.array([k == "variance" for k in self.kinds])

    def materialize(self, theta, row: dict | None = None, exo_mean=None,
                    exo_cov=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Numeric (A, P, v) at ``theta`` for one data row."""
        theta = np.asarray(theta, dtype=float)
        m = self.m
        A = np.zeros((m, m))
        P = np.zeros((m, m))
        v = np.zeros(m)
        derived = self.derived_values(theta, row) if self.derived_order else {}
        for s in self.slots:
            if s.source == "param":
                val = theta[s.payload]
            elif s.source == "fixed":
                val = s.payload
            elif s.source == "derived":
                val = derived[s.payload]
            else:
                if row is None or s.payload not in row:
                    raise ModelError(f"covariate {s.payload!r} needed for this model")
                val = row[s.payload]
            if s.mat == "A":
                A[s.row, s.col] = val
            elif s.mat == "P":
                P[s.row, s.col] = val
                P[s.col, s.row] = val
            else:
                v[s.row] = val
        if self.exogenous:
            idx = [self.vars.index(x) for x in self.exogenous]
            q = len(idx)
            mean = np.zeros(q) if exo_mean is None else np.asarray(exo_mean, float)
            cov = np.eye(q) if exo_cov is None else np.asarray(exo_cov, float)
            v[idx] = mean
            P[np.ix_(idx, idx)] = cov
        return A, P, v

    # ----------------------------------------------- derived parameters
    def _arg_value(self, arg, theta, row, values):
        src, ref = self.arg_sources[arg]
        if src == "theta":
            return theta[ref]
        if src == "derived":
            return values[ref]
        if row is None or ref not in row:
            raise ModelError(f"covariate {ref!r} needed for constraint")
        return row[ref]

    def derived_values(self, theta, row=None) -> dict[str, float]:
        values: dict[str, float] = {}
        for label in self.derived_order:
            c = self.constraints[label]
            args = [self._arg_value(a, theta, row, values) for a in c.args]
            values[label] = c(args)
        return values

    def derived_jacobian(self, theta, row=None) -> dict[str, np.ndarray]:
        """Gradient of every derived parameter with respect to theta."""
        values: dict[str, float] = {}
        grads: dict[str, np.ndarray] = {}
        p = self.n_params
        for label in self.derived_order:
            c = self.constraints[label]
            args = np.array([self._arg_value(a, theta, row, values) for a in c.args])
            values[label] = c(args)
            if c.grad is not None:
                g_args = np.asarray(c.grad(args), dtype=float).ravel()
            else:
                g_args = numeric_gradient(c, args)
            g = np.zeros(p)
            for a, ga in zip(c.args, g_args):
                src, ref = self.arg_sources[a]
                if src == "theta":
                    g[ref] += ga
                elif src == "derived":
                    g += ga * grads[ref]
            grads[label] = g
        return grads

    def free_slots(self) -> list[Slot]:
        return [s for s in self.slots if s.source in ("param", "derived")]

    def slot_jacobian(self, theta, row=None) -> tuple[list[Slot], np.ndarray]:
        """Free slots and d(slot value)/d(theta) as a (slots x p) matrix."""
        slots = self.free_slots()
        J = np.zeros((len(slots), self.n_params))
        grads = self.derived_jacobian(theta, row) if self.derived_order else {}
        for i, s in enumerate(slots):
            if s.source == "param":
                J[i, s.payload] = 1.0
            else:
                J[i] = grads[s.payload]
        return slots, J


def numeric_gradient(fn, x, rel: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    g = np.zeros(len(x))
    for i in range(len(x)):
        h = rel * max(1.0, abs(x[i]))
        up, dn = x.copy(), x.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (fn(up) - fn(dn)) / (2 * h)
    return g


def compile_model(model: Model) -> ParameterTable:
    """Build the parameter table of a model."""
    vars_ = model.vars()
    pos = {v: i for i, v in enumerate(vars_)}
    observed = model.manifest()
    latent = model.latent_vars()
    exogenous = model.exogenous()
    listing = model.parameter_listing()
    keys = [e["key"] for e in listing]
    names = [e["name"] for e in listing]
    labels = [e["label"] for e in listing]

    kinds = []
    for e in listing:
        ks = {k for k, _ in e["slots"]}
        if not e["slots"]:
            kinds.append("extra")
        elif ks == {"v"}:
            kinds.append("mean")
        elif ks == {"A"}:
            kinds.append("regression")
        elif ks == {"P"} and all(a == b for _, (a, b) in e["slots"]):
            kinds.append("variance")
        elif ks == {"P"}:
            kinds.append("covariance")
        else:
            kinds.append("mixed")

    label_index = {lab: i for i, lab in enumerate(labels) if lab}
    slot_param = {}
    for i, e in enumerate(listing):
        for kind, key in e["slots"]:
            slot_param[(kind, key)] = i

    constraints = dict(model.constraints)
    slots: list[Slot] = []
    for kind, key, b in model._slot_listing():
        if kind == "v":
            r, c = pos[key], -1
        else:
            r, c = pos[key[0]], pos[key[1]]
        if b.kind == "fixed":
            slots.append(Slot(kind, r, c, "fixed", b.value))
        elif b.kind == "covariate":
            if kind != "A":
                raise ModelError("only regression slots can be bound to covariates")
            slots.append(Slot(kind, r, c, "covariate", b.value))
        elif b.is_label and b.value in constraints:
            slots.append(Slot(kind, r, c, "derived", b.value))
        else:
            slots.append(Slot(kind, r, c, "param", slot_param[(kind, key)]))

    variables = set(model.declared()) | set(model.covariate_columns)
    arg_sources = {}
    for c in constraints.values():
        for a in c.args:
            if a in label_index:
                arg_sources[a] = ("theta", label_index[a])
            elif a in constraints:
                arg_sources[a] = ("derived", a)
            elif a in variables:
                arg_sources[a] = ("covariate", a)
            else:
                raise ModelError(f"constraint argument {a!r} is unknown")

    order: list[str] = []
    state: dict[str, int] = {}

    def visit(label):
        if state.get(label) == 2:
            return
        if state.get(label) == 1:
            raise ModelError(f"circular constraint involving {label!r}")
        state[label] = 1
        for a in constraints[label].args:
            if arg_sources[a][0] == "derived":
                visit(a)
        state[label] = 2
        order.append(label)

    for label in constraints:
        visit(label)

    cov_cols = sorted({s.payload for s in slots if s.source == "covariate"})
    dependent: dict[str, bool] = {}
    for label in order:
        dependent[label] = any(
            arg_sources[a][0] == "covariate"
            or (arg_sources[a][0] == "derived" and dependent[a])
            for a in constraints[label].args)
        for a in constraints[label].args:
            if arg_sources[a][0] == "covariate" and a not in cov_cols:
                cov_cols.append(a)
    used = {s.payload for s in slots if s.source == "derived"}
    rowwise = any(s.source == "covariate" for s in slots) or any(
        dependent[lab] for lab in used)

    index: dict[str, int] = {}
    for i in range(len(keys)):
        index[keys[i]] = i
        index.setdefault(names[i], i)
        if labels[i]:
            index[labels[i]] = i
    for i, e in enumerate(listing):
        for kind, key in e["slots"]:
            index.setdefault(slot_name(kind, key), i)

    return ParameterTable(
        model=model, vars=vars_, observed=observed, latent=latent,
        exogenous=exogenous, keys=keys, names=names, labels=labels,
        kinds=kinds, slots=slots, constraints=constraints,
        derived_order=order, arg_sources=arg_sources,
        covariate_columns=cov_cols, rowwise=rowwise, index=index)


def materialize(table: ParameterTable, theta, row=None, exo_mean=None, exo_cov=None):
    return table.materialize(theta, row, exo_mean, exo_cov)
