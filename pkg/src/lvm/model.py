"""Model specification: variables, edges, parameter bindings and hooks.

A :class:`Model` is a mutable builder.  Edit methods change the model in
place and return it so calls can be chained; use :meth:`Model.copy` to keep
an earlier version.  Variable declaration order is part of the model state:
it fixes the position of every variable in the structural vector and the
ordering of the parameter vector.
"""
from __future__ import annotations

import copy as _copy
import math
import re
import warnings
from dataclasses import dataclass, field
from itertools import combinations
from typing import Any, Callable, Iterable, Sequence

import numpy as np

OBSERVED = "observed"
LATENT = "latent"


class ModelError(ValueError):
    """Raised for structurally invalid models or edits."""


@dataclass(frozen=True)
class Binding:
    """How a single parameter slot gets its value.

    kind is one of ``free`` (own unnamed parameter), ``label`` (parameter
    shared by every slot carrying the same label), ``fixed`` (literal value)
    or ``covariate`` (per-row value read from a data column).
    """

    kind: str
    value: Any = None

    @classmethod
    def of(cls, value) -> "Binding":
        if isinstance(value, Binding):
            return value
        if value is None:
            return FREE
        if isinstance(value, str):
            if value.strip().upper() in ("NA", "NAN", ""):
                return FREE
            return cls("label", value)
        if isinstance(value, (int, float, np.integer, np.floating)):
            if isinstance(value, (float, np.floating)) and math.isnan(value):
                return FREE
            return cls("fixed", float(value))
        raise ModelError(f"cannot bind a parameter slot to {value!r}")

    @property
    def is_free(self) -> bool:
        return self.kind == "free"

    @property
    def is_fixed(self) -> bool:
        return self.kind == "fixed"

    @property
    def is_label(self) -> bool:
        return self.kind == "label"


FREE = Binding("free")


def covariate(column: str) -> Binding:
    """Bind a regression slot to a data column (random slope)."""
    return Binding("covariate", column)


@dataclass
class Constraint:
    """A derived parameter ``target = fn(args)``.

    ``fn`` receives a 1-d array of argument values.  ``grad`` optionally
    returns the gradient with respect to the arguments and ``inv`` maps the
    estimate and its confidence limits back to another scale.
    """

    target: str
    args: tuple
    fn: Callable
    grad: Callable | None = None
    inv: Callable | None = None
    name: str | None = None
    covariates: tuple = ()

    def __call__(self, values) -> float:
        return float(self.fn(np.asarray(values, dtype=float)))


@dataclass
class HeavyTail:
    variables: tuple
    df: float


_UNSET = object()


def _split_names(text: str) -> list[str]:
    text = text.strip()
    m = re.fullmatch(r"c\((.*)\)", text)
    if m:
        text = m.group(1)
    return [t for t in re.split(r"[+,\s]+", text) if t]


def parse_formula(formula) -> tuple[list[str], list[str]]:
    """Split ``"y1 + y2 ~ x + z"`` into response and predictor name lists.

    A bare list of names or a one-sided ``"~ a + b"`` gives an empty
    response list.
    """
    if isinstance(formula, str):
        if "~" in formula:
            lhs, rhs = formula.split("~", 1)
            return _split_names(lhs), _split_names(rhs)
        return [], _split_names(formula)
    return [], list(formula)


def _names(value) -> list[str]:
    if value is None:
        return []
    if isinstance(value, str):
        lhs, rhs = parse_formula(value)
        return lhs + rhs
    return list(value)


def _value_list(value, count: int) -> list:
    if isinstance(value, (list, tuple)):
        if len(value) != count:
            raise ModelError(
                f"got {len(value)} values for {count} parameter slots")
        return list(value)
    return [value] * count


class Model:
    """A linear structural equation model with optional latent variables."""

    def __init__(self, *formulas, latent: Iterable[str] = ()):
        self._vars: dict[str, str] = {}
        self._reg: dict[tuple[str, str], Binding] = {}
        self._cov: dict[tuple[str, str], Binding] = {}
        self._icpt: dict[str, Binding] = {}
        self.constraints: dict[str, Constraint] = {}
        self.extra_parameters: list[str] = []
        self.distributions: dict[str, Any] = {}
        self.heavytails: list[HeavyTail] = []
        self.functionals: dict[tuple[str, str], tuple[Callable, str | None]] = {}
        self.copies: dict[str, str] = {}
        self.covariate_columns: list[str] = []
        for f in formulas:
            self.regression(f)
        if latent:
            self.latent(latent)

    # ------------------------------------------------------------ basics
    def copy(self) -> "Model":
        return _copy.deepcopy(self)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Model):
            return NotImplemented
        return self.structure() == other.structure()

    def structure(self) -> dict:
        """Comparable snapshot of the model state."""
        return {
            "vars": list(self._vars.items()),
            "reg": dict(self._reg),
            "cov": {frozenset(k): v for k, v in self._cov.items()},
            "icpt": dict(self._icpt),
            "constraints": {k: (c.args, c.name) for k, c in self.constraints.items()},
            "extra": list(self.extra_parameters),
            "dist": {k: repr(v) for k, v in self.distributions.items()},
            "heavy": [(h.variables, h.df) for h in self.heavytails],
            "func": {k: v[1] for k, v in self.functionals.items()},
            "copies": dict(self.copies),
        }

    def addvar(self, names, kind: str = OBSERVED) -> "Model":
        for v in _names(names):
            if v not in self._vars:
                self._vars[v] = kind
        return self

    def _require(self, v: str):
        if v not in self._vars:
            raise ModelError(f"unknown variable {v!r}")

    def _index(self) -> dict[str, int]:
        return {v: i for i, v in enumerate(self._vars)}

    def _cov_key(self, a: str, b: str) -> tuple[str, str]:
        if (b, a) in self._cov:
            return (b, a)
        if (a, b) in self._cov:
            return (a, b)
        idx = self._index()
        return (a, b) if idx[a] <= idx[b] else (b, a)

    # ------------------------------------------------------------- edits
    def regression(self, to, from_=None, value=_UNSET) -> "Model":
        """Add regression edges ``to <- from_`` and optionally bind them.

        ``to`` may be a formula such as ``"y1 + y2 ~ x + z"``.  A list of
        values is matched to the slots with all predictors of the first
        response first.  ``None`` frees a slot, a string labels it, a number
        fixes it and :func:`covariate` binds it to a data column.
        """
        if from_ is None:
            lhs, rhs = parse_formula(to)
        else:
            lhs, rhs = _names(to), _names(from_)
        if not lhs or not rhs:
            raise ModelError("a regression needs responses and predictors")
        pairs = [(t, f) for t in lhs for f in rhs]
        for t, f in pairs:
            if t == f:
                raise ModelError(f"self-loop on {t!r} is not allowed")
        self.addvar(lhs)
        self.addvar(rhs)
        values = None if value is _UNSET else _value_list(value, len(pairs))
        for i, key in enumerate(pairs):
            if values is not None:
                self._reg[key] = Binding.of(values[i])
            elif key not in self._reg:
                self._reg[key] = FREE
        return self

    def covariance(self, vars_, with_=None, value=_UNSET, pairwise=None) -> "Model":
        """Add residual (co)variance edges.

        ``"a ~ b + c"`` gives the pairs (a,b) and (a,c).  A plain list of
        variables gives their variances when a value is supplied and all
        pairwise covariances otherwise; ``pairwise=True`` forces the latter.
        """
        if with_ is not None:
            lhs, rhs = _names(vars_), _names(with_)
        elif isinstance(vars_, str) and "~" in vars_:
            lhs, rhs = parse_formula(vars_)
            if not lhs:
                lhs, rhs = rhs, []
        else:
            lhs, rhs = _names(vars_), []
        if rhs:
            pairs = [(a, b) for a in lhs for b in rhs]
        else:
            if pairwise is None:
                pairwise = value is _UNSET and len(lhs) > 1
            pairs = list(combinations(lhs, 2)) if pairwise else [(a, a) for a in lhs]
        self.addvar(lhs)
        self.addvar(rhs)
        values = None if value is _UNSET else _value_list(value, len(pairs))
        for i, (a, b) in enumerate(pairs):
            key = self._cov_key(a, b)
            if values is not None:
                self._cov[key] = Binding.of(values[i])
            elif key not in self._cov:
                self._cov[key] = FREE
        return self

    def variance(self, vars_, value=_UNSET) -> "Model":
        names = _names(vars_)
        return self.covariance(names, value=value, pairwise=False)

    def intercept(self, vars_, value=None) -> "Model":
        names = _names(vars_)
        self.addvar(names)
        for v, val in zip(names, _value_list(value, len(names))):
            b = Binding.of(val)
            if b.kind == "covariate":
                raise ModelError("intercepts cannot be bound to covariates")
            if b.is_free:
                self._icpt.pop(v, None)
            else:
                self._icpt[v] = b
        return self

    def remove_regression(self, to: str, from_: str) -> "Model":
        self._reg.pop((to, from_), None)
        self.functionals.pop((to, from_), None)
        return self

    def remove_covariance(self, a: str, b: str) -> "Model":
        self._cov.pop((a, b), None)
        self._cov.pop((b, a), None)
        return self

    def latent(self, vars_, cancel: bool = False) -> "Model":
        """Declare variables latent (``cancel=True`` makes them observed)."""
        for v in _names(vars_):
            self._vars[v] = OBSERVED if cancel else LATENT
        return self

    def cancel(self, vars_) -> "Model":
        """Remove every association among the given variables."""
        names = _names(vars_)
        for a in names:
            for b in names:
                if a == b:
                    continue
                self._reg.pop((a, b), None)
                self._cov.pop((a, b), None)
        return self

    def kill(self, vars_) -> "Model":
        """Remove variables and everything attached to them."""
        for v in _names(vars_):
            if v not in self._vars:
                warnings.warn(f"kill: variable {v!r} is not in the model")
                continue
            del self._vars[v]
            self._reg = {k: b for k, b in self._reg.items() if v not in k}
            self._cov = {k: b for k, b in self._cov.items() if v not in k}
            self._icpt.pop(v, None)
            self.distributions.pop(v, None)
            self.functionals = {k: f for k, f in self.functionals.items() if v not in k}
            self.copies = {a: s for a, s in self.copies.items() if v not in (a, s)}
            self.heavytails = [
                HeavyTail(tuple(x for x in h.variables if x != v), h.df)
                for h in self.heavytails]
            self.heavytails = [h for h in self.heavytails if h.variables]
        return self

    def parameter(self, names) -> "Model":
        """Register parameters that are not attached to any slot."""
        for n in _names(names):
            if n not in self.extra_parameters:
                self.extra_parameters.append(n)
        return self

    def constrain(self, target, args=None, fn=None, grad=None, inv=None,
                  name: str | None = None, covariates: Sequence[str] = ()) -> "Model":
        """Make ``target`` a function of other parameters or covariates.

        ``target`` is a label; a formula ``"target ~ a + b"`` may replace
        ``args``.  Passing ``fn=None`` removes the constraint.  If
        ``target`` is a variable name its intercept gets labelled with it.
        """
        if isinstance(target, str) and "~" in target:
            lhs, rhs = parse_formula(target)
            target, args = lhs[0], rhs
        if fn is None:
            self.constraints.pop(target, None)
            return self
        if target in self._vars:
            b = self._icpt.get(target, FREE)
            if b.is_fixed:
                raise ModelError(f"constraint target {target!r} is a fixed slot")
            if not b.is_label:
                self._icpt[target] = Binding("label", target)
        for c in covariates:
            if c not in self.covariate_columns:
                self.covariate_columns.append(c)
        self.constraints[target] = Constraint(
            target, tuple(_names(args)), fn, grad, inv,
            name or getattr(fn, "builtin_name", None), tuple(covariates))
        return self

    def distribution(self, var: str, dist) -> "Model":
        self.addvar(var)
        if dist is None:
            self.distributions.pop(var, None)
        else:
            self.distributions[var] = dist
        return self

    def heavytail(self, vars_, df: float = 3, shared: bool = True) -> "Model":
        names = _names(vars_)
        taken = {v for h in self.heavytails for v in h.variables}
        for v in names:
            self._require(v)
            if v in taken:
                raise ModelError(f"{v!r} already belongs to a heavy-tail group")
        if df <= 0:
            raise ModelError("heavy-tail degrees of freedom must be positive")
        groups = [tuple(names)] if shared else [(v,) for v in names]
        self.heavytails.extend(HeavyTail(g, float(df)) for g in groups)
        return self

    def functional(self, to, from_=None, fn: Callable | None = None,
                   name: str | None = None) -> "Model":
        """Use ``fn(from_)`` instead of ``from_`` in the regression of ``to``.

        Only simulation honours functional effects.
        """
        if from_ is None:
            lhs, rhs = parse_formula(to)
        else:
            lhs, rhs = _names(to), _names(from_)
        for t in lhs:
            for f in rhs:
                if (t, f) not in self._reg:
                    self.regression(t, f)
                if fn is None:
                    self.functionals.pop((t, f), None)
                else:
                    self.functionals[(t, f)] = (fn, name or getattr(fn, "builtin_name", None))
        return self

    def copy_variable(self, source: str, alias: str) -> "Model":
        """Simulate ``alias`` as an exact copy of ``source``."""
        self._require(source)
        self.addvar(alias)
        self.copies[alias] = source
        return self

    def baptize(self) -> "Model":
        """Label every free slot with its display name."""
        for kind, key, b in self._slot_listing():
            if b.is_free:
                name = slot_name(kind, key)
                if kind == "v":
                    self._icpt[key] = Binding("label", name)
                elif kind == "A":
                    self._reg[key] = Binding("label", name)
                else:
                    self._cov[self._cov_key(*key)] = Binding("label", name)
        return self

    def subset(self, vars_) -> "Model":
        keep = set(_names(vars_))
        for v in keep:
            self._require(v)
        out = self.copy()
        out.kill([v for v in self._vars if v not in keep])
        labels = out.slot_labels()
        out.constraints = {k: c for k, c in out.constraints.items()
                           if k in labels or k in out.extra_parameters}
        return out

    def merge(self, other: "Model") -> "Model":
        """Union of two models; shared labels stay shared."""
        out = self.copy()
        for v, kind in other._vars.items():
            if v in out._vars:
                if kind == LATENT:
                    out._vars[v] = LATENT
            else:
                out._vars[v] = kind

        def combine(mine, theirs, what):
            if mine is None or mine.is_free:
                return theirs
            if theirs.is_free:
                return mine
            if mine.is_fixed and theirs.is_fixed and mine.value != theirs.value:
                raise ModelError(f"conflicting fixed values for {what}")
            return theirs

        for k, b in other._reg.items():
            out._reg[k] = combine(out._reg.get(k), b, k)
        for k, b in other._cov.items():
            key = out._cov_key(*k)
            out._cov[key] = combine(out._cov.get(key), b, k)
        for k, b in other._icpt.items():
            out._icpt[k] = combine(out._icpt.get(k), b, k)
        out.constraints.update(other.constraints)
        for p in other.extra_parameters:
            out.parameter(p)
        for c in other.covariate_columns:
            if c not in out.covariate_columns:
                out.covariate_columns.append(c)
        out.distributions.update(other.distributions)
        out.heavytails.extend(other.heavytails)
        out.functionals.update(other.functionals)
        out.copies.update(other.copies)
        return out

    # ------------------------------------------------------------ queries
    def vars(self) -> list[str]:
        """Variables in structural order: observed first, then latent."""
        return self.manifest() + self.latent_vars()

    def declared(self) -> list[str]:
        return list(self._vars)

    def manifest(self) -> list[str]:
        return [v for v, k in self._vars.items() if k == OBSERVED]

    def latent_vars(self) -> list[str]:
        return [v for v, k in self._vars.items() if k == LATENT]

    def is_latent(self, v: str) -> bool:
        return self._vars.get(v) == LATENT

    def regressions(self) -> dict[tuple[str, str], Binding]:
        return dict(self._reg)

    def covariances(self) -> dict[tuple[str, str], Binding]:
        return dict(self._cov)

    def intercepts(self) -> dict[str, Binding]:
        return dict(self._icpt)

    def has_covariance(self, a: str, b: str) -> bool:
        return (a, b) in self._cov or (b, a) in self._cov

    def exogenous(self) -> list[str]:
        """Observed variables with no incoming regression and no residual
        (co)variance edge of their own."""
        incoming = {t for t, _ in self._reg}
        covaried = {v for k in self._cov for v in k}
        return [v for v in self.manifest()
                if v not in incoming and v not in covaried]

    def endogenous(self, top: bool = False) -> list[str]:
        exo = set(self.exogenous())
        endo = [v for v in self.manifest() if v not in exo]
        if top:
            has_children = {f for _, f in self._reg}
            endo = [v for v in endo if v not in has_children]
        return endo

    def _order(self, names: Iterable[str]) -> list[str]:
        s = set(names)
        return [v for v in self.vars() if v in s]

    def children(self, vars_) -> list[str]:
        src = set(_names(vars_))
        for v in src:
            self._require(v)
        return self._order(t for t, f in self._reg if f in src)

    def parents(self, vars_) -> list[str]:
        dst = set(_names(vars_))
        for v in dst:
            self._require(v)
        return self._order(f for t, f in self._reg if t in dst)

    def path(self, to, from_=None) -> list[list[str]]:
        """All simple directed paths ``from_ -> ... -> to``."""
        if from_ is None:
            lhs, rhs = parse_formula(to)
            to, from_ = lhs[0], rhs[0]
        self._require(to)
        self._require(from_)
        kids: dict[str, list[str]] = {v: [] for v in self.vars()}
        for t, f in self._reg:
            kids[f].append(t)
        for k in kids:
            kids[k] = self._order(kids[k])
        found: list[list[str]] = []

        def walk(node, trail):
            if node == to:
                found.append(trail)
                return
            for c in kids[node]:
                if c not in trail:
                    walk(c, trail + [c])

        walk(from_, [from_])
        return found

    # ---------------------------------------------------- parameter slots
    def _slot_listing(self):
        """Parameter slots in canonical order.

        Intercepts (structural variable order), regressions (response-major),
        variances, then off-diagonal covariances (column-major).  Exogenous
        variables carry no slots: their moments come from the data.
        """
        order = self.vars()
        exo = set(self.exogenous())
        pos = {v: i for i, v in enumerate(order)}
        for v in order:
            if v not in exo:
                yield "v", v, self._icpt.get(v, FREE)
        regs = sorted(self._reg, key=lambda k: (pos[k[0]], pos[k[1]]))
        for k in regs:
            yield "A", k, self._reg[k]
        for v in order:
            if v not in exo:
                yield "P", (v, v), self._cov.get((v, v), FREE)
        offdiag = []
        for (a, b), bind in self._cov.items():
            if a == b:
                continue
            i, j = sorted((pos[a], pos[b]))
            offdiag.append(((j, i), (order[i], order[j]), bind))
        for _, key, bind in sorted(offdiag, key=lambda t: t[0]):
            yield "P", key, bind

    def slot_labels(self) -> set[str]:
        return {b.value for _, _, b in self._slot_listing() if b.is_label}

    def parameter_listing(self) -> list[dict]:
        """One entry per free parameter: key, display name, label and slots."""
        entries: list[dict] = []
        by_label: dict[str, dict] = {}
        n_mean = n_other = 0
        for kind, key, b in self._slot_listing():
            if b.kind not in ("free", "label"):
                continue
            if b.is_label and b.value in self.constraints:
                continue
            if b.is_label and b.value in by_label:
                by_label[b.value]["slots"].append((kind, key))
                continue
            if kind == "v":
                n_mean += 1
                pkey = f"m{n_mean}"
            else:
                n_other += 1
                pkey = f"p{n_other}"
            entry = {"key": pkey, "name": slot_name(kind, key),
                     "label": b.value if b.is_label else None,
                     "slots": [(kind, key)]}
            entries.append(entry)
            if b.is_label:
                by_label[b.value] = entry
        known = set(by_label)
        extras = list(self.extra_parameters)
        for c in self.constraints.values():
            for a in c.args:
                if a not in extras:
                    extras.append(a)
        variables = set(self._vars) | set(self.covariate_columns)
        for a in extras:
            if a in known or a in self.constraints or a in variables:
                continue
            n_other += 1
            entries.append({"key": f"p{n_other}", "name": a, "label": a, "slots": []})
            known.add(a)
        return entries

    def coef_names(self, labels: bool = False) -> list[str]:
        out = []
        for e in self.parameter_listing():
            out.append(e["label"] if labels and e["label"] else e["name"])
        return out

    def coef_keys(self) -> list[str]:
        return [e["key"] for e in self.parameter_listing()]

    def npar(self) -> tuple[int, int]:
        """(number of non-mean parameters, number of mean parameters)."""
        keys = self.coef_keys()
        n_mean = sum(k.startswith("m") for k in keys)
        return len(keys) - n_mean, n_mean

    def __repr__(self) -> str:
        lat = self.latent_vars()
        lines = [f"Model with {len(self._vars)} variables "
                 f"({len(self.manifest())} observed, {len(lat)} latent)"]
        if lat:
            lines.append("Latent: " + " ".join(lat))
        lines.append(f"Exogenous: {' '.join(self.exogenous())}")
        for (t, f), b in self._reg.items():
            lines.append(f"  {t} <- {f}  {_fmt_binding(b)}")
        for (a, b_), b in self._cov.items():
            lines.append(f"  {a} <-> {b_}  {_fmt_binding(b)}")
        np_, nm = self.npar()
        lines.append(f"Npar={np_}+{nm}")
        return "\n".join(lines)


def _fmt_binding(b: Binding) -> str:
    if b.is_free:
        return "*"
    return str(b.value)


def slot_name(kind: str, key) -> str:
    if kind == "v":
        return key
    if kind == "A":
        return f"{key[0]}<-{key[1]}"
    return f"{key[0]}<->{key[1]}"


# ------------------------------------------------------------ identification
PARAMETERIZATIONS = ("relative", "absolute", "hybrid", "none")


def identify(model: Model, param: str = "relative") -> Model:
    """Return a copy with the fixes needed for identification.

    Only free, unlabelled slots are touched; fixed or labelled slots are
    treated as already specified.
    """
    if param not in PARAMETERIZATIONS:
        raise ModelError(f"unknown parameterization {param!r}")
    m = model.copy()
    if param == "none":
        return m
    for eta in m.latent_vars():
        kids = m.children(eta)
        indicators = [c for c in kids if not m.is_latent(c)] or kids
        if param in ("relative", "hybrid"):
            if not indicators:
                raise ModelError(f"latent variable {eta!r} has no indicators")
            loadings = {c: m._reg[(c, eta)] for c in indicators}
            ref = next((c for c in indicators if loadings[c].is_fixed), None)
            if ref is None:
                ref = next((c for c in indicators if loadings[c].is_free), None)
                if ref is not None:
                    m._reg[(ref, eta)] = Binding("fixed", 1.0)
            if param == "relative":
                has_fixed = any(m._icpt.get(c, FREE).is_fixed for c in indicators)
                if ref is not None and not has_fixed and ref not in m._icpt:
                    m._icpt[ref] = Binding("fixed", 0.0)
            elif eta not in m._icpt:
                m._icpt[eta] = Binding("fixed", 0.0)
        else:
            if eta not in m._icpt:
                m._icpt[eta] = Binding("fixed", 0.0)
            if m._cov.get((eta, eta), FREE).is_free:
                m._cov[(eta, eta)] = Binding("fixed", 1.0)
    return m


# ------------------------------------------------------- builtin functions
def _builtin(name, fn, grad=None, inv=None):
    fn.builtin_name = name
    return {"fn": fn, "grad": grad, "inv": inv}


BUILTINS: dict[str, dict] = {
    "identity": _builtin("identity", lambda x: x[0], lambda x: np.array([1.0])),
    "exp": _builtin("exp", lambda x: math.exp(x[0]), lambda x: np.array([math.exp(x[0])]),
                    lambda y: np.log(y)),
    "log": _builtin("log", lambda x: math.log(x[0]), lambda x: np.array([1.0 / x[0]]),
                    lambda y: np.exp(y)),
    "square": _builtin("square", lambda x: x[0] ** 2, lambda x: np.array([2.0 * x[0]])),
    "product": _builtin("product", lambda x: float(np.prod(x)),
                        lambda x: np.array([np.prod(np.delete(x, i)) for i in range(len(x))])),
    "sum": _builtin("sum", lambda x: float(np.sum(x)), lambda x: np.ones(len(x))),
    "tanh": _builtin("tanh", lambda x: math.tanh(x[0]),
                     lambda x: np.array([1 - math.tanh(x[0]) ** 2]), lambda y: np.arctanh(y)),
    "atanh": _builtin("atanh", lambda x: math.atanh(x[0]),
                      lambda x: np.array([1 / (1 - x[0] ** 2)]), lambda y: np.tanh(y)),
    "cor": _builtin("cor", lambda x: x[0] / math.sqrt(x[1] * x[2])),
    "atanh-z": _builtin("atanh-z", lambda x: math.atanh(x[0] / math.sqrt(x[1] * x[2])),
                        inv=lambda y: np.tanh(y)),
}


def builtin(name: str) -> dict:
    """Look up a builtin, allowing ``f|g`` meaning g applied after f."""
    parts = [p.strip() for p in name.split("|")]
    for p in parts:
        if p not in BUILTINS:
            raise ModelError(f"unknown function {p!r}")
    if len(parts) == 1:
        return BUILTINS[name]
    first = BUILTINS[parts[0]]["fn"]
    rest = [BUILTINS[p]["fn"] for p in parts[1:]]

    def composed(x):
        y = first(x)
        for f in rest:
            y = f(np.array([y]))
        return y

    composed.builtin_name = "|".join(parts)
    return {"fn": composed, "grad": None, "inv": None}
