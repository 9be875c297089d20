"""Line-oriented model files.

Each non-empty line is ``keyword: body``; ``#`` starts a comment.

    vars: y1, y2, x
    latent: u
    regression: y1 + y2 ~ u
    covariance: y1 ~ y2          (a single name gives its variance)
    intercept: y1 = mu           (number, label or NA)
    fix: y1 <- u = 1             (also ``a <-> b = v`` and ``y = v``)
    label: y2 <- u = b1
    random: y <- x = column
    parameter: p1, p2
    constrain: v ~ alpha : exp   (``covariates(z)`` may follow the function)
    distribution: y = binomial(link=logit)
    heavytail: y1, y2 = 3
    functional: y3 <- x : square
    copy: x2 = x
"""
from __future__ import annotations

import math
import re
from pathlib import Path

from .model import Binding, Model, ModelError, builtin, covariate, slot_name
from .simulate import FUNCTIONALS, Binomial, Normal, Poisson, Uniform, Weibull

NAME = r"[A-Za-z_.][A-Za-z0-9_.]*"
_NAME_RE = re.compile(rf"^{NAME}$")
_EDGE_RE = re.compile(rf"^\s*({NAME})\s*(<->|<-)\s*({NAME})\s*$")
_CALL_RE = re.compile(rf"^\s*({NAME})\s*(?:\((.*)\))?\s*$")

DISTRIBUTIONS = {"normal": Normal, "binomial": Binomial, "poisson": Poisson,
                 "uniform": Uniform, "weibull": Weibull}
_DIST_NAMES = {cls: name for name, cls in DISTRIBUTIONS.items()}


class ModelFileError(ModelError):
    def __init__(self, message: str, line: int, column: int = 1):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


def _names(text: str, line: int, col: int) -> list[str]:
    out = [t for t in re.split(r"[+,\s]+", text.strip()) if t]
    for t in out:
        if not _NAME_RE.match(t):
            raise ModelFileError(f"invalid name {t!r}", line, col + text.find(t))
    return out


def _value(text: str, line: int, col: int):
    t = text.strip()
    if t.upper() in ("NA", "NAN", ""):
        return None
    if len(t) >= 2 and t[0] == t[-1] and t[0] in "\"'":
        return t[1:-1]
    try:
        return float(t)
    except ValueError:
        pass
    if _NAME_RE.match(t):
        return t
    raise ModelFileError(f"invalid value {t!r}", line, col)


def _split_eq(body: str, line: int, col: int, what: str):
    if "=" not in body:
        raise ModelFileError(f"{what} needs '= value'", line, col)
    i = body.index("=")
    return body[:i], body[i + 1:], col + i + 1


def _number(text, line, col):
    v = _value(text, line, col)
    if not isinstance(v, float):
        raise ModelFileError(f"expected a number, got {text.strip()!r}", line, col)
    return v


def _parse_call(text: str, line: int, col: int):
    m = _CALL_RE.match(text)
    if not m:
        raise ModelFileError(f"cannot parse {text.strip()!r}", line, col)
    name, args = m.group(1), m.group(2)
    pos, kw = [], {}
    if args:
        for a in args.split(","):
            a = a.strip()
            if "=" in a:
                k, v = a.split("=", 1)
                kw[k.strip()] = v.strip()
            elif a:
                pos.append(a)
    return name, pos, kw


def _distribution(text: str, line: int, col: int):
    name, pos, kw = _parse_call(text, line, col)
    if name not in DISTRIBUTIONS:
        raise ModelFileError(f"unknown distribution {name!r}", line, col)
    cls = DISTRIBUTIONS[name]
    fields = list(getattr(cls, "__dataclass_fields__", {}))
    if len(pos) > len(fields):
        raise ModelFileError(f"too many arguments for {name}", line, col)
    values = dict(zip(fields, pos))
    values.update(kw)
    out = {}
    for k, v in values.items():
        if k not in fields:
            raise ModelFileError(f"{name} has no argument {k!r}", line, col)
        if k == "link":
            out[k] = v
        else:
            out[k] = None if v.upper() in ("NA", "NONE") else float(v)
    try:
        return cls(**out)
    except (ModelError, TypeError) as exc:
        raise ModelFileError(str(exc), line, col) from None


class _Reader:
    def __init__(self):
        self.model = Model()
        self.bound: dict[tuple, tuple[Binding, int]] = {}

    def bind(self, kind, key, binding: Binding, line, col):
        slot = (kind,) + tuple(sorted(key) if kind == "P" else (key if kind == "A" else (key,)))
        prev = self.bound.get(slot)
        if prev is not None and prev[0] != binding:
            name = slot_name(kind, key)
            raise ModelFileError(f"conflicting values for {name}: "
                                 f"{prev[0].value!r} (line {prev[1]}) and {binding.value!r}",
                                 line, col)
        self.bound[slot] = (binding, line)
        m = self.model
        if kind == "A":
            m.regression(key[0], key[1], value=binding)
        elif kind == "P":
            m.covariance(key[0], key[1], value=binding)
        else:
            m.intercept(key, binding)

    def target(self, text, line, col):
        e = _EDGE_RE.match(text)
        if e:
            a, arrow, b = e.groups()
            return ("A" if arrow == "<-" else "P"), (a, b)
        t = text.strip()
        if _NAME_RE.match(t):
            return "v", t
        raise ModelFileError(f"expected 'a <- b', 'a <-> b' or a variable, got {t!r}",
                             line, col)

    def statement(self, kw, body, line, col):
        m = self.model
        if kw == "vars":
            m.addvar(_names(body, line, col))
        elif kw == "latent":
            m.latent(_names(body, line, col))
        elif kw == "regression":
            if "~" not in body:
                raise ModelFileError("regression needs 'responses ~ predictors'", line, col)
            lhs, rhs = body.split("~", 1)
            m.regression(_names(lhs, line, col), _names(rhs, line, col + len(lhs) + 1))
        elif kw == "covariance":
            if "~" in body:
                lhs, rhs = body.split("~", 1)
                m.covariance(_names(lhs, line, col), _names(rhs, line, col + len(lhs) + 1))
            else:
                for v in _names(body, line, col):
                    m.covariance(v, v)
        elif kw == "intercept":
            lhs, rhs, vcol = _split_eq(body, line, col, "intercept")
            for v in _names(lhs, line, col):
                self.bind("v", v, Binding.of(_value(rhs, line, vcol)), line, vcol)
        elif kw in ("fix", "label", "random"):
            lhs, rhs, vcol = _split_eq(body, line, col, kw)
            kind, key = self.target(lhs, line, col)
            val = _value(rhs, line, vcol)
            if kw == "fix":
                if not isinstance(val, float):
                    raise ModelFileError(f"fix needs a number, got {rhs.strip()!r}", line, vcol)
                b = Binding.of(val)
            elif kw == "label":
                if not isinstance(val, str):
                    raise ModelFileError(f"label needs a name, got {rhs.strip()!r}", line, vcol)
                b = Binding.of(val)
            else:
                if kind != "A" or not isinstance(val, str):
                    raise ModelFileError("random needs 'response <- predictor = column'",
                                         line, col)
                b = covariate(val)
            self.bind(kind, key, b, line, vcol)
        elif kw == "parameter":
            m.parameter(_names(body, line, col))
        elif kw == "constrain":
            if ":" not in body or "~" not in body:
                raise ModelFileError("constrain needs 'target ~ arguments : function'", line, col)
            lhs, fn_text = body.rsplit(":", 1)
            target, args = lhs.split("~", 1)
            covs = []
            cm = re.search(r"covariates\((.*)\)\s*$", fn_text)
            if cm:
                covs = _names(cm.group(1), line, col)
                fn_text = fn_text[:cm.start()]
            fname = fn_text.strip()
            try:
                spec = builtin(fname)
            except ModelError as exc:
                raise ModelFileError(str(exc), line, col + len(lhs) + 1) from None
            tnames = _names(target, line, col)
            if len(tnames) != 1:
                raise ModelFileError("constrain needs exactly one target", line, col)
            m.constrain(tnames[0], _names(args, line, col), spec["fn"], spec["grad"],
                        spec["inv"], name=fname, covariates=covs)
        elif kw == "distribution":
            lhs, rhs, vcol = _split_eq(body, line, col, "distribution")
            for v in _names(lhs, line, col):
                m.distribution(v, _distribution(rhs, line, vcol))
        elif kw == "heavytail":
            lhs, rhs, vcol = _split_eq(body, line, col, "heavytail")
            parts = rhs.split()
            if not parts:
                raise ModelFileError("heavytail needs degrees of freedom", line, vcol)
            shared = True
            if len(parts) > 1:
                if parts[1] not in ("shared", "separate"):
                    raise ModelFileError("expected 'shared' or 'separate'", line, vcol)
                shared = parts[1] == "shared"
            m.heavytail(_names(lhs, line, col), _number(parts[0], line, vcol), shared)
        elif kw == "functional":
            if ":" not in body:
                raise ModelFileError("functional needs 'response <- predictor : function'",
                                     line, col)
            lhs, fname = body.rsplit(":", 1)
            e = _EDGE_RE.match(lhs)
            if not e or e.group(2) != "<-":
                raise ModelFileError("functional needs 'response <- predictor'", line, col)
            fname = fname.strip()
            if fname not in FUNCTIONALS:
                raise ModelFileError(f"unknown function {fname!r}", line, col + len(lhs) + 1)
            m.functional(e.group(1), e.group(3), FUNCTIONALS[fname], name=fname)
        elif kw == "copy":
            lhs, rhs, vcol = _split_eq(body, line, col, "copy")
            alias, source = _names(lhs, line, col), _names(rhs, line, vcol)
            if len(alias) != 1 or len(source) != 1:
                raise ModelFileError("copy needs 'alias = source'", line, col)
            m.copy_variable(source[0], alias[0])
        else:
            raise ModelFileError(f"unknown statement {kw!r}", line, 1)


def parse_model_text(text: str) -> Model:
    reader = _Reader()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        if not line.strip():
            continue
        if ":" not in line:
            raise ModelFileError("expected 'keyword: ...'", lineno, len(line) - len(line.lstrip()) + 1)
        kw, body = line.split(":", 1)
        col = len(kw) + 2
        try:
            reader.statement(kw.strip(), body, lineno, col)
        except ModelFileError:
            raise
        except (ModelError, ValueError) as exc:
            raise ModelFileError(str(exc), lineno, col) from None
    return reader.model


def parse_model(path) -> Model:
    return parse_model_text(Path(path).read_text(encoding="utf-8"))


# ------------------------------------------------------------- writing
def _fmt_value(b: Binding) -> str:
    if b.is_fixed:
        return repr(float(b.value))
    v = str(b.value)
    return v if _NAME_RE.match(v) and v.upper() not in ("NA", "NAN") else f'"{v}"'


def _fmt_float(x: float) -> str:
    return "inf" if math.isinf(x) else repr(float(x))


def _fmt_distribution(d) -> str:
    name = _DIST_NAMES.get(type(d))
    if name is None:
        raise ModelError(f"distribution {d!r} cannot be written to a model file")
    args = []
    for k in getattr(d, "__dataclass_fields__", {}):
        v = getattr(d, k)
        if v is None:
            continue
        args.append(f"{k}={v}" if isinstance(v, str) else f"{k}={_fmt_float(v)}")
    return f"{name}({', '.join(args)})" if args else name


def _edge(kind, key) -> str:
    if kind == "A":
        return f"{key[0]} <- {key[1]}"
    if kind == "P":
        return f"{key[0]} <-> {key[1]}"
    return key


def serialize_model(model: Model) -> str:
    """Model file text that parses back to an equal model."""
    lines = []
    names = model.declared()
    if names:
        lines.append("vars: " + ", ".join(names))
    lat = model.latent_vars()
    if lat:
        lines.append("latent: " + ", ".join(lat))
    for (t, f), b in model.regressions().items():
        if b.is_free:
            lines.append(f"regression: {t} ~ {f}")
        elif b.kind == "covariate":
            lines.append(f"random: {t} <- {f} = {b.value}")
        else:
            kw = "fix" if b.is_fixed else "label"
            lines.append(f"{kw}: {t} <- {f} = {_fmt_value(b)}")
    for (a, c), b in model.covariances().items():
        if b.is_free:
            lines.append(f"covariance: {a}" if a == c else f"covariance: {a} ~ {c}")
        else:
            kw = "fix" if b.is_fixed else "label"
            lines.append(f"{kw}: {a} <-> {c} = {_fmt_value(b)}")
    for v, b in model.intercepts().items():
        lines.append(f"intercept: {v} = {_fmt_value(b)}")
    if model.extra_parameters:
        lines.append("parameter: " + ", ".join(model.extra_parameters))
    for target, c in model.constraints.items():
        if not c.name:
            raise ModelError(f"constraint {target!r} uses a function without a builtin name")
        line = f"constrain: {target} ~ {' + '.join(c.args)} : {c.name}"
        if c.covariates:
            line += f" covariates({', '.join(c.covariates)})"
        lines.append(line)
    for v, d in model.distributions.items():
        lines.append(f"distribution: {v} = {_fmt_distribution(d)}")
    for h in model.heavytails:
        lines.append(f"heavytail: {', '.join(h.variables)} = {_fmt_float(h.df)}")
    for (t, f), (_, fname) in model.functionals.items():
        if fname not in FUNCTIONALS:
            raise ModelError(f"functional {t}<-{f} has no builtin name")
        lines.append(f"functional: {t} <- {f} : {fname}")
    for alias, source in model.copies.items():
        lines.append(f"copy: {alias} = {source}")
    return "\n".join(lines) + ("\n" if lines else "")
