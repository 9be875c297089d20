"""Command-line interface: ``lvm <command> ...``.

Exit status is 0 on success, 1 for usage errors (bad arguments, unreadable
or malformed model files) and 2 when a computation fails.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from . import inference
from .data import read_csv, write_csv
from .dot import to_dot
from .estimate import EstimationError, FitResult, estimate
from .iv import iv_estimate
from .mixture import em_fit, mvnmix
from .model import ModelError, slot_name
from .modelfile import parse_model
from .simulate import sim


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _num(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def _load_model(path):
    try:
        return parse_model(path)
    except OSError as exc:
        raise UsageError(f"cannot read model file: {exc}") from None
    except ModelError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _load_data(path, model=None):
    try:
        frame = read_csv(path)
    except OSError as exc:
        raise UsageError(f"cannot read data file: {exc}") from None
    if model is not None:
        missing = [v for v in model.manifest() if v not in frame.columns]
        if missing:
            raise EstimationError("data lacks model variables: " + ", ".join(missing))
    return frame


def _emit(args, payload):
    text = json.dumps(payload, indent=2, sort_keys=False)
    out = getattr(args, "json", None)
    if out and out != "-":
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def _parse_weights(spec):
    if spec is None:
        return None
    if "=" not in spec:
        return spec
    out = {}
    for item in spec.split(","):
        var, col = item.split("=", 1)
        out[var.strip()] = col.strip()
    return out


def _fit(args, model, frame) -> FitResult:
    if getattr(args, "estimator", "gaussian") == "iv":
        return iv_estimate(model, frame, fix=True)
    return estimate(model, frame, param=args.param, missing=args.missing,
                    cluster=args.cluster, weights=_parse_weights(args.weights),
                    vcov=args.vcov)


def _section(fit: FitResult, name: str) -> str:
    t = fit.table
    i = t.index.get(name)
    kind = fit.kinds[fit.index(name)]
    if kind == "mean":
        return "Intercepts"
    if kind in ("variance", "covariance"):
        return "Residual Variances"
    if i is not None:
        for s in t.slots:
            if s.source == "param" and s.payload == i and s.mat == "A":
                if t.vars[s.col] in t.latent and t.vars[s.row] in t.observed:
                    return "Measurements"
    return "Regressions"


def fit_report(fit: FitResult) -> dict:
    coef = fit.coef()
    single = len(fit.models) == 1
    std = {}
    if single:
        try:
            std = inference.standardized(fit)["std.xy"].to_dict()
        except (ModelError, EstimationError, np.linalg.LinAlgError):
            std = {}
    params = []
    for name, row in coef.iterrows():
        params.append({
            "name": name,
            "section": _section(fit, name) if single else None,
            "estimate": _num(row["Estimate"]),
            "se": _num(row["Std. Error"]),
            "z": _num(row["Z value"]),
            "p": _num(row["P-value"]),
            "std": _num(std.get(name)),
        })
    g = inference.gof(fit)
    constraints = []
    if single and fit.table.derived_order:
        tab = inference.constraint_estimates(fit)
        for name, row in tab.iterrows():
            constraints.append({"name": name, "estimate": _num(row["estimate"]),
                                "se": _num(row["se"]), "lower": _num(row["lower"]),
                                "upper": _num(row["upper"])})
    report = {
        "command": "fit",
        "estimator": fit.estimator,
        "n": fit.n,
        "vcov_type": fit.vcov_type,
        "robust": fit.vcov_type == "robust",
        "parameters": params,
        "gof": {"loglik": _num(g.loglik), "npar": g.npar, "aic": _num(g.aic),
                "bic": _num(g.bic), "chisq": _num(g.chisq), "df": g.df,
                "p_value": _num(g.p_value), "rmsea": _num(g.rmsea),
                "information_rank": g.information_rank,
                "information_condition": _num(g.information_condition)},
        "constraints": constraints,
        "convergence": {"converged": bool(fit.converged), "iterations": int(fit.iterations),
                        "max_abs_score": _num(np.max(np.abs(fit.score))) if len(fit.score) else 0.0},
    }
    plan = fit.extra.get("plan")
    if plan is not None:
        report["plan"] = {"surrogates": dict(plan.surrogates),
                          "instruments": {e.label: list(e.instruments) for e in plan.equations}}
    return report


def format_summary(fit: FitResult) -> str:
    rep = fit_report(fit)
    lines = [f"Number of rows in data = {rep['n']}", "-" * 64,
             f"{'':<20}{'Estimate':>11}{'Std. Error':>12}{'Z value':>10}{'P-value':>11}"]
    order = ["Measurements", "Regressions", "Intercepts", "Residual Variances", None]
    for sec in order:
        rows = [p for p in rep["parameters"] if p["section"] == sec]
        if not rows:
            continue
        if sec:
            lines.append(f"{sec}:")
        for p in rows:
            def f(v, w, d=5):
                return f"{v:>{w}.{d}f}" if v is not None else " " * w
            pv = f"{p['p']:>11.4g}" if p["p"] is not None else ""
            lines.append(f"   {p['name']:<17}{f(p['estimate'], 11)}{f(p['se'], 12)}"
                         f"{f(p['z'], 10, 3)}{pv}")
    lines += ["-" * 64, f"Estimator: {rep['estimator']} (vcov: {rep['vcov_type']})",
              f"Log-Likelihood = {rep['gof']['loglik']:.4f}",
              f"AIC = {rep['gof']['aic']:.3f}   BIC = {rep['gof']['bic']:.3f}"]
    return "\n".join(lines)


# ------------------------------------------------------------ commands
def cmd_fit(args):
    model = _load_model(args.model)
    frame = _load_data(args.data, model)
    fit = _fit(args, model, frame)
    if args.summary:
        print(format_summary(fit))
    else:
        _emit(args, fit_report(fit))


def cmd_iv(args):
    model = _load_model(args.model)
    frame = _load_data(args.data, model)
    fit = iv_estimate(model, frame, fix=args.fix, variance=not args.no_variance)
    if args.summary:
        print(format_summary(fit))
        print(str(fit.extra["plan"]))
    else:
        _emit(args, fit_report(fit))


def _require_seed(args):
    if args.seed is None:
        raise UsageError("--seed is required for randomized commands")


def cmd_sim(args):
    _require_seed(args)
    model = _load_model(args.model)
    params = {}
    for item in args.params or []:
        if "=" not in item:
            raise UsageError(f"--params expects name=value, got {item!r}")
        k, v = item.rsplit("=", 1)
        try:
            params[k.strip()] = float(v)
        except ValueError:
            raise UsageError(f"--params value for {k!r} is not a number") from None
    frame = sim(model, args.n, params=params, seed=args.seed, latent=not args.no_latent)
    if args.out and args.out != "-":
        write_csv(frame, args.out)
    else:
        sys.stdout.write(write_csv(frame))


def cmd_test(args):
    model = _load_model(args.model)
    frame = _load_data(args.data, model)
    fit = estimate(model, frame, param=args.param, missing=args.missing)
    tests = []
    if args.lrt:
        other = _load_model(args.lrt)
        fit2 = estimate(other, frame, param=args.param, missing=args.missing)
        small, large = (fit2, fit) if fit2.npar < fit.npar else (fit, fit2)
        r = inference.lrt(small, large)
        tests.append(("lrt", f"{args.model} vs {args.lrt}", r))
    if args.wald:
        names, rhs = [], []
        for item in args.wald.split(","):
            if "=" in item and "<-" not in item.split("=", 1)[1]:
                n, v = item.rsplit("=", 1)
                names.append(n.strip())
                rhs.append(float(v))
            else:
                names.append(item.strip())
                rhs.append(0.0)
        r = inference.wald(fit, names, rhs)
        tests.append(("wald", ", ".join(f"{n} = {v:g}" for n, v in zip(names, rhs)), r))
    for edge in args.score or []:
        edges = [e.strip() for e in edge.split(",")]
        r = inference.score_test(fit, edges)
        tests.append(("score", " & ".join(edges), r))
    if not tests:
        raise UsageError("give at least one of --lrt, --wald, --score")
    _emit(args, {"command": "test",
                 "tests": [{"method": m, "hypothesis": h, "statistic": _num(r.statistic),
                            "df": r.df, "p_value": _num(r.p_value)} for m, h, r in tests]})


def _effect_json(e):
    return {"estimate": _num(e.estimate), "se": _num(e.se), "z": _num(e.z), "p": _num(e.p)}


def cmd_effects(args):
    model = _load_model(args.model)
    frame = _load_data(args.data, model)
    fit = estimate(model, frame, param=args.param, missing=args.missing)
    rep = inference.effects(fit, args.outcome, args.exposure)
    indirect = sum(e.estimate for p, e in rep.paths if len(p) > 2)
    if abs(rep.total.estimate - rep.direct.estimate - indirect) > 1e-10 * max(1.0, abs(rep.total.estimate)):
        raise EstimationError("effect decomposition does not add up")
    _emit(args, {"command": "effects", "outcome": rep.outcome, "exposure": rep.exposure,
                 "total": _effect_json(rep.total), "direct": _effect_json(rep.direct),
                 "indirect": _effect_json(rep.indirect),
                 "paths": [{"path": p, "estimate": _num(e.estimate), "se": _num(e.se)}
                           for p, e in rep.paths]})


def cmd_bootstrap(args):
    _require_seed(args)
    model = _load_model(args.model)
    frame = _load_data(args.data, model)
    fit = estimate(model, frame, param=args.param, missing=args.missing)
    b = inference.bootstrap(fit, R=args.R, mode=args.mode, seed=args.seed, n_jobs=args.threads)
    tab = b.table(args.level)
    _emit(args, {"command": "bootstrap", "R": args.R, "mode": args.mode, "seed": args.seed,
                 "failures": b.failures,
                 "parameters": [{"name": n, "estimate": _num(r["estimate"]),
                                 "bias": _num(r["bias"]), "se": _num(r["se"]),
                                 "lower": _num(r["lower"]), "upper": _num(r["upper"])}
                                for n, r in tab.iterrows()]})


def cmd_mixture(args):
    _require_seed(args)
    frame = _load_data(args.data)
    if args.model:
        model = _load_model(args.model)
        _load_data(args.data, model)
        res = em_fit(model, frame, K=args.K, seed=args.seed, variant=args.variant,
                     nstart=args.nstart, param=args.param)
        classes = [{"prior": _num(res.pi[j]), "n": int(np.sum(res.classify() == j))}
                   for j in range(res.K)]
        params = [{"name": n, "estimate": _num(v)} for n, v in zip(res.names, res.theta)]
    else:
        cols = args.columns.split(",") if args.columns else None
        res = mvnmix(frame, args.K, columns=cols, seed=args.seed, variant=args.variant,
                     nstart=args.nstart)
        classes = [{"prior": _num(res.pi[j]), "n": int(np.sum(res.classify() == j)),
                    "mean": {c: _num(m) for c, m in zip(res.columns, res.means[j])}}
                   for j in range(res.K)]
        params = [{"name": n, "estimate": _num(v)} for n, v in zip(res.names, res.theta)]
    trace = np.asarray(res.trace)
    _emit(args, {"command": "mixture", "K": res.K, "variant": res.variant,
                 "loglik": _num(res.loglik), "npar": res.npar, "aic": _num(res.aic()),
                 "converged": bool(res.converged), "iterations": int(res.iterations),
                 "trace_monotone": bool(np.all(np.diff(trace) >= -1e-10)),
                 "classes": classes, "parameters": params})


def cmd_dot(args):
    model = _load_model(args.model)
    values = None
    if args.data:
        frame = _load_data(args.data, model)
        fit = estimate(model, frame, param=args.param)
        model = fit.model
        values = {}
        t = fit.table
        for s in t.slots:
            if s.source == "param":
                key = (t.vars[s.row], t.vars[s.col]) if s.mat != "v" else t.vars[s.row]
                values[slot_name(s.mat, key)] = float(fit.theta[fit.indices[0][s.payload]])
    text = to_dot(model, labels=args.labels or values is not None, diag=args.diag, values=values)
    if args.out and args.out != "-":
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# ------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lvm", description="Linear latent variable models")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("model", help="model file")
        if data:
            sp.add_argument("data", help="CSV data file")
        sp.add_argument("--param", default="relative",
                        choices=["relative", "hybrid", "absolute", "none"])
        sp.add_argument("--missing", action="store_true", help="full information ML")
        sp.add_argument("--json", help="write JSON here instead of stdout")

    sp = sub.add_parser("fit", help="maximum likelihood fit")
    common(sp)
    sp.add_argument("--cluster", help="cluster column for robust standard errors")
    sp.add_argument("--estimator", default="gaussian", choices=["gaussian", "iv"])
    sp.add_argument("--weights", help="weight column, or var=column,...")
    sp.add_argument("--vcov", choices=["expected", "hessian", "outer", "robust"])
    sp.add_argument("--summary", action="store_true", help="print a text summary")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("iv", help="instrumental variable estimation")
    common(sp)
    sp.add_argument("--fix", action="store_true", help="fix reference indicators first")
    sp.add_argument("--no-variance", action="store_true",
                    help="skip the variance step")
    sp.add_argument("--summary", action="store_true")
    sp.set_defaults(func=cmd_iv)

    sp = sub.add_parser("sim", help="simulate data")
    sp.add_argument("model")
    sp.add_argument("n", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--params", nargs="*", help="name=value parameter settings")
    sp.add_argument("--out", help="CSV output (default stdout)")
    sp.add_argument("--no-latent", action="store_true", help="drop latent columns")
    sp.set_defaults(func=cmd_sim)

    sp = sub.add_parser("test", help="likelihood ratio, Wald and score tests")
    common(sp)
    sp.add_argument("--lrt", help="second (nested) model file")
    sp.add_argument("--wald", help="comma separated name[=value] hypotheses")
    sp.add_argument("--score", action="append",
                    help="edges to add, e.g. 'y1 ~ y2' or 'y1 <- x'; repeatable")
    sp.set_defaults(func=cmd_test)

    sp = sub.add_parser("effects", help="total, direct and indirect effects")
    common(sp)
    sp.add_argument("outcome")
    sp.add_argument("exposure")
    sp.set_defaults(func=cmd_effects)

    sp = sub.add_parser("bootstrap", help="bootstrap the parameter estimates")
    common(sp)
    sp.add_argument("--R", type=int, default=100)
    sp.add_argument("--mode", default="nonparametric", choices=["nonparametric", "parametric"])
    sp.add_argument("--seed", type=int)
    sp.add_argument("--level", type=float, default=0.95)
    sp.add_argument("--threads", type=int, default=1, help="worker threads")
    sp.set_defaults(func=cmd_bootstrap)

    sp = sub.add_parser("mixture", help="finite mixture models")
    sp.add_argument("data")
    sp.add_argument("--K", type=int, required=True)
    sp.add_argument("--model", help="model file (default: unstructured normal mixture)")
    sp.add_argument("--columns", help="columns for the normal mixture")
    sp.add_argument("--variant", default="EM", choices=["EM", "CEM", "StEM"])
    sp.add_argument("--nstart", type=int, default=5)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--param", default="relative",
                    choices=["relative", "hybrid", "absolute", "none"])
    sp.add_argument("--json")
    sp.set_defaults(func=cmd_mixture)

    sp = sub.add_parser("dot", help="path diagram in Graphviz DOT format")
    sp.add_argument("model")
    sp.add_argument("--out")
    sp.add_argument("--labels", action="store_true")
    sp.add_argument("--diag", action="store_true")
    sp.add_argument("--data", help="fit first and annotate edges with estimates")
    sp.add_argument("--param", default="relative",
                    choices=["relative", "hybrid", "absolute", "none"])
    sp.set_defaults(func=cmd_dot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a command is required")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            args.func(args)
    except UsageError as exc:
        print(f"lvm: error: {exc}", file=sys.stderr)
        return 1
    except (EstimationError, ModelError, KeyError, ValueError,
            np.linalg.LinAlgError) as exc:
        print(f"lvm: failed: {exc}", file=sys.stderr)
        return 2
    return 0


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
