"""Graphviz DOT export of path diagrams."""
from __future__ import annotations

from .model import Model, slot_name

FILL = {"exogenous": "lightgray", "endogenous": "white", "latent": "lightyellow"}


def _quote(s: str) -> str:
    return '"' + str(s).replace("\\", "\\\\").replace('"', '\\"') + '"'


def _binding_text(kind, key, b, values):
    name = slot_name(kind, key)
    if values is not None and name in values:
        return f"{name}={values[name]:.4g}"
    if b.is_fixed:
        return f"{b.value:g}"
    if b.is_label or b.kind == "covariate":
        return str(b.value)
    return name


def to_dot(model: Model, labels: bool = False, diag: bool = False,
           values: dict | None = None) -> str:
    """Observed variables as boxes, latent ones as ellipses, regressions as
    arrows and covariances as dashed double-headed arrows.

    ``labels`` annotates edges with parameter names (or ``values`` when
    given); ``diag`` adds variance self-loops.
    """
    exo = set(model.exogenous())
    lat = set(model.latent_vars())
    lines = ["digraph lvm {", "  rankdir=LR;"]
    for v in model.vars():
        cls = "latent" if v in lat else "exogenous" if v in exo else "endogenous"
        shape = "ellipse" if v in lat else "box"
        lines.append(f"  {_quote(v)} [shape={shape}, class={cls}, style=filled, "
                     f"fillcolor={FILL[cls]}];")
    for (t, f), b in model.regressions().items():
        attr = f" [label={_quote(_binding_text('A', (t, f), b, values))}]" if labels else ""
        lines.append(f"  {_quote(f)} -> {_quote(t)}{attr};")
    for (a, c), b in model.covariances().items():
        if a == c and not diag:
            continue
        attr = "dir=both, style=dashed"
        if labels:
            attr += f", label={_quote(_binding_text('P', (a, c), b, values))}"
        lines.append(f"  {_quote(a)} -> {_quote(c)} [{attr}];")
    if diag:
        explicit = {a for (a, c) in model.covariances() if a == c}
        for v in model.vars():
            if v in exo or v in explicit:
                continue
            attr = "dir=both, style=dashed"
            if labels:
                name = slot_name("P", (v, v))
                text = f"{name}={values[name]:.4g}" if values and name in values else name
                attr += f", label={_quote(text)}"
            lines.append(f"  {_quote(v)} -> {_quote(v)} [{attr}];")
    lines.append("}")
    return "\n".join(lines) + "\n"
