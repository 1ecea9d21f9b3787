"""Text format for models.

Grammar (EBNF; ``#`` starts a comment, blank lines are ignored)::

    file        = { section } ;
    section     = "[" name "]" NL { line NL } ;
    (* [model] *)
    model_line  = "name" IDENT ;
    (* [species] *)
    species     = IDENT NUMBER ( "*" | label { "," label } ) ;
    (* [parameters] *)
    parameter   = IDENT NUMBER ;
    (* [reactions] *)
    reaction    = IDENT ":" side "->" side "@" rate [ "in" label { "," label } ] ;
    side        = "0" | term { "+" term } ;
    term        = [ INT ] IDENT ;
    rate        = "massaction(" ( IDENT | NUMBER ) ")" | "expr(" STRING ")" ;
    (* [initial] *)
    initial     = "scatter" IDENT INT label | "set" IDENT INT INT ;
    (* [tspan] *)
    tspan       = "linspace" NUMBER NUMBER INT | NUMBER { NUMBER } ;
    (* [mesh] *)
    mesh        = "builtin" "grid" INT NUMBER { "," NUMBER } INT { "," INT }
                | "builtin" "sphere" NUMBER INT [ NUMBER ]
                | "file" PATH
                | "inline" NL rfmesh ;

``label`` is a non-negative integer subdomain label; ``rfmesh`` is the mesh
exchange format (see :mod:`rdmeflow.mesh`) running to the end of the section.
Multiple ``[tspan]`` number lines are concatenated.
"""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import ModelError
from .mesh import build_cartesian_grid, build_sphere_shell_mesh, format_mesh, load_mesh, parse_mesh
from .model import CustomPropensity, MassAction, MeshSource, ModelSpec, Parameter, Reaction, Scatter, SetCount, Species

SECTIONS = ("model", "species", "parameters", "reactions", "initial", "tspan", "mesh")


class ModelParseError(ModelError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def _num(text, lineno):
    try:
        return float(text)
    except ValueError:
        raise ModelParseError(f"expected a number, got {text!r}", lineno) from None


def _int(text, lineno):
    try:
        return int(text)
    except ValueError:
        raise ModelParseError(f"expected an integer, got {text!r}", lineno) from None


def _labels(text, lineno):
    if text == "*":
        return None
    return frozenset(_int(t, lineno) for t in text.split(",") if t)


_TERM = re.compile(r"^(?:(\d+)\s*\*?\s*)?([A-Za-z_][A-Za-z0-9_]*)$")
_REACTION = re.compile(
    r"^(?P<name>[A-Za-z_][A-Za-z0-9_]*)\s*:\s*(?P<lhs>.*?)\s*->\s*(?P<rhs>.*?)\s*@\s*"
    r"(?:massaction\(\s*(?P<rate>[^)\s]+)\s*\)|expr\(\s*\"(?P<expr>[^\"]*)\"\s*\))"
    r"(?:\s+in\s+(?P<labels>[\d,\s]+))?$"
)


def _side(text, lineno):
    text = text.strip()
    if text in ("", "0"):
        return {}
    out = {}
    for term in text.split("+"):
        m = _TERM.match(term.strip())
        if not m:
            raise ModelParseError(f"bad reaction term {term.strip()!r}", lineno)
        n = int(m.group(1)) if m.group(1) else 1
        out[m.group(2)] = out.get(m.group(2), 0) + n
    return out


def parse_model(text: str, base_dir=None) -> ModelSpec:
    """Parse the model text format; ``file`` meshes resolve against ``base_dir``."""
    section = None
    name = "model"
    species, params, reactions, initial, tspan = [], [], [], [], []
    mesh = subdomains = source = None
    inline: list | None = None
    inline_start = 0

    lines = text.splitlines()
    for lineno, raw in enumerate(lines, start=1):
        if inline is not None and not raw.strip().startswith("["):
            inline.append(raw)
            continue
        line = raw.split("#", 1)[0].strip() if section != "reactions" else _strip_comment(raw)
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            if inline is not None:
                mesh, subdomains = _parse_inline(inline, inline_start)
                inline = None
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ModelParseError(f"unknown section [{section}]", lineno)
            continue
        if section is None:
            raise ModelParseError("content before the first section", lineno)
        tok = line.split()
        if section == "model":
            if tok[0] != "name" or len(tok) != 2:
                raise ModelParseError("expected 'name <identifier>'", lineno)
            name = tok[1]
        elif section == "species":
            if len(tok) != 3:
                raise ModelParseError("expected '<name> <D> <labels|*>'", lineno)
            species.append(Species(tok[0], _num(tok[1], lineno), _labels(tok[2], lineno)))
        elif section == "parameters":
            if len(tok) != 2:
                raise ModelParseError("expected '<name> <value>'", lineno)
            params.append(Parameter(tok[0], _num(tok[1], lineno)))
        elif section == "reactions":
            m = _REACTION.match(line)
            if not m:
                raise ModelParseError(f"cannot parse reaction {line!r}", lineno)
            if m.group("rate") is not None:
                rate = m.group("rate")
                try:
                    rate = float(rate)
                except ValueError:
                    pass
                prop = MassAction(rate)
            else:
                prop = CustomPropensity(m.group("expr"))
            labels = _labels(m.group("labels").replace(" ", ""), lineno) if m.group("labels") else None
            reactions.append(Reaction(m.group("name"), _side(m.group("lhs"), lineno),
                                      _side(m.group("rhs"), lineno), prop, labels))
        elif section == "initial":
            if tok[0] == "scatter" and len(tok) == 4:
                initial.append(Scatter(tok[1], _int(tok[2], lineno), _int(tok[3], lineno)))
            elif tok[0] == "set" and len(tok) == 4:
                initial.append(SetCount(tok[1], _int(tok[2], lineno), _int(tok[3], lineno)))
            else:
                raise ModelParseError("expected 'scatter <species> <count> <label>' or 'set <species> <voxel> <count>'", lineno)
        elif section == "tspan":
            if tok[0] == "linspace":
                if len(tok) != 4:
                    raise ModelParseError("expected 'linspace <t0> <t1> <n>'", lineno)
                tspan.extend(np.linspace(_num(tok[1], lineno), _num(tok[2], lineno), _int(tok[3], lineno)).tolist())
            else:
                tspan.extend(_num(t, lineno) for t in tok)
        elif section == "mesh":
            if mesh is not None:
                raise ModelParseError("more than one mesh", lineno)
            mesh, subdomains, source, inline = _parse_mesh_line(tok, lineno, base_dir)
            inline_start = lineno + 1
    if inline is not None:
        mesh, subdomains = _parse_inline(inline, inline_start)
    if mesh is None:
        raise ModelParseError("model has no [mesh] section")
    return ModelSpec(name, species, params, reactions, mesh, subdomains, initial, tspan, source)


def _strip_comment(raw):
    # '#' inside expr("...") is not a comment
    out, quoted = [], False
    for ch in raw:
        if ch == '"':
            quoted = not quoted
        if ch == "#" and not quoted:
            break
        out.append(ch)
    return "".join(out).strip()


def _parse_inline(lines, start):
    from .errors import MeshParseError

    try:
        return parse_mesh("\n".join(lines))
    except MeshParseError as exc:
        line = start + exc.line - 1 if exc.line is not None else None
        raise ModelParseError(f"inline mesh: {exc}", line) from None


def _parse_mesh_line(tok, lineno, base_dir):
    if tok[0] == "inline" and len(tok) == 1:
        return None, None, None, []
    if tok[0] == "file" and len(tok) == 2:
        path = Path(tok[1])
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        mesh, sub = load_mesh(path)
        return mesh, sub, MeshSource("file", (tok[1],)), None
    if tok[0] == "builtin" and len(tok) >= 2:
        if tok[1] == "grid" and len(tok) == 5:
            dim = _int(tok[2], lineno)
            lengths = tuple(_num(t, lineno) for t in tok[3].split(","))
            counts = tuple(_int(t, lineno) for t in tok[4].split(","))
            mesh = build_cartesian_grid(dim, lengths, counts)
            from .mesh import SubdomainMap

            sub = SubdomainMap(np.ones(mesh.num_voxels, dtype=np.int64))
            return mesh, sub, MeshSource("grid", (dim, lengths, counts)), None
        if tok[1] == "sphere" and len(tok) in (4, 5):
            radius, n = _num(tok[2], lineno), _int(tok[3], lineno)
            thick = _num(tok[4], lineno) if len(tok) == 5 else None
            mesh, sub = build_sphere_shell_mesh(radius, n, thick)
            return mesh, sub, MeshSource("sphere", (radius, n, thick)), None
    raise ModelParseError(f"cannot parse mesh line {' '.join(tok)!r}", lineno)


def load_model(path) -> ModelSpec:
    path = Path(path)
    return parse_model(path.read_text(), base_dir=path.parent)


def _fmt_num(x):
    return repr(float(x))


def _fmt_labels(labels):
    return "*" if labels is None else ",".join(str(l) for l in sorted(labels))


def _fmt_side(side):
    if not side:
        return "0"
    return " + ".join(f"{n} {s}" if n != 1 else s for s, n in side.items())


def format_model(model: ModelSpec) -> str:
    """Canonical text form; ``parse_model(format_model(m))`` is equivalent to ``m``."""
    out = ["[model]", f"name {model.name}", "", "[species]"]
    for s in model.species:
        out.append(f"{s.name} {_fmt_num(s.diffusion_constant)} {_fmt_labels(s.allowed_subdomains)}")
    out += ["", "[parameters]"]
    for p in model.parameters:
        out.append(f"{p.name} {_fmt_num(p.value)}")
    out += ["", "[reactions]"]
    for r in model.reactions:
        if isinstance(r.propensity, MassAction):
            rate = r.propensity.rate
            rate_text = f"massaction({rate if isinstance(rate, str) else _fmt_num(rate)})"
        else:
            rate_text = f'expr("{r.propensity.source}")'
        where = f" in {_fmt_labels(r.restrict_to)}" if r.restrict_to is not None else ""
        out.append(f"{r.name}: {_fmt_side(r.reactants)} -> {_fmt_side(r.products)} @ {rate_text}{where}")
    out += ["", "[initial]"]
    for d in model.initial:
        if isinstance(d, Scatter):
            out.append(f"scatter {d.species} {d.count} {d.subdomain}")
        else:
            out.append(f"set {d.species} {d.voxel} {d.count}")
    out += ["", "[tspan]"]
    out.append(" ".join(_fmt_num(t) for t in model.tspan))
    out += ["", "[mesh]"]
    src = model.mesh_source
    if src is not None and src.kind == "grid":
        dim, lengths, counts = src.args
        out.append(f"builtin grid {dim} {','.join(_fmt_num(l) for l in lengths)} {','.join(str(c) for c in counts)}")
    elif src is not None and src.kind == "sphere":
        radius, n, thick = src.args
        out.append(f"builtin sphere {_fmt_num(radius)} {n}" + (f" {_fmt_num(thick)}" if thick is not None else ""))
    else:
        # file meshes are inlined so the text is self-contained
        out.append("inline")
        out.append(format_mesh(model.mesh, model.subdomains).rstrip("\n"))
    return "\n".join(out) + "\n"
