"""Declarative reaction-diffusion models.

Mass-action propensities in a voxel of volume ``V`` follow the usual
mesoscopic convention, with ``k`` in macroscopic units:

==================  ==========================
reaction            propensity
==================  ==========================
``0 -> ...``        ``k * V``
``A -> ...``        ``k * x_A``
``A + B -> ...``    ``k / V * x_A * x_B``
``2 A -> ...``      ``k / V * x_A * (x_A - 1) / 2``
==================  ==========================

The dimerization form counts distinct ``A``-``A`` pairs, matching ``A + B``
which counts distinct ``A``-``B`` pairs.

A reaction fires only in voxels whose subdomain admits every species it
consumes or produces, intersected with its explicit ``restrict_to`` labels.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Mapping

import numpy as np

from . import expr as _expr
from .errors import ExpressionError, ModelError
from .mesh import Mesh, SubdomainMap, assemble_diffusion


@dataclass(frozen=True)
class Species:
    name: str
    diffusion_constant: float = 0.0
    allowed_subdomains: frozenset | None = None

    def __post_init__(self):
        if self.allowed_subdomains is not None:
            object.__setattr__(self, "allowed_subdomains", frozenset(int(l) for l in self.allowed_subdomains))


@dataclass(frozen=True)
class Parameter:
    name: str
    value: float


@dataclass(frozen=True)
class MassAction:
    rate: str | float


@dataclass(frozen=True)
class CustomPropensity:
    source: str
    tree: object = field(compare=False, default=None)

    def __post_init__(self):
        if self.tree is None:
            object.__setattr__(self, "tree", _expr.parse_propensity(self.source))


@dataclass(frozen=True)
class Reaction:
    name: str
    reactants: Mapping[str, int]
    products: Mapping[str, int]
    propensity: MassAction | CustomPropensity
    restrict_to: frozenset | None = None

    def __post_init__(self):
        object.__setattr__(self, "reactants", dict(self.reactants))
        object.__setattr__(self, "products", dict(self.products))
        if self.restrict_to is not None:
            object.__setattr__(self, "restrict_to", frozenset(int(l) for l in self.restrict_to))

    def change(self) -> dict:
        """Net stoichiometric change per species (zeros dropped)."""
        out = {}
        for s, n in self.reactants.items():
            out[s] = out.get(s, 0) - n
        for s, n in self.products.items():
            out[s] = out.get(s, 0) + n
        return {s: n for s, n in out.items() if n != 0}

    @property
    def order(self) -> int:
        return sum(self.reactants.values())


@dataclass(frozen=True)
class Scatter:
    species: str
    count: int
    subdomain: int


@dataclass(frozen=True)
class SetCount:
    species: str
    voxel: int
    count: int


@dataclass(frozen=True)
class MeshSource:
    """How to rebuild the mesh when a model is written to text."""

    kind: str  # "grid", "sphere" or "file"
    args: tuple = ()


@dataclass(frozen=True, eq=False)
class ModelSpec:
    name: str
    species: tuple
    parameters: tuple
    reactions: tuple
    mesh: Mesh
    subdomains: SubdomainMap
    initial: tuple
    tspan: np.ndarray
    mesh_source: MeshSource | None = None

    def __post_init__(self):
        for attr in ("species", "parameters", "reactions", "initial"):
            object.__setattr__(self, attr, tuple(getattr(self, attr)))
        ts = np.array(self.tspan, dtype=float).reshape(-1)
        ts.setflags(write=False)
        object.__setattr__(self, "tspan", ts)

    @property
    def species_names(self) -> list:
        return [s.name for s in self.species]

    @property
    def species_index(self) -> dict:
        return {s.name: i for i, s in enumerate(self.species)}

    @property
    def parameter_values(self) -> dict:
        return {p.name: float(p.value) for p in self.parameters}

    @property
    def num_voxels(self) -> int:
        return self.mesh.num_voxels

    @cached_property
    def diffusion(self):
        return assemble_diffusion(self.mesh, self.subdomains, self.species)

    @cached_property
    def text(self) -> str:
        from .modelfile import format_model

        return format_model(self)

    @cached_property
    def model_hash(self) -> bytes:
        """32-byte SHA-256 of the canonical text form."""
        return hashlib.sha256(self.text.encode()).digest()

    def with_parameters(self, **values) -> "ModelSpec":
        known = {p.name for p in self.parameters}
        unknown = set(values) - known
        if unknown:
            raise ModelError(f"unknown parameters {sorted(unknown)}")
        params = tuple(Parameter(p.name, float(values.get(p.name, p.value))) for p in self.parameters)
        return replace(self, parameters=params)

    def allowed_mask(self, species: str) -> np.ndarray:
        spec = self.species[self.species_index[species]]
        if spec.allowed_subdomains is None:
            return np.ones(self.num_voxels, dtype=bool)
        return np.isin(self.subdomains.labels, list(spec.allowed_subdomains))

    def reaction_mask(self, reaction: Reaction) -> np.ndarray:
        mask = np.ones(self.num_voxels, dtype=bool)
        idx = self.species_index
        for s in set(reaction.reactants) | set(reaction.products):
            if s in idx:
                mask &= self.allowed_mask(s)
        if reaction.restrict_to is not None:
            mask &= np.isin(self.subdomains.labels, list(reaction.restrict_to))
        return mask


class ModelBuilder:
    """Incremental construction of a :class:`ModelSpec`."""

    def __init__(self, name="model"):
        self.name = name
        self._species, self._parameters, self._reactions, self._initial = [], [], [], []
        self._mesh = self._subdomains = self._mesh_source = None
        self._tspan = []

    def add_species(self, name, diffusion_constant=0.0, subdomains=None):
        self._species.append(Species(name, diffusion_constant, subdomains))
        return self

    def add_parameter(self, name, value):
        self._parameters.append(Parameter(name, float(value)))
        return self

    def add_reaction(self, name, reactants, products, rate=None, propensity=None, restrict_to=None):
        if (rate is None) == (propensity is None):
            raise ModelError(f"reaction {name!r}: give exactly one of rate= or propensity=")
        prop = MassAction(rate) if rate is not None else CustomPropensity(propensity)
        self._reactions.append(Reaction(name, reactants, products, prop, restrict_to))
        return self

    def set_mesh(self, mesh, subdomains=None, source=None):
        self._mesh = mesh
        self._subdomains = subdomains or SubdomainMap(np.ones(mesh.num_voxels, dtype=np.int64))
        self._mesh_source = source
        return self

    def scatter(self, species, count, subdomain):
        self._initial.append(Scatter(species, int(count), int(subdomain)))
        return self

    def set_count(self, species, voxel, count):
        self._initial.append(SetCount(species, int(voxel), int(count)))
        return self

    def set_tspan(self, tspan):
        self._tspan = list(tspan)
        return self

    def build(self) -> ModelSpec:
        if self._mesh is None:
            raise ModelError("model has no mesh")
        return ModelSpec(
            self.name, self._species, self._parameters, self._reactions, self._mesh,
            self._subdomains, self._initial, self._tspan, self._mesh_source,
        )


# --------------------------------------------------------------------------
# propensities
# --------------------------------------------------------------------------

def rate_value(rate, parameters: Mapping[str, float]) -> float:
    if isinstance(rate, str):
        return float(parameters[rate])
    return float(rate)


def mass_action_propensity(reaction: Reaction, voxel_state: Mapping[str, int], voxel_volume: float,
                           parameters: Mapping[str, float] | None = None) -> float:
    """Mass-action propensity of ``reaction`` in one voxel (see module docstring)."""
    k = rate_value(reaction.propensity.rate, parameters or {})
    V = float(voxel_volume)
    items = list(reaction.reactants.items())
    order = sum(n for _, n in items)
    if order == 0:
        return k * V
    if order == 1:
        return k * voxel_state[items[0][0]]
    if len(items) == 2:
        return k / V * voxel_state[items[0][0]] * voxel_state[items[1][0]]
    if order == 2:
        x = voxel_state[items[0][0]]
        return k / V * x * (x - 1) / 2
    raise ModelError(f"mass action supports at most bimolecular reactions ({reaction.name!r})")


def propensity(reaction: Reaction, voxel_state: Mapping[str, int], voxel_volume: float,
               parameters: Mapping[str, float]) -> float:
    """Propensity of ``reaction`` evaluated by tree walking (no compiled path)."""
    if isinstance(reaction.propensity, MassAction):
        return mass_action_propensity(reaction, voxel_state, voxel_volume, parameters)
    env = dict(parameters)
    env.update(voxel_state)
    env[_expr.VOLUME_SYMBOL] = float(voxel_volume)
    return _expr.evaluate(reaction.propensity.tree, env)


# --------------------------------------------------------------------------
# initial state
# --------------------------------------------------------------------------

def scatter_initial(model: ModelSpec, species: str, total_count: int, subdomain: int, rng,
                    state: np.ndarray | None = None) -> np.ndarray:
    """Place ``total_count`` molecules in ``subdomain`` with probability proportional to volume.

    Returns a new ``K x S`` state; ``state`` (default all zeros) is not modified.
    """
    if state is None:
        state = np.zeros((model.num_voxels, len(model.species)), dtype=np.int64)
    state = np.array(state, dtype=np.int64, copy=True)
    if species not in model.species_index:
        raise ModelError(f"unknown species {species!r}")
    if total_count < 0:
        raise ModelError("scatter count must be >= 0")
    spec = model.species[model.species_index[species]]
    if spec.allowed_subdomains is not None and subdomain not in spec.allowed_subdomains:
        raise ModelError(f"species {species!r} is not permitted in subdomain {subdomain}")
    voxels = model.subdomains.voxels(subdomain)
    if len(voxels) == 0:
        raise ModelError(f"subdomain {subdomain} has no voxels")
    if total_count == 0:
        return state
    vols = model.mesh.volumes[voxels]
    placed = rng.multinomial(total_count, vols / vols.sum())
    state[voxels, model.species_index[species]] += placed
    return state


def initial_state(model: ModelSpec, rng=None) -> np.ndarray:
    """Apply the model's initial directives in order; scatter needs ``rng``."""
    state = np.zeros((model.num_voxels, len(model.species)), dtype=np.int64)
    idx = model.species_index
    for d in model.initial:
        if isinstance(d, SetCount):
            state[d.voxel, idx[d.species]] = d.count
        else:
            if rng is None:
                raise ModelError("scatter directives need a random generator")
            state = scatter_initial(model, d.species, d.count, d.subdomain, rng, state)
    return state


# --------------------------------------------------------------------------
# validation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str

    def __str__(self):
        return f"{self.code}: {self.message}"


def validate_model(model: ModelSpec) -> list:
    """One :class:`Diagnostic` per violated invariant; empty when the model is sound."""
    diags = []

    def add(code, message):
        diags.append(Diagnostic(code, message))

    species = model.species_names
    params = [p.name for p in model.parameters]
    declared = model.subdomains.declared

    for names, what in ((species, "species"), (params, "parameter")):
        seen = set()
        for n in names:
            if n in seen:
                add("DUPLICATE_NAME", f"{what} {n!r} declared twice")
            seen.add(n)
    for n in sorted(set(species) & set(params)):
        add("NAME_CLASH", f"{n!r} is both a species and a parameter")
    for n in species + params:
        if n == _expr.VOLUME_SYMBOL or n in _expr.FUNCTIONS:
            add("RESERVED_NAME", f"{n!r} is reserved")

    for s in model.species:
        D = s.diffusion_constant
        if not (isinstance(D, (int, float)) and math.isfinite(D) and D >= 0):
            add("BAD_DIFFUSION", f"species {s.name!r} has diffusion constant {D!r}")
        if s.allowed_subdomains is not None:
            extra = set(s.allowed_subdomains) - declared
            if extra:
                add("UNDECLARED_SUBDOMAIN", f"species {s.name!r} uses labels {sorted(extra)}")
    for p in model.parameters:
        if not math.isfinite(p.value):
            add("BAD_PARAMETER", f"parameter {p.name!r} is not finite")

    pvals = model.parameter_values
    for r in model.reactions:
        for s, n in list(r.reactants.items()) + list(r.products.items()):
            if s not in species:
                add("UNDECLARED_SPECIES", f"reaction {r.name!r} references {s!r}")
            if int(n) != n or n <= 0:
                add("BAD_STOICHIOMETRY", f"reaction {r.name!r}: coefficient of {s!r} must be a positive integer")
        if not r.change():
            add("ZERO_CHANGE", f"reaction {r.name!r} does not change the state")
        if r.restrict_to is not None and set(r.restrict_to) - declared:
            add("UNDECLARED_SUBDOMAIN", f"reaction {r.name!r} restricted to {sorted(set(r.restrict_to) - declared)}")
        if isinstance(r.propensity, MassAction):
            if r.order > 2:
                add("MASS_ACTION_ORDER", f"reaction {r.name!r} has {r.order} reactant molecules")
            rate = r.propensity.rate
            if isinstance(rate, str) and rate not in pvals:
                add("UNKNOWN_PARAMETER", f"reaction {r.name!r} uses undeclared rate {rate!r}")
            else:
                try:
                    k = rate_value(rate, pvals)
                except (KeyError, TypeError, ValueError):
                    k = float("nan")
                if not (math.isfinite(k) and k >= 0):
                    add("NEGATIVE_RATE", f"reaction {r.name!r} has rate {k}")
        else:
            try:
                _expr.check_identifiers(r.propensity.tree, species, params, r.propensity.source)
            except ExpressionError as exc:
                add("UNRESOLVED_IDENTIFIER", f"reaction {r.name!r}: {exc}")

    ts = model.tspan
    if len(ts) == 0:
        add("EMPTY_TSPAN", "tspan has no output times")
    else:
        if not np.all(np.isfinite(ts)):
            add("BAD_TSPAN", "tspan contains non-finite times")
        if ts[0] < 0:
            add("NEGATIVE_TSPAN", "tspan starts before 0")
        if np.any(np.diff(ts) <= 0):
            add("TSPAN_NOT_INCREASING", "tspan must be strictly increasing")

    K = model.num_voxels
    idx = model.species_index
    for d in model.initial:
        if d.species not in idx:
            add("UNDECLARED_SPECIES", f"initial condition references {d.species!r}")
            continue
        if d.count < 0:
            add("NEGATIVE_COUNT", f"initial count for {d.species!r} is negative")
        spec = model.species[idx[d.species]]
        if isinstance(d, SetCount):
            if not 0 <= d.voxel < K:
                add("VOXEL_OUT_OF_RANGE", f"voxel {d.voxel} not in 0..{K - 1}")
            elif d.count > 0 and spec.allowed_subdomains is not None and \
                    int(model.subdomains.labels[d.voxel]) not in spec.allowed_subdomains:
                add("FORBIDDEN_INITIAL", f"{d.species!r} placed in voxel {d.voxel} outside its subdomains")
        else:
            if d.subdomain not in declared:
                add("UNDECLARED_SUBDOMAIN", f"scatter of {d.species!r} into label {d.subdomain}")
            elif spec.allowed_subdomains is not None and d.subdomain not in spec.allowed_subdomains:
                add("FORBIDDEN_INITIAL", f"{d.species!r} scattered into forbidden subdomain {d.subdomain}")
    return diags


def require_valid(model: ModelSpec) -> None:
    diags = validate_model(model)
    if diags:
        raise ModelError("invalid model:\n  " + "\n  ".join(map(str, diags)))
