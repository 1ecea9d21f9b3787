"""Spontaneous Cdc42 polarization on a spherical cell.

Three reactions on a sphere-shell mesh, cytosolic ``Cdc42_c`` and
membrane-bound ``Cdc42_m``::

    on:       Cdc42_c -> Cdc42_m            (k_on, membrane voxels)
    off:      Cdc42_m -> Cdc42_c            (k_off)
    feedback: Cdc42_c + Cdc42_m -> 2 Cdc42_m  (k_fb, membrane voxels)

With a well-mixed cytosol the feedback makes membrane growth critical at
``N* = k_off * V / k_fb`` molecules (``V`` the cell volume). Below ``N*``
the membrane is essentially empty. Just above it a few membrane molecules
descend from a common ancestor and sit in one patch; far above it so many
molecules coexist that they spread over the whole membrane.

Polarization of a snapshot is the largest share of membrane molecules found
in any cap covering 10% of the membrane area. Caps are grown around each
membrane voxel by great-circle distance (ties by voxel index) until their
area reaches 10%.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import MetricError, RdmeflowError
from .ensemble import PostProcessor, register_postprocessor, run_ensemble_nostorage
from .mesh import MEMBRANE, CYTOSOL, Mesh, SubdomainMap, build_sphere_shell_mesh
from .model import MeshSource, ModelBuilder, ModelSpec
from .rng import derive_seed

CYTOSOLIC = "Cdc42_c"
MEMBRANE_BOUND = "Cdc42_m"
CAP_FRACTION = 0.10
WINDOW = 0.5

# dimensionless units: radius 1, time in units of 1/k_off; N* is about 500
YEAST_PARAMS = {
    "k_on": 1e-5,
    "k_off": 1.0,
    "k_fb": 4.0 / 3.0 * math.pi / 500.0,
    "D_cyt": 2.0,
    "D_mem": 5e-4,
}
YEAST_T_END = 200.0
YEAST_OUTPUTS = 101


def switch_threshold(params=None, volume=4.0 / 3.0 * math.pi) -> float:
    """Molecule count at which membrane growth turns critical."""
    p = {**YEAST_PARAMS, **(params or {})}
    return math.inf if p["k_fb"] == 0 else p["k_off"] * volume / p["k_fb"]


def _check_params(p):
    for name in ("k_on", "k_off", "k_fb", "D_cyt", "D_mem"):
        if not p[name] >= 0:
            raise ValueError(f"{name} must be non-negative, got {p[name]}")


def _builder(n_total, p, tspan, cytosolic_labels=(CYTOSOL, MEMBRANE)):
    if n_total < 0:
        raise ValueError(f"N_total must be non-negative, got {n_total}")
    _check_params(p)
    b = ModelBuilder("yeast-polarization")
    b.add_species(CYTOSOLIC, p["D_cyt"], set(cytosolic_labels))
    b.add_species(MEMBRANE_BOUND, p["D_mem"], {MEMBRANE})
    for name in ("k_on", "k_off", "k_fb"):
        b.add_parameter(name, p[name])
    b.add_reaction("on", {CYTOSOLIC: 1}, {MEMBRANE_BOUND: 1}, rate="k_on", restrict_to={MEMBRANE})
    b.add_reaction("off", {MEMBRANE_BOUND: 1}, {CYTOSOLIC: 1}, rate="k_off")
    b.add_reaction("feedback", {CYTOSOLIC: 1, MEMBRANE_BOUND: 1}, {MEMBRANE_BOUND: 2}, rate="k_fb",
                   restrict_to={MEMBRANE})
    b.set_tspan(np.linspace(0.0, YEAST_T_END, YEAST_OUTPUTS) if tspan is None else tspan)
    return b


def build_yeast_model(n_total: int, params=None, mesh_subdiv: int = 2, tspan=None) -> ModelSpec:
    """Yeast model with ``n_total`` Cdc42 molecules.

    10% start on the membrane, the rest scattered through the cytosol
    interior; both placements are drawn per realization.
    """
    p = {**YEAST_PARAMS, **(params or {})}
    b = _builder(n_total, p, tspan)
    mesh, sub = build_sphere_shell_mesh(1.0, mesh_subdiv)
    b.set_mesh(mesh, sub, MeshSource("sphere", (1.0, mesh_subdiv, None)))
    on_membrane = int(round(0.1 * n_total))
    if on_membrane:
        b.scatter(MEMBRANE_BOUND, on_membrane, MEMBRANE)
    if n_total - on_membrane:
        b.scatter(CYTOSOLIC, n_total - on_membrane, CYTOSOL)
    return b.build()


def build_reduced_yeast_model(n_total: int, params=None, tspan=None, volume: float = 1.0) -> ModelSpec:
    """Single well-mixed membrane voxel holding both species (no space)."""
    p = {**YEAST_PARAMS, **(params or {})}
    b = _builder(n_total, p, tspan, cytosolic_labels=(MEMBRANE,))
    mesh = Mesh(np.zeros((1, 3)), np.array([volume]), np.zeros((0, 2), dtype=np.int64),
                np.zeros(0), np.zeros(0), 3)
    b.set_mesh(mesh, SubdomainMap(np.array([MEMBRANE]), {MEMBRANE: "membrane"}))
    on_membrane = int(round(0.1 * n_total))
    b.set_count(MEMBRANE_BOUND, 0, on_membrane)
    b.set_count(CYTOSOLIC, 0, n_total - on_membrane)
    return b.build()


def equilibrium_membrane_fraction(k_on: float, k_off: float, accessible: float = 1.0) -> float:
    """Stationary membrane share without feedback.

    ``accessible`` is the fraction of cytosolic molecules that sit in
    membrane voxels (1 for the single-voxel model).
    """
    return k_on * accessible / (k_on * accessible + k_off)


# --------------------------------------------------------------------------
# polarization metric
# --------------------------------------------------------------------------

def membrane_voxels(mesh: Mesh, subdomains: SubdomainMap) -> np.ndarray:
    if MEMBRANE not in subdomains.declared:
        raise MetricError("model has no membrane subdomain")
    idx = np.flatnonzero(subdomains.labels == MEMBRANE)
    if len(idx) == 0:
        raise MetricError("membrane subdomain has no voxels")
    return idx


def cap_matrix(mesh: Mesh, subdomains: SubdomainMap, fraction: float = CAP_FRACTION) -> np.ndarray:
    """Boolean ``(centres, membrane voxels)`` matrix: row ``c`` is the cap grown around voxel ``c``.

    Membrane voxel volumes stand in for their surface areas (the shell has
    uniform thickness, so the shares coincide).
    """
    idx = membrane_voxels(mesh, subdomains)
    pts = mesh.coords[idx]
    norms = np.linalg.norm(pts, axis=1, keepdims=True)
    unit = np.divide(pts, norms, out=np.zeros_like(pts), where=norms > 0)
    area = mesh.volumes[idx]
    target = fraction * area.sum()
    n = len(idx)
    caps = np.zeros((n, n), dtype=bool)
    order_key = np.arange(n)
    for c in range(n):
        dist = np.arccos(np.clip(unit @ unit[c], -1.0, 1.0))
        order = np.lexsort((order_key, dist))
        cum = np.cumsum(area[order])
        # tolerate rounding so a cap of exactly 10% counts as reaching it
        take = int(np.searchsorted(cum, target * (1 - 1e-12))) + 1
        caps[c, order[:take]] = True
    return caps


_CAP_CACHE: dict = {}


def _caps_for(model: ModelSpec):
    key = id(model.mesh)
    hit = _CAP_CACHE.get(key)
    if hit is None or hit[0] is not model.mesh:
        if len(_CAP_CACHE) > 16:
            _CAP_CACHE.clear()
        hit = _CAP_CACHE[key] = (model.mesh, membrane_voxels(model.mesh, model.subdomains),
                                 cap_matrix(model.mesh, model.subdomains).astype(float))
    return hit[1], hit[2]


def polarization_from_counts(membrane_counts: np.ndarray, caps: np.ndarray) -> float:
    """Max percentage of molecules inside any cap; 0 for an empty membrane."""
    total = membrane_counts.sum()
    if total == 0:
        return 0.0
    return float(min(100.0, 100.0 * (caps @ membrane_counts).max() / total))


def polarization_percent(traj, t_index: int, model: ModelSpec) -> float:
    idx, caps = _caps_for(model)
    x = traj.counts[t_index, idx, traj.species_index(MEMBRANE_BOUND)].astype(float)
    return polarization_from_counts(x, caps)


def uniform_polarization(model: ModelSpec) -> float:
    """Metric value for membrane molecules spread in proportion to area."""
    idx, caps = _caps_for(model)
    return polarization_from_counts(model.mesh.volumes[idx], caps)


@dataclass(frozen=True)
class PolarizationSeries:
    t: np.ndarray
    percent: np.ndarray
    membrane_count: np.ndarray
    window_mean: float
    window_std: float


def polarization_series(traj, model: ModelSpec, window: float = WINDOW) -> PolarizationSeries:
    """Polarization at every output time, averaged over the last ``window`` of tspan."""
    idx, caps = _caps_for(model)
    m = traj.counts[:, idx, traj.species_index(MEMBRANE_BOUND)].astype(float)
    percent = np.array([polarization_from_counts(row, caps) for row in m])
    t = np.asarray(traj.tspan, dtype=float)
    start = t[0] + (1 - window) * (t[-1] - t[0])
    sel = t >= start - 1e-12 * max(1.0, abs(t[-1]))
    w = percent[sel]
    return PolarizationSeries(t, percent, m.sum(axis=1).astype(np.int64), float(w.mean()), float(w.std()))


def _polarization_arity(model, **_):
    return 3 + len(model.tspan)


@register_postprocessor("polarization", _polarization_arity)
def _polarization(traj, model, window=WINDOW):
    """``[window mean %, window std %, window mean membrane count, membrane count per output time...]``."""
    s = polarization_series(traj, model, window)
    t = s.t
    sel = t >= t[0] + (1 - window) * (t[-1] - t[0]) - 1e-12 * max(1.0, abs(t[-1]))
    return np.concatenate([[s.window_mean, s.window_std, s.membrane_count[sel].mean()],
                           s.membrane_count.astype(float)])


# --------------------------------------------------------------------------
# switch sweep
# --------------------------------------------------------------------------

@dataclass
class SwitchPoint:
    n_total: int
    polarization: float         # ensemble mean of the window-averaged max polarization
    polarization_ci: float
    polarization_std: float     # ensemble mean of the within-window std
    membrane_count: float       # ensemble mean membrane count over the window
    membrane_series: np.ndarray
    error: str | None = None


@dataclass
class SwitchResult:
    points: list
    tspan: np.ndarray
    params: dict
    uniform_percent: float

    def to_json(self) -> dict:
        return {
            "params": self.params,
            "uniform_percent": self.uniform_percent,
            "tspan": self.tspan.tolist(),
            "points": [{
                "N": p.n_total, "polarization": p.polarization, "polarization_ci95": p.polarization_ci,
                "polarization_std": p.polarization_std, "membrane_count": p.membrane_count,
                "membrane_series": p.membrane_series.tolist(), "error": p.error,
            } for p in self.points],
        }

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("N,polarization,polarization_ci95,polarization_std,membrane_count,error\n")
            for p in self.points:
                fh.write(f"{p.n_total},{p.polarization!r},{p.polarization_ci!r},{p.polarization_std!r},"
                         f"{p.membrane_count!r},{p.error or ''}\n")


def run_switch_sweep(n_values, params=None, ensemble_size: int = 3, workers: int = 1, mesh_subdiv: int = 2,
                     base_seed: int = 0, tspan=None, window: float = WINDOW) -> SwitchResult:
    """One fused (no-storage) ensemble per total molecule count ``N``.

    ``N`` enters through the initial state rather than a rate, so each point
    gets its own model; point ``N`` uses base seed ``derive_seed(base_seed, N)``.
    A failed point is flagged and the sweep carries on.
    """
    p = {**YEAST_PARAMS, **(params or {})}
    g = PostProcessor.make("polarization", window=window)
    points = []
    for n in n_values:
        model = build_yeast_model(int(n), p, mesh_subdiv, tspan)
        try:
            s = run_ensemble_nostorage(model, ensemble_size, g, workers, derive_seed(base_seed, int(n)))
        except RdmeflowError as exc:
            points.append(SwitchPoint(int(n), math.nan, math.nan, math.nan, math.nan,
                                      np.full(len(model.tspan), math.nan), f"{type(exc).__name__}: {exc}"))
            continue
        points.append(SwitchPoint(int(n), float(s.mean[0]), float(s.ci95[0]), float(s.mean[1]),
                                  float(s.mean[2]), s.mean[3:].copy()))
    ref = build_yeast_model(0, p, mesh_subdiv, tspan)
    return SwitchResult(points, np.asarray(ref.tspan), p, uniform_polarization(ref))
