"""Spatial discretizations and diffusion jump rates.

A :class:`Mesh` is a set of voxels (dual cells around mesh vertices) with
volumes, plus undirected edges between voxels that share an interface. Each
edge carries the measure of the shared interface and the distance between
voxel centres, which is all the finite-volume jump-rate formula needs::

    rate(i -> j) = D * area_ij / (distance_ij * volume_i)

On a uniform Cartesian grid this is ``D / h**2`` for interior voxels.
Rates are positive by construction, and ``volume_i * rate(i -> j)`` is
symmetric, so a single molecule's stationary distribution is proportional to
voxel volume.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import InvalidGeometryError, MeshParseError, ModelError

CYTOSOL = 1
MEMBRANE = 2


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    """Voxelized domain.

    ``edges`` holds each undirected pair once as ``(i, j)`` with ``i < j``;
    ``edge_areas`` and ``edge_lengths`` are aligned with it.
    """

    coords: np.ndarray
    volumes: np.ndarray
    edges: np.ndarray
    edge_areas: np.ndarray
    edge_lengths: np.ndarray
    dim: int

    def __post_init__(self):
        coords = _frozen(self.coords, float).reshape(len(self.volumes), -1)
        volumes = _frozen(self.volumes, float)
        edges = np.array(self.edges, dtype=np.int64).reshape(-1, 2)
        areas = np.array(self.edge_areas, dtype=float).reshape(-1)
        lengths = np.array(self.edge_lengths, dtype=float).reshape(-1)
        if self.dim not in (1, 2, 3):
            raise InvalidGeometryError(f"dim must be 1, 2 or 3, got {self.dim}")
        K = len(volumes)
        if K == 0:
            raise InvalidGeometryError("mesh has no voxels")
        if not np.all(np.isfinite(volumes)) or np.any(volumes <= 0):
            bad = int(np.flatnonzero(~(volumes > 0))[0]) if np.any(~(volumes > 0)) else -1
            raise InvalidGeometryError(f"voxel volumes must be positive (voxel {bad})")
        if len(edges):
            if edges.min() < 0 or edges.max() >= K:
                raise InvalidGeometryError("edge references a voxel outside the mesh")
            if np.any(edges[:, 0] == edges[:, 1]):
                raise InvalidGeometryError("self-loop edge")
            if np.any(areas <= 0) or np.any(lengths <= 0):
                raise InvalidGeometryError("edge interface areas and distances must be positive")
        if not (len(areas) == len(lengths) == len(edges)):
            raise InvalidGeometryError("edge attribute arrays are misaligned")
        # canonical orientation and order
        lo = np.minimum(edges[:, 0], edges[:, 1])
        hi = np.maximum(edges[:, 0], edges[:, 1])
        order = np.lexsort((hi, lo))
        edges = np.stack([lo[order], hi[order]], axis=1) if len(edges) else edges
        areas, lengths = areas[order], lengths[order]
        if len(edges) > 1 and np.any(np.all(edges[1:] == edges[:-1], axis=1)):
            raise InvalidGeometryError("duplicate edge")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "volumes", volumes)
        object.__setattr__(self, "edges", _frozen(edges, np.int64))
        object.__setattr__(self, "edge_areas", _frozen(areas, float))
        object.__setattr__(self, "edge_lengths", _frozen(lengths, float))

    @property
    def num_voxels(self) -> int:
        return len(self.volumes)

    @property
    def total_volume(self) -> float:
        return math.fsum(self.volumes)

    def neighbors(self, i: int) -> list[int]:
        e = self.edges
        return sorted(set(e[e[:, 0] == i, 1].tolist()) | set(e[e[:, 1] == i, 0].tolist()))


@dataclass(frozen=True, eq=False)
class SubdomainMap:
    """One integer label per voxel plus the declared label set."""

    labels: np.ndarray
    names: dict = field(default_factory=lambda: {CYTOSOL: "domain"})

    def __post_init__(self):
        labels = _frozen(self.labels, np.int64)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "names", dict(self.names))
        undeclared = set(np.unique(labels).tolist()) - set(self.names)
        if undeclared:
            raise InvalidGeometryError(f"voxels carry undeclared labels {sorted(undeclared)}")

    @property
    def declared(self) -> frozenset:
        return frozenset(self.names)

    def voxels(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)

    def label_of(self, name_or_label) -> int:
        if isinstance(name_or_label, (int, np.integer)):
            return int(name_or_label)
        for label, name in self.names.items():
            if name == name_or_label:
                return label
        raise ModelError(f"unknown subdomain {name_or_label!r}")


# --------------------------------------------------------------------------
# Cartesian grids
# --------------------------------------------------------------------------

def build_cartesian_grid(dim, lengths, n_per_axis) -> Mesh:
    """Vertex-centred grid: ``n`` vertices per axis, boundary voxels are half cells.

    ``lengths`` and ``n_per_axis`` may be scalars (applied to every axis).
    """
    if dim not in (1, 2, 3):
        raise InvalidGeometryError(f"dim must be 1, 2 or 3, got {dim}")
    lengths = np.broadcast_to(np.asarray(lengths, dtype=float), (dim,)).copy()
    counts = np.broadcast_to(np.asarray(n_per_axis), (dim,)).copy()
    if np.any(~np.isfinite(lengths)) or np.any(lengths <= 0):
        raise InvalidGeometryError(f"grid lengths must be positive, got {lengths.tolist()}")
    if np.any(counts < 1) or np.any(counts != np.round(counts)):
        raise InvalidGeometryError(f"grid counts must be positive integers, got {counts.tolist()}")
    counts = counts.astype(int)

    axis_pts, axis_widths, spacing = [], [], []
    for L, n in zip(lengths, counts):
        if n == 1:
            axis_pts.append(np.array([0.0]))
            axis_widths.append(np.array([L]))
            spacing.append(L)
            continue
        h = L / (n - 1)
        w = np.full(n, h)
        w[0] = w[-1] = h / 2
        axis_pts.append(np.arange(n) * h)
        axis_widths.append(w)
        spacing.append(h)

    grids = np.meshgrid(*axis_pts, indexing="ij")
    coords = np.stack([g.ravel() for g in grids], axis=1)
    wgrids = np.meshgrid(*axis_widths, indexing="ij")
    volumes = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)

    index = np.arange(int(np.prod(counts))).reshape(tuple(counts))
    edges, areas, dists = [], [], []
    for a in range(dim):
        if counts[a] < 2:
            continue
        src = np.take(index, np.arange(counts[a] - 1), axis=a).ravel()
        dst = np.take(index, np.arange(1, counts[a]), axis=a).ravel()
        # interface measure = product of cell widths across the other axes
        face = np.ones(len(src))
        for b in range(dim):
            if b != a:
                face *= np.take(wgrids[b], np.arange(counts[a] - 1), axis=a).ravel()
        edges.append(np.stack([src, dst], axis=1))
        areas.append(face)
        dists.append(np.full(len(src), spacing[a]))
    if edges:
        edges, areas, dists = np.concatenate(edges), np.concatenate(areas), np.concatenate(dists)
    else:
        edges, areas, dists = np.zeros((0, 2), int), np.zeros(0), np.zeros(0)
    return Mesh(coords, volumes, edges, areas, dists, dim)


# --------------------------------------------------------------------------
# Exchange format
# --------------------------------------------------------------------------

def write_mesh(mesh: Mesh, subdomains: SubdomainMap | None, path) -> None:
    Path(path).write_text(format_mesh(mesh, subdomains))


def format_mesh(mesh: Mesh, subdomains: SubdomainMap | None = None) -> str:
    labels = subdomains.labels if subdomains is not None else np.ones(mesh.num_voxels, int)
    lines = [f"RFMESH 1 {mesh.dim} {mesh.num_voxels} {len(mesh.edges)}"]
    for i in range(mesh.num_voxels):
        xyz = " ".join(repr(float(c)) for c in mesh.coords[i, : mesh.dim])
        lines.append(f"v {i} {xyz} {float(mesh.volumes[i])!r} {int(labels[i])}")
    for (i, j), a, d in zip(mesh.edges, mesh.edge_areas, mesh.edge_lengths):
        lines.append(f"e {int(i)} {int(j)} {float(a)!r} {float(d)!r}")
    return "\n".join(lines) + "\n"


def load_mesh(path) -> tuple[Mesh, SubdomainMap]:
    return parse_mesh(Path(path).read_text())


def parse_mesh(text: str) -> tuple[Mesh, SubdomainMap]:
    header = None
    verts: dict[int, tuple] = {}
    edge_map: dict[tuple, tuple] = {}

    def num(tok, lineno, kind=float):
        try:
            return kind(tok)
        except ValueError:
            raise MeshParseError(f"expected a number, got {tok!r}", lineno) from None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if header is None:
            if tok[0] != "RFMESH" or len(tok) != 5:
                raise MeshParseError("expected header 'RFMESH 1 <dim> <K> <E>'", lineno)
            version, dim, K, E = (num(t, lineno, int) for t in tok[1:])
            if version != 1:
                raise MeshParseError(f"unsupported mesh format version {version}", lineno)
            if dim not in (1, 2, 3):
                raise MeshParseError(f"dim must be 1, 2 or 3, got {dim}", lineno)
            header = (dim, K, E)
            continue
        dim = header[0]
        if tok[0] == "v":
            if len(tok) not in (dim + 3, dim + 4):
                raise MeshParseError(f"vertex line needs {dim} coordinates, a volume and an optional label", lineno)
            vid = num(tok[1], lineno, int)
            if vid in verts:
                raise MeshParseError(f"duplicate vertex id {vid}", lineno)
            xyz = [num(t, lineno) for t in tok[2 : 2 + dim]]
            vol = num(tok[2 + dim], lineno)
            label = num(tok[3 + dim], lineno, int) if len(tok) == dim + 4 else CYTOSOL
            verts[vid] = (xyz, vol, label)
        elif tok[0] == "e":
            if len(tok) != 5:
                raise MeshParseError("edge line must be 'e <i> <j> <interface_area> <distance>'", lineno)
            i, j = num(tok[1], lineno, int), num(tok[2], lineno, int)
            attrs = (num(tok[3], lineno), num(tok[4], lineno))
            key = (min(i, j), max(i, j))
            if key in edge_map and edge_map[key] != attrs:
                raise InvalidGeometryError(
                    f"line {lineno}: edge {key} listed twice with different attributes (non-symmetric adjacency)"
                )
            edge_map[key] = attrs
        else:
            raise MeshParseError(f"unknown record type {tok[0]!r}", lineno)

    if header is None:
        raise MeshParseError("missing RFMESH header", 1)
    dim, K, _ = header
    if sorted(verts) != list(range(K)):
        raise MeshParseError(f"vertex ids must be 0..{K - 1} exactly once")
    coords = np.array([verts[i][0] for i in range(K)], dtype=float).reshape(K, dim)
    volumes = np.array([verts[i][1] for i in range(K)], dtype=float)
    labels = np.array([verts[i][2] for i in range(K)], dtype=np.int64)
    keys = sorted(edge_map)
    edges = np.array(keys, dtype=np.int64).reshape(-1, 2)
    areas = np.array([edge_map[k][0] for k in keys], dtype=float)
    dists = np.array([edge_map[k][1] for k in keys], dtype=float)
    mesh = Mesh(coords, volumes, edges, areas, dists, dim)
    names = {int(l): f"label{int(l)}" for l in np.unique(labels)}
    names.update({l: n for l, n in _DEFAULT_NAMES.items() if l in names})
    return mesh, SubdomainMap(labels, names)


_DEFAULT_NAMES = {CYTOSOL: "cytosol", MEMBRANE: "membrane"}


# --------------------------------------------------------------------------
# Sphere with a membrane shell
# --------------------------------------------------------------------------

_PHI = (1 + 5**0.5) / 2
_ICO_VERTS = [
    (-1, _PHI, 0), (1, _PHI, 0), (-1, -_PHI, 0), (1, -_PHI, 0),
    (0, -1, _PHI), (0, 1, _PHI), (0, -1, -_PHI), (0, 1, -_PHI),
    (_PHI, 0, -1), (_PHI, 0, 1), (-_PHI, 0, -1), (-_PHI, 0, 1),
]
_ICO_FACES = [
    (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
    (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
    (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
    (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
]


def icosphere_levels(n_subdiv: int):
    """Unit icospheres for levels 0..n_subdiv.

    Subdivision appends new vertices, so level ``L`` vertices are the first
    ``10 * 4**L + 2`` vertices of every finer level.
    """
    verts = [np.array(v) / np.linalg.norm(v) for v in _ICO_VERTS]
    faces = list(_ICO_FACES)
    levels = [(np.array(verts), np.array(faces))]
    for _ in range(n_subdiv):
        cache = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
        levels.append((np.array(verts), np.array(faces)))
    return levels


def _surface_duals(verts, faces):
    """Barycentric dual areas per vertex and dual edge lengths per edge (flat triangles)."""
    areas = np.zeros(len(verts))
    dual_len: dict[tuple, float] = {}
    for tri in faces:
        p = verts[list(tri)]
        area = 0.5 * np.linalg.norm(np.cross(p[1] - p[0], p[2] - p[0]))
        areas[list(tri)] += area / 3
        centroid = p.mean(axis=0)
        for u, v in ((0, 1), (1, 2), (2, 0)):
            key = (min(tri[u], tri[v]), max(tri[u], tri[v]))
            mid = 0.5 * (p[u] + p[v])
            dual_len[key] = dual_len.get(key, 0.0) + float(np.linalg.norm(mid - centroid))
    return areas, dual_len


def build_sphere_shell_mesh(radius: float = 1.0, n_subdiv: int = 2, shell_thickness: float | None = None):
    """Ball of ``radius`` with a membrane layer of surface voxels.

    Surface voxels (label 2) sit on an icosphere with ``n_subdiv`` subdivisions;
    each owns the slab of a thin outer shell beneath its dual surface patch.
    The interior (label 1) is coarse: one voxel per vertex of the level
    ``n_subdiv - 1`` icosphere in a middle layer, plus a centre voxel.
    Voxel volumes partition the ball exactly.

    Returns ``(mesh, subdomains)``.
    """
    if not radius > 0 or not math.isfinite(radius):
        raise InvalidGeometryError(f"radius must be positive, got {radius}")
    if n_subdiv < 0 or int(n_subdiv) != n_subdiv:
        raise InvalidGeometryError(f"n_subdiv must be a non-negative integer, got {n_subdiv}")
    n_subdiv = int(n_subdiv)
    R = float(radius)
    levels = icosphere_levels(n_subdiv)
    sverts, sfaces = levels[-1]
    cverts, cfaces = levels[max(n_subdiv - 1, 0)]
    ns, nc = len(sverts), len(cverts)

    s_area_flat, s_dual = _surface_duals(sverts, sfaces)
    c_area_flat, c_dual = _surface_duals(cverts, cfaces)
    # project flat duals onto the sphere: rescale to the exact spherical measure
    s_scale = 4 * math.pi / s_area_flat.sum()
    c_scale = 4 * math.pi / c_area_flat.sum()
    s_share = s_area_flat / s_area_flat.sum()
    c_share = c_area_flat / c_area_flat.sum()

    def angle(u, v):
        return math.acos(max(-1.0, min(1.0, float(np.dot(u, v)))))

    if shell_thickness is None:
        mean_edge = np.mean([angle(sverts[i], sverts[j]) for i, j in s_dual])
        shell_thickness = 0.5 * mean_edge * R
    if not 0 < shell_thickness < R:
        raise InvalidGeometryError("shell thickness must lie in (0, radius)")
    rho = 1.0 - shell_thickness / R       # inner radius of the shell, in units of R
    rho_c = rho / 2                        # radius of the centre voxel
    r_mid = 0.5 * (rho + rho_c)            # radius of the interior layer

    ball = 4.0 / 3.0 * math.pi * R**3
    shell_vol = ball * (1 - rho**3)
    layer_vol = ball * (rho**3 - rho_c**3)
    center_vol = ball * rho_c**3
    t_eff = shell_vol / (4 * math.pi * R**2)
    layer_thickness = (rho - rho_c) * R

    # voxel order: surface 0..ns-1, layer ns..ns+nc-1, centre last
    coords = np.vstack([R * sverts, r_mid * R * cverts, np.zeros((1, 3))])
    volumes = np.concatenate([shell_vol * s_share, layer_vol * c_share, [center_vol]])
    labels = np.concatenate([np.full(ns, MEMBRANE), np.full(nc + 1, CYTOSOL)])

    edges, areas, dists = [], [], []
    for (i, j), l in s_dual.items():
        edges.append((i, j))
        areas.append(l * math.sqrt(s_scale) * R * t_eff)
        dists.append(R * angle(sverts[i], sverts[j]))
    if nc > 1:
        for (i, j), l in c_dual.items():
            edges.append((ns + i, ns + j))
            areas.append(l * math.sqrt(c_scale) * r_mid * R * layer_thickness)
            dists.append(r_mid * R * angle(cverts[i], cverts[j]))
    # surface -> layer: inner face of each shell slab, split over equidistant layer voxels
    dots = sverts @ cverts.T
    for i in range(ns):
        best = np.flatnonzero(dots[i] >= dots[i].max() - 1e-9)
        face = 4 * math.pi * (rho * R) ** 2 * s_share[i] / len(best)
        for j in best:
            edges.append((i, ns + int(j)))
            areas.append(face)
            dists.append(float(np.linalg.norm(coords[i] - coords[ns + j])))
    centre = ns + nc
    for j in range(nc):
        edges.append((ns + j, centre))
        areas.append(4 * math.pi * (rho_c * R) ** 2 * c_share[j])
        dists.append(r_mid * R)

    mesh = Mesh(coords, volumes, np.array(edges), np.array(areas), np.array(dists), 3)
    return mesh, SubdomainMap(labels, {CYTOSOL: "cytosol", MEMBRANE: "membrane"})


# --------------------------------------------------------------------------
# Diffusion jump rates
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DiffusionMatrix:
    """Per-species jump rates in CSR layout.

    For species ``s`` the jumps out of voxel ``i`` are
    ``indices[indptr[s, i]:indptr[s, i + 1]]`` with rates from the same slice
    of ``rates``. ``exit_rates[s, i]`` is the left-to-right sum of that slice,
    so each generator row sums to exactly zero when added in the same order.
    """

    species: tuple
    num_voxels: int
    indptr: np.ndarray
    indices: np.ndarray
    rates: np.ndarray
    exit_rates: np.ndarray

    def row(self, s: int, i: int):
        lo, hi = self.indptr[s, i], self.indptr[s, i + 1]
        return self.indices[lo:hi], self.rates[lo:hi]

    def rate(self, s: int, i: int, j: int) -> float:
        cols, rates = self.row(s, i)
        hit = np.flatnonzero(cols == j)
        return float(rates[hit[0]]) if len(hit) else 0.0

    def generator(self, s: int) -> sp.csr_matrix:
        """Single-molecule CTMC generator for species ``s`` (rows sum to zero)."""
        K = self.num_voxels
        lo, hi = self.indptr[s, 0], self.indptr[s, K]
        off = sp.csr_matrix(
            (self.rates[lo:hi], self.indices[lo:hi], self.indptr[s] - lo), shape=(K, K)
        )
        return (off - sp.diags(self.exit_rates[s])).tocsr()

    @property
    def is_empty(self) -> bool:
        return not np.any(self.rates > 0)


def assemble_diffusion(mesh: Mesh, subdomains: SubdomainMap, species) -> DiffusionMatrix:
    """Finite-volume jump rates for every species.

    ``species`` is a sequence of objects with ``name``, ``diffusion_constant``
    and ``allowed_subdomains`` (a set of labels, or ``None`` for everywhere).
    Jumps touching a voxel whose label the species may not occupy get rate 0.
    """
    K = mesh.num_voxels
    labels = subdomains.labels
    S = len(species)
    # directed adjacency in CSR order, shared by all species
    e = mesh.edges
    src = np.concatenate([e[:, 0], e[:, 1]])
    dst = np.concatenate([e[:, 1], e[:, 0]])
    base = np.concatenate([mesh.edge_areas, mesh.edge_areas]) / np.concatenate(
        [mesh.edge_lengths, mesh.edge_lengths]
    )
    order = np.lexsort((dst, src))
    src, dst, base = src[order], dst[order], base[order]

    indptr = np.zeros((S, K + 1), dtype=np.int64)
    indices, rates = [], []
    exit_rates = np.zeros((S, K))
    offset = 0
    for s, spec in enumerate(species):
        D = float(spec.diffusion_constant)
        if not math.isfinite(D) or D < 0:
            raise ModelError(f"species {spec.name!r}: diffusion constant must be finite and >= 0")
        allowed = spec.allowed_subdomains
        if allowed is not None:
            undeclared = set(allowed) - set(subdomains.declared)
            if undeclared:
                raise ModelError(f"species {spec.name!r} references undeclared subdomains {sorted(undeclared)}")
            ok = np.isin(labels, list(allowed))
        else:
            ok = np.ones(K, dtype=bool)
        keep = ok[src] & ok[dst] & (D > 0)
        s_src, s_dst = src[keep], dst[keep]
        s_rate = D * base[keep] / mesh.volumes[s_src]
        counts = np.bincount(s_src, minlength=K)
        indptr[s, 1:] = offset + np.cumsum(counts)
        indptr[s, 0] = offset
        offset += len(s_src)
        indices.append(s_dst)
        rates.append(s_rate)
        for i in range(K):
            acc = 0.0
            for r in s_rate[indptr[s, i] - indptr[s, 0] : indptr[s, i + 1] - indptr[s, 0]]:
                acc += float(r)
            exit_rates[s, i] = acc
    indices = np.concatenate(indices) if indices else np.zeros(0, np.int64)
    rates = np.concatenate(rates) if rates else np.zeros(0)
    return DiffusionMatrix(
        species=tuple(sp_.name for sp_ in species),
        num_voxels=K,
        indptr=_frozen(indptr, np.int64),
        indices=_frozen(indices, np.int64),
        rates=_frozen(rates, float),
        exit_rates=_frozen(exit_rates, float),
    )
