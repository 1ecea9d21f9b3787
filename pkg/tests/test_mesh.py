import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, strategies as st

from rdmeflow.errors import InvalidGeometryError, MeshParseError, ModelError
from rdmeflow.mesh import (CYTOSOL, MEMBRANE, Mesh, SubdomainMap, assemble_diffusion, build_cartesian_grid,
                           build_sphere_shell_mesh, format_mesh, load_mesh, parse_mesh, write_mesh)
from rdmeflow.model import Species


def test_grid_two_half_cells():
    m = build_cartesian_grid(1, [1.0], [2])
    assert m.num_voxels == 2
    np.testing.assert_allclose(m.volumes, [0.5, 0.5])
    assert len(m.edges) == 1


def test_grid_eleven_points():
    m = build_cartesian_grid(1, [1.0], [11])
    assert m.num_voxels == 11
    np.testing.assert_allclose(m.volumes[1:-1], 0.1)
    np.testing.assert_allclose(m.volumes[[0, -1]], 0.05)
    assert m.total_volume == pytest.approx(1.0, abs=1e-12)


def test_grid_3d_volume_sum():
    m = build_cartesian_grid(3, [1, 1, 1], [5, 5, 5])
    assert m.num_voxels == 125
    assert abs(math.fsum(m.volumes) - 1.0) <= 1e-12
    # corners are eighth cells, faces quarter... of h^3 = 1/64
    assert m.volumes.min() == pytest.approx(1 / 64 / 8)
    assert len(m.edges) == 3 * 5 * 5 * 4


@pytest.mark.parametrize("dim,lengths,n", [(1, [0.0], [3]), (1, [1.0], [0]), (2, [1.0, -1.0], [2, 2]),
                                           (1, [1.0], [-2])])
def test_grid_rejects_bad_geometry(dim, lengths, n):
    with pytest.raises(InvalidGeometryError):
        build_cartesian_grid(dim, lengths, n)


@given(st.integers(1, 3).flatmap(lambda d: st.tuples(
    st.just(d),
    st.lists(st.floats(0.1, 10.0), min_size=d, max_size=d),
    st.lists(st.integers(1, 7), min_size=d, max_size=d))))
def test_grid_volume_partition(args):
    dim, lengths, n = args
    m = build_cartesian_grid(dim, lengths, n)
    assert m.num_voxels == int(np.prod(n))
    assert np.all(m.volumes > 0)
    assert math.fsum(m.volumes) == pytest.approx(float(np.prod(lengths)), rel=1e-9)


MESH_TEXT = """# two voxels
RFMESH 1 1 2 1
v 0 0.0 0.5 1
v 1 1.0 0.5
e 0 1 1.0 1.0
"""


def test_load_two_vertex_mesh(tmp_path):
    p = tmp_path / "m.rfmesh"
    p.write_text(MESH_TEXT)
    mesh, sub = load_mesh(p)
    assert mesh.num_voxels == 2
    assert sub.labels.tolist() == [1, 1]  # unlabeled defaults to 1


def test_duplicate_reversed_edge_is_one_edge():
    text = MESH_TEXT.replace("RFMESH 1 1 2 1", "RFMESH 1 1 2 2") + "e 1 0 1.0 1.0\n"
    mesh, _ = parse_mesh(text)
    assert mesh.edges.tolist() == [[0, 1]]


def test_asymmetric_duplicate_edge_rejected():
    text = MESH_TEXT.replace("RFMESH 1 1 2 1", "RFMESH 1 1 2 2") + "e 1 0 2.0 1.0\n"
    with pytest.raises(InvalidGeometryError):
        parse_mesh(text)


def test_zero_volume_rejected():
    with pytest.raises(InvalidGeometryError):
        parse_mesh(MESH_TEXT.replace("v 1 1.0 0.5", "v 1 1.0 0.0"))


def test_malformed_line_reports_line_number():
    with pytest.raises(MeshParseError) as info:
        parse_mesh(MESH_TEXT.replace("e 0 1 1.0 1.0", "e 0 one 1.0 1.0"))
    assert info.value.line == 5


def test_mesh_text_round_trip(tmp_path):
    mesh, sub = build_sphere_shell_mesh(1.0, 1)
    p = tmp_path / "s.rfmesh"
    write_mesh(mesh, sub, p)
    mesh2, sub2 = load_mesh(p)
    np.testing.assert_array_equal(mesh.volumes, mesh2.volumes)
    np.testing.assert_array_equal(mesh.coords, mesh2.coords)
    np.testing.assert_array_equal(mesh.edges, mesh2.edges)
    np.testing.assert_array_equal(sub.labels, sub2.labels)
    assert format_mesh(mesh2, sub2) == format_mesh(mesh, sub)


def test_sphere_level0_has_icosahedron_membrane():
    mesh, sub = build_sphere_shell_mesh(1.0, 0)
    membrane = sub.voxels(MEMBRANE)
    assert len(membrane) == 12
    assert np.all(sub.labels[membrane] == 2)


@pytest.mark.parametrize("n", [0, 1, 2, 3])
def test_sphere_membrane_on_unit_sphere(n):
    mesh, sub = build_sphere_shell_mesh(1.0, n)
    r = np.linalg.norm(mesh.coords[sub.voxels(MEMBRANE)], axis=1)
    np.testing.assert_allclose(r, 1.0, atol=1e-9)


def test_sphere_volume_level3():
    mesh, _ = build_sphere_shell_mesh(1.0, 3)
    assert abs(mesh.total_volume - 4 / 3 * math.pi) <= 0.05 * 4 / 3 * math.pi


@pytest.mark.parametrize("n", [0, 1, 2])
def test_sphere_membrane_touches_cytosol(n):
    mesh, sub = build_sphere_shell_mesh(1.0, n)
    for i in sub.voxels(MEMBRANE):
        assert any(sub.labels[j] == CYTOSOL for j in mesh.neighbors(i))


def test_sphere_symmetric_adjacency():
    mesh, _ = build_sphere_shell_mesh(1.0, 2)
    nbrs = {i: set(mesh.neighbors(i)) for i in range(mesh.num_voxels)}
    for i, js in nbrs.items():
        for j in js:
            assert i in nbrs[j]


def test_interior_rate_is_d_over_h_squared():
    mesh = build_cartesian_grid(1, [1.0], [11])
    dm = assemble_diffusion(mesh, SubdomainMap(np.ones(11, int)), [Species("A", 1.0)])
    for i in range(1, 10):
        assert dm.rate(0, i, i - 1) == pytest.approx(100.0)
        assert dm.rate(0, i, i + 1) == pytest.approx(100.0)


def test_zero_diffusion_gives_empty_matrix():
    mesh = build_cartesian_grid(2, [1, 1], [4, 4])
    dm = assemble_diffusion(mesh, SubdomainMap(np.ones(16, int)), [Species("A", 0.0)])
    assert dm.is_empty
    assert not np.any(dm.exit_rates)


def test_membrane_species_never_touches_cytosol():
    mesh, sub = build_sphere_shell_mesh(1.0, 2)
    dm = assemble_diffusion(mesh, sub, [Species("M", 1.0, frozenset({MEMBRANE}))])
    G = dm.generator(0).tocoo()
    for i, j, v in zip(G.row, G.col, G.data):
        if i != j and v != 0:
            assert sub.labels[i] == MEMBRANE and sub.labels[j] == MEMBRANE


def test_undeclared_subdomain_is_model_error():
    mesh = build_cartesian_grid(1, [1.0], [3])
    with pytest.raises(ModelError):
        assemble_diffusion(mesh, SubdomainMap(np.ones(3, int)), [Species("A", 1.0, frozenset({7}))])


def test_single_voxel_diffusion_empty():
    mesh = build_cartesian_grid(1, [1.0], [1])
    dm = assemble_diffusion(mesh, SubdomainMap(np.ones(1, int)), [Species("A", 5.0)])
    assert dm.is_empty


@given(st.integers(0, 2), st.floats(0.01, 10.0))
def test_generator_rows_sum_to_zero(n, D):
    mesh, sub = build_sphere_shell_mesh(1.0, n)
    dm = assemble_diffusion(mesh, sub, [Species("A", D), Species("M", D / 3, frozenset({MEMBRANE}))])
    for s in range(2):
        for i in range(mesh.num_voxels):
            _, rates = dm.row(s, i)
            total = 0.0
            for r in rates:
                total += r
            assert total - dm.exit_rates[s, i] == 0.0
            assert np.all(rates >= 0)
        # locality: positive rates only along mesh edges
        edges = {tuple(e) for e in mesh.edges.tolist()}
        G = dm.generator(s).tocoo()
        for i, j, v in zip(G.row, G.col, G.data):
            if i != j and v > 0:
                assert (min(i, j), max(i, j)) in edges


def reflected_heat_kernel(x, x0, t, D, L, terms=400):
    k = np.arange(1, terms)
    return 1 / L + 2 / L * np.sum(
        np.cos(np.outer(x, k) * np.pi / L) * np.cos(k * np.pi * x0 / L) * np.exp(-D * (k * np.pi / L) ** 2 * t),
        axis=1)


def test_mean_field_matches_heat_kernel():
    K, L, D = 51, 1.0, 1.0
    h = L / (K - 1)
    mesh = build_cartesian_grid(1, [L], [K])
    dm = assemble_diffusion(mesh, SubdomainMap(np.ones(K, int)), [Species("A", D)])
    t = 12.5 * h * h / D  # sqrt(2 D t) = 5 h
    u0 = np.zeros(K)
    u0[K // 2] = 1.0
    u = scipy.linalg.expm(dm.generator(0).toarray().T * t) @ u0
    assert math.fsum(u) == pytest.approx(1.0, abs=1e-12)
    density = u / mesh.volumes
    exact = reflected_heat_kernel(mesh.coords[:, 0], mesh.coords[K // 2, 0], t, D, L)
    rel_l1 = np.sum(np.abs(density - exact) * mesh.volumes) / np.sum(np.abs(exact) * mesh.volumes)
    assert rel_l1 < 0.02
