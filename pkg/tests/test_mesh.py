import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial import ConvexHull

from helpers import jittered_grid
from mpnp.mesh import (
    DIRICHLET,
    NEUMANN,
    MeshError,
    SimplicialMesh,
    build_dual,
    delaunay_mesh,
    difference,
    face_difference,
    generate_structured,
    load_mesh,
    reflect_mesh,
    save_mesh,
    unit_square_two_triangles,
    validate_mesh,
)


def test_structured_2d_cells_and_transmissibilities():
    n = 4
    mesh = generate_structured([0, 0], [1, 1], n)
    dual = build_dual(mesh)
    h = 1.0 / n
    assert dual.cell_measures.sum() == pytest.approx(1.0, abs=1e-14)
    interior = (np.abs(mesh.vertices - 0.5) < 0.5 - 1e-12).all(axis=1)
    np.testing.assert_allclose(dual.cell_measures[interior], h * h, rtol=1e-12)
    # right-triangle hypotenuses have zero covolume and are dropped
    assert dual.n_edges == 2 * n * (n + 1)
    mid = 0.5 * (mesh.vertices[dual.edge_i] + mesh.vertices[dual.edge_j])
    on_wall = np.any(np.isclose(mid, 0.0) | np.isclose(mid, 1.0), axis=1)
    np.testing.assert_allclose(dual.tau, np.where(on_wall, 0.5, 1.0), rtol=1e-12)


def test_structured_3d_volume_and_cartesian_dual():
    mesh = generate_structured([0, 0, 0], [1, 1, 2], (2, 3, 4))
    dual = build_dual(mesh)
    assert dual.cell_measures.sum() == pytest.approx(2.0, abs=1e-13)
    d = mesh.vertices[dual.edge_j] - mesh.vertices[dual.edge_i]
    # only axis-aligned edges carry a face
    assert np.all(np.count_nonzero(np.abs(d) > 1e-12, axis=1) == 1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([2, 3]))
def test_dual_measures_match_hull_and_close_interior_cells(seed, dim):
    pts = jittered_grid(np.random.default_rng(seed), k=5 if dim == 2 else 3, dim=dim)
    mesh = delaunay_mesh(pts)
    dual = build_dual(mesh, xi=0.0)
    assert dual.cell_measures.sum() == pytest.approx(ConvexHull(pts).volume, rel=1e-10)
    # sum_sigma m(sigma) n_sigma vanishes on closed (interior) cells
    normal = (mesh.vertices[dual.edge_j] - mesh.vertices[dual.edge_i]) / dual.edge_length[:, None]
    acc = np.zeros((len(pts), dim))
    np.add.at(acc, dual.edge_i, dual.edge_measure[:, None] * normal)
    np.add.at(acc, dual.edge_j, -dual.edge_measure[:, None] * normal)
    inner = np.setdiff1d(np.arange(len(pts)), dual.boundary_vertices)
    np.testing.assert_allclose(acc[inner], 0.0, atol=1e-12)


def test_boundary_faces_tile_the_boundary():
    mesh = generate_structured([0, 0, 0], [1, 1, 1], 3)
    dual = build_dual(mesh)
    assert dual.bface_measure.sum() == pytest.approx(6.0, abs=1e-12)
    assert np.all(dual.bface_d == 0.0)


def test_dirichlet_predicate_marks_faces():
    mesh = generate_structured([0, 0], [1, 1], 3, dirichlet=lambda c: np.isclose(c[:, 0], 0.0))
    dual = build_dual(mesh)
    np.testing.assert_allclose(mesh.vertices[dual.dirichlet_vertices, 0], 0.0)
    assert len(dual.dirichlet_vertices) == 4
    assert sum(m == DIRICHLET for m in mesh.boundary_markers) == 3


def test_save_load_round_trip_is_exact(tmp_path):
    mesh = delaunay_mesh(jittered_grid(np.random.default_rng(3)), dirichlet=lambda c: c[:, 1] < 1e-12)
    path = tmp_path / "m.txt"
    save_mesh(mesh, path)
    back = load_mesh(path)
    np.testing.assert_array_equal(back.vertices, mesh.vertices)
    np.testing.assert_array_equal(back.simplices, mesh.simplices)
    assert back.boundary_markers == mesh.boundary_markers
    save_mesh(back, tmp_path / "m2.txt")
    assert (tmp_path / "m2.txt").read_bytes() == path.read_bytes()


@pytest.mark.parametrize(
    "text",
    [
        "dim 2\nvertices 1\n0 0\n",
        "dim 2\nvertices 3\n0 0\n1 0\n0 1\nsimplices 1\n0 1 2\nboundary 3\n0 1 neumann\n1 2 neumann\n0 2 wall\n",
        "dim 2\nvertices 3\n0 0\n1 0\n0 1\nsimplices 1\n0 1 2\nboundary 2\n0 1 neumann\n1 2 neumann\n",
        "dim 2\nvertices 3\n0 0\n1 0\n2 0\nsimplices 1\n0 1 2\nboundary 0\n",
    ],
)
def test_malformed_mesh_files_are_rejected(tmp_path, text):
    path = tmp_path / "bad.txt"
    path.write_text(text)
    with pytest.raises(MeshError):
        load_mesh(path)


def test_non_delaunay_quad_is_rejected():
    # the short diagonal of a flat rhombus is Delaunay, the long one is not
    v = np.array([[0.0, 0.0], [2.0, 0.0], [1.0, 0.3], [1.0, -0.3]])
    faces = np.array([[0, 2], [1, 2], [1, 3], [0, 3]])
    good = SimplicialMesh(2, v, np.array([[0, 3, 2], [3, 1, 2]]), faces, (NEUMANN,) * 4)
    validate_mesh(good)
    bad = SimplicialMesh(2, v, np.array([[0, 1, 2], [0, 3, 1]]), faces, (NEUMANN,) * 4)
    with pytest.raises(MeshError, match="Delaunay"):
        validate_mesh(bad)


def test_two_triangle_square_drops_the_diagonal():
    dual = build_dual(unit_square_two_triangles())
    assert dual.n_edges == 4
    np.testing.assert_allclose(dual.cell_measures, 0.25)


def test_reflect_mesh_is_mirror_symmetric():
    half = generate_structured([0, 0, 0], [1, 1, 1], (2, 2, 2))
    full = reflect_mesh(half, 2, 1.0, dirichlet=lambda c: np.isclose(c[:, 2], 0) | np.isclose(c[:, 2], 2))
    assert full.n_vertices == 2 * 27 - 9
    dual = build_dual(full)
    assert dual.cell_measures.sum() == pytest.approx(2.0, abs=1e-13)
    z = full.vertices[:, 2]
    order = np.lexsort((z, full.vertices[:, 1], full.vertices[:, 0]))
    mirror = np.lexsort((2.0 - z, full.vertices[:, 1], full.vertices[:, 0]))
    np.testing.assert_allclose(dual.cell_measures[order], dual.cell_measures[mirror], rtol=1e-12)
    with pytest.raises(MeshError):
        reflect_mesh(half, 2, 0.5)


def test_submesh_keeps_parent_markers():
    mesh = generate_structured([0, 0], [2, 1], (4, 2), dirichlet=lambda c: np.isclose(c[:, 0], 0))
    cen = mesh.vertices[mesh.simplices].mean(axis=1)
    sub, vmap = mesh.submesh(cen[:, 0] < 1.0)
    np.testing.assert_array_equal(sub.vertices, mesh.vertices[vmap])
    validate_mesh(sub)
    assert sum(m == DIRICHLET for m in sub.boundary_markers) == 2


def test_difference_operator_cases():
    mesh = generate_structured([0, 0], [1, 1], 2, dirichlet=lambda c: np.isclose(c[:, 0], 0))
    dual = build_dual(mesh)
    u = np.arange(mesh.n_vertices, dtype=float) ** 2
    i, j = dual.edge_i[0], dual.edge_j[0]
    assert difference(dual, u, 0) == u[j] - u[i]
    assert difference(dual, u, 0, cell=j) == u[i] - u[j]
    kd = int(np.flatnonzero(dual.bface_dirichlet)[0])
    assert difference(dual, u, dual.n_edges + kd, boundary_data=5.0) == 5.0 - u[dual.bface_vertex[kd]]
    kn = int(np.flatnonzero(~dual.bface_dirichlet)[0])
    assert difference(dual, u, dual.n_edges + kn, boundary_data=2.0) == 0.0
    assert face_difference(NEUMANN, 1.0, 2.0, 0.5) == 1.0
    with pytest.raises(ValueError):
        difference(dual, u, 0, cell=mesh.n_vertices - 1 if mesh.n_vertices - 1 not in (i, j) else 4)
    with pytest.raises(ValueError):
        face_difference("robin", 0.0, 0.0)
