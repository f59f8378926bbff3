import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bingham_dg.mesh import InvalidMeshInput, facet_geometry, generate_structured_mesh, write_mesh_vtk


def test_single_quad_counts():
    m = generate_structured_mesh(1, 1)
    assert (m.num_cells, m.num_vertices, m.num_facets) == (2, 4, 5)
    assert len(m.boundary_facets) == 4
    assert len(m.interior_facets) == 1


def test_two_by_two_counts():
    m = generate_structured_mesh(2, 2)
    assert (m.num_cells, m.num_vertices, m.num_facets) == (8, 9, 16)


@pytest.mark.parametrize("nx,ny", [(1, 0), (0, 1), (-1, 2), (1.5, 2)])
def test_invalid_counts(nx, ny):
    with pytest.raises(InvalidMeshInput):
        generate_structured_mesh(nx, ny)


@pytest.mark.parametrize("domain", [(0, 0, 0, 1), (1, 0, 0, 1), (0, 1, 2, 2)])
def test_degenerate_rectangle(domain):
    with pytest.raises(InvalidMeshInput):
        generate_structured_mesh(2, 2, domain)


def test_unknown_split():
    with pytest.raises(InvalidMeshInput):
        generate_structured_mesh(2, 2, split="left")


def test_diagonal_facet_geometry():
    m = generate_structured_mesh(1, 1)
    (f,) = m.interior_facets
    n, h, kp, km = facet_geometry(m, f)
    assert abs(n @ np.array([1.0, 1.0]) / math.sqrt(2)) < 1e-15
    assert abs(np.linalg.norm(n) - 1) < 1e-14
    assert abs(h - math.sqrt(2)) < 1e-15
    assert (kp, km) == (0, 1)


def test_bottom_facet_normal():
    m = generate_structured_mesh(1, 1)
    (f,) = m.facets_with_tag("bottom")
    n, h, kp, km = facet_geometry(m, f)
    np.testing.assert_array_equal(n, [0.0, -1.0])
    assert km is None and h == 1.0
    assert m.facet(f).is_boundary and m.facet(f).tag == "bottom"


def test_facet_id_out_of_range():
    m = generate_structured_mesh(1, 1)
    with pytest.raises(IndexError):
        facet_geometry(m, m.num_facets)
    with pytest.raises(IndexError):
        facet_geometry(m, -1)


def test_mesh_is_immutable():
    m = generate_structured_mesh(2, 2)
    with pytest.raises(ValueError):
        m.vertices[0, 0] = 5.0


def _outward_normal(m, cell, facet):
    a, b = m.vertices[m.facet_vertices[facet]]
    t = b - a
    n = np.array([t[1], -t[0]]) / np.linalg.norm(t)
    if n @ (a - m.cell_centroids[cell]) < 0:
        n = -n
    return n


@settings(max_examples=25, deadline=None)
@given(nx=st.integers(1, 7), ny=st.integers(1, 7),
       x0=st.floats(-3, 3), y0=st.floats(-3, 3),
       lx=st.floats(0.1, 5), ly=st.floats(0.1, 5),
       split=st.sampled_from(["right", "alternating"]))
def test_mesh_invariants(nx, ny, x0, y0, lx, ly, split):
    m = generate_structured_mesh(nx, ny, (x0, x0 + lx, y0, y0 + ly), split)
    assert m.num_cells == 2 * nx * ny
    # Euler relation without the outer face
    assert m.num_vertices - m.num_facets + m.num_cells == 1
    assert np.all(m.cell_areas > 0)
    assert abs(m.cell_areas.sum() - lx * ly) <= 1e-12 * lx * ly
    assert len(m.boundary_facets) == 2 * (nx + ny)
    assert np.all(np.abs(np.linalg.norm(m.facet_normals, axis=1) - 1) <= 1e-14)
    a, b = m.vertices[m.facet_vertices[:, 0]], m.vertices[m.facet_vertices[:, 1]]
    np.testing.assert_allclose(m.facet_lengths, np.linalg.norm(b - a, axis=1), rtol=0, atol=1e-14)
    tangents = (b - a) / m.facet_lengths[:, None]
    assert np.max(np.abs(np.einsum("fi,fi->f", tangents, m.facet_normals))) <= 1e-14
    for f in range(m.num_facets):
        kp, km = m.facet_cells[f]
        np.testing.assert_allclose(m.facet_normals[f], _outward_normal(m, kp, f), atol=1e-14)
        if km >= 0:
            assert kp < km
            np.testing.assert_allclose(m.facet_normals[f], -_outward_normal(m, km, f), atol=1e-14)
    # counter-clockwise cells reference their facets consistently
    for k in range(m.num_cells):
        for j in range(3):
            f = m.cell_facets[k, j]
            assert m.cells[k, j] not in m.facet_vertices[f]
            assert k in m.facet_cells[f]


def test_mesh_is_bit_stable(tmp_path):
    p1 = write_mesh_vtk(generate_structured_mesh(3, 2), tmp_path / "a.vtk")
    p2 = write_mesh_vtk(generate_structured_mesh(3, 2), tmp_path / "b.vtk")
    assert p1.read_bytes() == p2.read_bytes()
    assert b"POLYDATA" in p1.read_bytes()


def test_alternating_split_is_mirror_symmetric():
    m = generate_structured_mesh(4, 3, (-1, 1, 0, 1), "alternating")
    c = m.cell_centroids
    mirrored = c * np.array([-1.0, 1.0])
    key = lambda a: sorted(map(tuple, np.round(a, 12)))  # noqa: E731
    assert key(c) == key(mirrored)
