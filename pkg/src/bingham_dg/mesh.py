"""Structured simplicial meshes of rectangles with dG facet connectivity.

Each quadrilateral of an ``nx`` by ``ny`` grid is split into two counter-
clockwise triangles. Facets are stored once, sorted lexicographically by their
(sorted) vertex pair, so every array produced here is bit-stable for fixed
inputs.

Facet orientation convention: ``K+`` is the adjacent cell with the lower
index, ``K-`` the higher one, and the unit normal points from ``K+`` into
``K-``. Boundary facets have only ``K+`` and an outward normal.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BOUNDARY_TAGS = ("interior", "bottom", "top", "left", "right")


class InvalidMeshInput(ValueError):
    """Raised for non-positive cell counts or degenerate rectangles."""


@dataclass(frozen=True)
class Facet:
    vertices: tuple[int, int]
    plus: int
    minus: int | None
    normal: np.ndarray
    length: float
    tag: str

    @property
    def is_boundary(self) -> bool:
        return self.minus is None


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable triangulation of a rectangle.

    Attributes
    ----------
    vertices : (nv, 2) float array, row-major numbering.
    cells : (nc, 3) int array, counter-clockwise vertex triples.
    facet_vertices : (nf, 2) int array, sorted vertex pairs.
    facet_cells : (nf, 2) int array of (K+, K-); K- is -1 on the boundary.
    facet_normals : (nf, 2) unit normals from K+ into K- (outward on boundary).
    facet_lengths : (nf,) edge lengths h_e.
    facet_tags : (nf,) int codes into ``BOUNDARY_TAGS``.
    cell_facets : (nc, 3) facet id of the edge opposite each local vertex.
    """

    vertices: np.ndarray
    cells: np.ndarray
    facet_vertices: np.ndarray
    facet_cells: np.ndarray
    facet_normals: np.ndarray
    facet_lengths: np.ndarray
    facet_tags: np.ndarray
    cell_facets: np.ndarray
    domain: tuple[float, float, float, float]
    shape: tuple[int, int]
    split: str = "right"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for name in ("vertices", "cells", "facet_vertices", "facet_cells",
                     "facet_normals", "facet_lengths", "facet_tags", "cell_facets"):
            getattr(self, name).setflags(write=False)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_cells(self) -> int:
        return len(self.cells)

    @property
    def num_facets(self) -> int:
        return len(self.facet_vertices)

    @property
    def cell_areas(self) -> np.ndarray:
        if "areas" not in self._cache:
            p = self.vertices[self.cells]
            e1 = p[:, 1] - p[:, 0]
            e2 = p[:, 2] - p[:, 0]
            areas = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
            areas.setflags(write=False)
            self._cache["areas"] = areas
        return self._cache["areas"]

    @property
    def cell_centroids(self) -> np.ndarray:
        return self.vertices[self.cells].mean(axis=1)

    @property
    def interior_facets(self) -> np.ndarray:
        return np.flatnonzero(self.facet_cells[:, 1] >= 0)

    @property
    def boundary_facets(self) -> np.ndarray:
        return np.flatnonzero(self.facet_cells[:, 1] < 0)

    def facets_with_tag(self, tag: str) -> np.ndarray:
        return np.flatnonzero(self.facet_tags == BOUNDARY_TAGS.index(tag))

    def facet(self, facet_id: int) -> Facet:
        n, h, kp, km = facet_geometry(self, facet_id)
        a, b = self.facet_vertices[facet_id]
        return Facet((int(a), int(b)), kp, km, n, h,
                     BOUNDARY_TAGS[self.facet_tags[facet_id]])

    def facet_midpoints(self) -> np.ndarray:
        return self.vertices[self.facet_vertices].mean(axis=1)


def generate_structured_mesh(nx: int, ny: int,
                             domain=(0.0, 1.0, 0.0, 1.0),
                             split: str = "right") -> Mesh:
    """Triangulate ``[x0, x1] x [y0, y1]`` with ``2 * nx * ny`` triangles.

    ``split="right"`` cuts every quad along the lower-left to upper-right
    diagonal. ``split="alternating"`` flips the diagonal in a checkerboard
    pattern, which makes the mesh mirror-symmetric about the vertical
    centre line when ``nx`` is even.
    """
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise InvalidMeshInput(f"cell counts must be positive integers, got nx={nx}, ny={ny}")
    x0, x1, y0, y1 = (float(v) for v in domain)
    if not (x1 > x0 and y1 > y0):
        raise InvalidMeshInput(f"degenerate rectangle {domain!r}")
    if split not in ("right", "alternating"):
        raise InvalidMeshInput(f"unknown split {split!r}")
    nx, ny = int(nx), int(ny)

    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    j, i = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    i, j = i.ravel(), j.ravel()
    v00 = j * (nx + 1) + i
    v10 = v00 + 1
    v01 = v00 + nx + 1
    v11 = v01 + 1
    flip = np.zeros_like(i, dtype=bool) if split == "right" else ((i + j) % 2 == 1)
    lower = np.where(flip[:, None], np.column_stack([v00, v10, v01]),
                     np.column_stack([v00, v10, v11]))
    upper = np.where(flip[:, None], np.column_stack([v10, v11, v01]),
                     np.column_stack([v00, v11, v01]))
    cells = np.empty((2 * len(i), 3), dtype=np.int64)
    cells[0::2] = lower
    cells[1::2] = upper

    # edge opposite local vertex k joins the other two vertices
    local_edges = ((1, 2), (0, 2), (0, 1))
    edges = np.concatenate([np.sort(cells[:, list(e)], axis=1) for e in local_edges])
    owner = np.tile(np.arange(len(cells)), 3)
    local = np.repeat(np.arange(3), len(cells))
    facet_vertices, inverse = np.unique(edges, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    nf = len(facet_vertices)

    cell_facets = np.empty((len(cells), 3), dtype=np.int64)
    cell_facets[owner, local] = inverse

    facet_cells = np.full((nf, 2), -1, dtype=np.int64)
    order = np.lexsort((owner, inverse))
    inv_sorted, own_sorted = inverse[order], owner[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = inv_sorted[1:] != inv_sorted[:-1]
    facet_cells[inv_sorted[first], 0] = own_sorted[first]
    facet_cells[inv_sorted[~first], 1] = own_sorted[~first]

    pa = vertices[facet_vertices[:, 0]]
    pb = vertices[facet_vertices[:, 1]]
    tangent = pb - pa
    lengths = np.hypot(tangent[:, 0], tangent[:, 1])
    normals = np.column_stack([tangent[:, 1], -tangent[:, 0]]) / lengths[:, None]
    # orient from K+ towards K- (or outward): compare with K+ centroid
    centroid = vertices[cells[facet_cells[:, 0]]].mean(axis=1)
    flipn = np.einsum("fi,fi->f", normals, 0.5 * (pa + pb) - centroid) < 0
    normals[flipn] *= -1.0

    tags = np.zeros(nf, dtype=np.int64)
    bnd = facet_cells[:, 1] < 0
    mid = 0.5 * (pa + pb)
    tol = 1e-12 * max(x1 - x0, y1 - y0)
    for code, mask in ((1, np.abs(mid[:, 1] - y0) < tol), (2, np.abs(mid[:, 1] - y1) < tol),
                       (3, np.abs(mid[:, 0] - x0) < tol), (4, np.abs(mid[:, 0] - x1) < tol)):
        tags[bnd & mask] = code

    return Mesh(vertices=vertices, cells=cells, facet_vertices=facet_vertices,
                facet_cells=facet_cells, facet_normals=normals, facet_lengths=lengths,
                facet_tags=tags, cell_facets=cell_facets, domain=(x0, x1, y0, y1),
                shape=(nx, ny), split=split)


def facet_geometry(mesh: Mesh, facet_id: int):
    """Return ``(n_e, h_e, K+, K-)`` for a facet; ``K-`` is None on the boundary."""
    if not 0 <= facet_id < mesh.num_facets:
        raise IndexError(f"facet id {facet_id} out of range [0, {mesh.num_facets})")
    kp, km = mesh.facet_cells[facet_id]
    return (mesh.facet_normals[facet_id].copy(), float(mesh.facet_lengths[facet_id]),
            int(kp), None if km < 0 else int(km))


def write_mesh_vtk(mesh: Mesh, path) -> Path:
    """Write the triangulation as legacy ASCII VTK POLYDATA."""
    path = Path(path)
    lines = ["# vtk DataFile Version 3.0", "bingham_dg mesh", "ASCII", "DATASET POLYDATA",
             f"POINTS {mesh.num_vertices} double"]
    lines += [f"{x:.17g} {y:.17g} 0" for x, y in mesh.vertices]
    lines.append(f"POLYGONS {mesh.num_cells} {4 * mesh.num_cells}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.cells]
    path.write_text("\n".join(lines) + "\n")
    return path
