"""Simplicial meshes and their circumcentric (Voronoi) dual.

The dual is vertex-centred: every mesh vertex ``x_i`` owns a control volume
``V_i`` bounded by pieces of the perpendicular bisectors of the edges that
leave ``x_i``.  Each piece is assembled simplex by simplex from circumcentres,
so the segment ``x_i x_j`` is orthogonal to the shared face by construction.

Text format (``load_mesh``/``save_mesh``)::

    dim 2
    vertices 4
    0.0 0.0
    ...
    simplices 2
    0 1 2
    ...
    boundary 4
    0 1 dirichlet
    ...

Blank lines and ``#`` comments are ignored.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

DIRICHLET = "dirichlet"
NEUMANN = "neumann"
MARKERS = (DIRICHLET, NEUMANN)

# relative tolerances (scaled by the mean edge length to the right power)
_DEGENERATE_TOL = 1e-12
_FACE_TOL = 1e-12
_DELAUNAY_TOL = 1e-9
_ORTHO_TOL = 1e-10


class MeshError(ValueError):
    """Raised for unreadable or inadmissible meshes."""


class MeshRegularityWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class SimplicialMesh:
    """Triangle (2D) or tetrahedral (3D) mesh with marked boundary faces."""

    dim: int
    vertices: np.ndarray
    simplices: np.ndarray
    boundary_faces: np.ndarray
    boundary_markers: tuple

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_simplices(self) -> int:
        return len(self.simplices)

    def simplex_volumes(self) -> np.ndarray:
        return _simplex_volumes(self.vertices, self.simplices)

    def submesh(self, simplex_mask: np.ndarray) -> tuple["SimplicialMesh", np.ndarray]:
        """Restrict to the selected simplices.

        Returns the sub-mesh (vertices renumbered) and the array mapping each
        sub-mesh vertex to its index in ``self``.  Faces inherited from the
        parent boundary keep their marker; new interface faces are Neumann.
        """
        simplex_mask = np.asarray(simplex_mask, dtype=bool)
        simp = self.simplices[simplex_mask]
        vmap = np.unique(simp)
        inverse = np.full(self.n_vertices, -1, dtype=np.int64)
        inverse[vmap] = np.arange(len(vmap))
        new_simp = inverse[simp]
        parent = {tuple(sorted(f)): m for f, m in zip(self.boundary_faces.tolist(), self.boundary_markers)}
        faces = _boundary_facets(simp)
        markers = tuple(parent.get(tuple(f), NEUMANN) for f in faces.tolist())
        sub = SimplicialMesh(self.dim, self.vertices[vmap].copy(), new_simp, inverse[faces], markers)
        return sub, vmap


def _simplex_volumes(vertices: np.ndarray, simplices: np.ndarray) -> np.ndarray:
    """Signed volumes (positive for counter-clockwise / right-handed order)."""
    p = vertices[simplices]
    edges = p[:, 1:, :] - p[:, :1, :]
    dim = vertices.shape[1]
    return np.linalg.det(edges) / (1.0 if dim == 1 else (2.0 if dim == 2 else 6.0))


def _facets_of(simplices: np.ndarray) -> np.ndarray:
    """All facets, shape (n_simplices, d+1, d), facet k omits local vertex k."""
    d1 = simplices.shape[1]
    idx = [[m for m in range(d1) if m != k] for k in range(d1)]
    return simplices[:, idx]


def _boundary_facets(simplices: np.ndarray) -> np.ndarray:
    facets = np.sort(_facets_of(simplices).reshape(-1, simplices.shape[1] - 1), axis=1)
    uniq, counts = np.unique(facets, axis=0, return_counts=True)
    return uniq[counts == 1]


def _circumcenters(points: np.ndarray) -> np.ndarray:
    """Circumcentres of full-dimensional simplices, ``points`` (n, d+1, d)."""
    a = points[:, 1:, :] - points[:, :1, :]
    rhs = 0.5 * np.einsum("nkd,nkd->nk", a, a)
    return points[:, 0, :] + np.linalg.solve(a, rhs[..., None])[..., 0]


def _triangle_circumcenters_3d(p0: np.ndarray, p1: np.ndarray, p2: np.ndarray) -> np.ndarray:
    a = p1 - p0
    b = p2 - p0
    axb = np.cross(a, b)
    num = np.cross(
        np.einsum("nd,nd->n", a, a)[:, None] * b - np.einsum("nd,nd->n", b, b)[:, None] * a, axb
    )
    return p0 + num / (2.0 * np.einsum("nd,nd->n", axb, axb))[:, None]


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def validate_mesh(mesh: SimplicialMesh) -> None:
    """Check non-degeneracy, boundary marking and the Delaunay property.

    Raises :class:`MeshError` naming the offending simplex or face.
    """
    v, s = mesh.vertices, mesh.simplices
    if mesh.dim not in (2, 3) or v.ndim != 2 or v.shape[1] != mesh.dim:
        raise MeshError(f"vertices must have shape (n, {mesh.dim}) with dim in {{2, 3}}")
    if s.ndim != 2 or s.shape[1] != mesh.dim + 1:
        raise MeshError("simplices must list dim+1 vertex indices")
    if s.size and (s.min() < 0 or s.max() >= len(v)):
        raise MeshError("simplex vertex index out of range")
    if mesh.boundary_faces.size and (
        mesh.boundary_faces.min() < 0 or mesh.boundary_faces.max() >= len(v)
    ):
        raise MeshError("boundary face vertex index out of range")

    vol = _simplex_volumes(v, s)
    h = _mean_edge_length(v, s)
    bad = np.flatnonzero(np.abs(vol) <= _DEGENERATE_TOL * h**mesh.dim)
    if bad.size:
        raise MeshError(f"degenerate simplex {int(bad[0])} (zero measure)")

    faces = _boundary_facets(s)
    given = np.sort(mesh.boundary_faces, axis=1) if mesh.boundary_faces.size else np.zeros((0, mesh.dim), int)
    if len(mesh.boundary_markers) != len(given):
        raise MeshError("every boundary face needs exactly one marker")
    for m in mesh.boundary_markers:
        if m not in MARKERS:
            raise MeshError(f"unknown boundary marker {m!r}")
    given_set = {}
    for k, f in enumerate(map(tuple, given.tolist())):
        if f in given_set:
            raise MeshError(f"boundary face {f} listed twice")
        given_set[f] = k
    expected = set(map(tuple, faces.tolist()))
    for f in given_set:
        if f not in expected:
            raise MeshError(f"boundary face {f} is not on the domain boundary")
    for f in expected:
        if f not in given_set:
            raise MeshError(f"unmarked boundary face {f}")

    bad = delaunay_violations(mesh)
    if bad.size:
        raise MeshError(f"mesh is not Delaunay: simplex {int(bad[0])} has a neighbour vertex inside its circumsphere")


def delaunay_violations(mesh: SimplicialMesh) -> np.ndarray:
    """Indices of simplices whose circumsphere strictly contains the opposite
    vertex of a face-neighbour (local Delaunay test)."""
    s = mesh.simplices
    d1 = s.shape[1]
    facets = np.sort(_facets_of(s), axis=2).reshape(-1, d1 - 1)
    owner = np.repeat(np.arange(len(s)), d1)
    opposite = s.reshape(-1)
    _, inv, counts = np.unique(facets, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    order = np.argsort(inv, kind="stable")
    shared = counts[inv[order]] == 2
    pairs = order[shared].reshape(-1, 2)
    if not len(pairs):
        return np.zeros(0, dtype=np.int64)
    cc = _circumcenters(mesh.vertices[s])
    r2 = np.sum((mesh.vertices[s[:, 0]] - cc) ** 2, axis=1)
    bad = []
    for a, b in ((0, 1), (1, 0)):
        t = owner[pairs[:, a]]
        p = mesh.vertices[opposite[pairs[:, b]]]
        dist2 = np.sum((p - cc[t]) ** 2, axis=1)
        bad.append(t[dist2 < r2[t] * (1.0 - _DELAUNAY_TOL)])
    return np.unique(np.concatenate(bad))


def _mean_edge_length(v: np.ndarray, s: np.ndarray) -> float:
    if not len(s):
        return 1.0
    e = v[s[:, 1]] - v[s[:, 0]]
    return float(np.mean(np.linalg.norm(e, axis=1)))


# ---------------------------------------------------------------------------
# file I/O


def load_mesh(path, format: str = "text") -> SimplicialMesh:
    """Read and validate a mesh file."""
    if format != "text":
        raise MeshError(f"unsupported mesh format {format!r}")
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise MeshError(f"cannot read mesh file {path}: {exc}") from exc
    tokens = []
    for line in lines:
        line = line.split("#", 1)[0].strip()
        if line:
            tokens.append(line.split())
    try:
        return _parse_tokens(tokens)
    except (IndexError, ValueError) as exc:
        if isinstance(exc, MeshError):
            raise
        raise MeshError(f"parse error in {path}: {exc}") from exc


def _parse_tokens(tokens: list) -> SimplicialMesh:
    pos = 0

    def header(name):
        nonlocal pos
        row = tokens[pos]
        if row[0] != name or len(row) != 2:
            raise MeshError(f"parse error: expected '{name} <count>', got {' '.join(row)!r}")
        pos += 1
        return int(row[1])

    dim = header("dim")
    nv = header("vertices")
    verts = np.array([[float(x) for x in tokens[pos + k]] for k in range(nv)], dtype=float)
    pos += nv
    ns = header("simplices")
    simp = np.array([[int(x) for x in tokens[pos + k]] for k in range(ns)], dtype=np.int64)
    pos += ns
    nb = header("boundary")
    faces, markers = [], []
    for k in range(nb):
        row = tokens[pos + k]
        if len(row) != dim + 1:
            raise MeshError(f"parse error: boundary face line {k} needs {dim} indices and a marker")
        faces.append([int(x) for x in row[:dim]])
        markers.append(row[dim].lower())
    pos += nb
    if pos != len(tokens):
        raise MeshError("parse error: trailing content after boundary section")
    if verts.ndim != 2 or verts.shape[1] != dim:
        raise MeshError("parse error: vertex coordinate count does not match dim")
    mesh = SimplicialMesh(
        dim,
        verts,
        simp.reshape(-1, dim + 1),
        np.array(faces, dtype=np.int64).reshape(-1, dim),
        tuple(markers),
    )
    validate_mesh(mesh)
    return mesh


def save_mesh(mesh: SimplicialMesh, path) -> None:
    out = [f"dim {mesh.dim}", f"vertices {mesh.n_vertices}"]
    out += [" ".join(repr(float(x)) for x in p) for p in mesh.vertices]
    out.append(f"simplices {mesh.n_simplices}")
    out += [" ".join(str(int(k)) for k in t) for t in mesh.simplices]
    out.append(f"boundary {len(mesh.boundary_faces)}")
    out += [
        " ".join(str(int(k)) for k in f) + f" {m}"
        for f, m in zip(mesh.boundary_faces, mesh.boundary_markers)
    ]
    Path(path).write_text("\n".join(out) + "\n")


# ---------------------------------------------------------------------------
# structured generators


def generate_structured(
    lower: Sequence[float],
    upper: Sequence[float],
    n: int | Sequence[int],
    dirichlet: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> SimplicialMesh:
    """Right-triangle (2D) or Kuhn-tetrahedron (3D) grid of a box.

    ``dirichlet`` receives boundary-face centroids, shape (F, dim), and
    returns a boolean mask; unselected faces are Neumann.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    dim = len(lower)
    if dim not in (2, 3) or len(upper) != dim:
        raise ValueError("box must be 2D or 3D")
    n = np.broadcast_to(np.asarray(n, dtype=int), (dim,))
    if np.any(n < 1):
        raise ValueError("need at least one interval per axis")
    if np.any(upper <= lower):
        raise ValueError("upper corner must exceed lower corner")

    axes = [np.linspace(lower[k], upper[k], n[k] + 1) for k in range(dim)]
    grid = np.meshgrid(*axes, indexing="ij")
    verts = np.stack([g.ravel() for g in grid], axis=1)
    shape = tuple(n + 1)

    def vid(*idx):
        return np.ravel_multi_index(idx, shape)

    cells = np.stack(np.meshgrid(*[np.arange(k) for k in n], indexing="ij"), axis=-1).reshape(-1, dim)
    simplices = []
    for perm in itertools.permutations(range(dim)):
        path = [np.zeros(dim, dtype=int)]
        for ax in perm:
            step = path[-1].copy()
            step[ax] += 1
            path.append(step)
        simplices.append(np.stack([vid(*(cells + p).T) for p in path], axis=1))
    simplices = np.concatenate(simplices, axis=0)
    vol = _simplex_volumes(verts, simplices)
    flip = vol < 0
    simplices[flip, 0], simplices[flip, 1] = simplices[flip, 1].copy(), simplices[flip, 0].copy()

    faces = _boundary_facets(simplices)
    if dirichlet is None:
        markers = tuple(NEUMANN for _ in range(len(faces)))
    else:
        mask = np.asarray(dirichlet(verts[faces].mean(axis=1)), dtype=bool)
        markers = tuple(DIRICHLET if m else NEUMANN for m in mask)
    mesh = SimplicialMesh(dim, verts, simplices, faces, markers)
    validate_mesh(mesh)
    return mesh


def delaunay_mesh(
    points: np.ndarray,
    dirichlet: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> SimplicialMesh:
    """Delaunay triangulation of a point cloud (via scipy) with marked hull faces.

    ``dirichlet`` works as in :func:`generate_structured`.  Slivers with
    (near-)zero volume are removed before validation.
    """
    from scipy.spatial import Delaunay

    points = np.asarray(points, dtype=float)
    tri = Delaunay(points)
    simplices = tri.simplices.astype(np.int64)
    vol = _simplex_volumes(points, simplices)
    h = _mean_edge_length(points, simplices)
    keep = np.abs(vol) > _DEGENERATE_TOL * h ** points.shape[1]
    simplices = simplices[keep]
    flip = vol[keep] < 0
    simplices[flip, 0], simplices[flip, 1] = simplices[flip, 1].copy(), simplices[flip, 0].copy()
    faces = _boundary_facets(simplices)
    if dirichlet is None:
        markers = tuple(NEUMANN for _ in range(len(faces)))
    else:
        mask = np.asarray(dirichlet(points[faces].mean(axis=1)), dtype=bool)
        markers = tuple(DIRICHLET if m else NEUMANN for m in mask)
    mesh = SimplicialMesh(points.shape[1], points, simplices, faces, markers)
    validate_mesh(mesh)
    return mesh


def reflect_mesh(
    mesh: SimplicialMesh,
    axis: int,
    plane: float,
    dirichlet: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> SimplicialMesh:
    """Union of ``mesh`` and its mirror image in the hyperplane x_axis = plane.

    The mesh must lie on one side of the plane; vertices on the plane are
    shared. Boundary markers are reassigned by ``dirichlet`` exactly as in
    :func:`generate_structured`.
    """
    v = mesh.vertices
    side = np.sign(v[:, axis] - plane)
    if np.any(side > 0) and np.any(side < 0):
        raise MeshError("mesh straddles the reflection plane")
    tol = 1e-12 * max(1.0, float(np.ptp(v[:, axis])))
    on_plane = np.abs(v[:, axis] - plane) <= tol
    off = np.flatnonzero(~on_plane)
    image = np.arange(len(v))
    image[off] = len(v) + np.arange(len(off))
    mirrored = v[off].copy()
    mirrored[:, axis] = 2.0 * plane - mirrored[:, axis]
    verts = np.concatenate([v, mirrored])
    simplices = np.concatenate([mesh.simplices, image[mesh.simplices]])
    vol = _simplex_volumes(verts, simplices)
    flip = vol < 0
    simplices[flip, 0], simplices[flip, 1] = simplices[flip, 1].copy(), simplices[flip, 0].copy()
    faces = _boundary_facets(simplices)
    if dirichlet is None:
        markers = tuple(NEUMANN for _ in range(len(faces)))
    else:
        mask = np.asarray(dirichlet(verts[faces].mean(axis=1)), dtype=bool)
        markers = tuple(DIRICHLET if m else NEUMANN for m in mask)
    out = SimplicialMesh(mesh.dim, verts, simplices, faces, markers)
    validate_mesh(out)
    return out


def unit_square_two_triangles() -> SimplicialMesh:
    v = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    s = np.array([[0, 1, 2], [0, 2, 3]])
    f = np.array([[0, 1], [1, 2], [2, 3], [0, 3]])
    return SimplicialMesh(2, v, s, f, (NEUMANN,) * 4)


# ---------------------------------------------------------------------------
# dual mesh


@dataclass(frozen=True, eq=False)
class DualMesh:
    """Voronoi control volumes of a Delaunay mesh.

    Interior faces are stored once per vertex pair ``(edge_i[k], edge_j[k])``
    with ``edge_i < edge_j``.  Boundary faces are stored per owning vertex;
    for a vertex-centred dual the vertex lies on its boundary face, so their
    ``bface_d`` is zero and only ``bface_measure`` carries information.
    """

    dim: int
    points: np.ndarray
    cell_measures: np.ndarray
    edge_i: np.ndarray
    edge_j: np.ndarray
    edge_measure: np.ndarray
    edge_length: np.ndarray
    bface_vertex: np.ndarray
    bface_measure: np.ndarray
    bface_d: np.ndarray
    bface_dirichlet: np.ndarray
    bface_parent: np.ndarray
    neighbor_ptr: np.ndarray
    neighbor_idx: np.ndarray
    diameters: np.ndarray = field(repr=False)

    @property
    def n_cells(self) -> int:
        return len(self.cell_measures)

    @property
    def n_edges(self) -> int:
        return len(self.edge_i)

    @property
    def tau(self) -> np.ndarray:
        return self.edge_measure / self.edge_length

    @property
    def dirichlet_vertices(self) -> np.ndarray:
        """Index set N1."""
        return np.unique(self.bface_vertex[self.bface_dirichlet])

    @property
    def neumann_vertices(self) -> np.ndarray:
        """Index set N2."""
        return np.unique(self.bface_vertex[~self.bface_dirichlet])

    @property
    def boundary_vertices(self) -> np.ndarray:
        """Index set N3."""
        return np.unique(self.bface_vertex)

    def neighbors(self, i: int) -> np.ndarray:
        """Vertices whose control volume touches V_i (the set W_i)."""
        return self.neighbor_idx[self.neighbor_ptr[i] : self.neighbor_ptr[i + 1]]


def build_dual(mesh: SimplicialMesh, xi: float = 0.05) -> DualMesh:
    """Circumcentric dual of ``mesh``.

    Mesh edges whose dual face has zero measure (cocircular configurations,
    e.g. the hypotenuse of a right triangle) are dropped.  A negative face
    measure means the mesh is not admissible and raises :class:`MeshError`.
    """
    v, s, dim = mesh.vertices, mesh.simplices, mesh.dim
    h = _mean_edge_length(v, s)
    p = v[s]
    cc = _circumcenters(p)
    local = list(itertools.combinations(range(dim + 1), 2))

    all_pairs = np.concatenate([np.sort(s[:, list(e)], axis=1) for e in local], axis=0)
    uniq, inv = np.unique(all_pairs, axis=0, return_inverse=True)
    inv = inv.reshape(len(local), len(s))
    cov = np.zeros((len(local), len(s)))
    ortho = 0.0

    if dim == 2:
        for k, (a, b) in enumerate(local):
            c = 3 - a - b
            pa, pb, pc = p[:, a], p[:, b], p[:, c]
            mid = 0.5 * (pa + pb)
            e = pb - pa
            nrm = pc - mid
            nrm = _unit(nrm - np.einsum("nd,nd->n", nrm, e)[:, None] * e / np.einsum("nd,nd->n", e, e)[:, None])
            cov[k] = np.einsum("nd,nd->n", cc - mid, nrm)
            ortho = max(ortho, np.max(np.abs(np.einsum("nd,nd->n", cc - mid, _unit(e)))))
    else:
        for k, (a, b) in enumerate(local):
            others = [m for m in range(4) if m not in (a, b)]
            pa, pb = p[:, a], p[:, b]
            mid = 0.5 * (pa + pb)
            e = pb - pa
            eu = _unit(e)
            total = np.zeros(len(s))
            for kk, ll in (others, others[::-1]):
                pk, pl = p[:, kk], p[:, ll]
                cf = _triangle_circumcenters_3d(pa, pb, pk)
                nk = pk - mid
                nk = _unit(nk - np.einsum("nd,nd->n", nk, eu)[:, None] * eu)
                sk = np.einsum("nd,nd->n", cf - mid, nk)
                nf = _unit(np.cross(e, pk - pa))
                nf *= np.sign(np.einsum("nd,nd->n", pl - pa, nf))[:, None]
                tk = np.einsum("nd,nd->n", cc - cf, nf)
                total += 0.5 * sk * tk
                ortho = max(ortho, np.max(np.abs(np.einsum("nd,nd->n", cf - mid, eu))))
            cov[k] = total
            ortho = max(ortho, np.max(np.abs(np.einsum("nd,nd->n", cc - mid, eu))))

    if ortho > _ORTHO_TOL * max(h, 1.0):
        raise MeshError(f"dual faces are not orthogonal to mesh edges (defect {ortho:.3e})")

    face = np.bincount(inv.ravel(), weights=cov.ravel(), minlength=len(uniq))
    length = np.linalg.norm(v[uniq[:, 1]] - v[uniq[:, 0]], axis=1)
    scale = _FACE_TOL * h ** (dim - 1)
    negative = np.flatnonzero(face < -scale)
    if negative.size:
        i, j = uniq[negative[0]]
        raise MeshError(f"non-positive dual face measure on edge ({i}, {j}): {face[negative[0]]:.3e}")
    keep = face > scale

    # pyramid decomposition: each half-edge contributes (1/d) * (d_sigma / 2) * m(sigma)
    half = face * length / (2.0 * dim)
    cells = np.bincount(uniq[:, 0], weights=half, minlength=len(v)) + np.bincount(
        uniq[:, 1], weights=half, minlength=len(v)
    )
    if np.any(cells <= 0):
        bad = int(np.flatnonzero(cells <= 0)[0])
        raise MeshError(f"control volume of vertex {bad} has non-positive measure")

    bverts, bmeas, bdir, bparent = _boundary_pieces(mesh)

    # W_i: all mesh-edge neighbours (their cells share at least a point)
    both = np.concatenate([uniq, uniq[:, ::-1]], axis=0)
    order = np.lexsort((both[:, 1], both[:, 0]))
    both = both[order]
    ptr = np.zeros(len(v) + 1, dtype=np.int64)
    np.add.at(ptr, both[:, 0] + 1, 1)
    ptr = np.cumsum(ptr)

    diam = _cell_diameters(mesh, cc)
    dual = DualMesh(
        dim=dim,
        points=v,
        cell_measures=cells,
        edge_i=uniq[keep, 0].copy(),
        edge_j=uniq[keep, 1].copy(),
        edge_measure=face[keep],
        edge_length=length[keep],
        bface_vertex=bverts,
        bface_measure=bmeas,
        bface_d=np.zeros(len(bverts)),
        bface_dirichlet=bdir,
        bface_parent=bparent,
        neighbor_ptr=ptr,
        neighbor_idx=both[:, 1].copy(),
        diameters=diam,
    )
    reg = regularity_violations(dual, xi)
    if reg.size:
        warnings.warn(
            f"{reg.size} control volumes violate d(x_i, sigma) >= {xi} diam(V_i)",
            MeshRegularityWarning,
            stacklevel=2,
        )
    return dual


def _boundary_pieces(mesh: SimplicialMesh):
    v, f = mesh.vertices, mesh.boundary_faces
    dirich = np.array([m == DIRICHLET for m in mesh.boundary_markers], dtype=bool)
    if not len(f):
        z = np.zeros(0)
        return z.astype(np.int64), z, z.astype(bool), z.astype(np.int64)
    if mesh.dim == 2:
        length = np.linalg.norm(v[f[:, 1]] - v[f[:, 0]], axis=1)
        verts = f.reshape(-1)
        meas = np.repeat(0.5 * length, 2)
    else:
        p = v[f]
        c = _triangle_circumcenters_3d(p[:, 0], p[:, 1], p[:, 2])
        meas = np.zeros((len(f), 3))
        for a, b in ((0, 1), (1, 2), (0, 2)):
            o = 3 - a - b
            mid = 0.5 * (p[:, a] + p[:, b])
            e = p[:, b] - p[:, a]
            le = np.linalg.norm(e, axis=1)
            eu = e / le[:, None]
            nrm = p[:, o] - mid
            nrm = _unit(nrm - np.einsum("nd,nd->n", nrm, eu)[:, None] * eu)
            sgn = np.einsum("nd,nd->n", c - mid, nrm)
            piece = 0.5 * (0.5 * le) * sgn
            meas[:, a] += piece
            meas[:, b] += piece
        verts = f.reshape(-1)
        meas = meas.reshape(-1)
    parent = np.repeat(np.arange(len(f)), mesh.dim)
    return verts.astype(np.int64), meas, np.repeat(dirich, mesh.dim), parent


def _cell_diameters(mesh: SimplicialMesh, cc: np.ndarray) -> np.ndarray:
    """diam(V_i) from the vertices of the clipped Voronoi cell: x_i, edge
    midpoints and circumcentres of the simplices around x_i."""
    v, s = mesh.vertices, mesh.simplices
    order = np.argsort(s.ravel(), kind="stable")
    owner = np.repeat(np.arange(len(s)), s.shape[1])[order]
    starts = np.searchsorted(s.ravel()[order], np.arange(len(v) + 1))
    diam = np.zeros(len(v))
    for i in range(len(v)):
        tets = owner[starts[i] : starts[i + 1]]
        if not len(tets):
            continue
        nb = np.unique(s[tets])
        pts = np.concatenate([cc[tets], 0.5 * (v[nb] + v[i])], axis=0)
        diff = pts[:, None, :] - pts[None, :, :]
        diam[i] = np.sqrt(np.max(np.einsum("abd,abd->ab", diff, diff)))
    return diam


def regularity_violations(dual: DualMesh, xi: float) -> np.ndarray:
    """Vertices with an interior face closer than ``xi * diam(V_i)``."""
    half = 0.5 * dual.edge_length
    closest = np.full(dual.n_cells, np.inf)
    np.minimum.at(closest, dual.edge_i, half)
    np.minimum.at(closest, dual.edge_j, half)
    return np.flatnonzero(closest < xi * dual.diameters)


# ---------------------------------------------------------------------------
# difference operator


def face_difference(kind: str, u_i: float, other: float, d_sigma: float = 0.0) -> float:
    """Two-point difference (Du)_{i,sigma}.

    ``other`` is u_j for interior faces, the Dirichlet value u^D for
    Dirichlet faces and the normal derivative u^N for Neumann faces.
    """
    if kind == "interior":
        return other - u_i
    if kind == DIRICHLET:
        return other - u_i
    if kind == NEUMANN:
        return other * d_sigma
    raise ValueError(f"unknown face kind {kind!r}")


def difference(dual: DualMesh, u: np.ndarray, edge: int, cell: Optional[int] = None, boundary_data=None) -> float:
    """(Du)_{i,sigma} for face ``edge``.

    Faces ``0 .. n_edges-1`` are interior, seen from ``cell`` (default the
    lower-indexed endpoint); the following ids are boundary faces in the
    order of ``dual.bface_vertex``.
    """
    if 0 <= edge < dual.n_edges:
        i, j = int(dual.edge_i[edge]), int(dual.edge_j[edge])
        if cell is None or cell == i:
            return face_difference("interior", u[i], u[j])
        if cell == j:
            return face_difference("interior", u[j], u[i])
        raise ValueError(f"cell {cell} is not an endpoint of edge {edge}")
    k = edge - dual.n_edges
    if not 0 <= k < len(dual.bface_vertex):
        raise IndexError(f"no face with id {edge}")
    if boundary_data is None:
        raise ValueError(f"boundary face {edge} needs boundary data")
    kind = DIRICHLET if dual.bface_dirichlet[k] else NEUMANN
    return face_difference(kind, u[dual.bface_vertex[k]], boundary_data, dual.bface_d[k])
