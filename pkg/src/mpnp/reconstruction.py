"""Multislope face reconstruction on unstructured simplicial meshes.

For an ordered pair (i, j) of Voronoi neighbours the backward slope is taken
from an extension point on the ray from x_j through x_i, located inside a
simplex that shares the edge x_i x_k1 (x_k1 being the neighbour of x_i most
nearly opposite to x_j).  The limited face value at the midpoint of x_i x_j
stays positive whenever the cell data are positive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import DualMesh, SimplicialMesh

R_MAX = 30
_BARY_TOL = -1e-12
_TIE_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class ExtensionStencil:
    """Per ordered pair data; pair ``k`` is (edge_i[k], edge_j[k]) for
    ``k < n_edges`` and the reverse orientation for ``k >= n_edges``."""

    pair_i: np.ndarray
    pair_j: np.ndarray
    k1: np.ndarray
    simplex: np.ndarray  # -1 where no extension simplex exists
    vertices: np.ndarray  # (P, d+1) ids of the containing simplex
    weights: np.ndarray  # (P, d+1) barycentric weights
    r: np.ndarray
    point: np.ndarray
    dist_ij: np.ndarray
    dist_ext: np.ndarray

    @property
    def n_pairs(self) -> int:
        return len(self.pair_i)

    @property
    def fallback(self) -> np.ndarray:
        return self.simplex < 0


def extension_point(xi: np.ndarray, xj: np.ndarray, r: int) -> np.ndarray:
    return ((2.0**r + 1.0) * xi - xj) / 2.0**r


def build_stencils(mesh: SimplicialMesh, dual: DualMesh, r_max: int = R_MAX) -> ExtensionStencil:
    v, s = mesh.vertices, mesh.simplices
    n, d1 = len(v), s.shape[1]
    pi = np.concatenate([dual.edge_i, dual.edge_j])
    pj = np.concatenate([dual.edge_j, dual.edge_i])
    npairs = len(pi)

    # k1: neighbour q of x_i maximising cos(x_q->x_i, x_i->x_j); ties -> smallest id
    ptr, nbr = dual.neighbor_ptr, dual.neighbor_idx
    counts = ptr[pi + 1] - ptr[pi]
    owner = np.repeat(np.arange(npairs), counts)
    offs = np.arange(len(owner)) - np.repeat(np.cumsum(counts) - counts, counts)
    q = nbr[ptr[pi][owner] + offs]
    back = v[pi][owner] - v[q]
    fwd = v[pj][owner] - v[pi][owner]
    cos = np.einsum("nd,nd->n", back, fwd) / (np.linalg.norm(back, axis=1) * np.linalg.norm(fwd, axis=1))
    best = np.full(npairs, -np.inf)
    np.maximum.at(best, owner, cos)
    cand = cos >= best[owner] - _TIE_TOL
    k1 = np.full(npairs, np.iinfo(np.int64).max)
    np.minimum.at(k1, owner[cand], q[cand])

    # simplices around each mesh edge
    loc = [(a, b) for a in range(d1) for b in range(a + 1, d1)]
    epairs = np.concatenate([np.sort(s[:, list(e)], axis=1) for e in loc])
    eowner = np.tile(np.arange(len(s)), len(loc))
    key = epairs[:, 0] * n + epairs[:, 1]
    order = np.argsort(key, kind="stable")
    key, eowner = key[order], eowner[order]
    lo_k = np.minimum(pi, k1) * n + np.maximum(pi, k1)
    start = np.searchsorted(key, lo_k, side="left")
    stop = np.searchsorted(key, lo_k, side="right")

    # affine maps to barycentric coordinates
    p0 = v[s[:, 0]]
    inv = np.linalg.inv(np.transpose(v[s[:, 1:]] - p0[:, None, :], (0, 2, 1)))

    simplex = np.full(npairs, -1, dtype=np.int64)
    weights = np.zeros((npairs, d1))
    rr = np.full(npairs, -1, dtype=np.int64)
    point = np.zeros((npairs, mesh.dim))
    todo = np.arange(npairs)
    ncand = stop - start
    for r in range(r_max + 1):
        if not todo.size:
            break
        x = extension_point(v[pi[todo]], v[pj[todo]], r)
        c = ncand[todo]
        own = np.repeat(np.arange(len(todo)), c)
        off = np.arange(len(own)) - np.repeat(np.cumsum(c) - c, c)
        tet = eowner[start[todo][own] + off]
        lam = np.einsum("nij,nj->ni", inv[tet], x[own] - p0[tet])
        bary = np.concatenate([1.0 - lam.sum(axis=1, keepdims=True), lam], axis=1)
        inside = np.all(bary >= _BARY_TOL, axis=1)
        # first containing candidate per pair
        hit = np.full(len(todo), len(own), dtype=np.int64)
        idx = np.flatnonzero(inside)
        np.minimum.at(hit, own[idx], idx)
        found = hit < len(own)
        sel = todo[found]
        simplex[sel] = tet[hit[found]]
        b = np.clip(bary[hit[found]], 0.0, None)
        weights[sel] = b / b.sum(axis=1, keepdims=True)
        rr[sel] = r
        point[sel] = x[found]
        todo = todo[~found]

    verts = np.where(simplex[:, None] >= 0, s[np.maximum(simplex, 0)], pi[:, None])
    dist_ij = np.linalg.norm(v[pj] - v[pi], axis=1)
    dist_ext = np.where(simplex >= 0, np.linalg.norm(point - v[pi], axis=1), dist_ij)
    return ExtensionStencil(pi, pj, k1, simplex, verts, weights, rr, point, dist_ij, dist_ext)


def minmod(q1, q2, q3):
    """k * min(|q1|, |q2|, |q3|) when all three share the nonzero sign k, else 0."""
    q1, q2, q3 = np.asarray(q1, float), np.asarray(q2, float), np.asarray(q3, float)
    s1 = np.sign(q1)
    agree = (s1 != 0) & (s1 == np.sign(q2)) & (s1 == np.sign(q3))
    out = np.where(agree, s1 * np.minimum(np.minimum(np.abs(q1), np.abs(q2)), np.abs(q3)), 0.0)
    return out[()] if out.ndim == 0 else out


def limiter(s_plus, s_minus, beta):
    return minmod(beta * s_plus, beta * s_minus, 0.5 * (s_plus + s_minus))


def reconstruct_face_values(u: np.ndarray, stencils: ExtensionStencil, beta: float = 2.0) -> np.ndarray:
    """u_{i->j} for every ordered pair (i.e. every entry of ``stencils``).

    ``u`` may carry leading batch axes, shape (..., Ns).
    """
    if not 1.0 <= beta <= 2.0:
        raise ValueError("beta must lie in [1, 2]")
    st = stencils
    ui = u[..., st.pair_i]
    uj = u[..., st.pair_j]
    uext = np.einsum("...pk,pk->...p", u[..., st.vertices], st.weights)
    s_plus = (uj - ui) / st.dist_ij
    s_minus = (ui - uext) / st.dist_ext
    val = ui + 0.5 * st.dist_ij * limiter(s_plus, s_minus, beta)
    return np.where(st.fallback, ui, val)


def reconstruct_face_value(u: np.ndarray, pair: tuple, stencils: ExtensionStencil, beta: float = 2.0) -> float:
    """u_{i->j} for a single ordered pair (i, j)."""
    i, j = pair
    k = np.flatnonzero((stencils.pair_i == i) & (stencils.pair_j == j))
    if not k.size:
        raise KeyError(f"({i}, {j}) is not a pair of Voronoi neighbours")
    k = int(k[0])
    st = stencils
    if st.fallback[k]:
        return float(u[i])
    uext = float(np.dot(u[st.vertices[k]], st.weights[k]))
    s_plus = (u[j] - u[i]) / st.dist_ij[k]
    s_minus = (u[i] - uext) / st.dist_ext[k]
    return float(u[i] + 0.5 * st.dist_ij[k] * limiter(s_plus, s_minus, beta))
