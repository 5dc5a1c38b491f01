"""Physical parameters, chemical potentials and the discrete free energy.

Concentration arrays have shape ``(M, Ns)`` where ``Ns`` counts the vertices
accessible to ions (all vertices unless ``ModelSpec.ion_vertices`` is set);
the potential lives on every vertex of the mesh.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .mesh import DualMesh


@dataclass(frozen=True)
class SpeciesSpec:
    z: int
    a: float
    gamma: float = 1.0

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError("ionic size a must be positive")
        if not self.gamma > 0:
            raise ValueError("mobility coefficient gamma must be positive")


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Nondimensional modified PNP model on a fixed mesh.

    ``psi_dirichlet`` holds a value for every vertex; only entries on
    Dirichlet vertices are read.  ``psi_neumann`` is the prescribed flux
    kappa*eps*dpsi/dn on each boundary face of the dual (``bface_*`` order).
    ``conc_dirichlet_mask`` marks ion vertices whose concentrations are held
    at ``conc_dirichlet`` (reservoir contacts); empty means zero flux
    everywhere.
    """

    species: tuple
    a0: float
    kappa: float
    chi: float
    epsilon: np.ndarray
    rho_f: np.ndarray
    psi_dirichlet: np.ndarray
    psi_neumann: np.ndarray
    ion_vertices: Optional[np.ndarray] = None
    conc_dirichlet_mask: Optional[np.ndarray] = None
    conc_dirichlet: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "species", tuple(self.species))
        if not self.a0 > 0 or not self.kappa > 0 or self.chi < 0:
            raise ValueError("need a0 > 0, kappa > 0, chi >= 0")
        eps = np.asarray(self.epsilon, dtype=float)
        if np.any(eps <= 0):
            raise ValueError("dielectric coefficient must be positive")
        object.__setattr__(self, "epsilon", eps)
        object.__setattr__(self, "rho_f", np.asarray(self.rho_f, dtype=float))
        object.__setattr__(self, "psi_dirichlet", np.asarray(self.psi_dirichlet, dtype=float))
        object.__setattr__(self, "psi_neumann", np.asarray(self.psi_neumann, dtype=float))

    @property
    def n_species(self) -> int:
        return len(self.species)

    @property
    def z(self) -> np.ndarray:
        return np.array([s.z for s in self.species], dtype=float)

    @property
    def a3(self) -> np.ndarray:
        return np.array([s.a for s in self.species], dtype=float) ** 3

    @property
    def gamma(self) -> np.ndarray:
        return np.array([s.gamma for s in self.species], dtype=float)

    @property
    def ions(self) -> np.ndarray:
        if self.ion_vertices is None:
            return np.arange(len(self.epsilon))
        return np.asarray(self.ion_vertices)

    def born(self) -> np.ndarray:
        """Born solvation potential chi z^2/a (1/eps - 1), shape (M, Ns)."""
        a = np.array([s.a for s in self.species], dtype=float)
        coef = self.chi * self.z**2 / a
        return coef[:, None] * (1.0 / self.epsilon[self.ions] - 1.0)[None, :]

    def fixed_concentrations(self) -> np.ndarray:
        if self.conc_dirichlet_mask is None:
            return np.zeros(len(self.ions), dtype=bool)
        return np.asarray(self.conc_dirichlet_mask, dtype=bool)

    def with_data(self, **changes) -> "ModelSpec":
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class State:
    c: np.ndarray
    psi: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.c, dtype=float))
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "psi", np.asarray(self.psi, dtype=float))

    def check(self, model: ModelSpec) -> None:
        """Raise ValueError unless all ion and solvent concentrations are positive."""
        if np.any(~np.isfinite(self.c)) or np.any(self.c <= 0):
            raise ValueError("ionic concentrations must be positive")
        if np.any(solvent_fraction(self.c, model) <= 0):
            raise ValueError("solvent fraction 1 - sum a^3 c must be positive")

    def copy(self, **changes) -> "State":
        base = dict(c=self.c.copy(), psi=self.psi.copy(), time=self.time)
        base.update(changes)
        return State(**base)


def solvent_fraction(c: np.ndarray, model: ModelSpec) -> np.ndarray:
    """1 - sum_k a_k^3 c^k."""
    return 1.0 - np.einsum("k,kn->n", model.a3, c)


def solvent_concentration(state: State, model: ModelSpec, cell: Optional[int] = None):
    c0 = solvent_fraction(state.c, model) / model.a0**3
    return c0 if cell is None else float(c0[cell])


def chemical_potential(state: State, model: ModelSpec, species: Optional[int] = None, cell: Optional[int] = None):
    """mu^l = z psi + log(a^3 c) - (a/a0)^3 log(phi) + Born, shape (M, Ns)."""
    phi = solvent_fraction(state.c, model)
    if np.any(state.c <= 0) or np.any(phi <= 0):
        raise FloatingPointError("chemical potential outside its domain (non-positive log argument)")
    a3 = model.a3
    mu = (
        model.z[:, None] * state.psi[model.ions][None, :]
        + np.log(a3[:, None] * state.c)
        - (a3 / model.a0**3)[:, None] * np.log(phi)[None, :]
        + model.born()
    )
    if species is None:
        return mu if cell is None else mu[:, cell]
    return mu[species] if cell is None else float(mu[species, cell])


def edge_dielectric(epsilon: np.ndarray, dual: DualMesh, edge: Optional[int] = None):
    """Harmonic mean of the two cell values on interior faces; the cell
    value on boundary faces (ids past ``n_edges``)."""
    if edge is None:
        ei, ej = epsilon[dual.edge_i], epsilon[dual.edge_j]
        return 2.0 * ei * ej / (ei + ej)
    if edge < dual.n_edges:
        ei, ej = epsilon[dual.edge_i[edge]], epsilon[dual.edge_j[edge]]
        return 2.0 * ei * ej / (ei + ej)
    return float(epsilon[dual.bface_vertex[edge - dual.n_edges]])


def harmonic_mean(a, b):
    return 2.0 * a * b / (a + b)


def weighted_laplacian(n: int, i: np.ndarray, j: np.ndarray, w: np.ndarray) -> sp.csr_matrix:
    """Graph Laplacian L with (L u)_i = sum_j w_ij (u_i - u_j)."""
    rows = np.concatenate([i, j, i, j])
    cols = np.concatenate([i, j, j, i])
    vals = np.concatenate([w, w, -w, -w])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def poisson_matrix(dual: DualMesh, model: ModelSpec) -> sp.csr_matrix:
    """kappa * sum_sigma tau eps_sigma (psi_i - psi_j) over interior faces."""
    w = model.kappa * dual.tau * edge_dielectric(model.epsilon, dual)
    return weighted_laplacian(dual.n_cells, dual.edge_i, dual.edge_j, w)


def neumann_load(dual: DualMesh, model: ModelSpec) -> np.ndarray:
    """sum over Neumann faces of m(sigma) psi^N_sigma, per vertex."""
    w = np.where(dual.bface_dirichlet, 0.0, dual.bface_measure * model.psi_neumann)
    return np.bincount(dual.bface_vertex, weights=w, minlength=dual.n_cells)


def charge(c: np.ndarray, dual: DualMesh, model: ModelSpec, ion_measures: np.ndarray) -> np.ndarray:
    """Total charge per control volume, m(V_i) rho_i."""
    q = dual.cell_measures * model.rho_f
    q[model.ions] += ion_measures * np.einsum("k,kn->n", model.z, c)
    return q


def discrete_energy(state: State, dual: DualMesh, model: ModelSpec, ion_dual: Optional[DualMesh] = None) -> float:
    """Finite-volume free energy F^n.

    The Dirichlet boundary term uses the discrete flux through the Dirichlet
    part of dV_i, which for the vertex-centred scheme is the Poisson
    residual at the (strongly imposed) Dirichlet vertex.
    """
    ion_dual = dual if ion_dual is None else ion_dual
    ms = ion_dual.cell_measures
    c = state.c
    phi = solvent_fraction(c, model)
    if np.any(c <= 0) or np.any(phi <= 0):
        raise FloatingPointError("free energy outside its domain (non-positive log argument)")
    a3 = model.a3
    entropy = np.sum(c * (np.log(a3[:, None] * c) - 1.0), axis=0)
    c0 = phi / model.a0**3
    entropy += c0 * (np.log(phi) - 1.0)
    born = np.sum(model.born() * c, axis=0)
    bulk = float(np.sum(ms * (entropy + born)))

    q = charge(c, dual, model, ms)
    psi = state.psi
    elec = 0.5 * float(np.dot(q, psi))
    neu = ~dual.bface_dirichlet
    elec += 0.5 * float(np.sum(dual.bface_measure[neu] * model.psi_neumann[neu] * psi[dual.bface_vertex[neu]]))
    dv = dual.dirichlet_vertices
    if dv.size:
        flux = poisson_matrix(dual, model) @ psi - q - neumann_load(dual, model)
        elec -= 0.5 * float(np.dot(model.psi_dirichlet[dv], flux[dv]))
    return bulk + elec
