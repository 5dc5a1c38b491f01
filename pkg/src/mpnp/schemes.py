"""Per-step residual systems of the two finite-volume schemes.

Unknowns are ordered ``[c^1 (Ns), ..., c^M (Ns), psi (N)]``.  Residual rows
are divided by the control-volume measure so that the Newton tolerance is a
pointwise quantity:

* species rows:  (c_i - c_i^n)/dt + (1/m_i) sum_sigma gamma tau mob (mu_i - mu_j) - f_i
* Poisson rows:  (1/m_i) [kappa sum_sigma tau eps_sigma (psi_i - psi_j) - m_i rho_i - Neumann load]

Dirichlet potentials and (for reservoir contacts) Dirichlet concentrations
are imposed strongly by replacing the row with ``u_i - u^D_i``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .mesh import DualMesh, SimplicialMesh, build_dual
from .model import (
    ModelSpec,
    State,
    neumann_load,
    poisson_matrix,
    solvent_fraction,
    weighted_laplacian,
)
from .reconstruction import ExtensionStencil, build_stencils, reconstruct_face_values

SCHEME_I = "I"
SCHEME_II = "II"


@dataclass(frozen=True)
class ForcingData:
    """Time-dependent data at one instant; ``None`` keeps the model value."""

    source: Optional[np.ndarray] = None  # (M, Ns) volumetric sources f_l
    rho_f: Optional[np.ndarray] = None
    psi_dirichlet: Optional[np.ndarray] = None


Forcing = Callable[[float], ForcingData]


@dataclass(eq=False)
class Discretization:
    """Everything fixed over a run: meshes, duals, stencils, model, forcing."""

    mesh: SimplicialMesh
    dual: DualMesh
    model: ModelSpec
    ion_mesh: SimplicialMesh
    ion_dual: DualMesh
    stencils: ExtensionStencil
    beta: float = 2.0
    forcing: Optional[Forcing] = None
    _poisson: sp.csr_matrix = field(default=None, repr=False)

    @classmethod
    def build(
        cls,
        mesh: SimplicialMesh,
        model: ModelSpec,
        beta: float = 2.0,
        forcing: Optional[Forcing] = None,
        ion_simplices: Optional[np.ndarray] = None,
        xi: float = 0.05,
        dual: Optional[DualMesh] = None,
    ) -> "Discretization":
        dual = build_dual(mesh, xi) if dual is None else dual
        if ion_simplices is None:
            ion_mesh, ion_dual = mesh, dual
            if model.ion_vertices is not None and len(model.ion_vertices) != mesh.n_vertices:
                raise ValueError("ion_vertices given without the ion sub-mesh")
        else:
            ion_mesh, vmap = mesh.submesh(ion_simplices)
            ion_dual = build_dual(ion_mesh, xi)
            model = model.with_data(ion_vertices=vmap)
        if not 1.0 <= beta <= 2.0:
            raise ValueError("beta must lie in [1, 2]")
        return cls(mesh, dual, model, ion_mesh, ion_dual, build_stencils(ion_mesh, ion_dual), beta, forcing)

    @property
    def n_species(self) -> int:
        return self.model.n_species

    @property
    def n_ion(self) -> int:
        return self.ion_dual.n_cells

    @property
    def n_cells(self) -> int:
        return self.dual.n_cells

    @property
    def ions(self) -> np.ndarray:
        return self.model.ions

    @property
    def poisson(self) -> sp.csr_matrix:
        if self._poisson is None:
            self._poisson = poisson_matrix(self.dual, self.model)
        return self._poisson

    def model_at(self, t: float) -> tuple[ModelSpec, Optional[np.ndarray]]:
        """Model with time-dependent data applied, and the source term."""
        if self.forcing is None:
            return self.model, None
        data = self.forcing(t)
        changes = {}
        if data.rho_f is not None:
            changes["rho_f"] = data.rho_f
        if data.psi_dirichlet is not None:
            changes["psi_dirichlet"] = data.psi_dirichlet
        model = self.model.with_data(**changes) if changes else self.model
        return model, data.source

    def ion_charge(self, c: np.ndarray) -> np.ndarray:
        q = np.zeros(self.n_cells)
        q[self.ions] = self.ion_dual.cell_measures * np.einsum("k,kn->n", self.model.z, c)
        return q


# ---------------------------------------------------------------------------
# pointwise formulas


def extrapolated_concentration(c_n, c_nm1):
    """Positive second-order extrapolation to t^{n+1/2}."""
    c_n, c_nm1 = np.asarray(c_n, float), np.asarray(c_nm1, float)
    lin = 0.5 * (3.0 * c_n - c_nm1)
    with np.errstate(divide="ignore", invalid="ignore"):
        geo = c_n**1.5 / np.sqrt(c_nm1)
    out = np.where(3.0 * c_n > c_nm1, lin, geo)
    return out[()] if out.ndim == 0 else out


def _taylor_factor(r):
    """1 - 5r/6 + r^2/3: derivative factor of the truncated Taylor terms (always > 0)."""
    return 1.0 - 5.0 * r / 6.0 + r * r / 3.0


def mu_e1(c_np1, c_n, a: float):
    c, c0 = np.asarray(c_np1, float), np.asarray(c_n, float)
    if np.any(c <= 0):
        raise FloatingPointError("mu_e1 needs c^{n+1} > 0")
    d = (c - c0) / c
    out = np.log(a**3 * c) - 0.5 * d - d * d / 6.0
    return out[()] if out.ndim == 0 else out


def mu_e2(c_np1, c_n, species: int, model: ModelSpec):
    """Steric part of the mid-point chemical potential for one species.

    ``c_np1`` and ``c_n`` have shape (M, ...)."""
    phi = solvent_fraction(np.asarray(c_np1, float), model)
    phi0 = solvent_fraction(np.asarray(c_n, float), model)
    if np.any(phi <= 0) or np.any(phi0 <= 0):
        raise FloatingPointError("mu_e2 needs positive solvent fractions")
    d = (phi0 - phi) / phi
    out = model.a3[species] / model.a0**3 * (-np.log(phi) - 0.5 * d + d * d / 6.0)
    return out[()] if np.ndim(out) == 0 else out


def upwind_mobility_I(c_n: np.ndarray, mu_n: np.ndarray, edge: int, species: int, disc: Discretization) -> float:
    """Face mobility of one interior edge for Scheme I (explicit, reconstructed c^n)."""
    st, d = disc.stencils, disc.ion_dual
    i, j = d.edge_i[edge], d.edge_j[edge]
    faces = reconstruct_face_values(c_n[species], st, disc.beta)
    dmu = mu_n[species, j] - mu_n[species, i]
    return float(faces[edge] if dmu < 0 else faces[edge + d.n_edges])


# ---------------------------------------------------------------------------
# mobilities


@dataclass(frozen=True)
class FaceMobilities:
    """Per species (rows) and ion-mesh interior edge (columns)."""

    values: np.ndarray
    from_i: np.ndarray  # True where the i->j reconstruction was used

    def __post_init__(self):
        if np.any(~(self.values > 0)):
            raise FloatingPointError("non-positive face mobility")


def upwind(face_values: np.ndarray, dmu: np.ndarray) -> FaceMobilities:
    """Select c_{i->j} where D mu = mu_j - mu_i < 0, else c_{j->i}."""
    ne = dmu.shape[-1]
    from_i = dmu < 0
    return FaceMobilities(np.where(from_i, face_values[..., :ne], face_values[..., ne:]), from_i)


def potentials_full(c: np.ndarray, psi_ion: np.ndarray, model: ModelSpec) -> np.ndarray:
    """mu^l = z psi + log(a^3 c) - (a/a0)^3 log phi + Born on ion vertices."""
    phi = solvent_fraction(c, model)
    if np.any(c <= 0) or np.any(phi <= 0):
        raise FloatingPointError("chemical potential outside its domain")
    a3 = model.a3
    return (
        model.z[:, None] * psi_ion[None, :]
        + np.log(a3[:, None] * c)
        - (a3 / model.a0**3)[:, None] * np.log(phi)[None, :]
        + model.born()
    )


def potentials_half(c: np.ndarray, c_n: np.ndarray, psi_ion: np.ndarray, psi_ion_n: np.ndarray, model: ModelSpec) -> np.ndarray:
    """Crank-Nicolson type mid-point chemical potential."""
    a = np.array([s.a for s in model.species])
    out = np.empty_like(c)
    for l in range(model.n_species):
        out[l] = mu_e1(c[l], c_n[l], a[l]) + mu_e2(c, c_n, l, model)
    out += 0.5 * model.z[:, None] * (psi_ion + psi_ion_n)[None, :] + model.born()
    return out


def mobilities_I(disc: Discretization, state_n: State) -> FaceMobilities:
    d = disc.ion_dual
    mu = potentials_full(state_n.c, state_n.psi[disc.ions], disc.model)
    faces = reconstruct_face_values(state_n.c, disc.stencils, disc.beta)
    return upwind(faces, mu[:, d.edge_j] - mu[:, d.edge_i])


def mobilities_II(disc: Discretization, state_n: State, state_nm1: State) -> FaceMobilities:
    d = disc.ion_dual
    mu = potentials_full(state_n.c, state_n.psi[disc.ions], disc.model)
    chat = extrapolated_concentration(state_n.c, state_nm1.c)
    faces = reconstruct_face_values(chat, disc.stencils, disc.beta)
    return upwind(faces, mu[:, d.edge_j] - mu[:, d.edge_i])


def edge_fluxes(disc: Discretization, mob: FaceMobilities, mu: np.ndarray) -> np.ndarray:
    """gamma tau mob (mu_i - mu_j): species flux from i to j on each ion edge."""
    d = disc.ion_dual
    return disc.model.gamma[:, None] * d.tau[None, :] * mob.values * (mu[:, d.edge_i] - mu[:, d.edge_j])


def dissipation_bound(disc: Discretization, mob: FaceMobilities, mu: np.ndarray, dt: float) -> float:
    """dt sum_l sum_sigma gamma tau mob |D mu|^2 over interior faces."""
    d = disc.ion_dual
    dmu = mu[:, d.edge_j] - mu[:, d.edge_i]
    return float(dt * np.sum(disc.model.gamma[:, None] * d.tau[None, :] * mob.values * dmu**2))


# ---------------------------------------------------------------------------
# residual systems


@dataclass(eq=False)
class ResidualSystem:
    """Nonlinear system F(x) = 0 for one time step (mobilities frozen)."""

    disc: Discretization
    scheme: str
    dt: float
    state_n: State
    mobilities: FaceMobilities
    model: ModelSpec  # model at t^{n+1}
    source: Optional[np.ndarray]
    state_nm1: Optional[State] = None
    _laplacians: list = field(default=None, repr=False)

    def __post_init__(self):
        d = self.disc.ion_dual
        ns = d.n_cells
        g = self.disc.model.gamma
        self._laplacians = [
            weighted_laplacian(ns, d.edge_i, d.edge_j, g[l] * d.tau * self.mobilities.values[l])
            for l in range(self.disc.n_species)
        ]
        self._fixed_c = self.model.fixed_concentrations()
        self._fixed_psi = np.zeros(self.disc.n_cells, dtype=bool)
        self._fixed_psi[self.disc.dual.dirichlet_vertices] = True
        self._load = neumann_load(self.disc.dual, self.model)
        self._rho_f_q = self.disc.dual.cell_measures * self.model.rho_f

    # layout -------------------------------------------------------------
    @property
    def n_unknowns(self) -> int:
        return self.disc.n_species * self.disc.n_ion + self.disc.n_cells

    def pack(self, c: np.ndarray, psi: np.ndarray) -> np.ndarray:
        return np.concatenate([c.ravel(), psi])

    def unpack(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        m, ns = self.disc.n_species, self.disc.n_ion
        return x[: m * ns].reshape(m, ns), x[m * ns :]

    def initial_guess(self) -> np.ndarray:
        c, psi = self.state_n.c.copy(), self.state_n.psi.copy()
        if self.state_nm1 is not None:
            cp = 2.0 * c - self.state_nm1.c
            if np.all(cp > 0) and np.all(solvent_fraction(cp, self.model) > 0):
                c = cp
                psi = 2.0 * psi - self.state_nm1.psi
        if self._fixed_c.any():
            c[:, self._fixed_c] = self.model.conc_dirichlet[:, self._fixed_c]
        psi[self._fixed_psi] = self.model.psi_dirichlet[self._fixed_psi]
        return self.pack(c, psi)

    # chemical potentials ------------------------------------------------
    def potentials(self, c: np.ndarray, psi: np.ndarray) -> np.ndarray:
        ions = self.disc.ions
        if self.scheme == SCHEME_I:
            return potentials_full(c, psi[ions], self.disc.model)
        return potentials_half(c, self.state_n.c, psi[ions], self.state_n.psi[ions], self.disc.model)

    def _potential_derivatives(self, c: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
        """(d mu_l/d c_l self part (M, Ns), steric coupling factor (Ns), psi weight)."""
        model = self.disc.model
        phi = solvent_fraction(c, model)
        if self.scheme == SCHEME_I:
            return 1.0 / c, 1.0 / (model.a0**3 * phi), 1.0
        c0 = self.state_n.c
        phi0 = solvent_fraction(c0, model)
        self_part = _taylor_factor(c0 / c) / c
        steric = _taylor_factor(phi0 / phi) / (model.a0**3 * phi)
        return self_part, steric, 0.5

    # evaluation ---------------------------------------------------------
    def residual(self, x: np.ndarray) -> np.ndarray:
        c, psi = self.unpack(x)
        disc = self.disc
        ms = disc.ion_dual.cell_measures
        mu = self.potentials(c, psi)
        rc = (c - self.state_n.c) / self.dt
        for l, lap in enumerate(self._laplacians):
            rc[l] += (lap @ mu[l]) / ms
        if self.source is not None:
            rc -= self.source
        if self._fixed_c.any():
            rc[:, self._fixed_c] = c[:, self._fixed_c] - self.model.conc_dirichlet[:, self._fixed_c]
        q = self._rho_f_q + disc.ion_charge(c)
        rp = (disc.poisson @ psi - q - self._load) / disc.dual.cell_measures
        rp[self._fixed_psi] = psi[self._fixed_psi] - self.model.psi_dirichlet[self._fixed_psi]
        return self.pack(rc, rp)

    def jacobian(self, x: np.ndarray) -> sp.csr_matrix:
        c, psi = self.unpack(x)
        disc, model = self.disc, self.disc.model
        m, ns, n = disc.n_species, disc.n_ion, disc.n_cells
        ms = disc.ion_dual.cell_measures
        self_part, steric, wpsi = self._potential_derivatives(c)
        a3 = model.a3
        inv_ms = sp.diags(1.0 / ms)
        keep_c = sp.diags((~self._fixed_c).astype(float))
        fix_c = sp.diags(self._fixed_c.astype(float))
        sel = sp.csr_matrix((np.ones(ns), (np.arange(ns), disc.ions)), shape=(ns, n))

        blocks = [[None] * (m + 1) for _ in range(m + 1)]
        for l in range(m):
            kl = inv_ms @ self._laplacians[l]
            for k in range(m):
                dmu = a3[l] * a3[k] * steric
                if k == l:
                    dmu = dmu + self_part[l]
                blk = kl @ sp.diags(dmu)
                if k == l:
                    blk = blk + sp.identity(ns) / self.dt
                blk = keep_c @ blk
                if k == l:
                    blk = blk + fix_c
                blocks[l][k] = blk
            blocks[l][m] = keep_c @ (kl @ (wpsi * model.z[l] * sel))
        keep_p = sp.diags((~self._fixed_psi).astype(float) / disc.dual.cell_measures)
        for k in range(m):
            blocks[m][k] = -(keep_p @ (sel.T @ sp.diags(model.z[k] * ms)))
        blocks[m][m] = keep_p @ disc.poisson + sp.diags(self._fixed_psi.astype(float))
        return sp.bmat(blocks, format="csc")

    def step_flux(self, c: np.ndarray, psi: np.ndarray) -> np.ndarray:
        return edge_fluxes(self.disc, self.mobilities, self.potentials(c, psi))


def assemble_scheme_I(disc: Discretization, state_n: State, dt: float) -> ResidualSystem:
    if not dt > 0:
        raise ValueError("time step must be positive")
    model, src = disc.model_at(state_n.time + dt)
    return ResidualSystem(disc, SCHEME_I, dt, state_n, mobilities_I(disc, state_n), model, src)


def assemble_scheme_II(disc: Discretization, state_n: State, state_nm1: State, dt: float) -> ResidualSystem:
    if not dt > 0:
        raise ValueError("time step must be positive")
    model, _ = disc.model_at(state_n.time + dt)
    _, src = disc.model_at(state_n.time + 0.5 * dt)
    mob = mobilities_II(disc, state_n, state_nm1)
    return ResidualSystem(disc, SCHEME_II, dt, state_n, mob, model, src, state_nm1)
