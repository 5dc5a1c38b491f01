"""Nonlinear and linear solvers.

``step`` advances one time step with a damped Newton method whose damping
keeps every concentration and the solvent fraction strictly positive.
``minimize_J_oracle`` recomputes the same step by minimising the convex
functional whose constrained critical point it is; it is meant for tiny
meshes and serves as an independent check.  ``solve_steady_pb`` computes the
discrete Poisson-Boltzmann equilibrium directly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .model import ModelSpec, State, neumann_load, solvent_fraction
from .schemes import (
    SCHEME_I,
    SCHEME_II,
    Discretization,
    FaceMobilities,
    ResidualSystem,
    assemble_scheme_I,
    assemble_scheme_II,
    dissipation_bound,
    edge_fluxes,
    potentials_full,
)

log = logging.getLogger(__name__)

DIRECT = "direct"
ITERATIVE = "iterative"
STAGNATION_FACTOR = 10.0
STAGNATION_STEP = 1e-11


class NonConvergence(RuntimeError):
    def __init__(self, message: str, residual: float = np.nan, c_min: float = np.nan):
        super().__init__(f"{message} (residual {residual:.3e}, min concentration {c_min:.3e})")
        self.residual = residual
        self.c_min = c_min


class LinearSolveFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class NewtonConfig:
    tol_residual: float = 1e-10
    max_iter: int = 50
    theta_safeguard: float = 0.95
    linear_solver: str = DIRECT
    linear_tol: float = 1e-13

    def __post_init__(self):
        if not self.tol_residual > 0:
            raise ValueError("tol_residual must be positive")
        if not 0 < self.theta_safeguard < 1:
            raise ValueError("theta_safeguard must lie in (0, 1)")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.linear_solver not in (DIRECT, ITERATIVE):
            raise ValueError(f"unknown linear solver {self.linear_solver!r}")


@dataclass(frozen=True)
class StepInfo:
    scheme: str
    dt: float
    newton_iters: int
    residual: float
    residual_history: tuple
    mobilities: FaceMobilities
    mu: np.ndarray
    flux: np.ndarray
    dissipation_bound: float


def linear_solve(a: sp.spmatrix, b: np.ndarray, cfg: NewtonConfig) -> np.ndarray:
    a = sp.csc_matrix(a)
    try:
        if cfg.linear_solver == DIRECT:
            x = spla.splu(a).solve(b)
        else:
            ilu = spla.spilu(a, drop_tol=1e-6, fill_factor=20)
            pre = spla.LinearOperator(a.shape, ilu.solve)
            x, info = spla.gmres(a, b, M=pre, rtol=cfg.linear_tol, atol=0.0, restart=200, maxiter=50)
            if info != 0:
                raise LinearSolveFailure(f"gmres did not converge (info={info})")
    except RuntimeError as exc:
        if isinstance(exc, LinearSolveFailure):
            raise
        raise LinearSolveFailure(str(exc)) from exc
    if not np.all(np.isfinite(x)):
        raise LinearSolveFailure("linear solve produced non-finite values")
    return x


def fraction_to_boundary(c: np.ndarray, dc: np.ndarray, a3: np.ndarray, theta: float) -> float:
    """min(1, theta * largest step keeping c > 0 and 1 - sum a^3 c > 0)."""
    lam = np.inf
    neg = dc < 0
    if neg.any():
        lam = min(lam, float(np.min(-c[neg] / dc[neg])))
    phi = 1.0 - np.einsum("k,kn->n", a3, c)
    dphi = -np.einsum("k,kn->n", a3, dc)
    neg = dphi < 0
    if neg.any():
        lam = min(lam, float(np.min(-phi[neg] / dphi[neg])))
    return min(1.0, theta * lam)


def newton(system: ResidualSystem, cfg: NewtonConfig) -> tuple[np.ndarray, int, list]:
    """Damped Newton iteration on ``system``; returns (x, iterations, residual norms).

    Converged means residual <= tol_residual. With badly scaled data the
    rounding noise of the residual can sit just above that tolerance; the
    iteration then also stops once the residual is within STAGNATION_FACTOR
    of it and the Newton correction is at rounding level.
    """
    a3 = system.disc.model.a3
    x = system.initial_guess()
    r = system.residual(x)
    history = [float(np.max(np.abs(r)))]
    it = 0
    while history[-1] > cfg.tol_residual:
        if it >= cfg.max_iter:
            c, _ = system.unpack(x)
            raise NonConvergence(f"Newton did not converge in {cfg.max_iter} iterations", history[-1], float(c.min()))
        dx = linear_solve(system.jacobian(x), -r, cfg)
        if (history[-1] <= STAGNATION_FACTOR * cfg.tol_residual
                and np.max(np.abs(dx)) <= STAGNATION_STEP * (1.0 + np.max(np.abs(x)))):
            log.debug("newton stagnated at residual %.3e", history[-1])
            break
        c, _ = system.unpack(x)
        dc, _ = system.unpack(dx)
        lam = fraction_to_boundary(c, dc, a3, cfg.theta_safeguard)
        norm0 = np.linalg.norm(r)
        # backtrack on the residual 2-norm; positivity is already guaranteed by lam
        for _ in range(30):
            x_new = x + lam * dx
            try:
                r_new = system.residual(x_new)
            except FloatingPointError:
                lam *= 0.5
                continue
            if np.linalg.norm(r_new) <= (1.0 - 1e-4 * lam) * norm0:
                break
            lam *= 0.5
        else:
            x_new = x + lam * dx
            r_new = system.residual(x_new)
        x, r = x_new, r_new
        it += 1
        history.append(float(np.max(np.abs(r))))
        log.debug("newton it %d residual %.3e damping %.3g", it, history[-1], lam)
    return x, it, history


def step(
    disc: Discretization,
    state_n: State,
    scheme: str,
    dt: float,
    cfg: Optional[NewtonConfig] = None,
    state_nm1: Optional[State] = None,
) -> tuple[State, StepInfo]:
    """One time step; Scheme II without a previous state is bootstrapped with Scheme I."""
    cfg = NewtonConfig() if cfg is None else cfg
    state_n.check(disc.model)
    if scheme == SCHEME_I or (scheme == SCHEME_II and state_nm1 is None):
        system = assemble_scheme_I(disc, state_n, dt)
    elif scheme == SCHEME_II:
        system = assemble_scheme_II(disc, state_n, state_nm1, dt)
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    x, iters, history = newton(system, cfg)
    c, psi = system.unpack(x)
    new = State(c.copy(), psi.copy(), state_n.time + dt)
    if np.any(c <= 0) or np.any(solvent_fraction(c, disc.model) <= 0):
        raise NonConvergence("Newton returned a non-admissible state", history[-1], float(c.min()))
    mu = system.potentials(c, psi)
    info = StepInfo(
        scheme=system.scheme,
        dt=dt,
        newton_iters=iters,
        residual=history[-1],
        residual_history=tuple(history),
        mobilities=system.mobilities,
        mu=mu,
        flux=edge_fluxes(disc, system.mobilities, mu),
        dissipation_bound=dissipation_bound(disc, system.mobilities, mu, dt),
    )
    return new, info


def solve_poisson(disc: Discretization, c: np.ndarray, model: Optional[ModelSpec] = None, cfg: Optional[NewtonConfig] = None) -> np.ndarray:
    """Potential for given concentrations (Dirichlet data imposed strongly)."""
    model = disc.model if model is None else model
    cfg = NewtonConfig() if cfg is None else cfg
    dual = disc.dual
    fixed = np.zeros(dual.n_cells, dtype=bool)
    fixed[dual.dirichlet_vertices] = True
    if not fixed.any():
        raise ValueError("pure Neumann Poisson problems are not supported; add Dirichlet potential data")
    q = dual.cell_measures * model.rho_f + disc.ion_charge(np.atleast_2d(c)) + neumann_load(dual, model)
    free = np.flatnonzero(~fixed)
    a_ff = sp.csc_matrix(disc.poisson[free][:, free])
    b = q[free] - disc.poisson[free][:, fixed] @ model.psi_dirichlet[fixed]
    psi = model.psi_dirichlet.copy()
    psi[free] = linear_solve(a_ff, b, cfg)
    return psi


# ---------------------------------------------------------------------------
# convex-functional oracle


def _entropy_density(c, c0, implicit: bool):
    """Antiderivative (in c) of the entropic chemical potential, without log(a^3)."""
    if implicit:
        return c * (np.log(c) - 1.0)
    return c * (np.log(c) - 1.0) - 2.0 * c / 3.0 + 5.0 * c0 / 6.0 * np.log(c) + c0 * c0 / (6.0 * c)


@dataclass(eq=False)
class ConvexEnergyJ:
    """Functional J = J1 + J2 + J3 + J4 whose mass-constrained minimiser is
    one step of the scheme with frozen mobilities.

    J1 entropy and steric terms, J2 electrostatic energy of the new
    potential, J3 terms linear in c (Born, old potential), J4 the
    dissipation metric (1/(2 dt)) |m (c - c^n)|^2 in the pseudo-inverse of the
    mobility-weighted Laplacian.
    """

    disc: Discretization
    state_n: State
    dt: float
    mobilities: FaceMobilities
    scheme: str = SCHEME_II

    def __post_init__(self):
        disc, model = self.disc, self.disc.model
        if model.fixed_concentrations().any():
            raise ValueError("the oracle requires zero-flux concentration boundaries")
        if disc.n_ion > 64:
            raise ValueError("the oracle is limited to meshes with at most 64 cells")
        if disc.forcing is not None:
            raise ValueError("the oracle does not handle time-dependent data")
        d = disc.ion_dual
        self.ms = d.cell_measures
        ns = d.n_cells
        self.A = []
        self.A_pinv = []
        for l in range(model.n_species):
            w = model.gamma[l] * d.tau * self.mobilities.values[l]
            a = np.zeros((ns, ns))
            np.add.at(a, (d.edge_i, d.edge_i), w)
            np.add.at(a, (d.edge_j, d.edge_j), w)
            np.add.at(a, (d.edge_i, d.edge_j), -w)
            np.add.at(a, (d.edge_j, d.edge_i), -w)
            self.A.append(a)
            self.A_pinv.append(np.linalg.pinv(a, rcond=1e-13, hermitian=True))
        # Poisson solution map psi = S q_free + psi_0 on the free vertices
        dual = disc.dual
        fixed = np.zeros(dual.n_cells, dtype=bool)
        fixed[dual.dirichlet_vertices] = True
        if not fixed.any():
            raise ValueError("the oracle needs Dirichlet potential data")
        self.free = np.flatnonzero(~fixed)
        self.fixed = np.flatnonzero(fixed)
        lap = disc.poisson.toarray()
        s = np.linalg.inv(lap[np.ix_(self.free, self.free)])
        self.S = 0.5 * (s + s.T)
        rhs0 = (dual.cell_measures * model.rho_f + neumann_load(dual, model))[self.free]
        rhs0 = rhs0 - lap[np.ix_(self.free, self.fixed)] @ model.psi_dirichlet[self.fixed]
        self.psi0 = self.S @ rhs0
        self.psi_d = model.psi_dirichlet[self.fixed]
        self.implicit = self.scheme == SCHEME_I
        self.wpsi = 1.0 if self.implicit else 0.5
        ions = disc.ions
        self.linear = model.born() + np.log(model.a3)[:, None]
        if not self.implicit:
            self.linear = self.linear + 0.5 * model.z[:, None] * self.state_n.psi[ions][None, :]
        self.masses = self.state_n.c @ self.ms

    def _charge(self, c):
        q = np.zeros(self.disc.n_cells)
        q[self.disc.ions] = self.ms * (self.disc.model.z @ c)
        return q

    def psi(self, c):
        psi = np.empty(self.disc.n_cells)
        q = self._charge(c)
        psi[self.free] = self.S @ q[self.free] + self.psi0
        psi[self.fixed] = self.psi_d
        return psi

    def J1(self, c):
        model = self.disc.model
        c0 = self.state_n.c
        phi = solvent_fraction(c, model)
        phi0 = solvent_fraction(c0, model)
        if np.any(c <= 0) or np.any(phi <= 0):
            return np.inf
        dens = _entropy_density(c, c0, self.implicit).sum(axis=0)
        dens = dens + _entropy_density(phi, phi0, self.implicit) / model.a0**3
        return float(self.ms @ dens)

    def J2(self, c):
        q = self._charge(c)
        qf = q[self.free]
        w = self.wpsi
        return float(0.5 * w * qf @ self.S @ qf + w * qf @ self.psi0 + w * q[self.fixed] @ self.psi_d)

    def J3(self, c):
        return float(np.sum(self.ms * self.linear * c))

    def J4(self, c):
        v = self.ms * (c - self.state_n.c)
        return float(sum(v[l] @ self.A_pinv[l] @ v[l] for l in range(len(v))) / (2.0 * self.dt))

    def __call__(self, c):
        j1 = self.J1(c)
        if not np.isfinite(j1):
            return np.inf
        return j1 + self.J2(c) + self.J3(c) + self.J4(c)

    def potential(self, c):
        """Gradient divided by cell measure: mu(c) + A^+ m (c - c^n) / dt."""
        model = self.disc.model
        ions = self.disc.ions
        c0 = self.state_n.c
        phi = solvent_fraction(c, model)
        phi0 = solvent_fraction(c0, model)
        if self.implicit:
            ent = np.log(c)
            ster = -np.log(phi)
        else:
            ent = np.log(c) - 2.0 / 3.0 + 5.0 * c0 / (6.0 * c) - c0**2 / (6.0 * c**2)
            ster = -np.log(phi) + 2.0 / 3.0 - 5.0 * phi0 / (6.0 * phi) + phi0**2 / (6.0 * phi**2)
        g = ent + (model.a3 / model.a0**3)[:, None] * ster[None, :] + self.linear
        g = g + self.wpsi * model.z[:, None] * self.psi(c)[ions][None, :]
        v = self.ms * (c - c0)
        for l in range(len(g)):
            g[l] += self.A_pinv[l] @ v[l] / self.dt
        return g

    def gradient(self, c):
        return self.ms * self.potential(c)

    def projected_potential(self, c):
        g = self.potential(c)
        return g - ((g @ self.ms) / self.ms.sum())[:, None]


def minimize_J_oracle(
    disc: Discretization,
    state_n: State,
    state_nm1: Optional[State],
    dt: float,
    tol: float = 1e-10,
    max_iter: int = 20000,
    theta: float = 0.95,
) -> State:
    """Scheme step computed as the minimiser of the convex functional J over
    positive, mass-preserving concentrations."""
    from .schemes import mobilities_I, mobilities_II

    if state_nm1 is None:
        scheme, mob = SCHEME_I, mobilities_I(disc, state_n)
    else:
        scheme, mob = SCHEME_II, mobilities_II(disc, state_n, state_nm1)
    J = ConvexEnergyJ(disc, state_n, dt, mob, scheme)
    a3 = disc.model.a3
    ms = J.ms
    c = state_n.c.copy()
    f = J(c)
    g = J.projected_potential(c)
    step_len = 1e-3
    it = 0
    # projected gradient with Barzilai-Borwein steps and Armijo backtracking
    while np.max(np.abs(g)) > 1e-6 and it < max_iter:
        d = -g
        t = min(step_len, _max_step(c, d, a3) * theta)
        while True:
            c_new = c + t * d
            f_new = J(c_new)
            if f_new <= f - 1e-4 * t * float(np.sum(ms * g * g)):
                break
            t *= 0.5
            if t < 1e-300:
                raise NonConvergence("oracle line search failed", float(np.max(np.abs(g))), float(c.min()))
        g_new = J.projected_potential(c_new)
        s, y = (c_new - c).ravel(), ((g_new - g) * ms).ravel()
        sy = float(s @ y)
        step_len = float(s @ (s * np.tile(ms, len(c)))) / sy if sy > 0 else 1e-3
        c, f, g = c_new, f_new, g_new
        it += 1
    # projected Newton polish using a finite-difference Hessian of the gradient
    m, ns = c.shape
    basis = _mass_free_basis(ms, m)
    for _ in range(50):
        if np.max(np.abs(g)) <= tol:
            break
        grad = J.gradient(c).ravel()
        h = 1e-7 * np.maximum(c.ravel(), 1e-12)
        hess = np.empty((m * ns, m * ns))
        for k in range(m * ns):
            e = np.zeros(m * ns)
            e[k] = h[k]
            hess[:, k] = (J.gradient(c + e.reshape(m, ns)).ravel() - J.gradient(c - e.reshape(m, ns)).ravel()) / (2 * h[k])
        hess = 0.5 * (hess + hess.T)
        hr = basis.T @ hess @ basis
        dz = np.linalg.solve(hr, -(basis.T @ grad))
        d = (basis @ dz).reshape(m, ns)
        t = min(1.0, theta * _max_step(c, d, a3))
        c = c + t * d
        g = J.projected_potential(c)
    if np.max(np.abs(g)) > tol:
        raise NonConvergence("oracle did not reach its gradient tolerance", float(np.max(np.abs(g))), float(c.min()))
    return State(c, J.psi(c), state_n.time + dt)


def _max_step(c, d, a3):
    lam = np.inf
    neg = d < 0
    if neg.any():
        lam = float(np.min(-c[neg] / d[neg]))
    phi = 1.0 - a3 @ c
    dphi = -(a3 @ d)
    neg = dphi < 0
    if neg.any():
        lam = min(lam, float(np.min(-phi[neg] / dphi[neg])))
    return lam


def _mass_free_basis(ms: np.ndarray, m: int) -> np.ndarray:
    """Orthonormal basis of {d : sum_i ms_i d_li = 0 for every l}."""
    ns = len(ms)
    q, _ = np.linalg.qr(np.column_stack([ms, np.eye(ns)[:, : ns - 1]]))
    local = q[:, 1:ns]
    return np.kron(np.eye(m), local)


# ---------------------------------------------------------------------------
# Poisson-Boltzmann equilibrium


def solve_steady_pb(
    disc: Discretization,
    mass_targets: Optional[np.ndarray] = None,
    cfg: Optional[NewtonConfig] = None,
    initial: Optional[State] = None,
) -> State:
    """Equilibrium with spatially uniform chemical potentials.

    With zero-flux walls the multipliers xi_l are fixed by the mass targets;
    with reservoir (Dirichlet) concentrations they are fixed by the reservoir
    chemical potentials, which must then agree between contacts.
    """
    cfg = NewtonConfig(max_iter=200) if cfg is None else cfg
    model = disc.model
    m, ns, n = disc.n_species, disc.n_ion, disc.n_cells
    ms = disc.ion_dual.cell_measures
    ions = disc.ions
    fixed_c = model.fixed_concentrations()
    reservoir = fixed_c.any()
    if not reservoir:
        if mass_targets is None:
            raise ValueError("mass targets are required without reservoir data")
        mass_targets = np.asarray(mass_targets, float)
        if mass_targets.shape != (m,) or np.any(mass_targets <= 0):
            raise ValueError("mass targets must be positive, one per species")
        mean = mass_targets / ms.sum()
        if model.a3 @ mean >= 1:
            raise ValueError("mass targets violate the steric bound")
    fixed_p = np.zeros(n, dtype=bool)
    fixed_p[disc.dual.dirichlet_vertices] = True
    load = neumann_load(disc.dual, model)
    qf = disc.dual.cell_measures * model.rho_f
    sel = sp.csr_matrix((np.ones(ns), (np.arange(ns), ions)), shape=(ns, n))
    a3 = model.a3
    i0 = int(np.flatnonzero(fixed_c)[0]) if reservoir else -1

    if initial is not None:
        c = initial.c.copy()
        psi = initial.psi.copy()
    else:
        if reservoir:
            mean = model.conc_dirichlet[:, fixed_c].mean(axis=1)
        c = np.repeat(mean[:, None], ns, axis=1)
        psi = solve_poisson(disc, c, model, cfg) if fixed_p.any() else np.zeros(n)
    if reservoir:
        c[:, fixed_c] = model.conc_dirichlet[:, fixed_c]
    u = np.log(c)
    xi = np.mean(potentials_full(c, psi[ions], model), axis=1)

    def residual(u, psi, xi):
        c = np.exp(u)
        mu = potentials_full(c, psi[ions], model)
        rmu = mu - xi[:, None]
        if reservoir:
            rmu[:, fixed_c] = u[:, fixed_c] - np.log(model.conc_dirichlet[:, fixed_c])
            rxi = xi - mu[:, i0]
        else:
            rxi = (c @ ms - mass_targets) / ms.sum()
        rp = (disc.poisson @ psi - qf - disc.ion_charge(c) - load) / disc.dual.cell_measures
        rp[fixed_p] = psi[fixed_p] - model.psi_dirichlet[fixed_p]
        return np.concatenate([rmu.ravel(), rp, rxi])

    def jacobian(u, psi):
        c = np.exp(u)
        phi = solvent_fraction(c, model)
        keep = sp.diags((~fixed_c).astype(float))
        fix = sp.diags(fixed_c.astype(float))
        keep_p = sp.diags((~fixed_p).astype(float) / disc.dual.cell_measures)
        blocks = [[None] * (m + 2) for _ in range(m + 2)]
        for l in range(m):
            for k in range(m):
                d = a3[l] * a3[k] * c[k] / (model.a0**3 * phi)
                if k == l:
                    d = d + 1.0
                blocks[l][k] = keep @ sp.diags(d) + (fix if k == l else sp.csr_matrix((ns, ns)))
            blocks[l][m] = keep @ (model.z[l] * sel)
            col = np.zeros((ns, m))
            col[~fixed_c, l] = -1.0
            blocks[l][m + 1] = sp.csr_matrix(col)
            blocks[m][l] = -(keep_p @ (sel.T @ sp.diags(model.z[l] * ms * c[l])))
        blocks[m][m] = keep_p @ disc.poisson + sp.diags(fixed_p.astype(float))
        blocks[m][m + 1] = sp.csr_matrix((n, m))
        rows = np.zeros((m, m * ns))
        rpsi = np.zeros((m, n))
        for l in range(m):
            if reservoir:
                for k in range(m):
                    d = a3[l] * a3[k] * c[k, i0] / (model.a0**3 * phi[i0]) + (1.0 if k == l else 0.0)
                    rows[l, k * ns + i0] = -d
                rpsi[l, ions[i0]] = -model.z[l]
            else:
                rows[l, l * ns : (l + 1) * ns] = ms * c[l] / ms.sum()
        blocks[m + 1][:m] = [sp.csr_matrix(rows[:, k * ns : (k + 1) * ns]) for k in range(m)]
        blocks[m + 1][m] = sp.csr_matrix(rpsi)
        blocks[m + 1][m + 1] = sp.identity(m) if reservoir else sp.csr_matrix((m, m))
        return sp.bmat(blocks, format="csc")

    r = residual(u, psi, xi)
    for it in range(cfg.max_iter):
        if np.max(np.abs(r)) <= cfg.tol_residual:
            break
        dx = linear_solve(jacobian(u, psi), -r, cfg)
        du = dx[: m * ns].reshape(m, ns)
        dpsi = dx[m * ns : m * ns + n]
        dxi = dx[m * ns + n :]
        lam = 1.0
        norm0 = np.linalg.norm(r)
        for _ in range(40):
            un = u + lam * du
            if np.all(solvent_fraction(np.exp(un), model) > 0):
                try:
                    rn = residual(un, psi + lam * dpsi, xi + lam * dxi)
                except FloatingPointError:
                    rn = None
                if rn is not None and np.linalg.norm(rn) <= (1.0 - 1e-4 * lam) * norm0:
                    break
            lam *= 0.5
        u, psi, xi, r = un, psi + lam * dpsi, xi + lam * dxi, rn
    else:
        raise NonConvergence("Poisson-Boltzmann Newton did not converge", float(np.max(np.abs(r))), float(np.exp(u).min()))
    if np.max(np.abs(r)) > cfg.tol_residual:
        raise NonConvergence("Poisson-Boltzmann Newton did not converge", float(np.max(np.abs(r))), float(np.exp(u).min()))
    return State(np.exp(u), psi, 0.0)
