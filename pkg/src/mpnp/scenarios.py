"""Reproducible problem setups and their derived quantities.

* a manufactured smooth solution with matching sources, used for
  convergence studies of both schemes;
* the two-dimensional property run (sigmoid dielectric, four Gaussian fixed
  charges, horizontal potential drop);
* a three-dimensional nanopore between two reservoirs, with ionic currents
  through the mid-plane and rectification ratios.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterator, NamedTuple, Optional, Sequence

import numpy as np

from .mesh import SimplicialMesh, build_dual, generate_structured, reflect_mesh
from .model import ModelSpec, SpeciesSpec, State
from .schemes import SCHEME_I, SCHEME_II, Discretization, ForcingData
from .solver import LinearSolveFailure, NewtonConfig, NonConvergence, StepInfo, solve_poisson, step

log = logging.getLogger(__name__)


def _on_plane(axis: int, value: float, tol: float = 1e-12):
    return lambda x: np.abs(x[:, axis] - value) < tol


def _on_planes(axis: int, *values: float):
    preds = [_on_plane(axis, v) for v in values]
    return lambda x: np.any([p(x) for p in preds], axis=0)


# ---------------------------------------------------------------------------
# shared building blocks


def sigmoid_dielectric(x):
    """78 (15/39 + (24/39) / (1 + exp(-50|x - 1/2| + 10))): low near x = 1/2."""
    return 78.0 * (15.0 / 39.0 + (24.0 / 39.0) / (1.0 + np.exp(-50.0 * np.abs(x - 0.5) + 10.0)))


def gaussian_charges(x, y):
    """Four unit Gaussian fixed charges with alternating signs."""
    def g(a, b):
        return np.exp(-100.0 * ((x - a) ** 2 + (y - b) ** 2))

    return g(0.25, 0.25) - g(0.75, 0.25) + g(0.25, 0.75) - g(0.75, 0.75)


def make_discretization(
    mesh: SimplicialMesh,
    species: Sequence[SpeciesSpec],
    a0: float,
    kappa: float,
    chi: float,
    epsilon: np.ndarray,
    rho_f: np.ndarray,
    psi_dirichlet: np.ndarray,
    psi_neumann: Optional[np.ndarray] = None,
    beta: float = 2.0,
    forcing=None,
    ion_simplices: Optional[np.ndarray] = None,
    conc_dirichlet: Optional[Sequence[float]] = None,
) -> Discretization:
    """Assemble a :class:`Discretization`; ``psi_neumann`` defaults to zero flux.

    ``conc_dirichlet`` (one value per species) clamps concentrations on the
    Dirichlet vertices of the ion mesh.
    """
    dual = build_dual(mesh)
    if psi_neumann is None:
        psi_neumann = np.zeros(len(dual.bface_vertex))
    model = ModelSpec(tuple(species), a0, kappa, chi, epsilon, rho_f, psi_dirichlet, psi_neumann)
    disc = Discretization.build(mesh, model, beta=beta, forcing=forcing, ion_simplices=ion_simplices, dual=dual)
    if conc_dirichlet is not None:
        mask = np.zeros(disc.n_ion, dtype=bool)
        mask[disc.ion_dual.dirichlet_vertices] = True
        values = np.repeat(np.asarray(conc_dirichlet, float)[:, None], disc.n_ion, axis=1)
        disc.model = disc.model.with_data(conc_dirichlet_mask=mask, conc_dirichlet=values)
    return disc


def equilibrium_potential(disc: Discretization, c: np.ndarray) -> State:
    """Initial state: given concentrations and the matching Poisson potential."""
    c = np.asarray(c, float)
    if c.ndim == 1:
        c = np.repeat(c[:, None], disc.n_ion, axis=1)
    return State(c, solve_poisson(disc, c), 0.0)


def trajectory(
    disc: Discretization,
    state0: State,
    scheme: str,
    dt: float,
    n_steps: int,
    cfg: Optional[NewtonConfig] = None,
) -> Iterator[tuple[State, StepInfo]]:
    """Yield (state, info) after every step; Scheme II bootstraps with Scheme I."""
    prev, cur = None, state0
    for _ in range(n_steps):
        new, info = step(disc, cur, scheme, dt, cfg, state_nm1=prev if scheme == SCHEME_II else None)
        prev, cur = cur, new
        yield cur, info


# ---------------------------------------------------------------------------
# property run


PROPERTY_SPECIES = (SpeciesSpec(1, 0.1), SpeciesSpec(-1, 0.2))


def property2d(n: int = 10, kappa: float = 0.001, chi: float = 10.0, a0: float = 0.3, c_init=(0.1, 0.1), beta: float = 2.0):
    """Unit square, psi = 0 at x = 0 and 1 at x = 1, zero flux elsewhere."""
    mesh = generate_structured([0, 0], [1, 1], n, dirichlet=_on_planes(0, 0.0, 1.0))
    x, y = mesh.vertices[:, 0], mesh.vertices[:, 1]
    disc = make_discretization(
        mesh, PROPERTY_SPECIES, a0, kappa, chi, sigmoid_dielectric(x), gaussian_charges(x, y), x.copy(), beta=beta
    )
    return disc, equilibrium_potential(disc, np.asarray(c_init, float))


# ---------------------------------------------------------------------------
# manufactured solution


@dataclass(frozen=True)
class ManufacturedProblem:
    """Two species on the unit square with a separable exact solution.

    The sources below are closed-form derivatives of the exact fields; the
    self-test compares them against an independent symbolic computation.
    """

    a0: float = 0.3
    a: tuple = (0.1, 0.2)
    z: tuple = (1, -1)
    kappa: float = 1.0
    chi: float = 1.0
    gamma: tuple = (1.0, 1.0)

    @property
    def species(self):
        return tuple(SpeciesSpec(z, a, g) for z, a, g in zip(self.z, self.a, self.gamma))

    def amplitude(self, x, y, t):
        return np.exp(-t) * np.cos(np.pi * x) * np.cos(np.pi * y)

    def exact(self, x, y, t):
        """(c1, c2, psi) at the given points."""
        e = self.amplitude(x, y, t)
        return 0.1 * e + 0.2, -0.1 * e + 0.2, e / (10.0 * self.kappa * np.pi**2)

    def _fields(self, x, y, t):
        """Values, gradients and Laplacians of c1, c2, psi and 1/eps."""
        pi = np.pi
        et = np.exp(-t)
        cx, sx, cy, sy = np.cos(pi * x), np.sin(pi * x), np.cos(pi * y), np.sin(pi * y)
        e = et * cx * cy
        ex, ey = -pi * et * sx * cy, -pi * et * cx * sy
        lap_e = -2.0 * pi**2 * e
        coef = np.array([0.1, -0.1])
        c = [0.2 + k * e for k in coef]
        gc = [(k * ex, k * ey) for k in coef]
        lc = [k * lap_e for k in coef]
        kp = 1.0 / (10.0 * self.kappa * pi**2)
        psi, gpsi, lpsi = kp * e, (kp * ex, kp * ey), kp * lap_e
        dct = [-k * e for k in coef]

        # 1/eps(x) and its derivatives; the |x - 1/2| kink uses sign(0) = 0
        s = 1.0 / (1.0 + np.exp(-50.0 * np.abs(x - 0.5) + 10.0))
        sg = np.sign(x - 0.5)
        ds = 50.0 * sg * s * (1.0 - s)
        d2s = 2500.0 * sg**2 * s * (1.0 - s) * (1.0 - 2.0 * s)
        eps = 78.0 * (15.0 / 39.0 + 24.0 / 39.0 * s)
        deps = 78.0 * 24.0 / 39.0 * ds
        d2eps = 78.0 * 24.0 / 39.0 * d2s
        inv = 1.0 / eps
        dinv = -deps / eps**2
        d2inv = -d2eps / eps**2 + 2.0 * deps**2 / eps**3
        return dict(c=c, gc=gc, lc=lc, dct=dct, psi=psi, gpsi=gpsi, lpsi=lpsi, eps=eps, deps=deps, inv=inv, dinv=dinv, d2inv=d2inv)

    def sources(self, x, y, t):
        """(f1, f2, rho_f) making the exact fields solve the modified PNP system."""
        f = self._fields(x, y, t)
        a3 = np.asarray(self.a, float) ** 3
        b3 = self.a0**3
        c, gc, lc = f["c"], f["gc"], f["lc"]
        phi = 1.0 - a3[0] * c[0] - a3[1] * c[1]
        gphi = tuple(-a3[0] * gc[0][k] - a3[1] * gc[1][k] for k in range(2))
        lphi = -a3[0] * lc[0] - a3[1] * lc[1]
        gphi2 = gphi[0] ** 2 + gphi[1] ** 2
        out = []
        for l in range(2):
            zl, born = self.z[l], self.chi * self.z[l] ** 2 / self.a[l]
            w = a3[l] / b3
            gmu = (
                zl * f["gpsi"][0] + gc[l][0] / c[l] - w * gphi[0] / phi + born * f["dinv"],
                zl * f["gpsi"][1] + gc[l][1] / c[l] - w * gphi[1] / phi,
            )
            lmu = (
                zl * f["lpsi"]
                + lc[l] / c[l]
                - (gc[l][0] ** 2 + gc[l][1] ** 2) / c[l] ** 2
                - w * (lphi / phi - gphi2 / phi**2)
                + born * f["d2inv"]
            )
            div = gc[l][0] * gmu[0] + gc[l][1] * gmu[1] + c[l] * lmu
            out.append(f["dct"][l] - self.gamma[l] * div)
        div_eps_grad = f["deps"] * f["gpsi"][0] + f["eps"] * f["lpsi"]
        rho = -self.kappa * div_eps_grad - (self.z[0] * c[0] + self.z[1] * c[1])
        return out[0], out[1], rho

    def build(self, n: int, scheme: str = SCHEME_I, beta: float = 2.0) -> tuple[Discretization, State]:
        """Discretisation on an n x n right-triangle mesh and the exact initial state.

        The schemes read rho_f and the boundary potential at the new time
        level and the species sources at the level of their chemical
        potential, so the forcing is simply evaluated at the requested time.
        """
        mesh = generate_structured([0, 0], [1, 1], n, dirichlet=_on_planes(0, 0.0, 1.0))
        x, y = mesh.vertices[:, 0], mesh.vertices[:, 1]

        def forcing(t):
            f1, f2, rho = self.sources(x, y, t)
            return ForcingData(source=np.stack([f1, f2]), rho_f=rho, psi_dirichlet=self.exact(x, y, t)[2])

        c1, c2, psi = self.exact(x, y, 0.0)
        disc = make_discretization(
            mesh, self.species, self.a0, self.kappa, self.chi, sigmoid_dielectric(x),
            self.sources(x, y, 0.0)[2], psi, beta=beta, forcing=forcing,
        )
        return disc, State(np.stack([c1, c2]), psi, 0.0)

    def errors(self, disc: Discretization, state: State) -> tuple[float, float, float]:
        """Discrete l2 errors sqrt(sum m(V_i) (u_i - u(x_i))^2) of c1, c2, psi."""
        x, y = disc.mesh.vertices[:, 0], disc.mesh.vertices[:, 1]
        ex = self.exact(x, y, state.time)
        m = disc.dual.cell_measures
        got = (state.c[0], state.c[1], state.psi)
        return tuple(float(np.sqrt(np.sum(m * (g - e) ** 2))) for g, e in zip(got, ex))


@dataclass(frozen=True)
class ConvergenceRow:
    n: int
    h: float
    dt: float
    steps: int
    err_c1: float
    err_c2: float
    err_psi: float
    order_c1: float = math.nan
    order_c2: float = math.nan
    order_psi: float = math.nan


DT_H2 = "dt=h^2"
DT_H10 = "dt=h/10"


def time_step_for(rule: str, h: float) -> float:
    if rule == DT_H2:
        return h * h
    if rule == DT_H10:
        return h / 10.0
    raise ValueError(f"unknown mesh ratio rule {rule!r}")


def solve_manufactured(problem: ManufacturedProblem, n: int, scheme: str, dt: float, t_end: float, cfg=None, beta=2.0) -> tuple[Discretization, State]:
    disc, state = problem.build(n, scheme, beta)
    steps = int(round(t_end / dt))
    if steps < 1 or abs(steps * dt - t_end) > 1e-9 * t_end:
        raise ValueError(f"t_end={t_end} is not a multiple of dt={dt}")
    for state, _ in trajectory(disc, state, scheme, dt, steps, cfg):
        pass
    return disc, state


def run_convergence(
    scheme: str,
    rule: str,
    levels: Sequence[int],
    t_end: float = 0.1,
    problem: Optional[ManufacturedProblem] = None,
    cfg: Optional[NewtonConfig] = None,
    beta: float = 2.0,
    on_row: Optional[Callable[[ConvergenceRow], None]] = None,
) -> list[ConvergenceRow]:
    """l2 errors at ``t_end`` on n x n meshes (h = 1/n) and observed orders
    log2(e_h / e_{h/2}) between consecutive levels."""
    problem = ManufacturedProblem() if problem is None else problem
    if list(levels) != sorted(levels):
        raise ValueError("levels must be increasing mesh counts (decreasing h)")
    rows: list[ConvergenceRow] = []
    for n in levels:
        h = 1.0 / n
        dt = time_step_for(rule, h)
        steps = max(1, int(round(t_end / dt)))
        dt = t_end / steps
        disc, state = solve_manufactured(problem, n, scheme, dt, t_end, cfg, beta)
        errs = problem.errors(disc, state)
        if rows:
            p = rows[-1]
            prev = (p.err_c1, p.err_c2, p.err_psi)
            orders = tuple(math.log(e0 / e1) / math.log(p.h / h) for e0, e1 in zip(prev, errs))
        else:
            orders = (math.nan,) * 3
        row = ConvergenceRow(n, h, dt, steps, *errs, *orders)
        rows.append(row)
        if on_row is not None:
            on_row(row)
    return rows


def temporal_convergence(
    scheme: str,
    n: int,
    step_counts: Sequence[int],
    reference_steps: int,
    t_end: float = 0.1,
    problem: Optional[ManufacturedProblem] = None,
    cfg: Optional[NewtonConfig] = None,
) -> list[tuple[float, float, float, float]]:
    """Errors against a fine-in-time reference on one fixed mesh.

    Returns rows (dt, err_c1, err_c2, err_psi) measured in the discrete l2 norm.
    """
    problem = ManufacturedProblem() if problem is None else problem
    disc, ref = solve_manufactured(problem, n, scheme, t_end / reference_steps, t_end, cfg)
    m = disc.dual.cell_measures
    rows = []
    for k in step_counts:
        _, st = solve_manufactured(problem, n, scheme, t_end / k, t_end, cfg)
        errs = [np.sqrt(np.sum(m * (a - b) ** 2)) for a, b in ((st.c[0], ref.c[0]), (st.c[1], ref.c[1]), (st.psi, ref.psi))]
        rows.append((t_end / k, *map(float, errs)))
    return rows


def observed_orders(errors: Sequence[float], ratio: float = 2.0) -> list[float]:
    return [math.log(a / b) / math.log(ratio) for a, b in zip(errors[:-1], errors[1:])]


# ---------------------------------------------------------------------------
# nanopore


def nanopore_dielectric(z):
    """Asymmetric solvent dielectric profile along the pore axis."""
    z = np.asarray(z, float)
    upper = 78.0 * (5.0 / 39.0 + (34.0 / 39.0) / (1.0 + np.exp(-15.0 * np.abs(z - 0.62) + 7.5)))
    lower = 78.0 * (5.0 / 39.0 + (34.0 / 39.0) / (1.0 + np.exp(-200.0 * np.abs(z - 0.92) + 60.0)))
    return np.where(z >= 0.7, upper, lower)


NANOPORE_SPECIES = (SpeciesSpec(1, 0.4), SpeciesSpec(1, 0.1), SpeciesSpec(-1, 0.3))


@dataclass(frozen=True)
class NanoporeScenario:
    """Box [0,1]x[0,1]x[0,2] with a membrane slab pierced by a square pore.

    Reservoir contacts at z = 0 and z = 2 carry the potential (0 and V) and
    the bulk concentrations; all other walls are insulating and zero-flux.
    """

    n: tuple = (8, 8, 16)
    a0: float = 0.3
    kappa: float = 0.001
    chi: float = 5.0
    species: tuple = NANOPORE_SPECIES
    bulk: tuple = (0.1, 0.1, 0.2)
    # the slab covers the low-permittivity stretch of the solvent profile,
    # between its transition midpoints z = 0.62 and 1.12 (snapped to h = 1/8)
    membrane: tuple = (0.625, 1.125)
    pore_half_width: float = 0.25
    eps_membrane: float = 2.0
    symmetric_dielectric: bool = False
    beta: float = 2.0

    def mesh(self) -> SimplicialMesh:
        """Kuhn grid of the lower half mirrored in z = 1, so that the mesh
        itself carries no up/down bias."""
        nx, ny, nz = self.n
        if nz % 2:
            raise ValueError("the axial resolution must be even")
        half = generate_structured([0, 0, 0], [1, 1, 1], (nx, ny, nz // 2))
        return reflect_mesh(half, 2, 1.0, dirichlet=_on_planes(2, 0.0, 2.0))

    def solvent_simplices(self, mesh: SimplicialMesh) -> np.ndarray:
        cen = mesh.vertices[mesh.simplices].mean(axis=1)
        lo, hi = self.membrane
        in_slab = (cen[:, 2] > lo) & (cen[:, 2] < hi)
        w = self.pore_half_width
        in_pore = (np.abs(cen[:, 0] - 0.5) < w) & (np.abs(cen[:, 1] - 0.5) < w)
        return ~in_slab | in_pore

    def solvent_dielectric(self, z):
        if self.symmetric_dielectric:
            return np.full_like(np.asarray(z, float), 78.0)
        return nanopore_dielectric(z)

    def build(self, voltage: float) -> tuple[Discretization, State]:
        mesh = self.mesh()
        solvent = self.solvent_simplices(mesh)
        ion_vertices = np.unique(mesh.simplices[solvent])
        z = mesh.vertices[:, 2]
        eps = np.full(mesh.n_vertices, self.eps_membrane)
        eps[ion_vertices] = self.solvent_dielectric(z[ion_vertices])
        psi_d = np.where(z > 1.0, voltage, 0.0)
        disc = make_discretization(
            mesh,
            self.species,
            self.a0,
            self.kappa,
            self.chi,
            eps,
            np.zeros(mesh.n_vertices),
            psi_d,
            beta=self.beta,
            ion_simplices=solvent,
            conc_dirichlet=self.bulk,
        )
        return disc, equilibrium_potential(disc, np.asarray(self.bulk, float))

    def cross_section(self, disc: Discretization, plane: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
        """Ion-mesh edges cut by the plane (lower endpoint below, upper on or above)
        and their orientation (+1 when edge_i is the lower endpoint)."""
        z = disc.ion_dual.points[:, 2]
        zi, zj = z[disc.ion_dual.edge_i], z[disc.ion_dual.edge_j]
        up = (zi < plane) & (zj >= plane)
        down = (zj < plane) & (zi >= plane)
        edges = np.flatnonzero(up | down)
        if not edges.size:
            raise ValueError("the cross-section does not cut any ion edge")
        return edges, np.where(up[edges], 1.0, -1.0)

    def steady_state(self, voltage: float, **kw) -> tuple[Discretization, SteadyResult]:
        disc, state = self.build(voltage)
        return disc, relax_to_steady(disc, state, **kw)

    def iv_curve(self, voltages: Sequence[float], on_point=None, **kw) -> dict:
        """Steady currents {V: (I^1, ..., I^M)}."""
        out = {}
        for v in voltages:
            disc, res = self.steady_state(v, **kw)
            out[float(v)] = tuple(ionic_current(disc, res.info.flux, self.cross_section(disc)))
            if on_point is not None:
                on_point(float(v), out[float(v)])
        return out


class SteadyResult(NamedTuple):
    state: State
    info: StepInfo  # the last step, ending at ``state``
    previous: State  # the state that step started from
    steps: int


def relax_to_steady(
    disc: Discretization,
    state: State,
    dt0: float = 0.01,
    growth: float = 2.0,
    dt_max: float = 0.1,
    tol: float = 1e-9,
    max_steps: int = 2000,
    cfg: Optional[NewtonConfig] = None,
    window: int = 30,
) -> SteadyResult:
    """Pseudo-time continuation with Scheme I until the per-step change of
    (c, psi) falls below ``tol`` (infinity norm).

    Steps grow geometrically up to ``dt_max``. With the upwind direction
    lagged by one step, very long steps can lock into a periodic orbit
    instead of settling; if the change has not halved over ``window`` steps
    the cap is halved. A step that fails to converge is retried at a quarter
    of its size.
    """
    dt = dt0
    info = None
    change = math.inf
    best, since_best = math.inf, 0
    for k in range(1, max_steps + 1):
        try:
            new, info = step(disc, state, SCHEME_I, dt, cfg)
        except (NonConvergence, LinearSolveFailure):
            if dt < 1e-8:
                raise
            dt *= 0.25
            continue
        change = max(float(np.max(np.abs(new.c - state.c))), float(np.max(np.abs(new.psi - state.psi))))
        previous, state = state, new
        log.debug("pseudo-time dt=%.3g change=%.3e newton=%d", dt, change, info.newton_iters)
        if change <= tol:
            return SteadyResult(state, info, previous, k)
        if change < 0.5 * best:
            best, since_best = change, 0
        else:
            since_best += 1
            if since_best >= window and dt >= dt_max:
                dt_max *= 0.5
                best, since_best = change, 0
                log.debug("pseudo-time stagnated, step cap lowered to %.3g", dt_max)
        dt = min(dt * growth, dt_max)
    raise NonConvergence("pseudo-time continuation did not reach a steady state", change, float(state.c.min()))


def ionic_current(disc: Discretization, flux: np.ndarray, section: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    """Species currents through a cross-section, positive along +z.

    ``flux`` is the per-edge species flux from edge_i to edge_j as used by
    the scheme; the current is its oriented sum over the cut edges.
    """
    edges, sign = section
    if not len(edges):
        raise ValueError("empty cross-section")
    return flux[:, edges] @ sign


def rectification_ratio(currents: dict, species: int) -> dict:
    """r(V) = |I(-V) / I(V)| for every V > 0 with both polarities present."""
    out = {}
    for v in sorted(k for k in currents if k > 0):
        if -v not in currents:
            continue
        denom = currents[v][species]
        out[v] = math.nan if denom == 0 else abs(currents[-v][species] / denom)
    return out
