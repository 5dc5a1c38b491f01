"""Problem generators shared by the test modules."""

import warnings

import numpy as np

from mpnp.mesh import MeshError, MeshRegularityWarning, build_dual, delaunay_mesh
from mpnp.model import State, solvent_fraction
from mpnp.scenarios import PROPERTY_SPECIES, make_discretization
from mpnp.solver import solve_poisson


def jittered_grid(rng, k=5, dim=2, amp=0.25):
    """Lattice of the unit box with interior points moved by up to amp*h."""
    axis = np.linspace(0.0, 1.0, k + 1)
    pts = np.array(np.meshgrid(*[axis] * dim, indexing="ij")).reshape(dim, -1).T
    inner = np.all((pts > 0) & (pts < 1), axis=1)
    pts[inner] += rng.uniform(-amp, amp, size=(inner.sum(), dim)) / k
    return pts


def jittered_mesh(rng, k=5, dim=2, amp=0.25):
    mesh = delaunay_mesh(jittered_grid(rng, k, dim, amp))
    return mesh, build_dual(mesh, xi=0.0)


def random_admissible(rng, disc, low=0.01, high=3.0, min_solvent=0.05):
    """Positive concentrations with solvent fraction above ``min_solvent``."""
    while True:
        c = rng.uniform(low, high, (disc.n_species, disc.n_ion))
        if np.all(solvent_fraction(c, disc.model) > min_solvent):
            return c


def four_cell_problem(rng):
    """Random 4-vertex Delaunay mesh with one Dirichlet hull face, random
    dielectric, fixed charge and boundary potential, and two random
    admissible states (t = 0 and t = 0.1) with matching potentials."""
    while True:
        pts = rng.random((4, 2))
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", MeshRegularityWarning)
                mesh = delaunay_mesh(pts, dirichlet=lambda f: np.arange(len(f)) == 0)
                disc = make_discretization(mesh, PROPERTY_SPECIES, 0.3, 0.001, 10.0, 1 + 77 * rng.random(4),
                                           rng.normal(size=4), rng.normal(size=4))
        except (MeshError, ValueError):
            continue
        if disc.ion_dual.n_edges >= 3:
            break
    c_nm1, c_n = random_admissible(rng, disc), random_admissible(rng, disc)
    s_nm1 = State(c_nm1, solve_poisson(disc, c_nm1), 0.0)
    s_n = State(c_n, solve_poisson(disc, c_n), 0.1)
    return disc, s_nm1, s_n, 10 ** rng.uniform(-2, 0)
