import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mpnp.mesh import build_dual, generate_structured
from mpnp.model import (
    ModelSpec,
    SpeciesSpec,
    State,
    chemical_potential,
    discrete_energy,
    edge_dielectric,
    harmonic_mean,
    neumann_load,
    poisson_matrix,
    solvent_concentration,
    solvent_fraction,
)

SPECIES = (SpeciesSpec(1, 0.4), SpeciesSpec(-1, 0.3), SpeciesSpec(2, 0.2))


def small_model(n=3, chi=2.0, seed=0):
    mesh = generate_structured([0, 0], [1, 1], n, dirichlet=lambda c: np.isclose(c[:, 0], 0))
    dual = build_dual(mesh)
    rng = np.random.default_rng(seed)
    nv = mesh.n_vertices
    model = ModelSpec(SPECIES, 0.3, 0.5, chi, rng.uniform(2, 80, nv), rng.normal(size=nv),
                      np.zeros(nv), np.zeros(len(dual.bface_vertex)))
    return dual, model


def local_free_energy(c, model):
    """Per-cell entropy + Born density; its gradient is the non-electrostatic part of mu."""
    a3 = model.a3
    phi = 1.0 - a3 @ c
    return (np.sum(c * (np.log(a3[:, None] * c) - 1.0), axis=0)
            + phi / model.a0**3 * (np.log(phi) - 1.0) + np.sum(model.born() * c, axis=0))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_chemical_potential_is_the_energy_gradient(seed):
    dual, model = small_model(seed=seed % 1000)
    rng = np.random.default_rng(seed)
    c = rng.uniform(0.01, 1.0, (3, dual.n_cells))
    c *= rng.uniform(0.05, 0.95) / np.max(model.a3 @ c)
    mu = chemical_potential(State(c, np.zeros(dual.n_cells)), model)
    h = 1e-6 * c
    for l in range(3):
        e = np.zeros_like(c)
        e[l] = h[l]
        fd = (local_free_energy(c + e, model) - local_free_energy(c - e, model)) / (2 * h[l])
        np.testing.assert_allclose(mu[l], fd, rtol=1e-6, atol=1e-6)


def test_chemical_potential_includes_valence_times_potential():
    dual, model = small_model()
    c = np.full((3, dual.n_cells), 0.2)
    psi = np.linspace(-1, 1, dual.n_cells)
    base = chemical_potential(State(c, np.zeros_like(psi)), model)
    shifted = chemical_potential(State(c, psi), model)
    np.testing.assert_allclose(shifted - base, model.z[:, None] * psi[None, :], atol=1e-14)
    assert chemical_potential(State(c, psi), model, species=1, cell=2) == pytest.approx(shifted[1, 2])


def test_born_potential_vanishes_for_unit_dielectric():
    dual, model = small_model()
    model = model.with_data(epsilon=np.ones(dual.n_cells))
    np.testing.assert_array_equal(model.born(), 0.0)


def test_solvent_fraction_and_concentration():
    dual, model = small_model()
    c = np.full((3, dual.n_cells), 1.0)
    phi = solvent_fraction(c, model)
    np.testing.assert_allclose(phi, 1 - (0.4**3 + 0.3**3 + 0.2**3))
    state = State(c, np.zeros(dual.n_cells))
    np.testing.assert_allclose(solvent_concentration(state, model), phi / 0.3**3)


def test_state_check_rejects_inadmissible_states():
    dual, model = small_model()
    n = dual.n_cells
    with pytest.raises(ValueError):
        State(np.full((3, n), -0.1), np.zeros(n)).check(model)
    with pytest.raises(ValueError):
        State(np.full((3, n), 20.0), np.zeros(n)).check(model)
    with pytest.raises(FloatingPointError):
        chemical_potential(State(np.full((3, n), 20.0), np.zeros(n)), model)


@pytest.mark.parametrize("kw", [dict(a0=0.0), dict(kappa=-1.0), dict(chi=-1.0)])
def test_model_rejects_bad_parameters(kw):
    dual, model = small_model()
    with pytest.raises(ValueError):
        model.with_data(**kw)


def test_species_validation():
    with pytest.raises(ValueError):
        SpeciesSpec(1, 0.0)
    with pytest.raises(ValueError):
        SpeciesSpec(1, 0.1, gamma=0.0)


def test_poisson_matrix_is_a_symmetric_laplacian():
    dual, model = small_model()
    a = poisson_matrix(dual, model).toarray()
    np.testing.assert_allclose(a, a.T)
    np.testing.assert_allclose(a.sum(axis=1), 0.0, atol=1e-12)
    assert np.all(np.linalg.eigvalsh(a) > -1e-12)


@given(st.floats(0.1, 100), st.floats(0.1, 100))
def test_harmonic_mean_bounds(a, b):
    h = harmonic_mean(a, b)
    assert min(a, b) * (1 - 1e-12) <= h <= max(a, b) * (1 + 1e-12)
    assert h <= 0.5 * (a + b) * (1 + 1e-12)


def test_edge_dielectric_on_boundary_faces_uses_the_cell_value():
    dual, model = small_model()
    k = dual.n_edges + 3
    assert edge_dielectric(model.epsilon, dual, k) == model.epsilon[dual.bface_vertex[3]]
    np.testing.assert_allclose(edge_dielectric(model.epsilon, dual)[5], edge_dielectric(model.epsilon, dual, 5))


def test_electrostatic_energy_of_a_poisson_solution_is_a_quadratic_form():
    dual, model = small_model(chi=0.0)
    model = model.with_data(epsilon=np.full(dual.n_cells, 3.0))
    n = dual.n_cells
    c = np.full((3, n), 0.3)
    a = poisson_matrix(dual, model).tolil()
    q = dual.cell_measures * (model.rho_f + model.z @ c)
    fixed = dual.dirichlet_vertices
    rhs = q.copy()
    for i in fixed:
        a.rows[i], a.data[i] = [i], [1.0]
        rhs[i] = 0.0
    psi = np.linalg.solve(a.toarray(), rhs)
    state = State(c, psi)
    lap = poisson_matrix(dual, model)
    elec = discrete_energy(state, dual, model) - discrete_energy(State(c, np.zeros(n)), dual, model)
    assert elec == pytest.approx(0.5 * psi @ (lap @ psi), rel=1e-10)
    assert elec > 0


def test_neumann_load_ignores_dirichlet_faces():
    dual, model = small_model()
    model = model.with_data(psi_neumann=np.ones(len(dual.bface_vertex)))
    load = neumann_load(dual, model)
    assert load.sum() == pytest.approx(3.0)
    assert np.all(load[dual.dirichlet_vertices] <= 0.5 / 3 + 1e-12)
