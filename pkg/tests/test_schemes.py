import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mpnp.model import State, solvent_fraction
from mpnp.scenarios import ManufacturedProblem, NanoporeScenario, property2d
from mpnp.schemes import (
    SCHEME_I,
    SCHEME_II,
    FaceMobilities,
    assemble_scheme_I,
    assemble_scheme_II,
    extrapolated_concentration,
    mobilities_I,
    mu_e1,
    mu_e2,
    potentials_full,
    potentials_half,
    upwind,
    upwind_mobility_I,
)
from mpnp.solver import step

pos = st.floats(1e-6, 50.0)
PROPERTY_MODEL = property2d(n=2)[0].model


def entropy(c, a):
    return c * (np.log(a**3 * c) - 1.0)


@given(pos, pos, st.floats(0.05, 0.5))
def test_mu_e1_bounds_the_entropy_increment(c, c0, a):
    lhs = entropy(c, a) - entropy(c0, a)
    rhs = (c - c0) * mu_e1(c, c0, a)
    assert lhs <= rhs + 1e-12 * (1 + abs(lhs) + abs(rhs))


@settings(max_examples=200)
@given(st.lists(st.floats(1e-4, 1.0), min_size=4, max_size=4), st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_mu_e2_bounds_the_solvent_entropy_increment(raw, s1, s2):
    model = PROPERTY_MODEL
    c = np.array(raw).reshape(2, 2)
    # scale each column pair so that the solvent fractions hit s1 and s2
    c_new = c[:, :1] * (1 - s1) / (model.a3 @ c[:, :1])
    c_old = c[:, 1:] * (1 - s2) / (model.a3 @ c[:, 1:])
    phi, phi0 = solvent_fraction(c_new, model), solvent_fraction(c_old, model)

    def k(p):
        return p / model.a0**3 * (np.log(p) - 1.0)

    lhs = float(k(phi[0]) - k(phi0[0]))
    rhs = float(sum((c_new[l, 0] - c_old[l, 0]) * mu_e2(c_new, c_old, l, model)[0] for l in range(2)))
    assert lhs <= rhs + 1e-12 * (1 + abs(lhs) + abs(rhs))


def test_surrogates_reduce_to_the_exact_potential_at_fixed_points():
    disc, state = property2d(n=3)
    psi = state.psi[disc.ions]
    full = potentials_full(state.c, psi, disc.model)
    half = potentials_half(state.c, state.c, psi, psi, disc.model)
    np.testing.assert_allclose(half, full, atol=1e-13)


@given(st.floats(-0.5, 0.5))
def test_mu_e1_is_second_order_accurate_at_the_midpoint(s):
    c0, a = 0.3, 0.2
    for k, dt in enumerate((1e-2, 5e-3)):
        c1 = c0 * np.exp(s * dt)
        mid = np.log(a**3 * c0 * np.exp(0.5 * s * dt))
        err = abs(mu_e1(c1, c0, a) - mid)
        if k == 0:
            first = err
    assert err <= first / 4 * 1.05 + 1e-15


@given(pos, pos)
def test_extrapolation_is_positive_and_linear_when_admissible(c_n, c_nm1):
    e = extrapolated_concentration(c_n, c_nm1)
    assert e > 0
    if 3 * c_n > c_nm1:
        assert e == pytest.approx(1.5 * c_n - 0.5 * c_nm1)


def test_upwind_selects_the_side_the_flux_comes_from():
    faces = np.array([[1.0, 2.0, 3.0, 10.0, 20.0, 30.0]])
    dmu = np.array([[-1.0, 0.0, 2.0]])
    mob = upwind(faces, dmu)
    np.testing.assert_array_equal(mob.values, [[1.0, 20.0, 30.0]])
    np.testing.assert_array_equal(mob.from_i, [[True, False, False]])
    with pytest.raises(FloatingPointError):
        FaceMobilities(np.array([[1.0, 0.0]]), np.array([[True, True]]))


def test_scalar_and_vector_upwind_mobilities_agree():
    disc, state = property2d(n=4)
    mob = mobilities_I(disc, state)
    mu = potentials_full(state.c, state.psi[disc.ions], disc.model)
    for e in range(0, disc.ion_dual.n_edges, 5):
        for l in range(2):
            assert upwind_mobility_I(state.c, mu, e, l, disc) == mob.values[l, e]


def perturbed(state, disc, seed, amp=0.05):
    rng = np.random.default_rng(seed)
    c = state.c * (1 + amp * rng.uniform(-1, 1, state.c.shape))
    return State(c, state.psi + amp * rng.normal(size=state.psi.shape), state.time)


def check_jacobian(system, x, seed=0):
    rng = np.random.default_rng(seed)
    jac = system.jacobian(x)
    for _ in range(3):
        v = rng.normal(size=x.shape)
        c, _ = system.unpack(x)
        h = 1e-6 * min(1.0, float(c.min()))
        fd = (system.residual(x + h * v) - system.residual(x - h * v)) / (2 * h)
        np.testing.assert_allclose(jac @ v, fd, rtol=1e-5, atol=1e-5 * np.max(np.abs(fd)))


@pytest.mark.parametrize("scheme", [SCHEME_I, SCHEME_II])
def test_jacobian_matches_finite_differences(scheme):
    disc, s0 = property2d(n=5)
    s1, _ = step(disc, s0, SCHEME_I, 0.05)
    sys = assemble_scheme_I(disc, s1, 0.1) if scheme == SCHEME_I else assemble_scheme_II(disc, s1, s0, 0.1)
    x = sys.pack(*(lambda s: (s.c, s.psi))(perturbed(s1, disc, 3)))
    check_jacobian(sys, x)


def test_jacobian_with_sources_and_reservoir_contacts():
    disc, s0 = ManufacturedProblem().build(6, SCHEME_II)
    s1, _ = step(disc, s0, SCHEME_I, 0.01)
    sys = assemble_scheme_II(disc, s1, s0, 0.01)
    check_jacobian(sys, sys.pack(s1.c * 1.01, s1.psi))

    disc, s0 = NanoporeScenario(n=(2, 2, 4), pore_half_width=0.5).build(1.0)
    sys = assemble_scheme_I(disc, s0, 0.1)
    p = perturbed(s0, disc, 5, amp=0.02)
    check_jacobian(sys, sys.pack(p.c, p.psi))


def test_residual_rows_conserve_mass():
    disc, s0 = property2d(n=5)
    sys = assemble_scheme_II(disc, s0, perturbed(s0, disc, 1), 0.1)
    p = perturbed(s0, disc, 2)
    r, _ = sys.unpack(sys.residual(sys.pack(p.c, p.psi)))
    ms = disc.ion_dual.cell_measures
    # the flux part sums to zero, leaving only the discrete time derivative
    np.testing.assert_allclose(r @ ms, ((p.c - s0.c) / 0.1) @ ms, atol=1e-12)


def test_linear_predictor_is_used_only_when_admissible():
    disc, s0 = property2d(n=3)
    s1 = State(s0.c * 1.1, s0.psi, 0.1)
    sys = assemble_scheme_II(disc, s1, s0, 0.1)
    c, _ = sys.unpack(sys.initial_guess())
    np.testing.assert_allclose(c, 2 * s1.c - s0.c)
    far = State(s0.c * 4.0, s0.psi, -0.1)
    sys = assemble_scheme_II(disc, s1, far, 0.1)
    c, _ = sys.unpack(sys.initial_guess())
    np.testing.assert_allclose(c, s1.c)


def test_time_steps_must_be_positive():
    disc, s0 = property2d(n=2)
    with pytest.raises(ValueError):
        assemble_scheme_I(disc, s0, 0.0)
    with pytest.raises(ValueError):
        assemble_scheme_II(disc, s0, s0, -1.0)
