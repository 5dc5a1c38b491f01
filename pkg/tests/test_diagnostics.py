import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mpnp.diagnostics import (
    DiagnosticsRecord,
    DiagnosticsWriter,
    Verdict,
    atomic_write,
    check_dissipation,
    check_mass,
    check_positivity,
    columns,
    csv_text,
    detect_steady,
    field_dump_text,
    flux_balance_defect,
    fmt,
    mass_drift,
    record,
)
from mpnp.scenarios import NanoporeScenario, property2d
from mpnp.schemes import SCHEME_I, SCHEME_II
from mpnp.solver import step


def rec(F=0.0, masses=(1.0, 1.0), c_min=0.1, solvent_min=0.5, bound=0.0, resid=1.0, change=math.nan):
    return DiagnosticsRecord(0.0, F, masses, c_min, solvent_min, bound, 3, resid, change)


def test_dissipation_verdicts():
    assert check_dissipation(rec(F=1.0), rec(F=0.5, bound=0.4)) is Verdict.PASS
    assert check_dissipation(rec(F=1.0), rec(F=0.9, bound=0.4)) is Verdict.FAIL
    assert check_dissipation(rec(F=1.0), rec(F=1.0 + 1e-9)) is Verdict.FAIL
    assert check_dissipation(rec(F=1.0), rec(F=2.0), has_sources=True) is Verdict.SKIP


def test_mass_drift_is_relative_and_per_species():
    recs = [rec(masses=(1.0, 2.0)), rec(masses=(1.0 + 1e-13, 2.0)), rec(masses=(1.0, 2.0 - 4e-12))]
    np.testing.assert_allclose(mass_drift(recs), [1e-13, 2e-12], rtol=1e-3)
    assert check_mass(recs) is Verdict.FAIL
    assert check_mass(recs[:2]) is Verdict.PASS


def test_positivity_verdict():
    assert check_positivity(rec()) is Verdict.PASS
    assert check_positivity(rec(c_min=0.0)) is Verdict.FAIL
    assert check_positivity(rec(solvent_min=-1e-3)) is Verdict.FAIL


def test_steady_detection():
    assert not detect_steady([rec(change=0.0, resid=0.0)], 1e-9)
    assert detect_steady([rec(), rec(change=1e-10, resid=1e-11)], 1e-9)
    assert not detect_steady([rec(), rec(change=1e-10, resid=1e-3)], 1e-9)
    assert detect_steady([rec(), rec(change=1e-10, resid=1e-3)], 1e-9, equilibrium=False)
    assert not detect_steady([rec(), rec()], 1e-9)


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_number_format_round_trips(v):
    assert float(fmt(v)) == v


def test_integer_format():
    assert fmt(3) == "3" and fmt(np.int64(7)) == "7" and fmt(True) == "1"


def test_csv_text_is_deterministic(tmp_path):
    text = csv_text(["a", "b"], [[1, 0.1], [2, 1 / 3]])
    assert text == "a,b\n1,0.10000000000000001\n2,0.33333333333333331\n"
    atomic_write(tmp_path / "sub" / "x.csv", text)
    assert (tmp_path / "sub" / "x.csv").read_text() == text
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["x.csv"]


def test_writer_and_records_for_a_short_run(tmp_path):
    disc, s0 = property2d(n=4)
    recs = [record(disc, s0)]
    s1, info = step(disc, s0, SCHEME_I, 0.1)
    recs.append(record(disc, s1, info, s0))
    assert recs[0].dissipation_bound == 0.0 and recs[0].newton_iters == 0
    assert recs[1].state_change == pytest.approx(max(np.abs(s1.c - s0.c).max(), np.abs(s1.psi - s0.psi).max()))
    assert check_dissipation(*recs) is Verdict.PASS
    with DiagnosticsWriter(tmp_path / "d.csv", 2) as w:
        for r in recs:
            w.add(r)
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0].split(",") == columns(2)
    assert len(lines) == 3 and len(lines[1].split(",")) == len(columns(2))


def test_field_dump_marks_cells_outside_the_ion_region():
    disc, s0 = NanoporeScenario(n=(4, 4, 8), membrane=(0.75, 1.25)).build(1.0)
    lines = field_dump_text(disc, s0).splitlines()
    assert lines[0] == "# time 0"
    assert len(lines) == disc.n_cells + 2
    assert any("nan" in line for line in lines[2:])


@pytest.mark.parametrize("scheme", [SCHEME_I, SCHEME_II])
def test_flux_balance_of_a_step(scheme):
    disc, s0 = NanoporeScenario(n=(2, 2, 4), pore_half_width=0.5).build(2.0)
    s1, _ = step(disc, s0, SCHEME_I, 0.05)
    s2, info = step(disc, s1, scheme, 0.05, state_nm1=s0)
    assert flux_balance_defect(disc, s1, s2, info) <= 1e-12
    # the same flux does not balance a different update
    assert flux_balance_defect(disc, s0, s2, info) > 1e-6
