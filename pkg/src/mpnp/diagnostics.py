"""Per-step diagnostics: energy, masses, positivity, dissipation, steadiness.

Records are streamed to ``diagnostics.csv`` with a fixed column order and
17 significant digits, so identical runs give byte-identical files.
"""

from __future__ import annotations

import enum
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .model import State, chemical_potential, discrete_energy, solvent_fraction
from .schemes import Discretization
from .solver import StepInfo

DISSIPATION_SLACK = 1e-10
MASS_RTOL = 1e-12


class Verdict(enum.Enum):
    PASS = "pass"
    FAIL = "fail"
    SKIP = "skip"


@dataclass(frozen=True)
class DiagnosticsRecord:
    time: float
    F: float
    masses: tuple
    c_min: float
    solvent_min: float
    dissipation_bound: float
    newton_iters: int
    steady_residual: float
    state_change: float = math.nan  # infinity norm of the change over the step (not exported)

    def row(self) -> list:
        return [self.time, self.F, *self.masses, self.c_min, self.solvent_min,
                self.dissipation_bound, self.newton_iters, self.steady_residual]


def columns(n_species: int) -> list[str]:
    return ["time", "F", *[f"mass_{l + 1}" for l in range(n_species)], "c_min", "solvent_min",
            "dissipation_bound", "newton_iters", "steady_residual"]


def record(
    disc: Discretization,
    state: State,
    info: Optional[StepInfo] = None,
    previous: Optional[State] = None,
) -> DiagnosticsRecord:
    """Diagnostics of ``state``; ``info`` is the step that produced it (absent
    for the initial state, where the dissipation bound is reported as 0)."""
    model, t = disc.model_at(state.time)[0], state.time
    ms = disc.ion_dual.cell_measures
    mu = chemical_potential(state, model)
    change = math.nan
    if previous is not None:
        change = max(float(np.max(np.abs(state.c - previous.c))), float(np.max(np.abs(state.psi - previous.psi))))
    return DiagnosticsRecord(
        time=t,
        F=discrete_energy(state, disc.dual, model, disc.ion_dual),
        masses=tuple(float(v) for v in state.c @ ms),
        c_min=float(state.c.min()),
        solvent_min=float(solvent_fraction(state.c, model).min()),
        dissipation_bound=0.0 if info is None else float(info.dissipation_bound),
        newton_iters=0 if info is None else int(info.newton_iters),
        steady_residual=float(np.max(np.ptp(mu, axis=1))),
        state_change=change,
    )


def check_dissipation(prev: DiagnosticsRecord, curr: DiagnosticsRecord, has_sources: bool = False,
                      slack: float = DISSIPATION_SLACK) -> Verdict:
    """PASS iff F^{n+1} - F^n <= -bound + slack and F^{n+1} <= F^n + slack.

    Runs with sources or time-dependent data are outside the dissipation law
    and give SKIP.
    """
    if has_sources:
        return Verdict.SKIP
    diff = curr.F - prev.F
    ok = diff <= -curr.dissipation_bound + slack and diff <= slack
    return Verdict.PASS if ok else Verdict.FAIL


def mass_drift(records: Sequence[DiagnosticsRecord]) -> np.ndarray:
    """Largest relative deviation of each species mass from its initial value."""
    m = np.array([r.masses for r in records])
    return np.max(np.abs(m - m[0]), axis=0) / np.abs(m[0])


def check_mass(records: Sequence[DiagnosticsRecord], rtol: float = MASS_RTOL) -> Verdict:
    return Verdict.PASS if np.all(mass_drift(records) <= rtol) else Verdict.FAIL


def check_positivity(rec: DiagnosticsRecord) -> Verdict:
    return Verdict.PASS if rec.c_min > 0 and rec.solvent_min > 0 else Verdict.FAIL


def detect_steady(history: Sequence[DiagnosticsRecord], tol: float, equilibrium: bool = True) -> bool:
    """True iff the last step changed the state by at most ``tol`` and, for
    equilibrium problems, every chemical potential is uniform to ``tol``."""
    if len(history) < 2:
        return False
    last = history[-1]
    if not last.state_change <= tol:
        return False
    return last.steady_residual <= tol if equilibrium else True


def flux_balance_defect(disc: Discretization, before: State, after: State, info: StepInfo) -> float:
    """Largest |m_i (c_i^{n+1} - c_i^n) + dt * (net outflow of cell i)| over
    ion cells whose concentration is not prescribed; sources are not allowed."""
    d = disc.ion_dual
    ns = disc.n_ion
    out = np.zeros((disc.n_species, ns))
    for l in range(disc.n_species):
        out[l] = (np.bincount(d.edge_i, info.flux[l], minlength=ns)
                  - np.bincount(d.edge_j, info.flux[l], minlength=ns))
    defect = d.cell_measures * (after.c - before.c) + info.dt * out
    free = ~disc.model.fixed_concentrations()
    return float(np.max(np.abs(defect[:, free]), initial=0.0))


# ---------------------------------------------------------------------------
# output


def fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return f"{float(v):.17g}"


def atomic_write(path, text: str) -> None:
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    lines = [",".join(header)]
    lines.extend(",".join(fmt(v) for v in row) for row in rows)
    return "\n".join(lines) + "\n"


class DiagnosticsWriter:
    """Collects records and writes ``diagnostics.csv`` atomically on close."""

    def __init__(self, path, n_species: int):
        self.path = Path(path)
        self.header = columns(n_species)
        self.rows: list[list] = []

    def add(self, rec: DiagnosticsRecord) -> None:
        self.rows.append(rec.row())

    def close(self) -> None:
        atomic_write(self.path, csv_text(self.header, self.rows))

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def field_dump_text(disc: Discretization, state: State) -> str:
    """Per-vertex values: id, coordinates, c^1..c^M (nan off the ion region), psi."""
    n, m = disc.n_cells, disc.n_species
    c = np.full((m, n), np.nan)
    c[:, disc.ions] = state.c
    coords = "xyz"[: disc.mesh.dim]
    header = ["cell", *coords, *[f"c{l + 1}" for l in range(m)], "psi"]
    rows = []
    for i in range(n):
        rows.append([i, *disc.mesh.vertices[i], *c[:, i], state.psi[i]])
    return f"# time {fmt(state.time)}\n" + csv_text(header, rows).replace(",", " ")


def write_field_dump(path, disc: Discretization, state: State) -> None:
    atomic_write(path, field_dump_text(disc, state))
