"""Command-line front end.

    mpnp run         --config sim.json   [--out-dir DIR] [--assert on|off]
    mpnp convergence --config conv.json  [--out-dir DIR]
    mpnp iv          --config pore.json  [--out-dir DIR] [--threads N]
    mpnp steady      --config sim.json   [--out-dir DIR]

Exit codes: 0 success, 2 configuration error, 3 solver failure,
4 a requested check failed.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, ConvergenceConfig, NanoporeConfig, SimulationConfig, load_config
from .diagnostics import (
    DiagnosticsWriter,
    Verdict,
    atomic_write,
    check_dissipation,
    check_positivity,
    csv_text,
    mass_drift,
    record,
    write_field_dump,
)
from .solver import LinearSolveFailure, NonConvergence

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_ASSERT = 4

log = logging.getLogger("mpnp")


class AssertionFailure(Exception):
    pass


def _expect(cfg, kind, name):
    if not isinstance(cfg, kind):
        raise ConfigError(f"the {name} command needs a config of kind {kind.__name__.replace('Config', '').lower()!r}")
    return cfg


# ---------------------------------------------------------------------------
# run


def cmd_run(cfg: SimulationConfig, out_dir: Path, check: bool) -> int:
    from .scenarios import trajectory

    disc, state = cfg.build()
    failures = []
    records = [record(disc, state)]
    with DiagnosticsWriter(out_dir / "diagnostics.csv", disc.n_species) as writer:
        writer.add(records[0])
        prev = state
        for k, (state, info) in enumerate(trajectory(disc, state, cfg.scheme, cfg.dt, cfg.n_steps, cfg.newton), start=1):
            rec = record(disc, state, info, prev)
            writer.add(rec)
            if cfg.assertions["energy"] and check_dissipation(records[-1], rec) is Verdict.FAIL:
                failures.append(f"step {k}: energy change {rec.F - records[-1].F:.3e} exceeds -{rec.dissipation_bound:.3e}")
            if cfg.assertions["positivity"] and check_positivity(rec) is Verdict.FAIL:
                failures.append(f"step {k}: non-positive concentration or solvent fraction")
            records.append(rec)
            prev = state
            if cfg.field_dump_every and k % cfg.field_dump_every == 0:
                write_field_dump(out_dir / f"fields_{k:06d}.txt", disc, state)
    write_field_dump(out_dir / "fields_final.txt", disc, state)
    if cfg.assertions["mass"]:
        drift = mass_drift(records)
        if np.any(drift > 1e-12):
            failures.append(f"relative mass drift {drift.max():.3e} exceeds 1e-12")
    last = records[-1]
    print(f"t={last.time:.6g} F={last.F:.12g} c_min={last.c_min:.6g} solvent_min={last.solvent_min:.6g} "
          f"max mass drift={mass_drift(records).max():.3e}")
    if check and failures:
        for f in failures[:20]:
            print(f"CHECK FAILED: {f}", file=sys.stderr)
        raise AssertionFailure(f"{len(failures)} check(s) failed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# convergence


def _fmt_order(v):
    return "-" if math.isnan(v) else f"{v:.3f}"


def cmd_convergence(cfg: ConvergenceConfig, out_dir: Path, check: bool) -> int:
    from .scenarios import observed_orders, run_convergence, temporal_convergence

    print(f"{'n':>5} {'dt':>12} {'err_c1':>12} {'err_c2':>12} {'err_psi':>12} {'p_c1':>7} {'p_c2':>7} {'p_psi':>7}")

    def show(r):
        print(f"{r.n:5d} {r.dt:12.5e} {r.err_c1:12.5e} {r.err_c2:12.5e} {r.err_psi:12.5e} "
              f"{_fmt_order(r.order_c1):>7} {_fmt_order(r.order_c2):>7} {_fmt_order(r.order_psi):>7}", flush=True)

    rows = run_convergence(cfg.scheme, cfg.rule, cfg.levels, cfg.t_end, cfg=cfg.newton, beta=cfg.beta, on_row=show)
    header = ["n", "h", "dt", "steps", "err_c1", "err_c2", "err_psi", "order_c1", "order_c2", "order_psi"]
    atomic_write(out_dir / "convergence.csv", csv_text(header, [
        [r.n, r.h, r.dt, r.steps, r.err_c1, r.err_c2, r.err_psi, r.order_c1, r.order_c2, r.order_psi] for r in rows]))
    failures = []
    if len(rows) >= 2:
        last = rows[-1]
        for name, p in (("c1", last.order_c1), ("c2", last.order_c2), ("psi", last.order_psi)):
            if not p >= cfg.min_order:
                failures.append(f"observed order of {name} is {p:.3f} < {cfg.min_order}")
    if cfg.temporal is not None:
        t = cfg.temporal
        trows = temporal_convergence(cfg.scheme, t["n"], t["steps"], t["reference_steps"], cfg.t_end, cfg=cfg.newton)
        orders = [observed_orders([r[k] for r in trows]) for k in (1, 2, 3)]
        out = []
        for i, r in enumerate(trows):
            o = [math.nan if i == 0 else orders[k][i - 1] for k in range(3)]
            out.append([*r, *o])
            print(f"temporal dt={r[0]:.5e} errors {r[1]:.4e} {r[2]:.4e} {r[3]:.4e} orders "
                  + " ".join(_fmt_order(v) for v in o))
        atomic_write(out_dir / "temporal_convergence.csv", csv_text(
            ["dt", "err_c1", "err_c2", "err_psi", "order_c1", "order_c2", "order_psi"], out))
        if len(trows) >= 2:
            for name, k in (("c1", 0), ("c2", 1), ("psi", 2)):
                if not orders[k][-1] >= cfg.min_order:
                    failures.append(f"temporal order of {name} is {orders[k][-1]:.3f} < {cfg.min_order}")
    if check and failures:
        for f in failures:
            print(f"CHECK FAILED: {f}", file=sys.stderr)
        raise AssertionFailure("convergence orders below threshold")
    return EXIT_OK


# ---------------------------------------------------------------------------
# iv


FLUX_BALANCE_TOL = 1e-12
SYMMETRY_TOL = 1e-6


def _iv_point(args):
    scenario, voltage, steady, newton = args
    from .diagnostics import flux_balance_defect
    from .scenarios import ionic_current, relax_to_steady

    disc, state = scenario.build(voltage)
    res = relax_to_steady(disc, state, cfg=newton, **steady)
    currents = ionic_current(disc, res.info.flux, scenario.cross_section(disc))
    defect = flux_balance_defect(disc, res.previous, res.state, res.info)
    log.info("V=%g: steady after %d steps, flux balance defect %.2e", voltage, res.steps, defect)
    return voltage, tuple(float(v) for v in currents), float(res.state.c.min()), defect


def iv_failures(cfg: NanoporeConfig, results) -> list[str]:
    """Messages for every enabled nanopore check that fails."""
    from .scenarios import rectification_ratio

    checks = cfg.checks
    currents = {v: cur for v, cur, _, _ in results}
    failures = []
    for v, cur, cmin, defect in results:
        if not cmin > 0:
            failures.append(f"V={v:g}: non-positive concentration")
        if not all(math.isfinite(x) for x in cur):
            failures.append(f"V={v:g}: non-finite current")
        if checks["flux_balance"] and not defect <= FLUX_BALANCE_TOL:
            failures.append(f"V={v:g}: cell flux balance defect {defect:.3e}")
        if checks["selectivity"] and v != 0 and not abs(cur[0]) > abs(cur[1]):
            failures.append(f"V={v:g}: |I1| = {abs(cur[0]):.4e} does not exceed |I2| = {abs(cur[1]):.4e}")
    if checks["rectification"] is not None:
        r1, r2 = rectification_ratio(currents, 0), rectification_ratio(currents, 1)
        if not r1:
            failures.append("rectification check needs voltages of both signs")
        for v in sorted(r1):
            a, b = r1[v], r2[v]
            if checks["rectification"] == "symmetric":
                if not (abs(a - 1) <= SYMMETRY_TOL and abs(b - 1) <= SYMMETRY_TOL):
                    failures.append(f"|V|={v:g}: r1={a:.9g}, r2={b:.9g} differ from 1")
            elif not (b > a > 0 and abs(b - 1) > abs(a - 1)):
                failures.append(f"|V|={v:g}: r1={a:.6g}, r2={b:.6g} do not satisfy r2 > r1 > 0 "
                                "with r2 further from 1")
    return failures


def cmd_iv(cfg: NanoporeConfig, out_dir: Path, check: bool, threads: int = 1) -> int:
    from .scenarios import rectification_ratio

    jobs = [(cfg.scenario, v, cfg.steady, cfg.newton) for v in cfg.voltages]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_iv_point, jobs))
    else:
        results = [_iv_point(j) for j in jobs]
    currents = {v: cur for v, cur, _, _ in results}
    m = len(cfg.scenario.species)
    ratios = [rectification_ratio(currents, l) for l in range(min(2, m))]
    header = ["V", *[f"I{l + 1}" for l in range(m)], *[f"r{l + 1}" for l in range(len(ratios))]]
    rows = []
    for v in cfg.voltages:
        r = [ratios[l].get(abs(v), math.nan) for l in range(len(ratios))]
        rows.append([v, *currents[v], *r])
        print(f"V={v:+.3g} " + " ".join(f"I{l + 1}={currents[v][l]:+.6e}" for l in range(m))
              + " " + " ".join(f"r{l + 1}={x:.6g}" for l, x in enumerate(r)), flush=True)
    atomic_write(out_dir / "iv_curve.csv", csv_text(header, rows))
    failures = iv_failures(cfg, results)
    if check and failures:
        for f in failures:
            print(f"CHECK FAILED: {f}", file=sys.stderr)
        raise AssertionFailure("iv checks failed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# steady


def cmd_steady(cfg: SimulationConfig, out_dir: Path, check: bool) -> int:
    from .model import chemical_potential
    from .solver import solve_steady_pb

    disc, state = cfg.build()
    masses = state.c @ disc.ion_dual.cell_measures
    pb = solve_steady_pb(disc, masses, cfg.newton)
    mu = chemical_potential(pb, disc.model)
    spread = np.ptp(mu, axis=1)
    rows = [[l + 1, float(pb.c[l] @ disc.ion_dual.cell_measures), float(mu[l].mean()), float(spread[l])]
            for l in range(disc.n_species)]
    atomic_write(out_dir / "steady.csv", csv_text(["species", "mass", "mu", "mu_spread"], rows))
    write_field_dump(out_dir / "steady_fields.txt", disc, pb)
    for r in rows:
        print(f"species {r[0]}: mass={r[1]:.12g} mu={r[2]:.12g} spread={r[3]:.3e}")
    if check and np.any(spread > 1e-10):
        raise AssertionFailure("chemical potentials are not uniform")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mpnp", description="Finite-volume solver for modified Poisson-Nernst-Planck equations.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("run", "simulate a trajectory and write diagnostics.csv"),
        ("convergence", "manufactured-solution convergence table"),
        ("iv", "nanopore current-voltage sweep"),
        ("steady", "discrete Poisson-Boltzmann equilibrium"),
    ):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", required=True, help="JSON configuration file")
        s.add_argument("--out-dir", default=".", help="directory for output files (default: .)")
        s.add_argument("--threads", type=int, default=1, help="worker processes / BLAS threads (default: 1)")
        s.add_argument("--assert", dest="check", choices=("on", "off"), default="on",
                       help="fail with exit code 4 when a check fails (default: on)")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = Path(args.out_dir)
    check = args.check == "on"
    try:
        cfg = load_config(args.config)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads if args.command != "iv" else 1):
            if args.command == "run":
                return cmd_run(_expect(cfg, SimulationConfig, "run"), out_dir, check)
            if args.command == "convergence":
                return cmd_convergence(_expect(cfg, ConvergenceConfig, "convergence"), out_dir, check)
            if args.command == "iv":
                return cmd_iv(_expect(cfg, NanoporeConfig, "iv"), out_dir, check, args.threads)
            return cmd_steady(_expect(cfg, SimulationConfig, "steady"), out_dir, check)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonConvergence, LinearSolveFailure, FloatingPointError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except AssertionFailure as exc:
        print(f"check failure: {exc}", file=sys.stderr)
        return EXIT_ASSERT


if __name__ == "__main__":
    sys.exit(main())
