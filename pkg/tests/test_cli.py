import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from mpnp.cli import EXIT_ASSERT, EXIT_CONFIG, EXIT_OK, EXIT_SOLVER, main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def write_config(tmp_path, name, **changes):
    d = json.loads((CONFIGS / name).read_text())
    for k, v in changes.items():
        node = d
        *head, last = k.split("__")
        for h in head:
            node = node[h]
        node[last] = v
    path = tmp_path / f"cfg_{len(list(tmp_path.glob('cfg_*')))}.json"
    path.write_text(json.dumps(d))
    return path


def small_run(tmp_path, **changes):
    base = dict(mesh__n=6, time__t_end=0.2, output__field_dump_every=5)
    base.update(changes)
    return write_config(tmp_path, "property2d.json", **base)


def read_csv(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array(rows[1:], float)


def test_run_writes_dissipative_diagnostics(tmp_path):
    cfg = small_run(tmp_path)
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--out-dir", str(out)]) == EXIT_OK
    header, data = read_csv(out / "diagnostics.csv")
    assert header[:4] == ["time", "F", "mass_1", "mass_2"]
    assert len(data) == 11
    assert np.all(np.diff(data[:, 1]) <= 1e-12)
    assert np.max(np.abs(data[:, 2:4] - data[0, 2:4])) <= 1e-12 * np.max(data[0, 2:4])
    assert (out / "fields_000005.txt").exists() and (out / "fields_final.txt").exists()


def test_outputs_are_byte_identical_across_runs(tmp_path):
    cfg = small_run(tmp_path, time__t_end=0.1)
    for d in ("a", "b"):
        assert main(["run", "--config", str(cfg), "--out-dir", str(tmp_path / d)]) == EXIT_OK
    for name in ("diagnostics.csv", "fields_final.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_configuration_errors_exit_2(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    assert main(["run", "--config", str(small_run(tmp_path, time__dt=0.0))]) == EXIT_CONFIG
    assert main(["run", "--config", str(small_run(tmp_path, time__dt=-0.02))]) == EXIT_CONFIG
    assert main(["iv", "--config", str(small_run(tmp_path))]) == EXIT_CONFIG
    assert main(["iv", "--config", str(write_config(tmp_path, "nanopore.json", voltages=[]))]) == EXIT_CONFIG
    assert main(["run", "--config", str(small_run(tmp_path)), "--threads", "0"]) == EXIT_CONFIG
    assert main(["frobnicate"]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_newton_failure_exits_3(tmp_path, capsys):
    cfg = small_run(tmp_path, newton={"max_iter": 1})
    assert main(["run", "--config", str(cfg), "--out-dir", str(tmp_path)]) == EXIT_SOLVER
    assert "solver failure" in capsys.readouterr().err


def test_single_level_convergence_table(tmp_path):
    cfg = write_config(tmp_path, "accuracy_scheme1.json", levels=[4], t_end=0.0625)
    assert main(["convergence", "--config", str(cfg), "--out-dir", str(tmp_path)]) == EXIT_OK
    header, data = read_csv(tmp_path / "convergence.csv")
    assert data.shape == (1, len(header))
    assert np.isnan(data[0, header.index("order_c1")])


SYMMETRIC_PORE = dict(mesh_n=[4, 4, 8], membrane=[0.75, 1.25], voltages=[1.0, -1.0], symmetric_dielectric=True)


def test_symmetric_pore_sweep(tmp_path):
    cfg = write_config(tmp_path, "nanopore_symmetric.json", **SYMMETRIC_PORE)
    assert main(["iv", "--config", str(cfg), "--out-dir", str(tmp_path)]) == EXIT_OK
    header, data = read_csv(tmp_path / "iv_curve.csv")
    assert header == ["V", "I1", "I2", "I3", "r1", "r2"]
    np.testing.assert_allclose(data[:, 4:], 1.0, atol=1e-6)
    np.testing.assert_allclose(data[0, 1:4], -data[1, 1:4], rtol=1e-6)

    # the same symmetric pore cannot pass the asymmetric rectification check
    cfg = write_config(tmp_path, "nanopore.json", **SYMMETRIC_PORE)
    assert main(["iv", "--config", str(cfg), "--out-dir", str(tmp_path)]) == EXIT_ASSERT
    assert main(["iv", "--config", str(cfg), "--out-dir", str(tmp_path), "--assert", "off"]) == EXIT_OK


def test_steady_command(tmp_path):
    cfg = small_run(tmp_path)
    assert main(["steady", "--config", str(cfg), "--out-dir", str(tmp_path)]) == EXIT_OK
    header, data = read_csv(tmp_path / "steady.csv")
    assert header == ["species", "mass", "mu", "mu_spread"]
    assert np.all(data[:, 3] <= 1e-10)


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "mpnp", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "convergence" in r.stdout
    r = subprocess.run([sys.executable, "-m", "mpnp", "run", "--config", str(tmp_path / "none.json")],
                       capture_output=True, text=True)
    assert r.returncode == EXIT_CONFIG
