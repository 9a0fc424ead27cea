"""Initial conditions, run loop protocol, reports, snapshots, and the CLI."""

import csv
import hashlib
import os

import numpy as np
import pytest

from sphax.cli import main as cli_main
from sphax.harness import (ConfigError, RunConfig, build_engine, emit_reports,
                           generate_ics, read_snapshot, run_simulation,
                           write_snapshot)


def state_digest(ps) -> str:
    h = hashlib.sha256()
    for name in ("x", "v", "m", "u", "h", "rho", "pid"):
        h.update(getattr(ps, name).tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# configuration and ICs
# --------------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ConfigError):
        RunConfig(n=0)
    with pytest.raises(ConfigError):
        RunConfig(steps=2)
    with pytest.raises(ConfigError):
        RunConfig(ic="clustered", clump_radius=0.6)
    with pytest.raises(ConfigError):
        RunConfig(ic="weird")
    with pytest.raises(ConfigError):
        RunConfig(dt=-0.1)


def test_ics_deterministic():
    a = generate_ics(RunConfig(n=500, ic="clustered", seed=42))
    b = generate_ics(RunConfig(n=500, ic="clustered", seed=42))
    assert state_digest(a) == state_digest(b)
    c = generate_ics(RunConfig(n=500, ic="clustered", seed=43))
    assert state_digest(a) != state_digest(c)


def test_uniform_ics_density_flatness():
    cfg = RunConfig(n=1000, ic="uniform", steps=3, seed=2)
    eng = build_engine(cfg, generate_ics(cfg))
    eng.step()
    rho = eng.gather_state().rho
    mean = 1.0  # unit total mass in a unit box
    rms = np.sqrt(np.mean((rho - mean) ** 2)) / mean
    assert rms < 0.05


def test_clustered_ics_create_imbalance():
    cfg = RunConfig(n=4000, ic="clustered", clumps=4, seed=3, steps=3)
    eng = build_engine(cfg, generate_ics(cfg))
    eng.rebuild()
    counts = [eng.grid.cells[c].count for c in eng.grid.leaves
              if eng.grid.cells[c].count > 0]
    assert max(counts) / min(counts) > 10


def test_unit_mass_and_energy_normalization():
    ps = generate_ics(RunConfig(n=777, ic="clustered", seed=5))
    assert ps.m.sum() == pytest.approx(1.0, rel=1e-12)
    assert np.mean(ps.u) == pytest.approx(1.0, rel=1e-12)


# --------------------------------------------------------------------------
# run loop protocol
# --------------------------------------------------------------------------

def test_three_step_mean_is_middle_step():
    cfg = RunConfig(n=400, ic="uniform", steps=3, seed=1)
    result = run_simulation(cfg)
    assert len(result.report.wall_ms) == 3
    assert result.report.mean_ms == result.report.wall_ms[1]


def test_serial_runs_bitwise_identical(tmp_path):
    cfg = dict(n=600, ic="clustered", clumps=3, steps=4, seed=9,
               repart_period=2)
    r1 = run_simulation(RunConfig(**cfg))
    r2 = run_simulation(RunConfig(**cfg))
    assert state_digest(r1.final) == state_digest(r2.final)
    p1 = tmp_path / "a.dat"
    p2 = tmp_path / "b.dat"
    for path, res in ((p1, r1), (p2, r2)):
        write_snapshot(path, res.final, 1.0, res.config.gamma, 4,
                       res.engine.dt)
    assert p1.read_bytes() == p2.read_bytes()


def test_worker_count_leaves_physics_identical():
    base = dict(n=900, ic="clustered", clumps=3, steps=3, seed=6)
    r1 = run_simulation(RunConfig(workers=1, **base))
    r8 = run_simulation(RunConfig(workers=8, **base))
    a, b = r1.final, r8.final
    assert np.array_equal(a.pid, b.pid)
    for name in ("x", "v", "u", "h", "rho"):
        va, vb = getattr(a, name), getattr(b, name)
        rel = np.max(np.abs(va - vb) / np.maximum(np.abs(va), 1e-300))
        assert rel < 1e-10, f"{name} differs at {rel}"


def test_repartition_cadence():
    cfg = RunConfig(n=800, ic="clustered", steps=9, seed=7, ranks=2,
                    repart_period=4)
    result = run_simulation(cfg)
    assert result.report.repartition_steps == [4, 8]


def test_mass_conserved_exactly():
    cfg = RunConfig(n=500, ic="clustered", steps=5, seed=8, ranks=2)
    ics = generate_ics(cfg)
    result = run_simulation(cfg)
    assert np.array_equal(np.sort(result.final.m), np.sort(ics.m))


# --------------------------------------------------------------------------
# reports and snapshots
# --------------------------------------------------------------------------

def test_emit_reports_headers_and_content(tmp_path):
    cfg = RunConfig(n=400, ic="uniform", steps=3, seed=1, trace=True,
                    out_dir=str(tmp_path / "out"))
    result = run_simulation(cfg)
    out = tmp_path / "out"
    with open(out / "timing.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "wall_ms", "messages", "bytes"]
    assert len(rows) == 4
    with open(out / "partition.csv") as fh:
        lines = fh.read().splitlines()
    assert lines[0] == "cell,rank,node_weight"
    assert lines[-1].startswith("# imbalance,")
    with open(out / "scaling.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["workers", "wall_ms_mean"]  # no baseline -> no efficiency
    with open(out / "trace.csv") as fh:
        header = fh.readline().strip()
    assert header == "id,kind,rank,worker,start_ns,end_ns,cost_estimate"
    assert (out / "snapshot.dat").exists()


def test_scaling_report_with_baseline(tmp_path):
    base = dict(n=400, ic="uniform", steps=3, seed=1)
    r1 = run_simulation(RunConfig(workers=1, **base))
    r2 = run_simulation(RunConfig(workers=2, **base))
    paths = emit_reports(r2, str(tmp_path), baseline=r1)
    with open(paths["scaling"]) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["workers", "wall_ms_mean", "speedup", "efficiency"]
    speedup = float(rows[2][2])
    eff = float(rows[2][3])
    # CSV values carry 6 decimals
    assert speedup == pytest.approx(r1.report.mean_ms / r2.report.mean_ms,
                                    abs=1e-5)
    assert eff == pytest.approx(speedup / 2.0, abs=1e-5)


def test_snapshot_round_trip_binary(tmp_path, rng):
    cfg = RunConfig(n=200, ic="uniform", steps=3, seed=4)
    ps = generate_ics(cfg)
    ps.rho[:] = rng.uniform(0.5, 2.0, len(ps))
    path = tmp_path / "snap.dat"
    write_snapshot(path, ps, 1.0, cfg.gamma, 12, 0.01)
    back, meta = read_snapshot(path)
    assert meta["mode"] == "binary"
    assert int(meta["n"]) == 200 and int(meta["step"]) == 12
    assert float(meta["dt"]) == 0.01
    order = np.argsort(ps.pid)
    assert np.array_equal(back.x, ps.x[order])
    assert np.array_equal(back.rho, ps.rho[order])


def test_snapshot_round_trip_text(tmp_path):
    cfg = RunConfig(n=50, ic="uniform", steps=3, seed=4)
    ps = generate_ics(cfg)
    path = tmp_path / "snap.txt"
    write_snapshot(path, ps, 1.0, cfg.gamma, 1, 0.01, mode="text")
    with open(path, "rb") as fh:
        assert fh.readline().startswith(b"SPHAXSNAP 1 text")
    back, meta = read_snapshot(path)
    assert np.array_equal(back.pid, np.sort(ps.pid))
    assert np.allclose(back.x, ps.x[np.argsort(ps.pid)], rtol=0, atol=0)


# --------------------------------------------------------------------------
# CLI
# --------------------------------------------------------------------------

def test_cli_success(tmp_path, capsys):
    rc = cli_main(["--n", "500", "--steps", "3", "--seed", "1",
                   "--out-dir", str(tmp_path / "cli_out"), "--trace"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "mean step wall" in out
    assert (tmp_path / "cli_out" / "timing.csv").exists()
    assert (tmp_path / "cli_out" / "snapshot.dat").exists()


def test_cli_config_error(capsys):
    rc = cli_main(["--n", "0"])
    assert rc == 1
    assert "configuration error" in capsys.readouterr().err


def test_cli_runtime_error(capsys):
    # 8 particles in a unit box need h beyond the 3-cells-per-axis limit
    rc = cli_main(["--n", "8", "--steps", "3"])
    assert rc == 2
    assert "runtime error" in capsys.readouterr().err
