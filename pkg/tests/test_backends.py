"""Compiled core vs NumPy fallback: same results, and the benchmark runs."""

import numpy as np
import pytest

from sphax import backend
from sphax.grid import AXIS_VECTORS
from sphax.harness import RunConfig, build_engine, generate_ics


def run_one_step(name, n=1200):
    backend.use(name)
    cfg = RunConfig(n=n, ic="clustered", clumps=3, seed=17, steps=3,
                    split_threshold=150)
    eng = build_engine(cfg, generate_ics(cfg))
    eng.step()
    return eng.gather_state()


def test_backends_agree(compiled_only):
    a = run_one_step("python")
    b = run_one_step("compiled")
    backend.use("compiled")
    assert np.array_equal(a.pid, b.pid)
    for name, tol in (("rho", 1e-12), ("h", 1e-12), ("u", 1e-12)):
        va, vb = getattr(a, name), getattr(b, name)
        rel = np.max(np.abs(va - vb) / np.maximum(np.abs(va), 1e-300))
        assert rel < tol, f"{name}: {rel}"
    da = np.max(np.linalg.norm(a.a - b.a, axis=1)
                / np.maximum(np.linalg.norm(a.a, axis=1), 1e-300))
    assert da < 1e-10


def test_sort_cell_backends_agree(compiled_only, rng):
    from sphax import _kernels_cy, _kernels_py

    class Store:
        pass

    n = 257
    s = Store()
    s.x = rng.uniform(0, 1, (n, 3))
    s.v = np.zeros((n, 3))
    s.a = np.zeros((n, 3))
    for name in ("m", "u", "h", "rho", "rho_dh", "wcount", "wcount_dh",
                 "omega", "P", "u_dot"):
        setattr(s, name, np.ones(n))
    s.pid = np.arange(n, dtype=np.int64)
    for axis in range(13):
        ia, pa = _kernels_py.sort_cell(_kernels_py.cell_arrays(s), 10, 200,
                                       AXIS_VECTORS[axis])
        ib, pb = _kernels_cy.sort_cell(_kernels_cy.cell_arrays(s), 10, 200,
                                       AXIS_VECTORS[axis])
        assert np.array_equal(ia, ib)
        assert np.allclose(pa, pb, rtol=0, atol=1e-15)


def test_backend_env_override(monkeypatch):
    import importlib

    import sphax.backend as bk
    monkeypatch.setenv("SPHAX_KERNELS", "python")
    importlib.reload(bk)
    assert bk.active().NAME == "python"
    monkeypatch.delenv("SPHAX_KERNELS")
    importlib.reload(bk)
    backend.use(bk.active().NAME)


def test_bench_smoke(capsys):
    from sphax.bench import main
    rc = main(["--n", "1500", "--reps", "1"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "python" in out
