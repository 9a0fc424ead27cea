"""Cell grid construction, task blueprint generation, and pair pruning."""

import numpy as np
import pytest

from sphax.grid import (GridError, StaleSortError, axis_for_direction,
                        build_grid, dump_blueprint, make_tasks, pair_prune,
                        sort_projections)
from sphax.harness import RunConfig, generate_ics


BOX = np.ones(3)


def test_uniform_lattice_top_grid(rng):
    side = 10
    x = (np.indices((side,) * 3).reshape(3, -1).T + 0.5) / side
    x = np.mod(x + rng.uniform(-0.02, 0.02, x.shape), 1.0)
    h = np.full(len(x), 0.24)
    grid, perm = build_grid(x, h, BOX, split_threshold=100)
    assert tuple(grid.dims) == (4, 4, 4)
    counts = [grid.cells[c].count for c in grid.leaves]
    assert sum(counts) == 1000
    assert len(grid.leaves) == 64          # no splits at threshold 100
    assert 8 <= min(counts) and max(counts) <= 25   # ~15.6 per cell


def test_corner_cluster_splits():
    rng = np.random.default_rng(0)
    x = rng.uniform(0.0, 0.3, (1000, 3))
    h = np.full(1000, 0.01)
    grid, _ = build_grid(x, h, BOX, split_threshold=100, h_max_hint=0.32)
    assert tuple(grid.dims) == (3, 3, 3)
    tops = sorted(int(c) for c in grid.top_ids.ravel())
    occupied = [t for t in tops if grid.cells[t].count > 0]
    assert occupied == [tops[0]]
    assert grid.cells[occupied[0]].split    # splits at least once
    for t in tops[1:]:
        assert grid.cells[t].count == 0


def test_single_particle_grid_and_tasks():
    grid, _ = build_grid(np.array([[0.5, 0.5, 0.5]]), np.array([0.2]), BOX,
                         h_max_hint=0.3)
    bp = make_tasks(grid)
    kinds = bp.counts()
    assert kinds == {"sort": 1, "density_self": 1, "ghost": 1,
                     "force_self": 1, "kick": 1}


def test_build_errors():
    with pytest.raises(GridError):
        build_grid(np.array([[0.5, 0.5, 0.5]]), np.array([0.4]), BOX)
    with pytest.raises(GridError):
        build_grid(np.array([[1.5, 0.5, 0.5]]), np.array([0.1]), BOX)


def test_binning_totality_and_ranges(rng):
    x = rng.uniform(0, 1, (3000, 3))
    h = np.full(3000, 0.05)
    grid, perm = build_grid(x, h, BOX, split_threshold=50)
    assert sum(grid.cells[c].count for c in grid.leaves) == 3000
    xs = x[perm]
    for cid in grid.leaves:
        cell = grid.cells[cid]
        seg = xs[cell.start:cell.end]
        assert np.all(seg >= cell.lo - 1e-12) and np.all(seg <= cell.hi + 1e-12)


def test_rebuild_idempotent(rng):
    cfg = RunConfig(n=2000, ic="clustered", seed=9, steps=3)
    ps = generate_ics(cfg)
    g1, p1 = build_grid(ps.x, ps.h, BOX, split_threshold=60)
    g2, p2 = build_grid(ps.x, ps.h, BOX, split_threshold=60)
    assert np.array_equal(p1, p2)
    assert len(g1.cells) == len(g2.cells)
    for a, b in zip(g1.cells, g2.cells):
        assert (a.start, a.end, a.depth, a.children) == \
            (b.start, b.end, b.depth, b.children)
        assert np.array_equal(a.lo, b.lo) and np.array_equal(a.hi, b.hi)
    assert dump_blueprint(make_tasks(g1)) == dump_blueprint(make_tasks(g2))


# --------------------------------------------------------------------------
# blueprint
# --------------------------------------------------------------------------

def _two_cell_fixture():
    # two adjacent occupied top cells in a 3^3 grid
    rng = np.random.default_rng(5)
    xa = rng.uniform([0.02, 0.02, 0.02], [0.31, 0.31, 0.31], (20, 3))
    xb = rng.uniform([0.35, 0.02, 0.02], [0.64, 0.31, 0.31], (20, 3))
    x = np.concatenate([xa, xb])
    h = np.full(40, 0.2)
    return build_grid(x, h, BOX, h_max_hint=0.33)


def test_two_adjacent_cells_make_twelve_tasks():
    grid, _ = _two_cell_fixture()
    bp = make_tasks(grid)
    assert bp.counts() == {"sort": 2, "density_self": 2, "ghost": 2,
                           "force_self": 2, "kick": 2,
                           "density_pair": 1, "force_pair": 1}
    assert len(bp.specs) == 12


def test_periodic_3cube_pair_counts(rng):
    # all 27 cells occupied -> 27 selves and 351 unordered pairs per phase
    x = rng.uniform(0, 1, (2700, 3))
    h = np.full(2700, 0.32)
    grid, _ = build_grid(x, h, BOX)
    assert tuple(grid.dims) == (3, 3, 3)
    bp = make_tasks(grid)
    counts = bp.counts()
    assert counts["density_self"] == 27 and counts["force_self"] == 27
    assert counts["density_pair"] == 351 and counts["force_pair"] == 351


def test_blueprint_dependency_wiring():
    grid, _ = _two_cell_fixture()
    bp = make_tasks(grid)
    (a, b) = sorted(cid for cid in grid.leaves if grid.cells[cid].count)
    dp = bp.specs[bp.pair_ids[("density_pair", a, b)]]
    fp = bp.specs[bp.pair_ids[("force_pair", a, b)]]
    ghost_a = bp.self_ids[("ghost", a)]
    ghost_b = bp.self_ids[("ghost", b)]
    assert {bp.sort_id[a], bp.sort_id[b]} <= set(dp.deps)
    assert {ghost_a, ghost_b} <= set(fp.deps)
    # ghost waits on every density task touching its cell
    ghost_spec = bp.specs[ghost_a]
    assert bp.self_ids[("density_self", a)] in ghost_spec.deps
    assert bp.pair_ids[("density_pair", a, b)] in ghost_spec.deps
    # kick waits on every force task touching its cell
    kick_spec = bp.specs[bp.self_ids[("kick", a)]]
    assert bp.self_ids[("force_self", a)] in kick_spec.deps
    assert bp.pair_ids[("force_pair", a, b)] in kick_spec.deps


def test_blueprint_golden_dump():
    grid, _ = _two_cell_fixture()
    bp = make_tasks(grid)
    a, b = sorted(cid for cid in grid.leaves if grid.cells[cid].count)
    expected = (
        f"0 sort cells={a} deps=\n"
        f"1 density_self cells={a} deps=\n"
        f"2 ghost cells={a} deps=1,10\n"
        f"3 force_self cells={a} deps=2\n"
        f"4 kick cells={a} deps=3,11\n"
        f"5 sort cells={b} deps=\n"
        f"6 density_self cells={b} deps=\n"
        f"7 ghost cells={b} deps=6,10\n"
        f"8 force_self cells={b} deps=7\n"
        f"9 kick cells={b} deps=8,11\n"
        f"10 density_pair cells={a},{b} deps=0,5\n"
        f"11 force_pair cells={a},{b} deps=0,2,5,7\n"
    )
    assert dump_blueprint(bp) == expected


def test_coverage_of_in_range_pairs():
    """Every in-range particle pair is covered by a self or pair task."""
    cfg = RunConfig(n=2500, ic="clustered", clumps=4, seed=11, steps=3)
    ps = generate_ics(cfg)
    grid, perm = build_grid(ps.x, ps.h, BOX, split_threshold=80)
    ps.permute(perm)
    bp = make_tasks(grid)
    leaf_of = np.empty(len(ps), dtype=int)
    for cid in grid.leaves:
        cell = grid.cells[cid]
        leaf_of[cell.start:cell.end] = cid
    paired = {tuple(sorted(spec.cells)) for spec in bp.specs
              if spec.kind == "density_pair"}
    x = ps.x
    h = ps.h
    n = len(ps)
    for i in range(n):
        d = x - x[i]
        d -= np.round(d)
        r2 = np.einsum("ij,ij->i", d, d)
        reach = np.maximum(h[i], h) ** 2
        hits = np.nonzero((r2 < reach) & (np.arange(n) != i))[0]
        for j in hits:
            a, b = leaf_of[i], leaf_of[j]
            if a == b:
                continue
            assert tuple(sorted((a, b))) in paired, (
                f"pair ({i},{j}) r={np.sqrt(r2[j]):.4f} "
                f"h=({h[i]:.4f},{h[j]:.4f}) cells ({a},{b}) uncovered")


def test_no_double_counting_of_cell_pairs():
    cfg = RunConfig(n=2500, ic="clustered", clumps=4, seed=11, steps=3)
    ps = generate_ics(cfg)
    grid, _ = build_grid(ps.x, ps.h, BOX, split_threshold=80)
    bp = make_tasks(grid)
    seen = set()
    for spec in bp.specs:
        if spec.kind != "density_pair":
            continue
        key = tuple(sorted(spec.cells))
        assert key not in seen
        seen.add(key)


# --------------------------------------------------------------------------
# sorting and pruning
# --------------------------------------------------------------------------

def test_axis_quantization():
    assert axis_for_direction([1.0, 0.0, 0.0]) == \
        axis_for_direction([-1.0, 0.0, 0.0])
    assert axis_for_direction([0.5, 0.5, 0.0]) != \
        axis_for_direction([1.0, 0.0, 0.0])
    assert axis_for_direction([0.0, 0.0, 0.0]) == \
        axis_for_direction([1.0, 1e-15, 0.0])


def test_pair_prune_superset_and_bound(rng):
    xa = rng.uniform(0.0, 0.3, (100, 3))
    xb = rng.uniform([0.3, 0.0, 0.0], [0.6, 0.3, 0.3], (100, 3))
    x = np.concatenate([xa, xb])
    h_max = 0.12
    ax = axis_for_direction([1.0, 0.0, 0.0])
    sa = sort_projections(x, 0, 100, ax, tag=1)
    sb = sort_projections(x, 100, 200, ax, tag=1)
    ii, jj = pair_prune(sa, sb, h_max, tag=1)
    assert len(ii) <= 100 * 100
    plan = set(zip(ii.tolist(), jj.tolist()))
    for i in range(100):
        for j in range(100, 200):
            r = np.linalg.norm(x[i] - x[j])
            if r < h_max:
                assert (i, j) in plan


def test_pair_prune_empty_when_far(rng):
    xa = rng.uniform(0.0, 0.1, (50, 3))
    xb = rng.uniform([0.5, 0.0, 0.0], [0.6, 0.1, 0.1], (50, 3))
    x = np.concatenate([xa, xb])
    ax = axis_for_direction([1.0, 0.0, 0.0])
    sa = sort_projections(x, 0, 50, ax, tag=0)
    sb = sort_projections(x, 50, 100, ax, tag=0)
    ii, jj = pair_prune(sa, sb, 0.2, tag=0)
    assert len(ii) == 0


def test_pair_prune_stale_sort_errors(rng):
    x = rng.uniform(0, 1, (20, 3))
    sa = sort_projections(x, 0, 10, 2, tag=3)
    sb = sort_projections(x, 10, 20, 2, tag=4)
    with pytest.raises(StaleSortError):
        pair_prune(sa, sb, 0.5, tag=5)


def test_pair_prune_projection_lower_bounds_distance(rng):
    x = rng.uniform(0, 1, (60, 3))
    sa = sort_projections(x, 0, 30, 4, tag=0)
    sb = sort_projections(x, 30, 60, 4, tag=0)
    reach = 0.3
    ii, jj = pair_prune(sa, sb, reach, tag=0)
    plan = set(zip(ii.tolist(), jj.tolist()))
    for i in range(30):
        for j in range(30, 60):
            if np.linalg.norm(x[i] - x[j]) < reach:
                assert (i, j) in plan
