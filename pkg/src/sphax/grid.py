"""Spatial decomposition and task-graph generation.

The domain is cut into a top-level grid of cells no smaller than the
largest smoothing length (minimum 3 per axis for periodic pair coverage),
cells above the split threshold are recursively split into octants while
their children stay larger than the contained smoothing lengths, and the
per-step task blueprint (sort -> density -> ghost -> force -> kick, plus
cell-pair interaction tasks) is derived from the leaf structure.

Leaf pairing uses a reach rule rather than raw 26-adjacency: two non-empty
leaves interact iff their periodic box distance is below the larger of
their reaches (reach = reach_slack * cell h_max, capped at the top-level
edge).  On uniform grids this reduces exactly to the 26-neighbourhood; on
mixed-depth trees it also covers big-h particles that see past a thin
layer of deeply split neighbours.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .sph import SphaxError

MAX_DEPTH = 20

# The 13 unique cell-pair axis directions (one per +/- direction class).
_AXIS_OFFSETS = []
for _dx in (-1, 0, 1):
    for _dy in (-1, 0, 1):
        for _dz in (-1, 0, 1):
            off = (_dx, _dy, _dz)
            if off == (0, 0, 0):
                continue
            first = next(c for c in off if c != 0)
            if first > 0:
                _AXIS_OFFSETS.append(off)
AXIS_VECTORS = np.array(_AXIS_OFFSETS, dtype=float)
AXIS_VECTORS /= np.linalg.norm(AXIS_VECTORS, axis=1)[:, None]
_AXIS_INDEX = {off: i for i, off in enumerate(_AXIS_OFFSETS)}


class GridError(SphaxError):
    pass


class StaleSortError(SphaxError):
    """Sort data predates the current particle positions; rebuild required."""


def axis_for_direction(direction) -> int:
    """Quantize a cell-centre offset to one of the 13 canonical axes."""
    d = np.asarray(direction, dtype=float)
    scale = np.max(np.abs(d))
    if scale == 0.0:
        return _AXIS_INDEX[(1, 0, 0)]
    key = tuple(int(np.sign(c)) if abs(c) > 1e-9 * scale else 0
                for c in d)
    if key == (0, 0, 0):
        return _AXIS_INDEX[(1, 0, 0)]
    first = next(c for c in key if c != 0)
    if first < 0:
        key = tuple(-c for c in key)
    return _AXIS_INDEX[key]


@dataclass
class Cell:
    cid: int
    lo: np.ndarray
    hi: np.ndarray
    start: int
    end: int
    depth: int
    top_id: int
    parent: int | None = None
    children: tuple = ()
    h_max: float = 0.0
    owner_rank: int = 0

    @property
    def count(self) -> int:
        return self.end - self.start

    @property
    def split(self) -> bool:
        return bool(self.children)

    @property
    def edge(self) -> np.ndarray:
        return self.hi - self.lo


@dataclass
class Grid:
    box: np.ndarray
    dims: np.ndarray
    cells: list
    top_ids: np.ndarray          # dims-shaped map lattice -> cid
    leaves: list                 # leaf cids, all tops' subtrees
    split_threshold: int
    reach_slack: float
    h_max_global: float

    @property
    def top_edge(self) -> np.ndarray:
        return self.box / self.dims

    def leaf_of_top(self, top_cid: int) -> list:
        out = []
        stack = [top_cid]
        while stack:
            cid = stack.pop()
            cell = self.cells[cid]
            if cell.split:
                stack.extend(reversed(cell.children))
            else:
                out.append(cid)
        return out

    def reach(self, cid: int) -> float:
        """How far interactions from this cell may extend this step."""
        return min(self.reach_slack * self.cells[cid].h_max,
                   float(np.min(self.top_edge)))

    def top_of_position(self, pos) -> int:
        idx = np.floor(np.asarray(pos) / self.top_edge).astype(int)
        idx = np.minimum(idx, self.dims - 1)
        return int(self.top_ids[tuple(idx)])


def build_grid(x, h, box, split_threshold: int = 100, reach_slack: float = 1.5,
               h_max_hint: float = 0.0, min_cell_occupancy: float = 0.0):
    """Bin particles into the cell tree; returns (grid, permutation).

    ``permutation`` maps new slot -> old index; the caller reorders its
    particle store with it so every cell owns a contiguous range.
    ``min_cell_occupancy`` > 0 coarsens the top grid (never below 3 per
    axis) when the strict largest-h sizing would leave cells nearly empty;
    the top edge is then still >= the largest smoothing length.
    """
    x = np.asarray(x, dtype=float)
    h = np.asarray(h, dtype=float)
    box = np.asarray(box, dtype=float)
    n = len(h)
    if np.any(box <= 0.0):
        raise GridError("box edges must be positive")
    if n > 0 and (np.any(x < 0.0) or np.any(x >= box)):
        raise GridError("positions must be wrapped into [0, box) before binning")
    h_max = float(max(h.max(initial=0.0), h_max_hint))
    if h_max <= 0.0:
        raise GridError("need a positive smoothing length to size the grid")
    dims = np.floor(box / h_max).astype(int)
    if np.any(dims < 3):
        raise GridError(
            f"top grid {dims.tolist()} has fewer than 3 cells per axis; "
            "use a larger box or smaller smoothing lengths")
    if min_cell_occupancy > 0.0 and n > 0:
        cap = max(3, int(np.floor((n / min_cell_occupancy) ** (1.0 / 3.0))))
        dims = np.minimum(dims, cap)
    edge = box / dims

    # Top-level binning.
    bins = np.floor(x / edge).astype(int)
    bins = np.minimum(bins, dims - 1)
    lin = (bins[:, 0] * dims[1] + bins[:, 1]) * dims[2] + bins[:, 2]
    perm = np.argsort(lin, kind="stable")
    lin_sorted = lin[perm]
    x_sorted = x[perm]
    h_sorted = h[perm]
    starts = np.searchsorted(lin_sorted, np.arange(int(np.prod(dims)) + 1))

    cells: list[Cell] = []
    top_ids = np.empty(dims, dtype=int)
    leaves: list[int] = []

    def new_cell(lo, hi, start, end, depth, top_id, parent) -> int:
        cid = len(cells)
        cells.append(Cell(cid, lo, hi, start, end, depth,
                          top_id if top_id >= 0 else cid, parent))
        return cid

    def split_cell(cid: int) -> None:
        cell = cells[cid]
        seg = perm[cell.start:cell.end]
        if cell.count > 0:
            cell.h_max = float(h_sorted[cell.start:cell.end].max())
        if (cell.count <= split_threshold or cell.depth >= MAX_DEPTH):
            leaves.append(cid)
            return
        mid = 0.5 * (cell.lo + cell.hi)
        xseg = x_sorted[cell.start:cell.end]
        octant = ((xseg[:, 0] >= mid[0]).astype(int) * 4
                  + (xseg[:, 1] >= mid[1]).astype(int) * 2
                  + (xseg[:, 2] >= mid[2]).astype(int))
        order = np.argsort(octant, kind="stable")
        counts = np.bincount(octant, minlength=8)
        # Children must stay larger than the smoothing lengths they hold.
        half = 0.5 * (cell.hi - cell.lo)
        offsets = np.cumsum(np.concatenate([[0], counts]))
        ok = True
        for oc in range(8):
            if counts[oc] == 0:
                continue
            sel = order[offsets[oc]:offsets[oc + 1]]
            if h_sorted[cell.start:cell.end][sel].max() > float(np.min(half)):
                ok = False
                break
        if not ok:
            leaves.append(cid)
            return
        # Apply the octant ordering to this segment of the permutation.
        perm[cell.start:cell.end] = seg[order]
        x_sorted[cell.start:cell.end] = x_sorted[cell.start:cell.end][order]
        h_sorted[cell.start:cell.end] = h_sorted[cell.start:cell.end][order]
        kids = []
        for oc in range(8):
            lo = cell.lo.copy()
            hi = mid.copy()
            for ax, bit in enumerate((4, 2, 1)):
                if oc & bit:
                    lo[ax] = mid[ax]
                    hi[ax] = cell.hi[ax]
            kid = new_cell(lo, hi,
                           cell.start + int(offsets[oc]),
                           cell.start + int(offsets[oc + 1]),
                           cell.depth + 1, cell.top_id, cid)
            kids.append(kid)
        cell.children = tuple(kids)
        for kid in kids:
            split_cell(kid)

    for ix in range(dims[0]):
        for iy in range(dims[1]):
            for iz in range(dims[2]):
                flat = (ix * dims[1] + iy) * dims[2] + iz
                lo = np.array([ix, iy, iz]) * edge
                hi = lo + edge
                cid = new_cell(lo, hi, int(starts[flat]), int(starts[flat + 1]),
                               0, -1, None)
                top_ids[ix, iy, iz] = cid
                split_cell(cid)

    grid = Grid(box=box, dims=dims, cells=cells, top_ids=top_ids,
                leaves=sorted(leaves), split_threshold=split_threshold,
                reach_slack=reach_slack, h_max_global=h_max)
    return grid, perm


def _box_gap(lo_a, hi_a, lo_b, hi_b) -> float:
    """Euclidean distance between two axis-aligned boxes (0 if touching)."""
    gap = np.maximum(0.0, np.maximum(lo_b - hi_a, lo_a - hi_b))
    return float(np.sqrt(gap @ gap))


# --------------------------------------------------------------------------
# task blueprint
# --------------------------------------------------------------------------

# Seed scale per kind: self-like tasks cost ~ n, pair tasks ~ n * m.
COST_SCALE = {
    "sort": 0.5, "density_self": 2.0, "ghost": 2.0, "force_self": 3.0,
    "kick": 0.2, "density_pair": 0.02, "force_pair": 0.03,
    "send": 0.5, "recv": 0.25,
}


@dataclass
class TaskSpec:
    kind: str
    cells: tuple
    axis: int | None = None
    shift: np.ndarray | None = None   # applied to cells[1] to land in cells[0]'s frame
    axes: tuple = ()                  # for sort tasks: all axes to prepare
    cost: float = 0.0
    deps: list = field(default_factory=list)


@dataclass
class Blueprint:
    specs: list
    sort_id: dict        # cid -> spec index
    self_ids: dict       # (kind, cid) -> spec index
    pair_ids: dict       # (kind, cid_a, cid_b) -> spec index
    neighbours: dict     # cid -> list of (other_cid, shift into cid's frame)

    def counts(self) -> dict:
        out: dict = {}
        for spec in self.specs:
            out[spec.kind] = out.get(spec.kind, 0) + 1
        return out


def _top_pairs(grid: Grid):
    """Unordered 26-neighbour top-cell pairs with their periodic shifts."""
    dims = grid.dims
    box = grid.box
    for ix in range(dims[0]):
        for iy in range(dims[1]):
            for iz in range(dims[2]):
                a = int(grid.top_ids[ix, iy, iz])
                for off in _AXIS_OFFSETS:
                    raw = np.array([ix, iy, iz]) + off
                    wrapped = raw % dims
                    shift = (raw - wrapped) // dims * box
                    b = int(grid.top_ids[tuple(wrapped)])
                    yield a, b, shift.astype(float)


def make_tasks(grid: Grid) -> Blueprint:
    """Derive the per-step task set and dependencies from the cell tree."""
    cells = grid.cells
    pair_list = []  # (leaf_a, leaf_b, axis, shift)

    def consider(a: int, b: int, shift) -> None:
        ca, cb = cells[a], cells[b]
        if ca.count == 0 or cb.count == 0:
            return
        reach = max(grid.reach(a), grid.reach(b))
        if _box_gap(ca.lo, ca.hi, cb.lo + shift, cb.hi + shift) >= reach:
            return
        centre_a = 0.5 * (ca.lo + ca.hi)
        centre_b = 0.5 * (cb.lo + cb.hi) + shift
        axis = axis_for_direction(centre_b - centre_a)
        pair_list.append((a, b, axis, np.asarray(shift, dtype=float)))

    zero = np.zeros(3)
    for top in sorted(int(c) for c in grid.top_ids.ravel()):
        leaf = grid.leaf_of_top(top)
        for i, a in enumerate(leaf):
            for b in leaf[i + 1:]:
                consider(a, b, zero)
    for a, b, shift in _top_pairs(grid):
        if a == b:
            continue
        for la in grid.leaf_of_top(a):
            for lb in grid.leaf_of_top(b):
                consider(la, lb, shift)

    active = sorted({cid for cid in grid.leaves if cells[cid].count > 0})
    needed_axes: dict[int, set] = {cid: set() for cid in active}
    neighbours: dict[int, list] = {cid: [] for cid in active}
    for a, b, axis, shift in pair_list:
        needed_axes[a].add(axis)
        needed_axes[b].add(axis)
        neighbours[a].append((b, shift))
        neighbours[b].append((a, -shift))

    specs: list[TaskSpec] = []
    sort_id: dict = {}
    self_ids: dict = {}
    pair_ids: dict = {}

    def emit(spec: TaskSpec) -> int:
        specs.append(spec)
        return len(specs) - 1

    for cid in active:
        nc = cells[cid].count
        sort_id[cid] = emit(TaskSpec(
            "sort", (cid,), axes=tuple(sorted(needed_axes[cid])),
            cost=COST_SCALE["sort"] * nc))
        for kind in ("density_self", "ghost", "force_self", "kick"):
            self_ids[(kind, cid)] = emit(TaskSpec(
                kind, (cid,), cost=COST_SCALE[kind] * nc))

    for a, b, axis, shift in pair_list:
        nm = cells[a].count * cells[b].count
        for kind in ("density_pair", "force_pair"):
            pair_ids[(kind, a, b)] = emit(TaskSpec(
                kind, (a, b), axis=axis, shift=shift,
                cost=COST_SCALE[kind] * nm))

    # Dependencies: sorts feed pair density tasks; ghosts wait on all
    # density work touching their cell; force tasks wait on the ghosts;
    # kicks wait on all force work touching their cell.
    density_touching: dict[int, list] = {cid: [] for cid in active}
    force_touching: dict[int, list] = {cid: [] for cid in active}
    for cid in active:
        density_touching[cid].append(self_ids[("density_self", cid)])
        force_touching[cid].append(self_ids[("force_self", cid)])
        specs[self_ids[("force_self", cid)]].deps.append(self_ids[("ghost", cid)])
    for a, b, axis, shift in pair_list:
        dp = pair_ids[("density_pair", a, b)]
        fp = pair_ids[("force_pair", a, b)]
        specs[dp].deps.extend([sort_id[a], sort_id[b]])
        specs[fp].deps.extend([sort_id[a], sort_id[b]])
        specs[fp].deps.extend([self_ids[("ghost", a)], self_ids[("ghost", b)]])
        density_touching[a].append(dp)
        density_touching[b].append(dp)
        force_touching[a].append(fp)
        force_touching[b].append(fp)
    for cid in active:
        specs[self_ids[("ghost", cid)]].deps.extend(density_touching[cid])
        specs[self_ids[("kick", cid)]].deps.extend(force_touching[cid])

    return Blueprint(specs=specs, sort_id=sort_id, self_ids=self_ids,
                     pair_ids=pair_ids, neighbours=neighbours)


def dump_blueprint(bp: Blueprint) -> str:
    """Text adjacency listing: one task per line (kind, cells, deps)."""
    lines = []
    for i, spec in enumerate(bp.specs):
        cells = ",".join(str(c) for c in spec.cells)
        deps = ",".join(str(d) for d in sorted(spec.deps))
        lines.append(f"{i} {spec.kind} cells={cells} deps={deps}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# sorted projections and pair pruning
# --------------------------------------------------------------------------

@dataclass
class SortData:
    cid: int
    axis: int
    idx: np.ndarray     # absolute particle indices, ascending projection
    proj: np.ndarray    # matching projection values
    tag: int            # step tag; positions must not have moved since


def sort_projections(x, start: int, end: int, axis: int, tag: int,
                     cid: int = -1) -> SortData:
    vec = AXIS_VECTORS[axis]
    proj = x[start:end] @ vec
    order = np.argsort(proj, kind="stable")
    return SortData(cid=cid, axis=axis, idx=np.arange(start, end)[order],
                    proj=proj[order], tag=tag)


def pair_prune(sort_a: SortData, sort_b: SortData, reach: float,
               shift=None, tag: int | None = None):
    """Candidate particle pairs whose projected separation is < reach.

    Returns (ii, jj) absolute index arrays: a superset of every truly
    in-range pair and a subset of the full cross product.  Raises
    :class:`StaleSortError` when the sorts predate ``tag``.
    """
    if sort_a.axis != sort_b.axis:
        raise GridError("pair_prune needs sorts along the same axis")
    if tag is not None and (sort_a.tag != tag or sort_b.tag != tag):
        raise StaleSortError(
            f"sort data from step {sort_a.tag}/{sort_b.tag} used at step "
            f"{tag}; particles moved, rebuild the grid")
    proj_shift = 0.0
    if shift is not None:
        proj_shift = float(np.asarray(shift, dtype=float) @ AXIS_VECTORS[sort_a.axis])
    pb = sort_b.proj + proj_shift
    lo = np.searchsorted(pb, sort_a.proj - reach, side="left")
    hi = np.searchsorted(pb, sort_a.proj + reach, side="right")
    counts = hi - lo
    total = int(counts.sum())
    ii = np.repeat(sort_a.idx, counts)
    jj = np.empty(total, dtype=sort_b.idx.dtype)
    pos = 0
    for k in range(len(sort_a.idx)):
        c = counts[k]
        if c:
            jj[pos:pos + c] = sort_b.idx[lo[k]:hi[k]]
            pos += c
    return ii, jj
