"""Scale normalization and fixed-interval point sampling of traced loops.

Loops are flattened to high precision, resampled at a uniform arc-length
interval, and near-duplicate points on the two facing edges of a thin stroke
are merged into centerline points.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import geom
from .tracer import Loop, Path, Segment, VectorPathSet, flatten_loop


class EmptyInputError(ValueError):
    pass


@dataclass
class SampledLoop:
    points: np.ndarray            # (n, 2) float64, traversal order
    closed: bool
    loop_id: int = 0
    merged: bool = False          # True if any point is a merge midpoint


@dataclass
class SampledPath:
    path_id: int
    loops: list[SampledLoop] = field(default_factory=list)


def normalize_scale(paths: VectorPathSet, target_width: float = 4000.0) -> VectorPathSet:
    """Scale every coordinate by target_width / source_width (aspect kept)."""
    if paths.width <= 0 or paths.height <= 0:
        raise EmptyInputError("path set has empty canvas extent")
    s = target_width / float(paths.width)
    out_paths = []
    for path in paths.paths:
        loops = []
        for loop in path.loops:
            segs = [Segment(seg.kind, seg.pts * s) for seg in loop.segments]
            loops.append(Loop(segs, loop.orientation, loop.signed_area * s * s))
        out_paths.append(Path(loops))
    return VectorPathSet(out_paths, int(round(target_width)),
                         int(round(paths.height * s)))


def _rotate_to_corner(pts: np.ndarray) -> np.ndarray:
    """Roll a closed loop so index 0 sits at the sharpest local turn.

    A loop's start index is an artifact of curve fitting; when the index wrap
    lands mid-stroke, within-loop merging keys the stroke's two faces
    inconsistently and the merged centerline fragments there. Corners are
    natural chain breaks for every consumer, so parking the wrap at one is
    free.
    """
    n = len(pts)
    if n < 3:
        return pts
    prev = pts - np.roll(pts, 1, axis=0)
    nxt = np.roll(pts, -1, axis=0) - pts
    dot = (prev * nxt).sum(axis=1)
    cross = prev[:, 0] * nxt[:, 1] - prev[:, 1] * nxt[:, 0]
    turn = np.abs(np.arctan2(cross, dot))
    return np.roll(pts, -int(np.argmax(turn)), axis=0)


def sample_loop(loop: Loop, delta: float, flat_tol: float = 1e-3) -> SampledLoop:
    """Resample a closed loop at consecutive arc-length spacing
    total_length / round(total_length / delta).

    Loops shorter than 2*delta degenerate to a midpoint pair (two points at
    opposite arc positions) so downstream slope estimates stay defined.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    poly = flatten_loop(loop, tol=flat_tol)
    total = geom.polyline_length(poly, closed=True)
    count = int(round(total / delta))
    if total < 2 * delta or count < 2:
        count = 2
    positions = np.arange(count) * (total / count)
    pts = geom.interpolate_along(poly, True, positions)
    return SampledLoop(_rotate_to_corner(pts), closed=True)


def sample_pathset(paths: VectorPathSet, delta: float) -> list[SampledPath]:
    out = []
    loop_counter = 0
    for pid, path in enumerate(paths.paths):
        sp = SampledPath(pid)
        for loop in path.loops:
            sl = sample_loop(loop, delta)
            sl.loop_id = loop_counter
            loop_counter += 1
            sp.loops.append(sl)
        out.append(sp)
    return out


def _loop_arrays(paths: list[SampledPath]):
    """Flatten all loops into parallel arrays with global loop ordinals."""
    pos = []
    loop_ord = []
    index = []
    loops = []
    for sp in paths:
        for sl in sp.loops:
            ordv = len(loops)
            loops.append((sp, sl))
            n = len(sl.points)
            pos.append(sl.points)
            loop_ord.append(np.full(n, ordv, dtype=np.int64))
            index.append(np.arange(n, dtype=np.int64))
    if not pos:
        return np.zeros((0, 2)), np.zeros(0, np.int64), np.zeros(0, np.int64), loops
    return np.concatenate(pos), np.concatenate(loop_ord), np.concatenate(index), loops


def merge_adjacent(
    paths: list[SampledPath],
    tau_merge: float,
    delta: float,
    adjacency_skip: int = 3,
    max_rounds: int = 32,
) -> list[SampledPath]:
    """Collapse point pairs on facing stroke edges into midpoints.

    A point "faces" the opposite edge when it lies within tau_merge of a
    polyline segment that is not its own local neighborhood (other loops, or
    the same loop more than `adjacency_skip` indices away). Facing points are
    paired greedily by ascending pair distance (ties by point order), so a
    half-phase offset between the two faces cannot starve a stretch of
    partners; each pair is replaced by its midpoint, kept on the pair's lower
    (loop, index) slot. Facing points left unpaired are dropped: their
    partners merged elsewhere and keeping them would leave off-center
    residue. Merging two points of one loop opens that loop (a stroke
    outline collapses to an out-and-back centerline).

    Rounds repeat until nothing changes, so the operation is a fixpoint and
    therefore idempotent.
    """
    if tau_merge <= 0:
        raise ValueError("tau_merge must be positive")
    cur = paths
    for _ in range(max_rounds):
        cur, changed = _merge_round(cur, tau_merge, delta, adjacency_skip)
        if not changed:
            break
    return cur


def _merge_round(
    paths: list[SampledPath],
    tau_merge: float,
    delta: float,
    adjacency_skip: int,
) -> tuple[list[SampledPath], bool]:
    pos, loop_ord, index, loops = _loop_arrays(paths)
    n = len(pos)
    if n == 0:
        return paths, False

    # segment table: consecutive point pairs per loop (wrapping when closed)
    seg_a = []
    seg_b = []
    seg_loop = []
    seg_i0 = []
    loop_sizes = {}
    for ordv, (_, sl) in enumerate(loops):
        p = sl.points
        m = len(p)
        loop_sizes[ordv] = m
        if m < 2:
            continue
        if sl.closed:
            a = p
            b = np.roll(p, -1, axis=0)
            i0 = np.arange(m)
        else:
            a = p[:-1]
            b = p[1:]
            i0 = np.arange(m - 1)
        seg_a.append(a)
        seg_b.append(b)
        seg_loop.append(np.full(len(a), ordv, dtype=np.int64))
        seg_i0.append(i0)
    if not seg_a:
        return paths, False
    seg_a = np.concatenate(seg_a)
    seg_b = np.concatenate(seg_b)
    seg_loop = np.concatenate(seg_loop)
    seg_i0 = np.concatenate(seg_i0)

    # index-consecutive points further apart than any real stroke step are
    # connectivity artifacts (e.g. the two ends of an opened outline), not ink
    real = np.hypot(*(seg_b - seg_a).T) <= 2.0 * delta
    seg_a, seg_b = seg_a[real], seg_b[real]
    seg_loop, seg_i0 = seg_loop[real], seg_i0[real]
    if len(seg_a) == 0:
        return paths, False

    mid = (seg_a + seg_b) / 2.0
    half = np.hypot(*(seg_b - seg_a).T) / 2.0
    reach = tau_merge + float(half.max(initial=0.0)) + 1e-9
    seg_tree = cKDTree(mid)
    neighbor_lists = seg_tree.query_ball_point(pos, reach)

    def is_adjacent(ordv: int, idx: int, s_loop: int, s_i0: int) -> bool:
        if ordv != s_loop:
            return False
        m = loop_sizes[ordv]
        d = abs(idx - s_i0)
        d = min(d, m - d)
        dd = abs(idx - (s_i0 + 1) % m)
        dd = min(dd, m - dd)
        return min(d, dd) <= adjacency_skip

    facing = np.zeros(n, dtype=bool)
    for i in range(n):
        cand = neighbor_lists[i]
        if not cand:
            continue
        oi = int(loop_ord[i])
        ii = int(index[i])
        for s in cand:
            if is_adjacent(oi, ii, int(seg_loop[s]), int(seg_i0[s])):
                continue
            d = geom.point_segment_distance(pos[i], seg_a[s], seg_b[s])
            if d < tau_merge:
                facing[i] = True
                break

    fidx = np.flatnonzero(facing)
    if fidx.size == 0:
        return paths, False

    # pair facing points greedily by ascending distance among non-adjacent
    # candidates; a maximal matching so ladders with phase offsets between
    # the faces cannot leave long unpaired stretches
    cap = float(np.hypot(tau_merge, delta / 2.0)) + 1e-9
    ftree = cKDTree(pos[fidx])
    pair_lists = ftree.query_ball_point(pos[fidx], cap)
    cand_i = []
    cand_j = []
    cand_d = []
    for a_local, cand in enumerate(pair_lists):
        gi = int(fidx[a_local])
        oi = int(loop_ord[gi])
        ii = int(index[gi])
        for b_local in cand:
            if b_local <= a_local:
                continue
            gj = int(fidx[b_local])
            oj = int(loop_ord[gj])
            if oi == oj:
                m = loop_sizes[oi]
                dd = abs(ii - int(index[gj]))
                if min(dd, m - dd) <= adjacency_skip:
                    continue
            cand_i.append(gi)
            cand_j.append(gj)
            cand_d.append(float(np.hypot(*(pos[gi] - pos[gj]))))

    keep_mask = np.ones(n, dtype=bool)
    midpoint_at: dict[int, np.ndarray] = {}
    loop_opened = set()
    loop_touched = set()
    paired = set()
    if cand_i:
        order = np.lexsort((np.asarray(cand_j), np.asarray(cand_i),
                            np.asarray(cand_d)))
        for c in order:
            gi, gj = cand_i[c], cand_j[c]
            if gi in paired or gj in paired:
                continue
            paired.add(gi)
            paired.add(gj)
            keyi = (int(loop_ord[gi]), int(index[gi]))
            keyj = (int(loop_ord[gj]), int(index[gj]))
            low, high = (gi, gj) if keyi <= keyj else (gj, gi)
            midpoint_at[low] = (pos[gi] + pos[gj]) / 2.0
            keep_mask[high] = False
            loop_touched.add(int(loop_ord[low]))
            if loop_ord[gi] == loop_ord[gj]:
                loop_opened.add(int(loop_ord[gi]))
    for gi in fidx:
        if int(gi) not in paired:
            keep_mask[gi] = False

    # rebuild loops in original traversal order
    cursor = 0
    flat_offsets = {}
    for ordv, (_, sl) in enumerate(loops):
        flat_offsets[ordv] = cursor
        cursor += len(sl.points)
    ord_of = {id(sl): ordv for ordv, (_, sl) in enumerate(loops)}
    out = []
    for sp in paths:
        nsp = SampledPath(sp.path_id)
        for sl in sp.loops:
            ordv = ord_of[id(sl)]
            base = flat_offsets[ordv]
            pts = []
            for i in range(len(sl.points)):
                g = base + i
                if not keep_mask[g]:
                    continue
                pts.append(midpoint_at.get(g, pos[g]))
            if not pts:
                continue
            closed = sl.closed and ordv not in loop_opened
            nl = SampledLoop(np.array(pts), closed, sl.loop_id,
                             merged=sl.merged or ordv in loop_touched)
            nsp.loops.append(nl)
        out.append(nsp)
    changed = bool((~keep_mask).any() or midpoint_at)
    return out, changed


def sampled_to_json(paths: list[SampledPath]) -> list[dict]:
    return [
        {
            "path_id": sp.path_id,
            "loops": [
                {"closed": sl.closed, "points": sl.points.tolist()}
                for sl in sp.loops
            ],
        }
        for sp in paths
    ]
