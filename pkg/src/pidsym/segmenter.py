"""Pipeline/symbol segregation over sampled points.

Labels each sampled point as straight-line (pipeline) material or
symbol-candidate, records the surviving line segments, detects junctions, and
emits candidate symbol regions: point clusters, gaps between collinear line
pairs, and bent line terminals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .sampler import SampledPath


class TooFewPointsError(ValueError):
    pass


@dataclass
class OrientedPoint:
    position: np.ndarray
    slope: float                  # radians in (-pi/2, pi/2]
    label: str                    # "line" or "symbol-candidate"
    path_id: int
    loop_id: int
    index: int


@dataclass
class LineSegmentRecord:
    endpoints: np.ndarray         # (2, 2)
    slope: float
    members: list[int]            # global point ids

    @property
    def length(self) -> float:
        d = self.endpoints[1] - self.endpoints[0]
        return float(np.hypot(d[0], d[1]))


@dataclass
class SymbolRegion:
    region_id: int
    points: np.ndarray            # (n, 2)
    bbox: tuple[float, float, float, float]
    incident_lines: int
    origin: str                   # "cluster" | "gap" | "terminal"
    chains: list[tuple[np.ndarray, bool]] = field(default_factory=list)


@dataclass
class SegmentationResult:
    points: list[OrientedPoint]
    lines: list[LineSegmentRecord]
    regions: list[SymbolRegion]
    junctions: list[int]          # global point ids
    stroke_height: float


def fold_angle(a: float) -> float:
    """Fold an angle to the undirected range (-pi/2, pi/2]."""
    a = a % math.pi
    if a > math.pi / 2:
        a -= math.pi
    return a


def _mean_direction(vectors: list[np.ndarray]) -> float:
    """Circular mean of undirected direction vectors via angle doubling."""
    cs = 0.0
    sn = 0.0
    last = None
    for v in vectors:
        n2 = v[0] * v[0] + v[1] * v[1]
        if n2 <= 0:
            continue
        cs += (v[0] * v[0] - v[1] * v[1]) / n2
        sn += 2.0 * v[0] * v[1] / n2
        last = v
    if last is None:
        return 0.0
    if cs * cs + sn * sn < 1e-24:
        return fold_angle(math.atan2(last[1], last[0]))
    return fold_angle(math.atan2(sn, cs) / 2.0)


def point_slope(points: np.ndarray, i: int, closed: bool = True) -> float:
    """Undirected tangent estimate at point i: the circular mean of the
    directions (p[i-1], p[i]), (p[i], p[i+1]), (p[i-1], p[i+1])."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n < 3:
        raise TooFewPointsError(f"need >= 3 points, got {n}")
    if closed:
        prev = pts[(i - 1) % n]
        nxt = pts[(i + 1) % n]
    else:
        prev = pts[max(i - 1, 0)]
        nxt = pts[min(i + 1, n - 1)]
    p = pts[i]
    return _mean_direction([p - prev, nxt - p, nxt - prev])


def loop_slopes(points: np.ndarray, closed: bool, max_step: float) -> np.ndarray:
    """Per-point slopes; index neighbors further than max_step are treated as
    missing (the loop may contain connectivity jumps after merging)."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    out = np.zeros(n)
    if n == 1:
        return out
    for i in range(n):
        if closed:
            ip = (i - 1) % n
            inx = (i + 1) % n
        else:
            ip = max(i - 1, 0)
            inx = min(i + 1, n - 1)
        prev = pts[ip]
        nxt = pts[inx]
        p = pts[i]
        vecs = []
        dprev = np.hypot(*(p - prev))
        dnext = np.hypot(*(nxt - p))
        use_prev = 0 < dprev <= max_step
        use_next = 0 < dnext <= max_step
        if use_prev:
            vecs.append(p - prev)
        if use_next:
            vecs.append(nxt - p)
        if use_prev and use_next:
            vecs.append(nxt - prev)
        if not vecs:
            out[i] = 0.0
        else:
            out[i] = _mean_direction(vecs)
    return out


def slope_diff(a: float, b: float) -> float:
    """Undirected angular difference in [0, pi/2]."""
    d = abs(a - b) % math.pi
    return min(d, math.pi - d)


def stroke_height(
    paths: list[SampledPath],
    delta: float,
    epsilon: float = 10.0,
    beta: float = 1.5,
    radius: float = 60.0,
    angle_tol_deg: float = 15.0,
) -> float:
    """Estimated stroke thickness from orthogonal facing-edge distances.

    For each sampled point, the distance to the nearest point of the sampled
    polylines (not just sampled vertices: nearest point on any non-adjacent
    segment) whose offset direction lies within the angular tolerance of the
    orthogonal to the point's slope, searched within `radius`;
    t = max(epsilon, beta * max over points of that nearest distance).
    Points with no orthogonal neighbor contribute nothing. Measuring against
    segments keeps the estimate equal to the stroke width even where the two
    faces are sampled out of phase.
    """
    table = build_point_table(paths, delta)
    pos = table.pos
    n = len(pos)
    if n == 0:
        return epsilon

    seg_a, seg_b, seg_loop, seg_i0 = [], [], [], []
    ordv = -1
    for sp in paths:
        for sl in sp.loops:
            ordv += 1
            p = sl.points
            m = len(p)
            if m < 2:
                continue
            if sl.closed:
                a, b, i0 = p, np.roll(p, -1, axis=0), np.arange(m)
            else:
                a, b, i0 = p[:-1], p[1:], np.arange(m - 1)
            keep = np.hypot(*(b - a).T) <= 2.5 * delta
            seg_a.append(a[keep])
            seg_b.append(b[keep])
            seg_loop.append(np.full(int(keep.sum()), ordv, dtype=np.int64))
            seg_i0.append(i0[keep])
    if not seg_a:
        return epsilon
    seg_a = np.concatenate(seg_a)
    seg_b = np.concatenate(seg_b)
    seg_loop = np.concatenate(seg_loop)
    seg_i0 = np.concatenate(seg_i0)

    half = np.hypot(*(seg_b - seg_a).T) / 2.0
    mid = (seg_a + seg_b) / 2.0
    tree = cKDTree(mid)
    lists = tree.query_ball_point(pos, radius + float(half.max(initial=0.0)) + 1e-9)
    counts = np.fromiter((len(c) for c in lists), dtype=np.int64, count=n)
    if counts.sum() == 0:
        return epsilon
    qi = np.repeat(np.arange(n), counts)
    si = np.concatenate([np.asarray(c, dtype=np.int64) for c in lists if c])

    # drop the two segments that contain the query point itself
    same_loop = table.loop_ord[qi] == seg_loop[si]
    sizes = np.array([table.loop_sizes[int(o)] for o in table.loop_ord],
                     dtype=np.int64)
    di = (table.index[qi] - seg_i0[si]) % np.maximum(sizes[qi], 1)
    own = same_loop & ((di == 0) | (di == 1))
    qi, si = qi[~own], si[~own]
    if qi.size == 0:
        return epsilon

    a = seg_a[si]
    ab = seg_b[si] - a
    ap = pos[qi] - a
    denom = np.maximum((ab * ab).sum(axis=1), 1e-300)
    tproj = np.clip((ap * ab).sum(axis=1) / denom, 0.0, 1.0)
    q = a + tproj[:, None] * ab
    d = q - pos[qi]
    dist = np.hypot(d[:, 0], d[:, 1])
    ok = (dist > 1e-9) & (dist <= radius)
    qi, d, dist = qi[ok], d[ok], dist[ok]
    if qi.size == 0:
        return epsilon

    ang = np.arctan2(d[:, 1], d[:, 0])
    target = table.slope[qi] + math.pi / 2
    diff = np.abs(ang - target) % math.pi
    diff = np.minimum(diff, math.pi - diff)
    cone = diff <= math.radians(angle_tol_deg)
    if not cone.any():
        return epsilon
    nearest = np.full(n, np.inf)
    np.minimum.at(nearest, qi[cone], dist[cone])
    finite = nearest[np.isfinite(nearest)]
    if finite.size == 0:
        return epsilon
    return max(epsilon, beta * float(finite.max()))


# ---------------------------------------------------------------------------
# flattened point table


@dataclass
class _PointTable:
    pos: np.ndarray               # (N, 2)
    slope: np.ndarray             # (N,)
    path_id: np.ndarray
    loop_ord: np.ndarray          # global loop ordinal
    loop_id: np.ndarray
    index: np.ndarray
    closed: np.ndarray            # per-point flag of owning loop
    loop_sizes: dict[int, int] = field(default_factory=dict)


def build_point_table(paths: list[SampledPath], delta: float) -> _PointTable:
    pos, slope, pid, lord, lid, idx, clo = [], [], [], [], [], [], []
    sizes = {}
    ordv = 0
    for sp in paths:
        for sl in sp.loops:
            n = len(sl.points)
            sizes[ordv] = n
            pos.append(sl.points)
            slope.append(loop_slopes(sl.points, sl.closed, 2.5 * delta))
            pid.append(np.full(n, sp.path_id))
            lord.append(np.full(n, ordv))
            lid.append(np.full(n, sl.loop_id))
            idx.append(np.arange(n))
            clo.append(np.full(n, sl.closed, dtype=bool))
            ordv += 1
    if not pos:
        z = np.zeros(0, dtype=np.int64)
        return _PointTable(np.zeros((0, 2)), np.zeros(0), z, z, z, z,
                           np.zeros(0, bool), sizes)
    return _PointTable(
        np.concatenate(pos), np.concatenate(slope),
        np.concatenate(pid).astype(np.int64), np.concatenate(lord).astype(np.int64),
        np.concatenate(lid).astype(np.int64), np.concatenate(idx).astype(np.int64),
        np.concatenate(clo), sizes,
    )


def _straight_runs(table: _PointTable, delta: float, run_slope_deg: float):
    """Maximal chains of index-consecutive points with near-constant slope.

    Returns (runs, run_id_per_point); run arc length uses real steps only.
    """
    tol = math.radians(run_slope_deg)
    n = len(table.pos)
    run_id = np.full(n, -1, dtype=np.int64)
    runs = []
    start = 0
    while start < n:
        ordv = table.loop_ord[start]
        end = start
        while end + 1 < n and table.loop_ord[end + 1] == ordv:
            end += 1
        m = end - start + 1
        closed = bool(table.closed[start])
        # chain within [start, end]
        breaks = []
        for i in range(m):
            j = (i + 1) % m
            if j == 0 and not closed:
                breaks.append(i)
                continue
            a = start + i
            b = start + j
            step = np.hypot(*(table.pos[b] - table.pos[a]))
            if step > 2.5 * delta or slope_diff(table.slope[a], table.slope[b]) > tol:
                breaks.append(i)
        if not breaks:
            # whole closed loop is one straight chain (degenerate ring)
            members = list(range(start, end + 1))
            runs.append(members)
            run_id[start:end + 1] = len(runs) - 1
        else:
            # runs go from after one break to the next break (cyclic)
            nb = len(breaks)
            for bi in range(nb):
                s = (breaks[bi] + 1) % m
                e = breaks[(bi + 1) % nb] if nb > 1 else breaks[bi]
                if nb == 1:
                    e = breaks[bi]
                members = []
                i = s
                while True:
                    members.append(start + i)
                    if i == e:
                        break
                    i = (i + 1) % m
                runs.append(members)
                for g in members:
                    run_id[g] = len(runs) - 1
        start = end + 1
    return runs, run_id


def _run_arclength(table: _PointTable, members: list[int], delta: float) -> float:
    total = 0.0
    for a, b in zip(members, members[1:]):
        step = float(np.hypot(*(table.pos[b] - table.pos[a])))
        if step <= 2.5 * delta:
            total += step
    return total


def classify_line_points(
    paths: list[SampledPath],
    t: float,
    m_windows: int,
    delta: float,
    run_slope_deg: float = 5.0,
    min_line_run: float = 150.0,
) -> tuple[list[OrientedPoint], _PointTable, np.ndarray, list[list[int]]]:
    """Two-stage labeling.

    Stage 1: maximal straight chains; a chain of arc length >= min_line_run is
    line-run material, everything else is a symbol-candidate. Stage 2: a
    line-run point keeps the `line` label only if no symbol-candidate point
    occupies its slab (m_windows * delta along the tangent on either side, t
    orthogonally); occupied points flip to symbol-candidate. Stage 2 lets
    glyph material claim the pipe points it touches while pure pipe junctions
    stay line (their occupants are themselves line-run members).
    """
    table = build_point_table(paths, delta)
    n = len(table.pos)
    labels = np.array(["symbol-candidate"] * n, dtype=object)
    if n == 0:
        return [], table, np.zeros(0, dtype=bool), []

    runs, run_id = _straight_runs(table, delta, run_slope_deg)
    on_line_run = np.zeros(n, dtype=bool)
    runs_long: list[list[int]] = []
    for members in runs:
        if _run_arclength(table, members, delta) >= min_line_run:
            runs_long.append(members)
            for g in members:
                on_line_run[g] = True

    labels[on_line_run] = "line"
    occupants = np.flatnonzero(~on_line_run)
    if occupants.size:
        occ_tree = cKDTree(table.pos[occupants])
        reach = math.hypot(m_windows * delta, t) + 1e-9
        line_ids = np.flatnonzero(on_line_run)
        cand_lists = occ_tree.query_ball_point(table.pos[line_ids], reach)
        for li, cand in zip(line_ids, cand_lists):
            th = table.slope[li]
            tx, ty = math.cos(th), math.sin(th)
            px, py = table.pos[li]
            for c in cand:
                g = int(occupants[c])
                if table.loop_ord[g] == table.loop_ord[li]:
                    m = table.loop_sizes[int(table.loop_ord[li])]
                    dd = abs(int(table.index[g]) - int(table.index[li]))
                    if min(dd, m - dd) <= m_windows + 2:
                        continue
                dx = table.pos[g][0] - px
                dy = table.pos[g][1] - py
                tang = abs(dx * tx + dy * ty)
                orth = abs(-dx * ty + dy * tx)
                if tang <= m_windows * delta and orth <= t:
                    labels[li] = "symbol-candidate"
                    break

    points = [
        OrientedPoint(table.pos[g], float(table.slope[g]), str(labels[g]),
                      int(table.path_id[g]), int(table.loop_id[g]),
                      int(table.index[g]))
        for g in range(n)
    ]
    return points, table, on_line_run, runs_long


def detect_junctions(
    table: _PointTable,
    delta: float,
    junction_slope_deg: float = 30.0,
) -> list[int]:
    """Points of local degree > 2 (radius 1.5*delta adjacency, non-consecutive
    branches) plus points whose slope turns sharply within a 3-point window."""
    n = len(table.pos)
    if n == 0:
        return []
    tree = cKDTree(table.pos)
    neigh = tree.query_ball_point(table.pos, 1.5 * delta)
    out = []
    tol = math.radians(junction_slope_deg)
    for g in range(n):
        degree = 0
        extra = 0
        for h in neigh[g]:
            if h == g:
                continue
            if table.loop_ord[h] == table.loop_ord[g]:
                m = table.loop_sizes[int(table.loop_ord[g])]
                dd = abs(int(table.index[h]) - int(table.index[g]))
                if min(dd, m - dd) == 1:
                    degree += 1
                    continue
            extra += 1
        if degree + extra > 2 and extra > 0:
            out.append(g)
            continue
        # sharp slope turn in the 3-point window centered here
        ordv = int(table.loop_ord[g])
        m = table.loop_sizes[ordv]
        i = int(table.index[g])
        base = g - i
        if m >= 3:
            if table.closed[g]:
                ip, inx = (i - 1) % m, (i + 1) % m
            else:
                ip, inx = max(i - 1, 0), min(i + 1, m - 1)
            if slope_diff(table.slope[base + ip], table.slope[base + inx]) > tol:
                out.append(g)
    return out


# ---------------------------------------------------------------------------
# region extraction


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def _tight_bbox(points: np.ndarray) -> tuple[float, float, float, float]:
    return (float(points[:, 0].min()), float(points[:, 1].min()),
            float(points[:, 0].max()), float(points[:, 1].max()))


def _bbox_intersects(a, b) -> bool:
    return not (a[2] < b[0] or b[2] < a[0] or a[3] < b[1] or b[3] < a[1])


def _point_bbox_distance(p, bbox) -> float:
    dx = max(bbox[0] - p[0], 0.0, p[0] - bbox[2])
    dy = max(bbox[1] - p[1], 0.0, p[1] - bbox[3])
    return math.hypot(dx, dy)


def _region_chains(
    ids: np.ndarray,
    table: _PointTable,
    delta: float,
) -> list[tuple[np.ndarray, bool]]:
    """Arc-ordered polyline chains over a region's member points.

    Members are grouped per loop and walked in boundary order; a chain breaks
    where membership skips an index or the spatial step exceeds 2.5 delta.
    A chain stays closed only when it covers its whole loop without a break.
    """
    chains = []
    by_loop: dict[int, list[int]] = {}
    for g in ids:
        by_loop.setdefault(int(table.loop_ord[g]), []).append(int(g))
    for ordv in sorted(by_loop):
        gs = sorted(by_loop[ordv], key=lambda g: int(table.index[g]))
        k = len(gs)
        m = table.loop_sizes[ordv]
        closed = bool(table.closed[gs[0]])
        idxs = [int(table.index[g]) for g in gs]

        def broken(a: int, b: int) -> bool:
            gap = (idxs[b] - idxs[a]) % m if closed else idxs[b] - idxs[a]
            step = float(np.hypot(*(table.pos[gs[b]] - table.pos[gs[a]])))
            return gap != 1 or step > 2.5 * delta

        if closed:
            break_at = [i for i in range(k) if broken(i, (i + 1) % k)]
            if not break_at:
                chains.append((table.pos[np.array(gs)], True))
                continue
            start = (break_at[0] + 1) % k
            order = [(start + i) % k for i in range(k)]
            gs = [gs[i] for i in order]
            idxs = [idxs[i] for i in order]
        cur = [gs[0]]
        for i in range(1, k):
            if broken(i - 1, i):
                chains.append((table.pos[np.array(cur)], False))
                cur = [gs[i]]
            else:
                cur.append(gs[i])
        chains.append((table.pos[np.array(cur)], False))
    return chains


def build_line_records(
    table: _PointTable,
    runs_long: list[list[int]],
) -> list[LineSegmentRecord]:
    """One record per long straight run.

    Records come from the stage-1 runs rather than the final labels so a
    record's endpoint reaches the material it abuts: stage 2 may relabel the
    last few run points next to a glyph as symbol-candidate, but the run chord
    still ends where the straight ink ends.
    """
    records = []
    for members in runs_long:
        if len(members) < 2:
            continue
        ends = np.array([table.pos[members[0]], table.pos[members[-1]]])
        slope = _mean_direction([ends[1] - ends[0]])
        rec = LineSegmentRecord(ends, slope, list(members))
        if rec.length > 0:
            records.append(rec)
    return records


def extract_symbol_regions(
    points: list[OrientedPoint],
    lines: list[LineSegmentRecord],
    table: _PointTable,
    on_line_run: np.ndarray,
    junction_ids: list[int],
    t: float,
    delta: float,
    collinear_deg: float = 5.0,
    gap_max: float = 120.0,
    gap_min_points: int = 3,
    cluster_link: float | None = None,
    cluster_min_points: int = 6,
    terminal_slope_deg: float = 30.0,
) -> list[SymbolRegion]:
    """Candidate symbol regions from clusters, line gaps, and bent terminals.

    Clustering runs over symbol-candidate points that are not members of any
    long straight run (flipped pipe points stay out, keeping region bboxes
    tight over glyph material).
    """
    if cluster_link is None:
        cluster_link = 2.0 * delta
    n = len(points)
    cand_ids = np.array([g for g in range(n)
                         if points[g].label == "symbol-candidate"
                         and not on_line_run[g]], dtype=np.int64)

    clusters: list[np.ndarray] = []
    if cand_ids.size:
        cpos = table.pos[cand_ids]
        tree = cKDTree(cpos)
        uf = _UnionFind(len(cand_ids))
        for a, b in tree.query_pairs(cluster_link):
            uf.union(a, b)
        groups: dict[int, list[int]] = {}
        for i in range(len(cand_ids)):
            groups.setdefault(uf.find(i), []).append(i)
        clusters = [cand_ids[np.array(sorted(groups[k]))] for k in sorted(groups)]

    cluster_bboxes = [_tight_bbox(table.pos[c]) for c in clusters]
    absorbed = set()
    raw_regions: list[tuple[str, np.ndarray]] = []

    # gap regions between collinear line record pairs
    gap_members: list[set[int]] = []
    tol = math.radians(collinear_deg)
    rec_pos = [table.pos[np.asarray(r.members, dtype=np.int64)] for r in lines]
    for i in range(len(lines)):
        for j in range(i + 1, len(lines)):
            a, b = lines[i], lines[j]
            if slope_diff(a.slope, b.slope) > tol:
                continue
            # closest facing endpoint pair and axial/lateral split
            best = None
            for pa in a.endpoints:
                for pb in b.endpoints:
                    d = float(np.hypot(*(pb - pa)))
                    if best is None or d < best[0]:
                        best = (d, pa, pb)
            dist, pa, pb = best
            if not (0.0 < dist <= gap_max):
                continue
            th = a.slope
            tx, ty = math.cos(th), math.sin(th)
            dx, dy = pb[0] - pa[0], pb[1] - pa[1]
            axial = abs(dx * tx + dy * ty)
            lateral = abs(-dx * ty + dy * tx)
            if lateral >= t or axial <= 0:
                continue
            x0 = min(pa[0], pb[0])
            x1 = max(pa[0], pb[0])
            y0 = min(pa[1], pb[1])
            y1 = max(pa[1], pb[1])
            # inflate the slab to a minimum side of 2t
            if x1 - x0 < 2 * t:
                cx = (x0 + x1) / 2
                x0, x1 = cx - t, cx + t
            if y1 - y0 < 2 * t:
                cy = (y0 + y1) / 2
                y0, y1 = cy - t, cy + t
            slab = (x0, y0, x1, y1)
            # a gap crossed by some other line is a junction, not a symbol
            crossed = False
            for k in range(len(lines)):
                if k == i or k == j:
                    continue
                op = rec_pos[k]
                if np.any((op[:, 0] >= slab[0]) & (op[:, 0] <= slab[2])
                          & (op[:, 1] >= slab[1]) & (op[:, 1] <= slab[3])):
                    crossed = True
                    break
            if crossed:
                continue
            member_clusters = set()
            for ci, cb in enumerate(cluster_bboxes):
                if _bbox_intersects(slab, cb):
                    member_clusters.add(ci)
            if cand_ids.size:
                inside = [g for g in cand_ids
                          if slab[0] <= table.pos[g][0] <= slab[2]
                          and slab[1] <= table.pos[g][1] <= slab[3]]
            else:
                inside = []
            ids = set(inside)
            for ci in member_clusters:
                ids.update(int(g) for g in clusters[ci])
            if len(ids) < gap_min_points:
                continue
            absorbed.update(member_clusters)
            gap_members.append(ids)

    # gap regions sharing material merge into one region
    merged_gaps: list[set[int]] = []
    for ids in gap_members:
        target = None
        for existing in merged_gaps:
            if existing & ids:
                target = existing
                break
        if target is None:
            merged_gaps.append(set(ids))
        else:
            target.update(ids)
    changedflag = True
    while changedflag:
        changedflag = False
        for i in range(len(merged_gaps)):
            for j in range(i + 1, len(merged_gaps)):
                if merged_gaps[i] & merged_gaps[j]:
                    merged_gaps[i] |= merged_gaps[j]
                    del merged_gaps[j]
                    changedflag = True
                    break
            if changedflag:
                break
    for ids in merged_gaps:
        raw_regions.append(("gap", np.array(sorted(ids), dtype=np.int64)))

    # leftover clusters big enough on their own
    for ci, c in enumerate(clusters):
        if ci in absorbed:
            continue
        if len(c) < cluster_min_points:
            continue
        bb = cluster_bboxes[ci]
        if min(bb[2] - bb[0], bb[3] - bb[1]) < 2 * t:
            continue
        raw_regions.append(("cluster", c))

    # bent line terminals not already explained
    term_tol = math.radians(terminal_slope_deg)
    junction_set = set(junction_ids)
    existing_bboxes = [_tight_bbox(table.pos[ids]) for _, ids in raw_regions]
    for rec in lines:
        for endpoint_gid in (rec.members[0], rec.members[-1]):
            ordv = int(table.loop_ord[endpoint_gid])
            m = table.loop_sizes[ordv]
            i = int(table.index[endpoint_gid])
            base = endpoint_gid - i
            closed = bool(table.closed[endpoint_gid])
            for step in (-1, 1):
                j = i + step
                if closed:
                    j %= m
                elif not (0 <= j < m):
                    continue
                g = base + j
                if g in rec.members or on_line_run[g]:
                    continue
                if np.hypot(*(table.pos[g] - table.pos[endpoint_gid])) > 2.5 * delta:
                    continue
                if slope_diff(table.slope[g], rec.slope) <= term_tol:
                    continue
                if endpoint_gid in junction_set or g in junction_set:
                    continue
                p = table.pos[g]
                near_existing = any(
                    _point_bbox_distance(p, bb) <= 2 * delta
                    for bb in existing_bboxes
                )
                if near_existing:
                    continue
                raw_regions.append(("terminal", np.array([g], dtype=np.int64)))
                existing_bboxes.append((p[0] - t, p[1] - t, p[0] + t, p[1] + t))

    # assemble with deterministic ids by sorted bbox
    assembled = []
    for origin, ids in raw_regions:
        pts = table.pos[ids]
        if origin == "terminal":
            c = pts[0]
            bbox = (c[0] - t, c[1] - t, c[0] + t, c[1] + t)
        else:
            bbox = _tight_bbox(pts)
        assembled.append((bbox, origin, pts, ids))
    assembled.sort(key=lambda r: r[0])
    regions = []
    for rid, (bbox, origin, pts, ids) in enumerate(assembled):
        incident = sum(
            1 for rec in lines
            if min(_point_bbox_distance(rec.endpoints[0], bbox),
                   _point_bbox_distance(rec.endpoints[1], bbox)) <= 2 * delta
        )
        regions.append(SymbolRegion(rid, pts, bbox, incident, origin,
                                    _region_chains(ids, table, delta)))
    return regions


# ---------------------------------------------------------------------------
# pipeline glue


def segment_paths(
    premerge: list[SampledPath],
    merged: list[SampledPath],
    delta: float,
    epsilon: float = 10.0,
    beta: float = 1.5,
    ortho_radius: float = 60.0,
    ortho_angle_deg: float = 15.0,
    m_windows: int = 5,
    run_slope_deg: float = 5.0,
    min_line_run: float = 150.0,
    collinear_deg: float = 5.0,
    gap_max: float = 120.0,
    gap_min_points: int = 3,
    cluster_link: float | None = None,
    cluster_min_points: int = 6,
    terminal_slope_deg: float = 30.0,
    junction_slope_deg: float = 30.0,
) -> SegmentationResult:
    """Full segregation: stroke height from pre-merge geometry, labeling and
    region extraction on merged geometry."""
    t = stroke_height(premerge, delta, epsilon, beta,
                      ortho_radius, ortho_angle_deg)
    points, table, on_line_run, runs_long = classify_line_points(
        merged, t, m_windows, delta, run_slope_deg, min_line_run)
    junctions = detect_junctions(table, delta, junction_slope_deg)
    lines = build_line_records(table, runs_long)
    regions = extract_symbol_regions(
        points, lines, table, on_line_run, junctions, t, delta,
        collinear_deg, gap_max, gap_min_points, cluster_link,
        cluster_min_points, terminal_slope_deg)
    return SegmentationResult(points, lines, regions, junctions, t)


def regions_to_json(result: SegmentationResult) -> dict:
    return {
        "stroke_height": result.stroke_height,
        "regions": [
            {
                "region_id": r.region_id,
                "bbox": list(r.bbox),
                "origin": r.origin,
                "incident_lines": r.incident_lines,
                "points": r.points.tolist(),
            }
            for r in result.regions
        ],
    }


def render_overlay(height: int, width: int, result: SegmentationResult) -> np.ndarray:
    """RGB overlay: line points gray, region points red, junctions blue."""
    img = np.full((height, width, 3), 255, dtype=np.uint8)

    def paint(pts: np.ndarray, color) -> None:
        if len(pts) == 0:
            return
        xs = np.clip(np.round(pts[:, 0]).astype(int), 0, width - 1)
        ys = np.clip(np.round(pts[:, 1]).astype(int), 0, height - 1)
        img[ys, xs] = color

    line_pts = np.array([p.position for p in result.points if p.label == "line"])
    if line_pts.size:
        paint(line_pts, (128, 128, 128))
    for r in result.regions:
        paint(r.points, (220, 30, 30))
    if result.junctions:
        jp = np.array([result.points[g].position for g in result.junctions])
        paint(jp, (30, 30, 220))
    return img
