"""Contour vectorization: binary mask to piecewise line / cubic-bezier loops.

The classic five-stage tracing algorithm for bilevel images: boundary
decomposition with turn policies and despeckling, longest-straight-subpath
analysis, penalty-minimal polygon selection, least-squares vertex adjustment,
and corner-aware smoothing with optional curve optimization.

Coordinates are pixel-corner lattice coordinates, x right, y down: pixel
(x, y) spans corners (x, y) to (x+1, y+1). Contours of one connected
foreground component are grouped into one path (outer boundary plus holes);
outer loops carry positive signed area, holes negative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .raster import BinaryImage


class DegenerateContourError(ValueError):
    pass


# ---------------------------------------------------------------------------
# data model


@dataclass
class Segment:
    kind: str           # "line" or "cubic"
    pts: np.ndarray     # (2, 2) endpoints for a line, (4, 2) for a cubic

    def reversed(self) -> "Segment":
        return Segment(self.kind, self.pts[::-1].copy())


@dataclass
class Loop:
    segments: list[Segment]
    orientation: str    # "outer" or "hole"
    signed_area: float = 0.0

    def start(self) -> np.ndarray:
        return self.segments[0].pts[0]


@dataclass
class Path:
    loops: list[Loop]


@dataclass
class VectorPathSet:
    paths: list[Path]
    width: int
    height: int


@dataclass
class PixelContour:
    """One closed boundary walk on the pixel-corner lattice."""

    points: np.ndarray  # (n, 2) int corners, cyclic
    sign: int           # +1 outer boundary, -1 hole boundary
    area: int           # enclosed pixel count
    component: int = -1


# ---------------------------------------------------------------------------
# stage 1: boundary decomposition


def _majority(mask: np.ndarray, x: int, y: int) -> bool:
    h, w = mask.shape

    def at(px: int, py: int) -> int:
        if 0 <= px < w and 0 <= py < h:
            return int(mask[py, px])
        return 0

    for i in range(2, 5):
        ct = 0
        for a in range(-i + 1, i - 1):
            ct += 1 if at(x + a, y + i - 1) else -1
            ct += 1 if at(x + i - 1, y + a - 1) else -1
            ct += 1 if at(x + a - 1, y - i) else -1
            ct += 1 if at(x - i, y + a) else -1
        if ct > 0:
            return True
        if ct < 0:
            return False
    return False


def _find_path(work: np.ndarray, x0: int, y0: int, sign: int, turn_policy: str):
    """Walk one closed boundary of the true-region of `work` starting at
    corner (x0, y0), turning per the policy at ambiguous corners."""
    h, w = work.shape

    def at(px: int, py: int) -> int:
        if 0 <= px < w and 0 <= py < h:
            return int(work[py, px])
        return 0

    x, y = x0, y0
    dirx, diry = 0, 1
    pts: list[tuple[int, int]] = []
    area = 0
    while True:
        pts.append((x, y))
        x += dirx
        y += diry
        area -= x * diry
        if x == x0 and y == y0:
            break
        left = at(x + (dirx + diry - 1) // 2, y + (diry - dirx - 1) // 2)
        right = at(x + (dirx - diry - 1) // 2, y + (diry + dirx - 1) // 2)
        if right and not left:
            if (
                turn_policy == "right"
                or (turn_policy == "black" and sign > 0)
                or (turn_policy == "white" and sign < 0)
                or (turn_policy == "majority" and _majority(work, x, y))
                or (turn_policy == "minority" and not _majority(work, x, y))
            ):
                dirx, diry = -diry, dirx   # turn right
            else:
                dirx, diry = diry, -dirx   # turn left
        elif right:
            dirx, diry = -diry, dirx
        elif not left:
            dirx, diry = diry, -dirx
    return np.array(pts, dtype=np.int64), area


def _xor_path(work: np.ndarray, pts: np.ndarray) -> None:
    """Flip the pixels enclosed by the walk (row spans up to the walk's max x)."""
    max_x = int(pts[:, 0].max())
    y1 = int(pts[0, 1])
    for i in range(1, len(pts)):
        x = int(pts[i, 0])
        y = int(pts[i, 1])
        if y != y1:
            min_y = min(y1, y)
            if x < max_x:
                work[min_y, x:max_x] ^= True
            y1 = y


def decompose_paths(
    image: BinaryImage,
    turn_policy: str = "minority",
    turdsize: int = 2,
) -> list[PixelContour]:
    """Trace every boundary of the mask into closed corner walks.

    Walks enclosing fewer than `turdsize` pixels are dropped. Each contour is
    annotated with the connected component (8-connectivity) of dark pixels it
    borders, so callers can group outer boundaries with their holes.
    """
    mask = image.mask
    h, w = mask.shape
    work = mask.copy()
    labels, _ = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    contours: list[PixelContour] = []
    cy = 0
    cx = 0
    while cy < h:
        row = work[cy]
        xs = np.flatnonzero(row[cx:])
        if xs.size == 0:
            cy += 1
            cx = 0
            continue
        x0 = cx + int(xs[0])
        y0 = cy
        sign = 1 if mask[y0, x0] else -1
        pts, area = _find_path(work, x0, y0, sign, turn_policy)
        _xor_path(work, pts)
        if area >= turdsize:
            if sign > 0:
                comp = int(labels[y0, x0])
            else:
                # a hole's first scan pixel is white; the dark pixel directly
                # above it belongs to the enclosing component
                comp = int(labels[y0 - 1, x0]) if y0 > 0 else 0
            contours.append(PixelContour(pts, sign, area, comp))
        cx = x0  # resume the scan where we stopped; the region was cleared
    return contours


# ---------------------------------------------------------------------------
# small geometry helpers (infinity-norm orthogonal vectors, cross products)


def _sign(v) -> int:
    return 1 if v > 0 else (-1 if v < 0 else 0)


def _dpara(p0, p1, p2) -> float:
    return (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1])


def _ddenom(p0, p2) -> float:
    rx = -_sign(p2[1] - p0[1])
    ry = _sign(p2[0] - p0[0])
    return ry * (p2[0] - p0[0]) - rx * (p2[1] - p0[1])


def _cprod(p0, p1, p2, p3) -> float:
    x1 = p1[0] - p0[0]
    y1 = p1[1] - p0[1]
    x2 = p3[0] - p2[0]
    y2 = p3[1] - p2[1]
    return x1 * y2 - x2 * y1


def _iprod(p0, p1, p2) -> float:
    x1 = p1[0] - p0[0]
    y1 = p1[1] - p0[1]
    x2 = p2[0] - p0[0]
    y2 = p2[1] - p0[1]
    return x1 * x2 + y1 * y2


def _iprod1(p0, p1, p2, p3) -> float:
    x1 = p1[0] - p0[0]
    y1 = p1[1] - p0[1]
    x2 = p3[0] - p2[0]
    y2 = p3[1] - p2[1]
    return x1 * x2 + y1 * y2


def _ddist(p, q) -> float:
    return math.hypot(p[0] - q[0], p[1] - q[1])


def _interval(t: float, a, b) -> tuple[float, float]:
    return (a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]))


def _bezier_point(t: float, p0, p1, p2, p3) -> tuple[float, float]:
    s = 1.0 - t
    c0 = s * s * s
    c1 = 3.0 * s * s * t
    c2 = 3.0 * s * t * t
    c3 = t * t * t
    return (
        c0 * p0[0] + c1 * p1[0] + c2 * p2[0] + c3 * p3[0],
        c0 * p0[1] + c1 * p1[1] + c2 * p2[1] + c3 * p3[1],
    )


def _bezier_tangent_t(p0, p1, p2, p3, q0, q1) -> float:
    """Parameter where the bezier's tangent is parallel to q1 - q0, or -1."""
    A = _cprod(p0, p1, q0, q1)
    B = _cprod(p1, p2, q0, q1)
    C = _cprod(p2, p3, q0, q1)
    a = A - 2.0 * B + C
    b = -2.0 * A + 2.0 * B
    c = A
    d = b * b - 4.0 * a * c
    if a == 0.0 or d < 0.0:
        return -1.0
    s = math.sqrt(d)
    r1 = (-b + s) / (2.0 * a)
    r2 = (-b - s) / (2.0 * a)
    if 0.0 <= r1 <= 1.0:
        return r1
    if 0.0 <= r2 <= 1.0:
        return r2
    return -1.0


def _cyclic(a: int, b: int, c: int) -> bool:
    """True iff b lies in the half-open cyclic interval [a, c)."""
    if a <= c:
        return a <= b < c
    return a <= b or b < c


# ---------------------------------------------------------------------------
# stages 2-3: straight subpaths and the penalty-minimal polygon


def _calc_lon(pts: np.ndarray) -> list[int]:
    """For each index i, the last index reachable by a straight subpath."""
    n = len(pts)
    px = pts[:, 0].tolist()
    py = pts[:, 1].tolist()
    nc = [0] * n
    pivk = [0] * n
    lon = [0] * n

    k = 0
    for i in range(n - 1, -1, -1):
        if px[i] != px[k] and py[i] != py[k]:
            k = i + 1
        nc[i] = k

    for i in range(n - 1, -1, -1):
        ct = [0, 0, 0, 0]
        d = (3 + 3 * (px[(i + 1) % n] - px[i]) + (py[(i + 1) % n] - py[i])) // 2
        ct[d] += 1
        c0x = c0y = c1x = c1y = 0
        k = nc[i]
        k1 = i
        found = False
        while True:
            d = (3 + 3 * _sign(px[k] - px[k1]) + _sign(py[k] - py[k1])) // 2
            ct[d] += 1
            if ct[0] and ct[1] and ct[2] and ct[3]:
                pivk[i] = k1
                found = True
                break
            cx = px[k] - px[i]
            cy = py[k] - py[i]
            if c0x * cy - c0y * cx < 0 or c1x * cy - c1y * cx > 0:
                break
            if abs(cx) > 1 or abs(cy) > 1:
                ox = cx + (1 if (cy >= 0 and (cy > 0 or cx < 0)) else -1)
                oy = cy + (1 if (cx <= 0 and (cx < 0 or cy < 0)) else -1)
                if c0x * oy - c0y * ox >= 0:
                    c0x, c0y = ox, oy
                ox = cx + (1 if (cy <= 0 and (cy < 0 or cx < 0)) else -1)
                oy = cy + (1 if (cx >= 0 and (cx > 0 or cy < 0)) else -1)
                if c1x * oy - c1y * ox <= 0:
                    c1x, c1y = ox, oy
            k1 = k
            k = nc[k1]
            if not _cyclic(k, i, k1):
                break
        if not found:
            dkx = _sign(px[k] - px[k1])
            dky = _sign(py[k] - py[k1])
            cx = px[k1] - px[i]
            cy = py[k1] - py[i]
            a = c0x * cy - c0y * cx
            b = c0x * dky - c0y * dkx
            c = c1x * cy - c1y * cx
            dd = c1x * dky - c1y * dkx
            j = 10000000
            if b < 0:
                j = a // -b
            if dd > 0:
                j = min(j, -c // dd)
            pivk[i] = (k1 + j) % n

    j = pivk[n - 1]
    lon[n - 1] = j
    for i in range(n - 2, -1, -1):
        if _cyclic(i + 1, pivk[i], j):
            j = pivk[i]
        lon[i] = j
    i = n - 1
    while _cyclic((i + 1) % n, j, lon[i]):
        lon[i] = j
        i -= 1
    return lon


def _calc_sums(pts: np.ndarray):
    """Cyclic prefix sums of x, y, xy, x^2, y^2 relative to the first point."""
    x = (pts[:, 0] - pts[0, 0]).astype(np.float64)
    y = (pts[:, 1] - pts[0, 1]).astype(np.float64)
    z = np.zeros(1)
    sx = np.concatenate([z, np.cumsum(x)])
    sy = np.concatenate([z, np.cumsum(y)])
    sxy = np.concatenate([z, np.cumsum(x * y)])
    sx2 = np.concatenate([z, np.cumsum(x * x)])
    sy2 = np.concatenate([z, np.cumsum(y * y)])
    return sx.tolist(), sy.tolist(), sxy.tolist(), sx2.tolist(), sy2.tolist()


def _best_polygon(pts: np.ndarray, lon: list[int], sums) -> list[int]:
    n = len(pts)
    px = pts[:, 0].tolist()
    py = pts[:, 1].tolist()
    sx, sy, sxy, sx2, sy2 = sums
    x0 = px[0]
    y0 = py[0]

    def penalty3(i: int, j: int) -> float:
        # least-squares distance of subpath points i..j from chord (i, j)
        r = 0
        if j >= n:
            j -= n
            r = 1
        if r == 0:
            x = sx[j + 1] - sx[i]
            y = sy[j + 1] - sy[i]
            xy = sxy[j + 1] - sxy[i]
            x2 = sx2[j + 1] - sx2[i]
            y2 = sy2[j + 1] - sy2[i]
            k = j + 1 - i
        else:
            x = sx[j + 1] - sx[i] + sx[n]
            y = sy[j + 1] - sy[i] + sy[n]
            xy = sxy[j + 1] - sxy[i] + sxy[n]
            x2 = sx2[j + 1] - sx2[i] + sx2[n]
            y2 = sy2[j + 1] - sy2[i] + sy2[n]
            k = j + 1 - i + n
        pxm = (px[i] + px[j]) / 2.0 - x0
        pym = (py[i] + py[j]) / 2.0 - y0
        ey = px[j] - px[i]
        ex = -(py[j] - py[i])
        a = (x2 - 2 * x * pxm) / k + pxm * pxm
        b = (xy - x * pym - y * pxm) / k + pxm * pym
        c = (y2 - 2 * y * pym) / k + pym * pym
        s = ex * ex * a + 2 * ex * ey * b + ey * ey * c
        return math.sqrt(s) if s > 0 else 0.0

    clip0 = [0] * n
    for i in range(n):
        c = (lon[(i - 1) % n] - 1) % n
        if c == i:
            c = (i + 1) % n
        clip0[i] = n if c < i else c
    clip1 = [0] * (n + 1)
    j = 1
    for i in range(n):
        while j <= clip0[i]:
            clip1[j] = i
            j += 1

    seg0 = [0] * (n + 1)
    i = 0
    j = 0
    while i < n:
        seg0[j] = i
        i = clip0[i]
        j += 1
    seg0[j] = n
    m = j

    seg1 = [0] * (n + 1)
    i = n
    for j in range(m, 0, -1):
        seg1[j] = i
        i = clip1[i]
    seg1[0] = 0

    pen = [0.0] * (n + 1)
    prev = [0] * (n + 1)
    for j in range(1, m + 1):
        for i in range(seg1[j], seg0[j] + 1):
            best = -1.0
            for k in range(seg0[j - 1], clip1[i] - 1, -1):
                this = penalty3(k, i) + pen[k]
                if best < 0 or this < best:
                    prev[i] = k
                    best = this
            pen[i] = best

    po = [0] * m
    i = n
    j = m - 1
    while i > 0:
        i = prev[i]
        po[j] = i
        j -= 1
    return po


# ---------------------------------------------------------------------------
# stage 4: vertex adjustment


def _pointslope(pts: np.ndarray, sums, i: int, j: int):
    """Least-squares line through subpath points i..j: returns (center, dir)."""
    n = len(pts)
    sx, sy, sxy, sx2, sy2 = sums
    r = 0
    while j >= n:
        j -= n
        r += 1
    while i >= n:
        i -= n
        r -= 1
    while j < 0:
        j += n
        r += 1
    while i < 0:
        i += n
        r -= 1
    x = sx[j + 1] - sx[i] + r * sx[n]
    y = sy[j + 1] - sy[i] + r * sy[n]
    xy = sxy[j + 1] - sxy[i] + r * sxy[n]
    x2 = sx2[j + 1] - sx2[i] + r * sx2[n]
    y2 = sy2[j + 1] - sy2[i] + r * sy2[n]
    k = j + 1 - i + r * n
    ctrx = x / k
    ctry = y / k
    a = (x2 - x * x / k) / k
    b = (xy - x * y / k) / k
    c = (y2 - y * y / k) / k
    lam = (a + c + math.sqrt((a - c) * (a - c) + 4 * b * b)) / 2.0
    a -= lam
    c -= lam
    if abs(a) >= abs(c):
        ln = math.hypot(a, b)
        if ln != 0:
            return (ctrx, ctry), (-b / ln, a / ln)
    else:
        ln = math.hypot(c, b)
        if ln != 0:
            return (ctrx, ctry), (-c / ln, b / ln)
    return (ctrx, ctry), (0.0, 0.0)


def _quadform(Q, wx: float, wy: float) -> float:
    v = (wx, wy, 1.0)
    s = 0.0
    for l in range(3):
        for k in range(3):
            s += v[l] * Q[l][k] * v[k]
    return s


def _adjust_vertices(pts: np.ndarray, po: list[int], sums) -> list[tuple[float, float]]:
    """Place each polygon vertex at the least-squares intersection of its two
    adjacent fitted lines, constrained to the unit square around the corner."""
    m = len(po)
    n = len(pts)
    x0 = int(pts[0, 0])
    y0 = int(pts[0, 1])
    ctr = []
    direc = []
    for i in range(m):
        j = po[(i + 1) % m]
        j = (j - po[i]) % n + po[i]
        c, d = _pointslope(pts, sums, po[i], j)
        ctr.append(c)
        direc.append(d)

    q = []
    for i in range(m):
        d = direc[i][0] ** 2 + direc[i][1] ** 2
        mat = [[0.0] * 3 for _ in range(3)]
        if d != 0.0:
            # homogeneous form of the fitted line through ctr with tangent dir
            v = (direc[i][1], -direc[i][0],
                 direc[i][0] * ctr[i][1] - direc[i][1] * ctr[i][0])
            for l in range(3):
                for k in range(3):
                    mat[l][k] = v[l] * v[k] / d
        q.append(mat)

    vertices: list[tuple[float, float]] = []
    for i in range(m):
        Q = [[0.0] * 3 for _ in range(3)]
        sxp = float(pts[po[i], 0] - x0)
        syp = float(pts[po[i], 1] - y0)
        jm = (i - 1) % m
        for l in range(3):
            for k in range(3):
                Q[l][k] = q[jm][l][k] + q[i][l][k]
        wx = wy = 0.0
        while True:
            det = Q[0][0] * Q[1][1] - Q[0][1] * Q[1][0]
            if det != 0.0:
                wx = (-Q[0][2] * Q[1][1] + Q[1][2] * Q[0][1]) / det
                wy = (Q[0][2] * Q[1][0] - Q[1][2] * Q[0][0]) / det
                break
            # singular: add a mock constraint orthogonal to the existing one
            if Q[0][0] > Q[1][1]:
                v = [-Q[0][1], Q[0][0], 0.0]
            elif Q[1][1] != 0.0:
                v = [-Q[1][1], Q[1][0], 0.0]
            else:
                v = [1.0, 0.0, 0.0]
            d = v[0] * v[0] + v[1] * v[1]
            v[2] = -v[1] * syp - v[0] * sxp
            for l in range(3):
                for k in range(3):
                    Q[l][k] += v[l] * v[k] / d
        dx = abs(wx - sxp)
        dy = abs(wy - syp)
        if dx <= 0.5 and dy <= 0.5:
            vertices.append((wx + x0, wy + y0))
            continue
        # minimize the quadratic form inside the unit square around the corner
        best = _quadform(Q, sxp, syp)
        xmin, ymin = sxp, syp
        if Q[0][0] != 0.0:
            for z in range(2):
                wyc = syp - 0.5 + z
                wxc = -(Q[0][1] * wyc + Q[0][2]) / Q[0][0]
                if abs(wxc - sxp) <= 0.5:
                    cand = _quadform(Q, wxc, wyc)
                    if cand < best:
                        best, xmin, ymin = cand, wxc, wyc
        if Q[1][1] != 0.0:
            for z in range(2):
                wxc = sxp - 0.5 + z
                wyc = -(Q[1][0] * wxc + Q[1][2]) / Q[1][1]
                if abs(wyc - syp) <= 0.5:
                    cand = _quadform(Q, wxc, wyc)
                    if cand < best:
                        best, xmin, ymin = cand, wxc, wyc
        for l in range(2):
            for k in range(2):
                wxc = sxp - 0.5 + l
                wyc = syp - 0.5 + k
                cand = _quadform(Q, wxc, wyc)
                if cand < best:
                    best, xmin, ymin = cand, wxc, wyc
        vertices.append((xmin + x0, ymin + y0))
    return vertices


# ---------------------------------------------------------------------------
# stage 5: smoothing and curve optimization


@dataclass
class _Curve:
    m: int
    tag: list[str] = field(default_factory=list)
    c: list[tuple[float, float]] = field(default_factory=list)  # 3 per segment
    vertex: list[tuple[float, float]] = field(default_factory=list)
    alpha: list[float] = field(default_factory=list)

    @classmethod
    def empty(cls, m: int) -> "_Curve":
        z = (0.0, 0.0)
        return cls(m, ["CURVE"] * m, [z] * (3 * m), [z] * m, [0.0] * m)


def _smooth(vertices: list[tuple[float, float]], alphamax: float) -> _Curve:
    m = len(vertices)
    curve = _Curve.empty(m)
    for i in range(m):
        j = (i + 1) % m
        k = (i + 2) % m
        p4 = _interval(0.5, vertices[k], vertices[j])
        denom = _ddenom(vertices[i], vertices[k])
        if denom != 0.0:
            dd = abs(_dpara(vertices[i], vertices[j], vertices[k]) / denom)
            alpha = (1.0 - 1.0 / dd) if dd > 1 else 0.0
            alpha /= 0.75
        else:
            alpha = 4.0 / 3.0
        if alpha >= alphamax:
            curve.tag[j] = "CORNER"
            curve.c[3 * j + 1] = vertices[j]
            curve.c[3 * j + 2] = p4
        else:
            alpha = min(max(alpha, 0.55), 1.0)
            curve.tag[j] = "CURVE"
            curve.c[3 * j + 0] = _interval(0.5 + 0.5 * alpha, vertices[i], vertices[j])
            curve.c[3 * j + 1] = _interval(0.5 + 0.5 * alpha, vertices[k], vertices[j])
            curve.c[3 * j + 2] = p4
        curve.alpha[j] = alpha
        curve.vertex[j] = vertices[j]
    return curve


class _Opti:
    __slots__ = ("pen", "c0", "c1", "t", "s", "alpha")

    def __init__(self):
        self.pen = 0.0
        self.c0 = (0.0, 0.0)
        self.c1 = (0.0, 0.0)
        self.t = 0.0
        self.s = 0.0
        self.alpha = 0.0


def _opti_penalty(curve: _Curve, i: int, j: int, res: _Opti,
                  opttolerance: float, convc: list[int], areac: list[float]) -> bool:
    """Try to replace segments i+1..j by one bezier; True means infeasible."""
    m = curve.m
    vertex = curve.vertex
    if i == j:
        return True
    k = i
    i1 = (i + 1) % m
    k1 = (k + 1) % m
    conv = convc[k1]
    if conv == 0:
        return True
    d = _ddist(vertex[i], vertex[i1])
    k = k1
    while k != j:
        k1 = (k + 1) % m
        k2 = (k + 2) % m
        if convc[k1] != conv:
            return True
        if _sign(_cprod(vertex[i], vertex[i1], vertex[k1], vertex[k2])) != conv:
            return True
        if _iprod1(vertex[i], vertex[i1], vertex[k1], vertex[k2]) < \
                d * _ddist(vertex[k1], vertex[k2]) * -0.999847695156:
            return True  # angle constraint (179 degrees)
        k = k1
    p0 = curve.c[(i % m) * 3 + 2]
    p1 = vertex[(i + 1) % m]
    p2 = vertex[j % m]
    p3 = curve.c[(j % m) * 3 + 2]
    area = areac[j] - areac[i]
    area -= _dpara(vertex[0], curve.c[i * 3 + 2], curve.c[j * 3 + 2]) / 2.0
    if i >= j:
        area += areac[m]
    A1 = _dpara(p0, p1, p2)
    A2 = _dpara(p0, p1, p3)
    A3 = _dpara(p0, p2, p3)
    A4 = A1 + A3 - A2
    if A2 == A1:
        return True
    t = A3 / (A3 - A4)
    s = A2 / (A2 - A1)
    A = A2 * t / 2.0
    if A == 0.0:
        return True
    R = area / A
    alpha = 2.0 - math.sqrt(4.0 - R / 0.3)
    res.c0 = _interval(t * alpha, p0, p1)
    res.c1 = _interval(s * alpha, p3, p2)
    res.alpha = alpha
    res.t = t
    res.s = s
    p1 = res.c0
    p2 = res.c1
    res.pen = 0.0
    k = (i + 1) % m
    while k != j:
        k1 = (k + 1) % m
        t = _bezier_tangent_t(p0, p1, p2, p3, vertex[k], vertex[k1])
        if t < -0.5:
            return True
        pt = _bezier_point(t, p0, p1, p2, p3)
        d = _ddist(vertex[k], vertex[k1])
        if d == 0.0:
            return True
        d1 = _dpara(vertex[k], vertex[k1], pt) / d
        if abs(d1) > opttolerance:
            return True
        if _iprod(vertex[k], vertex[k1], pt) < 0 or _iprod(vertex[k1], vertex[k], pt) < 0:
            return True
        res.pen += d1 * d1
        k = k1
    k = i
    while k != j:
        k1 = (k + 1) % m
        t = _bezier_tangent_t(p0, p1, p2, p3, curve.c[k * 3 + 2], curve.c[k1 * 3 + 2])
        if t < -0.5:
            return True
        pt = _bezier_point(t, p0, p1, p2, p3)
        d = _ddist(curve.c[k * 3 + 2], curve.c[k1 * 3 + 2])
        if d == 0.0:
            return True
        d1 = _dpara(curve.c[k * 3 + 2], curve.c[k1 * 3 + 2], pt) / d
        d2 = _dpara(curve.c[k * 3 + 2], curve.c[k1 * 3 + 2], vertex[k1]) / d
        d2 *= 0.75 * curve.alpha[k1]
        if d2 < 0:
            d1 = -d1
            d2 = -d2
        if d1 < d2 - opttolerance:
            return True
        if d1 < d2:
            res.pen += (d1 - d2) * (d1 - d2)
        k = k1
    return False


def _opticurve(curve: _Curve, opttolerance: float) -> _Curve:
    """Merge runs of consecutive beziers when one bezier fits within tolerance."""
    m = curve.m
    vert = curve.vertex
    convc = [0] * m
    for i in range(m):
        if curve.tag[i] == "CURVE":
            convc[i] = _sign(_dpara(vert[(i - 1) % m], vert[i], vert[(i + 1) % m]))

    area = 0.0
    areac = [0.0] * (m + 1)
    p0 = vert[0]
    for i in range(m):
        i1 = (i + 1) % m
        if curve.tag[i1] == "CURVE":
            alpha = curve.alpha[i1]
            area += 0.3 * alpha * (4 - alpha) * \
                _dpara(curve.c[i * 3 + 2], vert[i1], curve.c[i1 * 3 + 2]) / 2.0
            area += _dpara(p0, curve.c[i * 3 + 2], curve.c[i1 * 3 + 2]) / 2.0
        areac[i + 1] = area

    pt = [0] * (m + 1)
    pen = [0.0] * (m + 1)
    length = [0] * (m + 1)
    opt: list[_Opti | None] = [None] * (m + 1)
    pt[0] = -1
    o = _Opti()
    for j in range(1, m + 1):
        pt[j] = j - 1
        pen[j] = pen[j - 1]
        length[j] = length[j - 1] + 1
        for i in range(j - 2, -1, -1):
            if _opti_penalty(curve, i, j % m, o, opttolerance, convc, areac):
                break
            if length[j] > length[i] + 1 or \
                    (length[j] == length[i] + 1 and pen[j] > pen[i] + o.pen):
                pt[j] = i
                pen[j] = pen[i] + o.pen
                length[j] = length[i] + 1
                opt[j] = o
                o = _Opti()

    om = length[m]
    out = _Curve.empty(om)
    svals = [0.0] * om
    tvals = [0.0] * om
    j = m
    for i in range(om - 1, -1, -1):
        if pt[j] == j - 1:
            jm = j % m
            out.tag[i] = curve.tag[jm]
            out.c[i * 3 + 0] = curve.c[jm * 3 + 0]
            out.c[i * 3 + 1] = curve.c[jm * 3 + 1]
            out.c[i * 3 + 2] = curve.c[jm * 3 + 2]
            out.vertex[i] = curve.vertex[jm]
            out.alpha[i] = curve.alpha[jm]
            svals[i] = tvals[i] = 1.0
        else:
            jm = j % m
            ob = opt[j]
            out.tag[i] = "CURVE"
            out.c[i * 3 + 0] = ob.c0
            out.c[i * 3 + 1] = ob.c1
            out.c[i * 3 + 2] = curve.c[jm * 3 + 2]
            out.vertex[i] = _interval(ob.s, curve.c[jm * 3 + 2], vert[jm])
            out.alpha[i] = ob.alpha
            svals[i] = ob.t
            tvals[i] = ob.s
        j = pt[j]
    return out


# ---------------------------------------------------------------------------
# public fitting and composition


def fit_curves(
    contour: PixelContour,
    alphamax: float = 1.0,
    opticurve: bool = True,
    opttolerance: float = 0.2,
) -> Loop:
    """Fit one closed corner walk into a loop of line / cubic segments."""
    pts = np.asarray(contour.points, dtype=np.int64)
    if len(pts) < 4:
        raise DegenerateContourError(f"contour has {len(pts)} steps, need >= 4")
    sums = _calc_sums(pts)
    lon = _calc_lon(pts)
    po = _best_polygon(pts, lon, sums)
    vertices = _adjust_vertices(pts, po, sums)
    curve = _smooth(vertices, alphamax)
    if opticurve:
        curve = _opticurve(curve, opttolerance)
    segments = _curve_to_segments(curve)
    segments = _coalesce_lines(segments)
    orientation = "outer" if contour.sign > 0 else "hole"
    loop = Loop(segments, orientation)
    _fix_orientation(loop)
    return loop


def _curve_to_segments(curve: _Curve) -> list[Segment]:
    m = curve.m
    segments: list[Segment] = []
    start = curve.c[(m - 1) * 3 + 2]
    for j in range(m):
        c0 = curve.c[j * 3 + 0]
        c1 = curve.c[j * 3 + 1]
        c2 = curve.c[j * 3 + 2]
        if curve.tag[j] == "CORNER":
            segments.append(Segment("line", np.array([start, c1], dtype=np.float64)))
            segments.append(Segment("line", np.array([c1, c2], dtype=np.float64)))
        else:
            segments.append(Segment("cubic", np.array([start, c0, c1, c2], dtype=np.float64)))
        start = c2
    return segments


def _coalesce_lines(segments: list[Segment], tol: float = 1e-7) -> list[Segment]:
    """Merge consecutive collinear same-direction line segments (cyclically)."""
    if not segments:
        return segments

    def mergeable(a: Segment, b: Segment) -> bool:
        if a.kind != "line" or b.kind != "line":
            return False
        v1 = a.pts[1] - a.pts[0]
        v2 = b.pts[1] - b.pts[0]
        cross = v1[0] * v2[1] - v1[1] * v2[0]
        scale = max(np.hypot(*v1), np.hypot(*v2), 1e-12)
        return abs(cross) <= tol * scale * scale and float(v1 @ v2) > 0.0

    out = list(segments)
    changed = True
    while changed and len(out) > 2:
        changed = False
        i = 0
        while i < len(out) and len(out) > 2:
            j = (i + 1) % len(out)
            if mergeable(out[i], out[j]):
                out[i] = Segment("line", np.array([out[i].pts[0], out[j].pts[1]]))
                del out[j]
                changed = True
                if j < i:
                    i -= 1
            else:
                i += 1
    return out


def flatten_segment(seg: Segment, tol: float = 0.25) -> np.ndarray:
    """Polyline approximation including both endpoints."""
    if seg.kind == "line":
        return seg.pts.copy()
    out = [seg.pts[0]]
    stack = [seg.pts]
    while stack:
        b = stack.pop()
        p0, p1, p2, p3 = b
        # flatness: control point distance from the chord
        d = p3 - p0
        nrm = math.hypot(d[0], d[1])
        if nrm < 1e-12:
            dev = max(np.hypot(*(p1 - p0)), np.hypot(*(p2 - p0)))
        else:
            dev = max(
                abs(d[0] * (p1[1] - p0[1]) - d[1] * (p1[0] - p0[0])),
                abs(d[0] * (p2[1] - p0[1]) - d[1] * (p2[0] - p0[0])),
            ) / nrm
        if dev <= tol:
            out.append(p3)
            continue
        mid01 = (p0 + p1) / 2
        mid12 = (p1 + p2) / 2
        mid23 = (p2 + p3) / 2
        mid012 = (mid01 + mid12) / 2
        mid123 = (mid12 + mid23) / 2
        midpt = (mid012 + mid123) / 2
        stack.append(np.array([midpt, mid123, mid23, p3]))
        stack.append(np.array([p0, mid01, mid012, midpt]))
    return np.array(out)


def flatten_loop(loop: Loop, tol: float = 0.25) -> np.ndarray:
    pts = []
    for seg in loop.segments:
        flat = flatten_segment(seg, tol)
        pts.append(flat[:-1])
    return np.concatenate(pts, axis=0)


def loop_signed_area(loop: Loop) -> float:
    p = flatten_loop(loop, tol=0.1)
    x = p[:, 0]
    y = p[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _fix_orientation(loop: Loop) -> None:
    area = loop_signed_area(loop)
    want_positive = loop.orientation == "outer"
    if (area > 0) != want_positive and area != 0:
        loop.segments = [s.reversed() for s in reversed(loop.segments)]
        area = -area
    loop.signed_area = area


def trace(
    image: BinaryImage,
    turn_policy: str = "minority",
    turdsize: int = 2,
    alphamax: float = 1.0,
    opticurve: bool = True,
    opttolerance: float = 0.2,
) -> VectorPathSet:
    """Full vectorization: decompose, fit, and group loops by component."""
    contours = decompose_paths(image, turn_policy, turdsize)
    by_component: dict[int, list[Loop]] = {}
    order: list[int] = []
    for contour in contours:
        loop = fit_curves(contour, alphamax, opticurve, opttolerance)
        if contour.component not in by_component:
            by_component[contour.component] = []
            order.append(contour.component)
        by_component[contour.component].append(loop)
    paths = [Path(by_component[c]) for c in order]
    return VectorPathSet(paths, image.width, image.height)


# ---------------------------------------------------------------------------
# rendering and serialization


def render(pathset: VectorPathSet, width: int | None = None, height: int | None = None) -> BinaryImage:
    """Rasterize with the even-odd rule, sampling at pixel centers."""
    w = int(width if width is not None else pathset.width)
    h = int(height if height is not None else pathset.height)
    mask = np.zeros((h, w), dtype=bool)
    edges = []
    for path in pathset.paths:
        for loop in path.loops:
            poly = flatten_loop(loop)
            if len(poly) < 3:
                continue
            nxt = np.roll(poly, -1, axis=0)
            edges.append(np.concatenate([poly, nxt], axis=1))
    if not edges:
        return BinaryImage(mask) if mask.size else BinaryImage(np.zeros((1, 1), bool))
    e = np.concatenate(edges, axis=0)
    x1, y1, x2, y2 = e[:, 0], e[:, 1], e[:, 2], e[:, 3]
    keep = y1 != y2
    x1, y1, x2, y2 = x1[keep], y1[keep], x2[keep], y2[keep]
    ylo = np.minimum(y1, y2)
    yhi = np.maximum(y1, y2)
    r0 = np.ceil(ylo - 0.5).astype(np.int64)
    r1 = np.ceil(yhi - 0.5).astype(np.int64)  # exclusive
    r0 = np.clip(r0, 0, h)
    r1 = np.clip(r1, 0, h)
    counts = np.maximum(r1 - r0, 0)
    total = int(counts.sum())
    if total == 0:
        return BinaryImage(mask)
    idx = np.repeat(np.arange(len(counts)), counts)
    offs = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    rows = r0[idx] + offs
    yc = rows + 0.5
    tvals = (yc - y1[idx]) / (y2[idx] - y1[idx])
    xs = x1[idx] + tvals * (x2[idx] - x1[idx])
    order = np.lexsort((xs, rows))
    rows = rows[order]
    xs = xs[order]
    # pair consecutive crossings per row (crossing parity is even per row)
    row_start = np.flatnonzero(np.diff(rows, prepend=rows[0] - 1))
    within = np.arange(len(rows)) - np.repeat(row_start, np.diff(np.append(row_start, len(rows))))
    starts = within % 2 == 0
    a = xs[starts]
    b = xs[~starts]
    ra = rows[starts]
    ca = np.ceil(a - 0.5).astype(np.int64)
    cb = np.ceil(b - 0.5).astype(np.int64)
    ca = np.clip(ca, 0, w)
    cb = np.clip(cb, 0, w)
    good = cb > ca
    diff = np.zeros((h, w + 1), dtype=np.int32)
    np.add.at(diff, (ra[good], ca[good]), 1)
    np.add.at(diff, (ra[good], cb[good]), -1)
    mask = np.cumsum(diff, axis=1)[:, :w] > 0
    return BinaryImage(mask)


def pathset_to_json(pathset: VectorPathSet) -> dict:
    return {
        "width": pathset.width,
        "height": pathset.height,
        "paths": [
            {
                "loops": [
                    {
                        "orientation": loop.orientation,
                        "signed_area": loop.signed_area,
                        "segments": [
                            {"kind": seg.kind, "pts": seg.pts.tolist()}
                            for seg in loop.segments
                        ],
                    }
                    for loop in path.loops
                ]
            }
            for path in pathset.paths
        ],
    }


def to_svg(pathset: VectorPathSet) -> str:
    """One svg path element per traced component, even-odd fill."""
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>\n'
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{pathset.width}" '
        f'height="{pathset.height}" viewBox="0 0 {pathset.width} {pathset.height}">'
    ]
    for path in pathset.paths:
        d = []
        for loop in path.loops:
            if not loop.segments:
                continue
            s0 = loop.segments[0].pts[0]
            d.append(f"M {s0[0]:.3f} {s0[1]:.3f}")
            for seg in loop.segments:
                p = seg.pts
                if seg.kind == "line":
                    d.append(f"L {p[1][0]:.3f} {p[1][1]:.3f}")
                else:
                    d.append(
                        f"C {p[1][0]:.3f} {p[1][1]:.3f} "
                        f"{p[2][0]:.3f} {p[2][1]:.3f} {p[3][0]:.3f} {p[3][1]:.3f}"
                    )
            d.append("Z")
        parts.append(f'<path d="{" ".join(d)}" fill="black" fill-rule="evenodd"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
