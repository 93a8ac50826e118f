"""Synthetic piping-sheet generator with ground truth.

Lays out an orthogonal ladder of pipes (horizontal rails joined by vertical
rungs at T-junctions), splices line-drawn symbol glyphs inline on the pipes,
and records one ground-truth entry per placed symbol. Everything random is
decided while planning, so a plan renders to the same pixels every time and
a (config, seed) pair maps to one sheet.

Glyphs are supplied as small binary images (True = ink). `make_prototypes`
builds the bundled set of ten valve/instrument-like shapes procedurally.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .raster import GrayImage

GT_SCHEMA_VERSION = 1


class PlacementOverflow(RuntimeError):
    """Requested symbol count cannot be placed without overlap."""


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for sheet synthesis. Distances in source pixels.

    Defaults keep the downstream pipeline inside its documented ranges:
    3 px strokes merge into centerlines after width normalization, pipe
    stubs between features stay long enough to classify as line runs, and
    a spliced glyph gap stays under the collinear bridging maximum.
    """

    canvas: tuple[int, int] = (6000, 3000)   # (width, height)
    stroke: int = 3
    glyph_base: int = 140
    rails: int = 4
    rungs: int = 3
    symbols: int = 10
    margin: int = 250          # pipe clearance from the canvas border
    clearance: int = 300       # min gap: symbol to junction/pipe/symbol
    splice_pad: int = 8        # blank margin between pipe stub and glyph ink
    scale_jitter: tuple[float, float] = (0.9, 1.1)
    salt_pepper: float = 0.0   # pixel flip rate, applied last
    stroke_jitter: float = 0.0  # relative pipe width jitter
    max_retries: int = 200     # placement attempts per requested symbol


@dataclass
class Pipe:
    points: np.ndarray         # (2, 2) axis-aligned segment, (x, y) rows
    width: float


@dataclass
class Placement:
    class_name: str
    position: tuple[float, float]   # glyph center (x, y)
    orientation: int                # degrees in {0, 90, 180, 270}
    scale: float


@dataclass
class SheetSpec:
    """Fully realized layout; rendering consumes no randomness."""

    canvas: tuple[int, int]
    pipes: list[Pipe]
    placements: list[Placement]
    splice_pad: int


@dataclass
class GtSymbol:
    class_name: str
    bbox: tuple[int, int, int, int]  # (x0, y0, x1, y1), half-open pixels
    orientation: int


@dataclass
class GroundTruth:
    symbols: list[GtSymbol] = field(default_factory=list)


# ---------------------------------------------------------------------------
# mask drawing


def _draw_segment(ink: np.ndarray, p0, p1, width: float) -> None:
    """OR a stroked segment into a boolean canvas (pixel-center metric)."""
    h, w = ink.shape
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    half = width / 2.0
    x0 = max(0, int(np.floor(min(p0[0], p1[0]) - half)))
    x1 = min(w, int(np.ceil(max(p0[0], p1[0]) + half)) + 1)
    y0 = max(0, int(np.floor(min(p0[1], p1[1]) - half)))
    y1 = min(h, int(np.ceil(max(p0[1], p1[1]) + half)) + 1)
    if x0 >= x1 or y0 >= y1:
        return
    ys = np.arange(y0, y1, dtype=np.float64)[:, None]
    xs = np.arange(x0, x1, dtype=np.float64)[None, :]
    d = p1 - p0
    dd = float(d @ d)
    if dd == 0.0:
        dist = np.hypot(xs - p0[0], ys - p0[1])
    else:
        t = np.clip(((xs - p0[0]) * d[0] + (ys - p0[1]) * d[1]) / dd, 0.0, 1.0)
        dist = np.hypot(xs - (p0[0] + t * d[0]), ys - (p0[1] + t * d[1]))
    ink[y0:y1, x0:x1] |= dist <= half


def _draw_ring(ink: np.ndarray, center, radius: float, width: float) -> None:
    h, w = ink.shape
    cx, cy = float(center[0]), float(center[1])
    half = width / 2.0
    x0 = max(0, int(np.floor(cx - radius - half)))
    x1 = min(w, int(np.ceil(cx + radius + half)) + 1)
    y0 = max(0, int(np.floor(cy - radius - half)))
    y1 = min(h, int(np.ceil(cy + radius + half)) + 1)
    if x0 >= x1 or y0 >= y1:
        return
    ys = np.arange(y0, y1, dtype=np.float64)[:, None]
    xs = np.arange(x0, x1, dtype=np.float64)[None, :]
    ink[y0:y1, x0:x1] |= np.abs(np.hypot(xs - cx, ys - cy) - radius) <= half


def _draw_polyline(ink: np.ndarray, pts, width: float, closed: bool = False) -> None:
    pts = np.asarray(pts, dtype=np.float64)
    for i in range(len(pts) - 1):
        _draw_segment(ink, pts[i], pts[i + 1], width)
    if closed and len(pts) > 2:
        _draw_segment(ink, pts[-1], pts[0], width)


# ---------------------------------------------------------------------------
# bundled glyph set


def make_prototypes(glyph_base: int = 140, stroke: int = 3) -> dict[str, np.ndarray]:
    """Ten line-drawn glyph classes on square binary canvases.

    Strokes are kept shorter than the line-run threshold at normalized
    scale, so no part of a glyph is mistaken for piping.
    """
    b = float(glyph_base)
    c = b / 2.0
    out: dict[str, np.ndarray] = {}

    def canvas() -> np.ndarray:
        return np.zeros((glyph_base, glyph_base), dtype=bool)

    g = canvas()
    _draw_ring(g, (c, c), 0.40 * b, stroke)
    out["ring"] = g

    g = canvas()
    _draw_ring(g, (c, c), 0.40 * b, stroke)
    _draw_ring(g, (c, c), 0.22 * b, stroke)
    out["double-ring"] = g

    # bowtie: two triangles facing each other across a narrow waist gap
    # (tangent apexes flip outline topology under fractional rescaling)
    lt = [(0.08 * b, 0.16 * b), (0.08 * b, 0.84 * b), (0.44 * b, c)]
    rt = [(0.92 * b, 0.16 * b), (0.92 * b, 0.84 * b), (0.56 * b, c)]
    g = canvas()
    _draw_polyline(g, lt, stroke, closed=True)
    _draw_polyline(g, rt, stroke, closed=True)
    out["gate"] = g

    g = canvas()
    _draw_polyline(g, lt, stroke, closed=True)
    _draw_polyline(g, rt, stroke, closed=True)
    _draw_ring(g, (c, c), 0.18 * b, stroke)
    out["globe"] = g

    sq = [(0.12 * b, 0.12 * b), (0.88 * b, 0.12 * b),
          (0.88 * b, 0.88 * b), (0.12 * b, 0.88 * b)]
    g = canvas()
    _draw_polyline(g, sq, stroke, closed=True)
    out["box"] = g

    g = canvas()
    _draw_polyline(g, sq, stroke, closed=True)
    _draw_segment(g, sq[0], sq[2], stroke)
    _draw_segment(g, sq[1], sq[3], stroke)
    out["box-x"] = g

    hexa = [(c + 0.42 * b * np.cos(a), c + 0.42 * b * np.sin(a))
            for a in np.linspace(0.0, 2.0 * np.pi, 7)[:-1]]
    g = canvas()
    _draw_polyline(g, hexa, stroke, closed=True)
    out["hex"] = g

    # the bar stays strictly interior: tangency at the diamond vertices is
    # not stable under fractional rescaling
    dia = [(c, 0.06 * b), (0.94 * b, c), (c, 0.94 * b), (0.06 * b, c)]
    g = canvas()
    _draw_polyline(g, dia, stroke, closed=True)
    _draw_segment(g, (c, 0.20 * b), (c, 0.80 * b), stroke)
    out["diamond-bar"] = g

    # the bar clears the apex for the same tangency reason
    tri = [(0.10 * b, 0.12 * b), (0.10 * b, 0.88 * b), (0.82 * b, c)]
    g = canvas()
    _draw_polyline(g, tri, stroke, closed=True)
    _draw_segment(g, (0.90 * b, 0.25 * b), (0.90 * b, 0.75 * b), stroke)
    out["tri-bar"] = g

    g = canvas()
    _draw_segment(g, (0.15 * b, 0.15 * b), (0.85 * b, 0.85 * b), stroke)
    _draw_segment(g, (0.15 * b, 0.85 * b), (0.85 * b, 0.15 * b), stroke)
    out["cross"] = g
    return out


def _rescale_mask(mask: np.ndarray, scale: float,
                  half_stroke: float = 1.5) -> np.ndarray:
    """Rescale a binary mask through its signed distance field.

    Interpolating the SDF and re-thresholding keeps strokes clean at
    fractional scales; intensity interpolation leaves them ragged, which
    shifts traced centerlines enough to disturb downstream shape
    features. The threshold is offset so the stroke width stays at its
    source value while the shape scales: a drawing's line weight does not
    follow the symbol size, and a fixed width also keeps every scale
    inside the fixed centerline merge radius downstream.
    """
    from scipy import ndimage

    h, w = mask.shape
    nh = max(1, int(round(h * scale)))
    nw = max(1, int(round(w * scale)))
    sdf = (ndimage.distance_transform_edt(mask)
           - ndimage.distance_transform_edt(~mask))
    yy = (np.arange(nh) + 0.5) / scale - 0.5
    xx = (np.arange(nw) + 0.5) / scale - 0.5
    grid = np.meshgrid(yy, xx, indexing="ij")
    level = half_stroke * (1.0 - 1.0 / scale)
    return ndimage.map_coordinates(sdf, grid, order=1, mode="nearest") > level


def _prepare_glyph(glyph: np.ndarray, orientation: int, scale: float) -> np.ndarray:
    """Rotate by a quarter-turn multiple, rescale, crop to the ink extent."""
    if orientation % 90 != 0:
        raise ValueError(f"orientation {orientation} not a multiple of 90")
    mask = np.rot90(np.asarray(glyph, dtype=bool), (orientation // 90) % 4)
    if scale != 1.0:
        mask = _rescale_mask(mask, scale)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("glyph has no ink")
    return mask[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]


# ---------------------------------------------------------------------------
# layout planning


def _box_around(pos, half: float) -> tuple[float, float, float, float]:
    return (pos[0] - half, pos[1] - half, pos[0] + half, pos[1] + half)


def _boxes_overlap(a, b) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def _segment_hits_box(p0, p1, box) -> bool:
    # axis-aligned segments only
    x0, y0, x1, y1 = box
    lo = np.minimum(p0, p1)
    hi = np.maximum(p0, p1)
    return lo[0] < x1 and x0 < hi[0] and lo[1] < y1 and y0 < hi[1]


def plan_sheet(class_names: list[str], config: SynthConfig,
               rng: np.random.Generator) -> SheetSpec:
    """Lay out pipes and symbol placements; raises PlacementOverflow when
    the requested count cannot be placed under the clearance rules."""
    w, h = config.canvas
    if config.rails < 1:
        raise ValueError("need at least one rail")
    span = h - 2 * config.margin
    if span <= 0 or w <= 2 * config.margin:
        raise PlacementOverflow("canvas smaller than its margins")

    if config.rails == 1:
        rail_ys = [h / 2.0]
    else:
        step = span / (config.rails - 1)
        wiggle = max(0.0, min(40.0, (step - config.clearance) / 2.0))
        rail_ys = [config.margin + i * step + rng.uniform(-wiggle, wiggle)
                   for i in range(config.rails)]
    rail_ys = [float(round(y)) for y in rail_ys]
    x_lo, x_hi = float(config.margin), float(w - config.margin)

    def realized_width() -> float:
        if config.stroke_jitter <= 0:
            return float(config.stroke)
        j = config.stroke_jitter
        return float(config.stroke) * (1.0 + rng.uniform(-j, j))

    pipes = [Pipe(np.array([[x_lo, y], [x_hi, y]]), realized_width())
             for y in rail_ys]
    junctions: list[tuple[float, float]] = []
    for p in pipes:
        junctions.extend([tuple(p.points[0]), tuple(p.points[1])])

    rung_xs: list[float] = []
    for _ in range(config.rungs):
        if config.rails < 2:
            break
        for _ in range(config.max_retries):
            x = float(round(rng.uniform(x_lo + config.clearance,
                                        x_hi - config.clearance)))
            if all(abs(x - other) >= config.clearance for other in rung_xs):
                ri = int(rng.integers(0, config.rails - 1))
                rung_xs.append(x)
                pipes.append(Pipe(np.array([[x, rail_ys[ri]],
                                            [x, rail_ys[ri + 1]]]),
                                  realized_width()))
                junctions.append((x, rail_ys[ri]))
                junctions.append((x, rail_ys[ri + 1]))
                break

    placements: list[Placement] = []
    boxes: list[tuple[float, float, float, float]] = []
    budget = config.max_retries * max(1, config.symbols)
    while len(placements) < config.symbols and budget > 0:
        budget -= 1
        pi = int(rng.integers(0, len(pipes)))
        pipe = pipes[pi]
        name = class_names[int(rng.integers(0, len(class_names)))]
        scale = float(rng.uniform(*config.scale_jitter))
        half = config.glyph_base * scale / 2.0
        p0, p1 = pipe.points
        horizontal = p0[1] == p1[1]
        orientation = int(rng.choice([0, 180] if horizontal else [90, 270]))
        length = float(np.hypot(*(p1 - p0)))
        slack = config.clearance + half
        if length <= 2 * slack:
            continue
        u = rng.uniform(slack, length - slack)
        pos = p0 + (p1 - p0) / length * u
        pos = (float(round(pos[0])), float(round(pos[1])))
        box = _box_around(pos, half)
        guard = _box_around(pos, half + config.clearance)
        if guard[0] < 0 or guard[1] < 0 or guard[2] > w or guard[3] > h:
            continue
        if any(guard[0] <= jx <= guard[2] and guard[1] <= jy <= guard[3]
               for jx, jy in junctions):
            continue
        if any(_segment_hits_box(q.points[0], q.points[1], guard)
               for qi, q in enumerate(pipes) if qi != pi):
            continue
        if any(_boxes_overlap(guard, other) for other in boxes):
            continue
        placements.append(Placement(name, pos, orientation, scale))
        boxes.append(box)
    if len(placements) < config.symbols:
        raise PlacementOverflow(
            f"placed {len(placements)} of {config.symbols} symbols "
            f"after {config.max_retries * max(1, config.symbols)} attempts")
    return SheetSpec((w, h), pipes, placements, config.splice_pad)


# ---------------------------------------------------------------------------
# rendering


def render_sheet(spec: SheetSpec,
                 prototypes: dict[str, np.ndarray]) -> tuple[GrayImage, GroundTruth]:
    """Rasterize a plan: pipes first, then each glyph spliced inline (the
    pipe is blanked inside the padded glyph window before stamping)."""
    w, h = spec.canvas
    ink = np.zeros((h, w), dtype=bool)
    for pipe in spec.pipes:
        _draw_polyline(ink, pipe.points, pipe.width)
    gt = GroundTruth()
    for pl in spec.placements:
        mask = _prepare_glyph(prototypes[pl.class_name], pl.orientation,
                              pl.scale)
        gh, gw = mask.shape
        ox = int(round(pl.position[0] - gw / 2.0))
        oy = int(round(pl.position[1] - gh / 2.0))
        pad = spec.splice_pad
        ink[max(0, oy - pad):min(h, oy + gh + pad),
            max(0, ox - pad):min(w, ox + gw + pad)] = False
        ink[oy:oy + gh, ox:ox + gw] |= mask
        gt.symbols.append(GtSymbol(pl.class_name,
                                   (ox, oy, ox + gw, oy + gh),
                                   pl.orientation))
    return GrayImage(np.where(ink, 0, 255).astype(np.uint8)), gt


def apply_noise(img: GrayImage, rate: float,
                rng: np.random.Generator) -> GrayImage:
    """Salt-and-pepper: each pixel flips to black or white with rate/2 each."""
    if rate <= 0:
        return img
    u = rng.random(img.pixels.shape)
    px = img.pixels.copy()
    px[u < rate / 2.0] = 0
    px[(u >= rate / 2.0) & (u < rate)] = 255
    return GrayImage(px)


def generate_sheet(prototypes: dict[str, np.ndarray], config: SynthConfig,
                   seed: int) -> tuple[GrayImage, GroundTruth]:
    """Plan, render, and degrade one sheet. Deterministic given seed."""
    if not prototypes:
        raise ValueError("need at least one prototype")
    rng = np.random.default_rng(seed)
    spec = plan_sheet(sorted(prototypes), config, rng)
    img, gt = render_sheet(spec, prototypes)
    return apply_noise(img, config.salt_pepper, rng), gt


def render_prototype(prototypes: dict[str, np.ndarray], class_name: str,
                     config: SynthConfig) -> GrayImage:
    """One glyph alone on a sheet-width canvas.

    Full sheet width keeps the width-normalization factor identical to the
    synthetic sheets, so prototype strokes merge into centerlines exactly
    like spliced glyphs do.
    """
    mask = _prepare_glyph(prototypes[class_name], 0, 1.0)
    gh, gw = mask.shape
    w = config.canvas[0]
    h = gh + 2 * config.glyph_base
    ink = np.zeros((h, w), dtype=bool)
    oy = (h - gh) // 2
    ox = (w - gw) // 2
    ink[oy:oy + gh, ox:ox + gw] = mask
    return GrayImage(np.where(ink, 0, 255).astype(np.uint8))


# ---------------------------------------------------------------------------
# ground-truth serialization


def ground_truth_to_json(gt: GroundTruth) -> dict:
    return {
        "schema_version": GT_SCHEMA_VERSION,
        "symbols": [
            {"class": s.class_name, "bbox": list(s.bbox),
             "orientation": s.orientation}
            for s in gt.symbols
        ],
    }


def ground_truth_from_json(doc: dict) -> GroundTruth:
    if doc.get("schema_version") != GT_SCHEMA_VERSION:
        raise ValueError(f"unsupported ground-truth schema {doc.get('schema_version')!r}")
    return GroundTruth([
        GtSymbol(str(s["class"]), tuple(int(v) for v in s["bbox"]),
                 int(s["orientation"]))
        for s in doc["symbols"]
    ])
