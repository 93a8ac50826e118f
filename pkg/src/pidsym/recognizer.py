"""One-shot recognition of segmented symbol regions.

Each region is embedded at two scales times four quarter-turn orientations
(eight variants), every variant votes for its nearest directory class by
cosine similarity, and the majority class wins. Classification sees only
embeddings and the directory, never region geometry.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .net import ClassDirectory, ModelState, featurize_chains, forward, rotate_chains
from .raster import GrayImage, binarize
from .sampler import merge_adjacent, normalize_scale, sample_pathset
from .segmenter import SegmentationResult, SymbolRegion, segment_paths
from .tracer import trace

RESULTS_SCHEMA_VERSION = 1


class EmptyDirectory(ValueError):
    """Classification needs at least one directory entry."""


@dataclass
class Recognition:
    region_id: int
    class_name: str
    score: float                  # mean cosine of the winning votes
    votes: list[str]              # 8 per-variant nearest classes


@dataclass(frozen=True)
class RecognizerParams:
    """Pipeline knobs for whole-sheet recognition."""

    window: int = 13              # binarization window
    offset: float = 10.0
    target_width: float = 4000.0
    delta: float = 5.0
    tau_merge: float = 2.5
    n_points: int = 1024
    scales: tuple[float, ...] = (300.0, 600.0)
    min_score: float | None = None  # below it, class becomes "unknown"


def _region_chainset(region: SymbolRegion):
    if region.chains:
        return region.chains
    return [(np.asarray(region.points, dtype=np.float64), False)]


def split_chain_jumps(points: np.ndarray, closed: bool, delta: float,
                      factor: float = 2.5):
    """Split a point sequence where the spatial step exceeds factor*delta.

    Merged centerlines carry jump discontinuities (out-and-back seams,
    junction hops); resampling across them would invent phantom strokes.
    A closed sequence stays closed only when it has no jump at all."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n <= 1:
        return [(pts, False)]
    lim = factor * delta
    steps = np.hypot(*(pts[(np.arange(n) + 1) % n] - pts).T)
    if closed:
        breaks = np.flatnonzero(steps > lim)
        if breaks.size == 0:
            return [(pts, True)]
        start = (int(breaks[0]) + 1) % n
        pts = np.roll(pts, -start, axis=0)
        steps = np.hypot(*(np.diff(pts, axis=0)).T)
    else:
        steps = steps[:-1]
    cuts = np.flatnonzero(steps > lim) + 1
    return [(seg, False) for seg in np.split(pts, cuts)]


def stitch_chains(chains, delta: float, factor: float = 2.5):
    """Canonicalize a chain set: drop debris, rejoin broken arcs, re-close.

    Centerline chains come apart at bookkeeping seams (merge dropout,
    index skips) whose endpoint gaps stay within one sample step, while
    genuinely separate strokes sit much farther apart. Fragments of fewer
    than 4 points spanning under 3*delta carry no stroke evidence (they
    are typically remnants of a cut-off line) and would inflate the bbox
    every coordinate feature is normalized by, so they are removed first.
    Open chains whose endpoints lie within factor*delta are then joined
    greedily by ascending gap (ties by chain order), and a joined chain
    whose own ends meet within the same radius is closed. Finally each
    chain gets one pass of 3-point averaging: face merging leaves a
    sub-sample zigzag on centerlines that flips the chirality-sensitive
    moment features, and no coherent local affine ever shows the network
    that artifact. Embeddings are very sensitive to both effects, so both
    the prototype and the query paths canonicalize through here.
    """
    tol = factor * delta

    def arc(p):
        return float(np.hypot(*np.diff(p, axis=0).T).sum()) if len(p) > 1 else 0.0

    kept = [(np.asarray(p, dtype=np.float64), bool(cl)) for p, cl in chains]
    solid = [(p, cl) for p, cl in kept
             if len(p) >= 4 or arc(p) >= 3.0 * delta]
    if solid:
        kept = solid
    closed_out = [(p, True) for p, cl in kept if cl]
    opens = [p for p, cl in kept if not cl]
    while len(opens) > 1:
        best = None
        for i in range(len(opens)):
            for j in range(i + 1, len(opens)):
                for si, pi in ((0, opens[i][0]), (1, opens[i][-1])):
                    for sj, pj in ((0, opens[j][0]), (1, opens[j][-1])):
                        d = float(np.hypot(*(pi - pj)))
                        if d <= tol and (best is None or (d, i, j, si, sj) < best):
                            best = (d, i, j, si, sj)
        if best is None:
            break
        _, i, j, si, sj = best
        a = opens[i] if si == 1 else opens[i][::-1]
        b = opens[j] if sj == 0 else opens[j][::-1]
        joined = np.concatenate([a, b])
        opens = [p for k, p in enumerate(opens) if k not in (i, j)]
        opens.append(joined)
    def smooth(p, closed):
        if len(p) < 3:
            return p
        if closed:
            return (np.roll(p, 1, axis=0) + p + np.roll(p, -1, axis=0)) / 3.0
        q = p.copy()
        q[1:-1] = (p[:-2] + p[1:-1] + p[2:]) / 3.0
        return q

    out = [(smooth(p, True), True) for p, _ in closed_out]
    for p in opens:
        closes = len(p) > 2 and float(np.hypot(*(p[0] - p[-1]))) <= tol
        out.append((smooth(p, closes), closes))
    # an out-and-back seam passes the length filter but smooths to nothing
    solid = [(p, cl) for p, cl in out if arc(p) >= 3.0 * delta]
    return solid if solid else out


def extract_chains(image: GrayImage,
                   params: RecognizerParams = RecognizerParams()):
    """Trace a whole image into merged, jump-split, stitched point chains.

    Used to turn a one-per-class prototype sheet into training chains with
    the same scale normalization and face merging the segmenter applies to
    real sheets."""
    bw = binarize(image, window=params.window, offset=params.offset)
    paths = trace(bw)
    if not paths.paths:
        raise ValueError("prototype image traced to no paths")
    norm = normalize_scale(paths, params.target_width)
    merged = merge_adjacent(sample_pathset(norm, params.delta),
                            params.tau_merge, params.delta)
    chains = []
    for sp in merged:
        for lp in sp.loops:
            chains.extend(split_chain_jumps(lp.points, lp.closed,
                                            params.delta))
    return stitch_chains(chains, params.delta)


def embed_region(region: SymbolRegion, model: ModelState,
                 n_points: int = 1024,
                 scales: tuple[float, ...] = (300.0, 600.0),
                 delta: float = 5.0) -> np.ndarray:
    """Embed one region at every scale/orientation variant.

    The region's chains are stitched back into whole strokes, rescaled so
    the shorter bbox side matches each target size, then rotated by each
    quarter turn; variants are ordered scale-major, rotation-minor.
    Downstream features renormalize scale, so the scale variants differ
    only through resampling quantization; both are kept to preserve the
    eight-vote scheme.
    """
    if len(region.points) == 0:
        raise ValueError("cannot embed an empty region")
    chains = stitch_chains(_region_chainset(region), delta)
    x0, y0, x1, y1 = region.bbox
    side = max(min(x1 - x0, y1 - y0), 1e-6)
    out = []
    for target in scales:
        f = float(target) / side
        scaled = [(pts * f, closed) for pts, closed in chains]
        for q in range(4):
            fm = featurize_chains(rotate_chains(scaled, q), n=n_points)
            out.append(forward(fm.values, model).embedding)
    return np.stack(out)


def classify(embeddings: np.ndarray, directory: ClassDirectory) -> Recognition:
    """Majority vote over per-variant nearest directory entries.

    Vote ties go to the class with the higher mean cosine over its winning
    votes, then to the lexicographically smaller name.
    """
    if not directory.entries:
        raise EmptyDirectory("class directory has no entries")
    embeddings = np.asarray(embeddings, dtype=np.float64)
    proto = np.stack([e.embedding for e in directory.entries])
    cos = embeddings @ proto.T                      # (8, entries)
    votes: list[str] = []
    vote_cos: list[float] = []
    order = sorted(range(len(directory.entries)),
                   key=lambda i: (directory.entries[i].class_name,
                                  directory.entries[i].quarter_turns))
    for row in cos:
        best = max(order, key=lambda i: (row[i], ))
        votes.append(directory.entries[best].class_name)
        vote_cos.append(float(row[best]))
    tally: dict[str, list[float]] = {}
    for name, c in zip(votes, vote_cos):
        tally.setdefault(name, []).append(c)
    top = max(len(v) for v in tally.values())
    tied = [(name, float(np.mean(v))) for name, v in tally.items()
            if len(v) == top]
    tied.sort(key=lambda t: (-t[1], t[0]))
    winner, score = tied[0]
    return Recognition(-1, winner, score, votes)


def recognize_sheet(image: GrayImage, model: ModelState,
                    directory: ClassDirectory,
                    params: RecognizerParams = RecognizerParams(),
                    ) -> tuple[list[Recognition], SegmentationResult]:
    """Full pipeline on one sheet; recognitions ordered by region_id.

    The returned segmentation holds exactly the regions that were
    classified (in normalized coordinates)."""
    if not directory.entries:
        raise EmptyDirectory("class directory has no entries")
    bw = binarize(image, window=params.window, offset=params.offset)
    paths = trace(bw)
    if not paths.paths:
        return [], SegmentationResult([], [], [], [], 0.0)
    norm = normalize_scale(paths, params.target_width)
    pre = sample_pathset(norm, params.delta)
    merged = merge_adjacent(pre, params.tau_merge, params.delta)
    result = segment_paths(pre, merged, params.delta)
    recs = []
    for region in sorted(result.regions, key=lambda r: r.region_id):
        emb = embed_region(region, model, n_points=params.n_points,
                           scales=params.scales, delta=params.delta)
        rec = replace(classify(emb, directory), region_id=region.region_id)
        if params.min_score is not None and rec.score < params.min_score:
            rec = replace(rec, class_name="unknown")
        recs.append(rec)
    return recs, result


def results_to_json(sheet: str, recs: list[Recognition],
                    result: SegmentationResult,
                    source_width: int, target_width: float = 4000.0) -> dict:
    """Recognition results with bboxes mapped back to source pixels."""
    back = float(source_width) / float(target_width)
    bbox_of = {r.region_id: r.bbox for r in result.regions}
    return {
        "schema_version": RESULTS_SCHEMA_VERSION,
        "sheet": sheet,
        "recognitions": [
            {
                "region_id": r.region_id,
                "bbox": [v * back for v in bbox_of[r.region_id]],
                "class": r.class_name,
                "score": r.score,
                "votes": list(r.votes),
            }
            for r in recs
        ],
    }


def render_recognition_overlay(image: GrayImage, doc: dict) -> np.ndarray:
    """RGB sheet copy with labeled recognition boxes, for human review."""
    from PIL import Image, ImageDraw

    im = Image.fromarray(image.pixels, mode="L").convert("RGB")
    draw = ImageDraw.Draw(im)
    for rec in doc["recognitions"]:
        x0, y0, x1, y1 = rec["bbox"]
        draw.rectangle([x0, y0, x1, y1], outline=(220, 30, 30), width=3)
        draw.text((x0, max(0.0, y0 - 14)),
                  f"{rec['class']} {rec['score']:.2f}", fill=(220, 30, 30))
    return np.asarray(im)
