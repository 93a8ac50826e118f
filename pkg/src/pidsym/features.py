"""Fixed-size network input for a symbol region: 1024 resampled boundary
points, each carrying its normalized coordinates plus seven Hu moments of the
6-point window around it.

Hu values are passed through a signed log so their ~40-order dynamic range
does not destroy nearest-neighbor distances downstream.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geom

FEATURE_MAGIC = b"OSFM"
FEATURE_VERSION = 1


class EmptyRegionError(ValueError):
    pass


def hu_moments(window: np.ndarray) -> np.ndarray:
    """Seven Hu invariants of a point set, treating each point as unit mass.

    Coordinates are centered on the window centroid and reduced to unit RMS
    radius before the moment sums: for a fixed-cardinality point set mu00 is
    the point count and carries no scale, so without this reduction the
    normalized moments would grow with coordinate scale. A window of identical
    points yields all zeros.
    """
    pts = np.asarray(window, dtype=np.float64)
    c = pts.mean(axis=0)
    x = pts[:, 0] - c[0]
    y = pts[:, 1] - c[1]
    rms = np.sqrt((x * x + y * y).mean())
    if rms == 0.0:
        return np.zeros(7)
    x = x / rms
    y = y / rms
    m00 = float(len(pts))
    x2, y2 = x * x, y * y

    def eta(i: int, j: int) -> float:
        return float((x ** i * y ** j).sum()) / m00 ** ((i + j) / 2 + 1)

    e20 = float(x2.sum()) / m00 ** 2
    e02 = float(y2.sum()) / m00 ** 2
    e11 = float((x * y).sum()) / m00 ** 2
    e30, e03 = eta(3, 0), eta(0, 3)
    e21, e12 = eta(2, 1), eta(1, 2)

    a = e30 + e12            # recurring combinations
    b = e21 + e03
    u = e30 - 3 * e12
    v = 3 * e21 - e03
    h0 = e20 + e02
    h1 = (e20 - e02) ** 2 + 4 * e11 ** 2
    h2 = u * u + v * v
    h3 = a * a + b * b
    h4 = u * a * (a * a - 3 * b * b) + v * b * (3 * a * a - b * b)
    h5 = (e20 - e02) * (a * a - b * b) + 4 * e11 * a * b
    h6 = v * a * (a * a - 3 * b * b) - u * b * (3 * a * a - b * b)
    return np.array([h0, h1, h2, h3, h4, h5, h6])


SIGNED_LOG_FLOOR = 1e-12


def signed_log(values: np.ndarray) -> np.ndarray:
    """sgn(h) * log10(1 + |h| / floor) / 12; odd, monotone, zero at zero.

    The floor sits well below genuine invariant magnitudes (~1e-9 and up for
    unit-RMS windows) but far above the float noise of mathematically-zero
    invariants (~1e-30), so noise maps to ~1e-19 instead of feature scale.
    """
    v = np.asarray(values, dtype=np.float64)
    return np.sign(v) * np.log10(1.0 + np.abs(v) / SIGNED_LOG_FLOOR) / 12.0


def largest_remainder_quotas(lengths: np.ndarray, n: int) -> np.ndarray:
    """Integer quotas proportional to lengths, summing to exactly n.

    Floors of the exact shares plus one extra for the largest fractional
    remainders (ties to the lower index). All-zero lengths split n evenly.
    """
    lengths = np.asarray(lengths, dtype=np.float64)
    k = len(lengths)
    if k == 0:
        raise ValueError("no lengths to distribute over")
    total = float(lengths.sum())
    if total <= 0.0:
        base = n // k
        quotas = np.full(k, base, dtype=np.int64)
        quotas[: n - base * k] += 1
        return quotas
    shares = lengths * (n / total)
    quotas = np.floor(shares).astype(np.int64)
    frac = shares - quotas
    short = n - int(quotas.sum())
    if short > 0:
        order = np.lexsort((np.arange(k), -frac))
        quotas[order[:short]] += 1
    return quotas


def _chain_length(pts: np.ndarray, closed: bool) -> float:
    if len(pts) < 2:
        return 0.0
    return float(geom.polyline_length(pts, closed=closed))


def _region_chains(region) -> list[tuple[np.ndarray, bool]]:
    chains = getattr(region, "chains", None)
    if chains:
        return [(np.asarray(c, dtype=np.float64), bool(cl)) for c, cl in chains]
    pts = np.asarray(region.points, dtype=np.float64)
    if len(pts) == 0:
        return []
    return [(pts, False)]


def resample_region(region, n: int = 1024):
    """Distribute n points over a region's chains proportionally to length.

    Returns (points (n,2), row_chain (n,), row_arc (n,)). Closed chains are
    sampled at arc positions k*L/q; open chains include both endpoints at
    spacing L/(q-1). Zero-length chains repeat their single point.
    """
    chains = _region_chains(region)
    if not chains:
        raise EmptyRegionError("region has no points")
    lengths = np.array([_chain_length(c, cl) for c, cl in chains])
    quotas = largest_remainder_quotas(lengths, n)
    pts_out = []
    chain_out = []
    arc_out = []
    for cid, ((cpts, closed), q) in enumerate(zip(chains, quotas)):
        q = int(q)
        if q == 0:
            continue
        length = lengths[cid]
        if len(cpts) < 2 or length <= 0.0:
            pts_out.append(np.repeat(cpts[:1], q, axis=0))
            arc_out.append(np.zeros(q))
        else:
            if closed:
                positions = np.arange(q) * (length / q)
            elif q == 1:
                positions = np.array([length / 2.0])
            else:
                positions = np.arange(q) * (length / (q - 1))
            pts_out.append(geom.interpolate_along(cpts, closed, positions))
            arc_out.append(positions)
        chain_out.append(np.full(q, cid, dtype=np.int64))
    return (np.concatenate(pts_out), np.concatenate(chain_out),
            np.concatenate(arc_out))


@dataclass
class FeatureMatrix:
    values: np.ndarray            # (n, 9) float64
    row_loop: np.ndarray          # (n,) chain ordinal per row
    row_arc: np.ndarray           # (n,) arc position along the chain


def featurize(region, n: int = 1024, window: int = 6) -> FeatureMatrix:
    """Resample a region to n points and emit the n x 9 feature matrix.

    Columns 0-1: coordinates centered on the bbox center, scaled so the larger
    bbox side spans [-1, 1]. Columns 2-8: signed-log Hu moments of the window
    of `window` consecutive same-chain points around each row (cyclic on
    closed chains, clamped at open-chain ends).
    """
    pts, row_chain, row_arc = resample_region(region, n)
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    side = float((hi - lo).max())
    if side <= 0.0:
        norm = np.zeros_like(pts)
    else:
        norm = (pts - (lo + hi) / 2.0) * (2.0 / side)

    chains = _region_chains(region)
    values = np.empty((len(pts), 9))
    values[:, :2] = norm
    off_lo = -((window - 1) // 2)
    offsets = np.arange(off_lo, off_lo + window)
    start = 0
    while start < len(pts):
        cid = int(row_chain[start])
        end = start
        while end < len(pts) and row_chain[end] == cid:
            end += 1
        ln = end - start
        closed = bool(chains[cid][1])
        rel = np.arange(ln)[:, None] + offsets[None, :]
        idx = rel % ln if closed else np.clip(rel, 0, ln - 1)
        windows = norm[start:end][idx]              # (ln, window, 2)
        for r in range(ln):
            values[start + r, 2:] = signed_log(hu_moments(windows[r]))
        start = end
    return FeatureMatrix(values, row_chain, row_arc)


def write_feature_matrix(path: str | Path, fm: FeatureMatrix) -> None:
    n, f = fm.values.shape
    header = struct.pack("<4sIII", FEATURE_MAGIC, FEATURE_VERSION, n, f)
    payload = fm.values.astype("<f4").tobytes(order="C")
    Path(path).write_bytes(header + payload)


def read_feature_matrix(path: str | Path) -> FeatureMatrix:
    blob = Path(path).read_bytes()
    if len(blob) < 16:
        raise ValueError("feature matrix file too short")
    magic, version, n, f = struct.unpack("<4sIII", blob[:16])
    if magic != FEATURE_MAGIC:
        raise ValueError("bad feature matrix magic")
    if version != FEATURE_VERSION:
        raise ValueError(f"unsupported feature matrix version {version}")
    expect = 16 + n * f * 4
    if len(blob) != expect:
        raise ValueError("feature matrix payload size mismatch")
    values = np.frombuffer(blob[16:], dtype="<f4").reshape(n, f).astype(np.float64)
    return FeatureMatrix(values, np.zeros(n, dtype=np.int64), np.zeros(n))
