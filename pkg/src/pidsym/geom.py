"""Shared polyline geometry: arc length, uniform resampling, distances."""

from __future__ import annotations

import numpy as np


def polyline_lengths(points: np.ndarray, closed: bool = False) -> np.ndarray:
    """Per-edge lengths of a polyline (with wraparound edge if closed)."""
    pts = np.asarray(points, dtype=np.float64)
    if closed:
        nxt = np.roll(pts, -1, axis=0)
    else:
        nxt = pts[1:]
        pts = pts[:-1]
    return np.hypot(nxt[:, 0] - pts[:, 0], nxt[:, 1] - pts[:, 1])


def polyline_length(points: np.ndarray, closed: bool = False) -> float:
    return float(polyline_lengths(points, closed).sum())


def interpolate_along(points: np.ndarray, closed: bool, positions: np.ndarray) -> np.ndarray:
    """Points at the given arc-length positions along the polyline.

    Positions beyond the total length are clamped (open) or wrapped (closed).
    """
    pts = np.asarray(points, dtype=np.float64)
    seglen = polyline_lengths(pts, closed)
    cum = np.concatenate([[0.0], np.cumsum(seglen)])
    total = cum[-1]
    pos = np.asarray(positions, dtype=np.float64)
    if total <= 0:
        return np.repeat(pts[:1], len(pos), axis=0)
    if closed:
        pos = np.mod(pos, total)
    else:
        pos = np.clip(pos, 0.0, total)
    idx = np.searchsorted(cum, pos, side="right") - 1
    idx = np.clip(idx, 0, len(seglen) - 1)
    frac = (pos - cum[idx]) / np.maximum(seglen[idx], 1e-300)
    if closed:
        ring = np.concatenate([pts, pts[:1]], axis=0)
    else:
        ring = pts
    a = ring[idx]
    b = ring[idx + 1]
    return a + frac[:, None] * (b - a)


def point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each point p to its corresponding segment (a, b).

    All arrays broadcast (..., 2); returns (...,) distances.
    """
    p = np.asarray(p, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ab = b - a
    ap = p - a
    denom = np.maximum((ab * ab).sum(axis=-1), 1e-300)
    t = np.clip((ap * ab).sum(axis=-1) / denom, 0.0, 1.0)
    proj = a + t[..., None] * ab
    d = p - proj
    return np.sqrt((d * d).sum(axis=-1))


def bbox_of(points: np.ndarray) -> tuple[float, float, float, float]:
    pts = np.asarray(points, dtype=np.float64)
    return (
        float(pts[:, 0].min()),
        float(pts[:, 1].min()),
        float(pts[:, 0].max()),
        float(pts[:, 1].max()),
    )
