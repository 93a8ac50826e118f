"""Feature extraction tests: windowed Hu moments, region resampling, and the
fixed-size feature matrix.

Hu values are pinned against an independent plain-Python evaluation of the
moment definitions (kept here, deliberately not sharing code with the
implementation under test).
"""

import io
import math
import struct
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pidsym.features import (
    FeatureMatrix,
    featurize,
    hu_moments,
    largest_remainder_quotas,
    read_feature_matrix,
    resample_region,
    signed_log,
    write_feature_matrix,
)


def hu_reference(pts):
    """Independent textbook evaluation: center on the centroid, reduce to unit
    RMS radius (so fixed-cardinality point sets are scale-free), then central
    moments, normalization, and the seven invariants. Plain floats and loops."""
    n = len(pts)
    xb = sum(p[0] for p in pts) / n
    yb = sum(p[1] for p in pts) / n
    cpts = [(p[0] - xb, p[1] - yb) for p in pts]
    r = math.sqrt(sum(x * x + y * y for x, y in cpts) / n)
    if r == 0.0:
        return np.zeros(7)
    cpts = [(x / r, y / r) for x, y in cpts]

    def mu(i, j):
        return sum(x ** i * y ** j for x, y in cpts)

    m00 = mu(0, 0)

    def eta(i, j):
        return mu(i, j) / m00 ** ((i + j) / 2 + 1)

    e20, e02, e11 = eta(2, 0), eta(0, 2), eta(1, 1)
    e30, e03, e21, e12 = eta(3, 0), eta(0, 3), eta(2, 1), eta(1, 2)
    h0 = e20 + e02
    h1 = (e20 - e02) ** 2 + 4 * e11 ** 2
    h2 = (e30 - 3 * e12) ** 2 + (3 * e21 - e03) ** 2
    h3 = (e30 + e12) ** 2 + (e21 + e03) ** 2
    h4 = ((e30 - 3 * e12) * (e30 + e12) * ((e30 + e12) ** 2 - 3 * (e21 + e03) ** 2)
          + (3 * e21 - e03) * (e21 + e03) * (3 * (e30 + e12) ** 2 - (e21 + e03) ** 2))
    h5 = ((e20 - e02) * ((e30 + e12) ** 2 - (e21 + e03) ** 2)
          + 4 * e11 * (e30 + e12) * (e21 + e03))
    h6 = ((3 * e21 - e03) * (e30 + e12) * ((e30 + e12) ** 2 - 3 * (e21 + e03) ** 2)
          - (e30 - 3 * e12) * (e21 + e03) * (3 * (e30 + e12) ** 2 - (e21 + e03) ** 2))
    return np.array([h0, h1, h2, h3, h4, h5, h6])


# frozen output of hu_reference on an asymmetric 6-point window
ASYM_WINDOW = np.array(
    [(0.0, 0.0), (1.0, 0.0), (2.0, 0.5), (3.0, 1.5), (3.5, 3.0), (3.2, 4.1)])
ASYM_HU = np.array([
    0.16666666666666669,
    0.01971320901020315,
    0.0012852335719283042,
    0.00020877133512044817,
    -9.83243839007489e-09,
    -1.3099823589244466e-05,
    -1.0769481630566257e-07,
])


def random_window(rng, n=6, span=10.0):
    return rng.uniform(-span, span, size=(n, 2))


class TestHuMoments:
    def test_unit_circle_six_points(self):
        pts = np.array([(math.cos(k * math.pi / 3), math.sin(k * math.pi / 3))
                        for k in range(6)])
        h = hu_moments(pts)
        assert abs(h[0] - 1.0 / 6.0) < 1e-12
        # sixfold symmetry kills every other invariant
        assert np.all(np.abs(h[1:]) < 1e-30)

    def test_frozen_asymmetric_window(self):
        h = hu_moments(ASYM_WINDOW)
        np.testing.assert_allclose(h, ASYM_HU, rtol=1e-12, atol=1e-18)

    def test_matches_reference_on_random_windows(self):
        rng = np.random.default_rng(407)
        for _ in range(200):
            w = random_window(rng)
            np.testing.assert_allclose(hu_moments(w), hu_reference(w),
                                       rtol=1e-9, atol=1e-20)

    def test_translation_invariance_exact_shift(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            w = random_window(rng)
            h0 = hu_moments(w)
            h1 = hu_moments(w + np.array([3.0, -7.0]))
            np.testing.assert_allclose(h1, h0, rtol=1e-9,
                                       atol=1e-12 * np.abs(h0).max())

    def test_scale_invariance(self):
        rng = np.random.default_rng(12)
        for _ in range(100):
            w = random_window(rng)
            np.testing.assert_allclose(hu_moments(2.0 * w), hu_moments(w),
                                       rtol=1e-9, atol=1e-24)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(13)
        for _ in range(100):
            w = random_window(rng)
            a = rng.uniform(0, 2 * math.pi)
            rot = np.array([[math.cos(a), -math.sin(a)],
                            [math.sin(a), math.cos(a)]])
            h0 = hu_moments(w)
            h1 = hu_moments(w @ rot.T)
            np.testing.assert_allclose(h1, h0, rtol=1e-6,
                                       atol=1e-12 * np.abs(h0).max())

    def test_reflection_flips_only_last(self):
        rng = np.random.default_rng(14)
        for _ in range(100):
            w = random_window(rng)
            h = hu_moments(w)
            refl = w * np.array([-1.0, 1.0])
            hr = hu_moments(refl)
            np.testing.assert_allclose(hr[:6], h[:6], rtol=1e-9, atol=1e-24)
            np.testing.assert_allclose(hr[6], -h[6], rtol=1e-9, atol=1e-24)

    def test_point_order_reversal(self):
        rng = np.random.default_rng(15)
        for _ in range(50):
            w = random_window(rng)
            np.testing.assert_allclose(hu_moments(w[::-1]), hu_moments(w),
                                       rtol=1e-9, atol=1e-15)

    def test_degenerate_all_identical(self):
        w = np.full((6, 2), 3.25)
        np.testing.assert_array_equal(hu_moments(w), np.zeros(7))

    def test_no_nan_on_collinear(self):
        w = np.array([(float(i), 2.0 * i) for i in range(6)])
        h = hu_moments(w)
        assert np.all(np.isfinite(h))


class TestSignedLog:
    def test_zero_maps_to_zero(self):
        assert signed_log(np.array([0.0]))[0] == 0.0

    def test_odd_symmetry(self):
        v = np.array([1e-8, 3.7, 1e12])
        np.testing.assert_allclose(signed_log(-v), -signed_log(v))

    def test_monotone(self):
        v = np.array([-1e3, -1.0, -1e-20, 0.0, 1e-20, 1.0, 1e3])
        out = signed_log(v)
        assert np.all(np.diff(out) > 0)


def chain_region(chains):
    """Minimal region stand-in: list of (points, closed) chains."""
    pts = np.concatenate([c[0] for c in chains])
    return SimpleNamespace(points=pts, chains=chains)


class TestResample:
    def test_single_loop_all_points_on_it(self):
        square = np.array([(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0)])
        region = chain_region([(square, True)])
        pts, row_loop, row_arc = resample_region(region, 1024)
        assert pts.shape == (1024, 2)
        # every point on the square boundary
        on_edge = (
            (np.isclose(pts[:, 0], 0) | np.isclose(pts[:, 0], 10)
             | np.isclose(pts[:, 1], 0) | np.isclose(pts[:, 1], 10))
            & (pts[:, 0] > -1e-9) & (pts[:, 0] < 10 + 1e-9)
            & (pts[:, 1] > -1e-9) & (pts[:, 1] < 10 + 1e-9)
        )
        assert on_edge.all()
        assert (row_loop == 0).all()
        assert np.all(np.diff(row_arc) > 0)

    def test_two_loop_quota_split(self):
        # lengths 300 and 100 -> 768 and 256 rows
        a = np.array([(0.0, 0.0), (150.0, 0.0)])       # open, length 150... use closed square
        sq_a = np.array([(0.0, 0.0), (75.0, 0.0), (75.0, 75.0), (0.0, 75.0)])
        sq_b = np.array([(200.0, 0.0), (225.0, 0.0), (225.0, 25.0), (200.0, 25.0)])
        region = chain_region([(sq_a, True), (sq_b, True)])
        pts, row_loop, _ = resample_region(region, 1024)
        assert (row_loop == 0).sum() == 768
        assert (row_loop == 1).sum() == 256

    def test_empty_region_raises(self):
        region = SimpleNamespace(points=np.zeros((0, 2)), chains=[])
        with pytest.raises(ValueError):
            resample_region(region, 1024)

    def test_quotas_sum_exactly(self):
        rng = np.random.default_rng(99)
        for _ in range(1000):
            k = rng.integers(1, 12)
            lengths = rng.uniform(0.0, 100.0, size=k)
            q = largest_remainder_quotas(lengths, 1024)
            assert q.sum() == 1024
            assert (q >= 0).all()

    def test_quota_proportionality(self):
        q = largest_remainder_quotas(np.array([300.0, 100.0]), 1024)
        np.testing.assert_array_equal(q, [768, 256])

    def test_all_zero_lengths_split_evenly(self):
        q = largest_remainder_quotas(np.zeros(3), 10)
        assert q.sum() == 10
        assert q.max() - q.min() <= 1


class TestFeaturize:
    def glyph(self):
        # square with an inlet stub
        square = np.array([(0.0, 0.0), (60.0, 0.0), (60.0, 60.0), (0.0, 60.0)])
        stub = np.array([(60.0, 30.0), (90.0, 30.0)])
        return [(square, True), (stub, False)]

    def test_shape_and_finiteness(self):
        fm = featurize(chain_region(self.glyph()))
        assert fm.values.shape == (1024, 9)
        assert np.all(np.isfinite(fm.values))

    def test_coordinate_range(self):
        fm = featurize(chain_region(self.glyph()))
        xy = fm.values[:, :2]
        assert xy.min() >= -1.0 - 1e-12 and xy.max() <= 1.0 + 1e-12
        # larger axis spans exactly [-1, 1]
        assert np.isclose(xy[:, 0].min(), -1.0) and np.isclose(xy[:, 0].max(), 1.0)

    def test_translation_identical(self):
        chains = self.glyph()
        moved = [(c + np.array([500.0, -250.0]), cl) for c, cl in chains]
        a = featurize(chain_region(chains)).values
        b = featurize(chain_region(moved)).values
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_uniform_scale_identical(self):
        chains = self.glyph()
        scaled = [(2.0 * c, cl) for c, cl in chains]
        a = featurize(chain_region(chains)).values
        b = featurize(chain_region(scaled)).values
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_hu_columns_are_signed_log_of_window_moments(self):
        # independent recomputation of one row's Hu features
        chains = self.glyph()
        fm = featurize(chain_region(chains))
        pts, row_loop, _ = resample_region(chain_region(chains), 1024)
        bbox_lo = pts.min(axis=0)
        bbox_hi = pts.max(axis=0)
        center = (bbox_lo + bbox_hi) / 2
        scale = 2.0 / (bbox_hi - bbox_lo).max()
        norm = (pts - center) * scale
        # row 100 sits inside the closed square chain (quota ~ 890 rows)
        i = 100
        n0 = int((row_loop == 0).sum())
        window = np.array([norm[(i + off) % n0] for off in range(-2, 4)])
        expect = signed_log(hu_reference(window))
        np.testing.assert_allclose(fm.values[i, 2:], expect, rtol=1e-9, atol=1e-12)

    def test_open_chain_window_clamps(self):
        # stub rows are the last 1024-quota rows; their windows clamp at ends
        chains = self.glyph()
        fm = featurize(chain_region(chains))
        assert np.all(np.isfinite(fm.values[-5:, 2:]))

    def test_full_matrix_against_reference(self):
        chains = self.glyph()
        fm = featurize(chain_region(chains))
        pts, row_loop, _ = resample_region(chain_region(chains), 1024)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        center, scale = (lo + hi) / 2, 2.0 / (hi - lo).max()
        norm = (pts - center) * scale
        spans = []
        for cid in np.unique(row_loop):
            rows = np.flatnonzero(row_loop == cid)
            spans.append((rows[0], rows[-1] + 1, bool(chains[cid][1])))
        expect = np.empty((1024, 9))
        expect[:, :2] = norm
        for a, b, closed in spans:
            ln = b - a
            for r in range(a, b):
                w = []
                for off in range(-2, 4):
                    j = r - a + off
                    j = j % ln if closed else min(max(j, 0), ln - 1)
                    w.append(norm[a + j])
                expect[r, 2:] = signed_log(hu_reference(np.array(w)))
        np.testing.assert_allclose(fm.values, expect, rtol=1e-9, atol=1e-10)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        fm = featurize(chain_region(TestFeaturize().glyph()))
        p = tmp_path / "m.fmx"
        write_feature_matrix(p, fm)
        back = read_feature_matrix(p)
        np.testing.assert_allclose(back.values, fm.values.astype(np.float32),
                                   rtol=0, atol=0)

    def test_header_layout(self, tmp_path):
        fm = featurize(chain_region(TestFeaturize().glyph()))
        p = tmp_path / "m.fmx"
        write_feature_matrix(p, fm)
        blob = p.read_bytes()
        magic, version, n, f = struct.unpack("<4sIII", blob[:16])
        assert magic == b"OSFM"
        assert version == 1
        assert (n, f) == (1024, 9)
        assert len(blob) == 16 + n * f * 4

    def test_rejects_bad_magic(self, tmp_path):
        p = tmp_path / "bad.fmx"
        p.write_bytes(b"XXXX" + b"\x00" * 28)
        with pytest.raises(ValueError):
            read_feature_matrix(p)
