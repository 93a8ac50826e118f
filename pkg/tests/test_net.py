"""Network-stage tests: k-NN graphs, edge convolution, the dynamic-graph
forward pass, margin-loss gradients, the augmentation policy, and a
desk-scale training run.

Every pinned value here comes from the plain-loop oracles defined at the top
of this file, which deliberately share no code with the module under test.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pidsym.net import (
    AugmentPolicy,
    EdgeConvLayer,
    InsufficientClasses,
    InvalidMargin,
    KTooLarge,
    ModelState,
    NonConvergence,
    ShapeMismatch,
    TrainConfig,
    arcface_loss,
    augment_chains,
    edge_conv,
    forward,
    knn_graph,
    load_model,
    loss_and_grads,
    make_model,
    rotate_chains,
    save_model,
    train,
)

# ---------------------------------------------------------------------------
# oracles


def knn_oracle(x, k):
    """Self plus the k-1 nearest others, ties by lower index; plain loops."""
    n = len(x)
    rows = []
    for i in range(n):
        others = sorted(
            (float(np.linalg.norm(x[j] - x[i])), j)
            for j in range(n) if j != i
        )
        rows.append([i] + [j for _, j in others[: k - 1]])
    return rows


def edge_conv_oracle(x, rows, theta, phi, bias):
    """Eqs: out_i = max over neighbors j of relu(theta (x_j - x_i) + phi x_i + b)."""
    n = len(x)
    fo = theta.shape[0]
    out = np.zeros((n, fo))
    for i in range(n):
        best = np.full(fo, -np.inf)
        for j in rows[i]:
            e = theta @ (x[j] - x[i]) + phi @ x[i] + bias
            best = np.maximum(best, np.maximum(e, 0.0))
        out[i] = best
    return out


def forward_oracle(x, model):
    """Loop-based re-implementation of the full embedding forward pass."""
    h = np.asarray(x, dtype=np.float64)
    pooled = []
    for layer in model.layers:
        rows = knn_oracle(h, model.k)
        h = edge_conv_oracle(h, rows, layer.theta, layer.phi, layer.bias)
        pooled.append(h.max(axis=0))
    desc = np.concatenate(pooled)
    z1 = model.w1 @ desc + model.b1
    a1 = np.maximum(z1, 0.0)
    z2 = model.w2 @ a1 + model.b2
    return z2 / np.linalg.norm(z2)


def cross_entropy_direct(emb, labels, w, s):
    """Softmax cross-entropy over s*cos logits, computed independently."""
    logits = s * np.clip(emb @ w, -1 + 1e-7, 1 - 1e-7)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -float(logp[np.arange(len(labels)), labels].mean())


# ---------------------------------------------------------------------------
# shared fixtures


def tiny_model(seed=0, f_in=9, widths=(6, 7, 8), head_hidden=10,
               embed_dim=8, n_classes=5, k=4):
    return make_model(
        class_names=[f"c{i}" for i in range(n_classes)],
        f_in=f_in, widths=widths, head_hidden=head_hidden,
        embed_dim=embed_dim, k=k, seed=seed,
    )


def square_chain(side=200.0, n=160, center=(0.0, 0.0)):
    t = np.linspace(0.0, 4.0, n, endpoint=False)
    pts = np.empty((n, 2))
    for i, u in enumerate(t):
        leg = int(u)
        f = u - leg
        corners = [(-1, -1), (1, -1), (1, 1), (-1, 1), (-1, -1)]
        a = np.array(corners[leg], dtype=float)
        b = np.array(corners[leg + 1], dtype=float)
        pts[i] = (a + (b - a) * f) * (side / 2.0)
    return pts + np.asarray(center)


def circle_chain(radius=100.0, n=160, center=(0.0, 0.0)):
    a = np.linspace(0.0, 2 * math.pi, n, endpoint=False)
    return np.stack([np.cos(a), np.sin(a)], axis=1) * radius + np.asarray(center)


# ---------------------------------------------------------------------------
# knn_graph


class TestKnnGraph:
    def test_k1_is_self_only(self):
        x = np.random.default_rng(0).normal(size=(7, 3))
        edges = knn_graph(x, 1)
        assert edges.shape == (7, 1)
        assert np.array_equal(edges[:, 0], np.arange(7))

    def test_unit_square_k3_excludes_diagonal(self):
        x = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
        edges = knn_graph(x, 3)
        expect = {0: {0, 1, 3}, 1: {1, 0, 2}, 2: {2, 1, 3}, 3: {3, 0, 2}}
        for i in range(4):
            assert edges[i, 0] == i
            assert set(edges[i].tolist()) == expect[i]

    def test_duplicate_points_tie_break_by_index(self):
        x = np.zeros((5, 2))
        edges = knn_graph(x, 3)
        for i in range(5):
            assert edges[i, 0] == i
            others = [j for j in range(5) if j != i][:2]
            assert edges[i, 1:].tolist() == others

    def test_k_too_large(self):
        x = np.zeros((3, 2))
        with pytest.raises(KTooLarge):
            knn_graph(x, 4)
        with pytest.raises(KTooLarge):
            knn_graph(x, 0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 24), st.integers(2, 5))
    def test_matches_brute_force(self, seed, n, f):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(n, f))
        k = int(rng.integers(1, n + 1))
        edges = knn_graph(x, k)
        assert edges.shape == (n, k)
        rows = knn_oracle(x, k)
        for i in range(n):
            assert edges[i, 0] == i
            assert sorted(edges[i].tolist()) == sorted(rows[i])


# ---------------------------------------------------------------------------
# edge_conv


class TestEdgeConv:
    def test_zero_weights_zero_output(self):
        x = np.random.default_rng(1).normal(size=(6, 4))
        layer = EdgeConvLayer(np.zeros((5, 4)), np.zeros((5, 4)), np.zeros(5))
        out = edge_conv(x, knn_graph(x, 3), layer)
        assert np.array_equal(out, np.zeros((6, 5)))

    def test_self_only_collapses_to_phi(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(5, 3))
        layer = EdgeConvLayer(rng.normal(size=(4, 3)),
                              rng.normal(size=(4, 3)), rng.normal(size=4))
        out = edge_conv(x, knn_graph(x, 1), layer)
        expect = np.maximum(x @ layer.phi.T + layer.bias, 0.0)
        np.testing.assert_allclose(out, expect, rtol=0, atol=1e-14)

    @pytest.mark.parametrize("seed", [3, 4, 5, 6])
    def test_random_cases_match_oracle(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(3, 2))
        layer = EdgeConvLayer(rng.normal(size=(4, 2)),
                              rng.normal(size=(4, 2)), rng.normal(size=4))
        edges = knn_graph(x, 2)
        out = edge_conv(x, edges, layer)
        expect = edge_conv_oracle(x, edges.tolist(), layer.theta,
                                  layer.phi, layer.bias)
        np.testing.assert_allclose(out, expect, rtol=1e-12, atol=1e-12)

    def test_shape_mismatch(self):
        x = np.zeros((4, 3))
        bad = EdgeConvLayer(np.zeros((5, 2)), np.zeros((5, 2)), np.zeros(5))
        with pytest.raises(ShapeMismatch):
            edge_conv(x, knn_graph(x, 2), bad)
        uneven = EdgeConvLayer(np.zeros((5, 3)), np.zeros((4, 3)), np.zeros(5))
        with pytest.raises(ShapeMismatch):
            edge_conv(x, knn_graph(x, 2), uneven)


# ---------------------------------------------------------------------------
# forward


class TestForward:
    def test_embedding_unit_norm(self):
        model = tiny_model()
        rng = np.random.default_rng(3)
        for _ in range(5):
            x = rng.normal(size=(40, 9))
            cache = forward(x, model)
            assert abs(np.linalg.norm(cache.embedding) - 1.0) < 1e-6

    def test_permutation_invariance(self):
        model = tiny_model(seed=1)
        rng = np.random.default_rng(4)
        x = rng.normal(size=(128, 9))
        base = forward(x, model).embedding
        for seed in range(3):
            perm = np.random.default_rng(seed).permutation(128)
            emb = forward(x[perm], model).embedding
            assert np.abs(emb - base).max() < 1e-5

    def test_matches_loop_oracle(self):
        model = tiny_model(seed=2)
        x = np.random.default_rng(5).normal(size=(32, 9))
        got = forward(x, model).embedding
        expect = forward_oracle(x, model)
        np.testing.assert_allclose(got, expect, rtol=1e-9, atol=1e-12)

    def test_golden_embedding_prefix(self):
        # frozen from forward_oracle on this exact seed/model/input
        model = tiny_model(seed=2)
        x = np.random.default_rng(5).normal(size=(32, 9))
        golden = forward_oracle(x, model)[:4]
        got = forward(x, model).embedding[:4]
        np.testing.assert_allclose(got, golden, rtol=1e-9, atol=1e-12)

    def test_graphs_are_dynamic(self):
        # layer-2 edges must come from layer-1 activations, not the input
        model = tiny_model(seed=3)
        x = np.random.default_rng(6).normal(size=(48, 9))
        cache = forward(x, model)
        l1_out = cache.layers[0].output
        np.testing.assert_array_equal(cache.layers[1].edges,
                                      knn_graph(l1_out, model.k))
        assert not np.array_equal(cache.layers[1].edges, knn_graph(x, model.k))


# ---------------------------------------------------------------------------
# arcface loss


class TestArcface:
    def unit_rows(self, rng, n, d):
        v = rng.normal(size=(n, d))
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    def test_margin_zero_equals_cross_entropy(self):
        rng = np.random.default_rng(7)
        emb = self.unit_rows(rng, 6, 8)
        w = self.unit_rows(rng, 5, 8).T
        labels = np.array([0, 1, 2, 3, 4, 0])
        loss, _, _ = arcface_loss(emb, labels, w, s=30.0, m_margin=0.0)
        assert abs(loss - cross_entropy_direct(emb, labels, w, 30.0)) < 1e-9

    def test_single_class_zero_loss(self):
        rng = np.random.default_rng(8)
        emb = self.unit_rows(rng, 4, 8)
        w = self.unit_rows(rng, 1, 8).T
        loss, d_emb, d_w = arcface_loss(emb, np.zeros(4, dtype=int), w,
                                        s=30.0, m_margin=0.5)
        assert abs(loss) < 1e-12
        assert np.abs(d_emb).max() < 1e-12
        assert np.abs(d_w).max() < 1e-12

    def test_invalid_margin(self):
        emb = np.eye(3)
        w = np.eye(3)
        labels = np.arange(3)
        for bad in (-0.1, math.pi / 2, 2.0):
            with pytest.raises(InvalidMargin):
                arcface_loss(emb, labels, w, s=30.0, m_margin=bad)

    def test_finite_at_alignment(self):
        # embedding exactly equal to its class column: clamping keeps the
        # target angle derivative finite
        w = np.eye(4)[:, :2]
        emb = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])
        loss, d_emb, d_w = arcface_loss(emb, np.array([0, 1]), w,
                                        s=30.0, m_margin=0.5)
        assert np.isfinite(loss)
        assert np.isfinite(d_emb).all()
        assert np.isfinite(d_w).all()

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(9)
        n, d, c = 4, 8, 5
        emb = self.unit_rows(rng, n, d)
        w = self.unit_rows(rng, c, d).T
        labels = rng.integers(0, c, size=n)
        _, d_emb, d_w = arcface_loss(emb, labels, w, s=30.0, m_margin=0.5)
        h = 1e-5

        def loss_at(e, ww):
            return arcface_loss(e, labels, ww, s=30.0, m_margin=0.5)[0]

        worst = 0.0
        for arr, grad in ((emb, d_emb), (w, d_w)):
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                ij = it.multi_index
                keep = arr[ij]
                arr[ij] = keep + h
                lp = loss_at(emb, w)
                arr[ij] = keep - h
                lm = loss_at(emb, w)
                arr[ij] = keep
                fd = (lp - lm) / (2 * h)
                a = grad[ij]
                if max(abs(a), abs(fd)) < 1e-6:
                    continue
                worst = max(worst, abs(a - fd) / max(abs(a), abs(fd)))
        assert worst < 1e-4


# ---------------------------------------------------------------------------
# full-network gradients


def cache_fingerprint(caches, model, labels):
    parts = []
    for c in caches:
        for lc in c.layers:
            parts.append(lc.edges.tobytes())
            parts.append(lc.sel.tobytes())
            parts.append(lc.active.tobytes())
            parts.append(lc.pool_arg.tobytes())
        parts.append((c.z1 > 0).tobytes())
    # the margin loss has its own discrete structure: the cosine clamp and
    # the monotone-margin branch on the target logit
    emb = np.stack([c.embedding for c in caches])
    cos = emb @ model.w_arc
    lo, hi = -1.0 + 1e-7, 1.0 - 1e-7
    parts.append(((cos > lo) & (cos < hi)).tobytes())
    t = np.clip(cos, lo, hi)[np.arange(len(emb)), labels]
    parts.append((t > -math.cos(model.m_margin)).tobytes())
    return b"".join(parts)


def check_full_gradients(seed, n=32, h=1e-5):
    """Central finite differences over every parameter of a small net.

    Coordinates where the perturbation flips a discrete choice (graph edge,
    max selection, relu activation) are kinks and are skipped, as are
    coordinates whose gradient is below finite-difference resolution.
    Returns (worst relative error, checked count, skipped count).
    """
    rng = np.random.default_rng(seed)
    model = tiny_model(seed=seed)
    xs = rng.normal(size=(3, n, 9))
    labels = rng.integers(0, len(model.class_names), size=3)
    _, grads, caches0 = loss_and_grads(xs, labels, model)
    fp0 = cache_fingerprint(caches0, model, labels)
    worst = 0.0
    checked = 0
    skipped = 0
    for name, arr in model.param_tensors():
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            ij = it.multi_index
            keep = arr[ij]
            arr[ij] = keep + h
            lp, _, cp = loss_and_grads(xs, labels, model)
            arr[ij] = keep - h
            lm, _, cm = loss_and_grads(xs, labels, model)
            arr[ij] = keep
            if (cache_fingerprint(cp, model, labels) != fp0
                    or cache_fingerprint(cm, model, labels) != fp0):
                skipped += 1
                continue
            fd = (lp - lm) / (2 * h)
            a = grads[name][ij]
            # central differences cancel ~16 digits of a loss of order 10,
            # so gradients under ~3e-5 are below measurement resolution
            if max(abs(a), abs(fd)) < 3e-5:
                continue
            checked += 1
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd)))
    return worst, checked, skipped


class TestFullGradients:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_finite_differences(self, seed):
        worst, checked, skipped = check_full_gradients(seed)
        assert checked > 100
        assert worst < 1e-4

    def test_losses_finite_and_deterministic(self):
        model = tiny_model(seed=5)
        rng = np.random.default_rng(11)
        xs = rng.normal(size=(4, 24, 9))
        labels = rng.integers(0, 5, size=4)
        l1, g1, _ = loss_and_grads(xs, labels, model)
        l2, g2, _ = loss_and_grads(xs, labels, model)
        assert l1 == l2
        assert np.isfinite(l1)
        for name, _ in model.param_tensors():
            np.testing.assert_array_equal(g1[name], g2[name])


# ---------------------------------------------------------------------------
# augmentation


IDENTITY_POLICY = AugmentPolicy(rotation_deg=(0.0, 0.0), scale=(1.0, 1.0),
                                shear=(0.0, 0.0), window_jitter=0.0)


class TestAugment:
    def chains(self):
        return [(square_chain(100.0, 60, center=(40.0, -10.0)), True),
                (np.array([[0.0, 0.0], [30.0, 0.0], [60.0, 5.0]]), False)]

    def test_zero_ranges_identity(self):
        out = augment_chains(self.chains(), IDENTITY_POLICY, seed=3)
        for (pts, closed), (opts, oclosed) in zip(self.chains(), out):
            assert closed == oclosed
            np.testing.assert_allclose(opts, pts, rtol=0, atol=1e-9)

    def test_seed_determinism(self):
        a = augment_chains(self.chains(), AugmentPolicy(), seed=5)
        b = augment_chains(self.chains(), AugmentPolicy(), seed=5)
        c = augment_chains(self.chains(), AugmentPolicy(), seed=6)
        for (pa, _), (pb, _) in zip(a, b):
            np.testing.assert_array_equal(pa, pb)
        assert any(not np.array_equal(pa, pc)
                   for (pa, _), (pc, _) in zip(a, c))

    def test_square_stays_within_bound(self):
        # Monte-Carlo bound: every augmented point stays within 1.35x the
        # original bbox diagonal of the original bbox center
        pts = square_chain(120.0, 80)
        chains = [(pts, True)]
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        center = (lo + hi) / 2.0
        diag = float(np.hypot(*(hi - lo)))
        worst = 0.0
        for seed in range(10_000):
            out = augment_chains(chains, AugmentPolicy(), seed=seed)
            d = np.linalg.norm(out[0][0] - center, axis=1).max()
            worst = max(worst, float(d))
        assert worst <= 1.35 * diag

    def test_windows_transform_rigidly(self):
        # jitter-only policy: each 6-point window undergoes one affine map,
        # so collinear windows stay collinear while the global line bends
        pts = np.stack([np.linspace(0.0, 110.0, 12), np.zeros(12)], axis=1)
        policy = AugmentPolicy(rotation_deg=(0.0, 0.0), scale=(1.0, 1.0),
                               shear=(0.0, 0.0), window_jitter=0.01)
        out = augment_chains([(pts, False)], policy, seed=1)[0][0]

        def max_deviation(seg):
            d = seg[-1] - seg[0]
            n = np.array([-d[1], d[0]]) / np.linalg.norm(d)
            return np.abs((seg - seg[0]) @ n).max()

        assert max_deviation(out[0:6]) < 1e-9
        assert max_deviation(out[6:12]) < 1e-9
        assert max_deviation(out) > 1e-3

    def test_rotate_chains_quarter_turns(self):
        pts = np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 4.0]])
        (r1, closed), = rotate_chains([(pts, True)], 1)
        assert closed
        # rotation about the bbox center (5, 2) by +90 degrees
        expect = np.array([[7.0, -3.0], [7.0, 7.0], [3.0, 7.0]])
        np.testing.assert_allclose(r1, expect, rtol=0, atol=1e-12)
        (r4, _), = rotate_chains([(pts, True)], 4)
        np.testing.assert_allclose(r4, pts, rtol=0, atol=1e-12)


# ---------------------------------------------------------------------------
# training


def desk_prototypes():
    return {
        "gate": [(square_chain(200.0, 160), True)],
        "disc": [(circle_chain(100.0, 160), True)],
    }


def desk_config(**kw):
    base = dict(widths=(16, 16, 24), head_hidden=32, embed_dim=16, k=8,
                points=256, epochs=2, augment_per_class=8, batch_size=8,
                seed=0)
    base.update(kw)
    return TrainConfig(**base)


class TestTrain:
    def test_insufficient_classes(self):
        with pytest.raises(InsufficientClasses):
            train({"only": [(circle_chain(), True)]}, desk_config())

    def test_desk_scale_two_classes(self):
        result = train(desk_prototypes(), desk_config(
            epochs=3, augment_per_class=50))
        losses = result.epoch_losses
        assert losses[-1] < 0.1 * losses[0]
        embs = {}
        for e in result.directory.entries:
            embs[(e.class_name, e.quarter_turns)] = e.embedding
            assert abs(np.linalg.norm(e.embedding) - 1.0) < 1e-6
        assert len(embs) == 8
        within = []
        between = []
        for (na, qa), ea in embs.items():
            for (nb, qb), eb in embs.items():
                if (na, qa) >= (nb, qb):
                    continue
                sim = float(ea @ eb)
                (within if na == nb else between).append(sim)
        assert min(within) > max(between)

    def test_seed_reproducibility(self):
        a = train(desk_prototypes(), desk_config())
        b = train(desk_prototypes(), desk_config())
        assert a.step_losses == b.step_losses
        for name, _ in a.model.param_tensors():
            np.testing.assert_array_equal(dict(a.model.param_tensors())[name],
                                          dict(b.model.param_tensors())[name])

    def test_w_columns_stay_unit_norm(self):
        result = train(desk_prototypes(), desk_config())
        norms = np.linalg.norm(result.model.w_arc, axis=0)
        np.testing.assert_allclose(norms, 1.0, rtol=0, atol=1e-9)

    def test_losses_all_finite(self):
        result = train(desk_prototypes(), desk_config())
        assert all(np.isfinite(v) for v in result.step_losses)

    def test_nonconvergence_raises(self, monkeypatch):
        # unit-norm embeddings and renormalized class columns keep the loss
        # bounded, so real divergence is hard to provoke; drive the guard
        # directly with a rising loss sequence
        import pidsym.net as netmod
        counter = iter(range(1, 10_000))

        def rising_loss(xs, labels, model):
            grads = {name: np.zeros_like(arr)
                     for name, arr in model.param_tensors()}
            return float(next(counter)), grads, []

        monkeypatch.setattr(netmod, "loss_and_grads", rising_loss)
        with pytest.raises(NonConvergence):
            train(desk_prototypes(), desk_config())


# ---------------------------------------------------------------------------
# model persistence


class TestModelIO:
    def test_round_trip(self, tmp_path):
        result = train(desk_prototypes(), desk_config())
        save_model(tmp_path / "model", result.model, result.directory)
        model2, dir2 = load_model(tmp_path / "model")
        for name, arr in result.model.param_tensors():
            got = dict(model2.param_tensors())[name]
            np.testing.assert_array_equal(got, arr.astype(np.float32))
        assert model2.class_names == result.model.class_names
        assert model2.k == result.model.k
        assert model2.s == result.model.s
        assert model2.m_margin == result.model.m_margin
        assert len(dir2.entries) == len(result.directory.entries)
        for ea, eb in zip(result.directory.entries, dir2.entries):
            assert ea.class_name == eb.class_name
            assert ea.quarter_turns == eb.quarter_turns
            np.testing.assert_array_equal(eb.embedding,
                                          ea.embedding.astype(np.float32))

    def test_manifest_fields(self, tmp_path):
        import json
        result = train(desk_prototypes(), desk_config())
        save_model(tmp_path / "model", result.model, result.directory)
        manifest = json.loads((tmp_path / "model" / "manifest.json").read_text())
        assert manifest["schema_version"] == 1
        assert manifest["dims"]["f_in"] == 9
        assert manifest["dims"]["widths"] == [16, 16, 24]
        assert manifest["hyper"]["k"] == 8
        assert manifest["blob_dtype"] == "<f4"

    def test_loaded_model_same_embeddings(self, tmp_path):
        result = train(desk_prototypes(), desk_config())
        save_model(tmp_path / "model", result.model, result.directory)
        model2, _ = load_model(tmp_path / "model")
        x = np.random.default_rng(0).normal(size=(64, 9))
        a = forward(x, result.model).embedding
        b = forward(x, model2).embedding
        # float32 storage rounds parameters
        assert float(a @ b) > 0.9999
