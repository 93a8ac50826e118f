"""Dynamic-graph convolutional embedding network with hand-derived gradients.

Three edge-convolution layers (9 -> 64 -> 64 -> 128) run on k-NN graphs that
are recomputed from each layer's input activations. The per-layer global max
pools concatenate into a 256-dim descriptor, which a two-affine head with a
ReLU maps to a 128-dim L2-normalized embedding. Training minimizes an
additive angular margin loss over unit-norm class weight columns using plain
minibatch gradient descent with momentum; all gradients are written out by
hand (max pooling ties route to the lowest index, relu'(0) = 0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import featurize
from .ioutils import atomic_write_bytes, write_json

MODEL_SCHEMA_VERSION = 1


class KTooLarge(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class InvalidMargin(ValueError):
    pass


class InsufficientClasses(ValueError):
    pass


class NonConvergence(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# graph construction


def knn_graph(features: np.ndarray, k: int) -> np.ndarray:
    """Per vertex: itself plus the k-1 nearest others, ties by lower index.

    Returns an (n, k) int array whose rows start with the vertex itself and
    continue in (distance, index) order. Selection runs through argpartition;
    rows with distance ties crossing the kth boundary fall back to a full
    stable sort so the lower-index rule holds exactly.
    """
    x = np.asarray(features, dtype=np.float64)
    n = len(x)
    if not 1 <= k <= n:
        raise KTooLarge(f"k={k} outside [1, {n}]")
    sq = np.einsum("ij,ij->i", x, x)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d2, -1.0)
    if k == 1:
        return np.arange(n, dtype=np.int64)[:, None]
    if k == n:
        cand = np.broadcast_to(np.arange(n), (n, n)).copy()
        vals = d2
    else:
        cand = np.argpartition(d2, k - 1, axis=1)[:, :k]
        vals = np.take_along_axis(d2, cand, axis=1)
    kth = vals.max(axis=1)
    # two stable passes = sort by (distance, index)
    by_index = np.argsort(cand, axis=1, kind="stable")
    cand = np.take_along_axis(cand, by_index, axis=1)
    vals = np.take_along_axis(vals, by_index, axis=1)
    by_dist = np.argsort(vals, axis=1, kind="stable")
    out = np.take_along_axis(cand, by_dist, axis=1)[:, :k]
    tie_rows = np.nonzero((d2 <= kth[:, None]).sum(axis=1) > k)[0]
    for r in tie_rows:
        out[r] = np.argsort(d2[r], kind="stable")[:k]
    return np.ascontiguousarray(out.astype(np.int64))


# ---------------------------------------------------------------------------
# edge convolution


@dataclass
class EdgeConvLayer:
    theta: np.ndarray             # (F_out, F_in), multiplies v_j - v_i
    phi: np.ndarray               # (F_out, F_in), multiplies v_i
    bias: np.ndarray              # (F_out,)


def _conv_core(x: np.ndarray, edges: np.ndarray, layer: EdgeConvLayer):
    """Edge responses relu(theta (x_j - x_i) + phi x_i + b) max-pooled over
    the neighbor list. Returns (output, argmax neighbor slot)."""
    if layer.theta.shape != layer.phi.shape:
        raise ShapeMismatch("theta and phi shapes differ")
    if layer.theta.shape[1] != x.shape[1]:
        raise ShapeMismatch(
            f"layer expects F={layer.theta.shape[1]}, got {x.shape[1]}")
    if layer.bias.shape != (layer.theta.shape[0],):
        raise ShapeMismatch("bias length does not match output width")
    q = x @ layer.theta.T
    p = x @ layer.phi.T
    e = q[edges]                  # (n, k, F_out)
    e -= q[:, None, :]
    e += p[:, None, :]
    e += layer.bias
    np.maximum(e, 0.0, out=e)
    sel = e.argmax(axis=1)
    out = np.take_along_axis(e, sel[:, None, :], axis=1)[:, 0, :]
    return out, sel


def edge_conv(features: np.ndarray, edges: np.ndarray,
              layer: EdgeConvLayer) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    return _conv_core(x, np.asarray(edges), layer)[0]


# ---------------------------------------------------------------------------
# model state


@dataclass
class ModelState:
    layers: list[EdgeConvLayer]
    w1: np.ndarray                # (head_hidden, sum(widths))
    b1: np.ndarray
    w2: np.ndarray                # (embed_dim, head_hidden)
    b2: np.ndarray
    w_arc: np.ndarray             # (embed_dim, n_classes), unit-norm columns
    k: int = 20
    s: float = 30.0
    m_margin: float = 0.5
    class_names: list[str] = field(default_factory=list)
    seed: int = 0

    def param_tensors(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, layer in enumerate(self.layers):
            out.append((f"theta{i}", layer.theta))
            out.append((f"phi{i}", layer.phi))
            out.append((f"bias{i}", layer.bias))
        out.extend([("w1", self.w1), ("b1", self.b1), ("w2", self.w2),
                    ("b2", self.b2), ("w_arc", self.w_arc)])
        return out

    @property
    def f_in(self) -> int:
        return int(self.layers[0].theta.shape[1])

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(int(layer.theta.shape[0]) for layer in self.layers)

    @property
    def embed_dim(self) -> int:
        return int(self.w2.shape[0])


def make_model(class_names: list[str], f_in: int = 9,
               widths: tuple[int, ...] = (64, 64, 128),
               head_hidden: int = 256, embed_dim: int = 128, k: int = 20,
               s: float = 30.0, m_margin: float = 0.5,
               seed: int = 0) -> ModelState:
    if not 0.0 <= m_margin < math.pi / 2:
        raise InvalidMargin(f"m_margin={m_margin} outside [0, pi/2)")
    rng = np.random.default_rng(seed)
    layers = []
    fi = f_in
    for fo in widths:
        scale = math.sqrt(2.0 / fi)
        layers.append(EdgeConvLayer(
            rng.normal(0.0, scale, (fo, fi)),
            rng.normal(0.0, scale, (fo, fi)),
            np.zeros(fo),
        ))
        fi = fo
    dsum = int(sum(widths))
    w1 = rng.normal(0.0, math.sqrt(2.0 / dsum), (head_hidden, dsum))
    w2 = rng.normal(0.0, math.sqrt(2.0 / head_hidden), (embed_dim, head_hidden))
    w_arc = rng.normal(size=(embed_dim, len(class_names)))
    w_arc /= np.linalg.norm(w_arc, axis=0, keepdims=True)
    return ModelState(layers, w1, np.zeros(head_hidden), w2,
                      np.zeros(embed_dim), w_arc, k=k, s=s,
                      m_margin=m_margin, class_names=list(class_names),
                      seed=seed)


# ---------------------------------------------------------------------------
# forward pass


@dataclass
class LayerCache:
    inputs: np.ndarray            # (n, F_in)
    edges: np.ndarray             # (n, k)
    sel: np.ndarray               # (n, F_out) winning neighbor slot
    active: np.ndarray            # (n, F_out) winning response > 0
    output: np.ndarray            # (n, F_out)
    pool_arg: np.ndarray          # (F_out,) winning row of the global pool
    pooled: np.ndarray            # (F_out,)


@dataclass
class ForwardCache:
    layers: list[LayerCache]
    desc: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    z2: np.ndarray
    norm: float
    embedding: np.ndarray


def aux_embedding(x: np.ndarray) -> np.ndarray:
    """Extension point for an auxiliary descriptor branch (e.g. one computed
    from the rasterized region image). Zero-width for now; its output is
    concatenated onto the geometric embedding, so widening it is the only
    change a future branch needs here."""
    return np.zeros(0, dtype=np.float64)


def forward(x: np.ndarray, model: ModelState) -> ForwardCache:
    """Embed one point set; the cache carries what backprop needs."""
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != model.f_in:
        raise ShapeMismatch(f"input must be (n, {model.f_in})")
    caches = []
    pooled_all = []
    for layer in model.layers:
        edges = knn_graph(h, model.k)
        out, sel = _conv_core(h, edges, layer)
        pool_arg = out.argmax(axis=0)
        pooled = out[pool_arg, np.arange(out.shape[1])]
        caches.append(LayerCache(h, edges, sel, out > 0.0, out,
                                 pool_arg, pooled))
        pooled_all.append(pooled)
        h = out
    desc = np.concatenate(pooled_all)
    z1 = model.w1 @ desc + model.b1
    a1 = np.maximum(z1, 0.0)
    z2 = model.w2 @ a1 + model.b2
    norm = max(float(np.linalg.norm(z2)), 1e-12)
    emb = np.concatenate([z2 / norm, aux_embedding(x)])
    return ForwardCache(caches, desc, z1, a1, z2, norm, emb)


def _backward_sample(cache: ForwardCache, model: ModelState,
                     d_emb: np.ndarray, grads: dict[str, np.ndarray]) -> None:
    emb = cache.embedding
    d_z2 = (d_emb - emb * float(emb @ d_emb)) / cache.norm
    grads["w2"] += np.outer(d_z2, cache.a1)
    grads["b2"] += d_z2
    d_a1 = model.w2.T @ d_z2
    d_z1 = d_a1 * (cache.z1 > 0.0)
    grads["w1"] += np.outer(d_z1, cache.desc)
    grads["b1"] += d_z1
    d_desc = model.w1.T @ d_z1

    widths = model.widths
    splits = np.cumsum(widths)[:-1]
    d_pooled = np.split(d_desc, splits)

    d_next = None                 # grad wrt current layer output via layer above
    for li in reversed(range(len(model.layers))):
        lc = cache.layers[li]
        layer = model.layers[li]
        n, fo = lc.output.shape
        cols = np.arange(fo)
        d_out = np.zeros((n, fo))
        d_out[lc.pool_arg, cols] += d_pooled[li]
        if d_next is not None:
            d_out += d_next
        ge = d_out * lc.active
        grads[f"bias{li}"] += ge.sum(axis=0)
        jsel = np.take_along_axis(lc.edges, lc.sel, axis=1)
        d_q = np.bincount(
            (jsel * fo + cols).ravel(), weights=ge.ravel(), minlength=n * fo,
        ).reshape(n, fo)
        d_q -= ge
        grads[f"theta{li}"] += d_q.T @ lc.inputs
        grads[f"phi{li}"] += ge.T @ lc.inputs
        d_next = d_q @ layer.theta + ge @ layer.phi


# ---------------------------------------------------------------------------
# margin loss


def arcface_loss(embeddings: np.ndarray, labels: np.ndarray, w: np.ndarray,
                 s: float, m_margin: float):
    """Additive angular margin loss and its analytic gradients.

    The margin shifts only the target-class angle; cosines are clamped to
    (-1, 1) with the clamp treated as zero-slope, which keeps the
    1/sin(theta) factor in the target derivative finite.

    Past theta = pi - m the raw shifted cosine turns around (cos(theta + m)
    rises again), which rewards anti-aligning with the target column; the
    optimizer reliably finds that degenerate optimum. The target logit
    therefore switches to the monotone surrogate cos(theta) - m*sin(m)
    there, the standard stabilization. With m = 0 the branch is
    unreachable, so the cross-entropy reduction is exact.
    """
    if not 0.0 <= m_margin < math.pi / 2:
        raise InvalidMargin(f"m_margin={m_margin} outside [0, pi/2)")
    emb = np.asarray(embeddings, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(emb)
    rows = np.arange(n)
    cos = emb @ w
    lo, hi = -1.0 + 1e-7, 1.0 - 1e-7
    inside = (cos > lo) & (cos < hi)
    cosc = np.clip(cos, lo, hi)
    t = cosc[rows, labels]
    sin_t = np.sqrt(1.0 - t * t)
    logits = s * cosc
    cm, sm = math.cos(m_margin), math.sin(m_margin)
    monotone = t > -cm                      # theta < pi - m
    logits[rows, labels] = s * np.where(monotone, t * cm - sin_t * sm,
                                        t - m_margin * sm)

    zmax = logits.max(axis=1, keepdims=True)
    ez = np.exp(logits - zmax)
    denom = ez.sum(axis=1, keepdims=True)
    logp = logits - zmax - np.log(denom)
    loss = -float(logp[rows, labels].mean())

    d_logits = ez / denom
    d_logits[rows, labels] -= 1.0
    d_logits /= n
    d_cos = d_logits * s
    d_t = np.where(monotone, cm + t * sm / sin_t, 1.0)
    d_cos[rows, labels] = d_logits[rows, labels] * s * d_t
    d_cos *= inside
    return loss, d_cos @ w.T, emb.T @ d_cos


def loss_and_grads(xs, labels, model: ModelState):
    """Batch margin loss over embeddings plus gradients for every parameter.

    Gradients accumulate in batch-index order so reruns are bit-identical.
    """
    caches = [forward(np.asarray(x, dtype=np.float64), model) for x in xs]
    emb = np.stack([c.embedding for c in caches])
    loss, d_emb, d_w = arcface_loss(emb, labels, model.w_arc,
                                    model.s, model.m_margin)
    grads = {name: np.zeros_like(arr) for name, arr in model.param_tensors()}
    grads["w_arc"] += d_w
    for b in range(len(caches)):
        _backward_sample(caches[b], model, d_emb[b], grads)
    return loss, grads, caches


# ---------------------------------------------------------------------------
# geometric augmentation


@dataclass(frozen=True)
class AugmentPolicy:
    rotation_deg: tuple[float, float] = (-20.0, 20.0)
    scale: tuple[float, float] = (0.9, 1.1)
    shear: tuple[float, float] = (-0.05, 0.05)
    window: int = 6
    window_jitter: float = 0.01


def _bbox_center(chains) -> np.ndarray:
    allp = np.concatenate([np.asarray(p, dtype=np.float64) for p, _ in chains])
    return (allp.min(axis=0) + allp.max(axis=0)) / 2.0


def rotate_chains(chains, quarter_turns: int):
    """Rotate all chains by 90-degree steps about their joint bbox center."""
    mats = (np.array([[1.0, 0.0], [0.0, 1.0]]),
            np.array([[0.0, -1.0], [1.0, 0.0]]),
            np.array([[-1.0, 0.0], [0.0, -1.0]]),
            np.array([[0.0, 1.0], [-1.0, 0.0]]))
    m = mats[quarter_turns % 4]
    c = _bbox_center(chains)
    return [((np.asarray(p, dtype=np.float64) - c) @ m.T + c, bool(cl))
            for p, cl in chains]


def augment_chains(chains, policy: AugmentPolicy = AugmentPolicy(),
                   seed=0):
    """One global affine (rotation, shear, isotropic scale) about the joint
    bbox center, composed with an independent near-identity 2x2 map per
    window of `policy.window` consecutive same-chain points."""
    rng = np.random.default_rng(seed)
    ang = math.radians(rng.uniform(*policy.rotation_deg))
    sc = rng.uniform(*policy.scale)
    sh = rng.uniform(*policy.shear)
    rot = np.array([[math.cos(ang), -math.sin(ang)],
                    [math.sin(ang), math.cos(ang)]])
    shear = np.array([[1.0, sh], [0.0, 1.0]])
    glob = (rot @ shear) * sc
    c = _bbox_center(chains)
    j = policy.window_jitter
    out = []
    for pts, closed in chains:
        p = (np.asarray(pts, dtype=np.float64) - c) @ glob.T
        for start in range(0, len(p), policy.window):
            m = np.eye(2) + rng.uniform(-j, j, (2, 2))
            p[start:start + policy.window] = p[start:start + policy.window] @ m.T
        out.append((p + c, bool(closed)))
    return out


# ---------------------------------------------------------------------------
# training


class _ChainRegion:
    """Adapter giving featurize the chains of a free-standing glyph."""

    __slots__ = ("chains", "points")

    def __init__(self, chains):
        self.chains = [(np.asarray(p, dtype=np.float64), bool(cl))
                       for p, cl in chains]
        self.points = np.concatenate([p for p, _ in self.chains])


def featurize_chains(chains, n: int = 1024):
    return featurize(_ChainRegion(chains), n=n)


@dataclass
class DirectoryEntry:
    class_name: str
    quarter_turns: int
    embedding: np.ndarray


@dataclass
class ClassDirectory:
    entries: list[DirectoryEntry]

    def class_names(self) -> list[str]:
        return sorted({e.class_name for e in self.entries})


@dataclass
class TrainConfig:
    f_in: int = 9
    widths: tuple[int, ...] = (64, 64, 128)
    head_hidden: int = 256
    embed_dim: int = 128
    k: int = 20
    s: float = 30.0
    m_margin: float = 0.5
    lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 100
    augment_per_class: int = 200  # per 90-degree orientation
    points: int = 1024
    policy: AugmentPolicy = field(default_factory=AugmentPolicy)
    seed: int = 0


@dataclass
class TrainResult:
    model: ModelState
    directory: ClassDirectory
    epoch_losses: list[float]
    step_losses: list[float]


def build_dataset(prototypes: dict[str, list], config: TrainConfig):
    """classes x 4 rotations x A augmentations, featurized once up front."""
    names = sorted(prototypes)
    total = len(names) * 4 * config.augment_per_class
    feats = np.empty((total, config.points, 9), dtype=np.float32)
    labels = np.empty(total, dtype=np.int64)
    i = 0
    for ci, name in enumerate(names):
        for q in range(4):
            rotated = rotate_chains(prototypes[name], q)
            for a in range(config.augment_per_class):
                ss = np.random.SeedSequence((config.seed, ci, q, a))
                ch = augment_chains(rotated, config.policy, seed=ss)
                feats[i] = featurize_chains(ch, config.points).values
                labels[i] = ci
                i += 1
    return names, feats, labels


def train(prototypes: dict[str, list], config: TrainConfig) -> TrainResult:
    """One-shot training: one chain set per class name.

    Raises NonConvergence when the final epoch's mean loss exceeds the
    first epoch's.
    """
    if len(prototypes) < 2:
        raise InsufficientClasses("need at least 2 classes")
    names, feats, labels = build_dataset(prototypes, config)
    model = make_model(names, f_in=config.f_in, widths=config.widths,
                       head_hidden=config.head_hidden,
                       embed_dim=config.embed_dim, k=config.k, s=config.s,
                       m_margin=config.m_margin, seed=config.seed)
    vel = {name: np.zeros_like(arr) for name, arr in model.param_tensors()}
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 1)))
    step_losses: list[float] = []
    epoch_losses: list[float] = []
    total = len(labels)
    for _ in range(config.epochs):
        perm = rng.permutation(total)
        acc = 0.0
        for off in range(0, total, config.batch_size):
            idx = perm[off:off + config.batch_size]
            xs = feats[idx].astype(np.float64)
            loss, grads, _ = loss_and_grads(xs, labels[idx], model)
            for name, arr in model.param_tensors():
                v = vel[name]
                v *= config.momentum
                v -= config.lr * grads[name]
                arr += v
            model.w_arc /= np.maximum(
                np.linalg.norm(model.w_arc, axis=0, keepdims=True), 1e-12)
            step_losses.append(float(loss))
            acc += float(loss) * len(idx)
        epoch_losses.append(acc / total)
    if epoch_losses[-1] > epoch_losses[0]:
        raise NonConvergence(
            f"final epoch loss {epoch_losses[-1]:.4f} exceeds initial "
            f"{epoch_losses[0]:.4f}")
    entries = []
    for name in names:
        for q in range(4):
            fm = featurize_chains(rotate_chains(prototypes[name], q),
                                  config.points)
            emb = forward(fm.values, model).embedding
            entries.append(DirectoryEntry(name, q, emb.copy()))
    return TrainResult(model, ClassDirectory(entries), epoch_losses,
                       step_losses)


# ---------------------------------------------------------------------------
# persistence


def save_model(dirpath, model: ModelState, directory: ClassDirectory) -> None:
    path = Path(dirpath)
    path.mkdir(parents=True, exist_ok=True)
    order = [(name, list(arr.shape)) for name, arr in model.param_tensors()]
    blob = b"".join(arr.astype("<f4").tobytes(order="C")
                    for _, arr in model.param_tensors())
    manifest = {
        "schema_version": MODEL_SCHEMA_VERSION,
        "kind": "symbol-net",
        "dims": {
            "f_in": model.f_in,
            "widths": list(model.widths),
            "head_hidden": int(model.w1.shape[0]),
            "embed_dim": model.embed_dim,
            "classes": len(model.class_names),
        },
        "hyper": {"k": model.k, "s": model.s, "m_margin": model.m_margin},
        "seed": model.seed,
        "class_names": model.class_names,
        "blob_dtype": "<f4",
        "param_order": order,
    }
    atomic_write_bytes(str(path / "params.f32"), blob)
    write_json(str(path / "manifest.json"), manifest)

    dir_manifest = {
        "schema_version": MODEL_SCHEMA_VERSION,
        "kind": "class-directory",
        "embed_dim": model.embed_dim,
        "blob_dtype": "<f4",
        "entries": [{"class": e.class_name, "quarter_turns": e.quarter_turns}
                    for e in directory.entries],
    }
    dblob = b"".join(e.embedding.astype("<f4").tobytes(order="C")
                     for e in directory.entries)
    atomic_write_bytes(str(path / "directory.f32"), dblob)
    write_json(str(path / "directory.json"), dir_manifest)


def load_model(dirpath) -> tuple[ModelState, ClassDirectory]:
    import json

    path = Path(dirpath)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("schema_version") != MODEL_SCHEMA_VERSION:
        raise ValueError("unsupported model schema version")
    blob = (path / "params.f32").read_bytes()
    arrays = {}
    offset = 0
    for name, shape in manifest["param_order"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        arrays[name] = arr.reshape(shape).astype(np.float64)
        offset += count * 4
    if offset != len(blob):
        raise ValueError("parameter blob size mismatch")
    widths = manifest["dims"]["widths"]
    layers = [EdgeConvLayer(arrays[f"theta{i}"], arrays[f"phi{i}"],
                            arrays[f"bias{i}"]) for i in range(len(widths))]
    model = ModelState(layers, arrays["w1"], arrays["b1"], arrays["w2"],
                       arrays["b2"], arrays["w_arc"],
                       k=int(manifest["hyper"]["k"]),
                       s=float(manifest["hyper"]["s"]),
                       m_margin=float(manifest["hyper"]["m_margin"]),
                       class_names=list(manifest["class_names"]),
                       seed=int(manifest.get("seed", 0)))

    dmanifest = json.loads((path / "directory.json").read_text())
    dblob = (path / "directory.f32").read_bytes()
    d = int(dmanifest["embed_dim"])
    entries = []
    for i, meta in enumerate(dmanifest["entries"]):
        vec = np.frombuffer(dblob, dtype="<f4", count=d, offset=i * d * 4)
        entries.append(DirectoryEntry(meta["class"],
                                      int(meta["quarter_turns"]),
                                      vec.astype(np.float64)))
    return model, ClassDirectory(entries)
