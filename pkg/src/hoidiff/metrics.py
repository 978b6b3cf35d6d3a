"""Evaluation protocol: contrastive feature extractors, R-Precision, FID,
diversity, multi-modality, penetration ratio, and novelty retrieval.

Motion and text encoders are trained jointly with a symmetric contrastive
loss so matched pairs land close in a shared 64-dim feature space; a second
pair with 79-dim input covers human-only evaluation. All statistics are
deterministic given seeds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import data
from . import diffkit as dk
from . import geom
from .train import Adam

FEATURE_DIM = 64


class MetricError(ValueError):
    """Not enough samples, mismatched shapes, or an empty input set."""


# ---------------------------------------------------------------------------
# feature extractors
# ---------------------------------------------------------------------------

class FeatureExtractor:
    """Temporal-conv motion encoder paired with a pooled text encoder.

    Motion input is a normalized (F, C) block; features are unit-normalized
    FEATURE_DIM vectors.
    """

    def __init__(self, input_dim: int, vocab_size: int, seed: int,
                 width: int = 64):
        rng = np.random.default_rng(seed)
        self.input_dim = input_dim
        self.vocab_size = vocab_size
        self.width = width

        def init(name, shape, scale=None):
            if scale is None:
                scale = np.sqrt(1.0 / shape[0])
            self.params[name] = dk.Tensor(
                rng.normal(0.0, scale, size=shape).astype(np.float32),
                requires_grad=True)

        def zeros(name, shape):
            self.params[name] = dk.Tensor(np.zeros(shape, dtype=np.float32),
                                          requires_grad=True)

        self.params: dict[str, dk.Tensor] = {}
        init("in.w", (input_dim, width))
        zeros("in.b", (width,))
        for i in (1, 2):
            init(f"conv{i}.w", (width, width, 3), scale=np.sqrt(2.0 / (3 * width)))
            zeros(f"conv{i}.b", (width,))
            self.params[f"gn{i}.g"] = dk.Tensor(np.ones(width, dtype=np.float32),
                                                requires_grad=True)
            zeros(f"gn{i}.b", (width,))
        init("out.w", (width, FEATURE_DIM))
        zeros("out.b", (FEATURE_DIM,))
        init("text.embed", (vocab_size, width), scale=0.02)
        init("text.l1.w", (width, width))
        zeros("text.l1.b", (width,))
        init("text.out.w", (width, FEATURE_DIM))
        zeros("text.out.b", (FEATURE_DIM,))

    def encode_motion(self, frames_norm) -> dk.Tensor:
        x = frames_norm if isinstance(frames_norm, dk.Tensor) \
            else dk.Tensor(frames_norm)
        if x.shape[1] != self.input_dim:
            raise MetricError(f"expected {self.input_dim} channels, got {x.shape}")
        h = dk.transpose(dk.matmul(x, self.params["in.w"]) + self.params["in.b"])
        for i in (1, 2):
            h = dk.group_norm(h, 8, self.params[f"gn{i}.g"], self.params[f"gn{i}.b"])
            h = dk.conv1d(dk.silu(h), self.params[f"conv{i}.w"],
                          self.params[f"conv{i}.b"])
        pooled = dk.reduce_mean(h, axis=1)  # (width,)
        pooled = dk.reshape(pooled, (1, self.width))
        feat = dk.matmul(pooled, self.params["out.w"]) + self.params["out.b"]
        return _unit(dk.reshape(feat, (FEATURE_DIM,)))

    def encode_text(self, tokens) -> dk.Tensor:
        tokens = list(tokens)
        if not tokens:
            pooled = dk.Tensor(np.zeros((1, self.width)))
        else:
            emb = dk.embedding_lookup(self.params["text.embed"], tokens)
            pooled = dk.reduce_mean(emb, axis=0, keepdims=True)
        h = dk.silu(dk.matmul(pooled, self.params["text.l1.w"])
                    + self.params["text.l1.b"])
        feat = dk.matmul(h, self.params["text.out.w"]) + self.params["text.out.b"]
        return _unit(dk.reshape(feat, (FEATURE_DIM,)))


def _unit(v: dk.Tensor) -> dk.Tensor:
    norm = dk.sqrt(dk.clamp_min(dk.reduce_sum(v * v), 1e-12))
    return v / norm


@dataclass
class ExtractorPair:
    """Full-frame and human-only motion encoders with their text heads."""

    motion: FeatureExtractor  # 216-channel input
    motion_human: FeatureExtractor  # 79-channel input
    normalizer: data.Normalizer
    temperature: float = 0.07


def train_extractors(dataset: data.Dataset, seed: int, steps: int = 200,
                     batch_size: int = 16, lr: float = 2e-3) -> ExtractorPair:
    """Contrastive training over in-batch negatives; deterministic by seed."""
    train_seqs = dataset.split("train")
    batch_size = min(batch_size, len(train_seqs))
    if len(train_seqs) < 2:
        raise MetricError("need at least two training sequences")
    if len(train_seqs) < batch_size:
        raise MetricError(
            f"dataset ({len(train_seqs)}) smaller than batch ({batch_size})")
    normalizer = data.fit_normalizer(train_seqs)
    vocab_size = len(dataset.vocab)
    pair = ExtractorPair(
        FeatureExtractor(data.FRAME_DIM, vocab_size, seed),
        FeatureExtractor(data.BODY_DIM, vocab_size, seed + 1),
        normalizer)
    rng = np.random.default_rng(seed)
    items = [(normalizer.normalize(s.frames), list(s.condition.text_tokens))
             for s in train_seqs]
    for extractor, channels in ((pair.motion, slice(None)),
                                (pair.motion_human, slice(0, data.BODY_DIM))):
        opt = Adam(lr=lr)
        for _ in range(steps):
            idx = rng.choice(len(items), size=batch_size, replace=False)
            with dk.Tape() as tape:
                m_feats = dk.stack([extractor.encode_motion(
                    items[i][0][:, channels]) for i in idx], axis=0)
                t_feats = dk.stack([extractor.encode_text(items[i][1])
                                    for i in idx], axis=0)
                logits = dk.matmul(m_feats, dk.transpose(t_feats)) \
                    * (1.0 / pair.temperature)
                loss = _symmetric_ce(logits)
            grads = tape.backward(loss)
            gmap = {name: grads.of(p) for name, p in extractor.params.items()}
            opt.step(extractor.params, gmap)
    return pair


def _symmetric_ce(logits: dk.Tensor) -> dk.Tensor:
    """Cross entropy against the diagonal, averaged over rows and columns."""
    n = logits.shape[0]
    eye = np.eye(n, dtype=np.float32)
    row = dk.softmax(logits, axis=1)
    col = dk.softmax(logits, axis=0)
    pick_r = dk.reduce_sum(row * dk.Tensor(eye), axis=1)
    pick_c = dk.reduce_sum(col * dk.Tensor(eye), axis=0)
    loss_r = -dk.reduce_mean(dk.log(dk.clamp_min(pick_r, 1e-9)))
    loss_c = -dk.reduce_mean(dk.log(dk.clamp_min(pick_c, 1e-9)))
    return 0.5 * (loss_r + loss_c)


def motion_features(pair: ExtractorPair, sequences) -> np.ndarray:
    return np.stack([pair.motion.encode_motion(
        pair.normalizer.normalize(s.frames)).values for s in sequences])


def human_motion_features(pair: ExtractorPair, sequences) -> np.ndarray:
    return np.stack([pair.motion_human.encode_motion(
        pair.normalizer.normalize(s.frames)[:, :data.BODY_DIM]).values
        for s in sequences])


def text_features(pair: ExtractorPair, token_lists,
                  human: bool = False) -> np.ndarray:
    enc = pair.motion_human if human else pair.motion
    return np.stack([enc.encode_text(t).values for t in token_lists])


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def r_precision_from_features(motion_f, text_f, pool_size: int = 32,
                              top_k: int = 3, seed: int = 0) -> float:
    """Fraction of items whose own text ranks in the top_k of a random pool."""
    motion_f = np.asarray(motion_f)
    text_f = np.asarray(text_f)
    n = len(motion_f)
    if n < pool_size:
        raise MetricError(f"pool of {pool_size} needs >= {pool_size} items, "
                          f"got {n}")
    rng = np.random.default_rng(seed)
    hits = 0
    for i in range(n):
        others = rng.choice(n - 1, size=pool_size - 1, replace=False)
        others = np.where(others >= i, others + 1, others)
        cand = np.concatenate([[i], others])
        d = np.linalg.norm(text_f[cand] - motion_f[i], axis=1)
        rank = int(np.nonzero(np.argsort(d, kind="stable") == 0)[0][0])
        hits += rank < top_k
    return hits / n


def r_precision(pair: ExtractorPair, sequences, pool_size: int = 32,
                top_k: int = 3, seed: int = 0) -> float:
    motion_f = motion_features(pair, sequences)
    text_f = text_features(pair, [s.condition.text_tokens for s in sequences])
    return r_precision_from_features(motion_f, text_f, pool_size, top_k, seed)


def fid_from_features(feats_a, feats_b) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    The matrix square root comes from the eigendecomposition of the
    symmetrized product; negative eigenvalues clamp to zero and covariances
    get a 1e-6 diagonal regularizer.
    """
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise MetricError(f"feature shapes incompatible: {a.shape} vs {b.shape}")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    reg = 1e-6 * np.eye(a.shape[1])
    cov_a = np.cov(a, rowvar=False).reshape(a.shape[1], a.shape[1]) + reg
    cov_b = np.cov(b, rowvar=False).reshape(b.shape[1], b.shape[1]) + reg
    ea, ua = np.linalg.eigh(cov_a)
    sqrt_a = ua @ np.diag(np.sqrt(np.clip(ea, 0.0, None))) @ ua.T
    inner = sqrt_a @ cov_b @ sqrt_a
    ei = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_sqrt = np.sqrt(np.clip(ei, 0.0, None)).sum()
    gap = mu_a - mu_b
    return float(gap @ gap + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)


def fid(pair: ExtractorPair, sequences_a, sequences_b,
        human: bool = False) -> float:
    extract = human_motion_features if human else motion_features
    return fid_from_features(extract(pair, sequences_a),
                             extract(pair, sequences_b))


def diversity_from_features(feats, ids, subset_size: int,
                            seed: int = 0) -> float:
    """Mean pairwise distance between two seeded disjoint random subsets.

    Subsets are drawn after sorting by id, so the statistic is invariant to
    input permutation.
    """
    feats = np.asarray(feats)
    if len(feats) < 2 * subset_size:
        raise MetricError(
            f"diversity needs >= {2 * subset_size} samples, got {len(feats)}")
    order = np.argsort(np.asarray(ids, dtype=object), kind="stable")
    feats = feats[order]
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(feats))
    first = feats[perm[:subset_size]]
    second = feats[perm[subset_size:2 * subset_size]]
    return float(np.linalg.norm(first - second, axis=1).mean())


def diversity(pair: ExtractorPair, sequences, subset_size: int = 16,
              seed: int = 0, human: bool = False) -> float:
    extract = human_motion_features if human else motion_features
    feats = extract(pair, sequences)
    return diversity_from_features(feats, [s.id for s in sequences],
                                   subset_size, seed)


def multimodality(pair: ExtractorPair, sequences, subset_size: int = 4,
                  seed: int = 0) -> float:
    """Within-text diversity averaged over text classes."""
    groups: dict[str, list] = {}
    for s in sequences:
        groups.setdefault(s.text or str(s.condition.text_tokens), []).append(s)
    feats = motion_features(pair, sequences)
    index = {s.id: i for i, s in enumerate(sequences)}
    values = []
    for text in sorted(groups):
        members = groups[text]
        if len(members) < 2 * subset_size:
            raise MetricError(
                f"text class '{text}' has {len(members)} samples, needs "
                f">= {2 * subset_size}")
        sub = np.stack([feats[index[s.id]] for s in members])
        values.append(diversity_from_features(sub, [s.id for s in members],
                                              subset_size, seed))
    if not values:
        raise MetricError("no text classes to evaluate")
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# physical plausibility and novelty
# ---------------------------------------------------------------------------

@dataclass
class PenetrationReport:
    ratio: float
    frames_checked: int
    frames_penetrating: int
    frames_excluded: int


def penetration_ratio(template, sequences, object_meshes=None,
                      cloud_size: int = data.CLOUD_SIZE) -> PenetrationReport:
    """Fraction of frames with any object sample point inside the body mesh.

    Uses each sequence's condition cloud; when object_meshes maps mesh refs
    to meshes, clouds are re-sampled from them instead. Frames whose body
    mesh fails the watertightness check are excluded and counted.
    """
    from . import body as bodymod

    checked = penetrating = excluded = 0
    for seq in sequences:
        cloud = np.asarray(seq.condition.object_cloud, dtype=np.float64)
        ref = seq.condition.object_mesh_ref
        if object_meshes and ref in object_meshes:
            cloud = geom.sample_surface_points(object_meshes[ref], cloud_size,
                                               data.CLOUD_SEED)
        for i in range(len(seq)):
            mesh, _ = bodymod.body_forward(template, seq.body_params(i))
            if not geom.is_watertight(mesh):
                excluded += 1
                continue
            pts = seq.object_transform(i).apply(cloud)
            lo = mesh.vertices.min(axis=0)
            hi = mesh.vertices.max(axis=0)
            cand = np.all((pts >= lo) & (pts <= hi), axis=1)
            hit = bool(cand.any()
                       and geom.points_in_mesh(pts[cand], mesh).any())
            checked += 1
            penetrating += hit
    if checked == 0:
        raise MetricError("no frames to check")
    return PenetrationReport(penetrating / checked, checked, penetrating,
                             excluded)


@dataclass
class NoveltyReport:
    neighbor_ids: list  # per generated sample, k nearest train ids
    neighbor_dists: np.ndarray  # (N, k)
    hist_counts: np.ndarray
    hist_edges: np.ndarray
    intra_train_nn: np.ndarray  # (M,) nearest-other distance inside train


def _novelty_vector(seq: data.Sequence) -> np.ndarray:
    body, _, obj = data.split_frames(seq.frames)
    return np.concatenate([body, obj], axis=1).reshape(-1).astype(np.float64)


def novelty_analysis(train_seqs, generated_seqs, k: int = 3,
                     bins: int = 20) -> NoveltyReport:
    """Distance of each generated sample to its nearest train sequences.

    Distances are L2 over the concatenated body and object channels (contact
    excluded); frame counts must match.
    """
    if not train_seqs or not generated_seqs:
        raise MetricError("novelty analysis needs nonempty sets")
    lengths = {len(s) for s in list(train_seqs) + list(generated_seqs)}
    if len(lengths) != 1:
        raise MetricError(f"frame counts differ across sequences: {lengths}")
    train_mat = np.stack([_novelty_vector(s) for s in train_seqs])
    gen_mat = np.stack([_novelty_vector(s) for s in generated_seqs])
    d = np.linalg.norm(gen_mat[:, None, :] - train_mat[None, :, :], axis=2)
    k = min(k, len(train_seqs))
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    neighbor_ids = [[train_seqs[j].id for j in row] for row in order]
    neighbor_dists = np.take_along_axis(d, order, axis=1)
    counts, edges = np.histogram(neighbor_dists[:, 0], bins=bins)
    if len(train_seqs) > 1:
        dt = np.linalg.norm(train_mat[:, None, :] - train_mat[None, :, :],
                            axis=2)
        np.fill_diagonal(dt, np.inf)
        intra = dt.min(axis=1)
    else:
        intra = np.zeros(1)
    return NoveltyReport(neighbor_ids, neighbor_dists, counts, edges, intra)
