"""Conditional denoising network over body | contact | object channel streams.

Three parallel temporal-convolution residual streams (one per modality) run
through a 3-level U-Net with down/up-sampling by 2. After every residual
block the streams exchange information through three-way cross-attention:
each modality queries the concatenation of the other two. The object stream
ends in per-marker transform hypothesis heads whose outputs are averaged with
weights that decay with predicted contact distance; the network predicts the
clean (x0) sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffkit as dk
from .data import BODY_DIM, CONTACT_DIM, FRAME_DIM, OBJECT_DIM

GROUPS = 8


class DenoiserInputError(ValueError):
    """Invalid token ids, cloud size, timestep, or non-finite input."""


@dataclass
class DenoiserConfig:
    vocab_size: int
    latent_dim: int = 256
    heads: int = 4
    unet_levels: int = 3
    time_embed_dim: int = 128
    marker_count: int = 128
    contact_weighting: bool = True

    def __post_init__(self):
        if self.latent_dim % self.heads != 0:
            raise ValueError(
                f"latent_dim {self.latent_dim} not divisible by {self.heads} heads")
        if self.latent_dim % GROUPS != 0:
            raise ValueError(
                f"latent_dim {self.latent_dim} not divisible by {GROUPS} norm groups")
        if self.unet_levels != 3:
            raise ValueError("this artifact fixes unet_levels at 3")


@dataclass
class DenoiserOutput:
    body_pred: dk.Tensor  # (F, 79)
    contact_pred: dk.Tensor  # (F, 128)
    object_hypotheses: dk.Tensor  # (F, 128, 9)
    object_pred: dk.Tensor  # (F, 9)


_MODALITIES = ("h", "c", "o")
_MOD_DIMS = {"h": BODY_DIM, "c": CONTACT_DIM, "o": OBJECT_DIM}
_LEVELS = ("enc0", "enc1", "mid", "dec1", "dec0")


def sinusoidal_embedding(t: int, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)]).astype(np.float32)


def cross_attention_block(h_feat: dk.Tensor, o_feat: dk.Tensor,
                          c_feat: dk.Tensor, heads: int = 4):
    """Three-way scaled dot-product attention with residual connections.

    For each modality the query is its own feature sequence (F, d) and the
    key/value matrix is the other two modalities' sequences concatenated
    along time; no learned projections, so equal value rows pass through
    unchanged. Returns the updated (h, o, c) features.
    """
    feats = {"h": h_feat, "o": o_feat, "c": c_feat}
    others = {"h": ("o", "c"), "o": ("h", "c"), "c": ("h", "o")}
    out = {}
    for m, (a, b) in others.items():
        kv = dk.concat([feats[a], feats[b]], axis=0)  # (2F', d)
        out[m] = feats[m] + _attention(feats[m], kv, heads)
    return out["h"], out["o"], out["c"]


def _attention(q: dk.Tensor, kv: dk.Tensor, heads: int) -> dk.Tensor:
    f, d = q.shape
    n = kv.shape[0]
    if kv.shape[1] != d:
        raise dk.ShapeMismatchError(
            f"attention feature dims differ: {q.shape} vs {kv.shape}")
    head_dim = d // heads
    qh = dk.transpose(dk.reshape(q, (f, heads, head_dim)), (1, 0, 2))
    kh = dk.transpose(dk.reshape(kv, (n, heads, head_dim)), (1, 0, 2))
    vh = kh
    scores = dk.matmul(qh, dk.transpose(kh, (0, 2, 1)))  # (H, F, N)
    scores = scores * (1.0 / np.sqrt(head_dim))
    attn = dk.softmax(scores, axis=-1)
    mixed = dk.matmul(attn, vh)  # (H, F, D)
    return dk.reshape(dk.transpose(mixed, (1, 0, 2)), (f, d))


def aggregate_hypotheses(hyps, contact) -> dk.Tensor:
    """Contact-weighted average of per-marker object transform hypotheses.

    Weights are max|c| - |c| per frame, normalized by their sum so they form
    a partition of unity; frames where every |c| is equal (weight sum below
    1e-8) fall back to the unweighted mean. Applied channelwise to all 9
    transform components; the result is a convex combination per frame.
    """
    hyps = hyps if isinstance(hyps, dk.Tensor) else dk.Tensor(hyps)
    contact = contact if isinstance(contact, dk.Tensor) else dk.Tensor(contact)
    f, m = contact.shape
    if hyps.shape[0] != f or hyps.shape[1] != m:
        raise dk.ShapeMismatchError(
            f"hypotheses {hyps.shape} do not match contact {contact.shape}")
    a = dk.abs_(contact)
    top = dk.reshape(dk.reduce_max(a, axis=1), (f, 1))
    w = top - a  # (F, M)
    total = dk.reduce_sum(w, axis=1, keepdims=True)  # (F, 1)
    fallback = total.values < 1e-8  # (F, 1) constant mask
    norm = w / dk.clamp_min(total, 1e-8)
    uniform = dk.Tensor(np.full((1, m), 1.0 / m, dtype=np.float32))
    weights = dk.where_mask(np.broadcast_to(fallback, (f, m)), uniform, norm)
    return dk.reduce_sum(dk.reshape(weights, (f, m, 1)) * hyps, axis=1)


class Denoiser:
    """Denoiser weights plus the pure functions that run them."""

    def __init__(self, config: DenoiserConfig, params: dict[str, dk.Tensor],
                 contact_stats: tuple[np.ndarray, np.ndarray] | None = None):
        self.config = config
        self.params = params
        # per-marker mean/std used to express predicted contact in meters
        # before it weights the hypothesis aggregation
        self.contact_stats = contact_stats

    # -- parameter plumbing -------------------------------------------------

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.values for name, p in self.params.items()}
        if self.contact_stats is not None:
            out["stats.contact_mean"] = self.contact_stats[0]
            out["stats.contact_std"] = self.contact_stats[1]
        return out

    @staticmethod
    def from_arrays(config: DenoiserConfig, arrays: dict) -> "Denoiser":
        stats = None
        if "stats.contact_mean" in arrays:
            stats = (np.asarray(arrays["stats.contact_mean"], dtype=np.float32),
                     np.asarray(arrays["stats.contact_std"], dtype=np.float32))
        params = {name: dk.Tensor(values, requires_grad=True)
                  for name, values in arrays.items()
                  if not name.startswith("stats.")}
        return Denoiser(config, params, stats)

    def p(self, name: str) -> dk.Tensor:
        return self.params[name]

    # -- encoders -----------------------------------------------------------

    def encode_text(self, tokens) -> dk.Tensor:
        """Embedding lookup, mean pool, bias-free projection; order-invariant."""
        tokens = list(tokens)
        if any((t < 0 or t >= self.config.vocab_size) for t in tokens):
            raise DenoiserInputError(
                f"token id out of vocabulary (size {self.config.vocab_size})")
        if not tokens:
            pooled = dk.Tensor(np.zeros((1, self.config.latent_dim)))
        else:
            emb = dk.embedding_lookup(self.p("text.embed"), tokens)
            pooled = dk.reduce_mean(emb, axis=0, keepdims=True)
        return dk.reshape(dk.matmul(pooled, self.p("text.proj.w")),
                          (self.config.latent_dim,))

    def encode_geometry(self, cloud) -> dk.Tensor:
        """Shared per-point MLP with max-pool; exactly permutation-invariant."""
        cloud_t = cloud if isinstance(cloud, dk.Tensor) else dk.Tensor(cloud)
        if cloud_t.shape != (256, 3):
            raise DenoiserInputError(
                f"expected a (256, 3) object cloud, got {cloud_t.shape}")
        x = dk.silu(dk.matmul(cloud_t, self.p("geom.l1.w")) + self.p("geom.l1.b"))
        x = dk.silu(dk.matmul(x, self.p("geom.l2.w")) + self.p("geom.l2.b"))
        pooled = dk.reduce_max(x, axis=0)  # (L,)
        pooled = dk.reshape(pooled, (1, self.config.latent_dim))
        out = dk.matmul(pooled, self.p("geom.proj.w")) + self.p("geom.proj.b")
        return dk.reshape(out, (self.config.latent_dim,))

    # -- core blocks ----------------------------------------------------------

    def _emb_vector(self, t: int, cond) -> dk.Tensor:
        sin = dk.Tensor(sinusoidal_embedding(t, self.config.time_embed_dim)
                        .reshape(1, -1))
        te = dk.silu(dk.matmul(sin, self.p("time.l1.w")) + self.p("time.l1.b"))
        te = dk.matmul(te, self.p("time.l2.w")) + self.p("time.l2.b")  # (1, L)
        if cond is None:
            text_vec = self.p("null.text")
            geom_vec = self.p("null.geom")
        else:
            text_vec, geom_vec = cond
        pair = dk.concat([dk.reshape(text_vec, (1, -1)),
                          dk.reshape(geom_vec, (1, -1))], axis=1)  # (1, 2L)
        cv = dk.matmul(pair, self.p("cond.proj.w")) + self.p("cond.proj.b")
        return te + cv  # (1, L)

    def _res_block(self, level: str, m: str, x: dk.Tensor,
                   emb: dk.Tensor) -> dk.Tensor:
        pre = f"{level}.{m}"
        shift = dk.matmul(emb, self.p(f"{pre}.emb.w")) + self.p(f"{pre}.emb.b")
        y = x + dk.transpose(shift)  # broadcast (L, 1) over time
        h = dk.conv1d(dk.silu(dk.group_norm(y, GROUPS, self.p(f"{pre}.gn1.g"),
                                            self.p(f"{pre}.gn1.b"))),
                      self.p(f"{pre}.conv1.w"), self.p(f"{pre}.conv1.b"))
        h = dk.conv1d(dk.silu(dk.group_norm(h, GROUPS, self.p(f"{pre}.gn2.g"),
                                            self.p(f"{pre}.gn2.b"))),
                      self.p(f"{pre}.conv2.w"), self.p(f"{pre}.conv2.b"))
        return y + h

    def _attn_stage(self, level: str, feats: dict) -> dict:
        as_seq = {m: dk.transpose(feats[m]) for m in _MODALITIES}  # (F', L)
        h2, o2, c2 = cross_attention_block(as_seq["h"], as_seq["o"],
                                           as_seq["c"], self.config.heads)
        mixed = {"h": h2, "o": o2, "c": c2}
        out = {}
        for m in _MODALITIES:
            w, b = self.p(f"{level}.attn.{m}.w"), self.p(f"{level}.attn.{m}.b")
            out[m] = feats[m] + dk.transpose(dk.matmul(mixed[m], w) + b)
        return out

    # -- full forward ---------------------------------------------------------

    def denoise(self, z_t, t: int, cond) -> DenoiserOutput:
        """Predict the clean sample from a noised (F, 216) frame block.

        cond is a (text_vec, geom_vec) tensor pair, or None for the masked
        (classifier-free) branch, which substitutes the learned null
        embeddings for both vectors.
        """
        z = z_t if isinstance(z_t, dk.Tensor) else dk.Tensor(z_t)
        if z.ndim != 2 or z.shape[1] != FRAME_DIM:
            raise DenoiserInputError(f"expected (F, {FRAME_DIM}), got {z.shape}")
        f = z.shape[0]
        if f % 4 != 0:
            raise DenoiserInputError(f"frame count {f} must be divisible by 4")
        if not isinstance(t, (int, np.integer)) or t < 0:
            raise DenoiserInputError(f"bad diffusion step {t!r}")
        if not np.all(np.isfinite(z.values)):
            raise DenoiserInputError("non-finite denoiser input")

        emb = self._emb_vector(int(t), cond)  # (1, L)
        splits = {"h": dk.narrow(z, 1, 0, BODY_DIM),
                  "c": dk.narrow(z, 1, BODY_DIM, CONTACT_DIM),
                  "o": dk.narrow(z, 1, BODY_DIM + CONTACT_DIM, OBJECT_DIM)}
        x = {}
        for m in _MODALITIES:
            proj = dk.matmul(splits[m], self.p(f"in.{m}.w")) + self.p(f"in.{m}.b")
            x[m] = dk.transpose(proj)  # (L, F)

        skips = []
        for level in ("enc0", "enc1"):
            x = {m: self._res_block(level, m, x[m], emb) for m in _MODALITIES}
            x = self._attn_stage(level, x)
            skips.append(x)
            x = {m: _down2(x[m]) for m in _MODALITIES}

        x = {m: self._res_block("mid", m, x[m], emb) for m in _MODALITIES}
        x = self._attn_stage("mid", x)

        for level, skip in (("dec1", skips[1]), ("dec0", skips[0])):
            x = {m: _up2(x[m]) for m in _MODALITIES}
            merged = {}
            for m in _MODALITIES:
                cat = dk.concat([x[m], skip[m]], axis=0)  # (2L, F')
                w, b = self.p(f"{level}.{m}.skip.w"), self.p(f"{level}.{m}.skip.b")
                merged[m] = dk.transpose(dk.matmul(dk.transpose(cat), w) + b)
            x = {m: self._res_block(level, m, merged[m], emb)
                 for m in _MODALITIES}
            x = self._attn_stage(level, x)

        feats = {}
        for m in _MODALITIES:
            y = dk.silu(dk.group_norm(x[m], GROUPS, self.p(f"out.{m}.gn.g"),
                                      self.p(f"out.{m}.gn.b")))
            feats[m] = dk.transpose(y)  # (F, L)

        body = dk.matmul(feats["h"], self.p("head.body.w")) + self.p("head.body.b")
        contact = dk.matmul(feats["c"], self.p("head.contact.w")) \
            + self.p("head.contact.b")
        mcount = self.config.marker_count
        if self.config.contact_weighting:
            hyp_flat = dk.matmul(feats["o"], self.p("head.hyp.w")) \
                + self.p("head.hyp.b")
            hyps = dk.reshape(hyp_flat, (f, mcount, OBJECT_DIM))
            obj = aggregate_hypotheses(hyps, self._weighting_contact(contact))
        else:
            obj = dk.matmul(feats["o"], self.p("head.obj.w")) + self.p("head.obj.b")
            hyps = dk.reshape(obj, (f, 1, OBJECT_DIM)) + dk.Tensor(
                np.zeros((1, mcount, 1), dtype=np.float32))
        return DenoiserOutput(body, contact, hyps, obj)

    def _weighting_contact(self, contact_pred: dk.Tensor) -> dk.Tensor:
        """Predicted contact in meters (denormalized) for hypothesis weighting."""
        if self.contact_stats is None:
            return contact_pred
        mean, std = self.contact_stats
        return contact_pred * dk.Tensor(std) + dk.Tensor(mean)


def _down2(x: dk.Tensor) -> dk.Tensor:
    c, f = x.shape
    return dk.reduce_mean(dk.reshape(x, (c, f // 2, 2)), axis=2)


def _up2(x: dk.Tensor) -> dk.Tensor:
    c, f = x.shape
    doubled = dk.concat([dk.reshape(x, (c, f, 1))] * 2, axis=2)
    return dk.reshape(doubled, (c, 2 * f))


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def init_denoiser(config: DenoiserConfig, seed: int,
                  contact_stats=None) -> Denoiser:
    """Seeded parameter initialization; output heads start at zero."""
    rng = np.random.default_rng(seed)
    ld = config.latent_dim
    params: dict[str, dk.Tensor] = {}

    def add(name, shape, scale=None, zero=False):
        if zero:
            values = np.zeros(shape, dtype=np.float32)
        else:
            if scale is None:
                scale = np.sqrt(1.0 / shape[0])
            values = rng.normal(0.0, scale, size=shape).astype(np.float32)
        params[name] = dk.Tensor(values, requires_grad=True)

    add("text.embed", (config.vocab_size, ld), scale=0.02)
    add("text.proj.w", (ld, ld))
    add("geom.l1.w", (3, 64))
    add("geom.l1.b", (64,), zero=True)
    add("geom.l2.w", (64, ld))
    add("geom.l2.b", (ld,), zero=True)
    add("geom.proj.w", (ld, ld))
    add("geom.proj.b", (ld,), zero=True)
    add("time.l1.w", (config.time_embed_dim, ld))
    add("time.l1.b", (ld,), zero=True)
    add("time.l2.w", (ld, ld))
    add("time.l2.b", (ld,), zero=True)
    add("cond.proj.w", (2 * ld, ld))
    add("cond.proj.b", (ld,), zero=True)
    add("null.text", (ld,), scale=0.02)
    add("null.geom", (ld,), scale=0.02)
    def add_ones(name, shape):
        params[name] = dk.Tensor(np.ones(shape, dtype=np.float32),
                                 requires_grad=True)

    for m in _MODALITIES:
        add(f"in.{m}.w", (_MOD_DIMS[m], ld))
        add(f"in.{m}.b", (ld,), zero=True)
        add_ones(f"out.{m}.gn.g", (ld,))
        add(f"out.{m}.gn.b", (ld,), zero=True)
    for level in _LEVELS:
        for m in _MODALITIES:
            add(f"{level}.{m}.emb.w", (ld, ld))
            add(f"{level}.{m}.emb.b", (ld,), zero=True)
            for i in (1, 2):
                add_ones(f"{level}.{m}.gn{i}.g", (ld,))
                add(f"{level}.{m}.gn{i}.b", (ld,), zero=True)
                add(f"{level}.{m}.conv{i}.w", (ld, ld, 3),
                    scale=np.sqrt(2.0 / (ld * 3)))
                add(f"{level}.{m}.conv{i}.b", (ld,), zero=True)
            add(f"{level}.attn.{m}.w", (ld, ld), scale=0.02)
            add(f"{level}.attn.{m}.b", (ld,), zero=True)
        if level.startswith("dec"):
            for m in _MODALITIES:
                add(f"{level}.{m}.skip.w", (2 * ld, ld))
                add(f"{level}.{m}.skip.b", (ld,), zero=True)
    add("head.body.w", (ld, BODY_DIM), zero=True)
    add("head.body.b", (BODY_DIM,), zero=True)
    add("head.contact.w", (ld, CONTACT_DIM), zero=True)
    add("head.contact.b", (CONTACT_DIM,), zero=True)
    if config.contact_weighting:
        add("head.hyp.w", (ld, config.marker_count * OBJECT_DIM), zero=True)
        add("head.hyp.b", (config.marker_count * OBJECT_DIM,), zero=True)
    else:
        add("head.obj.w", (ld, OBJECT_DIM), zero=True)
        add("head.obj.b", (OBJECT_DIM,), zero=True)
    stats = None
    if contact_stats is not None:
        stats = (np.asarray(contact_stats[0], dtype=np.float32),
                 np.asarray(contact_stats[1], dtype=np.float32))
    return Denoiser(config, params, stats)
