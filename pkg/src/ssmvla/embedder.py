"""Observation -> token sequence.

Tokens are assembled in a fixed order: robot-state token, state-delta
token, then the vision patch tokens, then the language tokens, giving a
sequence of length L = 2 + n_vision + n_lang. Vision is a trainable
patch projection with learned per-patch position embeddings; language is
a word-level vocabulary lookup padded/truncated to a fixed length.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

PAD, UNK = 0, 1
_WORD_RE = re.compile(r"[a-z0-9]+")


@dataclass
class Observation:
    state: np.ndarray        # (d_s,) raw units
    state_prev: np.ndarray   # (d_s,); equals state at episode start
    image: np.ndarray        # (C, H, W) floats in [0, 1]
    instruction: str


@dataclass
class TokenLayout:
    """Index ranges [start, stop) of each token group in the sequence."""
    state: tuple
    delta: tuple
    vision: tuple
    language: tuple

    @property
    def length(self):
        return self.language[1]


class Vocabulary:
    """token -> dense id map; ids 0 and 1 are reserved for PAD and UNK."""

    def __init__(self, tokens):
        self.tokens = ["<pad>", "<unk>"] + [t for t in tokens if t not in ("<pad>", "<unk>")]
        self.ids = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    @classmethod
    def from_texts(cls, texts):
        seen = sorted({w for text in texts for w in split_words(text)})
        return cls(seen)

    def save(self, path):
        with open(path, "w") as f:
            f.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            tokens = [line.rstrip("\n") for line in f if line.rstrip("\n")]
        if tokens[:2] != ["<pad>", "<unk>"]:
            raise ValueError(f"vocabulary file {path} does not start with <pad>, <unk>")
        return cls(tokens[2:])


def split_words(text):
    return _WORD_RE.findall(text.lower())


def tokenize_language(text, vocab: Vocabulary, n_lang):
    """Lowercase word ids, UNK for unknowns, PAD/truncate to n_lang."""
    ids = [vocab.ids.get(w, UNK) for w in split_words(text)]
    ids = ids[:n_lang]
    return np.array(ids + [PAD] * (n_lang - len(ids)), dtype=np.int64)


@dataclass
class EmbedderConfig:
    d_model: int = 64
    state_dim: int = 4
    image_size: int = 64
    patch_size: int = 16
    n_lang: int = 8
    vocab_size: int = 16
    dtype: type = np.float32

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise DimensionError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}")

    @property
    def n_vision(self):
        side = self.image_size // self.patch_size
        return side * side

    @property
    def patch_dim(self):
        return 3 * self.patch_size * self.patch_size

    @property
    def seq_len(self):
        return 2 + self.n_vision + self.n_lang


@dataclass
class EmbedderParams:
    state_w: Tensor      # (d_s, D)
    state_b: Tensor      # (D,)
    delta_w: Tensor      # (d_s, D)
    delta_b: Tensor      # (D,)
    patch_w: Tensor      # (patch_dim, D)
    patch_b: Tensor      # (D,)
    pos_emb: Tensor      # (n_vision, D)
    lang_table: Tensor   # (vocab, D)
    cfg: EmbedderConfig = field(repr=False, default=None)

    def named(self, prefix):
        return [(f"{prefix}.{f}", getattr(self, f)) for f in (
            "state_w", "state_b", "delta_w", "delta_b",
            "patch_w", "patch_b", "pos_emb", "lang_table")]


def _patch_moment_init(cfg: EmbedderConfig, rng):
    """Patch projection initialized around color/position moment features.

    The first 9 output dims start as per-channel mass and coordinate-
    weighted mass (R, G, B) x (1, u, v) over the patch, normalized to
    unit-ish token scale; the rest are random. Purely an initialization:
    the projection stays fully trainable.
    """
    p, d = cfg.patch_size, cfg.d_model
    w = rng.normal(0.0, cfg.patch_dim ** -0.5, size=(cfg.patch_dim, d))
    if d < 9:
        return w
    # patch vectors are (channel, row, col) flattened; u, v in [-1, 1]
    coords = (np.arange(p) + 0.5) / p * 2.0 - 1.0
    vv, uu = np.meshgrid(coords, coords)  # vv: columns (x), uu: rows (y)
    ones = np.ones((p, p))
    scale = 4.0 / (p * p)  # a typical blob covers a fraction of the patch
    col = 0
    for ch in range(3):
        for feat in (ones, vv, uu):
            basis = np.zeros((3, p, p))
            basis[ch] = feat * scale
            w[:, col] = basis.reshape(-1)
            col += 1
    return w


def init_embedder(cfg: EmbedderConfig, rng: np.random.Generator) -> EmbedderParams:
    d, dt = cfg.d_model, cfg.dtype

    def lin(fan_in, *shape):
        return T.parameter(rng.normal(0.0, fan_in ** -0.5, size=shape), dtype=dt)

    # position embeddings carry the patch-center coordinates in two fixed
    # dims at init so spatial readout does not have to be discovered
    side = cfg.image_size // cfg.patch_size
    pos = rng.normal(0.0, 0.02, size=(cfg.n_vision, d))
    if d >= 11:
        centers = (np.arange(side) + 0.5) / side * 2.0 - 1.0
        cx, cy = np.meshgrid(centers, centers)
        pos[:, 9] = cy.reshape(-1)   # row (y) of the patch
        pos[:, 10] = cx.reshape(-1)  # column (x)

    return EmbedderParams(
        state_w=lin(cfg.state_dim, cfg.state_dim, d),
        state_b=T.parameter(np.zeros(d), dtype=dt),
        delta_w=lin(cfg.state_dim, cfg.state_dim, d),
        delta_b=T.parameter(np.zeros(d), dtype=dt),
        patch_w=T.parameter(_patch_moment_init(cfg, rng), dtype=dt),
        patch_b=T.parameter(np.zeros(d), dtype=dt),
        pos_emb=T.parameter(pos, dtype=dt),
        lang_table=T.parameter(rng.normal(0.0, 0.02, size=(cfg.vocab_size, d)), dtype=dt),
        cfg=cfg,
    )


def embed_state(s, params: EmbedderParams):
    """(B, d_s) -> (B, D) state token."""
    if s.data.shape[-1] != params.state_w.data.shape[0]:
        raise DimensionError(f"state dim {s.data.shape[-1]} != projection {params.state_w.data.shape[0]}")
    return T.add(T.matmul(s, params.state_w), params.state_b)


def embed_delta(s, s_prev, params: EmbedderParams):
    """Projects s - s_prev; at episode start s_prev == s so the delta is zero."""
    if s.data.shape != s_prev.data.shape:
        raise DimensionError("state and previous state dims differ")
    return T.add(T.matmul(T.sub(s, s_prev), params.delta_w), params.delta_b)


def patchify(images, patch_size):
    """(B, C, H, W) float array -> (B, n_patches, C*P*P), row-major patches.

    Pure array reshuffle on the non-differentiable input side.
    """
    b, c, h, w = images.shape
    if h % patch_size or w % patch_size:
        raise DimensionError(f"image {h}x{w} not divisible by patch size {patch_size}")
    hp, wp = h // patch_size, w // patch_size
    x = images.reshape(b, c, hp, patch_size, wp, patch_size)
    x = x.transpose(0, 2, 4, 1, 3, 5)  # (B, hp, wp, C, P, P)
    return np.ascontiguousarray(x.reshape(b, hp * wp, c * patch_size * patch_size))


def encode_vision(images, params: EmbedderParams):
    """(B, C, H, W) in [0,1] -> (B, n_vision, D) patch tokens + position embeddings."""
    cfg = params.cfg
    patches = patchify(np.asarray(images, dtype=cfg.dtype), cfg.patch_size)
    b, nv, pd = patches.shape
    if nv != cfg.n_vision or pd != cfg.patch_dim:
        raise DimensionError(f"image yields {nv}x{pd} patches, config expects {cfg.n_vision}x{cfg.patch_dim}")
    flat = T.constant(patches.reshape(b * nv, pd), dtype=cfg.dtype)
    tok = T.add(T.matmul(flat, params.patch_w), params.patch_b)
    tok = T.reshape(tok, (b, nv, cfg.d_model))
    return T.add(tok, params.pos_emb)


def embed_language(ids, params: EmbedderParams):
    """(B, n_lang) int ids -> (B, n_lang, D) via table lookup."""
    return T.embedding(params.lang_table, ids)


def assemble_sequence(obs_batch, params: EmbedderParams, vocab: Vocabulary):
    """Batch of Observations -> ((B, L, D) tokens, TokenLayout).

    Order is fixed: [state, delta, vision..., language...]; states are
    fed raw here, normalization is the caller's concern.
    """
    cfg = params.cfg
    b = len(obs_batch)
    states = np.stack([o.state for o in obs_batch]).astype(cfg.dtype)
    prevs = np.stack([o.state_prev for o in obs_batch]).astype(cfg.dtype)
    images = np.stack([o.image for o in obs_batch])
    ids = np.stack([tokenize_language(o.instruction, vocab, cfg.n_lang) for o in obs_batch])

    h_s = T.reshape(embed_state(T.constant(states, cfg.dtype), params), (b, 1, cfg.d_model))
    h_ds = T.reshape(
        embed_delta(T.constant(states, cfg.dtype), T.constant(prevs, cfg.dtype), params),
        (b, 1, cfg.d_model))
    h_v = encode_vision(images, params)
    h_l = embed_language(ids, params)

    tokens = T.concat([h_s, h_ds, h_v, h_l], axis=-2)
    nv, nl = cfg.n_vision, cfg.n_lang
    layout = TokenLayout(
        state=(0, 1), delta=(1, 2), vision=(2, 2 + nv), language=(2 + nv, 2 + nv + nl))
    assert layout.length == cfg.seq_len == 2 + nv + nl
    return tokens, layout
