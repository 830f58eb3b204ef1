"""Single-stream multimodal transformer encoder.

An episode becomes ``[CLS] <image> <region_1..R> [SEP] <word_1..L>``; each
token's initial embedding is the sum of a content term (word lookup or a
linear map of the region vector), a modality term and a position term.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import Embedding, LayerNorm, Linear, Module
from .tensor import Tensor, softmax
from .world import CLS, IMG, MASK, SEP

VISUAL, TEXTUAL, SPECIAL = 0, 1, 2
TRAINING, TEST = "training", "test-composition"


@dataclass
class MultimodalToken:
    kind: int  # VISUAL | TEXTUAL | SPECIAL
    word: int = IMG  # word id for textual/special tokens
    vector: np.ndarray | None = None  # region features for visual tokens
    position: int = 0


@dataclass
class EncoderConfig:
    n_layers: int = 2
    hidden: int = 64
    n_heads: int = 4
    ff_mult: int = 4
    vocab_size: int = 53
    max_positions: int = 64
    d_vis: int = 32

    def __post_init__(self):
        if self.hidden % self.n_heads:
            raise ValueError(f"hidden size {self.hidden} not divisible by {self.n_heads} heads")


@dataclass
class MaskedSequence:
    tokens: list
    text_targets: dict = field(default_factory=dict)  # token index -> word id
    visual_targets: dict = field(default_factory=dict)  # token index -> region vector
    mode: str = TRAINING
    text_start: int = 0  # token index of the first sentence word

    @property
    def text_positions(self):
        """Masked textual token indices, in sentence order."""
        return sorted(self.text_targets)


def tokenize(episode, visual=True):
    """Layout: [CLS], whole-image token, regions, [SEP], words.

    The whole-image token is the mean of the region vectors. With
    ``visual=False`` only the special and textual tokens are produced.
    """
    toks = [MultimodalToken(SPECIAL, CLS)]
    if visual:
        regions = np.asarray(episode.regions, dtype=np.float64)
        toks.append(MultimodalToken(VISUAL, IMG, regions.mean(axis=0), 0))
        toks += [MultimodalToken(VISUAL, IMG, r, i + 1) for i, r in enumerate(regions)]
    toks.append(MultimodalToken(SPECIAL, SEP))
    toks += [MultimodalToken(TEXTUAL, w, None, i) for i, w in enumerate(episode.tokens)]
    return toks


def _text_start(tokens):
    return next(i for i, t in enumerate(tokens) if t.kind == SPECIAL and t.word == SEP) + 1


def apply_mask_policy(tokens, mode, rng, episode=None, text_rate=1 / 3, visual_rate=1 / 6,
                      vocab_size=None, first_word=0):
    """Corrupt a token list for masked acquisition.

    training: textual tokens are picked with ``text_rate`` and then replaced by
    [MASK] (80%), a random word id in ``[first_word, vocab_size)`` (10%) or left
    unchanged (10%); visual tokens are picked with ``visual_rate`` and zeroed.
    test-composition: exactly the gold verb and noun become [MASK].
    """
    start = _text_start(tokens)
    out = [MultimodalToken(t.kind, t.word, t.vector, t.position) for t in tokens]
    seq = MaskedSequence(out, mode=mode, text_start=start)
    if mode == TEST:
        if episode is None or episode.verb is None or episode.noun is None:
            raise ValueError("test-composition masking needs an episode with a gold composition")
        for pos in (episode.verb_pos, episode.noun_pos):
            i = start + pos
            seq.text_targets[i] = out[i].word
            out[i].word = MASK
        return seq
    if mode != TRAINING:
        raise ValueError(f"unknown mask mode {mode!r}")
    if vocab_size is None:
        raise ValueError("training-mode masking needs vocab_size for random replacement")
    for i, t in enumerate(out):
        if t.kind == TEXTUAL and rng.random() < text_rate:
            seq.text_targets[i] = t.word
            r = rng.random()
            if r < 0.8:
                t.word = MASK
            elif r < 0.9:
                t.word = int(rng.integers(first_word, vocab_size))
        elif t.kind == VISUAL and rng.random() < visual_rate:
            seq.visual_targets[i] = t.vector
            t.vector = np.zeros_like(t.vector)
    return seq


@dataclass
class Batch:
    word_ids: np.ndarray  # (B, T)
    vis: np.ndarray  # (B, T, d_vis)
    is_visual: np.ndarray  # (B, T) bool
    modality: np.ndarray  # (B, T)
    position: np.ndarray  # (B, T)
    valid: np.ndarray  # (B, T) bool

    @property
    def shape(self):
        return self.word_ids.shape


def collate(token_lists, d_vis, pad_to=None):
    """Pad token lists into dense arrays; padding positions have ``valid == False``."""
    b = len(token_lists)
    t = max(pad_to or 0, max(len(x) for x in token_lists))
    word_ids = np.zeros((b, t), dtype=np.int64)
    vis = np.zeros((b, t, d_vis))
    is_visual = np.zeros((b, t), dtype=bool)
    modality = np.full((b, t), SPECIAL, dtype=np.int64)
    position = np.zeros((b, t), dtype=np.int64)
    valid = np.zeros((b, t), dtype=bool)
    for i, toks in enumerate(token_lists):
        for j, tok in enumerate(toks):
            word_ids[i, j] = tok.word
            modality[i, j] = tok.kind
            position[i, j] = tok.position
            valid[i, j] = True
            if tok.kind == VISUAL:
                is_visual[i, j] = True
                vis[i, j] = tok.vector
    return Batch(word_ids, vis, is_visual, modality, position, valid)


class EncoderLayer(Module):
    def __init__(self, cfg, rng):
        h = cfg.hidden
        self.n_heads = cfg.n_heads
        self.ln1 = LayerNorm(h)
        self.qkv = Linear(h, 3 * h, rng)
        self.out = Linear(h, h, rng)
        self.ln2 = LayerNorm(h)
        self.ff1 = Linear(h, cfg.ff_mult * h, rng)
        self.ff2 = Linear(cfg.ff_mult * h, h, rng)
        self.last_attention = None

    def __call__(self, x, valid):
        b, t, h = x.shape
        nh, dh = self.n_heads, h // self.n_heads
        qkv = self.qkv(self.ln1(x)).reshape(b, t, 3, nh, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
        pair_mask = (valid[:, None, :, None] & valid[:, None, None, :])
        att = softmax(scores, axis=-1, mask=np.broadcast_to(pair_mask, scores.shape))
        self.last_attention = att.data
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(b, t, h)
        x = x + self.out(ctx)
        return x + self.ff2(self.ff1(self.ln2(x)).gelu())


class MultimodalEncoder(Module):
    def __init__(self, cfg, rng):
        self.cfg = cfg
        h = cfg.hidden
        self.word = Embedding(cfg.vocab_size, h, rng)
        self.visual = Linear(cfg.d_vis, h, rng)
        self.modality = Embedding(3, h, rng)
        self.position = Embedding(cfg.max_positions, h, rng)
        self.layers = [EncoderLayer(cfg, rng) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(h)

    def embed(self, batch):
        """Initial token embeddings (B, T, hidden)."""
        if batch.word_ids.size and batch.word_ids.max() >= self.cfg.vocab_size:
            raise IndexError(f"word id {batch.word_ids.max()} outside vocabulary of {self.cfg.vocab_size}")
        if batch.position.max(initial=0) >= self.cfg.max_positions:
            raise IndexError(f"position {batch.position.max()} exceeds max_positions={self.cfg.max_positions}")
        isv = batch.is_visual[..., None].astype(np.float64)
        content = self.word(batch.word_ids) * (1.0 - isv)
        if isv.any():
            content = content + self.visual(Tensor(batch.vis)) * isv
        return content + self.modality(batch.modality) + self.position(batch.position)

    def encode(self, x, valid):
        for layer in self.layers:
            x = layer(x, valid)
        return self.ln_f(x)

    def __call__(self, batch):
        return self.encode(self.embed(batch), batch.valid)
