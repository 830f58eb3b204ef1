"""Analogical reasoning over retrieved references.

For each retrieved reference the network attends over its analogy pairs
(adjacent words, ordered region pairs) keyed by the query vector, mixes the
two modality aggregates through neural accumulator layers, and finally runs
an LSTM over the per-reference results in retrieval-rank order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import TEXTUAL, VISUAL, tokenize
from .layers import LSTM, Linear, Module, _param, xavier
from .tensor import Tensor, concat, dropout, softmax

TEXT, VIS = "textual", "visual"


@dataclass(frozen=True)
class AnalogyPair:
    modality: str
    first: int  # token index inside the tokenized reference
    second: int
    source: int  # reference episode id


def pair_indices(tokens):
    """(textual pairs, visual pairs) as token-index tuples for one tokenized reference."""
    words = [i for i, t in enumerate(tokens) if t.kind == TEXTUAL]
    regions = [i for i, t in enumerate(tokens) if t.kind == VISUAL and t.position > 0]
    text = list(zip(words[:-1], words[1:]))
    vis = [(i, j) for i in regions for j in regions if i != j]
    return text, vis


def enumerate_pairs(references):
    """All analogy pairs of a list of reference episodes."""
    if not references:
        raise ValueError("need at least one reference")
    out = []
    for ref in references:
        text, vis = pair_indices(tokenize(ref))
        out += [AnalogyPair(TEXT, i, j, ref.id) for i, j in text]
        out += [AnalogyPair(VIS, i, j, ref.id) for i, j in vis]
    return out


class NAC(Module):
    """Neural accumulator: ``x @ (tanh(W_hat) * sigmoid(M_hat))``, no bias."""

    def __init__(self, n_in, n_out, rng):
        self.w_hat = _param(xavier(rng, n_in, n_out))
        self.m_hat = _param(xavier(rng, n_in, n_out))

    def weight(self):
        return self.w_hat.tanh() * self.m_hat.sigmoid()

    def __call__(self, x):
        return x @ self.weight()


class NACStack(Module):
    def __init__(self, sizes, rng):
        self.layers = [NAC(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class ModalityTransform(Module):
    """Two fully connected layers with ReLU and dropout in between."""

    def __init__(self, dim, rng, p=0.5):
        self.fc1 = Linear(dim, dim, rng)
        self.fc2 = Linear(dim, dim, rng)
        self.p = p

    def __call__(self, x, rng=None):
        h = self.fc1(x).relu()
        return self.fc2(dropout(h, self.p, rng, training=self.training and rng is not None))


class PairAttention(Module):
    """Additive attention over pairs ``[r_j; r_j+1; q]`` and projected pair values."""

    def __init__(self, hidden, d_q, rng, att_dim=None):
        a = att_dim or hidden
        self.first = Linear(hidden, a, rng, bias=False)
        self.second = Linear(hidden, a, rng, bias=False)
        self.query = Linear(d_q, a, rng)
        self.score = Linear(a, 1, rng)
        self.value_first = Linear(hidden, hidden, rng, bias=False)
        self.value_second = Linear(hidden, hidden, rng)

    def __call__(self, states, first, second, mask, q):
        """``states`` (N, H); index arrays (B, K, P) into its rows; ``q`` (B, d_q).

        Returns the aggregate (B, K, H) and the weights (B, K, P). Rows without
        any valid pair aggregate to zero.
        """
        b, k, p = first.shape
        pre = self.first(states)[first] + self.second(states)[second]
        pre = pre + self.query(q).reshape(b, 1, 1, -1)
        s = self.score(pre.tanh()).reshape(b, k, p)
        alpha = softmax(s, axis=-1, mask=mask)
        vals = self.value_first(states)[first] + self.value_second(states)[second]
        agg = (alpha.reshape(b, k, p, 1) * vals).sum(axis=2)
        return agg, alpha


@dataclass
class AnalogyContext:
    c: Tensor  # (B, hidden)
    text_aggregate: Tensor  # (B, K, hidden)
    visual_aggregate: Tensor
    text_alpha: np.ndarray  # (B, K, P_text)
    visual_alpha: np.ndarray


class AnalogicalReasoning(Module):
    def __init__(self, hidden, rng, d_q=None, nac_layers=2, p_dropout=0.5):
        d_q = d_q or hidden
        self.hidden = hidden
        self.query_rnn = LSTM(hidden, d_q, rng)
        self.att_text = PairAttention(hidden, d_q, rng)
        self.att_vis = PairAttention(hidden, d_q, rng)
        self.g_text = ModalityTransform(hidden, rng, p_dropout)
        self.g_vis = ModalityTransform(hidden, rng, p_dropout)
        self.nac = NACStack([2 * hidden] + [hidden] * nac_layers, rng)
        self.transform_rnn = LSTM(hidden, hidden, rng)

    def build_query(self, masked_states, mask=None):
        """Run the query LSTM over (B, L, H) masked-token states in sentence order."""
        if masked_states.shape[1] == 0:
            raise ValueError("query needs at least one masked position")
        return self.query_rnn(masked_states, mask)

    def attend(self, states, pairs, q):
        """``pairs``: dict with index/mask arrays for both modalities (see :func:`pair_batch`)."""
        c_text, a_text = self.att_text(states, pairs["text_first"], pairs["text_second"],
                                       pairs["text_mask"], q)
        c_vis, a_vis = self.att_vis(states, pairs["vis_first"], pairs["vis_second"],
                                    pairs["vis_mask"], q)
        return c_vis, c_text, a_vis, a_text

    def reason(self, c_vis, c_text, rng=None):
        """NAC stack over ``[g_v(c_v); g_l(c_l)]``: one h_c per reference."""
        return self.nac(concat([self.g_vis(c_vis, rng), self.g_text(c_text, rng)], axis=-1))

    def transform(self, h_c):
        """LSTM over the (B, K, H) sequence of h_c in retrieval-rank order."""
        return self.transform_rnn(h_c)

    def __call__(self, states, pairs, q, rng=None):
        c_vis, c_text, a_vis, a_text = self.attend(states, pairs, q)
        h_c = self.reason(c_vis, c_text, rng)
        return AnalogyContext(self.transform(h_c), c_text, c_vis, a_text.data, a_vis.data)


def pair_batch(ref_pairs, offsets, n_targets, k):
    """Padded index arrays for the pairs of ``n_targets * k`` references.

    ``ref_pairs[r]`` holds the (textual, visual) token-index pairs of reference
    ``r`` (laid out row-major by target, then rank); ``offsets[r]`` is the row
    of its first token in the stacked state matrix.
    """
    p_text = max(1, max(len(t) for t, _ in ref_pairs))
    p_vis = max(1, max(len(v) for _, v in ref_pairs))
    out = {
        "text_first": np.zeros((n_targets, k, p_text), dtype=np.int64),
        "text_second": np.zeros((n_targets, k, p_text), dtype=np.int64),
        "text_mask": np.zeros((n_targets, k, p_text), dtype=bool),
        "vis_first": np.zeros((n_targets, k, p_vis), dtype=np.int64),
        "vis_second": np.zeros((n_targets, k, p_vis), dtype=np.int64),
        "vis_mask": np.zeros((n_targets, k, p_vis), dtype=bool),
    }
    for r, ((text, vis), base) in enumerate(zip(ref_pairs, offsets)):
        b, j = divmod(r, k)
        for name, pairs in (("text", text), ("vis", vis)):
            if len(pairs):
                arr = np.asarray(pairs, dtype=np.int64) + base
                n = len(pairs)
                out[name + "_first"][b, j, :n] = arr[:, 0]
                out[name + "_second"][b, j, :n] = arr[:, 1]
                out[name + "_mask"][b, j, :n] = True
    return out
