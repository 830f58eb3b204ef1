"""Context-conditioned prediction head for masked words."""
from __future__ import annotations

import numpy as np

from .layers import LayerNorm, Linear, Module, _param
from .tensor import concat


class CompositionHead(Module):
    """``[m; c]`` -> Linear/ReLU/Linear -> Linear/GELU -> LayerNorm -> word logits."""

    def __init__(self, hidden, d_context, vocab_size, rng, tied_table=None):
        self.cond1 = Linear(hidden + d_context, hidden, rng)
        self.cond2 = Linear(hidden, hidden, rng)
        self.ff = Linear(hidden, hidden, rng)
        self.ln = LayerNorm(hidden)
        if tied_table is None:
            self.phi = _param(rng.normal(0.0, 0.1, size=(vocab_size, hidden)))
        else:
            # tied: the word table lives in the encoder and is registered there
            self._tied = tied_table

    @property
    def word_matrix(self):
        return self.phi if hasattr(self, "phi") else self._tied

    def condition(self, m, c):
        return self.cond2(self.cond1(concat([m, c], axis=-1)).relu())

    def head_forward(self, h1):
        return self.ln(self.ff(h1).gelu())

    def predict_word(self, h):
        return h @ self.word_matrix.T

    def __call__(self, m, c):
        return self.predict_word(self.head_forward(self.condition(m, c)))


def topk_words(logits, n):
    """Top-``n`` word ids per row, logits descending and ties to the smaller id."""
    logits = np.asarray(logits)
    ids = np.broadcast_to(np.arange(logits.shape[-1]), logits.shape)
    order = np.lexsort((ids, -logits), axis=-1)
    return order[..., :n]
