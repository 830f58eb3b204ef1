"""Masked-word cross-entropy, visual triplet loss and the AdamW optimizer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, cross_entropy, norm


@dataclass
class LossConfig:
    lam: float = 1.0
    margin: float = 0.2
    n_negatives: int = 5

    def __post_init__(self):
        if self.lam < 0 or self.margin < 0:
            raise ValueError("lambda and margin must be non-negative")


def masked_ce_loss(logits, targets):
    return cross_entropy(logits, targets)


def visual_triplet_loss(anchor, positive, negatives, margin=0.2):
    """Hinge on Euclidean distances, averaged over anchors and their negatives.

    ``anchor`` (M, d) Tensor; ``positive`` (M, d); ``negatives`` (M, n, d).
    """
    anchor = anchor if isinstance(anchor, Tensor) else Tensor(anchor)
    m, d = anchor.shape
    d_pos = norm(anchor - positive, axis=-1).reshape(m, 1)
    d_neg = norm(anchor.reshape(m, 1, d) - negatives, axis=-1)
    return (d_pos - d_neg + margin).relu().mean()


def sample_negatives(targets, n_negatives, rng):
    """For each row, ``n_negatives`` region vectors drawn from the other rows (with replacement)."""
    m = len(targets)
    if m < 2:
        raise ValueError("triplet negatives need at least two masked visual tokens")
    # offsets in [1, m) never map a row onto itself
    picks = (np.arange(m)[:, None] + rng.integers(1, m, size=(m, n_negatives))) % m
    return targets[picks]


def total_loss(l_text, l_vis, lam):
    if l_vis is None:
        return l_text
    return l_text + l_vis * lam


class NonFiniteGradient(FloatingPointError):
    pass


class AdamW:
    """Adaptive moments with bias correction and decoupled weight decay.

    Defaults follow the reference training recipe: lr 3e-5, betas (0.9, 0.999), eps 1e-4.
    """

    def __init__(self, params, lr=3e-5, betas=(0.9, 0.999), eps=1e-4, weight_decay=0.01):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradient(f"non-finite gradient in parameter {name!r}; step rejected")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else 0.0
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)

    def state_dict(self):
        return {"t": self.t, "m": self.m, "v": self.v}
