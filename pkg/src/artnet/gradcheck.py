"""Finite-difference gradient checks for every differentiable building block.

Each check draws a fresh random instance, compares analytic and central
difference gradients and returns the max relative error. A deliberately
broken backward pass serves as the negative control.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .arn import NACStack, AnalogicalReasoning, pair_batch, pair_indices
from .backbone import TRAINING, EncoderConfig, MultimodalEncoder, collate, tokenize
from .cce import CompositionHead
from .layers import LSTM, Embedding
from .model import ARTNet
from .objectives import masked_ce_loss, visual_triplet_loss
from .tensor import (
    Tensor, check_parameters, concat, finite_difference_check, layer_norm, log_softmax, matmul,
    softmax,
)
from .world import gen_episodes, gen_world

TOLERANCE = 1e-4


@dataclass
class GradCheckResult:
    name: str
    max_error: float
    instances: int
    seconds: float

    @property
    def passed(self):
        return self.max_error <= TOLERANCE


def _weights(rng, shape):
    return rng.normal(size=shape)


def check_primitives(rng, h=1e-5):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 5))
    w = _weights(rng, (3, 5))
    errs = [
        finite_difference_check(lambda t: (matmul(t, Tensor(b)) * w).sum(), a, h),
        finite_difference_check(lambda t: (matmul(Tensor(a), t) * w).sum(), b, h),
        finite_difference_check(lambda t: (softmax(t, axis=-1) * w[:, :4]).sum(), a, h),
        finite_difference_check(lambda t: (log_softmax(t, axis=0) * w[:, :4]).sum(), a, h),
        finite_difference_check(lambda t: (t.gelu() * w[:, :4]).sum(), a, h),
        finite_difference_check(lambda t: (t.tanh() * t.sigmoid() * w[:, :4]).sum(), a, h),
        finite_difference_check(lambda t: ((t * t + 1.0).sqrt().log() / (t.exp() + 1.0)).sum(), a, h),
        finite_difference_check(lambda t: (concat([t, t ** 2.0], axis=1).mean(axis=0) * w[0, :4].repeat(2)).sum(), a, h),
    ]
    g, bias = rng.normal(size=4), rng.normal(size=4)
    errs.append(finite_difference_check(lambda t: (layer_norm(t, Tensor(g), Tensor(bias)) * w[:, :4]).sum(), a, h))
    return max(errs)


def check_embedding(rng, h=1e-5):
    emb = Embedding(7, 5, rng)
    ids = rng.integers(0, 7, size=(2, 6))
    w = _weights(rng, (2, 6, 5))
    return check_parameters(lambda: (emb(ids) * w).sum(), emb.named_parameters(), h)[0]


def _tiny_episodes(rng, n, d_vis=4, vocab=20):
    from .world import Episode
    out = []
    for i in range(n):
        words = [int(x) for x in rng.integers(5, vocab, size=int(rng.integers(2, 5)))]
        out.append(Episode(id=i, regions=rng.normal(size=(int(rng.integers(2, 4)), d_vis)),
                           tokens=words, verb=words[0], noun=words[1]))
    return out


def check_encoder(rng, h=1e-5, max_coords=3):
    cfg = EncoderConfig(n_layers=1, hidden=8, n_heads=2, ff_mult=2, vocab_size=20,
                        max_positions=8, d_vis=4)
    enc = MultimodalEncoder(cfg, rng)
    batch = collate([tokenize(e) for e in _tiny_episodes(rng, 2)], 4)
    w = _weights(rng, batch.shape + (8,))
    return check_parameters(lambda: (enc(batch) * w).sum(), enc.named_parameters(), h,
                            max_coords=max_coords, rng=rng)[0]


def check_nac(rng, h=1e-5):
    stack = NACStack([4, 3, 2], rng)
    x = Tensor(rng.normal(size=(5, 4)))
    w = _weights(rng, (5, 2))
    return check_parameters(lambda: (stack(x) * w).sum(), stack.named_parameters(), h)[0]


def check_lstm(rng, h=1e-5, max_coords=6):
    lstm = LSTM(3, 4, rng)
    xs = rng.normal(size=(2, 3, 3))
    mask = np.array([[1, 1, 1], [1, 1, 0]], dtype=bool)
    w = _weights(rng, (2, 4))
    params = {**lstm.named_parameters(), "input": Tensor(xs, requires_grad=True)}
    return check_parameters(lambda: (lstm(params["input"], mask) * w).sum(), params, h,
                            max_coords=max_coords, rng=rng)[0]


def check_arn(rng, h=1e-5, max_coords=3):
    hidden, k = 6, 2
    arn = AnalogicalReasoning(hidden, rng, d_q=5)
    refs = _tiny_episodes(rng, 2 * k)
    toks = [tokenize(e) for e in refs]
    offsets = np.cumsum([0] + [len(t) for t in toks[:-1]])
    pairs = pair_batch([pair_indices(t) for t in toks], offsets, 2, k)
    states = Tensor(rng.normal(size=(sum(len(t) for t in toks), hidden)), requires_grad=True)
    masked = Tensor(rng.normal(size=(2, 2, hidden)), requires_grad=True)
    w = _weights(rng, (2, hidden))
    drop_seed = int(rng.integers(2**31))

    def loss():
        q = arn.build_query(masked)
        return (arn(states, pairs, q, np.random.default_rng(drop_seed)).c * w).sum()

    params = {**arn.named_parameters(), "states": states, "masked": masked}
    return check_parameters(loss, params, h, max_coords=max_coords, rng=rng)[0]


def check_cce(rng, h=1e-5, max_coords=6):
    head = CompositionHead(6, 5, 11, rng)
    m = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
    c = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    w = _weights(rng, (3, 11))
    params = {**head.named_parameters(), "m": m, "c": c}
    return check_parameters(lambda: (head(m, c) * w).sum(), params, h, max_coords=max_coords, rng=rng)[0]


def check_cross_entropy(rng, h=1e-5):
    logits = rng.normal(size=(4, 7)) * 3
    targets = rng.integers(0, 7, size=4)
    return finite_difference_check(lambda t: masked_ce_loss(t, targets), logits, h)


def check_triplet(rng, h=1e-5):
    pos = rng.normal(size=(4, 3))
    neg = rng.normal(size=(4, 5, 3))
    anchor = pos + 0.3 * rng.normal(size=(4, 3))
    # a large margin keeps every hinge active, away from the kink
    return finite_difference_check(lambda t: visual_triplet_loss(t, pos, neg, margin=10.0), anchor, h)


def check_full_model(rng, h=1e-5, max_coords=2):
    """Encoder -> retrieval -> ARN -> head -> total loss on a tiny world."""
    world = gen_world(3, 4, d_vis=4, seed=int(rng.integers(2**31)), n_context=3)
    eps = gen_episodes(world, 12, seed=int(rng.integers(2**31)))
    model = ARTNet(vocabulary=world.vocab, hidden=8, n_heads=2, ff_mult=2, n_layers=1, k=2,
                   pool_size=6, epochs=0, text_mask_rate=0.5, visual_mask_rate=0.5,
                   random_state=int(rng.integers(2**31)))
    model.fit(eps)
    model._set_training(True)
    seeds = [int(s) for s in rng.integers(2**31, size=3)]
    batch = eps[:4]

    def loss():
        out = model._forward(batch, TRAINING, np.random.default_rng(seeds[0]),
                             lambda e: np.random.default_rng(seeds[1]), np.random.default_rng(seeds[2]))
        return out["loss"]

    return check_parameters(loss, model.params_, h, max_coords=max_coords, rng=rng)[0]


CHECKS = {
    "tensor primitives": check_primitives,
    "embedding": check_embedding,
    "encoder": check_encoder,
    "nac": check_nac,
    "lstm": check_lstm,
    "arn": check_arn,
    "cce": check_cce,
    "cross-entropy loss": check_cross_entropy,
    "triplet loss": check_triplet,
    "full model": check_full_model,
}


def run_gradchecks(instances=20, seed=0, h=1e-5, names=None):
    results = []
    for i, (name, fn) in enumerate(CHECKS.items()):
        if names is not None and name not in names:
            continue
        rng = np.random.default_rng([seed, i])
        t = time.perf_counter()
        worst = max(fn(rng, h) for _ in range(instances))
        results.append(GradCheckResult(name, worst, instances, time.perf_counter() - t))
    return results


def _broken_tanh(x):
    y = np.tanh(x.data)

    def _bw(g):
        # wrong on purpose: the derivative is 1 - y**2
        x.grad = (x.grad if x.grad is not None else 0.0) + g * (1.0 - y)

    return Tensor._make(y, (x,), _bw, "broken_tanh")


def corrupted_backward_control(seed=0, h=1e-5):
    """Max relative error of a function whose backward pass is wrong; must exceed the tolerance."""
    x = np.random.default_rng(seed).normal(size=(4, 3))
    return finite_difference_check(lambda t: (_broken_tanh(t) * 2.0).sum(), x, h)
