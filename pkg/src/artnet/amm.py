"""Reference retrieval by combined text (Jaccard) and visual (mean cosine) relevance."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RelevanceScore:
    s_vl: float
    text: float
    visual: float


def text_relevance(target_words, ref_words):
    """Jaccard index of two word sets; 0 when both are empty."""
    a, b = set(target_words), set(ref_words)
    union = a | b
    return len(a & b) / len(union) if union else 0.0


def _unit_rows(x):
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    # zero vectors stay zero, so their cosine terms vanish
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


def visual_relevance(target_regions, ref_regions):
    """Mean cosine similarity over all (target, reference) region pairs."""
    t = np.atleast_2d(target_regions)
    r = np.atleast_2d(ref_regions)
    if len(t) == 0 or len(r) == 0:
        raise ValueError("visual relevance needs non-empty region lists")
    return float((_unit_rows(t) @ _unit_rows(r).T).sum() / (len(t) * len(r)))


def combine(jaccard, mean_cos):
    return 0.5 * (jaccard + (1.0 + mean_cos) / 2.0)


def relevance(target_words, target_regions, ref_words, ref_regions):
    j = text_relevance(target_words, ref_words)
    v = visual_relevance(target_regions, ref_regions)
    return RelevanceScore(combine(j, v), j, v)


def rank(scores, ids, k):
    """Indices of the ``k`` best scores; ties go to the smaller id."""
    scores = np.asarray(scores)
    ids = np.asarray(ids)
    if len(scores) == 0:
        raise ValueError("cannot retrieve from an empty pool")
    if k > len(scores):
        raise ValueError(f"k={k} exceeds pool size {len(scores)}")
    order = np.lexsort((ids, -scores))
    return order[:k]


def episode_words(episode, vocab, exclude_positions=()):
    """Non-special sentence words, skipping masked sentence positions."""
    skip = set(exclude_positions)
    return {w for i, w in enumerate(episode.tokens) if i not in skip and not vocab.is_special(w)}


class ReferenceIndex:
    """Precomputed word bags and region sums for fast scoring against a pool.

    The mean pairwise cosine equals the dot product of the summed unit
    vectors divided by the number of pairs, so each episode is reduced to one
    summed vector.
    """

    def __init__(self, episodes, vocab, include_image_token=False):
        self.episodes = list(episodes)
        self.vocab = vocab
        self.include_image_token = include_image_token
        self.ids = np.array([e.id for e in self.episodes], dtype=np.int64)
        self.row_of = {int(i): r for r, i in enumerate(self.ids)}
        self.bags = np.zeros((len(self.episodes), vocab.size))
        self.vis_sum = np.zeros((len(self.episodes), self.episodes[0].regions.shape[1]))
        self.n_vis = np.zeros(len(self.episodes))
        for r, e in enumerate(self.episodes):
            for w in episode_words(e, vocab):
                self.bags[r, w] = 1.0
            regs = self.visual_tokens(e.regions)
            self.vis_sum[r] = _unit_rows(regs).sum(axis=0)
            self.n_vis[r] = len(regs)
        self.bag_size = self.bags.sum(axis=1)

    def visual_tokens(self, regions):
        regions = np.asarray(regions, dtype=np.float64)
        if self.include_image_token:
            return np.vstack([regions.mean(axis=0, keepdims=True), regions])
        return regions

    def scores(self, target_words, target_regions, rows):
        """Score arrays (s_vl, jaccard, mean_cos) of one target against pool ``rows``."""
        tw = np.zeros(self.vocab.size)
        tw[list(target_words)] = 1.0
        inter = self.bags[rows] @ tw
        union = self.bag_size[rows] + tw.sum() - inter
        jac = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
        regs = self.visual_tokens(target_regions)
        tsum = _unit_rows(regs).sum(axis=0)
        cos = (self.vis_sum[rows] @ tsum) / (self.n_vis[rows] * len(regs))
        return combine(jac, cos), jac, cos

    def sample_pool(self, rng, size, exclude_id=None):
        """Random pool rows of ``size`` episodes, never containing ``exclude_id``."""
        n = len(self.episodes)
        size = min(size, n - (1 if exclude_id in self.row_of else 0))
        rows = rng.choice(n, size=min(size + 1, n), replace=False)
        if exclude_id is not None and exclude_id in self.row_of:
            rows = rows[rows != self.row_of[exclude_id]]
        return rows[:size]

    def retrieve(self, target_words, target_regions, rows, k):
        """Top-``k`` pool rows by s_vl (descending, ties by smaller episode id)."""
        s, jac, cos = self.scores(target_words, target_regions, rows)
        order = rank(s, self.ids[rows], k)
        return rows[order], s[order]


def retrieve_topk(target_words, target_regions, pool, vocab, k=3, include_image_token=False):
    """Reference implementation over a list of episodes; returns the top-``k`` episode ids."""
    if not pool:
        raise ValueError("cannot retrieve from an empty pool")
    scores = []
    for e in pool:
        regs = e.regions
        treg = target_regions
        if include_image_token:
            regs = np.vstack([regs.mean(axis=0, keepdims=True), regs])
            treg = np.vstack([np.mean(treg, axis=0, keepdims=True), treg])
        scores.append(relevance(target_words, treg, episode_words(e, vocab), regs).s_vl)
    ids = [e.id for e in pool]
    return [ids[i] for i in rank(scores, ids, k)]
