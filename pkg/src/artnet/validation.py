"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

import numpy as np

from .world import Episode


def check_episodes(X, vocab=None, d_vis=None, require_gold=True):
    """Return ``X`` as a list of episodes after checking shapes and word ids."""
    if isinstance(X, Episode):
        raise TypeError("expected a sequence of Episode objects, got a single Episode")
    episodes = list(X)
    if not episodes:
        raise ValueError("need at least one episode")
    for i, e in enumerate(episodes):
        if not isinstance(e, Episode):
            raise TypeError(f"item {i} is {type(e).__name__}, not Episode")
        regions = np.asarray(e.regions)
        if regions.ndim != 2 or len(regions) == 0:
            raise ValueError(f"episode {e.id}: regions must be a non-empty (R, d_vis) array")
        if d_vis is not None and regions.shape[1] != d_vis:
            raise ValueError(f"episode {e.id}: region dimension {regions.shape[1]} != {d_vis}")
        if len(e.tokens) < 2:
            raise ValueError(f"episode {e.id}: sentence needs at least two words")
        if vocab is not None and (min(e.tokens) < 0 or max(e.tokens) >= vocab.size):
            raise ValueError(f"episode {e.id}: word id outside vocabulary of {vocab.size}")
        if require_gold and (e.verb not in e.tokens or e.noun not in e.tokens):
            raise ValueError(f"episode {e.id}: gold composition not present in its sentence")
    if d_vis is None and len({np.asarray(e.regions).shape[1] for e in episodes}) > 1:
        raise ValueError("episodes disagree on region dimension")
    return episodes
