"""Masked verb-noun acquisition with retrieval-augmented analogical reasoning."""
from .harness import RunConfig, affordance_accuracy, evaluate, scarcity_sweep, train
from .model import ARTNet
from .world import Episode, Vocabulary, World, gen_episodes, gen_world, load_episodes, make_split, save_episodes

__all__ = [
    "ARTNet", "Episode", "RunConfig", "Vocabulary", "World", "affordance_accuracy", "evaluate",
    "gen_episodes", "gen_world", "load_episodes", "make_split", "save_episodes", "scarcity_sweep",
    "train",
]
__version__ = "0.1.0"
