"""Synthetic verb-noun world, episode generation, composition splits and episode files.

The world stands in for a captioned egocentric video corpus: every episode is
a bag of region feature vectors (one for the manipulated object, one for the
action, the rest other objects on the counter) plus a templated sentence that
contains the gold verb-noun composition.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

SPECIALS = ("[PAD]", "[CLS]", "[SEP]", "[MASK]", "[IMG]")
PAD, CLS, SEP, MASK, IMG = range(len(SPECIALS))

SPLIT_TAGS = ("train", "test_seen", "test_new")
FORMAT_NAME = "artnet-episodes"
FORMAT_VERSION = 1


class WorldError(ValueError):
    pass


class EpisodeFormatError(ValueError):
    pass


@dataclass
class Vocabulary:
    """Word list with special tokens first, then verbs, nouns and context words."""

    n_verbs: int
    n_nouns: int
    n_context: int

    @property
    def n_special(self):
        return len(SPECIALS)

    @property
    def size(self):
        return self.n_special + self.n_verbs + self.n_nouns + self.n_context

    @property
    def words(self):
        return (list(SPECIALS)
                + [f"verb{i}" for i in range(self.n_verbs)]
                + [f"noun{i}" for i in range(self.n_nouns)]
                + [f"ctx{i}" for i in range(self.n_context)])

    def verb_id(self, v):
        return self.n_special + v

    def noun_id(self, n):
        return self.n_special + self.n_verbs + n

    def context_id(self, c):
        return self.n_special + self.n_verbs + self.n_nouns + c

    def verb_index(self, word_id):
        """Verb index of ``word_id`` or -1 if it is not a verb."""
        i = word_id - self.n_special
        return i if 0 <= i < self.n_verbs else -1

    def noun_index(self, word_id):
        i = word_id - self.n_special - self.n_verbs
        return i if 0 <= i < self.n_nouns else -1

    def is_special(self, word_id):
        return 0 <= word_id < self.n_special


@dataclass
class World:
    vocab: Vocabulary
    affordance: np.ndarray  # (V, N) of {0, 1}
    verb_protos: np.ndarray  # (V, d_vis), unit rows
    noun_protos: np.ndarray  # (N, d_vis), unit rows
    sigma: float
    verb_context: np.ndarray  # (V,) context index tied to each verb
    noun_context: np.ndarray  # (N,) context index tied to each noun
    context_rate: float = 0.5
    verb_sigma_scale: float = 1.0

    @property
    def d_vis(self):
        return self.verb_protos.shape[1]

    def affordable_pairs(self):
        return np.argwhere(self.affordance == 1)

    def to_dict(self):
        return {
            "n_verbs": self.vocab.n_verbs,
            "n_nouns": self.vocab.n_nouns,
            "n_context": self.vocab.n_context,
            "affordance": self.affordance.astype(int).tolist(),
            "verb_protos": self.verb_protos.tolist(),
            "noun_protos": self.noun_protos.tolist(),
            "sigma": self.sigma,
            "verb_context": self.verb_context.tolist(),
            "noun_context": self.noun_context.tolist(),
            "context_rate": self.context_rate,
            "verb_sigma_scale": self.verb_sigma_scale,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            vocab=Vocabulary(d["n_verbs"], d["n_nouns"], d["n_context"]),
            affordance=np.asarray(d["affordance"], dtype=np.int64),
            verb_protos=np.asarray(d["verb_protos"], dtype=np.float64),
            noun_protos=np.asarray(d["noun_protos"], dtype=np.float64),
            sigma=float(d["sigma"]),
            verb_context=np.asarray(d["verb_context"], dtype=np.int64),
            noun_context=np.asarray(d["noun_context"], dtype=np.int64),
            context_rate=float(d.get("context_rate", 0.5)),
            verb_sigma_scale=float(d.get("verb_sigma_scale", 1.0)),
        )


@dataclass
class Episode:
    id: int
    regions: np.ndarray  # (R, d_vis)
    tokens: list  # sentence word ids
    verb: int  # gold verb word id
    noun: int  # gold noun word id
    split: str = "train"

    @property
    def composition(self):
        return (self.verb, self.noun)

    @property
    def verb_pos(self):
        return self.tokens.index(self.verb)

    @property
    def noun_pos(self):
        return self.tokens.index(self.noun)

    def __eq__(self, other):
        return (isinstance(other, Episode) and self.id == other.id and self.split == other.split
                and self.tokens == other.tokens and self.verb == other.verb
                and self.noun == other.noun and self.regions.shape == other.regions.shape
                and np.array_equal(self.regions, other.regions))


@dataclass
class Split:
    train: list
    test_seen: list
    test_new: list
    withheld: set = field(default_factory=set)

    def tag(self, episodes):
        """Copies of ``episodes`` with their ``split`` field set from this split."""
        tags = {i: "train" for i in self.train}
        tags.update({i: "test_seen" for i in self.test_seen})
        tags.update({i: "test_new" for i in self.test_new})
        return [replace(e, split=tags[e.id]) for e in episodes if e.id in tags]


# -- generation -------------------------------------------------------------

def _unit(x, axis=-1):
    n = np.linalg.norm(x, axis=axis, keepdims=True)
    return x / np.where(n > 0, n, 1.0)


def _separated_prototypes(rng, count, dim, max_cos=0.8, max_tries=1000):
    for _ in range(max_tries):
        p = _unit(rng.normal(size=(count, dim)))
        cos = p @ p.T
        np.fill_diagonal(cos, -1.0)
        if cos.max() < max_cos:
            return p
    raise WorldError(f"could not draw {count} prototypes in {dim} dims with cosine < {max_cos}")


def gen_world(verbs=12, nouns=20, d_vis=32, affordance_density=0.5, seed=0, sigma=0.1,
              n_context=16, context_rate=0.5, verb_sigma_scale=1.0):
    """Draw a world; a fixed ``seed`` gives a bit-identical result.

    Affordances are Bernoulli(``affordance_density``); a verb or noun left
    without any affordable partner gets one, chosen uniformly.
    """
    if verbs < 2 or nouns < 2:
        raise WorldError("need at least 2 verbs and 2 nouns")
    if not 0 < affordance_density <= 1:
        raise WorldError(f"affordance density must be in (0, 1], got {affordance_density}")
    if n_context < 1:
        raise WorldError("need at least one context word")
    rng = np.random.default_rng(seed)
    a = (rng.random((verbs, nouns)) < affordance_density).astype(np.int64)
    for v in np.flatnonzero(a.sum(axis=1) == 0):
        a[v, rng.integers(nouns)] = 1
    for n in np.flatnonzero(a.sum(axis=0) == 0):
        a[rng.integers(verbs), n] = 1
    protos = _separated_prototypes(rng, verbs + nouns, d_vis)
    return World(
        vocab=Vocabulary(verbs, nouns, n_context),
        affordance=a,
        verb_protos=protos[:verbs],
        noun_protos=protos[verbs:],
        sigma=float(sigma),
        verb_context=rng.integers(0, n_context, size=verbs),
        noun_context=rng.integers(0, n_context, size=nouns),
        context_rate=float(context_rate),
        verb_sigma_scale=float(verb_sigma_scale),
    )


def _noisy(rng, proto, sigma):
    if sigma == 0:
        return proto.copy()
    return _unit(proto + rng.normal(0.0, sigma, size=proto.shape))


def _sentence(rng, world, v, n):
    vocab = world.vocab
    n_ctx = int(rng.integers(0, 3)), int(rng.integers(0, 3))
    ctx = []
    for _ in range(sum(n_ctx)):
        r = rng.random()
        if r < world.context_rate / 2:
            ctx.append(vocab.context_id(int(world.verb_context[v])))
        elif r < world.context_rate:
            ctx.append(vocab.context_id(int(world.noun_context[n])))
        else:
            ctx.append(vocab.context_id(int(rng.integers(vocab.n_context))))
    pre, post = ctx[:n_ctx[0]], ctx[n_ctx[0]:]
    return pre + [vocab.verb_id(v), vocab.noun_id(n)] + post


def make_episode(rng, world, v, n, episode_id):
    """One episode showing verb ``v`` applied to noun ``n`` (indices, not word ids)."""
    n_regions = int(rng.integers(3, 7))
    others = rng.permutation(np.delete(np.arange(world.vocab.n_nouns), n))[:n_regions - 2]
    rows = [_noisy(rng, world.noun_protos[n], world.sigma),
            _noisy(rng, world.verb_protos[v], world.sigma * world.verb_sigma_scale)]
    rows += [_noisy(rng, world.noun_protos[o], world.sigma) for o in others]
    # pad with repeats when the world has too few nouns for distinct distractors
    while len(rows) < n_regions:
        rows.append(_noisy(rng, world.noun_protos[int(rng.integers(world.vocab.n_nouns))], world.sigma))
    regions = np.stack(rows)[rng.permutation(n_regions)]
    return Episode(id=episode_id, regions=regions, tokens=_sentence(rng, world, v, n),
                   verb=world.vocab.verb_id(v), noun=world.vocab.noun_id(n))


def gen_episodes(world, count, seed=0, start_id=0):
    """``count`` episodes with compositions drawn uniformly over affordable pairs."""
    if count < 1:
        raise WorldError("episode count must be >= 1")
    rng = np.random.default_rng(seed)
    pairs = world.affordable_pairs()
    picks = rng.integers(0, len(pairs), size=count)
    return [make_episode(rng, world, int(pairs[k][0]), int(pairs[k][1]), start_id + i)
            for i, k in enumerate(picks)]


# -- composition split -------------------------------------------------------

def make_split(episodes, withheld_fraction=0.2, seed=0, test_seen_fraction=0.1, max_retries=200):
    """Withhold a fraction of the observed compositions for ``test_new``.

    Every withheld composition keeps its verb and noun represented in
    training; ``test_seen`` draws from the remaining compositions while
    leaving at least one training episode per composition.
    """
    if not 0 <= withheld_fraction < 1:
        raise WorldError("withheld_fraction must be in [0, 1)")
    rng = np.random.default_rng(seed)
    comps = sorted({e.composition for e in episodes})
    n_hold = int(round(withheld_fraction * len(comps)))
    verbs = {v for v, _ in comps}
    nouns = {n for _, n in comps}
    for _ in range(max_retries):
        idx = rng.choice(len(comps), size=n_hold, replace=False) if n_hold else []
        withheld = {comps[i] for i in idx}
        kept = [c for c in comps if c not in withheld]
        if {v for v, _ in kept} == verbs and {n for _, n in kept} == nouns:
            break
    else:
        raise WorldError(f"cannot withhold {n_hold} compositions without orphaning a word "
                         f"after {max_retries} retries")

    by_comp = {}
    for e in episodes:
        by_comp.setdefault(e.composition, []).append(e.id)
    train, test_seen, test_new = [], [], []
    for comp in comps:
        ids = by_comp[comp]
        if comp in withheld:
            test_new.extend(ids)
            continue
        ids = [ids[i] for i in rng.permutation(len(ids))]
        n_test = min(int(round(test_seen_fraction * len(ids))), len(ids) - 1)
        test_seen.extend(ids[:n_test])
        train.extend(ids[n_test:])
    return Split(sorted(train), sorted(test_seen), sorted(test_new), withheld)


def check_split(split, episodes):
    """Raise AssertionError if ``split`` breaks composition disjointness or coverage."""
    by_id = {e.id: e for e in episodes}
    train_comps = {by_id[i].composition for i in split.train}
    new_comps = {by_id[i].composition for i in split.test_new}
    seen_comps = {by_id[i].composition for i in split.test_seen}
    assert not (train_comps & new_comps), "test_new composition found in training"
    assert seen_comps <= train_comps, "test_seen composition missing from training"
    train_verbs = {v for v, _ in train_comps}
    train_nouns = {n for _, n in train_comps}
    for v, n in split.withheld:
        assert v in train_verbs and n in train_nouns, f"withheld {(v, n)} has an orphan word"


# -- episode files -------------------------------------------------------------

def save_episodes(path, episodes, world=None, vocab=None):
    """Write a JSON-lines file: one header line, then one line per episode."""
    vocab = vocab or (world.vocab if world is not None else None)
    if vocab is None:
        raise ValueError("save_episodes needs a world or a vocabulary")
    d_vis = int(episodes[0].regions.shape[1]) if episodes else (world.d_vis if world else 0)
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "d_vis": d_vis,
        "n_episodes": len(episodes),
        "vocabulary": {"n_verbs": vocab.n_verbs, "n_nouns": vocab.n_nouns,
                       "n_context": vocab.n_context, "words": vocab.words},
        "world": world.to_dict() if world is not None else None,
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for e in episodes:
            rec = {"id": e.id, "split": e.split, "regions": e.regions.tolist(),
                   "tokens": list(e.tokens), "gold": [e.verb, e.noun]}
            fh.write(json.dumps(rec) + "\n")


def _field(rec, key, index):
    if key not in rec:
        raise EpisodeFormatError(f"record {index}: missing field '{key}'")
    return rec[key]


def _parse_record(rec, index, d_vis, vocab_size):
    if not isinstance(rec, dict):
        raise EpisodeFormatError(f"record {index}: expected an object")
    eid = _field(rec, "id", index)
    split = _field(rec, "split", index)
    if split not in SPLIT_TAGS:
        raise EpisodeFormatError(f"record {index}: field 'split' has unknown tag {split!r}")
    try:
        regions = np.asarray(_field(rec, "regions", index), dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise EpisodeFormatError(f"record {index}: field 'regions' is not a float matrix") from exc
    if regions.ndim != 2 or regions.shape[0] < 1:
        raise EpisodeFormatError(f"record {index}: field 'regions' must be a non-empty matrix")
    if regions.shape[1] != d_vis:
        raise EpisodeFormatError(f"record {index}: field 'regions' has dimension "
                                 f"{regions.shape[1]}, header says d_vis={d_vis}")
    tokens = _field(rec, "tokens", index)
    if not isinstance(tokens, list) or not all(isinstance(t, int) for t in tokens):
        raise EpisodeFormatError(f"record {index}: field 'tokens' must be a list of ints")
    if any(t < 0 or t >= vocab_size for t in tokens):
        raise EpisodeFormatError(f"record {index}: field 'tokens' has an out-of-vocabulary id")
    gold = _field(rec, "gold", index)
    if not (isinstance(gold, list) and len(gold) == 2 and all(g in tokens for g in gold)):
        raise EpisodeFormatError(f"record {index}: field 'gold' must be two ids present in 'tokens'")
    return Episode(id=int(eid), regions=regions, tokens=tokens, verb=gold[0], noun=gold[1], split=split)


def load_episodes(path):
    """Read an episode file. Returns ``(episodes, world_or_None, vocabulary)``."""
    with open(path) as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise EpisodeFormatError(f"{path}: empty file, missing header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise EpisodeFormatError(f"{path}: header line is not valid JSON") from exc
    if header.get("format") != FORMAT_NAME or header.get("version") != FORMAT_VERSION:
        raise EpisodeFormatError(f"{path}: unsupported format {header.get('format')!r} "
                                 f"version {header.get('version')!r}")
    voc = header["vocabulary"]
    vocab = Vocabulary(voc["n_verbs"], voc["n_nouns"], voc["n_context"])
    world = World.from_dict(header["world"]) if header.get("world") else None
    d_vis = int(header["d_vis"])
    episodes = []
    for index, line in enumerate(lines[1:]):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise EpisodeFormatError(f"record {index} (line {index + 2}): truncated or invalid JSON") from exc
        episodes.append(_parse_record(rec, index, d_vis, vocab.size))
    expected = header.get("n_episodes")
    if expected is not None and expected != len(episodes):
        raise EpisodeFormatError(f"record {len(episodes)}: file ends after {len(episodes)} "
                                 f"records, header declares {expected}")
    return episodes, world, vocab
