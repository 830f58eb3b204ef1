"""Run configuration, training and evaluation runs, metrics files and the data-scarcity sweep.

A run directory holds ``config.json`` (the fully resolved configuration),
``checkpoint.json`` (rewritten after every epoch), ``metrics.csv``,
``report.json`` and ``retrieval.jsonl``. Everything in it is recomputable
from the archived configuration.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import os
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .arn import NACStack
from .cce import topk_words
from .model import VARIANTS, ARTNet, TrainingDiverged
from .objectives import AdamW
from .tensor import Tensor, backward
from .world import check_split, gen_episodes, gen_world, load_episodes, make_split

METRICS_HEADER = ("run_id", "seed", "variant", "split", "fraction", "top1", "top5", "affordance",
                  "epoch", "loss")
SWEEP_FRACTIONS = (1.0, 0.8, 0.6, 0.4, 0.2)
MODEL_KEYS = ("n_layers", "hidden", "n_heads", "ff_mult", "k", "pool_size", "nac_layers",
              "arn_dropout", "lam", "margin", "n_negatives", "lr", "beta1", "beta2", "eps",
              "weight_decay", "epochs", "batch_size", "text_mask_rate", "visual_mask_rate",
              "tie_embeddings", "include_image_token", "ref_refresh")


class ConfigError(ValueError):
    """Invalid or unknown configuration values (a usage error)."""


class UnrepresentedWordWarning(UserWarning):
    pass


@dataclass
class RunConfig:
    # dataset: either an episode file or a world generated from the keys below
    data: str | None = None
    verbs: int = 12
    nouns: int = 20
    d_vis: int = 32
    density: float = 0.5
    sigma: float = 0.1
    n_context: int = 32
    context_rate: float = 0.9
    episodes: int = 4000
    withheld: float = 0.2
    test_seen_fraction: float = 0.1
    data_seed: int = 0
    # run
    run_id: str | None = None
    variant: str = "artnet"
    seed: int = 0
    fraction: float = 1.0
    diagnostics_limit: int = 200
    # model and optimisation
    n_layers: int = 2
    hidden: int = 64
    n_heads: int = 4
    ff_mult: int = 4
    k: int = 3
    pool_size: int = 200
    nac_layers: int = 2
    arn_dropout: float = 0.5
    lam: float = 1.0
    margin: float = 0.2
    n_negatives: int = 5
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-4
    weight_decay: float = 0.01
    epochs: int = 20
    batch_size: int = 32
    text_mask_rate: float = 1 / 3
    visual_mask_rate: float = 1 / 6
    tie_embeddings: bool = False
    include_image_token: bool = False
    ref_refresh: int = 100

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path):
        try:
            with open(path) as fh:
                d = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        return cls.from_dict(d)

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **changes):
        return RunConfig.from_dict({**self.to_dict(), **changes})

    @property
    def resolved_run_id(self):
        return self.run_id or f"{self.variant}-s{self.seed}-f{self.fraction:g}"

    def model_params(self):
        return {k: getattr(self, k) for k in MODEL_KEYS}

    def validate(self):
        fields = {f.name: f for f in dataclasses.fields(self)}
        for name, f in fields.items():
            val = getattr(self, name)
            kind = f.type if isinstance(f.type, str) else f.type.__name__
            if kind == "int" and (isinstance(val, bool) or not isinstance(val, int)):
                raise ConfigError(f"{name} must be an integer, got {val!r}")
            if kind == "float" and (isinstance(val, bool) or not isinstance(val, (int, float))):
                raise ConfigError(f"{name} must be a number, got {val!r}")
            if kind == "bool" and not isinstance(val, bool):
                raise ConfigError(f"{name} must be true or false, got {val!r}")
        checks = [
            (self.variant in VARIANTS, f"variant must be one of {', '.join(VARIANTS)}"),
            (0 < self.fraction <= 1, "fraction must be in (0, 1]"),
            (0 <= self.withheld < 1, "withheld must be in [0, 1)"),
            (0 <= self.test_seen_fraction < 1, "test_seen_fraction must be in [0, 1)"),
            (0 < self.density <= 1, "density must be in (0, 1]"),
            (self.sigma >= 0, "sigma must be >= 0"),
            (0 <= self.context_rate <= 1, "context_rate must be in [0, 1]"),
            (self.verbs >= 2 and self.nouns >= 2, "need at least 2 verbs and 2 nouns"),
            (self.episodes >= 1 and self.d_vis >= 1 and self.n_context >= 1, "sizes must be positive"),
            (self.epochs >= 0 and self.batch_size >= 1, "epochs >= 0 and batch_size >= 1 required"),
            (self.hidden % self.n_heads == 0, "hidden must be divisible by n_heads"),
            (1 <= self.k <= self.pool_size, "need 1 <= k <= pool_size"),
            (self.lam >= 0 and self.margin >= 0, "lam and margin must be >= 0"),
            (self.lr > 0, "lr must be positive"),
            (self.diagnostics_limit >= 0, "diagnostics_limit must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if self.data is not None and not Path(self.data).is_file():
            raise ConfigError(f"data file {self.data} does not exist")


# -- data ----------------------------------------------------------------------

@dataclass
class Dataset:
    world: object  # World or None when loaded from a file without one
    vocab: object
    episodes: list

    def by_split(self, tag):
        return [e for e in self.episodes if e.split == tag]


def generate_dataset(cfg):
    """World, episodes and split tags from the config's world keys (deterministic in data_seed)."""
    world = gen_world(cfg.verbs, cfg.nouns, cfg.d_vis, cfg.density, seed=cfg.data_seed,
                      sigma=cfg.sigma, n_context=cfg.n_context, context_rate=cfg.context_rate)
    episodes = gen_episodes(world, cfg.episodes, seed=cfg.data_seed + 1)
    split = make_split(episodes, cfg.withheld, seed=cfg.data_seed + 2,
                       test_seen_fraction=cfg.test_seen_fraction)
    check_split(split, episodes)
    return Dataset(world, world.vocab, split.tag(episodes))


def load_dataset(cfg):
    if cfg.data is None:
        return generate_dataset(cfg)
    episodes, world, vocab = load_episodes(cfg.data)
    return Dataset(world, vocab, episodes)


def training_subset(train, fraction, seed):
    """A seeded subsample of the training episodes; ``fraction == 1`` keeps them all in order."""
    if fraction >= 1.0:
        return list(train)
    n = max(1, int(round(fraction * len(train))))
    rng = np.random.default_rng([seed, 2])
    keep = np.sort(rng.choice(len(train), size=n, replace=False))
    return [train[i] for i in keep]


def unrepresented_words(train, reference):
    """Verb and noun ids present in ``reference`` episodes but absent from ``train``."""
    have = {e.verb for e in train} | {e.noun for e in train}
    need = {e.verb for e in reference} | {e.noun for e in reference}
    return sorted(need - have)


# -- metrics -----------------------------------------------------------------

def composition_accuracy(topk, gold):
    """Both-word and single-word Top-1 / Top-N accuracy.

    ``topk`` (n, 2, N) word ids per (verb slot, noun slot); ``gold`` (n, 2).
    """
    topk = np.asarray(topk)
    gold = np.asarray(gold)
    if len(gold) == 0:
        return {k: float("nan") for k in ("top1", "top5", "verb_top1", "noun_top1", "verb_top5", "noun_top5")}
    hit1 = topk[:, :, 0] == gold
    hitn = (topk == gold[:, :, None]).any(axis=2)
    return {
        "top1": float(hit1.all(axis=1).mean()),
        "top5": float(hitn.all(axis=1).mean()),
        "verb_top1": float(hit1[:, 0].mean()),
        "noun_top1": float(hit1[:, 1].mean()),
        "verb_top5": float(hitn[:, 0].mean()),
        "noun_top5": float(hitn[:, 1].mean()),
    }


def affordance_accuracy(predictions, world):
    """Fraction of Top-1 (verb-slot, noun-slot) pairs that are well-typed and affordable."""
    predictions = np.asarray(predictions)
    if len(predictions) == 0:
        return float("nan")
    vocab = world.vocab
    ok = 0
    for verb_word, noun_word in predictions:
        v, n = vocab.verb_index(int(verb_word)), vocab.noun_index(int(noun_word))
        ok += int(v >= 0 and n >= 0 and world.affordance[v, n] == 1)
    return ok / len(predictions)


def evaluate(model, episodes, world=None, n=5):
    """Metrics on one split plus the raw Top-``n`` predictions and retrieval records."""
    if not episodes:
        return {"n": 0, **composition_accuracy(np.zeros((0, 2, n)), np.zeros((0, 2))),
                "affordance": float("nan")}, np.zeros((0, 2, n), dtype=int), {}
    logits, info = model._eval_forward(episodes)
    topk = topk_words(logits, n)
    gold = np.array([[e.verb, e.noun] for e in episodes])
    metrics = {"n": len(episodes), **composition_accuracy(topk, gold)}
    metrics["affordance"] = affordance_accuracy(topk[:, :, 0], world) if world is not None else float("nan")
    return metrics, topk, info


# -- files -----------------------------------------------------------------

def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return "" if np.isnan(x) else repr(x)
    return str(x)


class MetricsWriter:
    """Append-only CSV writer with the fixed metrics header."""

    def __init__(self, path):
        self.path = Path(path)
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh).writerow(METRICS_HEADER)

    def write(self, **row):
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([_fmt(row.get(k)) for k in METRICS_HEADER])


def write_json(path, obj):
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def write_diagnostics(path, episodes, topk, info, limit):
    """One JSON line per evaluated episode: target, references, scores, attention, predictions."""
    with open(path, "w") as fh:
        for i, e in enumerate(episodes[:limit]):
            rec = {"target_id": e.id, "split": e.split, "gold": [e.verb, e.noun],
                   "top5": topk[i].tolist()}
            if info.get("ref_ids"):
                rec["reference_ids"] = info["ref_ids"][i]
                rec["scores"] = info["ref_scores"][i]
                rec["attention"] = info["attention"][i]
            fh.write(json.dumps(rec) + "\n")


# -- runs ------------------------------------------------------------------

def prepare_run_dir(run_dir):
    run_dir = Path(run_dir)
    if run_dir.exists() and any(run_dir.iterdir()):
        raise ConfigError(f"run directory {run_dir} already exists and is not empty")
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def build_model(cfg, vocab):
    return ARTNet(vocabulary=vocab, variant=cfg.variant, random_state=cfg.seed, **cfg.model_params())


def train(cfg, run_dir, dataset=None):
    """Train one model and evaluate it on both test splits.

    Returns ``(model, report)``. Non-finite training loss raises
    :class:`TrainingDiverged` after the previous epoch's checkpoint has been
    kept on disk.
    """
    cfg.validate()
    dataset = dataset or load_dataset(cfg)
    train_all = dataset.by_split("train")
    test_new = dataset.by_split("test_new")
    new_ids = {e.id for e in test_new}
    if not train_all:
        raise ConfigError("dataset has no training episodes")
    train_eps = training_subset(train_all, cfg.fraction, cfg.seed)
    # a leak here would silently turn new compositions into seen ones
    assert not new_ids & {e.id for e in train_eps}, "test_new episode in the training set"
    missing = unrepresented_words(train_eps, train_all)
    if missing:
        warnings.warn(f"fraction {cfg.fraction} leaves word ids {missing} without training examples",
                      UnrepresentedWordWarning, stacklevel=2)

    run_dir = prepare_run_dir(run_dir)
    write_json(run_dir / "config.json", cfg.to_dict())
    writer = MetricsWriter(run_dir / "metrics.csv")
    run_id = cfg.resolved_run_id
    base = {"run_id": run_id, "seed": cfg.seed, "variant": cfg.variant, "fraction": cfg.fraction}
    ckpt = run_dir / "checkpoint.json"
    state = {"steps": 0}

    def on_epoch(model, epoch, mean_loss):
        for loss in model.step_losses_[state["steps"]:]:
            writer.write(**base, split="train", epoch=epoch + 1, loss=loss)
        state["steps"] = len(model.step_losses_)
        model.save(ckpt)

    model = build_model(cfg, dataset.vocab)
    try:
        model.fit(train_eps, callback=on_epoch)
    except TrainingDiverged as exc:
        write_json(run_dir / "failure.json", {"error": str(exc), "last_checkpoint_epoch": len(model.history_)})
        raise
    assert not new_ids & model.seen_ids_, "test_new episode reached a training batch"
    if cfg.epochs == 0:
        model.save(ckpt)

    report = {"run_id": run_id, "config": cfg.to_dict(), "loss_history": model.history_,
              "n_train": len(train_eps), "unrepresented_words": missing, "splits": {}}
    for split in ("test_seen", "test_new"):
        eps = dataset.by_split(split)
        metrics, topk, info = evaluate(model, eps, dataset.world)
        report["splits"][split] = metrics
        writer.write(**base, split=split, top1=metrics["top1"], top5=metrics["top5"],
                     affordance=metrics["affordance"], epoch=cfg.epochs)
        if split == "test_new":
            write_diagnostics(run_dir / "retrieval.jsonl", eps, topk, info, cfg.diagnostics_limit)
    write_json(run_dir / "report.json", report)
    return model, report


def load_run(run_dir, checkpoint=None):
    """Config, dataset and restored model of a finished run."""
    run_dir = Path(run_dir)
    cfg = RunConfig.from_file(run_dir / "config.json")
    ckpt = Path(checkpoint) if checkpoint else run_dir / "checkpoint.json"
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    dataset = load_dataset(cfg)
    train_eps = training_subset(dataset.by_split("train"), cfg.fraction, cfg.seed)
    model = ARTNet.load(ckpt, train_eps)
    return cfg, dataset, model


def evaluate_run(run_dir, split, checkpoint=None, out=None):
    """Re-evaluate a checkpoint on one split and write ``eval-<split>.json``."""
    if split not in ("train", "test_seen", "test_new"):
        raise ConfigError(f"unknown split {split!r}")
    cfg, dataset, model = load_run(run_dir, checkpoint)
    metrics, _, _ = evaluate(model, dataset.by_split(split), dataset.world)
    report = {"run_id": cfg.resolved_run_id, "split": split, **metrics}
    write_json(Path(out) if out else Path(run_dir) / f"eval-{split}.json", report)
    return report


def scarcity_sweep(cfg, out_dir, fractions=SWEEP_FRACTIONS, dataset=None):
    """One train/evaluate cycle per training fraction; ``sweep.csv`` holds one test_new row each."""
    cfg.validate()
    out_dir = prepare_run_dir(out_dir)
    write_json(out_dir / "config.json", {**cfg.to_dict(), "fractions": list(fractions)})
    dataset = dataset or load_dataset(cfg)
    writer = MetricsWriter(out_dir / "sweep.csv")
    rows = []
    for f in fractions:
        run_cfg = cfg.replace(fraction=float(f), run_id=None)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", UnrepresentedWordWarning)
            _, report = train(run_cfg, out_dir / f"fraction-{f:g}", dataset)
        for w in caught:
            warnings.warn(w.message, w.category, stacklevel=2)
        m = report["splits"]["test_new"]
        writer.write(run_id=run_cfg.resolved_run_id, seed=cfg.seed, variant=cfg.variant,
                     split="test_new", fraction=float(f), top1=m["top1"], top5=m["top5"],
                     affordance=m["affordance"], epoch=cfg.epochs)
        rows.append({"fraction": float(f), "test_seen": report["splits"]["test_seen"], "test_new": m,
                     "warnings": [str(w.message) for w in caught]})
    write_json(out_dir / "sweep.json", rows)
    return rows


# -- accumulator arithmetic ------------------------------------------------------

def nac_arithmetic(seed, op="add", n_layers=2, width=2, steps=3000, lr=0.05, batch=64, low=0.0, high=10.0):
    """Train a standalone NAC stack on ``a op b`` and report test MSE in and beyond the range.

    Inputs are drawn from [low, high); the extrapolation set uses [high, 2 * high).
    """
    rng = np.random.default_rng(seed)
    sizes = [2] + [width] * (n_layers - 1) + [1]
    net = NACStack(sizes, rng)
    opt = AdamW(net.named_parameters(), lr=lr, eps=1e-8, weight_decay=0.0)
    sign = {"add": 1.0, "sub": -1.0}[op]

    def target(x):
        return (x[:, 0] + sign * x[:, 1])[:, None]

    for _ in range(steps):
        x = rng.uniform(low, high, size=(batch, 2))
        err = net(Tensor(x)) - target(x)
        opt.zero_grad()
        backward((err * err).mean())
        opt.step()

    def mse(lo, hi):
        x = rng.uniform(lo, hi, size=(2000, 2))
        return float(np.mean((net(Tensor(x)).data - target(x)) ** 2))

    return mse(low, high), mse(high, 2 * high)
