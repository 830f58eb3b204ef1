"""Acceptance criteria, one PASS/FAIL line each.

Criteria 6 to 10 train on the default world (see ``RunConfig``) and share
their runs through session fixtures; they are marked ``slow``.
Run just this file with ``pytest tests/test_acceptance.py -v``.
"""
import csv
import math
import statistics
import sys
import time
import warnings

import numpy as np
import pytest

from artnet.amm import ReferenceIndex, episode_words, relevance
from artnet.backbone import MASK, TRAINING, apply_mask_policy, tokenize
from artnet.gradcheck import TOLERANCE, corrupted_backward_control, run_gradchecks
from artnet.harness import (
    RunConfig, affordance_accuracy, generate_dataset, nac_arithmetic, scarcity_sweep, train,
)
from artnet.world import Episode, World, Vocabulary, check_split, gen_episodes, gen_world, make_split

RESULTS = []
SEEDS = (0, 1, 2)


def report(criterion, name, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'} criterion {criterion} ({name}): {detail}"
    RESULTS.append(line)
    print(line, file=sys.__stdout__, flush=True)
    assert passed, line


# -- 1. gradient checks ---------------------------------------------------------

def test_gradient_checks():
    t = time.perf_counter()
    results = run_gradchecks(instances=20, seed=0, h=1e-5)
    control = corrupted_backward_control()
    seconds = time.perf_counter() - t
    worst = max(r.max_error for r in results)
    failed = [r.name for r in results if not r.passed]
    ok = not failed and control > TOLERANCE and seconds < 120 and all(r.instances >= 20 for r in results)
    report(1, "gradient check", ok,
           f"max rel err {worst:.2e} over {len(results)} modules x 20 instances "
           f"(failed: {failed or 'none'}), corrupted control {control:.2e}, {seconds:.0f}s")


# -- 2. relevance score and Top-K --------------------------------------------------

def _brute_svl(tw, treg, rw, rreg):
    tw, rw = set(tw), set(rw)
    jac = len(tw & rw) / len(tw | rw) if tw | rw else 0.0
    total = 0.0
    for a in treg:
        for b in rreg:
            dot = sum(float(x) * float(y) for x, y in zip(a, b))
            total += dot / (math.sqrt(sum(float(x) ** 2 for x in a)) * math.sqrt(sum(float(y) ** 2 for y in b)))
    return 0.5 * jac + 0.5 * (1.0 + total / (len(treg) * len(rreg))) / 2.0


def test_relevance_score_and_topk():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        a = (set(rng.integers(5, 30, size=int(rng.integers(1, 7))).tolist()), rng.normal(size=(int(rng.integers(1, 7)), 8)))
        b = (set(rng.integers(5, 30, size=int(rng.integers(1, 7))).tolist()), rng.normal(size=(int(rng.integers(1, 7)), 8)))
        worst = max(worst, abs(relevance(a[0], a[1], b[0], b[1]).s_vl - _brute_svl(a[0], a[1], b[0], b[1])))
    e = np.eye(4)
    closed = [relevance({5, 6}, e[:1], {5, 6}, e[:1]).s_vl == 1.0,
              relevance({5}, e[:2], {6}, e[2:]).s_vl == 0.25,
              relevance({5}, e[:1], {6}, -e[:1]).s_vl == 0.0]

    w = gen_world(seed=0)
    eps = gen_episodes(w, 600, seed=0)
    index = ReferenceIndex(eps, w.vocab)
    topk_ok = 0
    for _ in range(100):
        target = eps[int(rng.integers(len(eps)))]
        words = episode_words(target, w.vocab, {target.verb_pos, target.noun_pos})
        rows = index.sample_pool(rng, 50, exclude_id=target.id)
        scored = sorted((-_brute_svl(words, target.regions, episode_words(index.episodes[r], w.vocab),
                                     index.episodes[r].regions), int(index.ids[r])) for r in rows)
        got, _ = index.retrieve(words, target.regions, rows, 3)
        topk_ok += list(index.ids[got]) == [i for _, i in scored[:3]]
    report(2, "relevance score", worst <= 1e-12 and all(closed) and topk_ok == 100,
           f"max |s_vl - brute| {worst:.1e} on 200 pairs, closed forms {sum(closed)}/3, "
           f"Top-K agrees on {topk_ok}/100 pools")


# -- 3. split soundness -------------------------------------------------------------

def test_split_soundness():
    t = time.perf_counter()
    cfg = RunConfig()
    bad = []
    for seed in range(100):
        w = gen_world(cfg.verbs, cfg.nouns, cfg.d_vis, cfg.density, seed=seed, sigma=cfg.sigma,
                      n_context=cfg.n_context, context_rate=cfg.context_rate)
        eps = gen_episodes(w, cfg.episodes, seed=seed)
        split = make_split(eps, cfg.withheld, seed=seed, test_seen_fraction=cfg.test_seen_fraction)
        try:
            check_split(split, eps)
        except AssertionError as exc:
            bad.append((seed, str(exc)))
    seconds = time.perf_counter() - t
    report(3, "split soundness", not bad and seconds < 60,
           f"{100 - len(bad)}/100 seeds sound (no new composition in training, every withheld word "
           f"represented), {seconds:.0f}s")


# -- 4. masking statistics ------------------------------------------------------------

def test_masking_statistics():
    w = gen_world(seed=0)
    rng = np.random.default_rng(0)
    first = w.vocab.n_special
    n_text = n_vis = 0
    picked_text = picked_vis = 0
    as_mask = as_same = 0
    for e in gen_episodes(w, 16000, seed=0):
        toks = tokenize(e)
        seq = apply_mask_policy(toks, TRAINING, rng, vocab_size=w.vocab.size, first_word=first)
        n_text += len(e.tokens)
        n_vis += len(e.regions) + 1
        picked_text += len(seq.text_targets)
        picked_vis += len(seq.visual_targets)
        for i, gold in seq.text_targets.items():
            as_mask += seq.tokens[i].word == MASK
            as_same += seq.tokens[i].word == gold
    p_text, p_vis = picked_text / n_text, picked_vis / n_vis
    z_text = (p_text - 1 / 3) / math.sqrt((1 / 3) * (2 / 3) / n_text)
    z_vis = (p_vis - 1 / 6) / math.sqrt((1 / 6) * (5 / 6) / n_vis)
    # a random replacement can draw the original word back
    q_same = 0.1 + 0.1 / (w.vocab.size - first)
    z_mask = (as_mask / picked_text - 0.8) / math.sqrt(0.8 * 0.2 / picked_text)
    z_same = (as_same / picked_text - q_same) / math.sqrt(q_same * (1 - q_same) / picked_text)
    q_rand = 0.2 - q_same
    z_rand = ((picked_text - as_mask - as_same) / picked_text - q_rand) / math.sqrt(
        q_rand * (1 - q_rand) / picked_text)
    ok = (min(n_text, n_vis) >= 60000 and max(abs(z_text), abs(z_vis), abs(z_mask), abs(z_same), abs(z_rand)) <= 3
          and 0.313 <= p_text <= 0.353 and 0.152 <= p_vis <= 0.182)
    report(4, "masking statistics", ok,
           f"text rate {p_text:.4f} (z={z_text:+.2f}, {n_text} tokens), visual rate {p_vis:.4f} "
           f"(z={z_vis:+.2f}, {n_vis} tokens), mask/random/keep z = {z_mask:+.2f}/{z_rand:+.2f}/{z_same:+.2f}")


# -- 5. accumulator arithmetic ------------------------------------------------------------

@pytest.mark.parametrize("op", ["add", "sub"])
def test_nac_arithmetic(op):
    results, times = [], []
    for seed in range(5):
        t = time.perf_counter()
        results.append(nac_arithmetic(seed, op=op, n_layers=2))
        times.append(time.perf_counter() - t)
    mse_in = statistics.median(r[0] for r in results)
    mse_out = statistics.median(r[1] for r in results)
    report(5, f"NAC {op}", mse_in < 1e-3 and mse_out < 0.5 and max(times) < 60,
           f"median MSE in range {mse_in:.2e}, at 2x range {mse_out:.2e}, slowest seed {max(times):.1f}s")


# -- shared default-world runs ----------------------------------------------------------------

@pytest.fixture(scope="session")
def default_dataset():
    return generate_dataset(RunConfig())


@pytest.fixture(scope="session")
def default_runs(default_dataset, tmp_path_factory):
    """{(variant, seed): (model, report, seconds, run_dir)} on the default world."""
    root = tmp_path_factory.mktemp("acceptance")
    out = {}
    for variant in ("artnet", "multimodal-baseline", "text-only-baseline"):
        for seed in SEEDS:
            cfg = RunConfig(variant=variant, seed=seed)
            t = time.perf_counter()
            model, rep = train(cfg, root / cfg.resolved_run_id, default_dataset)
            out[variant, seed] = (model, rep, time.perf_counter() - t, root / cfg.resolved_run_id)
    return out


def _metric(runs, variant, split, key):
    return [runs[variant, s][1]["splits"][split][key] for s in SEEDS]


@pytest.mark.slow
def test_new_composition_generalisation(default_runs):
    art_seen = _metric(default_runs, "artnet", "test_seen", "top5")
    base_seen = _metric(default_runs, "multimodal-baseline", "test_seen", "top5")
    report("6a", "seen-composition sanity", min(art_seen + base_seen) >= 0.8,
           f"test_seen Top-5 artnet {art_seen}, multimodal baseline {base_seen}")


@pytest.mark.slow
def test_new_composition_advantage(default_runs):
    art1 = _metric(default_runs, "artnet", "test_new", "top1")
    base1 = _metric(default_runs, "multimodal-baseline", "test_new", "top1")
    art5 = _metric(default_runs, "artnet", "test_new", "top5")
    base5 = _metric(default_runs, "multimodal-baseline", "test_new", "top5")
    wins = sum(a > b for a, b in zip(art1, base1))
    seconds = sum(default_runs[v, s][2] for v in ("artnet", "multimodal-baseline") for s in SEEDS)
    ok = wins >= 2 and np.mean(art5) >= np.mean(base5) and seconds < 1800
    report("6b", "new-composition advantage", ok,
           f"test_new Top-1 artnet {art1} vs baseline {base1} (wins {wins}/3); mean Top-5 "
           f"{np.mean(art5):.4f} vs {np.mean(base5):.4f}; {seconds / 60:.1f} min for 6 runs")


@pytest.mark.slow
def test_vision_helps(default_runs):
    mm = _metric(default_runs, "multimodal-baseline", "test_seen", "top5")
    txt = _metric(default_runs, "text-only-baseline", "test_seen", "top5")
    wins = sum(a > b for a, b in zip(mm, txt))
    report(7, "modality", wins >= 2, f"test_seen Top-5 multimodal {mm} vs text-only {txt} (wins {wins}/3)")


def test_affordance_fixtures():
    vocab = Vocabulary(2, 3, 1)
    w = World(vocab, np.array([[1, 0, 1], [0, 1, 1]]), np.eye(2, 4), np.eye(3, 4), 0.1,
              np.zeros(2, int), np.zeros(3, int))
    v, n = vocab.verb_id, vocab.noun_id
    preds = [(v(0), n(0)), (v(0), n(2)), (v(1), n(1)), (v(1), n(2)), (v(0), n(0)), (v(1), n(2)),
             (v(0), n(2)), (v(0), n(1)), (n(0), n(0)), (v(1), vocab.context_id(0))]
    gold = [(v(a), n(b)) for a, b in w.affordable_pairs()]
    got = affordance_accuracy(preds, w), affordance_accuracy(gold, w), affordance_accuracy([(n(0), v(0))], w)
    report("8-fixture", "affordance fixtures", got == (0.7, 1.0, 0.0),
           f"7 of 10 affordable -> {got[0]}, all gold -> {got[1]}, noun in verb slot -> {got[2]}")


@pytest.mark.slow
def test_affordance(default_runs):
    art = _metric(default_runs, "artnet", "test_new", "affordance")
    txt = _metric(default_runs, "text-only-baseline", "test_new", "affordance")
    ok = statistics.median(art) >= statistics.median(txt)
    report(8, "affordance", ok, f"test_new Top-1 affordance median artnet {statistics.median(art):.4f} "
           f"vs text-only {statistics.median(txt):.4f} ({art} / {txt})")


@pytest.mark.slow
def test_training_loss_falls(default_runs):
    drops = [1 - m.history_[19] / m.history_[0] for m, *_ in
             (default_runs["artnet", s] for s in SEEDS)]
    report("train", "loss curve", statistics.median(drops) >= 0.5,
           f"artnet loss drop epoch 1 -> 20: {[round(d, 3) for d in drops]} (median needs >= 0.5)")


@pytest.mark.slow
def test_scarcity_sweep(default_dataset, tmp_path_factory):
    root = tmp_path_factory.mktemp("sweep")
    full, scarce, counts = [], [], []
    for seed in SEEDS:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            rows = scarcity_sweep(RunConfig(seed=seed), root / f"seed-{seed}", dataset=default_dataset)
        with open(root / f"seed-{seed}" / "sweep.csv") as fh:
            counts.append(len(list(csv.DictReader(fh))))
        by_f = {r["fraction"]: r["test_new"]["top5"] for r in rows}
        full.append(by_f[1.0])
        scarce.append(by_f[0.2])
    ok = statistics.median(full) >= statistics.median(scarce) and counts == [5, 5, 5]
    report(9, "scarcity sweep", ok, f"test_new Top-5 median at 1.0 {statistics.median(full):.4f} vs at 0.2 "
           f"{statistics.median(scarce):.4f}; rows per sweep {counts}")


@pytest.mark.slow
def test_determinism(default_runs, default_dataset, tmp_path):
    *_, run_dir = default_runs["multimodal-baseline", 0]
    train(RunConfig(variant="multimodal-baseline", seed=0), tmp_path / "again", default_dataset)
    same = (tmp_path / "again" / "metrics.csv").read_bytes() == (run_dir / "metrics.csv").read_bytes()
    report(10, "determinism", same, "repeat of multimodal-baseline seed 0 gives a "
           f"{'bit-identical' if same else 'different'} metrics.csv")


def test_split_of_generated_default_dataset(default_dataset):
    # guards the fixture itself: the default world must leave every split non-empty
    assert all(default_dataset.by_split(t) for t in ("train", "test_seen", "test_new"))
    new = {e.composition for e in default_dataset.by_split("test_new")}
    assert not new & {e.composition for e in default_dataset.by_split("train")}
    assert isinstance(default_dataset.episodes[0], Episode)
