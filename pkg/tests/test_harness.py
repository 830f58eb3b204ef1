import csv
import json
import warnings

import numpy as np
import pytest

from artnet.harness import (
    METRICS_HEADER, ConfigError, RunConfig, UnrepresentedWordWarning, affordance_accuracy,
    composition_accuracy, evaluate, evaluate_run, generate_dataset, load_run, scarcity_sweep,
    train, training_subset, unrepresented_words,
)
from artnet.model import TrainingDiverged
from artnet.world import World, Vocabulary, gen_world

TINY = dict(verbs=4, nouns=5, density=0.8, d_vis=8, n_context=6, episodes=160, epochs=1,
            hidden=16, n_heads=2, ff_mult=2, n_layers=1, pool_size=20, batch_size=16)


def _cfg(**kw):
    return RunConfig.from_dict({**TINY, **kw})


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("runs") / "a"
    model, report = train(_cfg(seed=3), run_dir)
    return run_dir, model, report


def _hand_world():
    vocab = Vocabulary(2, 3, 1)
    a = np.array([[1, 0, 1], [0, 1, 1]])
    return World(vocab, a, np.eye(2, 4), np.eye(3, 4), 0.1, np.zeros(2, int), np.zeros(3, int))


def test_affordance_hand_counted_fixture():
    w = _hand_world()
    v, n = w.vocab.verb_id, w.vocab.noun_id
    preds = [
        (v(0), n(0)), (v(0), n(2)), (v(1), n(1)), (v(1), n(2)), (v(0), n(0)),
        (v(1), n(2)), (v(0), n(2)),          # 7 affordable so far
        (v(0), n(1)),                        # not affordable
        (n(0), n(0)),                        # noun in the verb slot
        (v(1), w.vocab.context_id(0)),       # context word in the noun slot
    ]
    assert affordance_accuracy(preds, w) == 0.7


def test_affordance_of_gold_is_one():
    w = gen_world(seed=0)
    pairs = [(w.vocab.verb_id(v), w.vocab.noun_id(n)) for v, n in w.affordable_pairs()]
    assert affordance_accuracy(pairs, w) == 1.0
    swapped = [(n, v) for v, n in pairs]
    assert affordance_accuracy(swapped, w) == 0.0


def test_oracle_and_chance_accuracy():
    rng = np.random.default_rng(0)
    gold = rng.integers(0, 50, size=(400, 2))
    oracle = np.repeat(gold[:, :, None], 5, axis=2)
    m = composition_accuracy(oracle, gold)
    assert m["top1"] == 1.0 and m["top5"] == 1.0
    # uniform random predictions over a vocabulary of size C hit both words with p = 1 / C^2
    c, n = 6, 20000
    gold = rng.integers(0, c, size=(n, 2))
    guesses = rng.integers(0, c, size=(n, 2, 1))
    p = 1 / c**2
    got = composition_accuracy(guesses, gold)["top1"]
    assert abs(got - p) <= 4 * np.sqrt(p * (1 - p) / n)


def test_accuracy_orderings():
    rng = np.random.default_rng(1)
    gold = rng.integers(0, 8, size=(300, 2))
    top = np.stack([rng.permutation(8)[:5] for _ in range(600)]).reshape(300, 2, 5)
    m = composition_accuracy(top, gold)
    assert m["top5"] >= m["top1"]
    assert m["top1"] <= min(m["verb_top1"], m["noun_top1"])
    assert m["top5"] <= min(m["verb_top5"], m["noun_top5"])


def test_config_rejects_unknown_and_invalid_values(tmp_path):
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.from_dict({"hiddn": 3})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"variant": "bert"})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"epochs": 2.5})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"fraction": 0.0})
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        RunConfig.from_file(bad)


def test_invalid_config_leaves_no_run_directory(tmp_path):
    cfg = _cfg()
    cfg.hidden = 15  # bypasses from_dict; train() validates again
    with pytest.raises(ConfigError):
        train(cfg, tmp_path / "run")
    assert not (tmp_path / "run").exists()


def test_dataset_is_deterministic_and_split_sound():
    a, b = generate_dataset(_cfg()), generate_dataset(_cfg())
    assert a.episodes == b.episodes
    train_comps = {e.composition for e in a.by_split("train")}
    assert not train_comps & {e.composition for e in a.by_split("test_new")}


def test_training_subset():
    ds = generate_dataset(_cfg())
    tr = ds.by_split("train")
    assert training_subset(tr, 1.0, 0) == tr
    sub = training_subset(tr, 0.5, 0)
    assert len(sub) == round(0.5 * len(tr))
    assert sub == training_subset(tr, 0.5, 0)
    assert unrepresented_words(tr, tr) == []
    assert unrepresented_words(tr[:1], tr)


def test_smoke_run_writes_all_outputs(tiny_run):
    run_dir, model, report = tiny_run
    for name in ("config.json", "checkpoint.json", "metrics.csv", "report.json", "retrieval.jsonl"):
        assert (run_dir / name).is_file()
    with open(run_dir / "metrics.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == METRICS_HEADER
    assert {r[3] for r in rows[1:]} == {"train", "test_seen", "test_new"}
    assert RunConfig.from_file(run_dir / "config.json") == _cfg(seed=3)
    for m in report["splits"].values():
        assert 0 <= m["top1"] <= m["top5"] <= 1
    rec = json.loads((run_dir / "retrieval.jsonl").read_text().splitlines()[0])
    assert {"target_id", "reference_ids", "scores", "attention"} <= set(rec)
    assert len(rec["reference_ids"]) == 3
    assert abs(sum(rec["attention"]["textual"][0]) - 1.0) < 1e-9


def test_reference_pool_never_contains_test_new(tiny_run):
    run_dir, model, _ = tiny_run
    ds = generate_dataset(_cfg(seed=3))
    new_ids = {e.id for e in ds.by_split("test_new")}
    assert not new_ids & set(model.index_.ids.tolist())
    for line in (run_dir / "retrieval.jsonl").read_text().splitlines():
        assert not new_ids & set(json.loads(line)["reference_ids"])


def test_runs_are_bit_identical(tiny_run, tmp_path):
    run_dir, _, _ = tiny_run
    train(_cfg(seed=3), tmp_path / "b")
    assert (tmp_path / "b" / "metrics.csv").read_bytes() == (run_dir / "metrics.csv").read_bytes()


def test_reload_reproduces_evaluation(tiny_run):
    run_dir, _, report = tiny_run
    again = evaluate_run(run_dir, "test_new")
    for k in ("top1", "top5", "affordance"):
        assert again[k] == report["splits"]["test_new"][k]
    assert (run_dir / "eval-test_new.json").is_file()


def test_eval_on_missing_checkpoint_writes_nothing(tiny_run, tmp_path):
    run_dir, _, _ = tiny_run
    with pytest.raises(FileNotFoundError):
        evaluate_run(run_dir, "test_seen", checkpoint=tmp_path / "missing.json", out=tmp_path / "r.json")
    assert not (tmp_path / "r.json").exists()


def test_existing_run_directory_is_refused(tiny_run):
    run_dir, _, _ = tiny_run
    with pytest.raises(ConfigError):
        train(_cfg(seed=3), run_dir)


def test_divergence_keeps_last_checkpoint(tmp_path, monkeypatch):
    from artnet import model as model_mod
    real = model_mod.ARTNet._train_step
    calls = {"n": 0}

    def flaky(self, *a, **kw):
        calls["n"] += 1
        if calls["n"] > 12:  # second epoch
            raise TrainingDiverged("non-finite loss nan at step 12")
        return real(self, *a, **kw)

    monkeypatch.setattr(model_mod.ARTNet, "_train_step", flaky)
    with pytest.raises(TrainingDiverged):
        train(_cfg(epochs=3, episodes=300, batch_size=32, variant="multimodal-baseline"), tmp_path / "r")
    ckpt = json.loads((tmp_path / "r" / "checkpoint.json").read_text())
    assert len(ckpt["meta"]["history"]) == 1
    assert json.loads((tmp_path / "r" / "failure.json").read_text())["last_checkpoint_epoch"] == 1


def test_nan_loss_raises_divergence():
    cfg = _cfg(variant="multimodal-baseline", lr=1e300)
    ds = generate_dataset(cfg)
    from artnet.harness import build_model
    m = build_model(cfg.replace(epochs=5), ds.vocab)
    with pytest.raises((TrainingDiverged, FloatingPointError)):
        with np.errstate(all="ignore"):
            m.fit(ds.by_split("train"))


def test_sweep_emits_one_row_per_fraction(tmp_path):
    cfg = _cfg(variant="multimodal-baseline", episodes=120)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rows = scarcity_sweep(cfg, tmp_path / "sweep", fractions=(1.0, 0.8, 0.6, 0.4, 0.05))
    assert [r["fraction"] for r in rows] == [1.0, 0.8, 0.6, 0.4, 0.05]
    with open(tmp_path / "sweep" / "sweep.csv") as fh:
        lines = list(csv.reader(fh))
    assert len(lines) == 6
    assert any(issubclass(w.category, UnrepresentedWordWarning) for w in caught)
    assert rows[-1]["warnings"]
    # fraction 1.0 repeats the plain run exactly
    _, report = train(cfg, tmp_path / "plain")
    assert rows[0]["test_new"] == report["splits"]["test_new"]


def test_text_only_variant_runs(tmp_path):
    _, report = train(_cfg(variant="text-only-baseline"), tmp_path / "t")
    assert set(report["splits"]) == {"test_seen", "test_new"}


def test_load_run_restores_model(tiny_run):
    run_dir, model, _ = tiny_run
    cfg, ds, restored = load_run(run_dir)
    eps = ds.by_split("test_seen")
    np.testing.assert_array_equal(restored.decision_function(eps), model.decision_function(eps))


def test_evaluate_handles_empty_split(tiny_run):
    _, model, _ = tiny_run
    metrics, topk, _ = evaluate(model, [])
    assert metrics["n"] == 0 and topk.shape == (0, 2, 5)


def test_one_epoch_on_64_episodes_emits_checkpoint(tmp_path):
    model, _ = train(_cfg(episodes=64, epochs=1, test_seen_fraction=0.0), tmp_path / "r")
    assert (tmp_path / "r" / "checkpoint.json").is_file()
    assert len(model.history_) == 1
