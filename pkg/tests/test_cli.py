import json

import pytest

from artnet.cli import main

TINY = ["--set", "verbs=4", "--set", "nouns=5", "--set", "density=0.8", "--set", "d_vis=8",
        "--set", "n_context=6", "--set", "episodes=160", "--set", "hidden=16", "--set", "n_heads=2",
        "--set", "ff_mult=2", "--set", "n_layers=1", "--set", "pool_size=20", "--epochs", "1"]


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    assert main(["train", *TINY, "--seed", "7", "--out", str(out)]) == 0
    return out


def test_gradcheck_exits_zero(capsys):
    assert main(["gradcheck", "--instances", "1"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "corrupted backward control" in out


def test_train_twice_gives_identical_metrics(run, tmp_path):
    assert main(["train", *TINY, "--seed", "7", "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "metrics.csv").read_bytes() == (run / "metrics.csv").read_bytes()


def test_eval_writes_report(run, tmp_path, capsys):
    out = tmp_path / "eval.json"
    assert main(["eval", "--run", str(run), "--split", "test_seen", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["split"] == "test_seen"


def test_eval_missing_checkpoint_fails_without_report(run, tmp_path, capsys):
    out = tmp_path / "eval.json"
    code = main(["eval", "--run", str(run), "--checkpoint", str(tmp_path / "nope.json"), "--out", str(out)])
    assert code != 0
    assert not out.exists()
    assert "nope.json" in capsys.readouterr().err


def test_config_error_creates_no_run_directory(tmp_path, capsys):
    for bad in (["--set", "hidden=15"], ["--set", "no_such_key=1"], ["--variant", "bert"],
                ["--config", str(tmp_path / "missing.json")]):
        out = tmp_path / "bad"
        assert main(["train", *bad, "--out", str(out)]) == 1
        assert not out.exists()
    assert "error" in capsys.readouterr().err


def test_config_file_then_overrides(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"verbs": 4, "nouns": 5, "density": 0.8, "d_vis": 8, "n_context": 6,
                               "episodes": 160, "hidden": 16, "n_heads": 2, "ff_mult": 2,
                               "n_layers": 1, "pool_size": 20, "epochs": 3}))
    out = tmp_path / "r"
    assert main(["train", "--config", str(cfg), "--set", "epochs=2", "--epochs", "1",
                 "--variant", "multimodal-baseline", "--out", str(out)]) == 0
    saved = json.loads((out / "config.json").read_text())
    assert saved["epochs"] == 1 and saved["variant"] == "multimodal-baseline" and saved["verbs"] == 4


def test_gen_data_then_train_from_file(tmp_path):
    data = tmp_path / "eps.jsonl"
    assert main(["gen-data", "--verbs", "4", "--nouns", "5", "--density", "0.8", "--dvis", "8",
                 "--n-context", "6", "--episodes", "120", "--seed", "3", "--out", str(data)]) == 0
    assert main(["gen-data", "--out", str(data)]) == 1  # refuses to overwrite
    out = tmp_path / "r"
    assert main(["train", *TINY, "--variant", "multimodal-baseline", "--data", str(data),
                 "--out", str(out)]) == 0
    assert json.loads((out / "config.json").read_text())["data"] == str(data)


def test_inspect_retrieval(run, tmp_path, capsys):
    out = tmp_path / "refs.jsonl"
    assert main(["inspect-retrieval", "--run", str(run), "--limit", "2", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 2 and len(json.loads(lines[0])["reference_ids"]) == 3
    assert "ref" in capsys.readouterr().out


def test_sweep_rejects_bad_fractions(tmp_path):
    assert main(["sweep", *TINY, "--fractions", "1.0,abc", "--out", str(tmp_path / "s")]) == 1
    assert main(["sweep", *TINY, "--fractions", "1.5", "--out", str(tmp_path / "s")]) == 1
    assert not (tmp_path / "s").exists()


def test_usage_errors():
    assert main([]) == 1
    assert main(["train"]) == 1
    assert main(["--help"]) == 0
