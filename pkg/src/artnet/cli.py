"""Command line entry point: ``artnet <subcommand> ...``.

Exit status is 0 on success, 1 for usage or configuration errors and 2 when
a run fails at runtime.
"""
from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

from .harness import (
    SWEEP_FRACTIONS, ConfigError, RunConfig, evaluate_run, generate_dataset, load_run,
    scarcity_sweep, train,
)
from .world import save_episodes

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _resolve_config(args):
    """Config file, then ``--set key=value`` pairs, then the dedicated flags."""
    base = RunConfig.from_file(args.config).to_dict() if args.config else RunConfig().to_dict()
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        base[key.strip()] = _parse_value(value)
    for key in ("seed", "variant", "epochs", "data", "fraction", "run_id"):
        value = getattr(args, key, None)
        if value is not None:
            base[key] = value
    return RunConfig.from_dict(base)


def _add_run_flags(p):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", choices=("artnet", "multimodal-baseline", "text-only-baseline"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--data", help="episode file written by gen-data")
    p.add_argument("--run-id", dest="run_id")


def build_parser():
    parser = _Parser(prog="artnet", description="Masked verb-noun acquisition with analogical reasoning.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic world and write an episode file")
    p.add_argument("--verbs", type=int, default=12)
    p.add_argument("--nouns", type=int, default=20)
    p.add_argument("--density", type=float, default=0.5)
    p.add_argument("--dvis", type=int, default=32)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--episodes", type=int, default=4000)
    p.add_argument("--withheld", type=float, default=0.2)
    p.add_argument("--n-context", dest="n_context", type=int, default=32)
    p.add_argument("--context-rate", dest="context_rate", type=float, default=0.9)
    p.add_argument("--test-seen-fraction", dest="test_seen_fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train one model and evaluate it")
    _add_run_flags(p)
    p.add_argument("--fraction", type=float)
    p.add_argument("--out", required=True, help="run directory (must not exist or be empty)")

    p = sub.add_parser("eval", help="evaluate a run's checkpoint on one split")
    p.add_argument("--run", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test_new", choices=("train", "test_seen", "test_new"))
    p.add_argument("--out")

    p = sub.add_parser("sweep", help="train at several training-data fractions")
    _add_run_flags(p)
    p.add_argument("--fractions", default=",".join(f"{f:g}" for f in SWEEP_FRACTIONS))
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every module")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("inspect-retrieval", help="show retrieved references for evaluation episodes")
    p.add_argument("--run", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test_new", choices=("train", "test_seen", "test_new"))
    p.add_argument("--limit", type=int, default=5)
    p.add_argument("--out", help="also write the records as JSON lines")
    return parser


def _gen_data(args):
    cfg = RunConfig.from_dict({
        "verbs": args.verbs, "nouns": args.nouns, "density": args.density, "d_vis": args.dvis,
        "sigma": args.sigma, "episodes": args.episodes, "withheld": args.withheld,
        "n_context": args.n_context, "context_rate": args.context_rate,
        "test_seen_fraction": args.test_seen_fraction, "data_seed": args.seed,
    })
    out = Path(args.out)
    if out.exists():
        raise ConfigError(f"{out} already exists")
    ds = generate_dataset(cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_episodes(out, ds.episodes, world=ds.world)
    counts = {t: len(ds.by_split(t)) for t in ("train", "test_seen", "test_new")}
    print(f"wrote {len(ds.episodes)} episodes to {out} ({counts})")


def _train(args):
    cfg = _resolve_config(args)
    _, report = train(cfg, args.out)
    for split, m in report["splits"].items():
        print(f"{split}: top1 {m['top1']:.4f} top5 {m['top5']:.4f} affordance {m['affordance']:.4f}")


def _eval(args):
    report = evaluate_run(args.run, args.split, args.checkpoint, args.out)
    print(json.dumps(report, indent=2))


def _sweep(args):
    cfg = _resolve_config(args)
    try:
        fractions = [float(x) for x in args.fractions.split(",") if x]
    except ValueError as exc:
        raise ConfigError(f"--fractions must be comma-separated numbers: {exc}") from exc
    if not fractions or not all(0 < f <= 1 for f in fractions):
        raise ConfigError("fractions must lie in (0, 1]")
    for row in scarcity_sweep(cfg, args.out, fractions):
        m = row["test_new"]
        print(f"fraction {row['fraction']:g}: test_new top1 {m['top1']:.4f} top5 {m['top5']:.4f}")


def _gradcheck(args):
    from .gradcheck import TOLERANCE, corrupted_backward_control, run_gradchecks
    if args.instances < 1:
        raise ConfigError("--instances must be >= 1")
    results = run_gradchecks(args.instances, args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:20s} max rel err {r.max_error:.2e} "
              f"({r.instances} instances, {r.seconds:.1f}s)")
    control = corrupted_backward_control(args.seed)
    print(f"{'PASS' if control > TOLERANCE else 'FAIL'} corrupted backward control: rel err {control:.2e}")
    if not all(r.passed for r in results) or control <= TOLERANCE:
        raise RuntimeError("gradient check failed")


def _inspect(args):
    _, dataset, model = load_run(args.run, args.checkpoint)
    eps = dataset.by_split(args.split)[:args.limit]
    if not eps:
        raise ConfigError(f"split {args.split} is empty")
    logits, info = model._eval_forward(eps)
    words = dataset.vocab.words
    by_id = {e.id: e for e in model.index_.episodes}
    records = []
    for i, e in enumerate(eps):
        pred = logits[i].argmax(axis=-1)
        rec = {"target_id": e.id, "gold": [e.verb, e.noun], "prediction": pred.tolist()}
        print(f"episode {e.id}: '{' '.join(words[w] for w in e.tokens)}' "
              f"-> predicted {words[pred[0]]} {words[pred[1]]}")
        if info["ref_ids"]:
            rec.update(reference_ids=info["ref_ids"][i], scores=info["ref_scores"][i],
                       attention=info["attention"][i])
            for rid, s in zip(info["ref_ids"][i], info["ref_scores"][i]):
                ref = by_id[rid]
                print(f"    ref {rid} s_vl={s:.4f}: '{' '.join(words[w] for w in ref.tokens)}'")
        records.append(rec)
    if args.out:
        with open(args.out, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")


COMMANDS = {"gen-data": _gen_data, "train": _train, "eval": _eval, "sweep": _sweep,
            "gradcheck": _gradcheck, "inspect-retrieval": _inspect}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("artnet: a subcommand is required (see --help)")
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
