"""Command-line entry point: prepare, train, eval, predict, gridsearch, compare.

Every flag can also be set through an environment variable named
``HIERSLU_<FLAG>`` (upper case, dashes as underscores), e.g.
``HIERSLU_SEED=3``; explicit flags win over the environment.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import corpus
from .corpus import CorpusError, Vocab
from .evaluation import (compare_records, evaluate_records, prediction_records, read_predictions,
                         write_predictions)
from .model import ConfigError, ModelConfig
from .training import (TrainConfig, TrainingDivergedError, grid_search, load_network, predict_frames,
                       read_checkpoint, train)

ENV_PREFIX = "HIERSLU_"
logger = logging.getLogger("hierslu")


class CLIError(Exception):
    pass


# ---------------------------------------------------------------------------
# config files

def parse_value(text: str):
    text = text.strip()
    if text.lower() in ("none", "null", ""):
        return None
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CLIError(f"{path}:{n}: expected 'key = value'")
        values[key.strip()] = parse_value(value)
    return values


def read_grid_file(path) -> dict:
    """``key = v1, v2, ...`` lines."""
    grid = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CLIError(f"{path}:{n}: expected 'key = v1, v2, ...'")
        grid[key.strip()] = [parse_value(v) for v in value.split(",")]
    return grid


_MODEL_KEYS = set(ModelConfig.__dataclass_fields__)
_TRAIN_KEYS = set(TrainConfig.__dataclass_fields__)


def build_configs(args) -> tuple[ModelConfig, TrainConfig]:
    values = read_config_file(args.config) if args.config else {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise CLIError(f"--set expects key=value, got {item!r}")
        values[key.strip()] = parse_value(value)
    for flag in ("seed", "steps", "batch_size", "eval_every"):
        if getattr(args, flag, None) is not None:
            values[flag] = getattr(args, flag)
    unknown = set(values) - _MODEL_KEYS - _TRAIN_KEYS
    if unknown:
        raise CLIError(f"unknown config keys: {sorted(unknown)}")
    model = ModelConfig(**{k: v for k, v in values.items() if k in _MODEL_KEYS}).validate()
    trainc = TrainConfig(**{k: v for k, v in values.items() if k in _TRAIN_KEYS}).validate()
    return model, trainc


# ---------------------------------------------------------------------------
# helpers

def _header(command: str, effective: dict) -> None:
    print(f"# hierslu {command} " + json.dumps(effective, sort_keys=True, default=str))


def _load_prepared(data_dir) -> tuple[dict, Vocab]:
    data_dir = Path(data_dir)
    if not (data_dir / "corpus.json").exists():
        raise CLIError(f"{data_dir} has no corpus.json; run 'hierslu prepare' first")
    splits, _ = corpus.load_corpus(data_dir / "corpus.json")
    return splits, Vocab.load(data_dir / "vocab")


def _resolve_ckpt(path) -> Path:
    path = Path(path)
    if (path / "state.json").exists():
        return path
    if (path / "best" / "state.json").exists():
        return path / "best"
    raise CLIError(f"no checkpoint found at {path}")


def _check_vocab(state: dict, vocab: Vocab) -> None:
    if state["vocab_hash"] != vocab.fingerprint():
        raise CLIError("vocabulary mismatch: the checkpoint was trained with vocabulary "
                       f"{state['vocab_hash'][:12]} but the prepared corpus has {vocab.fingerprint()[:12]}; "
                       "evaluate against the corpus the model was trained on")


def _emit_json(payload, path) -> None:
    text = json.dumps(payload, sort_keys=True, indent=1)
    if path:
        Path(path).write_text(text)
    else:
        print(text)


# ---------------------------------------------------------------------------
# commands

def cmd_prepare(args) -> None:
    domains = [d.strip().lower() for d in (args.domains or "").split(",") if d.strip()]
    if not domains:
        raise CLIError("--domains must name at least one of sim-m, sim-r")
    _header("prepare", {"data_dir": args.data_dir, "domains": domains, "out": args.out,
                        "user_act_labels": args.user_act_labels})
    out = Path(args.out)
    files = [corpus.split_path(args.data_dir, d, s) for d in domains for s in corpus.SPLITS]
    missing = [str(f) for f in files if not f.exists()]
    if missing:
        raise CLIError(f"missing dataset files: {missing}")
    fingerprint = corpus.files_fingerprint(files) + f":{args.user_act_labels}"
    cache = out / "corpus.json"
    splits = None
    if cache.exists():
        try:
            cached, source = corpus.load_corpus(cache)
            if source == fingerprint:
                splits = cached
                print("cache hit: corpus.json is up to date")
        except (CorpusError, json.JSONDecodeError, KeyError):
            pass
    if splits is None:
        splits = {s: corpus.load_dataset(args.data_dir, s, domains, args.user_act_labels)
                  for s in corpus.SPLITS}
        out.mkdir(parents=True, exist_ok=True)
        Vocab.build(splits["train"]).save(out / "vocab")
        corpus.save_corpus(cache, splits, fingerprint)
    vocab = Vocab.load(out / "vocab")
    summary = {}
    for split, dialogues in splits.items():
        for domain in domains:
            part = [d for d in dialogues if d.domain == domain]
            s = corpus.summarize(part)
            summary[f"{domain}/{split}"] = s
            print(f"{domain} {split}: {s['dialogues']} dialogues, {s['turns']} turns")
    summary["vocab"] = {"tokens": len(vocab.tokens), "slots": len(vocab.slots),
                        "user_acts": len(vocab.user_acts), "system_acts": len(vocab.system_acts),
                        "intents": len(vocab.intents)}
    print(f"vocab: {len(vocab.slots)} slot types, {len(vocab.user_acts)} user act types, "
          f"{len(vocab.intents)} intents, {len(vocab.tokens)} tokens")
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1))


def cmd_train(args) -> None:
    model, trainc = build_configs(args)
    _header("train", {"data": args.data, "out": args.out, "trial": args.trial,
                      "model": model.to_dict(), "train": asdict(trainc)})
    splits, vocab = _load_prepared(args.data)
    out = Path(args.out) / args.trial
    marker = out / "INCOMPLETE"
    out.mkdir(parents=True, exist_ok=True)
    marker.write_text("training did not finish; 'last' holds the most recent evaluated state\n")
    trainer = train(model, trainc, vocab, splits["train"], splits.get("dev"), out)
    marker.unlink()
    print(f"trained {trainer.step} steps; best validation frame accuracy "
          f"{trainer.best_score:.4f} at step {trainer.best_step}; checkpoints in {out}")


def _predict_records(ckpt, dialogues):
    network, vocab, state = load_network(ckpt)
    frames = predict_frames(network, vocab, dialogues)
    return prediction_records(dialogues, frames), state, vocab


def cmd_eval(args) -> None:
    _header("eval", vars_without_func(args))
    if args.preds:
        records = read_predictions(args.preds)
    else:
        if not (args.ckpt and args.data):
            raise CLIError("eval needs --preds, or --ckpt with --data")
        splits, vocab = _load_prepared(args.data)
        ckpt = _resolve_ckpt(args.ckpt)
        state, _ = read_checkpoint(ckpt)
        _check_vocab(state, vocab)
        if args.split not in splits:
            raise CLIError(f"prepared corpus has no split {args.split!r}")
        records, _, _ = _predict_records(ckpt, splits[args.split])
    report = evaluate_records(records, args.act_average)
    print(report.table())
    _emit_json(report.to_dict(), args.json)


def cmd_predict(args) -> None:
    _header("predict", vars_without_func(args))
    ckpt = _resolve_ckpt(args.ckpt)
    state, _ = read_checkpoint(ckpt)
    dialogues = corpus.load_dialogues(args.input, args.split)
    if args.data:
        _check_vocab(state, Vocab.load(Path(args.data) / "vocab"))
    records, _, _ = _predict_records(ckpt, dialogues)
    write_predictions(args.out, records)
    print(f"wrote {len(records)} turn predictions to {args.out}")


def cmd_gridsearch(args) -> None:
    model, trainc = build_configs(args)
    grid = read_grid_file(args.grid)
    _header("gridsearch", {"data": args.data, "out": args.out, "grid": grid, "jobs": args.jobs,
                           "model": model.to_dict(), "train": asdict(trainc)})
    splits, vocab = _load_prepared(args.data)
    ranked = grid_search(model, trainc, vocab, grid, splits["train"], splits.get("dev"),
                         args.out, n_jobs=args.jobs)
    for r in ranked:
        print(f"{r['rank']:>3}  {r['best_val_frame_accuracy']:.4f}  {r['trial']}")
    _emit_json(ranked, args.json or (Path(args.out) / "ranking.json" if args.out else None))


def cmd_compare(args) -> None:
    _header("compare", vars_without_func(args))
    result = compare_records(read_predictions(args.preds_a), read_predictions(args.preds_b), args.alpha)
    verdict = "significant" if result.significant else "not significant"
    print(f"b={result.b} c={result.c} statistic={result.statistic:.4f} p={result.p_value:.4g} "
          f"({result.method}) -> {verdict} at alpha={args.alpha}")
    _emit_json(asdict(result), args.json)


def vars_without_func(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func",)}


# ---------------------------------------------------------------------------
# parser

def _add_train_flags(p):
    p.add_argument("--data", required=True, help="directory written by 'prepare'")
    p.add_argument("--config", default=None, help="flat key = value config file")
    p.add_argument("--set", action="append", default=None, metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--eval-every", type=int, default=None)
    p.add_argument("--out", default="ckpt", help="checkpoint root directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hierslu", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build vocabularies and the corpus cache")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--domains", default="sim-m,sim-r")
    p.add_argument("--out", default="prepared")
    p.add_argument("--user-act-labels", choices=("type", "type_slot"), default="type")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one model configuration")
    _add_train_flags(p)
    p.add_argument("--trial", default="default", help="checkpoint subdirectory name")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="print metrics for a checkpoint or a prediction dump")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--preds", default=None)
    p.add_argument("--act-average", choices=("micro", "macro"), default="micro")
    p.add_argument("--json", default=None, help="write the JSON report here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write a per-turn prediction dump")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="corpus.json or a public-schema dialogue file")
    p.add_argument("--split", default="test")
    p.add_argument("--data", default=None, help="prepared corpus to check the vocabulary against")
    p.add_argument("--out", default="predictions.jsonl")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gridsearch", help="train a grid of configurations and rank them")
    _add_train_flags(p)
    p.add_argument("--grid", required=True, help="file of 'key = v1, v2, ...' lines")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--json", default=None)
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("compare", help="McNemar's test between two prediction dumps")
    p.add_argument("--preds-a", required=True)
    p.add_argument("--preds-b", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--json", default=None)
    p.set_defaults(func=cmd_compare)

    _apply_env_defaults(parser)
    return parser


def _apply_env_defaults(parser: argparse.ArgumentParser, environ=None) -> None:
    environ = os.environ if environ is None else environ
    subparsers = [a for a in parser._actions if isinstance(a, argparse._SubParsersAction)]
    for sp in subparsers:
        for p in sp.choices.values():
            for action in p._actions:
                if not action.option_strings or action.dest == "help":
                    continue
                key = ENV_PREFIX + action.dest.upper()
                if key in environ:
                    raw = environ[key]
                    value = action.type(raw) if action.type else raw
                    if isinstance(action, argparse._AppendAction):
                        value = raw.split(";")
                    action.default = value
                    action.required = False


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except (CLIError, CorpusError, ConfigError, TrainingDivergedError, ValueError, KeyError,
            FileNotFoundError) as e:
        print(f"hierslu {args.command}: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
