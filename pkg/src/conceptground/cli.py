"""``conceptground`` command line.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numeric error.
Diagnostics go to stderr prefixed ``error[usage]:``, ``error[data]:`` or
``error[numeric]:``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import ConfigError, DataError, GroundingError, NumericError
from .corpus import ChannelStats, GenSpec, compute_stats, generate_corpus, read_corpus, rng_stream
from .evaluate import (
    ablation_run,
    baseline_center,
    baseline_random,
    baseline_visual,
    check_compatible,
    concept_report,
    evaluate,
    evaluate_single_noun,
    pointing_game,
    random_expectation,
    single_noun_report,
)
from .grounder import attention_argmax_point, attention_forward, export_heatmap
from .train import TrainConfig, load_checkpoint, train

log = logging.getLogger("conceptground")

DEFAULT_ABLATION = {"modes": ["ic", "cc", "icc"], "ks": [3, 5], "seeds": [0, 1, 2, 3, 4], "workers": 1}
DEFAULT_TRIALS = 10000


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _load_json(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno} (char {exc.pos}): {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return doc


def canonical_json(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def resolve_gen_config(args) -> dict:
    doc = GenSpec().to_dict()
    doc["seed"] = 0
    if args.spec:
        doc.update(_load_json(args.spec))
    if args.seed is not None:
        doc["seed"] = args.seed
    seed = doc.pop("seed")
    doc = GenSpec.from_dict(doc).to_dict()
    doc["seed"] = int(seed)
    return doc


def resolve_run_config(args) -> dict:
    """Defaults < config file < command-line flags."""
    doc = TrainConfig().to_dict()
    doc["ablation"] = dict(DEFAULT_ABLATION)
    doc["trials"] = DEFAULT_TRIALS
    if getattr(args, "config", None):
        user = _load_json(args.config)
        if "ablation" in user:
            unknown = set(user["ablation"]) - set(DEFAULT_ABLATION)
            if unknown:
                raise ConfigError(f"unknown ablation fields: {sorted(unknown)}")
            doc["ablation"].update(user.pop("ablation"))
        doc.update(user)
    overrides = {
        "mode": getattr(args, "mode", None),
        "k": getattr(args, "k", None),
        "steps": getattr(args, "steps", None),
        "seed": getattr(args, "seed", None),
        "corpus": getattr(args, "corpus", None),
        "stats": getattr(args, "stats", None),
        "checkpoint": getattr(args, "checkpoint", None),
        "trials": getattr(args, "trials", None),
    }
    doc.update({k: v for k, v in overrides.items() if v is not None})
    # validate by construction
    train_config(doc)
    return doc


def train_config(doc: dict) -> TrainConfig:
    fields = {k: v for k, v in doc.items() if k not in ("ablation", "trials")}
    return TrainConfig.from_dict(fields)


def _require(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if not getattr(args, n, None)]
    if missing:
        raise UsageError(f"{args.command}: missing required flag(s) {' '.join(missing)}")


def _load_stats(doc: dict, corpus):
    if doc.get("stats"):
        return ChannelStats.load(doc["stats"])
    return compute_stats(corpus.split("train"))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_corpus(args, out) -> None:
    doc = resolve_gen_config(args)
    if args.print_config:
        out.write(canonical_json(doc))
        return
    _require(args, "out")
    seed = doc.pop("seed")
    generate_corpus(GenSpec.from_dict(doc), seed, args.out)
    log.info("wrote %s", args.out)


def cmd_stats(args, out) -> None:
    _require(args, "corpus", "out")
    corpus = read_corpus(args.corpus)
    compute_stats(corpus.split("train")).save(args.out)


def cmd_train(args, out) -> None:
    doc = resolve_run_config(args)
    if args.out:
        doc["checkpoint"] = args.out
    if args.print_config:
        out.write(canonical_json(doc))
        return
    cfg = train_config(doc)
    if not cfg.corpus or not cfg.stats or not cfg.checkpoint:
        raise UsageError("train: need --corpus, --stats and --checkpoint/--out (flags or config)")
    if cfg.log is None:
        cfg.log = str(cfg.checkpoint) + ".log.csv"
    corpus = read_corpus(cfg.corpus)
    stats = ChannelStats.load(cfg.stats)
    _, tlog = train(cfg, corpus, stats)
    final = tlog.records[-1]["loss"] if tlog.records else float("nan")
    out.write(json.dumps({"checkpoint": cfg.checkpoint, "steps": cfg.steps, "final_loss": final}) + "\n")


def cmd_eval(args, out) -> None:
    doc = resolve_run_config(args)
    if args.print_config:
        out.write(canonical_json(doc))
        return
    _require(args, "checkpoint", "corpus", "stats", "out")
    params, _ = load_checkpoint(args.checkpoint)
    corpus = read_corpus(args.corpus)
    stats = ChannelStats.load(args.stats)
    result = evaluate(params, corpus, stats)
    stem = Path(args.out)
    result.write_csv(stem)
    result.write_records(stem.with_suffix(".instances.jsonl"))
    summary = {"accuracy": result.accuracy, "hits": result.hits, "misses": result.misses}
    try:
        _, r = concept_report(result, stem.with_suffix(".concepts.csv"))
        summary["area_correlation"] = r
    except DataError as exc:
        log.warning("concept report skipped: %s", exc)
    if args.single_noun:
        single = evaluate_single_noun(params, corpus, stats, rng_stream(doc["seed"], "single-noun"))
        single.write_records(stem.with_suffix(".single_noun.jsonl"))
        report = single_noun_report(result, single)
        summary.update({k: report[k] for k in ("single_noun_accuracy", "delta")})
    out.write(json.dumps(summary) + "\n")


def cmd_ablate(args, out) -> None:
    doc = resolve_run_config(args)
    if args.print_config:
        out.write(canonical_json(doc))
        return
    _require(args, "corpus", "stats", "out")
    corpus = read_corpus(doc["corpus"])
    stats = ChannelStats.load(doc["stats"])
    ab = doc["ablation"]
    table = ablation_run(train_config(doc), corpus, stats, ab["modes"], ab["ks"], ab["seeds"],
                         workers=int(ab.get("workers", 1)))
    table.write_csv(args.out)
    out.write(table.format() + "\n")


def cmd_ground(args, out) -> None:
    doc = resolve_run_config(args)
    if args.print_config:
        out.write(canonical_json(doc))
        return
    _require(args, "checkpoint", "corpus", "id")
    params, _ = load_checkpoint(args.checkpoint)
    corpus = read_corpus(args.corpus)
    check_compatible(params, corpus.header)
    stats = _load_stats(doc, corpus)
    inst = corpus.by_id(args.id)
    h = corpus.header
    attn = attention_forward(stats.standardize_features(inst.features), stats.standardize_text(inst.embedding), params)
    point = attention_argmax_point(attn, h.image_h, h.image_w)
    hit = pointing_game(point, inst.gt_boxes)
    if args.heatmap:
        export_heatmap(attn, int(h.image_h), int(h.image_w), args.heatmap)
    out.write(json.dumps({"id": inst.id, "point": list(point), "hit": hit, "heatmap": args.heatmap}) + "\n")


def cmd_baselines(args, out) -> None:
    doc = resolve_run_config(args)
    if args.print_config:
        out.write(canonical_json(doc))
        return
    _require(args, "corpus")
    corpus = read_corpus(args.corpus)
    rand = baseline_random(corpus, int(doc["trials"]), rng_stream(doc["seed"], "random-baseline"))
    rows = {
        "random": rand.accuracy,
        "random_expected": random_expectation(corpus.split("test"), corpus.header),
        "center": baseline_center(corpus).accuracy,
        "visual": baseline_visual(corpus).accuracy,
    }
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("baseline,accuracy\n")
            for name, acc in rows.items():
                fh.write(f"{name},{acc!r}\n")
    out.write(json.dumps(rows) + "\n")


COMMANDS = {
    "gen-corpus": (cmd_gen_corpus, ["spec", "seed", "out", "print_config"]),
    "stats": (cmd_stats, ["corpus", "out"]),
    "train": (cmd_train, ["config", "corpus", "stats", "checkpoint", "out", "mode", "k", "steps", "seed", "print_config"]),
    "eval": (cmd_eval, ["config", "checkpoint", "corpus", "stats", "out", "seed", "single_noun", "print_config"]),
    "ablate": (cmd_ablate, ["config", "corpus", "stats", "out", "k", "steps", "seed", "print_config"]),
    "ground": (cmd_ground, ["config", "checkpoint", "corpus", "stats", "id", "heatmap", "print_config"]),
    "baselines": (cmd_baselines, ["config", "corpus", "out", "trials", "seed", "print_config"]),
}

FLAGS = {
    "spec": dict(help="generation spec JSON"),
    "config": dict(help="run configuration JSON"),
    "seed": dict(type=int, help="master seed"),
    "out": dict(help="output path"),
    "corpus": dict(help="corpus JSON-Lines file"),
    "stats": dict(help="channel statistics JSON"),
    "checkpoint": dict(help="checkpoint file"),
    "mode": dict(choices=["ic", "cc", "icc"], help="surrogate loss"),
    "k": dict(type=int, help="concept batch size"),
    "steps": dict(type=int, help="optimizer steps"),
    "trials": dict(type=int, help="random-baseline trials"),
    "id": dict(help="instance id"),
    "heatmap": dict(help="PGM heatmap output path"),
    "print_config": dict(action="store_true", help="print the resolved configuration and exit"),
    "single_noun": dict(action="store_true", help="also evaluate with single-noun phrases"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="conceptground", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, flags) in COMMANDS.items():
        p = sub.add_parser(name)
        for flag in flags:
            p.add_argument("--" + flag.replace("_", "-"), dest=flag, **FLAGS[flag])
    return parser


def run(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        err.write(f"error[usage]: {exc}\n")
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=err, format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command][0](args, out)
    except UsageError as exc:
        err.write(f"error[usage]: {exc}\n")
        return 1
    except (NumericError, FloatingPointError) as exc:
        err.write(f"error[numeric]: {exc}\n")
        return 3
    except (GroundingError, OSError) as exc:
        err.write(f"error[data]: {exc}\n")
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
