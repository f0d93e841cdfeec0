"""Command line: ``lrlm {prepare,train-char,train,eval,sample,annotate}``.

Every subcommand accepts ``--config FILE`` (JSON); flags given on the command
line override fields of the file. The effective configuration is written to
``<out>/<subcommand>.config.json``. Set ``LRLM_LOG_LEVEL`` (e.g. ``INFO``) for
progress output on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from lrlm import evalsuite
from lrlm.corpus import Vocabulary, build_vocabulary, dataset_stats, load_corpus, match_spans, prune_overlaps
from lrlm.data.toy import TOY_DIR
from lrlm.estimator import LatentRelationLM, load_char_model, save_char_model
from lrlm.kg_store import extract_star_subgraph, load_kg
from lrlm.model import train_char_model
from lrlm.sampler import best_of, sample, write_samples
from lrlm.training import write_history

logger = logging.getLogger("lrlm")

STATS_COLUMNS = ["Doc", "Vocab", "Rel/Ent", "Tok/Doc", "Ment/Doc"]

_TOY = {
    "kg": str(TOY_DIR / "kg.json"),
    "train": str(TOY_DIR / "train.jsonl"),
    "dev": str(TOY_DIR / "dev.jsonl"),
    "test": str(TOY_DIR / "test.jsonl"),
    "corpus": str(TOY_DIR / "test.jsonl"),
}

# Defaults per subcommand; a config file and then explicit flags override these.
DEFAULTS = {
    "prepare": {"min_freq": 3, "max_vocab": None, "dev": None, "test": None},
    "train-char": {"char_embed_dim": 16, "char_hidden_dim": 48, "char_epochs": 30, "char_lr": 5e-3},
    "train": {
        "vocab": None,
        "use_relations": True,
        "embed_dim": 32,
        "hidden_dim": 64,
        "num_layers": 1,
        "bottleneck_dim": 32,
        "relation_bottleneck_dim": 16,
        "entity_dim": 16,
        "type_dim": 16,
        "alias_dim": 16,
        "dropout": 0.1,
        "freeze_alias_features": False,
        "min_freq": 3,
        "entity_min_count": 2,
        "window": 150,
        "lr": 3e-3,
        "decay": 0.9,
        "batch_size": 1,
        "max_epochs": 15,
        "patience": None,
    },
    "eval": {"bins": None},
    "sample": {"topics": None, "n": 1, "max_tokens": 100, "temperature": 1.0, "best_of": None},
    "annotate": {"doc_ids": None, "context": 4},
}

# Input paths each subcommand reads; all must exist before work starts.
INPUTS = {
    "prepare": ["kg", "train", "dev", "test"],
    "train-char": ["train"],
    "train": ["kg", "train", "dev", "char_model", "vocab"],
    "eval": ["kg", "corpus", "model", "char_model"],
    "sample": ["kg", "model", "char_model"],
    "annotate": ["kg", "corpus", "model", "char_model"],
}

REQUIRED = {
    "prepare": ["kg", "train", "out"],
    "train-char": ["train", "out", "seed"],
    "train": ["kg", "train", "dev", "char_model", "out", "seed"],
    "eval": ["kg", "corpus", "model", "char_model", "out"],
    "sample": ["kg", "model", "char_model", "out", "seed"],
    "annotate": ["kg", "corpus", "model", "char_model", "out"],
}


class ConfigError(Exception):
    pass


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lrlm", description="Latent relation language model toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    S = argparse.SUPPRESS

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, argument_default=S)
        p.add_argument("--config", help="JSON file of option values")
        p.add_argument("--out", help="output directory")
        p.add_argument("--toy", action="store_true", help="fill unset data paths from the bundled toy dataset")
        return p

    p = add("prepare", "build vocabulary, span matches and dataset statistics")
    p.add_argument("--kg")
    p.add_argument("--train")
    p.add_argument("--dev")
    p.add_argument("--test")
    p.add_argument("--min-freq", dest="min_freq", type=int)
    p.add_argument("--max-vocab", dest="max_vocab", type=int)

    p = add("train-char", "train the character-level spelling model")
    p.add_argument("--train")
    p.add_argument("--seed", type=int)
    p.add_argument("--char-embed-dim", dest="char_embed_dim", type=int)
    p.add_argument("--char-hidden-dim", dest="char_hidden_dim", type=int)
    p.add_argument("--char-epochs", dest="char_epochs", type=int)
    p.add_argument("--char-lr", dest="char_lr", type=float)

    p = add("train", "train a relation (or word-only) language model")
    for flag in ("kg", "train", "dev", "vocab"):
        p.add_argument(f"--{flag}")
    p.add_argument("--char-model", dest="char_model")
    p.add_argument("--seed", type=int)
    p.add_argument("--use-relations", dest="use_relations", type=_bool)
    p.add_argument("--freeze-alias-features", dest="freeze_alias_features", type=_bool)
    p.add_argument("--vanilla", dest="use_relations", action="store_false", help="word-only baseline")
    for flag in ("embed-dim", "hidden-dim", "num-layers", "bottleneck-dim", "relation-bottleneck-dim",
                 "entity-dim", "type-dim", "alias-dim", "min-freq", "entity-min-count", "window",
                 "batch-size", "max-epochs", "patience"):
        p.add_argument(f"--{flag}", dest=flag.replace("-", "_"), type=int)
    for flag in ("dropout", "lr", "decay"):
        p.add_argument(f"--{flag}", type=float)

    p = add("eval", "perplexity, UPP and subgraph-size bins")
    p.add_argument("--kg")
    p.add_argument("--corpus")
    p.add_argument("--model")
    p.add_argument("--char-model", dest="char_model")
    p.add_argument("--bins", type=int)

    p = add("sample", "draw documents conditioned on topic subgraphs")
    p.add_argument("--kg")
    p.add_argument("--model")
    p.add_argument("--char-model", dest="char_model")
    p.add_argument("--topic", dest="topics", action="append", help="topic entity id (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int, help="samples per topic")
    p.add_argument("--max-tokens", dest="max_tokens", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--best-of", dest="best_of", type=int, help="keep the best of k draws per sample")

    p = add("annotate", "posterior generation patterns over matched spans")
    p.add_argument("--kg")
    p.add_argument("--corpus")
    p.add_argument("--model")
    p.add_argument("--char-model", dest="char_model")
    p.add_argument("--doc-id", dest="doc_ids", action="append")
    p.add_argument("--context", type=int)
    return parser


def resolve_config(command: str, args: dict) -> dict:
    """Merge defaults, the ``--config`` file and explicit flags, then check paths."""
    cfg = dict(DEFAULTS[command])
    path = args.pop("config", None)
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        cfg.update({k.replace("-", "_"): v for k, v in loaded.items()})
    if args.pop("toy", False) or cfg.pop("toy", False):
        for key, value in _TOY.items():
            if key in INPUTS[command] and cfg.get(key) is None:
                cfg[key] = value
    cfg.update(args)
    missing = [k for k in REQUIRED[command] if cfg.get(k) is None]
    if missing:
        raise ConfigError(f"missing required option(s): {', '.join(missing)}")
    for key in INPUTS[command]:
        if cfg.get(key) is not None and not Path(cfg[key]).exists():
            raise FileNotFoundError(f"{key}: no such file {cfg[key]}")
    return cfg


def _echo_config(command: str, cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{command}.config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return out


def _load_model(cfg) -> tuple:
    kg = load_kg(cfg["kg"])
    est = LatentRelationLM.load(cfg["model"], kg, load_char_model(cfg["char_model"]))
    return kg, est


# ---------------------------------------------------------------------------
# subcommands


def cmd_prepare(cfg, out: Path) -> None:
    kg = load_kg(cfg["kg"])
    splits = {"train": load_corpus(cfg["train"])}
    for name in ("dev", "test"):
        if cfg.get(name):
            splits[name] = load_corpus(cfg[name])
    vocab = build_vocabulary(splits["train"], cfg["min_freq"], cfg["max_vocab"])
    vocab.save(out / "vocab.txt")
    rows = []
    for name, docs in splits.items():
        with open(out / f"matches.{name}.jsonl", "w", encoding="utf-8") as fh:
            for doc in docs:
                sub = extract_star_subgraph(kg, doc.topic)
                kept = prune_overlaps(match_spans(doc, sub), sub)
                fh.write(json.dumps({"id": doc.id, "matches": [_match_dict(m) for m in kept]}) + "\n")
        stats = dataset_stats(docs, kg, vocab)
        rows.append([name] + [stats[c] for c in STATS_COLUMNS])
    with open(out / "stats.tsv", "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t")
        writer.writerow(["split", *STATS_COLUMNS])
        for row in rows:
            writer.writerow([row[0], row[1], row[2], *(f"{v:.2f}" for v in row[3:])])


def _match_dict(m) -> dict:
    return {
        "start": m.start,
        "end": m.end,
        "subject": m.edge.subject,
        "type": m.edge.rel_type,
        "object": m.edge.object,
        "alias_index": m.alias_index,
    }


def cmd_train_char(cfg, out: Path) -> None:
    docs = load_corpus(cfg["train"])
    words = {w for d in docs for w in d.tokens}
    cm = train_char_model(
        words,
        cfg["char_embed_dim"],
        cfg["char_hidden_dim"],
        epochs=cfg["char_epochs"],
        lr=cfg["char_lr"],
        seed=cfg["seed"],
    )
    save_char_model(cm, out / "char_model.ckpt")


def cmd_train(cfg, out: Path) -> None:
    kg = load_kg(cfg["kg"])
    train_docs, dev_docs = load_corpus(cfg["train"]), load_corpus(cfg["dev"])
    params = {k: cfg[k] for k in DEFAULTS["train"] if k != "vocab"}
    est = LatentRelationLM(**params, random_state=cfg["seed"])
    vocab = Vocabulary.load(cfg["vocab"]) if cfg.get("vocab") else None
    est.fit(train_docs, kg, dev=dev_docs, char_model=load_char_model(cfg["char_model"]), vocab=vocab)
    est.save(out / "model.ckpt")
    write_history(est.history_, out / "history.csv")


def cmd_eval(cfg, out: Path) -> None:
    kg, est = _load_model(cfg)
    report = est.perplexity(load_corpus(cfg["corpus"]), bins=cfg["bins"])
    report.write_json(out / "eval.json")
    report.write_csv(out / "per_doc.csv")
    if report.bins is not None:
        evalsuite.write_bins_csv(report.bins, out / "bins.csv")
    print(f"ppl {report.perplexity:.4f} upp {report.upp:.4f} tokens {report.token_count}")


def cmd_sample(cfg, out: Path) -> None:
    kg, est = _load_model(cfg)
    topics = cfg["topics"] or sorted({e.subject for e in kg.edges if e.subject != e.object})[:1]
    draws = []
    for t_i, topic in enumerate(topics):
        sub = extract_star_subgraph(kg, topic)
        for i in range(cfg["n"]):
            index = t_i * cfg["n"] + i
            if cfg["best_of"]:
                s = best_of(est.model_, sub, cfg["best_of"], cfg["seed"] + index, cfg["max_tokens"], cfg["temperature"])
            else:
                s = sample(est.model_, sub, cfg["max_tokens"], cfg["temperature"], cfg["seed"], index)
            draws.append(s)
    write_samples(draws, out / "samples.jsonl")


def cmd_annotate(cfg, out: Path) -> None:
    kg, est = _load_model(cfg)
    docs = load_corpus(cfg["corpus"])
    if cfg["doc_ids"]:
        wanted = set(cfg["doc_ids"])
        docs = [d for d in docs if d.id in wanted]
        if not docs:
            raise KeyError(f"no documents with ids {sorted(wanted)}")
    text, records = [], []
    for doc in docs:
        prep = est.prepare([doc])[0]
        blocks = evalsuite.annotate(est.model_, prep, context=cfg["context"])
        title = " ".join(kg.entities[doc.topic].canonical)
        text.append(evalsuite.format_annotation(blocks, title))
        records.append({
            "id": doc.id,
            "spans": [{"start": b.interval[0], "end": b.interval[1], "rows": [[p, q] for p, q in b.rows]} for b in blocks],
        })
    (out / "annotations.txt").write_text("\n".join(text))
    with open(out / "annotations.jsonl", "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


COMMANDS = {
    "prepare": cmd_prepare,
    "train-char": cmd_train_char,
    "train": cmd_train,
    "eval": cmd_eval,
    "sample": cmd_sample,
    "annotate": cmd_annotate,
}


def run(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("LRLM_LOG_LEVEL", "WARNING").upper(), format="%(name)s: %(message)s")
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args = vars(ns)
    command = args.pop("command")
    try:
        cfg = resolve_config(command, args)
        out = _echo_config(command, cfg)
        COMMANDS[command](cfg, out)
    except Exception as exc:  # reported as one machine-readable line
        logger.debug("failure", exc_info=True)
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        print(json.dumps({"error": type(exc).__name__, "command": command, "message": str(msg)}), file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
