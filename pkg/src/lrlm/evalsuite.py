"""Open-vocabulary perplexity, UPP, mention statistics, posterior annotation and
subgraph-size binning."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from lrlm import lattice as lat_mod
from lrlm.model import LRLM, PreparedDoc, score_document


@dataclass
class EvalReport:
    token_count: int
    total_nll: float
    perplexity: float
    upp: float | None = None
    oov_vocab_size: int | None = None
    doc_ids: list = field(default_factory=list)
    word_avg_logprob: list = field(default_factory=list)
    relation_counts: list = field(default_factory=list)
    bins: list | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def write_csv(self, path) -> None:
        """Per-document rows: id, relation count, word-average log-probability."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["doc_id", "relations", "word_avg_logprob"])
            for row in zip(self.doc_ids, self.relation_counts, self.word_avg_logprob):
                writer.writerow([row[0], row[1], repr(row[2])])


def oov_types(preps) -> set[str]:
    """Distinct out-of-vocabulary spellings in the evaluated corpus."""
    return {s for p in preps for s, o in zip(p.spellings, p.oov_mask) if o}


def perplexity(model: LRLM, preps, with_upp=True, bins: int | None = None) -> EvalReport:
    """Token-level perplexity over every token including EOS.

    Unknown words are charged ``P(UNK) * P_char(spelling)``; documents are
    scored by their lattice marginal.
    """
    model.eval()
    total, count = 0.0, 0
    ids, avg, rels = [], [], []
    for prep in preps:
        _, _, nll = score_document(model, prep)
        total += nll
        count += prep.length
        ids.append(prep.doc.id)
        avg.append(-nll / prep.length)
        rels.append(len(prep.subgraph.edges))
    report = EvalReport(count, total, math.exp(total / count), doc_ids=ids, word_avg_logprob=avg, relation_counts=rels)
    if with_upp:
        report.upp, report.oov_vocab_size = _upp(model, preps)
    if bins is not None:
        report.bins = bin_by_relations(list(zip(rels, avg)), bins)
    return report


def _upp(model: LRLM, preps) -> tuple[float, int]:
    v_out = len(oov_types(preps))
    penalty = -math.log(v_out) if v_out else 0.0
    total, count = 0.0, 0
    for prep in preps:
        unk = np.where(prep.oov_mask, penalty, 0.0)
        _, _, nll = score_document(model, prep, unk_logp=unk)
        total += nll
        count += prep.length
    return math.exp(total / count), v_out


def upp(model: LRLM, preps) -> float:
    """Perplexity with each OOV token charged ``P(UNK) / |V_out|`` instead of its spelling."""
    model.eval()
    return _upp(model, preps)[0]


# ---------------------------------------------------------------------------
# mentions


@dataclass
class MentionStats:
    partial: float
    full: float
    valid: float | None = None
    invalid: float | None = None


def _rel_mentions(sample):
    for ann in sample.annotations:
        if ann.source == lat_mod.REL:
            yield ann, tuple(sample.tokens[ann.start - 1:ann.end])


def _is_subphrase(short, long) -> bool:
    n = len(short)
    return 0 < n < len(long) and any(tuple(long[i:i + n]) == short for i in range(len(long) - n + 1))


def mention_stats(samples, aliases_of, judgments=None) -> MentionStats:
    """Average partial/full mention counts per sample.

    ``aliases_of(annotation)`` returns the alias token tuple the annotation
    claims to copy. ``judgments`` is an optional list (one entry per sample)
    of per-mention validity booleans supplied from outside.
    """
    if not samples:
        return MentionStats(0.0, 0.0, 0.0 if judgments is not None else None, 0.0 if judgments is not None else None)
    partial = full = 0
    for sample in samples:
        for ann, toks in _rel_mentions(sample):
            alias = tuple(aliases_of(ann))
            if toks == alias:
                full += 1
            elif _is_subphrase(toks, alias):
                partial += 1
    n = len(samples)
    stats = MentionStats(partial / n, full / n)
    if judgments is not None:
        flat = [bool(v) for per in judgments for v in per]
        stats.valid = sum(flat) / n
        stats.invalid = (len(flat) - sum(flat)) / n
    return stats


def gold_mention_stats(gold) -> MentionStats:
    """``gold``: one list of gold mentions per article, all full and valid."""
    if not gold:
        return MentionStats(0.0, 0.0, 0.0, 0.0)
    full = sum(len(g) for g in gold) / len(gold)
    return MentionStats(0.0, full, full, 0.0)


def load_judgments(path) -> list[list[bool]]:
    return [[bool(v) for v in per] for per in json.loads(Path(path).read_text())]


# ---------------------------------------------------------------------------
# posterior annotation


@dataclass
class AnnotationBlock:
    interval: tuple[int, int]
    context: str
    rows: list[tuple[str, float]]


def default_intervals(prep: PreparedDoc) -> list[tuple[int, int]]:
    return sorted({(m.start, m.end) for m in prep.matches})


def annotate(model: LRLM, prep: PreparedDoc, intervals=None, context=4) -> list[AnnotationBlock]:
    """Posterior over generation patterns for each interval (relation types and ``word``)."""
    lat, pot, _ = score_document(model, prep)
    chart = lat_mod.forward_backward(lat, pot)
    toks = list(prep.doc.tokens) + ["<eos>"]
    blocks = []
    for l, r in intervals if intervals is not None else default_intervals(prep):
        rows = lat_mod.span_report(lat, pot, chart, (l, r))
        left = toks[max(0, l - 1 - context):l - 1]
        right = toks[r:r + context]
        ctx = " ".join([*left, "[", *toks[l - 1:r], "]", *right])
        blocks.append(AnnotationBlock((l, r), ctx, rows))
    return blocks


def format_annotation(blocks, title=None) -> str:
    lines = []
    if title:
        lines.append(f"Title: {title}")
    for b in blocks:
        lines.append("-" * 60)
        lines.append(f"... {b.context} ...")
        width = max(len(p) for p, _ in b.rows)
        for pattern, prob in b.rows:
            lines.append(f"    {pattern:>{width}}  {prob:.4f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# subgraph-size bins


def bin_by_relations(items, bins: int) -> list[dict]:
    """Equal-count bins of ``(relation_count, word_avg_logprob)`` pairs.

    Documents with the same relation count always share a bin, so fewer bins
    than requested may come back.
    """
    items = list(items)
    if len(items) < bins:
        raise ValueError(f"{len(items)} documents cannot fill {bins} bins")
    counts = np.array([c for c, _ in items])
    values = np.array([v for _, v in items], dtype=np.float64)
    order = np.argsort(counts, kind="stable")
    sorted_counts = counts[order]
    first_rank = np.searchsorted(sorted_counts, counts, side="left")
    assign = (first_rank * bins) // len(items)
    out = []
    for b in sorted(set(assign.tolist())):
        sel = assign == b
        out.append({
            "bin": len(out),
            "min_relations": int(counts[sel].min()),
            "max_relations": int(counts[sel].max()),
            "count": int(sel.sum()),
            "mean_word_avg_logprob": float(values[sel].mean()),
        })
    return out


def write_bins_csv(bins, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["bin", "min_relations", "max_relations", "count", "mean_word_avg_logprob"])
        writer.writeheader()
        writer.writerows(bins)


def plot_bins_svg(bin_tables: dict, path) -> None:
    """Grouped bar chart, one series per model."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    names = list(bin_tables)
    width = 0.8 / max(len(names), 1)
    for i, name in enumerate(names):
        rows = bin_tables[name]
        xs = np.arange(len(rows)) + i * width
        ax.bar(xs, [r["mean_word_avg_logprob"] for r in rows], width=width, label=name)
    first = bin_tables[names[0]] if names else []
    ax.set_xticks(np.arange(len(first)) + width * (len(names) - 1) / 2)
    ax.set_xticklabels([f"{r['min_relations']}-{r['max_relations']}" for r in first])
    ax.set_xlabel("relations per article")
    ax.set_ylabel("word-average log-prob")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
