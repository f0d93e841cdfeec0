"""Ancestral sampling of documents from a topic subgraph."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch

from lrlm.corpus import EOS
from lrlm.kg_store import RelationEdge, TopicSubgraph
from lrlm.lattice import REL, WORD
from lrlm.model import LRLM, REL_SOURCE, WORD_SOURCE, categorical

_MAX_SPELL_TRIES = 20


@dataclass
class Annotation:
    start: int  # 1-based, inclusive
    end: int
    source: str
    edge: RelationEdge | None = None
    alias_index: int | None = None
    token_id: int | None = None  # word source only

    def to_dict(self) -> dict:
        d = {"start": self.start, "end": self.end, "source": self.source}
        if self.edge is not None:
            d["edge"] = {"subject": self.edge.subject, "type": self.edge.rel_type, "object": self.edge.object}
            d["alias_index"] = self.alias_index
        return d


@dataclass
class SampleResult:
    tokens: list
    annotations: list = field(default_factory=list)
    terminated: bool = False
    log_prob: float = 0.0
    seed: int = 0
    index: int = 0

    @property
    def n_predicted(self) -> int:
        return len(self.tokens) + (1 if self.terminated else 0)

    @property
    def per_token_nll(self) -> float:
        return -self.log_prob / max(self.n_predicted, 1)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "index": self.index,
            "tokens": self.tokens,
            "annotations": [a.to_dict() for a in self.annotations],
            "terminated": self.terminated,
            "log_prob": self.log_prob,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False)

    def display(self) -> str:
        """Text with copied objects bracketed by their relation type."""
        parts = []
        for ann in self.annotations:
            text = " ".join(self.tokens[ann.start - 1:ann.end])
            parts.append(f"{text} [{ann.edge.rel_type}]" if ann.source == REL else text)
        return " ".join(parts)


class _Stepper:
    """Feeds generated tokens through the encoder one step at a time."""

    def __init__(self, model: LRLM):
        self.model = model
        self.h, self.state = model.encoder(torch.zeros(0, dtype=torch.long), None)
        self.h = self.h[-1]

    def feed(self, token_ids):
        states, self.state = self.model.encoder(torch.as_tensor(token_ids, dtype=torch.long), self.state)
        self.h = states[-1]


def _edge_tensors(model: LRLM, subgraph: TopicSubgraph):
    types = torch.tensor([model.index.rel_type(e.rel_type) for e in subgraph.edges], dtype=torch.long)
    objs = torch.tensor([model.index.entity(e.object) for e in subgraph.edges], dtype=torch.long)
    return types, objs


def _alias_logp(model: LRLM, h, edge: RelationEdge, subgraph: TopicSubgraph):
    n = len(subgraph.objects[edge.object].aliases)
    rows = torch.tensor([model.index.alias(edge.object, k) for k in range(n)], dtype=torch.long)
    return model.alias_log_probs(h, rows, torch.ones(n, dtype=torch.bool))


def sample(model: LRLM, subgraph: TopicSubgraph, max_tokens=100, temperature=1.0, seed=0, index=0) -> SampleResult:
    """Generate one document by alternating source, word and relation draws.

    The relation source is masked when the subgraph has no edges. The
    recorded ``log_prob`` is the model probability of the emitted derivation
    at temperature 1 (unmasked source distribution, unconstrained spelling).
    """
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    rng = np.random.default_rng([seed, index])
    vocab = model.vocab
    use_rel = model.config.use_relations and len(subgraph.edges) > 0
    result = SampleResult([], seed=seed, index=index)
    model.eval()
    with torch.no_grad():
        stepper = _Stepper(model)
        types, objs = _edge_tensors(model, subgraph) if use_rel else (None, None)
        while len(result.tokens) < max_tokens:
            h = stepper.h
            src = model.source_log_probs(h) if model.config.use_relations else None
            if use_rel:
                source = REL_SOURCE if categorical(rng, src.numpy(), temperature) == REL_SOURCE else WORD_SOURCE
            else:
                source = WORD_SOURCE
            pos = len(result.tokens) + 1
            if source == WORD_SOURCE:
                lp = model.word_log_probs(h)
                tok_id = categorical(rng, lp.numpy(), temperature)
                step = float(lp[tok_id]) + (float(src[WORD_SOURCE]) if src is not None else 0.0)
                if tok_id == vocab.eos_id:
                    result.log_prob += step
                    result.terminated = True
                    break
                if tok_id == vocab.unk_id:
                    for _ in range(_MAX_SPELL_TRIES):
                        word = model.char_model.sample_spelling(rng, temperature)
                        if word not in vocab and word != EOS:
                            break
                    step += model.char_model.char_log_prob(word)
                else:
                    word = vocab.tokens[tok_id]
                result.log_prob += step
                result.tokens.append(word)
                result.annotations.append(Annotation(pos, pos, WORD, token_id=tok_id))
                stepper.feed([vocab.lookup(word)])
            else:
                rel_lp = model.relation_log_probs(h, types, objs)
                j = categorical(rng, rel_lp.numpy(), temperature)
                edge = subgraph.edges[j]
                a_lp = _alias_logp(model, h, edge, subgraph)
                k = categorical(rng, a_lp.numpy(), temperature)
                alias = subgraph.objects[edge.object].aliases[k]
                result.log_prob += float(src[REL_SOURCE]) + float(rel_lp[j]) + float(a_lp[k])
                result.tokens.extend(alias)
                result.annotations.append(Annotation(pos, pos + len(alias) - 1, REL, edge, k))
                stepper.feed([vocab.lookup(t) for t in alias])
    return result


def score_derivation(model: LRLM, subgraph: TopicSubgraph, result: SampleResult) -> float:
    """Re-score a sampled derivation with a single pass over the emitted tokens."""
    vocab = model.vocab
    ids = [vocab.lookup(t) for t in result.tokens]
    if result.terminated:
        ids.append(vocab.eos_id)
    model.eval()
    with torch.no_grad():
        states, _ = model.encoder(torch.tensor(ids, dtype=torch.long))
        use_rel = model.config.use_relations
        src = model.source_log_probs(states) if use_rel else None
        word_lp = model.word_log_probs(states)
        total = 0.0
        for ann in result.annotations:
            h = states[ann.start - 1]
            if ann.source == WORD:
                tid = ann.token_id if ann.token_id is not None else ids[ann.start - 1]
                total += float(word_lp[ann.start - 1, tid])
                if tid == vocab.unk_id:
                    total += model.char_model.char_log_prob(result.tokens[ann.start - 1])
                if use_rel:
                    total += float(src[ann.start - 1, WORD_SOURCE])
            else:
                types, objs = _edge_tensors(model, subgraph)
                j = subgraph.index_of(ann.edge)
                total += float(src[ann.start - 1, REL_SOURCE])
                total += float(model.relation_log_probs(h, types, objs)[j])
                total += float(_alias_logp(model, h, ann.edge, subgraph)[ann.alias_index])
        if result.terminated:
            n = len(result.tokens)
            total += float(word_lp[n, vocab.eos_id])
            if use_rel:
                total += float(src[n, WORD_SOURCE])
    return total


def best_of(model: LRLM, subgraph: TopicSubgraph, k=10, seed=0, max_tokens=100, temperature=1.0) -> SampleResult:
    """Draw ``k`` samples and keep the one with the lowest per-token NLL."""
    if k < 1:
        raise ValueError("k must be >= 1")
    draws = [sample(model, subgraph, max_tokens, temperature, seed, i) for i in range(k)]
    return min(draws, key=lambda s: (s.per_token_nll, s.index))


def greedy(model: LRLM, subgraph: TopicSubgraph, max_tokens=100) -> SampleResult:
    """Zero-temperature limit of :func:`sample`."""
    return sample(model, subgraph, max_tokens, temperature=1e-12, seed=0)


def is_full_mention(sample_result: SampleResult, ann: Annotation, subgraph: TopicSubgraph) -> bool:
    alias = subgraph.objects[ann.edge.object].aliases[ann.alias_index]
    return tuple(sample_result.tokens[ann.start - 1:ann.end]) == tuple(alias)


def write_samples(samples, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(s.to_json() + "\n")

