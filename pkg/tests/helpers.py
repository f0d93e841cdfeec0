"""Fixtures and independent reference implementations shared by the tests."""

from __future__ import annotations

import math

import numpy as np
import torch

from lrlm.corpus import Document, Vocabulary
from lrlm.kg_store import Entity, KnowledgeGraph, RelationEdge, extract_star_subgraph
from lrlm.lattice import ArcPotentials, Lattice, RelArc
from lrlm.model import LRLM, CharModel, EntityIndex, ModelConfig


def random_lattice(rng: np.random.Generator, n_max=8, max_arcs=4, dup_rate=0.3):
    """Random lattice with overlapping and duplicate-span relation arcs."""
    N = int(rng.integers(1, n_max + 1))
    arcs = []
    if N > 1:
        for _ in range(int(rng.integers(0, max_arcs + 1))):
            if arcs and rng.random() < dup_rate:
                src = arcs[int(rng.integers(len(arcs)))]
                l, r = src.start, src.end
            else:
                l = int(rng.integers(1, N))
                r = int(rng.integers(l, N))
            arcs.append(RelArc(l, r, None, len(arcs)))
    pot = ArcPotentials(rng.uniform(-4.0, -0.05, N), rng.uniform(-4.0, -0.05, len(arcs)))
    return Lattice(N, arcs), pot


def ref_logsumexp(xs) -> float:
    xs = list(xs)
    if not xs:
        return -math.inf
    m = max(xs)
    return m + math.log(math.fsum(math.exp(x - m) for x in xs))


def brute_derivations(lat: Lattice, pot: ArcPotentials):
    """Tilings as tuples of arc keys ``('w', i)`` / ``('r', j)``, independent of the library DFS."""
    out = []

    def go(pos, acc, score):
        if pos > lat.N:
            out.append((tuple(acc), score))
            return
        go(pos + 1, acc + [("w", pos)], score + pot.word_logp[pos - 1])
        for j, arc in enumerate(lat.rel_arcs):
            if arc.start == pos:
                go(arc.end + 1, acc + [("r", j)], score + pot.rel_logp[j])

    go(1, [], 0.0)
    return out


def key_span(lat: Lattice, key):
    kind, idx = key
    if kind == "w":
        return idx, idx
    arc = lat.rel_arcs[idx]
    return arc.start, arc.end


# ---------------------------------------------------------------------------
# a tiny fully specified LRLM


TINY_WORDS = ["obj0", "ob0", "x", "obj1", "ob1", "obj2", "ob2", "obj3", "ob3", "obj4", "ob4",
              "the", "a", "is", "of", "in", "and", "."]


def tiny_kg(n_edges=5, n_alias=2):
    """Topic ``s`` with ``n_edges`` edges; ``t1`` reaches both ``o1`` and ``o0``."""
    ents = {"s": Entity("s", (("s",),))}
    for i in range(max(n_edges - 1, 1)):
        aliases = ((f"obj{i}",), (f"ob{i}", "x"), (f"o{i}z",))[:n_alias]
        ents[f"o{i}"] = Entity(f"o{i}", aliases)
    edges = [RelationEdge("s", f"t{i}", f"o{i}") for i in range(max(n_edges - 1, 1))]
    if n_edges > 1:
        edges.append(RelationEdge("s", "t1", "o0"))
    return KnowledgeGraph(ents, edges[:n_edges])


def tiny_model(D=8, K=4, L=20, n_edges=5, n_alias=2, seed=0, use_relations=True, dropout=0.0):
    torch.manual_seed(seed)
    vocab = Vocabulary(["<unk>", "<eos>", *TINY_WORDS[: L - 2]])
    kg = tiny_kg(n_edges, n_alias)
    ents = sorted(kg.entities)
    index = EntityIndex(
        ents,
        sorted(kg.relation_types),
        [(e, k) for e in ents for k in range(len(kg.entities[e].aliases))],
    )
    char_model = CharModel("abcdefghijklmnopqrstuvwxyz0123456789", embed_dim=4, hidden_dim=6).freeze()
    cfg = ModelConfig(
        vocab_size=vocab.size,
        embed_dim=6,
        hidden_dim=D,
        bottleneck_dim=K,
        relation_bottleneck_dim=4,
        entity_dim=4,
        type_dim=4,
        alias_dim=4,
        dropout=dropout,
        use_relations=use_relations,
    )
    model = LRLM(cfg, vocab, index, char_model)
    with torch.no_grad():  # make gradients of every group visibly non-zero
        for p in model.parameters():
            p.add_(0.3 * torch.randn_like(p))
    model.eval()
    return model, kg


def tiny_doc(tokens=("obj0", "the", "ob1", "x", "qq", "."), doc_id="d0"):
    return Document(doc_id, "s", list(tokens))


def tiny_prep(model, kg, doc=None):
    doc = doc or tiny_doc()
    return model.prepare(doc, extract_star_subgraph(kg, doc.topic))
