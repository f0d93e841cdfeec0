"""Probability heads of the latent relation LM, the character-level spelling model,
and the glue that turns a document into lattice potentials."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from lrlm import lattice as lat_mod
from lrlm.backbone import DTYPE, BottleneckLinear, RecurrentEncoder
from lrlm.corpus import Document, Vocabulary, encode, match_spans
from lrlm.exceptions import EmptyEdgeListError, MissingSpellingError
from lrlm.kg_store import KnowledgeGraph, RelationEdge, TopicSubgraph, extract_star_subgraph

REL_SOURCE = 0
WORD_SOURCE = 1


# ---------------------------------------------------------------------------
# character model


class CharModel(nn.Module):
    """Single-layer LSTM over characters used to spell out unknown words.

    Output symbols: 0 = end-of-word, 1 = unknown character, 2.. = characters.
    The begin-of-word symbol is input-only.
    """

    EOW = 0
    UNK = 1

    def __init__(self, chars, embed_dim=16, hidden_dim=48):
        super().__init__()
        self.chars = sorted(set(chars))
        self.char_id = {c: i + 2 for i, c in enumerate(self.chars)}
        self.n_out = len(self.chars) + 2
        self.bow = self.n_out
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.embedding = nn.Embedding(self.n_out + 1, embed_dim, dtype=DTYPE)
        self.lstm = nn.LSTM(embed_dim, hidden_dim, batch_first=True, dtype=DTYPE)
        self.out = nn.Linear(hidden_dim, self.n_out, dtype=DTYPE)
        self.frozen = False
        self._cache: dict[str, float] = {}

    def config(self) -> dict:
        return {"chars": "".join(self.chars), "embed_dim": self.embed_dim, "hidden_dim": self.hidden_dim}

    def symbol(self, i: int) -> str:
        return self.chars[i - 2]

    def encode_word(self, spelling: str) -> list[int]:
        return [self.char_id.get(c, self.UNK) for c in spelling]

    def freeze(self) -> "CharModel":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self.frozen = True
        self._cache.clear()
        return self

    def sequence_log_probs(self, spellings) -> torch.Tensor:
        """Log-probability of each spelling including the end-of-word mark."""
        seqs = [self.encode_word(s) for s in spellings]
        width = max((len(s) for s in seqs), default=0) + 1
        inputs = torch.zeros(len(seqs), width, dtype=torch.long)
        targets = torch.zeros(len(seqs), width, dtype=torch.long)
        mask = torch.zeros(len(seqs), width, dtype=DTYPE)
        for b, s in enumerate(seqs):
            inputs[b, : len(s) + 1] = torch.tensor([self.bow, *s], dtype=torch.long)
            targets[b, : len(s) + 1] = torch.tensor([*s, self.EOW], dtype=torch.long)
            mask[b, : len(s) + 1] = 1.0
        out, _ = self.lstm(self.embedding(inputs))
        logp = torch.log_softmax(self.out(out), dim=-1)
        picked = logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
        return (picked * mask).sum(dim=1)

    def char_log_prob(self, spelling: str) -> float:
        if self.frozen and spelling in self._cache:
            return self._cache[spelling]
        with torch.no_grad():
            value = float(self.sequence_log_probs([spelling])[0])
        if self.frozen:
            self._cache[spelling] = value
        return value

    def char_log_probs(self, spellings) -> dict[str, float]:
        spellings = list(spellings)
        todo = sorted({s for s in spellings if not (self.frozen and s in self._cache)})
        values = {}
        if todo:
            with torch.no_grad():
                values = dict(zip(todo, self.sequence_log_probs(todo).tolist()))
            if self.frozen:
                self._cache.update(values)
        return {s: values[s] if s in values else self._cache[s] for s in spellings}

    def step_distribution(self, prev_symbol: int, state=None):
        x = self.embedding(torch.tensor([[prev_symbol]]))
        out, state = self.lstm(x, state)
        return torch.log_softmax(self.out(out[0, 0]), dim=-1), state

    def sample_spelling(self, rng: np.random.Generator, temperature=1.0, max_len=24) -> str:
        """Draw a non-empty spelling without the unknown-character symbol."""
        chars = []
        prev, state = self.bow, None
        with torch.no_grad():
            for _ in range(max_len):
                logp, state = self.step_distribution(prev, state)
                logp = logp.clone()
                logp[self.UNK] = -math.inf
                if not chars:
                    logp[self.EOW] = -math.inf
                k = categorical(rng, logp.numpy(), temperature)
                if k == self.EOW:
                    break
                chars.append(self.symbol(k))
                prev = k
        return "".join(chars)


def train_char_model(words, embed_dim=16, hidden_dim=48, epochs=30, lr=5e-3, batch_size=64, seed=0) -> CharModel:
    """Fit on the set of unique word types, then freeze."""
    words = sorted(set(words))
    gen = torch.Generator().manual_seed(seed)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = CharModel({c for w in words for c in w}, embed_dim, hidden_dim)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    for _ in range(epochs):
        order = torch.randperm(len(words), generator=gen).tolist()
        for i in range(0, len(order), batch_size):
            batch = [words[j] for j in order[i:i + batch_size]]
            loss = -model.sequence_log_probs(batch).sum() / sum(len(w) + 1 for w in batch)
            opt.zero_grad()
            loss.backward()
            opt.step()
    return model.freeze()


def categorical(rng: np.random.Generator, logp, temperature=1.0) -> int:
    """Draw an index from log-probabilities sharpened or flattened by ``temperature``."""
    z = np.asarray(logp, dtype=np.float64) / temperature
    z = z - np.max(z)
    p = np.exp(z)
    p /= p.sum()
    return int(rng.choice(len(p), p=p))


# ---------------------------------------------------------------------------
# main model


@dataclass
class ModelConfig:
    vocab_size: int
    embed_dim: int = 32
    hidden_dim: int = 64
    num_layers: int = 1
    bottleneck_dim: int = 32
    relation_bottleneck_dim: int = 16
    entity_dim: int = 16
    type_dim: int = 16
    alias_dim: int = 16
    dropout: float = 0.1
    use_relations: bool = True
    freeze_alias_features: bool = False


class EntityIndex:
    """Rows of the entity, relation-type and alias-feature tables.

    Row 0 of each table is the shared unknown embedding.
    """

    def __init__(self, entities=(), types=(), aliases=()):
        self.entities = ["<unk>", *entities]
        self.types = ["<unk>", *types]
        self.aliases = [("<unk>", 0), *[tuple(a) for a in aliases]]
        self.entity_row = {e: i for i, e in enumerate(self.entities)}
        self.type_row = {t: i for i, t in enumerate(self.types)}
        self.alias_row = {a: i for i, a in enumerate(self.aliases)}

    @classmethod
    def from_training(cls, kg: KnowledgeGraph, docs, min_count=2, covered=None):
        """Entities seen as objects at least ``min_count`` times in training subgraphs.

        With a pretrained table, ``covered`` restricts rows to entities whose
        embedding key is present in it.
        """
        counts = Counter()
        for topic in (d.topic for d in docs):
            for edge in kg.edges_from(topic):
                counts[edge.object] += 1
        if covered is not None:
            ents = sorted(e for e in kg.entities if kg.entities[e].embedding_key in covered)
        else:
            ents = sorted(e for e, c in counts.items() if c >= min_count)
        types = sorted(kg.relation_types)
        aliases = [(e, k) for e in ents for k in range(len(kg.entities[e].aliases))]
        max_alias = max((len(ent.aliases) for ent in kg.entities.values()), default=1)
        aliases += [("<unk>", k) for k in range(1, max_alias)]
        return cls(ents, types, aliases)

    def to_dict(self):
        return {"entities": self.entities[1:], "types": self.types[1:], "aliases": [list(a) for a in self.aliases[1:]]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["entities"], d["types"], [tuple(a) for a in d["aliases"]])

    def entity(self, ent_id) -> int:
        return self.entity_row.get(ent_id, 0)

    def rel_type(self, t) -> int:
        return self.type_row.get(t, 0)

    def alias(self, ent_id, k) -> int:
        if ent_id in self.entity_row:
            return self.alias_row[(ent_id, k)]
        return self.alias_row.get(("<unk>", k), 0)


@dataclass
class PreparedDoc:
    """A document with everything the model needs, computed once."""

    doc: Document
    subgraph: TopicSubgraph
    ids: torch.Tensor  # (N+1,) including EOS
    spellings: list
    unk_logp: np.ndarray  # char-model log-prob at UNK positions, 0 elsewhere
    oov_mask: np.ndarray
    matches: list
    lattice: lat_mod.Lattice
    edge_types: torch.Tensor
    edge_objects: torch.Tensor
    alias_rows: torch.Tensor  # (E', max aliases), padded
    alias_mask: torch.Tensor
    arc_edge: torch.Tensor
    arc_alias: torch.Tensor
    arc_start: np.ndarray

    @property
    def length(self) -> int:
        return int(self.ids.shape[0])


class LRLM(nn.Module):
    """Latent relation LM; with ``use_relations=False`` it is the word-only baseline."""

    def __setattr__(self, name, value):
        if name == "char_model":  # frozen, never a submodule or part of the state dict
            object.__setattr__(self, name, value)
        else:
            super().__setattr__(name, value)

    def __init__(self, config: ModelConfig, vocab: Vocabulary, index: EntityIndex, char_model: CharModel | None = None):
        super().__init__()
        self.config = config
        self.vocab = vocab
        self.index = index
        self.char_model = char_model
        D = config.hidden_dim
        self.encoder = RecurrentEncoder(config.vocab_size, config.embed_dim, D, config.num_layers, config.dropout)
        self.dropout = nn.Dropout(config.dropout)
        self.word_head = BottleneckLinear(D, config.bottleneck_dim, config.vocab_size)
        if config.use_relations:
            self.source_head = nn.Linear(D, 2, dtype=DTYPE)
            rel_dim = config.type_dim + config.entity_dim
            self.relation_head = BottleneckLinear(D, config.relation_bottleneck_dim, rel_dim)
            self.entity_embedding = nn.Embedding(len(index.entities), config.entity_dim, dtype=DTYPE)
            self.type_embedding = nn.Embedding(len(index.types), config.type_dim, dtype=DTYPE)
            self.alias_head = nn.Linear(D, config.alias_dim, dtype=DTYPE)
            self.alias_features = nn.Embedding(len(index.aliases), config.alias_dim, dtype=DTYPE)
            for emb in (self.entity_embedding, self.type_embedding, self.alias_features):
                nn.init.uniform_(emb.weight, -0.5, 0.5)
            for lin in (self.source_head, self.alias_head):
                bound = 1.0 / math.sqrt(D)
                nn.init.uniform_(lin.weight, -bound, bound)
                nn.init.uniform_(lin.bias, -bound, bound)
            self.alias_features.weight.requires_grad_(not config.freeze_alias_features)

    # -- construction helpers ------------------------------------------------

    def load_pretrained(self, entity_table=None, alias_table=None, kg: KnowledgeGraph | None = None):
        """Initialize entity rows and alias features from ``key -> vector`` tables."""
        with torch.no_grad():
            if entity_table and kg is not None:
                for ent, row in self.index.entity_row.items():
                    key = kg.entities[ent].embedding_key if ent in kg.entities else None
                    if key in entity_table:
                        self.entity_embedding.weight[row] = torch.as_tensor(entity_table[key])
            if alias_table and kg is not None:
                for (ent, k), row in self.index.alias_row.items():
                    if ent in kg.entities:
                        key = "_".join(kg.entities[ent].aliases[k])
                        if key in alias_table:
                            self.alias_features.weight[row] = torch.as_tensor(alias_table[key])

    def prepare(self, doc: Document, subgraph: TopicSubgraph, matches=None) -> PreparedDoc:
        enc = encode(doc, self.vocab)
        ids = torch.tensor([i for i, _ in enc], dtype=torch.long)
        spellings = [s for _, s in enc]
        oov = np.array([i == self.vocab.unk_id for i, _ in enc])
        unk_logp = np.zeros(len(enc))
        if oov.any():
            if self.char_model is None:
                raise MissingSpellingError("a character model is required to score unknown words")
            table = self.char_model.char_log_probs([s for s, o in zip(spellings, oov) if o])
            unk_logp[oov] = [table[s] for s, o in zip(spellings, oov) if o]
        if not self.config.use_relations:
            matches = []
        elif matches is None:
            matches = match_spans(doc, subgraph)
        lattice = lat_mod.build_lattice(len(enc), matches)
        edges = subgraph.edges
        max_alias = max((len(subgraph.objects[e.object].aliases) for e in edges), default=1)
        alias_rows = torch.zeros(len(edges), max_alias, dtype=torch.long)
        alias_mask = torch.zeros(len(edges), max_alias, dtype=torch.bool)
        for j, e in enumerate(edges):
            for k in range(len(subgraph.objects[e.object].aliases)):
                alias_rows[j, k] = self.index.alias(e.object, k)
                alias_mask[j, k] = True
        edge_pos = {e: j for j, e in enumerate(edges)}
        return PreparedDoc(
            doc=doc,
            subgraph=subgraph,
            ids=ids,
            spellings=spellings,
            unk_logp=unk_logp,
            oov_mask=oov,
            matches=list(matches),
            lattice=lattice,
            edge_types=torch.tensor([self.index.rel_type(e.rel_type) for e in edges], dtype=torch.long),
            edge_objects=torch.tensor([self.index.entity(e.object) for e in edges], dtype=torch.long),
            alias_rows=alias_rows,
            alias_mask=alias_mask,
            arc_edge=torch.tensor([edge_pos[m.edge] for m in matches], dtype=torch.long),
            arc_alias=torch.tensor([m.alias_index for m in matches], dtype=torch.long),
            arc_start=np.array([m.start for m in matches], dtype=int),
        )

    # -- heads ---------------------------------------------------------------

    def source_log_probs(self, h):
        return torch.log_softmax(self.source_head(h), dim=-1)

    def word_log_probs(self, h):
        return torch.log_softmax(self.word_head(h), dim=-1)

    def relation_embeddings(self, edge_types, edge_objects):
        return torch.cat([self.type_embedding(edge_types), self.entity_embedding(edge_objects)], dim=-1)

    def relation_log_probs(self, h, edge_types, edge_objects):
        if edge_types.numel() == 0:
            raise EmptyEdgeListError("the subgraph has no relation edges")
        scores = self.relation_head(h) @ self.relation_embeddings(edge_types, edge_objects).T
        return torch.log_softmax(scores, dim=-1)

    def alias_log_probs(self, h, alias_rows, alias_mask):
        """``h: (..., D)``, ``alias_rows: (..., A)`` -> log-probs over the A aliases."""
        query = self.alias_head(h)
        feats = self.alias_features(alias_rows)
        scores = (feats * query.unsqueeze(-2)).sum(-1)
        scores = scores.masked_fill(~alias_mask, -math.inf)
        return torch.log_softmax(scores, dim=-1)

    # -- potentials ----------------------------------------------------------

    def potentials(self, prep: PreparedDoc, lo=1, hi=None, state=None, unk_logp=None):
        """Arc potentials for positions ``lo..hi`` (1-based, inclusive).

        Returns ``(word_logp, rel_logp, arc_indices, final_state)``, where the
        relation arcs are those starting inside the range and the final state
        is the encoder state after consuming token ``hi``.
        """
        hi = prep.length if hi is None else hi
        ids = prep.ids[lo - 1:hi]
        states, final = self.encoder(ids, state)
        H = self.dropout(states[:-1])
        word_lp = self.word_log_probs(H).gather(1, ids.unsqueeze(1)).squeeze(1)
        extra = prep.unk_logp if unk_logp is None else unk_logp
        word_lp = word_lp + torch.as_tensor(extra[lo - 1:hi], dtype=DTYPE)
        if not self.config.use_relations:
            return word_lp, torch.zeros(0, dtype=DTYPE), np.zeros(0, dtype=int), final
        src = self.source_log_probs(H)
        word_lp = word_lp + src[:, WORD_SOURCE]
        arcs = np.nonzero((prep.arc_start >= lo) & (prep.arc_start <= hi))[0]
        if len(arcs) == 0:
            return word_lp, torch.zeros(0, dtype=DTYPE), arcs, final
        arcs_t = torch.as_tensor(arcs, dtype=torch.long)
        rows = torch.as_tensor(prep.arc_start[arcs] - lo, dtype=torch.long)
        Ha = H[rows]
        edge = prep.arc_edge[arcs_t]
        rel_lp = self.relation_log_probs(Ha, prep.edge_types, prep.edge_objects).gather(1, edge.unsqueeze(1)).squeeze(1)
        alias_lp = self.alias_log_probs(Ha, prep.alias_rows[edge], prep.alias_mask[edge])
        alias_lp = alias_lp.gather(1, prep.arc_alias[arcs_t].unsqueeze(1)).squeeze(1)
        return word_lp, src[rows, REL_SOURCE] + rel_lp + alias_lp, arcs, final

    def document_nll(self, prep: PreparedDoc, unk_logp=None) -> torch.Tensor:
        """Negative log marginal likelihood of a whole document (differentiable)."""
        word_lp, rel_lp, _, _ = self.potentials(prep, unk_logp=unk_logp)
        return lattice_nll(word_lp, rel_lp, prep.lattice)

    def export_config(self) -> dict:
        return {"model": asdict(self.config), "vocab": self.vocab.tokens, "index": self.index.to_dict()}


# ---------------------------------------------------------------------------
# lattice <-> autograd


class _LatticeNLL(torch.autograd.Function):
    """``-log`` marginal over the lattice; its gradient is minus the arc posteriors."""

    @staticmethod
    def forward(ctx, word_lp, rel_lp, lattice):
        if torch.isnan(word_lp).any() or torch.isnan(rel_lp).any():
            # propagate so the caller can report divergence with context
            return torch.tensor(math.nan, dtype=DTYPE)
        pot = lat_mod.ArcPotentials(word_lp.detach().numpy(), rel_lp.detach().numpy())
        chart = lat_mod.forward(lattice, pot)
        ctx.lattice, ctx.pot, ctx.chart = lattice, pot, chart
        return torch.tensor(-chart.log_marginal, dtype=DTYPE)

    @staticmethod
    def backward(ctx, grad):
        lat_mod.backward(ctx.lattice, ctx.pot, ctx.chart)
        word_post, rel_post = lat_mod.arc_posteriors(ctx.lattice, ctx.pot, ctx.chart)
        return (
            -grad * torch.as_tensor(word_post, dtype=DTYPE),
            -grad * torch.as_tensor(rel_post, dtype=DTYPE),
            None,
        )


def lattice_nll(word_lp, rel_lp, lattice) -> torch.Tensor:
    return _LatticeNLL.apply(word_lp, rel_lp, lattice)


# ---------------------------------------------------------------------------
# functional surface


def source_log_probs(model: LRLM, h):
    """``(log P(REL), log P(WORD))`` at hidden state ``h``."""
    return model.source_log_probs(torch.as_tensor(h, dtype=DTYPE))


def word_log_prob(model: LRLM, h, token_id: int, spelling: str | None = None):
    lp = model.word_log_probs(torch.as_tensor(h, dtype=DTYPE))[token_id]
    if token_id == model.vocab.unk_id:
        if spelling is None:
            raise MissingSpellingError("UNK tokens need their spelling")
        lp = lp + model.char_model.char_log_prob(spelling)
    return lp


def relation_log_probs(model: LRLM, h, subgraph: TopicSubgraph):
    types = torch.tensor([model.index.rel_type(e.rel_type) for e in subgraph.edges], dtype=torch.long)
    objs = torch.tensor([model.index.entity(e.object) for e in subgraph.edges], dtype=torch.long)
    return model.relation_log_probs(torch.as_tensor(h, dtype=DTYPE), types, objs)


def alias_log_probs(model: LRLM, h, edge: RelationEdge, subgraph: TopicSubgraph):
    subgraph.index_of(edge)
    n = len(subgraph.objects[edge.object].aliases)
    rows = torch.tensor([model.index.alias(edge.object, k) for k in range(n)], dtype=torch.long)
    return model.alias_log_probs(torch.as_tensor(h, dtype=DTYPE), rows, torch.ones(n, dtype=torch.bool))


def char_log_prob(char_model: CharModel, spelling: str) -> float:
    return char_model.char_log_prob(spelling)


def prepare_document(model: LRLM, doc: Document, kg: KnowledgeGraph, matches=None) -> PreparedDoc:
    return model.prepare(doc, extract_star_subgraph(kg, doc.topic), matches)


def score_document(model: LRLM, prep: PreparedDoc, unk_logp=None):
    """``(lattice, numpy potentials, NLL)`` with frozen parameters."""
    with torch.no_grad():
        word_lp, rel_lp, _, _ = model.potentials(prep, unk_logp=unk_logp)
    pot = lat_mod.ArcPotentials(word_lp.numpy(), rel_lp.numpy())
    chart = lat_mod.forward(prep.lattice, pot)
    return prep.lattice, pot, -chart.log_marginal


def vanilla_log_likelihood(model: LRLM, prep: PreparedDoc) -> float:
    """NLL of the word-by-word model: vocabulary softmax plus spell-out, no source head."""
    with torch.no_grad():
        states, _ = model.encoder(prep.ids)
        lp = model.word_log_probs(model.dropout(states[:-1])).gather(1, prep.ids.unsqueeze(1)).squeeze(1)
    return float(-(lp.sum() + prep.unk_logp.sum()))
