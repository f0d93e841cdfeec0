"""Documents, vocabularies, surface-form span matching and overlap pruning."""

from __future__ import annotations

import json
from collections import Counter, deque
from dataclasses import dataclass
from pathlib import Path

from lrlm.exceptions import EmptyCorpusError
from lrlm.kg_store import RelationEdge, TopicSubgraph

UNK = "<unk>"
EOS = "<eos>"


@dataclass(frozen=True)
class Document:
    id: str
    topic: str
    tokens: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if not self.tokens:
            raise ValueError(f"document {self.id!r} has no tokens")
        if any(not isinstance(t, str) or not t for t in self.tokens):
            raise ValueError(f"document {self.id!r} has an empty token")

    @property
    def N(self) -> int:
        return len(self.tokens)


def load_corpus(path) -> list[Document]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                docs.append(Document(str(rec["id"]), str(rec["topic"]), rec["tokens"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad document record ({exc})") from exc
    return docs


def save_corpus(docs, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps({"id": doc.id, "topic": doc.topic, "tokens": list(doc.tokens)}, ensure_ascii=False))
            fh.write("\n")


class Vocabulary:
    """Token <-> id map. Ids 0 and 1 are reserved for UNK and EOS."""

    unk_id = 0
    eos_id = 1

    def __init__(self, tokens, min_freq: int = 1):
        tokens = list(tokens)
        if tokens[:2] != [UNK, EOS]:
            raise ValueError("vocabulary must start with the UNK and EOS entries")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.tokens = tokens
        self.id_of = {tok: i for i, tok in enumerate(tokens)}
        self.min_freq = min_freq

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.id_of

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    @property
    def size(self) -> int:
        return len(self.tokens)

    def lookup(self, token: str) -> int:
        return self.id_of.get(token, self.unk_id)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        return cls([t for t in lines if t])


def build_vocabulary(docs, min_freq: int = 3, max_size: int | None = None) -> Vocabulary:
    """Frequency-thresholded vocabulary, ordered by count then lexicographically.

    ``max_size`` caps the number of regular tokens (UNK/EOS not counted).
    """
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    counts = Counter(tok for doc in docs for tok in doc.tokens)
    if not counts:
        raise EmptyCorpusError("cannot build a vocabulary from an empty corpus")
    kept = sorted(
        (tok for tok, c in counts.items() if c >= min_freq and tok not in (UNK, EOS)),
        key=lambda t: (-counts[t], t),
    )
    if max_size is not None:
        kept = kept[:max_size]
    return Vocabulary([UNK, EOS, *kept], min_freq=min_freq)


def encode(doc: Document, vocab: Vocabulary) -> list[tuple[int, str]]:
    """Ids with original spellings kept for UNK spell-out; EOS appended."""
    out = [(vocab.lookup(tok), tok) for tok in doc.tokens]
    out.append((vocab.eos_id, EOS))
    return out


@dataclass(frozen=True)
class SpanMatch:
    start: int  # 1-based, inclusive
    end: int  # 1-based, inclusive
    edge: RelationEdge
    alias_index: int

    @property
    def length(self) -> int:
        return self.end - self.start + 1


class TokenAutomaton:
    """Aho-Corasick automaton over token sequences.

    Each pattern carries a payload; :meth:`find` yields ``(end, length, payload)``
    with a 0-based exclusive end for every occurrence, overlaps included.
    """

    def __init__(self):
        self._goto: list[dict[str, int]] = [{}]
        self._fail: list[int] = [0]
        self._own: list[list[tuple[int, object]]] = [[]]  # patterns ending exactly here
        self._out: list[list[tuple[int, object]]] = [[]]  # plus those reached via failure links
        self._built = False

    def add(self, pattern, payload) -> None:
        if not pattern:
            raise ValueError("empty pattern")
        node = 0
        for tok in pattern:
            nxt = self._goto[node].get(tok)
            if nxt is None:
                nxt = len(self._goto)
                self._goto[node][tok] = nxt
                self._goto.append({})
                self._fail.append(0)
                self._own.append([])
            node = nxt
        self._own[node].append((len(pattern), payload))
        self._built = False

    def build(self) -> "TokenAutomaton":
        self._out = [list(o) for o in self._own]
        queue = deque(self._goto[0].values())
        for child in queue:
            self._fail[child] = 0
        while queue:
            node = queue.popleft()
            for tok, child in self._goto[node].items():
                queue.append(child)
                f = self._fail[node]
                while f and tok not in self._goto[f]:
                    f = self._fail[f]
                target = self._goto[f].get(tok, 0)
                self._fail[child] = target if target != child else 0
                self._out[child] = self._out[child] + self._out[self._fail[child]]
        self._built = True
        return self

    def find(self, tokens):
        if not self._built:
            self.build()
        node = 0
        for i, tok in enumerate(tokens):
            while node and tok not in self._goto[node]:
                node = self._fail[node]
            node = self._goto[node].get(tok, 0)
            for length, payload in self._out[node]:
                yield i + 1, length, payload


def subgraph_automaton(subgraph: TopicSubgraph) -> TokenAutomaton:
    auto = TokenAutomaton()
    for edge in subgraph.edges:
        for k, alias in enumerate(subgraph.objects[edge.object].aliases):
            auto.add(alias, (edge, k))
    return auto.build()


def match_spans(doc: Document, subgraph: TopicSubgraph, automaton: TokenAutomaton | None = None) -> list[SpanMatch]:
    """Every exact, case-sensitive alias occurrence; overlaps and nesting kept."""
    if doc.topic != subgraph.topic:
        raise ValueError(f"document topic {doc.topic!r} does not match subgraph topic {subgraph.topic!r}")
    auto = automaton or subgraph_automaton(subgraph)
    matches = [
        SpanMatch(end - length + 1, end, edge, k)
        for end, length, (edge, k) in auto.find(doc.tokens)
    ]
    matches.sort(key=lambda m: (m.start, m.end, m.edge, m.alias_index))
    return matches


def _prune_key(m: SpanMatch):
    return (-m.length, m.start, m.alias_index != 0, m.edge.rel_type, m.alias_index, m.edge.object, m.edge.subject)


def prune_overlaps(matches, subgraph: TopicSubgraph | None = None) -> list[SpanMatch]:
    """Greedy non-overlapping selection used for hard-decision supervision.

    Candidates are visited longest first, then earliest start, then canonical
    surface forms first, with relation type and alias index breaking ties.
    """
    if subgraph is not None:
        for m in matches:
            subgraph.index_of(m.edge)
    covered: set[int] = set()
    kept = []
    for m in sorted(set(matches), key=_prune_key):
        span = range(m.start, m.end + 1)
        if covered.isdisjoint(span):
            covered.update(span)
            kept.append(m)
    kept.sort(key=lambda m: m.start)
    return kept


def dataset_stats(docs, kg, vocab: Vocabulary) -> dict:
    """Training-set statistics with the columns Doc/Vocab/Rel/Ent/Tok/Doc/Ment/Doc."""
    from lrlm.kg_store import extract_star_subgraph

    n = len(docs)
    rels = mentions = tokens = 0
    for doc in docs:
        sub = extract_star_subgraph(kg, doc.topic)
        rels += len(sub.edges)
        mentions += len(match_spans(doc, sub))
        tokens += doc.N
    return {
        "Doc": n,
        "Vocab": vocab.size,
        "Rel/Ent": rels / n if n else 0.0,
        "Tok/Doc": tokens / n if n else 0.0,
        "Ment/Doc": mentions / n if n else 0.0,
    }
