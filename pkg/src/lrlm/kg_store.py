"""Knowledge graph storage, alias tables and star-subgraph extraction."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from lrlm.exceptions import (
    DanglingReferenceError,
    EdgeNotInSubgraphError,
    KGFormatError,
    UnknownTopicError,
)

Alias = tuple[str, ...]


@dataclass(frozen=True)
class Entity:
    id: str
    aliases: tuple[Alias, ...]
    embedding_key: str | None = None

    @property
    def canonical(self) -> Alias:
        return self.aliases[0]


@dataclass(frozen=True, order=True)
class RelationEdge:
    subject: str
    rel_type: str
    object: str


@dataclass
class KnowledgeGraph:
    entities: dict[str, Entity]
    edges: list[RelationEdge]
    relation_types: set[str] = field(default_factory=set)

    def __post_init__(self):
        self.relation_types = set(self.relation_types) | {e.rel_type for e in self.edges}
        self._by_subject: dict[str, list[RelationEdge]] = {}
        for edge in self.edges:
            self._by_subject.setdefault(edge.subject, []).append(edge)

    def edges_from(self, subject: str) -> list[RelationEdge]:
        return list(self._by_subject.get(subject, ()))

    def __eq__(self, other):
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return (
            self.entities == other.entities
            and self.edges == other.edges
            and self.relation_types == other.relation_types
        )


@dataclass(frozen=True)
class TopicSubgraph:
    topic: str
    edges: tuple[RelationEdge, ...]
    objects: dict[str, Entity]

    def index_of(self, edge: RelationEdge) -> int:
        try:
            return self.edges.index(edge)
        except ValueError:
            raise EdgeNotInSubgraphError(f"{edge} is not an edge of the subgraph of {self.topic!r}") from None


def _dedupe(items):
    seen = set()
    out = []
    for item in items:
        if item not in seen:
            seen.add(item)
            out.append(item)
    return out


def _array_record_lines(text: str, key: str) -> list[int]:
    """Line numbers where each element of the top-level array ``key`` begins."""
    match = re.search(r'"%s"\s*:\s*\[' % re.escape(key), text)
    if match is None:
        return []
    decoder = json.JSONDecoder()
    pos = match.end()
    lines = []
    ws = re.compile(r"[\s,]*")
    while True:
        pos = ws.match(text, pos).end()
        if pos >= len(text) or text[pos] == "]":
            return lines
        lines.append(text.count("\n", 0, pos) + 1)
        try:
            _, pos = decoder.raw_decode(text, pos)
        except json.JSONDecodeError:
            return lines


def _parse_entity(rec, line) -> Entity:
    if not isinstance(rec, dict) or "id" not in rec or "aliases" not in rec:
        raise KGFormatError("entity record needs 'id' and 'aliases'", line)
    if not isinstance(rec["aliases"], list) or not rec["aliases"]:
        raise KGFormatError(f"entity {rec['id']!r} has no surface forms", line)
    aliases = []
    for alias in rec["aliases"]:
        if not isinstance(alias, str) or not alias.split():
            raise KGFormatError(f"entity {rec['id']!r} has an empty surface form", line)
        aliases.append(tuple(alias.split()))
    key = rec.get("embedding_key")
    return Entity(str(rec["id"]), tuple(_dedupe(aliases)), None if key is None else str(key))


def _parse_edge(rec, line) -> RelationEdge:
    if not isinstance(rec, dict) or not {"subject", "type", "object"} <= rec.keys():
        raise KGFormatError("relation record needs 'subject', 'type' and 'object'", line)
    return RelationEdge(str(rec["subject"]), str(rec["type"]), str(rec["object"]))


def parse_kg(text: str) -> KnowledgeGraph:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise KGFormatError(exc.msg, exc.lineno) from exc
    if not isinstance(raw, dict) or "entities" not in raw or "relations" not in raw:
        raise KGFormatError("top-level object needs 'entities' and 'relations' arrays", 1)

    ent_lines = _array_record_lines(text, "entities")
    rel_lines = _array_record_lines(text, "relations")
    entities: dict[str, Entity] = {}
    for i, rec in enumerate(raw["entities"]):
        line = ent_lines[i] if i < len(ent_lines) else None
        ent = _parse_entity(rec, line)
        if ent.id in entities:
            raise KGFormatError(f"duplicate entity id {ent.id!r}", line)
        entities[ent.id] = ent

    edges = []
    for i, rec in enumerate(raw["relations"]):
        line = rel_lines[i] if i < len(rel_lines) else None
        edge = _parse_edge(rec, line)
        for end in (edge.subject, edge.object):
            if end not in entities:
                where = f" (line {line})" if line is not None else ""
                raise DanglingReferenceError(f"relation {edge} names unknown entity {end!r}{where}")
        edges.append(edge)
    return KnowledgeGraph(entities, _dedupe(edges))


def load_kg(path) -> KnowledgeGraph:
    return parse_kg(Path(path).read_text(encoding="utf-8"))


def dump_kg(kg: KnowledgeGraph) -> str:
    entities = []
    for ent in kg.entities.values():
        rec = {"id": ent.id, "aliases": [" ".join(a) for a in ent.aliases]}
        if ent.embedding_key is not None:
            rec["embedding_key"] = ent.embedding_key
        entities.append(rec)
    relations = [{"subject": e.subject, "type": e.rel_type, "object": e.object} for e in kg.edges]
    return json.dumps({"entities": entities, "relations": relations}, ensure_ascii=False, indent=1)


def save_kg(kg: KnowledgeGraph, path) -> None:
    Path(path).write_text(dump_kg(kg) + "\n", encoding="utf-8")


def extract_star_subgraph(kg: KnowledgeGraph, topic: str) -> TopicSubgraph:
    """Topic entity plus its direct neighbours.

    Only edges whose subject is the topic are kept; a self-loop (topic as its
    own object) is accepted like any other edge.
    """
    if topic not in kg.entities:
        raise UnknownTopicError(f"unknown topic entity {topic!r}")
    edges = tuple(kg.edges_from(topic))
    objects = {topic: kg.entities[topic]}
    for edge in edges:
        objects[edge.object] = kg.entities[edge.object]
    return TopicSubgraph(topic, edges, objects)


def alias_forms(subgraph: TopicSubgraph, edge: RelationEdge) -> list[Alias]:
    subgraph.index_of(edge)
    return list(subgraph.objects[edge.object].aliases)


def load_embeddings(path, dim: int) -> dict[str, np.ndarray]:
    """Read a ``key v1 v2 ...`` text table of pretrained vectors."""
    table = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != dim + 1:
                raise KGFormatError(f"expected {dim} values after key, got {len(parts) - 1}", lineno)
            try:
                table[parts[0]] = np.array([float(v) for v in parts[1:]], dtype=np.float64)
            except ValueError as exc:
                raise KGFormatError(str(exc), lineno) from exc
    return table
