"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

from collections.abc import Mapping

from lrlm.corpus import Document
from lrlm.exceptions import UnknownTopicError
from lrlm.kg_store import KnowledgeGraph


def check_documents(X, name="X") -> list[Document]:
    """Coerce ``X`` to a non-empty list of :class:`Document`.

    Accepts documents or mappings with ``id``, ``topic`` and ``tokens``.
    """
    if isinstance(X, (Document, Mapping, str)):
        raise TypeError(f"{name} must be a sequence of documents, got a single {type(X).__name__}")
    docs = []
    for i, item in enumerate(X):
        if isinstance(item, Document):
            docs.append(item)
        elif isinstance(item, Mapping):
            docs.append(Document(str(item.get("id", i)), str(item["topic"]), item["tokens"]))
        else:
            raise TypeError(f"{name}[{i}] is a {type(item).__name__}, expected a document")
    if not docs:
        raise ValueError(f"{name} is empty")
    return docs


def check_topics(docs, kg: KnowledgeGraph) -> None:
    missing = sorted({d.topic for d in docs if d.topic not in kg.entities})
    if missing:
        raise UnknownTopicError(f"topics not in the knowledge graph: {missing[:5]}")


def check_positive(value, name, allow_zero=False):
    if value is None:
        return value
    if value < 0 or (value == 0 and not allow_zero):
        raise ValueError(f"{name} must be {'non-negative' if allow_zero else 'positive'}, got {value}")
    return value
