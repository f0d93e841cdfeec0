"""Latent relation language models: knowledge-graph conditioned LMs that
marginalize over latent span segmentations."""

from lrlm.corpus import Document, SpanMatch, Vocabulary, build_vocabulary, match_spans, prune_overlaps
from lrlm.estimator import LatentRelationLM
from lrlm.kg_store import Entity, KnowledgeGraph, RelationEdge, TopicSubgraph, extract_star_subgraph, load_kg

__all__ = [
    "Document",
    "Entity",
    "KnowledgeGraph",
    "LatentRelationLM",
    "RelationEdge",
    "SpanMatch",
    "TopicSubgraph",
    "Vocabulary",
    "build_vocabulary",
    "extract_star_subgraph",
    "load_kg",
    "match_spans",
    "prune_overlaps",
]

__version__ = "0.1.0"
