"""scikit-learn style front end: ``fit`` / ``score`` / ``sample`` over documents."""

from __future__ import annotations

import math

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from lrlm import evalsuite, sampler
from lrlm.corpus import Vocabulary, build_vocabulary
from lrlm.kg_store import KnowledgeGraph, extract_star_subgraph
from lrlm.model import LRLM, CharModel, EntityIndex, ModelConfig, score_document, train_char_model
from lrlm.training import (
    TrainConfig,
    load_checkpoint,
    load_state,
    model_tensors,
    save_checkpoint,
    train,
)
from lrlm.validation import check_documents, check_positive, check_topics


class LatentRelationLM(BaseEstimator):
    """Language model over documents conditioned on their topic's KG neighbourhood.

    Parameters mirror the model and training configuration. With
    ``use_relations=False`` the estimator is the word-only baseline sharing
    the same backbone, heads and character model.

    Examples
    --------
    >>> from lrlm.data.toy import load_toy_dataset
    >>> kg, train_docs, dev_docs, _ = load_toy_dataset()
    >>> lm = LatentRelationLM(max_epochs=2).fit(train_docs, kg, dev=dev_docs)  # doctest: +SKIP
    >>> lm.perplexity(dev_docs).perplexity  # doctest: +SKIP
    """

    def __init__(
        self,
        use_relations=True,
        embed_dim=32,
        hidden_dim=64,
        num_layers=1,
        bottleneck_dim=32,
        relation_bottleneck_dim=16,
        entity_dim=16,
        type_dim=16,
        alias_dim=16,
        dropout=0.1,
        freeze_alias_features=False,
        min_freq=3,
        max_vocab=None,
        entity_min_count=2,
        window=150,
        lr=3e-3,
        decay=0.9,
        batch_size=1,
        max_epochs=15,
        patience=None,
        validation_fraction=0.1,
        char_embed_dim=16,
        char_hidden_dim=48,
        char_epochs=30,
        random_state=0,
    ):
        self.use_relations = use_relations
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.num_layers = num_layers
        self.bottleneck_dim = bottleneck_dim
        self.relation_bottleneck_dim = relation_bottleneck_dim
        self.entity_dim = entity_dim
        self.type_dim = type_dim
        self.alias_dim = alias_dim
        self.dropout = dropout
        self.freeze_alias_features = freeze_alias_features
        self.min_freq = min_freq
        self.max_vocab = max_vocab
        self.entity_min_count = entity_min_count
        self.window = window
        self.lr = lr
        self.decay = decay
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.char_embed_dim = char_embed_dim
        self.char_hidden_dim = char_hidden_dim
        self.char_epochs = char_epochs
        self.random_state = random_state

    # -- fitting --------------------------------------------------------------

    def _model_config(self, vocab_size) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            embed_dim=self.embed_dim,
            hidden_dim=self.hidden_dim,
            num_layers=self.num_layers,
            bottleneck_dim=self.bottleneck_dim,
            relation_bottleneck_dim=self.relation_bottleneck_dim,
            entity_dim=self.entity_dim,
            type_dim=self.type_dim,
            alias_dim=self.alias_dim,
            dropout=self.dropout,
            use_relations=self.use_relations,
            freeze_alias_features=self.freeze_alias_features,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            window=self.window,
            lr=self.lr,
            decay=self.decay,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            seed=self.random_state,
            patience=self.patience,
        )

    def fit(self, X, kg: KnowledgeGraph, dev=None, char_model: CharModel | None = None, vocab: Vocabulary | None = None,
            entity_table=None, alias_table=None, on_epoch=None):
        """Train on documents ``X`` whose topics are entities of ``kg``.

        Without ``dev``, a ``validation_fraction`` share of ``X`` is held out
        for the plateau schedule. A character model is trained on the unique
        training words unless one is supplied.
        """
        docs = check_documents(X)
        check_topics(docs, kg)
        check_positive(self.max_epochs, "max_epochs")
        if dev is None:
            n_dev = max(1, int(round(self.validation_fraction * len(docs))))
            if n_dev >= len(docs):
                raise ValueError("need at least two documents to hold out a development split")
            order = np.random.default_rng(self.random_state).permutation(len(docs))
            dev = [docs[i] for i in order[:n_dev]]
            docs = [docs[i] for i in order[n_dev:]]
        else:
            dev = check_documents(dev, "dev")
            check_topics(dev, kg)

        self.kg_ = kg
        self.vocab_ = vocab if vocab is not None else build_vocabulary(docs, self.min_freq, self.max_vocab)
        if char_model is None:
            char_model = train_char_model(
                {w for d in docs for w in d.tokens},
                self.char_embed_dim,
                self.char_hidden_dim,
                epochs=self.char_epochs,
                seed=self.random_state,
            )
        self.char_model_ = char_model
        covered = set(entity_table) if entity_table else None
        self.index_ = EntityIndex.from_training(kg, docs, self.entity_min_count, covered)
        torch.manual_seed(self.random_state)
        self.model_ = LRLM(self._model_config(self.vocab_.size), self.vocab_, self.index_, char_model)
        if self.use_relations and (entity_table or alias_table):
            self.model_.load_pretrained(entity_table, alias_table, kg)
        train_preps = self._prepare(docs)
        dev_preps = self._prepare(dev)
        self.model_, self.history_ = train(self.model_, train_preps, dev_preps, self.train_config(), on_epoch=on_epoch)
        return self

    # -- scoring ----------------------------------------------------------------

    def _prepare(self, X):
        return [self.model_.prepare(d, extract_star_subgraph(self.kg_, d.topic)) for d in X]

    def prepare(self, X):
        check_is_fitted(self, "model_")
        docs = check_documents(X)
        check_topics(docs, self.kg_)
        return self._prepare(docs)

    def document_nll(self, X) -> np.ndarray:
        """Negative log-likelihood of each document (EOS included)."""
        return np.array([score_document(self.model_, p)[2] for p in self.prepare(X)])

    def score(self, X, y=None) -> float:
        """Mean log-likelihood per token; higher is better."""
        preps = self.prepare(X)
        nll = sum(float(score_document(self.model_, p)[2]) for p in preps)
        return -nll / sum(p.length for p in preps)

    def perplexity(self, X, bins=None) -> evalsuite.EvalReport:
        return evalsuite.perplexity(self.model_, self.prepare(X), with_upp=True, bins=bins)

    def upp(self, X) -> float:
        return evalsuite.upp(self.model_, self.prepare(X))

    def annotate(self, doc, intervals=None):
        return evalsuite.annotate(self.model_, self.prepare([doc])[0], intervals)

    # -- generation ---------------------------------------------------------------

    def subgraph(self, topic):
        check_is_fitted(self, "model_")
        return extract_star_subgraph(self.kg_, topic)

    def sample(self, topic, max_tokens=100, temperature=1.0, seed=0, index=0) -> sampler.SampleResult:
        return sampler.sample(self.model_, self.subgraph(topic), max_tokens, temperature, seed, index)

    def best_of(self, topic, k=10, seed=0, max_tokens=100, temperature=1.0) -> sampler.SampleResult:
        return sampler.best_of(self.model_, self.subgraph(topic), k, seed, max_tokens, temperature)

    # -- persistence --------------------------------------------------------------

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        meta = {"params": self.get_params(), "export": self.model_.export_config(), "history": self.history_}
        save_checkpoint(model_tensors(self.model_), path, meta)

    @classmethod
    def load(cls, path, kg: KnowledgeGraph, char_model: CharModel) -> "LatentRelationLM":
        tensors, meta = load_checkpoint(path)
        est = cls(**meta["params"])
        export = meta["export"]
        est.kg_ = kg
        est.vocab_ = Vocabulary(export["vocab"])
        est.index_ = EntityIndex.from_dict(export["index"])
        est.char_model_ = char_model
        est.model_ = LRLM(ModelConfig(**export["model"]), est.vocab_, est.index_, char_model)
        load_state(est.model_, tensors)
        est.model_.eval()
        est.history_ = meta.get("history", [])
        return est


def save_char_model(char_model: CharModel, path) -> None:
    save_checkpoint(dict(char_model.state_dict()), path, {"char_model": char_model.config()})


def load_char_model(path) -> CharModel:
    tensors, meta = load_checkpoint(path)
    cfg = meta["char_model"]
    cm = CharModel(cfg["chars"], cfg["embed_dim"], cfg["hidden_dim"])
    load_state(cm, tensors)
    return cm.freeze()


def perplexity_gap(lrlm_ppl: float, vanilla_ppl: float) -> float:
    """Relative perplexity reduction of the relation model over the baseline."""
    return 1.0 - lrlm_ppl / vanilla_ppl if vanilla_ppl > 0 and math.isfinite(vanilla_ppl) else float("nan")
