import math

import numpy as np
import pytest
import torch
from helpers import brute_derivations, ref_logsumexp, tiny_doc, tiny_model, tiny_prep

from lrlm.backbone import DTYPE
from lrlm.corpus import Document, SpanMatch
from lrlm.exceptions import EmptyEdgeListError, MissingSpellingError
from lrlm.kg_store import Entity, KnowledgeGraph, RelationEdge, extract_star_subgraph
from lrlm.model import (
    REL_SOURCE,
    WORD_SOURCE,
    CharModel,
    EntityIndex,
    alias_log_probs,
    categorical,
    char_log_prob,
    prepare_document,
    relation_log_probs,
    score_document,
    source_log_probs,
    train_char_model,
    vanilla_log_likelihood,
    word_log_prob,
)
from lrlm.training import TrainConfig, train


@pytest.fixture
def tiny():
    return tiny_model()


def h_vec(seed=0, D=8):
    return torch.tensor(np.random.default_rng(seed).normal(size=D), dtype=DTYPE)


# -- source head ------------------------------------------------------------------


def test_source_zero_weights(tiny):
    model, _ = tiny
    with torch.no_grad():
        model.source_head.weight.zero_()
        model.source_head.bias.zero_()
    np.testing.assert_allclose(source_log_probs(model, h_vec()).detach(), [math.log(0.5)] * 2, atol=1e-15)


def test_source_hand_arithmetic():
    model, _ = tiny_model()
    W = torch.zeros(2, 8, dtype=DTYPE)
    W[:, :2] = torch.tensor([[1.0, -2.0], [0.5, 0.25]])
    with torch.no_grad():
        model.source_head.weight.copy_(W)
        model.source_head.bias.copy_(torch.tensor([0.1, -0.3], dtype=DTYPE))
    h = torch.zeros(8, dtype=DTYPE)
    h[:2] = torch.tensor([0.4, 1.2], dtype=DTYPE)
    a = 1.0 * 0.4 - 2.0 * 1.2 + 0.1
    b = 0.5 * 0.4 + 0.25 * 1.2 - 0.3
    z = math.log(math.exp(a) + math.exp(b))
    got = source_log_probs(model, h).detach().numpy()
    np.testing.assert_allclose(got, [a - z, b - z], rtol=0, atol=1e-15)
    assert REL_SOURCE == 0 and WORD_SOURCE == 1
    assert abs(np.exp(got).sum() - 1) <= 1e-15


# -- word head --------------------------------------------------------------------


def test_word_distribution_normalized(tiny):
    model, _ = tiny
    lp = model.word_log_probs(h_vec())
    assert lp.shape == (20,)
    assert abs(float(torch.exp(lp.detach()).sum()) - 1.0) <= 1e-12


@torch.no_grad()
def test_unk_composite(tiny):
    model, _ = tiny
    h = h_vec(1)
    p_unk = float(model.word_log_probs(h).detach()[model.vocab.unk_id])
    got = float(word_log_prob(model, h, model.vocab.unk_id, "qz"))
    assert got == pytest.approx(p_unk + model.char_model.char_log_prob("qz"), abs=1e-13)
    empty = float(word_log_prob(model, h, model.vocab.unk_id, ""))
    with torch.no_grad():
        step, _ = model.char_model.step_distribution(model.char_model.bow)
    assert empty == pytest.approx(p_unk + float(step[CharModel.EOW]), abs=1e-13)
    with pytest.raises(MissingSpellingError):
        word_log_prob(model, h, model.vocab.unk_id)
    assert float(word_log_prob(model, h, 5)) == float(model.word_log_probs(h)[5])


# -- relation and alias heads -------------------------------------------------------


def test_relation_uniform_when_embeddings_equal(tiny):
    model, kg = tiny
    with torch.no_grad():
        model.entity_embedding.weight.fill_(0.3)
        model.type_embedding.weight.fill_(-0.2)
    sub = extract_star_subgraph(kg, "s")
    lp = relation_log_probs(model, h_vec(), sub).detach().numpy()
    np.testing.assert_allclose(lp, np.full(len(sub.edges), -math.log(len(sub.edges))), atol=1e-14)


def test_relation_hand_dot_products(tiny):
    model, _ = tiny
    kg = KnowledgeGraph(
        {k: Entity(k, ((k,),)) for k in ("s", "o0", "o1", "o2")},
        [RelationEdge("s", "t0", "o0"), RelationEdge("s", "t1", "o1"), RelationEdge("s", "t2", "o2")],
    )
    sub = extract_star_subgraph(kg, "s")
    h = h_vec(2)
    q = model.relation_head(h).detach().numpy()
    scores = []
    for e in sub.edges:
        t = model.type_embedding.weight[model.index.rel_type(e.rel_type)].detach().numpy()
        o = model.entity_embedding.weight[model.index.entity(e.object)].detach().numpy()
        scores.append(float(np.dot(np.concatenate([t, o]), q)))
    z = math.log(sum(math.exp(s) for s in scores))
    got = relation_log_probs(model, h, sub).detach().numpy()
    np.testing.assert_allclose(got, [s - z for s in scores], rtol=0, atol=1e-14)


def test_relation_unknown_object_uses_unk_row(tiny):
    model, _ = tiny
    assert model.index.entity("never-seen") == 0
    kg = KnowledgeGraph({k: Entity(k, ((k,),)) for k in ("s", "zz")}, [RelationEdge("s", "t0", "zz")])
    lp = relation_log_probs(model, h_vec(), extract_star_subgraph(kg, "s"))
    assert float(lp[0]) == pytest.approx(0.0, abs=1e-15)


def test_relation_empty_edge_list(tiny):
    model, _ = tiny
    kg = KnowledgeGraph({"s": Entity("s", (("s",),))}, [])
    with pytest.raises(EmptyEdgeListError):
        relation_log_probs(model, h_vec(), extract_star_subgraph(kg, "s"))


def test_alias_single_and_uniform(tiny):
    model, _ = tiny
    kg = KnowledgeGraph(
        {"s": Entity("s", (("s",),)), "o": Entity("o", (("one",),)), "p": Entity("p", (("a",), ("b",), ("c",)))},
        [RelationEdge("s", "t0", "o"), RelationEdge("s", "t1", "p")],
    )
    sub = extract_star_subgraph(kg, "s")
    assert float(alias_log_probs(model, h_vec(), sub.edges[0], sub)[0]) == 0.0
    with torch.no_grad():
        model.alias_features.weight.fill_(0.7)
    lp = alias_log_probs(model, h_vec(), sub.edges[1], sub).detach().numpy()
    np.testing.assert_allclose(lp, np.full(3, -math.log(3)), atol=1e-15)


def test_alias_hand_computation():
    model, _ = tiny_model(n_alias=3)
    kg = model_kg = tiny_model(n_alias=3)[1]
    sub = extract_star_subgraph(model_kg, "s")
    edge = sub.edges[0]
    assert len(sub.objects[edge.object].aliases) == 3
    h = h_vec(3)
    query = (model.alias_head.weight @ h + model.alias_head.bias).detach().numpy()
    feats = [model.alias_features.weight[model.index.alias(edge.object, k)].detach().numpy() for k in range(3)]
    scores = [float(np.dot(f, query)) for f in feats]
    z = math.log(sum(math.exp(s) for s in scores))
    got = alias_log_probs(model, h, edge, sub).detach().numpy()
    np.testing.assert_allclose(got, [s - z for s in scores], rtol=0, atol=1e-14)
    assert abs(np.exp(got).sum() - 1.0) <= 1e-12
    assert kg is model_kg


# -- character model --------------------------------------------------------------


def test_char_model_normalization_and_stepwise():
    torch.manual_seed(0)
    cm = CharModel("abc", embed_dim=3, hidden_dim=4).freeze()
    with torch.no_grad():
        start, state = cm.step_distribution(cm.bow)
    assert char_log_prob(cm, "") == pytest.approx(float(start[cm.EOW]), abs=1e-14)
    # mass on spellings of length <= 2 cannot exceed 1
    spellings = [""] + list("abc") + [x + y for x in "abc" for y in "abc"]
    total = sum(math.exp(cm.char_log_prob(s)) for s in spellings)
    assert total <= 1.0
    # 2-character word as a product of stepwise distributions
    with torch.no_grad():
        s1, st1 = cm.step_distribution(cm.bow)
        s2, st2 = cm.step_distribution(cm.char_id["b"], st1)
        s3, _ = cm.step_distribution(cm.char_id["a"], st2)
    expected = float(s1[cm.char_id["b"]] + s2[cm.char_id["a"]] + s3[cm.EOW])
    assert cm.char_log_prob("ba") == pytest.approx(expected, abs=1e-13)
    batch = cm.char_log_probs(["ba", "", "ba", "zz"])
    assert batch["ba"] == pytest.approx(expected, abs=1e-13)
    assert cm.encode_word("az") == [cm.char_id["a"], cm.UNK]
    assert batch["zz"] <= 0


def test_char_model_sampling_never_empty():
    torch.manual_seed(1)
    cm = CharModel("ab", embed_dim=2, hidden_dim=3).freeze()
    rng = np.random.default_rng(0)
    words = [cm.sample_spelling(rng) for _ in range(50)]
    assert all(words) and all(set(w) <= {"a", "b"} for w in words)


def test_train_char_model_deterministic_and_frozen():
    words = ["alpha", "beta", "gamma", "delta", "alphabet"]
    a = train_char_model(words, 4, 6, epochs=40, seed=5)
    b = train_char_model(list(reversed(words)), 4, 6, epochs=40, seed=5)
    assert a.frozen and not any(p.requires_grad for p in a.parameters())
    for (k, v), (_, w) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(v, w), k
    untrained = CharModel(a.chars, 4, 6)
    assert a.char_log_prob("alpha") > untrained.char_log_prob("alpha")


def test_categorical_temperature():
    rng = np.random.default_rng(0)
    logp = np.log([0.1, 0.6, 0.3])
    assert all(categorical(rng, logp, 1e-9) == 1 for _ in range(20))
    counts = np.bincount([categorical(rng, logp) for _ in range(4000)], minlength=3) / 4000
    np.testing.assert_allclose(counts, [0.1, 0.6, 0.3], atol=0.03)


# -- document scoring ---------------------------------------------------------------


def test_mass_conservation(tiny):
    model, kg = tiny
    sub = extract_star_subgraph(kg, "s")
    for seed in range(5):
        h = h_vec(seed)
        src = torch.exp(source_log_probs(model, h))
        rel = torch.exp(relation_log_probs(model, h, sub))
        rel_mass = sum(float(rel[j]) * float(torch.exp(alias_log_probs(model, h, e, sub)).sum())
                       for j, e in enumerate(sub.edges))
        word_mass = float(torch.exp(model.word_log_probs(h)).sum())
        total = float(src[REL_SOURCE]) * rel_mass + float(src[WORD_SOURCE]) * word_mass
        assert abs(total - 1.0) <= 1e-6


def test_score_matches_enumeration(tiny):
    model, kg = tiny
    prep = tiny_prep(model, kg)
    assert prep.doc.N == 6 and len(prep.matches) == 3
    lat, pot, nll = score_document(model, prep)
    oracle = ref_logsumexp(s for _, s in brute_derivations(lat, pot))
    assert abs(nll + oracle) <= 1e-9
    assert nll == pytest.approx(float(model.document_nll(prep)), abs=1e-12)


def test_score_without_matches_is_vanilla_plus_source_cost(tiny):
    model, kg = tiny
    prep = tiny_prep(model, kg, Document("d", "s", ["the", "a", "qq", "is"]))
    assert prep.matches == []
    _, _, nll = score_document(model, prep)
    with torch.no_grad():
        states, _ = model.encoder(prep.ids)
        word_src = model.source_log_probs(states[:-1])[:, WORD_SOURCE].sum()
    assert nll == pytest.approx(vanilla_log_likelihood(model, prep) - float(word_src), abs=1e-12)


def test_adding_arc_lowers_nll(tiny):
    model, kg = tiny
    doc = tiny_doc()
    sub = extract_star_subgraph(kg, "s")
    full = model.prepare(doc, sub)
    fewer = model.prepare(doc, sub, matches=full.matches[:1])
    assert score_document(model, full)[2] < score_document(model, fewer)[2]


def test_vanilla_single_token_and_stepwise():
    model, kg = tiny_model(use_relations=False)
    one = tiny_prep(model, kg, Document("d", "s", ["the"]))
    with torch.no_grad():
        states, _ = model.encoder(one.ids)
        lp = model.word_log_probs(states)
    expected = -(float(lp[0, model.vocab.lookup("the")]) + float(lp[1, model.vocab.eos_id]))
    assert vanilla_log_likelihood(model, one) == pytest.approx(expected, abs=1e-13)
    three = tiny_prep(model, kg, Document("d", "s", ["a", "zq", "."]))
    with torch.no_grad():
        total = 0.0
        state = None
        h = model.encoder(torch.zeros(0, dtype=torch.long))[0][-1]
        for tok in ["a", "zq", ".", "<eos>"]:
            tid = model.vocab.lookup(tok)
            total += float(word_log_prob(model, h, tid, tok))
            out, state = model.encoder(torch.tensor([tid]), state)
            h = out[-1]
    assert vanilla_log_likelihood(model, three) == pytest.approx(-total, abs=1e-12)
    assert score_document(model, three)[2] == pytest.approx(-total, abs=1e-12)


def test_prepare_document_and_matches(tiny):
    model, kg = tiny
    prep = prepare_document(model, tiny_doc(), kg)
    assert prep.length == 7
    assert prep.lattice.N == 7
    assert all(isinstance(m, SpanMatch) for m in prep.matches)
    assert prep.oov_mask.sum() == 1


def test_char_model_frozen_during_training(tiny):
    model, kg = tiny
    before = {k: v.clone() for k, v in model.char_model.state_dict().items()}
    lrlm_before = {k: v.clone() for k, v in model.state_dict().items()}
    prep = tiny_prep(model, kg)
    train(model, [prep], [prep], TrainConfig(max_epochs=1, lr=0.01))
    after = model.char_model.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)
    assert not all(torch.equal(lrlm_before[k], v) for k, v in model.state_dict().items())


def test_char_model_not_a_submodule(tiny):
    model, _ = tiny
    assert not any(k.startswith("char_model") for k in model.state_dict())


def test_entity_index_from_training():
    ents = {k: Entity(k, ((k,), (k + "!",))) for k in ("a", "b", "x", "y")}
    kg = KnowledgeGraph(ents, [RelationEdge("a", "r", "x"), RelationEdge("b", "r", "x"), RelationEdge("a", "q", "y")])
    docs = [Document("1", "a", ["t"]), Document("2", "b", ["t"])]
    idx = EntityIndex.from_training(kg, docs, min_count=2)
    assert idx.entities == ["<unk>", "x"]
    assert idx.entity("y") == 0
    assert idx.alias("y", 1) == idx.alias_row[("<unk>", 1)]
    assert idx.alias("y", 0) == 0
    assert idx.types == ["<unk>", "q", "r"]
    assert EntityIndex.from_dict(idx.to_dict()).aliases == idx.aliases
    ents["y"] = Entity("y", (("y",),), embedding_key="Qy")
    kg2 = KnowledgeGraph(ents, kg.edges)
    assert EntityIndex.from_training(kg2, docs, covered={"Qy"}).entities == ["<unk>", "y"]


def test_pretrained_tables_and_frozen_alias_features():
    from dataclasses import replace

    from lrlm.model import LRLM

    model, kg = tiny_model()
    ents = dict(kg.entities)
    ents["o0"] = Entity("o0", ents["o0"].aliases, embedding_key="Q0")
    kg = KnowledgeGraph(ents, kg.edges)
    vec = np.arange(4, dtype=np.float64)
    model.load_pretrained({"Q0": vec}, {"obj0": vec + 1}, kg)
    np.testing.assert_array_equal(model.entity_embedding.weight[model.index.entity("o0")].detach(), vec)
    np.testing.assert_array_equal(model.alias_features.weight[model.index.alias("o0", 0)].detach(), vec + 1)
    frozen = LRLM(replace(model.config, freeze_alias_features=True), model.vocab, model.index, model.char_model)
    assert not frozen.alias_features.weight.requires_grad
    assert model.alias_features.weight.requires_grad
