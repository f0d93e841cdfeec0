"""Synthetic biography corpus over a small knowledge graph.

Twenty shared object entities (cities, occupations, countries, genres) plus
one person entity per document. Person names are random syllable strings, so
most surnames are out of vocabulary and have to be spelled or copied.
"""

from __future__ import annotations

import random
from pathlib import Path

from lrlm.corpus import Document, load_corpus, save_corpus
from lrlm.kg_store import Entity, KnowledgeGraph, RelationEdge, load_kg, save_kg

TOY_DIR = Path(__file__).parent / "toy"

CITIES = {
    "paris": ["Paris"],
    "nyc": ["New York City", "New York", "NYC"],
    "la": ["Los Angeles", "LA"],
    "london": ["London"],
    "berlin": ["Berlin"],
    "tokyo": ["Tokyo"],
}
OCCUPATIONS = {
    "singer": ["singer", "vocalist"],
    "actor": ["actor"],
    "politician": ["politician", "political figure", "polit."],
    "lawyer": ["lawyer", "attorney"],
    "painter": ["painter"],
}
COUNTRIES = {
    "france": ["France"],
    "usa": ["the United States", "United States", "USA"],
    "uk": ["the United Kingdom", "Britain"],
    "germany": ["Germany"],
    "japan": ["Japan"],
}
GENRES = {
    "jazz": ["jazz"],
    "rock": ["rock music", "rock"],
    "pop": ["pop music", "pop"],
    "folk": ["folk music", "folk"],
}
CITY_COUNTRY = {"paris": "france", "nyc": "usa", "la": "usa", "london": "uk", "berlin": "germany", "tokyo": "japan"}

ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "kr", "st", "tr"]
VOWELS = ["a", "e", "i", "o", "u", "ai", "ou"]
CODAS = ["", "", "n", "r", "s", "l", "k"]

YEARS = ["1990", "1995", "2001", "2005", "2010", "2014"]
ADJS = ["small", "large", "quiet", "famous", "old", "new"]
NOUNS = ["house", "theatre", "studio", "school", "company", "festival"]


def _syllables(rng, n):
    return "".join(rng.choice(ONSETS) + rng.choice(VOWELS) + rng.choice(CODAS) for _ in range(n))


def _alias(rng, aliases):
    # canonical form twice as likely as each alternative
    weights = [2.0] + [1.0] * (len(aliases) - 1)
    return rng.choices(aliases, weights=weights)[0]


def _person(rng, used):
    while True:
        first = _syllables(rng, rng.choice([1, 2])).capitalize()
        last = _syllables(rng, rng.choice([2, 3])).capitalize()
        if last not in used:
            used.add(last)
            return first, last


def _document(rng, pid, first, last, facts):
    full = f"{first} {last}"
    name = lambda: rng.choices([full, last], weights=[1, 3])[0]  # noqa: E731
    birth, res, country, occs, genre = facts
    city = lambda c: _alias(rng, CITIES[c])  # noqa: E731
    occ = lambda o: _alias(rng, OCCUPATIONS[o])  # noqa: E731
    sents = [f"{full} is a {occ(occs[0])} from {city(birth)} ."]
    pool = [
        f"{name()} was born in {city(birth)} and later moved to {city(res)} .",
        f"{name()} is a citizen of {_alias(rng, COUNTRIES[country])} .",
        f"{name()} lives in {city(res)} with a family .",
        f"in {rng.choice(YEARS)} , {name()} visited {city(rng.choice(sorted(CITIES)))} .",
        f"the {rng.choice(ADJS)} {rng.choice(NOUNS)} in {city(res)} was opened by {name()} .",
        f"the {rng.choice(NOUNS)} was {rng.choice(ADJS)} and the {rng.choice(NOUNS)} was {rng.choice(ADJS)} .",
    ]
    if len(occs) > 1:
        pool.append(f"before becoming a {occ(occs[0])} , {name()} worked as a {occ(occs[1])} in {city(res)} .")
    if genre is not None:
        pool.append(f"the music of {name()} is mostly {_alias(rng, GENRES[genre])} .")
        pool.append(f"{name()} recorded a {_alias(rng, GENRES[genre])} album in {rng.choice(YEARS)} .")
    rng.shuffle(pool)
    sents += pool[: rng.randint(3, 6)]
    return Document(pid, pid, " ".join(sents).split())


def make_toy_dataset(n_docs=200, seed=0, split=(0.8, 0.1)):
    """Returns ``(kg, train, dev, test)``."""
    rng = random.Random(seed)
    entities = {}
    for table in (CITIES, OCCUPATIONS, COUNTRIES, GENRES):
        for eid, aliases in table.items():
            entities[eid] = Entity(eid, tuple(tuple(a.split()) for a in aliases))
    edges = []
    docs = []
    used = set()
    for i in range(n_docs):
        pid = f"person{i:03d}"
        first, last = _person(rng, used)
        entities[pid] = Entity(pid, ((first, last), (last,)))
        birth = rng.choice(sorted(CITIES))
        res = rng.choice(sorted(CITIES))
        country = CITY_COUNTRY[birth] if rng.random() < 0.7 else rng.choice(sorted(COUNTRIES))
        occs = rng.sample(sorted(OCCUPATIONS), rng.choice([1, 2]))
        genre = rng.choice(sorted(GENRES)) if "singer" in occs or rng.random() < 0.3 else None
        edges.append(RelationEdge(pid, "title", pid))
        edges.append(RelationEdge(pid, "place_of_birth", birth))
        if res != birth:
            edges.append(RelationEdge(pid, "residence", res))
        edges.append(RelationEdge(pid, "citizenship", country))
        for o in occs:
            edges.append(RelationEdge(pid, "occupation", o))
        if genre is not None:
            edges.append(RelationEdge(pid, "genre", genre))
        docs.append(_document(rng, pid, first, last, (birth, res, country, occs, genre)))
    kg = KnowledgeGraph(entities, edges)
    n_train = int(round(split[0] * n_docs))
    n_dev = int(round(split[1] * n_docs))
    return kg, docs[:n_train], docs[n_train:n_train + n_dev], docs[n_train + n_dev:]


def write_toy_dataset(directory=TOY_DIR, **kwargs) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    kg, train, dev, test = make_toy_dataset(**kwargs)
    save_kg(kg, directory / "kg.json")
    for name, docs in (("train", train), ("dev", dev), ("test", test)):
        save_corpus(docs, directory / f"{name}.jsonl")
    return directory


def load_toy_dataset(directory=TOY_DIR):
    directory = Path(directory)
    kg = load_kg(directory / "kg.json")
    return kg, *(load_corpus(directory / f"{n}.jsonl") for n in ("train", "dev", "test"))


if __name__ == "__main__":
    print(write_toy_dataset())
