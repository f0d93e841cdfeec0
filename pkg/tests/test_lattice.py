import math

import numpy as np
import pytest
from helpers import brute_derivations, key_span, random_lattice, ref_logsumexp
from hypothesis import given, settings
from hypothesis import strategies as st

from lrlm import lattice
from lrlm.corpus import SpanMatch
from lrlm.exceptions import CapExceededError, LatticeRangeError
from lrlm.kg_store import RelationEdge
from lrlm.lattice import REL, WORD, ArcPotentials, Lattice, RelArc

E = RelationEdge("s", "origin", "o")


def test_build_lattice():
    lat = lattice.build_lattice(3, [])
    assert lat.N == 3 and lat.rel_arcs == []
    lat = lattice.build_lattice(5, [SpanMatch(1, 2, E, 0), SpanMatch(2, 3, E, 1)])
    assert [(a.start, a.end, a.alias_index) for a in lat.rel_arcs] == [(1, 2, 0), (2, 3, 1)]
    with pytest.raises(LatticeRangeError):
        lattice.build_lattice(5, [SpanMatch(4, 5, E, 0)])
    with pytest.raises(LatticeRangeError):
        lattice.build_lattice(0, [])


def test_potentials_reject_nan():
    with pytest.raises(ValueError):
        ArcPotentials([0.0, math.nan], [])


def test_forward_no_arcs():
    w = np.array([-0.5, -1.5, -2.0])
    chart = lattice.forward_backward(Lattice(3), ArcPotentials(w, []))
    assert chart.log_marginal == pytest.approx(w.sum(), abs=1e-15)
    np.testing.assert_allclose(chart.beta, [w.sum(), w[1:].sum(), w[2:].sum(), 0.0], atol=1e-15)
    wp, rp = lattice.arc_posteriors(Lattice(3), ArcPotentials(w, []), chart)
    np.testing.assert_allclose(wp, 1.0)


def test_two_derivation_closed_form():
    w1, w2, q = -0.3, -1.1, -0.8
    lat = Lattice(2, [RelArc(1, 1, E, 0)])
    pot = ArcPotentials([w1, w2], [q])
    chart = lattice.forward_backward(lat, pot)
    assert chart.log_marginal == pytest.approx(math.log(math.exp(w1) + math.exp(q)) + w2, abs=1e-14)
    wp, rp = lattice.arc_posteriors(lat, pot, chart)
    z = math.exp(w1) + math.exp(q)
    assert wp[0] == pytest.approx(math.exp(w1) / z, abs=1e-14)
    assert rp[0] == pytest.approx(math.exp(q) / z, abs=1e-14)
    assert wp[1] == pytest.approx(1.0, abs=1e-14)


def test_single_position():
    chart = lattice.backward(Lattice(1), ArcPotentials([-0.7], []))
    assert chart.beta[0] == -0.7


def test_enumeration_hand_count():
    lat = Lattice(3, [RelArc(1, 2, E, 0), RelArc(1, 1, E, 1)])
    pot = ArcPotentials([-1.0, -1.0, -1.0], [-0.5, -0.2])
    derivs = lattice.enumerate_derivations(lat, pot)
    shapes = sorted(tuple((s.source, s.start, s.end) for s in d.segments) for d, _ in derivs)
    assert shapes == sorted([
        ((REL, 1, 2), (WORD, 3, 3)),
        ((REL, 1, 1), (WORD, 2, 2), (WORD, 3, 3)),
        ((WORD, 1, 1), (WORD, 2, 2), (WORD, 3, 3)),
    ])
    assert lattice.enumerate_derivations(Lattice(3), ArcPotentials([-1.0] * 3, []))[0][0].T == 3


def test_enumeration_cap():
    lat = Lattice(6, [RelArc(i, i, E, 0) for i in range(1, 6)])
    pot = ArcPotentials(np.full(6, -1.0), np.full(5, -1.0))
    with pytest.raises(CapExceededError):
        lattice.enumerate_derivations(lat, pot, cap=10)
    assert len(lattice.enumerate_derivations(lat, pot)) == 2 ** 5


def count_dp(lat):
    """Number of tilings by a boundary DP, in exact integers."""
    ways = [0] * (lat.N + 1)
    ways[0] = 1
    for i in range(1, lat.N + 1):
        ways[i] = ways[i - 1] + sum(ways[a.start - 1] for a in lat.rel_arcs if a.end == i)
    return ways[lat.N]


def test_derivation_count_matches_dp():
    rng = np.random.default_rng(11)
    for _ in range(200):
        lat, pot = random_lattice(rng, n_max=10, max_arcs=6)
        derivs = lattice.enumerate_derivations(lat, pot)
        assert len(derivs) == count_dp(lat)
        for d, _ in derivs:
            assert d.T <= lat.N
            pos = 1
            for seg in d.segments:
                assert seg.start == pos
                assert seg.source == REL or seg.start == seg.end
                pos = seg.end + 1
            assert pos == lat.N + 1


def test_arc_posteriors_match_enumeration():
    rng = np.random.default_rng(12)
    for _ in range(200):
        lat, pot = random_lattice(rng)
        tiles = brute_derivations(lat, pot)
        z = ref_logsumexp(s for _, s in tiles)
        wp, rp = lattice.arc_posteriors(lat, pot)
        for i in range(lat.N):
            mass = ref_logsumexp(s for keys, s in tiles if ("w", i + 1) in keys)
            assert abs(wp[i] - math.exp(mass - z)) <= 1e-9
        for j in range(len(lat.rel_arcs)):
            mass = ref_logsumexp(s for keys, s in tiles if ("r", j) in keys)
            assert abs(rp[j] - math.exp(mass - z)) <= 1e-9


def span_oracle(lat, pot, l, r):
    tiles = brute_derivations(lat, pot)
    groups = {}
    for keys, score in tiles:
        spans = [key_span(lat, k) for k in keys]
        ends = {b for _, b in spans} | {0}
        if l - 1 not in ends or r not in ends:
            continue
        labels = []
        for k, (a, b) in zip(keys, spans):
            if l <= a and b <= r:
                lab = "word" if k[0] == "w" else "<origin>"
                if not (lab == "word" and labels and labels[-1] == "word"):
                    labels.append(lab)
        groups.setdefault(" → ".join(labels), []).append(score)
    z = ref_logsumexp(s for ss in groups.values() for s in ss)
    return {k: math.exp(ref_logsumexp(v) - z) for k, v in groups.items()}


def test_span_report_matches_enumeration():
    rng = np.random.default_rng(13)
    for _ in range(150):
        lat, pot = random_lattice(rng)
        lat = Lattice(lat.N, [RelArc(a.start, a.end, E, a.alias_index) for a in lat.rel_arcs])
        chart = lattice.forward_backward(lat, pot)
        l = int(rng.integers(1, lat.N + 1))
        r = int(rng.integers(l, lat.N + 1))
        rows = dict(lattice.span_report(lat, pot, chart, (l, r)))
        oracle = span_oracle(lat, pot, l, r)
        assert rows.keys() == oracle.keys()
        for k in rows:
            assert abs(rows[k] - oracle[k]) <= 1e-9
        assert abs(sum(rows.values()) - 1.0) <= 1e-6


def test_span_report_word_only_and_composite():
    lat = Lattice(5, [RelArc(2, 3, E, 0)])
    pot = ArcPotentials([-1.0, -2.0, -2.0, -1.0, -0.5], [-0.3])
    chart = lattice.forward_backward(lat, pot)
    assert lattice.span_report(lat, pot, chart, (4, 4)) == [("word", 1.0)]
    rows = dict(lattice.span_report(lat, pot, chart, (1, 3)))
    assert set(rows) == {"word → <origin>", "word"}
    with pytest.raises(LatticeRangeError):
        lattice.span_report(lat, pot, chart, (0, 2))
    with pytest.raises(LatticeRangeError):
        lattice.span_report(lat, pot, chart, (3, 6))


def test_cut_points():
    lat = Lattice(6, [RelArc(2, 3, E, 0), RelArc(3, 4, E, 0)])
    assert lat.cut_points() == [0, 1, 4, 5, 6]


@st.composite
def lattices(draw):
    N = draw(st.integers(1, 8))
    arcs = []
    if N > 1:
        for _ in range(draw(st.integers(0, 5))):
            l = draw(st.integers(1, N - 1))
            r = draw(st.integers(l, N - 1))
            arcs.append(RelArc(l, r, E, len(arcs)))
    logp = st.floats(-6.0, -0.01)
    word = draw(st.lists(logp, min_size=N, max_size=N))
    rel = draw(st.lists(logp, min_size=len(arcs), max_size=len(arcs)))
    return Lattice(N, arcs), ArcPotentials(word, rel)


@settings(max_examples=200, deadline=None)
@given(lattices())
def test_properties(case):
    lat, pot = case
    chart = lattice.forward_backward(lat, pot)
    assert chart.alpha[0] == 0.0 and chart.beta[lat.N] == 0.0
    assert abs(chart.alpha[lat.N] - chart.beta[0]) <= 1e-9
    assert np.all(chart.alpha + chart.beta <= chart.log_marginal + 1e-9)
    wp, rp = lattice.arc_posteriors(lat, pot, chart)
    np.testing.assert_allclose(lattice.position_coverage(lat, wp, rp), 1.0, atol=1e-6)
    enum = lattice.enumerate_derivations(lat, pot)
    assert abs(chart.log_marginal - ref_logsumexp(s for _, s in enum)) <= 1e-9


@settings(max_examples=100, deadline=None)
@given(lattices(), st.data())
def test_adding_arc_never_decreases_marginal(case, data):
    lat, pot = case
    if lat.N < 2:
        return
    l = data.draw(st.integers(1, lat.N - 1))
    r = data.draw(st.integers(l, lat.N - 1))
    q = data.draw(st.floats(-20.0, 0.0))
    bigger = Lattice(lat.N, [*lat.rel_arcs, RelArc(l, r, E, 0)])
    before = lattice.forward(lat, pot).log_marginal
    after = lattice.forward(bigger, ArcPotentials(pot.word_logp, [*pot.rel_logp, q])).log_marginal
    assert after > before


def test_long_document_stays_finite():
    rng = np.random.default_rng(0)
    N = 3600
    arcs = [RelArc(i, i + 1, E, 0) for i in range(1, N - 1, 7)]
    pot = ArcPotentials(rng.uniform(-12, -3, N), rng.uniform(-5, -1, len(arcs)))
    chart = lattice.forward_backward(Lattice(N, arcs), pot)
    assert np.isfinite(chart.log_marginal)
    assert abs(chart.alpha[N] - chart.beta[0]) <= 1e-6
