"""Span lattices over a document and exact marginalization by forward-backward.

Positions are 1-based; position ``N`` is the end-of-sentence token and can
only be generated by a word arc. Every quantity lives in natural-log space.

Index convention: ``alpha[i]`` is the log mass of all derivations covering
positions ``1..i`` (``alpha[0] = 0``), and an arc ``(l, r)`` extends
``alpha[l - 1]``. ``beta[i]`` is the log mass of all continuations covering
``i+1..N`` (``beta[N] = 0``).
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from lrlm.exceptions import CapExceededError, LatticeRangeError

WORD = "WORD"
REL = "REL"


def logsumexp(values) -> float:
    """Max-shifted log-sum-exp of a 1-D sequence; ``-inf`` when empty."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return -math.inf
    m = arr.max()
    if not np.isfinite(m):
        return float(m)
    return float(m + math.log(np.exp(arr - m).sum()))


@dataclass(frozen=True)
class RelArc:
    start: int
    end: int
    edge: object = None
    alias_index: int = 0


@dataclass
class Lattice:
    N: int
    rel_arcs: list[RelArc] = field(default_factory=list)

    def __post_init__(self):
        self._ending: dict[int, list[int]] = defaultdict(list)
        self._starting: dict[int, list[int]] = defaultdict(list)
        for j, arc in enumerate(self.rel_arcs):
            self._ending[arc.end].append(j)
            self._starting[arc.start].append(j)

    def arcs_ending_at(self, i: int) -> list[int]:
        return self._ending.get(i, [])

    def arcs_starting_at(self, i: int) -> list[int]:
        return self._starting.get(i, [])

    def cut_points(self) -> list[int]:
        """Positions ``c`` such that no relation arc spans both ``c`` and ``c+1``."""
        crossing = np.zeros(self.N + 1, dtype=bool)
        for arc in self.rel_arcs:
            crossing[arc.start:arc.end] = True
        return [c for c in range(self.N + 1) if not crossing[c]]


@dataclass
class ArcPotentials:
    word_logp: np.ndarray  # shape (N,), entry i-1 for position i
    rel_logp: np.ndarray  # shape (len(rel_arcs),)

    def __post_init__(self):
        self.word_logp = np.asarray(self.word_logp, dtype=np.float64)
        self.rel_logp = np.asarray(self.rel_logp, dtype=np.float64).reshape(-1)
        if np.isnan(self.word_logp).any() or np.isnan(self.rel_logp).any():
            raise ValueError("arc potentials contain NaN")


@dataclass
class LatticeChart:
    alpha: np.ndarray | None = None
    beta: np.ndarray | None = None
    log_marginal: float = -math.inf


@dataclass(frozen=True)
class Segment:
    source: str
    start: int
    end: int
    edge: object = None
    alias_index: int | None = None


@dataclass
class Derivation:
    segments: list[Segment]

    @property
    def T(self) -> int:
        return len(self.segments)


def build_lattice(N: int, matches) -> Lattice:
    """One word arc per position plus one relation arc per span match."""
    if N < 1:
        raise LatticeRangeError("lattice needs at least one position")
    arcs = []
    for m in matches:
        if not 1 <= m.start <= m.end < N:
            raise LatticeRangeError(f"span ({m.start}, {m.end}) is outside 1..{N - 1}")
        arcs.append(RelArc(m.start, m.end, getattr(m, "edge", None), getattr(m, "alias_index", 0)))
    return Lattice(N, arcs)


def _check(lat: Lattice, pot: ArcPotentials):
    if pot.word_logp.shape != (lat.N,) or pot.rel_logp.shape != (len(lat.rel_arcs),):
        raise ValueError("potentials do not match the lattice shape")


def forward(lat: Lattice, pot: ArcPotentials) -> LatticeChart:
    _check(lat, pot)
    alpha = np.full(lat.N + 1, -math.inf)
    alpha[0] = 0.0
    for i in range(1, lat.N + 1):
        terms = [alpha[i - 1] + pot.word_logp[i - 1]]
        for j in lat.arcs_ending_at(i):
            terms.append(alpha[lat.rel_arcs[j].start - 1] + pot.rel_logp[j])
        alpha[i] = logsumexp(terms)
    return LatticeChart(alpha=alpha, log_marginal=float(alpha[lat.N]))


def backward(lat: Lattice, pot: ArcPotentials, chart: LatticeChart | None = None) -> LatticeChart:
    _check(lat, pot)
    beta = np.full(lat.N + 1, -math.inf)
    beta[lat.N] = 0.0
    for i in range(lat.N - 1, -1, -1):
        terms = [pot.word_logp[i] + beta[i + 1]]
        for j in lat.arcs_starting_at(i + 1):
            terms.append(pot.rel_logp[j] + beta[lat.rel_arcs[j].end])
        beta[i] = logsumexp(terms)
    if chart is None:
        return LatticeChart(beta=beta, log_marginal=float(beta[0]))
    chart.beta = beta
    return chart


def forward_backward(lat: Lattice, pot: ArcPotentials) -> LatticeChart:
    return backward(lat, pot, forward(lat, pot))


def arc_posteriors(lat: Lattice, pot: ArcPotentials, chart: LatticeChart | None = None):
    """Posterior probability of every arc.

    Returns ``(word_post, rel_post)`` aligned with ``pot.word_logp`` and
    ``pot.rel_logp``. These are also the gradients of the log marginal with
    respect to the arc potentials.
    """
    if chart is None or chart.alpha is None or chart.beta is None:
        chart = forward_backward(lat, pot)
    alpha, beta, z = chart.alpha, chart.beta, chart.log_marginal
    word_post = np.exp(alpha[:-1] + pot.word_logp + beta[1:] - z)
    starts = np.array([a.start for a in lat.rel_arcs], dtype=int)
    ends = np.array([a.end for a in lat.rel_arcs], dtype=int)
    rel_post = np.exp(alpha[starts - 1] + pot.rel_logp + beta[ends] - z) if len(starts) else np.zeros(0)
    return word_post, rel_post


def position_coverage(lat: Lattice, word_post, rel_post) -> np.ndarray:
    """Total posterior mass of arcs covering each position (should be 1)."""
    cover = np.array(word_post, dtype=np.float64)
    for arc, p in zip(lat.rel_arcs, rel_post):
        cover[arc.start - 1:arc.end] += p
    return cover


def _arc_label(arc: RelArc) -> str:
    rel_type = getattr(arc.edge, "rel_type", None)
    return f"<{rel_type}>" if rel_type is not None else "rel"


def _pattern(labels) -> str:
    collapsed = []
    for lab in labels:
        if not (lab == "word" and collapsed and collapsed[-1] == "word"):
            collapsed.append(lab)
    return " → ".join(collapsed)


def span_report(lat: Lattice, pot: ArcPotentials, chart: LatticeChart, interval, label=_arc_label):
    """Posterior over the ways of generating a fixed interval ``(l, r)``.

    Every tiling of ``l..r`` by arcs lying inside it is scored, conditioned
    on segment boundaries at ``l - 1`` and ``r``. Tilings whose label
    sequences coincide (runs of words collapse into one ``word``) are merged.
    Returns ``[(pattern, probability), ...]`` sorted by decreasing probability.
    """
    l, r = interval
    if not 1 <= l <= r <= lat.N:
        raise LatticeRangeError(f"interval ({l}, {r}) is outside 1..{lat.N}")
    if chart.alpha is None or chart.beta is None:
        chart = forward_backward(lat, pot)

    tilings: list[tuple[list[str], float]] = []

    def extend(pos, labels, score):
        if pos == r + 1:
            tilings.append((labels, score))
            return
        extend(pos + 1, labels + ["word"], score + pot.word_logp[pos - 1])
        for j in lat.arcs_starting_at(pos):
            arc = lat.rel_arcs[j]
            if arc.end <= r:
                extend(arc.end + 1, labels + [label(arc)], score + pot.rel_logp[j])

    extend(l, [], 0.0)
    outer = chart.alpha[l - 1] + chart.beta[r]
    scores = [outer + s for _, s in tilings]
    total = logsumexp(scores)
    mass: dict[str, float] = defaultdict(float)
    for (labels, _), s in zip(tilings, scores):
        mass[_pattern(labels)] += math.exp(s - total)
    return sorted(mass.items(), key=lambda kv: (-kv[1], kv[0]))


def enumerate_derivations(lat: Lattice, pot: ArcPotentials, cap: int = 10**6):
    """Exhaustive list of ``(Derivation, log_prob)``; a brute-force reference."""
    _check(lat, pot)
    out = []

    def visit(pos, segs, score):
        if pos == lat.N + 1:
            if len(out) >= cap:
                raise CapExceededError(f"more than {cap} derivations")
            out.append((Derivation(list(segs)), score))
            return
        segs.append(Segment(WORD, pos, pos))
        visit(pos + 1, segs, score + pot.word_logp[pos - 1])
        segs.pop()
        for j in lat.arcs_starting_at(pos):
            arc = lat.rel_arcs[j]
            segs.append(Segment(REL, arc.start, arc.end, arc.edge, arc.alias_index))
            visit(arc.end + 1, segs, score + pot.rel_logp[j])
            segs.pop()

    visit(1, [], 0.0)
    return out
