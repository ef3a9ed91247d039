"""Labeled synthetic sessions with known search causality (NC, CW, CU, SE, ME, SR)."""

import enum
import logging
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .core import (
    FormatError,
    InteractionKind,
    ProductEvent,
    ProductToken,
    QueryToken,
    SearchEvent,
    Session,
    tokenize_session,
)
from .embed import cosine_distance, nearest_neighbors

log = logging.getLogger(__name__)

LABELS_MAGIC = "#mvattrib-labels v1"


class PatternLabel(enum.Enum):
    NC = "NC"
    CW = "CW"
    CU = "CU"
    SE = "SE"
    ME = "ME"
    SR = "SR"


RELEVANT = frozenset({PatternLabel.SE, PatternLabel.ME, PatternLabel.SR})
IRRELEVANT = frozenset({PatternLabel.CU})
SEARCH_LABELS = (PatternLabel.CU, PatternLabel.SE, PatternLabel.ME, PatternLabel.SR)


@dataclass(frozen=True)
class SynthConfig:
    k: int = 2000
    r: float = 0.5
    e: int = 3  # max interactions between click and add
    i: int = 2  # max interactions between add and purchase
    y: int = 4  # max pre-search interactions for ME
    n: int = 20  # candidate query+click pairs for ME
    temperature: float = 0.1  # softmax over cosine similarity
    neighbors: int = 10  # SR target is drawn from this many nearest products
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.r <= 1.0:
            raise ValueError("r must lie in [0, 1]")
        if self.k < 1 or self.n < 1 or self.y < 1 or self.neighbors < 1:
            raise ValueError("k, n, y and neighbors must be positive")
        if self.e < 0 or self.i < 0:
            raise ValueError("e and i must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True)
class LabeledSession:
    session: Session
    label: PatternLabel


def cardinalities(config):
    kr = config.k * Fraction(str(config.r))
    return {
        PatternLabel.NC: 2 * config.k,
        PatternLabel.CW: config.k,
        PatternLabel.CU: config.k,
        PatternLabel.SE: math.floor(kr),
        PatternLabel.ME: math.floor(kr / 2),
        PatternLabel.SR: math.floor(kr / 4),
    }


# ---------------------------------------------------------------------------
# helpers


def _detail(p):
    return ProductToken(p, InteractionKind.DETAIL)


class SimilaritySampler:
    """Draws products with probability softmax(cosine similarity / temperature)."""

    def __init__(self, space, temperature):
        self.products = [t.product for t in space.tokens_of_kind(InteractionKind.DETAIL)]
        self.row = {p: i for i, p in enumerate(self.products)}
        vecs = np.array([space.vector(_detail(p)) for p in self.products])
        self.unit = vecs / np.linalg.norm(vecs, axis=1, keepdims=True)
        self.temperature = temperature

    def __contains__(self, product):
        return product in self.row

    def draw(self, anchor, rng):
        a = self.row[anchor]
        z = (self.unit @ self.unit[a]) / self.temperature
        z[a] = -np.inf
        w = np.exp(z - z.max())
        cdf = np.cumsum(w)
        j = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        return self.products[min(j, len(cdf) - 1)]


def in_vocabulary(session, space):
    return all(t in space for t in tokenize_session(session))


def buyable(product, space):
    """True if the add-to-cart and purchase tokens of ``product`` both have vectors."""
    return all(ProductToken(product, k) in space for k in (InteractionKind.ADD, InteractionKind.PURCHASE))


def first_clicked_search(session):
    """Index of the first search event with at least one click, or None."""
    for j, ev in enumerate(session.events):
        if isinstance(ev, SearchEvent) and ev.clicked:
            return j
    return None


def search_pool(sessions):
    """Search events with clicks, cut down to their first click."""
    pool = []
    for s in sessions:
        for ev in s.events:
            if isinstance(ev, SearchEvent) and ev.clicked:
                pool.append(SearchEvent(ev.query_id, ev.clicked[:1]))
    return pool


def position_histogram(sessions):
    """Where the first search falls in converting search sessions, by relative-position decile."""
    hist = np.zeros(10)
    for s in sessions:
        if not s.converted:
            continue
        for j, ev in enumerate(s.events):
            if isinstance(ev, SearchEvent):
                hist[min(9, int(10 * j / (len(s.events) - 1)))] += 1
                break
    if hist.sum() == 0:
        return np.full(10, 0.1)
    return hist / hist.sum()


def _tail(anchor, target, config, sampler, rng):
    """Interactions after the click: up to e, target add, up to i, target purchase."""
    events = [ProductEvent(sampler.draw(anchor, rng), InteractionKind.DETAIL)
              for _ in range(int(rng.integers(config.e + 1)))]
    events.append(ProductEvent(target, InteractionKind.ADD))
    events += [ProductEvent(sampler.draw(target, rng), InteractionKind.DETAIL)
               for _ in range(int(rng.integers(config.i + 1)))]
    events.append(ProductEvent(target, InteractionKind.PURCHASE))
    return events


# ---------------------------------------------------------------------------
# buckets


def gen_CU(base, pool, count, rng, positions=None):
    """Inject a random search into converting sessions without search."""
    if not base or not pool:
        raise ValueError("CU needs converting sessions and a search pool")
    if count > len(base):
        raise ValueError(f"CU: {count} sessions requested, {len(base)} available")
    positions = np.full(10, 0.1) if positions is None else np.asarray(positions)
    cdf = np.cumsum(positions)
    out = []
    for bi in rng.choice(len(base), size=count, replace=False):
        s = base[int(bi)]
        ev = pool[int(rng.integers(len(pool)))]
        decile = min(9, int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")))
        rel = (decile + rng.random()) / 10.0
        # purchase is last: insert anywhere before it
        at = min(int(rel * (len(s.events) - 1)), len(s.events) - 2)
        events = s.events[:at] + (ev,) + s.events[at:]
        out.append(LabeledSession(Session(s.session_id, events), PatternLabel.CU))
    return out


def gen_SE(base, space, config, count, rng, sampler=None):
    """Keep a non-converting search session up to its first click, then buy the clicked product."""
    sampler = sampler or SimilaritySampler(space, config.temperature)
    out = []
    for bi in rng.permutation(len(base)):
        if len(out) == count:
            break
        s = base[int(bi)]
        j = first_clicked_search(s)
        if j is None:
            continue
        ev = s.events[j]
        px = ev.clicked[0]
        if px not in sampler or not buyable(px, space):
            log.warning("SE: clicked product %s lacks a detail, add or purchase vector, skipped", px)
            continue
        events = s.events[:j] + (SearchEvent(ev.query_id, (px,)),) + tuple(_tail(px, px, config, sampler, rng))
        out.append(LabeledSession(Session(s.session_id, events), PatternLabel.SE))
    if len(out) < count:
        raise ValueError(f"SE: only {len(out)} of {count} sessions could be built")
    return out


def choose_farthest_pair(current_vec, candidates, space):
    """Index of the candidate search whose query vector is farthest from ``current_vec``."""
    dists = [cosine_distance(current_vec, space.vector(QueryToken(c.query_id))) for c in candidates]
    return int(np.argmax(dists)), dists


def gen_ME(space, pool, config, count, rng, sampler=None):
    """Short similarity walk from a uniform start, then a far search jump and an SE tail."""
    sampler = sampler or SimilaritySampler(space, config.temperature)
    pool = [ev for ev in pool
            if ev.clicked[0] in sampler and buyable(ev.clicked[0], space) and QueryToken(ev.query_id) in space]
    if len(pool) < config.n:
        raise ValueError(f"ME: search pool holds {len(pool)} usable pairs, need n={config.n}")
    out = []
    for idx in range(count):
        cur = sampler.products[int(rng.integers(len(sampler.products)))]
        pre = [cur]
        for _ in range(int(rng.integers(1, config.y + 1)) - 1):
            cur = sampler.draw(cur, rng)
            pre.append(cur)
        cands = [pool[int(c)] for c in rng.choice(len(pool), size=config.n, replace=False)]
        best, _ = choose_farthest_pair(space.vector(_detail(cur)), cands, space)
        ev = cands[best]
        px = ev.clicked[0]
        events = [ProductEvent(p, InteractionKind.DETAIL) for p in pre]
        events.append(ev)
        events += _tail(px, px, config, sampler, rng)
        out.append(LabeledSession(Session(f"me{idx}", tuple(events)), PatternLabel.ME))
    return out


def gen_SR(base, space, config, count, rng, sampler=None):
    """Like SE, but the purchase is a near neighbour of the clicked product."""
    sampler = sampler or SimilaritySampler(space, config.temperature)
    out = []
    for bi in rng.permutation(len(base)):
        if len(out) == count:
            break
        s = base[int(bi)]
        j = first_clicked_search(s)
        if j is None:
            continue
        ev = s.events[j]
        px = ev.clicked[0]
        if px not in sampler:
            log.warning("SR: clicked product %s has no vector, skipped", px)
            continue
        near = [t.product for t, _ in
                nearest_neighbors(space, _detail(px), config.neighbors, kind=InteractionKind.DETAIL)]
        near = [p for p in near if p != px and buyable(p, space)]
        if not near:
            log.warning("SR: no usable neighbour for %s, skipped", px)
            continue
        rx = near[int(rng.integers(len(near)))]
        events = s.events[:j] + (SearchEvent(ev.query_id, (px,)),) + tuple(_tail(px, rx, config, sampler, rng))
        out.append(LabeledSession(Session(s.session_id, events), PatternLabel.SR))
    if len(out) < count:
        raise ValueError(f"SR: only {len(out)} of {count} sessions could be built")
    return out


def _take(pool, count, rng, bucket):
    if count > len(pool):
        raise ValueError(f"base corpus too small for bucket {bucket}: need {count}, have {len(pool)}")
    picks = rng.choice(len(pool), size=count, replace=False)
    chosen = [pool[int(i)] for i in picks]
    taken = set(int(i) for i in picks)
    rest = [s for j, s in enumerate(pool) if j not in taken]
    return chosen, rest


def compose_dataset(base, space, config):
    """Assemble every bucket at its planned size, shuffle, and give neutral session ids.

    Base sessions are used only if all their tokens have vectors, and no base
    session feeds two buckets.
    """
    sizes = cardinalities(config)
    usable = [s for s in base if in_vocabulary(s, space)]
    log.info("synth: %d of %d base sessions fully in vocabulary", len(usable), len(base))
    converting_plain = [s for s in usable if s.converted and not s.has_search]
    search_nc = [s for s in usable if not s.converted and first_clicked_search(s) is not None]
    non_converting = [s for s in usable if not s.converted and first_clicked_search(s) is None]
    pool = search_pool(usable)
    positions = position_histogram(usable)

    streams = {lab: np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(n,)))
               for n, lab in enumerate(PatternLabel)}
    split = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(99,)))
    sampler = SimilaritySampler(space, config.temperature)

    # SE and SR may skip a few unusable bases, so they get a margin
    se_base, search_nc = _take(search_nc, min(len(search_nc), sizes[PatternLabel.SE] * 11 // 10 + 5), split, "SE")
    sr_base, search_nc = _take(search_nc, min(len(search_nc), sizes[PatternLabel.SR] * 11 // 10 + 5), split, "SR")
    cw, converting_plain = _take(converting_plain, sizes[PatternLabel.CW], split, "CW")
    cu_base, converting_plain = _take(converting_plain, sizes[PatternLabel.CU], split, "CU")
    nc, _ = _take(non_converting + search_nc, sizes[PatternLabel.NC], split, "NC")

    buckets = [
        [LabeledSession(s, PatternLabel.NC) for s in nc],
        [LabeledSession(s, PatternLabel.CW) for s in cw],
    ]
    if sizes[PatternLabel.CU]:
        buckets.append(gen_CU(cu_base, pool, sizes[PatternLabel.CU], streams[PatternLabel.CU], positions))
    if sizes[PatternLabel.SE]:
        buckets.append(gen_SE(se_base, space, config, sizes[PatternLabel.SE], streams[PatternLabel.SE], sampler))
    if sizes[PatternLabel.ME]:
        buckets.append(gen_ME(space, pool, config, sizes[PatternLabel.ME], streams[PatternLabel.ME], sampler))
    if sizes[PatternLabel.SR]:
        buckets.append(gen_SR(sr_base, space, config, sizes[PatternLabel.SR], streams[PatternLabel.SR], sampler))

    items = [ls for b in buckets for ls in b]
    order = split.permutation(len(items))
    width = max(6, len(str(len(items))))
    return [
        LabeledSession(Session(f"sd{n:0{width}d}", items[int(j)].session.events), items[int(j)].label)
        for n, j in enumerate(order)
    ]


# ---------------------------------------------------------------------------
# labels file


def write_labels(labeled, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(LABELS_MAGIC + "\n")
        for ls in labeled:
            fh.write(f"{ls.session.session_id}\t{ls.label.value}\n")


def read_labels(path):
    labels = {}
    with open(path, encoding="utf-8") as fh:
        if fh.readline().rstrip("\n") != LABELS_MAGIC:
            raise FormatError(f"{path}: missing header {LABELS_MAGIC!r}")
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise FormatError(f"{path} line {lineno}: expected session_id and label")
            try:
                labels[parts[0]] = PatternLabel(parts[1])
            except ValueError:
                raise FormatError(f"{path} line {lineno}: unknown label {parts[1]!r}") from None
    return labels
