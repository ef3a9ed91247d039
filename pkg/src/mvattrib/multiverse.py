"""Alternative timelines around a search interaction and the Distance Score.

Three ending spots are compared for a converting session with search:

* actual: the vector of the purchased product's purchase token;
* w1: sessions replayed up to and including the post-search click, then sampled;
* w2: sessions replayed up to just before the query, then sampled.

Both generated timelines stop at the original purchase position, and each
ending spot is the mean vector of the final tokens of ``T`` samples.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .browse import sample_jobs
from .core import (
    FormatError,
    InteractionKind,
    ProductToken,
    SearchEvent,
    derive_seed,
    event_token_offsets,
    tokenize_session,
)
from .embed import cosine_distance

MV_MAGIC = "#mvattrib-mv v1"
SATURATION_EPS = 1e-6


@dataclass(frozen=True)
class InterventionSpec:
    query_index: int
    click_index: int
    purchase_index: int

    def __post_init__(self):
        if not 0 <= self.query_index < self.click_index < self.purchase_index:
            raise ValueError(f"invalid intervention indices {self}")


@dataclass(frozen=True)
class TimelineTriple:
    actual_end: np.ndarray
    w1_end: np.ndarray
    w2_end: np.ndarray
    d1: float
    d2: float


@dataclass(frozen=True)
class DistanceScore:
    raw: float
    saturated: bool = False
    normalized: float = float("nan")


@dataclass(frozen=True)
class MultiverseResult:
    session_id: str
    spec: InterventionSpec
    timelines: TimelineTriple
    score: DistanceScore


def locate_search_interaction(session):
    """Token positions of the first search with a click that precedes the purchase."""
    purchase_event = session.purchase_position()
    if purchase_event is None:
        raise ValueError(f"session {session.session_id!r} did not convert")
    offsets = event_token_offsets(session)
    for j, ev in enumerate(session.events[:purchase_event]):
        if isinstance(ev, SearchEvent) and ev.clicked:
            return InterventionSpec(offsets[j], offsets[j] + 1, offsets[purchase_event])
    raise ValueError(f"session {session.session_id!r} has no clicked search before its purchase")


def w1_prefix(tokens, spec):
    return tokens[: spec.click_index + 1]


def w2_prefix(tokens, spec):
    # empty prefixes are fine: the model always starts from its start token
    return tokens[: spec.query_index]


def actual_end(session, space):
    return np.asarray(space.vector(ProductToken(session.purchased_product, InteractionKind.PURCHASE)))


class _EndTable:
    """Embedding of every model vocabulary entry, for averaging sampled endings."""

    def __init__(self, model, space):
        self.vectors = np.array([space.vector(t) for t in model.vocab])

    def mean_end(self, samples):
        return self.vectors[samples[:, -1]].mean(axis=0)


def _timeline_seed(decoder, session_id, name):
    return derive_seed(decoder.seed, session_id, name)


def _generate(session, spec, model, space, decoder, which):
    tokens = tokenize_session(session)
    prefix = w1_prefix(tokens, spec) if which == "w1" else w2_prefix(tokens, spec)
    n_steps = spec.purchase_index + 1 - len(prefix)
    job = (model.encode(prefix), n_steps, _timeline_seed(decoder, session.session_id, which), decoder.T)
    (samples,) = sample_jobs(model, [job], decoder)
    return _EndTable(model, space).mean_end(samples)


def generate_w1(session, spec, model, space, decoder):
    return _generate(session, spec, model, space, decoder, "w1")


def generate_w2(session, spec, model, space, decoder):
    return _generate(session, spec, model, space, decoder, "w2")


def distance_score(d1, d2):
    """d2 / d1**2; a zero d1 is clamped and the score flagged as saturated."""
    saturated = d1 < SATURATION_EPS
    d1 = max(d1, SATURATION_EPS)
    return DistanceScore(raw=d2 / (d1 * d1), saturated=saturated)


def normalize_scores(raw_scores):
    """Shift by the median, then signed log1p: monotone and centred on zero."""
    raw = np.asarray(raw_scores, dtype=np.float64)
    if raw.size == 0:
        raise ValueError("no scores to normalise")
    shifted = raw - np.median(raw)
    return np.sign(shifted) * np.log1p(np.abs(shifted))


def _triple(session, end_w1, end_w2, space):
    at = actual_end(session, space)
    d1 = cosine_distance(end_w1, at)
    d2 = cosine_distance(end_w2, at)
    return TimelineTriple(at, end_w1, end_w2, d1, d2)


def run_multiverse(session, model, space, decoder):
    return run_multiverse_batch([session], model, space, decoder)[0]


def run_multiverse_batch(sessions, model, space, decoder, batch_sessions=16, threads=1):
    """Score many sessions; every timeline has its own seed so batching never changes results."""
    table = _EndTable(model, space)
    prepared = []
    for s in sessions:
        spec = locate_search_interaction(s)
        tokens = tokenize_session(s)
        jobs = []
        for which, prefix in (("w1", w1_prefix(tokens, spec)), ("w2", w2_prefix(tokens, spec))):
            jobs.append((model.encode(prefix), spec.purchase_index + 1 - len(prefix),
                         _timeline_seed(decoder, s.session_id, which), decoder.T))
        prepared.append((s, spec, jobs))

    chunks = [prepared[a:a + batch_sessions] for a in range(0, len(prepared), batch_sessions)]

    def run_chunk(chunk):
        samples = sample_jobs(model, [j for _, _, jobs in chunk for j in jobs], decoder)
        out = []
        for n, (s, spec, _) in enumerate(chunk):
            tri = _triple(s, table.mean_end(samples[2 * n]), table.mean_end(samples[2 * n + 1]), space)
            out.append(MultiverseResult(s.session_id, spec, tri, distance_score(tri.d1, tri.d2)))
        return out

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run_chunk, chunks))
    else:
        parts = [run_chunk(c) for c in chunks]
    results = [r for p in parts for r in p]
    if results:
        norm = normalize_scores([r.score.raw for r in results])
        results = [
            MultiverseResult(r.session_id, r.spec, r.timelines,
                             DistanceScore(r.score.raw, r.score.saturated, float(v)))
            for r, v in zip(results, norm)
        ]
    return results


# ---------------------------------------------------------------------------
# results file


def write_results(results, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(MV_MAGIC + "\n")
        for r in results:
            t = r.timelines
            fh.write(f"{r.session_id}\t{t.d1!r}\t{t.d2!r}\t{r.score.raw!r}\t{r.score.normalized!r}\n")


def read_results(path):
    """Rows of (session_id, d1, d2, raw_ds, norm_ds)."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        if fh.readline().rstrip("\n") != MV_MAGIC:
            raise FormatError(f"{path}: missing header {MV_MAGIC!r}")
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 5:
                raise FormatError(f"{path} line {lineno}: expected 5 fields")
            rows.append((parts[0], *(float(x) for x in parts[1:])))
    return rows

