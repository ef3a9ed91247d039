"""Interaction-specific product embeddings (CBOW + negative sampling) and query vectors."""

import logging
from collections import Counter
from dataclasses import dataclass, field

import numba
import numpy as np

from .core import FormatError, InteractionKind, ProductToken, QueryToken, parse_token

log = logging.getLogger(__name__)

EMBED_MAGIC = "#mvattrib-emb v1"


@dataclass(frozen=True)
class EmbedTrainConfig:
    dim: int = 48
    window: int = 5
    negatives: int = 5
    epochs: int = 25
    learning_rate: float = 0.025
    min_learning_rate: float = 0.0001
    min_count: int = 20  # rarer tokens keep near-initial vectors that crowd every neighbourhood
    seed: int = 0
    # >1 runs unsynchronised updates in parallel; results are then not reproducible
    workers: int = 1
    # evaluate the objective with a fixed negative stream after every epoch
    track_loss: bool = False

    def __post_init__(self):
        for name in ("dim", "window", "negatives", "epochs", "min_count", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 < self.min_learning_rate <= self.learning_rate:
            raise ValueError("need 0 < min_learning_rate <= learning_rate")


@dataclass(frozen=True)
class QueryEmbedConfig:
    N: int = 20

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")


@dataclass
class EmbeddingSpace:
    tokens: list
    vectors: np.ndarray
    counts: np.ndarray = None
    min_count: int = None
    query_vectors: dict = field(default_factory=dict)
    loss_history: list = field(default_factory=list)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.shape != (len(self.tokens), self.vectors.shape[-1]):
            raise ValueError("one vector per token expected")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self._unit = None

    @property
    def dim(self):
        return self.vectors.shape[1]

    def __contains__(self, token):
        if isinstance(token, QueryToken):
            return token.query_id in self.query_vectors
        return token in self.index

    def __len__(self):
        return len(self.tokens)

    def vector(self, token):
        if isinstance(token, QueryToken):
            try:
                return self.query_vectors[token.query_id]
            except KeyError:
                raise KeyError(f"no vector for query {token.query_id!r}") from None
        try:
            return self.vectors[self.index[token]]
        except KeyError:
            raise KeyError(f"token {token} not in vocabulary") from None

    def tokens_of_kind(self, kind):
        return [t for t in self.tokens if t.kind is kind]

    def unit_vectors(self):
        if self._unit is None:
            self._unit = self.vectors / np.linalg.norm(self.vectors, axis=1, keepdims=True)
        return self._unit

    def centroid(self):
        return self.vectors.mean(axis=0)


def cosine_distance(u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine distance undefined for a zero vector")
    return float(min(2.0, max(0.0, 1.0 - float(u @ v) / (nu * nv))))


def nearest_to_vector(space, vec, k, kind=None, exclude=()):
    """Up to ``k`` tokens closest to ``vec``; equal distances keep vocabulary order."""
    vec = np.asarray(vec, dtype=np.float64)
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        raise ValueError("cosine distance undefined for a zero vector")
    dist = 1.0 - space.unit_vectors() @ (vec / norm)
    np.clip(dist, 0.0, 2.0, out=dist)
    keep = np.ones(len(space), dtype=bool)
    if kind is not None:
        keep &= np.array([t.kind is kind for t in space.tokens])
    for t in exclude:
        if t in space.index:
            keep[space.index[t]] = False
    idx = np.flatnonzero(keep)
    order = idx[np.argsort(dist[idx], kind="stable")[:k]]
    return [(space.tokens[i], float(dist[i])) for i in order]


def nearest_neighbors(space, token, k, kind=None):
    if token not in space.index:
        raise KeyError(f"token {token} not in vocabulary")
    return nearest_to_vector(space, space.vector(token), k, kind=kind, exclude=(token,))


# ---------------------------------------------------------------------------
# CBOW with negative sampling


@numba.njit(cache=True)
def _next_u64(state):
    # xorshift64* on a one-element state array
    x = state[0]
    x ^= x >> np.uint64(12)
    x ^= x << np.uint64(25)
    x ^= x >> np.uint64(27)
    state[0] = x
    return x * np.uint64(2685821657736338717)


@numba.njit(cache=True)
def _uniform(state):
    return (_next_u64(state) >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@numba.njit(cache=True)
def _log_sigmoid(x):
    if x < -30.0:
        return x
    return -np.log1p(np.exp(-x))


@numba.njit(cache=True)
def _cbow_pass(corpus, offsets, seq_lo, seq_hi, syn0, syn1, neg_cdf, window, negatives,
               lr_start, lr_end, words_before, total_words, state, update):
    """One sweep over sequences [seq_lo, seq_hi); returns (summed loss, centers)."""
    dim = syn0.shape[1]
    h = np.empty(dim)
    grad_h = np.empty(dim)
    loss = 0.0
    centers = 0
    done = words_before
    lr = lr_start
    for s in range(seq_lo, seq_hi):
        a, b = offsets[s], offsets[s + 1]
        for pos in range(a, b):
            if update:
                lr = lr_start - (lr_start - lr_end) * (done / total_words)
                if lr < lr_end:
                    lr = lr_end
            done += 1
            lo = max(a, pos - window)
            hi = min(b, pos + window + 1)
            n_ctx = hi - lo - 1
            if n_ctx <= 0:
                continue
            h[:] = 0.0
            for c in range(lo, hi):
                if c != pos:
                    h += syn0[corpus[c]]
            h /= n_ctx
            grad_h[:] = 0.0
            target = corpus[pos]
            for d in range(negatives + 1):
                if d == 0:
                    w = target
                    label = 1.0
                else:
                    w = np.searchsorted(neg_cdf, _uniform(state), side="right")
                    if w >= neg_cdf.shape[0]:
                        w = neg_cdf.shape[0] - 1
                    if w == target:
                        continue
                    label = 0.0
                f = 0.0
                for j in range(dim):
                    f += h[j] * syn1[w, j]
                if label == 1.0:
                    loss -= _log_sigmoid(f)
                else:
                    loss -= _log_sigmoid(-f)
                if update:
                    sig = 1.0 / (1.0 + np.exp(-f)) if f > -30.0 else 0.0
                    g = (label - sig) * lr
                    for j in range(dim):
                        grad_h[j] += g * syn1[w, j]
                        syn1[w, j] += g * h[j]
            if update:
                for c in range(lo, hi):
                    if c != pos:
                        syn0[corpus[c]] += grad_h
            centers += 1
    return loss, centers


@numba.njit(cache=True, parallel=True)
def _cbow_parallel(corpus, offsets, bounds, syn0, syn1, neg_cdf, window, negatives,
                   lr_start, lr_end, words_before, total_words, states):
    n = bounds.shape[0] - 1
    losses = np.zeros(n)
    counts = np.zeros(n, dtype=np.int64)
    for k in numba.prange(n):
        st = states[k:k + 1]
        # each chunk advances the schedule as if it were the whole corpus
        l, c = _cbow_pass(corpus, offsets, bounds[k], bounds[k + 1], syn0, syn1, neg_cdf,
                          window, negatives, lr_start, lr_end, words_before, total_words, st, True)
        losses[k] = l
        counts[k] = c
    return losses.sum(), counts.sum()


def build_vocabulary(token_sequences, min_count):
    counts = Counter(t for seq in token_sequences for t in seq if isinstance(t, ProductToken))
    kept = [t for t, c in counts.items() if c >= min_count]
    kept.sort(key=lambda t: (-counts[t], str(t)))
    return kept, np.array([counts[t] for t in kept], dtype=np.int64)


def train_prod2vec(token_sequences, config):
    """CBOW over product tokens; query tokens are skipped, windows stay inside a session."""
    if not token_sequences:
        raise ValueError("empty corpus")
    tokens, counts = build_vocabulary(token_sequences, config.min_count)
    if not tokens:
        raise ValueError(f"no token reaches min_count={config.min_count}")
    index = {t: i for i, t in enumerate(tokens)}
    flat, offsets = [], [0]
    for seq in token_sequences:
        ids = [index[t] for t in seq if t in index]
        flat.extend(ids)
        offsets.append(len(flat))
    corpus = np.asarray(flat, dtype=np.int64)
    offsets = np.asarray(offsets, dtype=np.int64)

    rng = np.random.default_rng(config.seed)
    syn0 = (rng.random((len(tokens), config.dim)) - 0.5) / config.dim
    syn1 = np.zeros((len(tokens), config.dim))
    weights = counts.astype(np.float64) ** 0.75
    neg_cdf = np.cumsum(weights / weights.sum())
    state = np.array([rng.integers(1, 2**63)], dtype=np.uint64)

    n_words = len(corpus)
    total = max(1, n_words * config.epochs)
    history = []
    for epoch in range(config.epochs):
        if config.workers > 1:
            bounds = np.linspace(0, len(offsets) - 1, config.workers + 1).astype(np.int64)
            states = rng.integers(1, 2**63, size=config.workers).astype(np.uint64)
            loss, centers = _cbow_parallel(corpus, offsets, bounds, syn0, syn1, neg_cdf,
                                           config.window, config.negatives, config.learning_rate,
                                           config.min_learning_rate, epoch * n_words, total, states)
        else:
            loss, centers = _cbow_pass(corpus, offsets, 0, len(offsets) - 1, syn0, syn1, neg_cdf,
                                       config.window, config.negatives, config.learning_rate,
                                       config.min_learning_rate, epoch * n_words, total, state, True)
        entry = {"epoch": epoch + 1, "train_loss": loss / max(centers, 1)}
        if config.track_loss:
            entry["loss"] = negative_sampling_loss(corpus, offsets, syn0, syn1, neg_cdf, config)
        history.append(entry)
        log.debug("prod2vec epoch %d: %s", epoch + 1, entry)

    return EmbeddingSpace(tokens, syn0, counts=counts, min_count=config.min_count,
                          loss_history=history)


def negative_sampling_loss(corpus, offsets, syn0, syn1, neg_cdf, config):
    """Mean CBOW-NS objective per center, with the same negative draws on every call."""
    state = np.array([(config.seed * 2 + 1) % 2**64], dtype=np.uint64)
    loss, centers = _cbow_pass(corpus, offsets, 0, len(offsets) - 1, syn0, syn1, neg_cdf,
                               config.window, config.negatives, 0.0, 0.0, 0, 1, state, False)
    return loss / max(centers, 1)


# ---------------------------------------------------------------------------
# queries


def embed_query(query_id, engine, space, config=QueryEmbedConfig()):
    """Deep-set mean of the Detail vectors of the engine's top-N results.

    ``engine`` may be a search engine or an already ranked list of product ids.
    Results missing from the vocabulary are skipped.
    """
    if isinstance(engine, (list, tuple)):
        results = list(engine)[: config.N]
    else:
        results = engine.search(query_id, config.N)
    vecs = []
    for p in results:
        tok = ProductToken(p, InteractionKind.DETAIL)
        if tok in space.index:
            vecs.append(space.vectors[space.index[tok]])
    if not vecs:
        raise ValueError(f"query {query_id!r}: none of the top-{config.N} results is in vocabulary")
    if len(vecs) < len(results):
        log.debug("query %s: %d/%d results out of vocabulary", query_id,
                  len(results) - len(vecs), len(results))
    return np.mean(vecs, axis=0)


def attach_queries(space, engine, config=QueryEmbedConfig()):
    """Compute and cache vectors for every query the engine knows."""
    for q in engine.queries:
        space.query_vectors[q] = embed_query(q, engine, space, config)
    return space


# ---------------------------------------------------------------------------
# file format


def _fmt(x):
    return repr(float(x))


def write_embeddings(space, path):
    rows = [(str(t), space.vectors[i]) for i, t in enumerate(space.tokens)]
    rows += [(str(QueryToken(q)), v) for q, v in sorted(space.query_vectors.items())]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(EMBED_MAGIC + "\n")
        fh.write(f"{space.dim} {len(rows)}\n")
        for name, vec in rows:
            fh.write(name + " " + " ".join(_fmt(x) for x in vec) + "\n")


def read_embeddings(path):
    with open(path, encoding="utf-8") as fh:
        if fh.readline().rstrip("\n") != EMBED_MAGIC:
            raise FormatError(f"{path}: missing header {EMBED_MAGIC!r}")
        try:
            dim, size = (int(x) for x in fh.readline().split())
        except ValueError:
            raise FormatError(f"{path} line 2: expected 'dim vocab_size'") from None
        tokens, vecs, queries = [], [], {}
        for lineno, line in enumerate(fh, start=3):
            parts = line.rstrip("\n").split(" ")
            if len(parts) != dim + 1:
                raise FormatError(f"{path} line {lineno}: expected {dim} values")
            tok = parse_token(parts[0])
            vec = np.array([float(x) for x in parts[1:]])
            if isinstance(tok, QueryToken):
                queries[tok.query_id] = vec
            else:
                tokens.append(tok)
                vecs.append(vec)
    if len(tokens) + len(queries) != size:
        raise FormatError(f"{path}: header announces {size} tokens, found {len(tokens) + len(queries)}")
    space = EmbeddingSpace(tokens, np.array(vecs).reshape(len(tokens), dim))
    space.query_vectors = queries
    return space
