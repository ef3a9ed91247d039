"""Recurrent next-token browsing model over the shared token space.

A single-layer LSTM reads frozen token vectors and predicts the next token
through a softmax over the vocabulary.  Every sequence is read after a
start-of-session token whose input vector is the centroid of the product
vectors, so an empty prefix is a valid starting point for generation.
"""

import enum
import json
import logging
from fractions import Fraction
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import FormatError, QueryToken, parse_token

log = logging.getLogger(__name__)

MODEL_MAGIC = b"#mvattrib-model v1\n"
PARAM_NAMES = ("Wx", "Wh", "b", "Wo", "bo")


class DecodeMethod(enum.Enum):
    TOPK = "topk"
    TOPK_TEMP = "topk_temp"
    TOPP = "topp"


@dataclass(frozen=True)
class DecoderConfig:
    method: DecodeMethod = DecodeMethod.TOPK
    K: int = 3
    temperature: float = 1.0
    P: float = 0.9
    T: int = 100
    max_len: int = 64
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "method", DecodeMethod(self.method))
        if self.K < 1 or self.T < 1 or self.max_len < 1:
            raise ValueError("K, T and max_len must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0 < self.P <= 1:
            raise ValueError("P must lie in (0, 1]")


@dataclass(frozen=True)
class BrowseTrainConfig:
    hidden: int = 128
    layers: int = 1
    epochs: int = 6
    batch_size: int = 32
    learning_rate: float = 1.0
    clip_norm: float = 5.0
    holdout_fraction: float = 0.1
    max_len: int = 64
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.layers != 1:
            raise ValueError("only single-layer models are supported")
        for name in ("hidden", "epochs", "batch_size", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0 or self.clip_norm <= 0:
            raise ValueError("learning_rate and clip_norm must be positive")
        if not 0 < self.holdout_fraction < 0.5:
            raise ValueError("holdout_fraction must lie in (0, 0.5)")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


@dataclass
class BrowsingModel:
    vocab: list
    inputs: np.ndarray  # (|vocab| + 1, dim); last row is the start token
    params: dict
    config: BrowseTrainConfig = field(default_factory=BrowseTrainConfig)
    holdout_loss: float = float("nan")
    loss_history: list = field(default_factory=list)

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.vocab)}

    @property
    def bos(self):
        return len(self.vocab)

    @property
    def hidden(self):
        return self.params["Wh"].shape[0]

    def encode(self, tokens):
        try:
            return [self.index[t] for t in tokens]
        except KeyError as exc:
            raise KeyError(f"token {exc.args[0]} not in model vocabulary") from None

    # -- recurrence ----------------------------------------------------------

    def step(self, x, h, c):
        p = self.params
        H = h.shape[1]
        z = x @ p["Wx"] + h @ p["Wh"] + p["b"]
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H:2 * H])
        o = _sigmoid(z[:, 2 * H:3 * H])
        g = np.tanh(z[:, 3 * H:])
        c = f * c + i * g
        h = o * np.tanh(c)
        return h, c, (i, f, o, g)

    def zero_state(self, batch):
        dt = self.params["Wh"].dtype
        return np.zeros((batch, self.hidden), dt), np.zeros((batch, self.hidden), dt)

    def forward(self, ids):
        """Run the recurrence over ``ids`` (time, batch); returns hidden states and caches."""
        T, B = ids.shape
        h, c = self.zero_state(B)
        xs = self.inputs[ids]
        hs = np.empty((T + 1, B, self.hidden), h.dtype)
        cs = np.empty_like(hs)
        hs[0], cs[0] = h, c
        gates = []
        for t in range(T):
            h, c, g = self.step(xs[t], h, c)
            hs[t + 1], cs[t + 1] = h, c
            gates.append(g)
        return xs, hs, cs, gates

    def logits(self, hs):
        return hs @ self.params["Wo"] + self.params["bo"]


# ---------------------------------------------------------------------------
# loss and gradients


def loss_and_grads(model, ids, targets, mask, with_grads=True):
    """Mean next-token cross-entropy over unmasked positions, with BPTT gradients.

    ids, targets, mask: (time, batch).  Padding must sit at the end of each column.
    """
    p = model.params
    xs, hs, cs, gates = model.forward(ids)
    T, B = ids.shape
    H = model.hidden
    logits = model.logits(hs[1:])
    z = logits - logits.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
    n = mask.sum()
    loss = float(((logsum - picked) * mask).sum() / n)
    if not with_grads:
        return loss, None

    dlogits = np.exp(z - logsum[..., None])
    np.put_along_axis(dlogits, targets[..., None],
                      np.take_along_axis(dlogits, targets[..., None], axis=-1) - 1.0, axis=-1)
    dlogits *= (mask / n)[..., None].astype(dlogits.dtype)
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    flat_h = hs[1:].reshape(T * B, H)
    flat_d = dlogits.reshape(T * B, -1)
    grads["Wo"] = flat_h.T @ flat_d
    grads["bo"] = flat_d.sum(axis=0)
    dh_all = dlogits @ p["Wo"].T

    dh_next = np.zeros((B, H), hs.dtype)
    dc_next = np.zeros((B, H), hs.dtype)
    dz = np.empty((B, 4 * H), hs.dtype)
    for t in reversed(range(T)):
        i, f, o, g = gates[t]
        dh = dh_all[t] + dh_next
        tc = np.tanh(cs[t + 1])
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz[:, :H] = dc * g * i * (1.0 - i)
        dz[:, H:2 * H] = dc * cs[t] * f * (1.0 - f)
        dz[:, 2 * H:3 * H] = dh * tc * o * (1.0 - o)
        dz[:, 3 * H:] = dc * i * (1.0 - g * g)
        dc_next = dc * f
        grads["Wx"] += xs[t].T @ dz
        grads["Wh"] += hs[t].T @ dz
        grads["b"] += dz.sum(axis=0)
        dh_next = dz @ p["Wh"].T
    return loss, grads


# ---------------------------------------------------------------------------
# training


def init_model(vocab, inputs, config, rng):
    dt = np.dtype(config.dtype)
    D = inputs.shape[1]
    H = config.hidden
    V = len(vocab)

    def uni(shape, fan):
        s = 1.0 / np.sqrt(fan)
        return rng.uniform(-s, s, size=shape).astype(dt)

    b = np.zeros(4 * H, dt)
    b[H:2 * H] = 1.0  # forget gate starts open
    params = {
        "Wx": uni((D, 4 * H), D + H),
        "Wh": uni((H, 4 * H), D + H),
        "b": b,
        "Wo": uni((H, V), H),
        "bo": np.zeros(V, dt),
    }
    return BrowsingModel(list(vocab), inputs.astype(dt), params, config)


def model_vocabulary(space):
    """Product tokens of the space followed by its queries, in file order."""
    vocab = list(space.tokens) + [QueryToken(q) for q in sorted(space.query_vectors)]
    rows = [space.vector(t) for t in vocab]
    rows.append(space.centroid())
    return vocab, np.array(rows)


def holdout_split(n, fraction, seed):
    """Indices (train, holdout) of a seeded per-session split."""
    perm = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,))).permutation(n)
    n_hold = max(1, int(round(n * fraction)))
    return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])


def _prepare(sequences, model, max_len):
    """Encode token lists, dropping unknown tokens and splitting long sessions."""
    out = []
    dropped = 0
    for seq in sequences:
        ids = [model.index[t] for t in seq if t in model.index]
        if len(ids) < 2:
            dropped += 1
            continue
        for a in range(0, len(ids), max_len):
            chunk = ids[a:a + max_len]
            if len(chunk) >= 2 or a == 0:
                out.append(chunk)
    if dropped:
        log.warning("dropped %d sequences with fewer than 2 in-vocabulary tokens", dropped)
    return out


def _batch(chunks, bos):
    """Inputs start with the start token; targets are the sequence itself."""
    T = max(len(c) for c in chunks)
    B = len(chunks)
    ids = np.full((T, B), bos, dtype=np.int64)
    targets = np.zeros((T, B), dtype=np.int64)
    mask = np.zeros((T, B))
    for j, c in enumerate(chunks):
        ids[1:len(c), j] = c[:-1]
        targets[:len(c), j] = c
        mask[:len(c), j] = 1.0
    return ids, targets, mask


def _batches(chunks, batch_size, rng):
    order = rng.permutation(len(chunks))
    # sort within large windows so batches carry little padding
    window = batch_size * 50
    batches = []
    for a in range(0, len(order), window):
        part = sorted(order[a:a + window], key=lambda i: (len(chunks[i]), i))
        batches += [part[b:b + batch_size] for b in range(0, len(part), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def sequence_loss(model, chunks, batch_size=256):
    total, count = 0.0, 0.0
    for a in range(0, len(chunks), batch_size):
        ids, targets, mask = _batch(chunks[a:a + batch_size], model.bos)
        loss, _ = loss_and_grads(model, ids, targets, mask, with_grads=False)
        total += loss * mask.sum()
        count += mask.sum()
    return total / count


def train_browsing_model(sequences, space, config=BrowseTrainConfig(), *, init=None):
    """Teacher-forced SGD with gradient-norm clipping; the holdout is split by session."""
    vocab, inputs = model_vocabulary(space)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(3,)))
    model = init or init_model(vocab, inputs, config, rng)
    train_idx, hold_idx = holdout_split(len(sequences), config.holdout_fraction, config.seed)
    train = _prepare([sequences[i] for i in train_idx], model, config.max_len)
    hold = _prepare([sequences[i] for i in hold_idx], model, config.max_len)
    if not train:
        raise ValueError("no training sequences left after vocabulary filtering")

    dt = model.params["Wh"].dtype
    for epoch in range(config.epochs):
        total, count = 0.0, 0.0
        for batch in _batches(train, config.batch_size, rng):
            ids, targets, mask = _batch([train[i] for i in batch], model.bos)
            loss, grads = loss_and_grads(model, ids, targets, mask)
            norm = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
            scale = config.learning_rate * min(1.0, config.clip_norm / max(norm, 1e-12))
            for k, g in grads.items():
                model.params[k] -= dt.type(scale) * g
            total += loss * mask.sum()
            count += mask.sum()
        entry = {"epoch": epoch + 1, "train_loss": float(total / count)}
        if hold:
            entry["holdout_loss"] = float(sequence_loss(model, hold))
        model.loss_history.append(entry)
        log.info("browse epoch %d: %s", epoch + 1, entry)
    model.holdout_loss = sequence_loss(model, hold) if hold else float("nan")
    return model


# ---------------------------------------------------------------------------
# inference


def _encode_prefixes(model, prefixes):
    """Final (h, c) after reading the start token and each prefix."""
    B = len(prefixes)
    T = 1 + max(len(p) for p in prefixes)
    ids = np.full((T, B), model.bos, dtype=np.int64)
    for j, p in enumerate(prefixes):
        ids[1:1 + len(p), j] = p
    _, hs, cs, _ = model.forward(ids)
    last = np.array([len(p) + 1 for p in prefixes])
    cols = np.arange(B)
    return hs[last, cols], cs[last, cols]


def next_token_distribution(model, prefix):
    if not prefix:
        raise ValueError("prefix must be non-empty")
    h, _ = _encode_prefixes(model, [model.encode(prefix)])
    return _softmax(model.logits(h).astype(np.float64))[0]


def _topk_mask(p, K):
    """Keep the K largest entries per row; ties go to the lower index."""
    V = p.shape[1]
    if K >= V:
        return np.ones_like(p, dtype=bool)
    thr = np.partition(p, V - K, axis=1)[:, V - K][:, None]
    above = p > thr
    need = K - above.sum(axis=1, keepdims=True)
    tied = p == thr
    return above | (tied & (np.cumsum(tied, axis=1) <= need))


def _topp_mask(p, P):
    order = np.argsort(-p, axis=1, kind="stable")
    sorted_p = np.take_along_axis(p, order, axis=1)
    cum = np.cumsum(sorted_p, axis=1)
    keep_n = (cum < P).sum(axis=1, keepdims=True) + 1
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(p.shape[1])[None, :].repeat(p.shape[0], 0), axis=1)
    return ranks < keep_n


def _filter_support(probs, config):
    """Tempered rows and the mask of entries each filter keeps."""
    p = np.asarray(probs, dtype=np.float64)
    if config.method is DecodeMethod.TOPK_TEMP:
        with np.errstate(divide="ignore"):
            z = np.log(p) / config.temperature
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
    if config.method is DecodeMethod.TOPP:
        return p, _topp_mask(p, config.P)
    return p, _topk_mask(p, config.K)


def filter_rows(probs, config):
    """Row-wise Top-K / temperature Top-K / nucleus filtering, renormalised."""
    p, keep = _filter_support(probs, config)
    out = np.where(keep, p, 0.0)
    out /= out.sum(axis=1, keepdims=True)
    return out


def filter_distribution(probs, config):
    """One filtered distribution, renormalised in exact rational arithmetic.

    Each kept entry is the correctly rounded value of p_i / sum(kept p), so
    [0.5, 0.3, 0.1, 0.1] under P=0.7 gives exactly [0.625, 0.375, 0, 0].
    """
    p, keep = _filter_support(np.asarray(probs, dtype=np.float64)[None, :], config)
    kept = [Fraction(float(x)) for x in p[0][keep[0]]]
    total = sum(kept)
    out = np.zeros(p.shape[1])
    out[keep[0]] = [float(x / total) for x in kept]
    return out


def draw_rows(filtered, u):
    """Inverse-CDF draw of one index per row, never landing on a zero entry."""
    cum = np.cumsum(filtered, axis=1)
    idx = (cum <= u[:, None]).sum(axis=1)
    V = filtered.shape[1]
    last_nz = V - 1 - np.argmax(filtered[:, ::-1] > 0, axis=1)
    return np.minimum(idx, last_nz)


def sample_streams(seed, n_samples, n_steps):
    """Uniform variates, row i being the stream of sample i under ``seed``."""
    if n_steps == 0:
        return np.zeros((n_samples, 0))
    return np.stack([
        np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,))).random(n_steps)
        for i in range(n_samples)
    ])


def _draw_topk(logits, u, config):
    """Top-K draw that only normalises the K kept logits.

    Equivalent to ``draw_rows(filter_rows(softmax(logits)))`` up to rounding: the
    kept set, its index order and the tie rule are the same.
    """
    z = np.asarray(logits)
    B, V = z.shape
    K = config.K
    top = np.argpartition(z, V - K, axis=1)[:, V - K:]
    top.sort(axis=1)
    vals = np.take_along_axis(z, top, axis=1)
    thr = vals.min(axis=1, keepdims=True)
    # argpartition splits ties arbitrarily; rows with a shared threshold use the stable mask
    bad = np.flatnonzero((z == thr).sum(axis=1) != (vals == thr).sum(axis=1))
    if bad.size:
        top[bad] = np.nonzero(_topk_mask(z[bad], K))[1].reshape(bad.size, K)
        vals[bad] = np.take_along_axis(z[bad], top[bad], axis=1)
    x = vals.astype(np.float64)
    if config.method is DecodeMethod.TOPK_TEMP:
        x /= config.temperature
    pos = draw_rows(_softmax(x), u)
    return top[np.arange(B), pos]


def _draw_next(model, h, u, config):
    logits = model.logits(h)
    if config.method is not DecodeMethod.TOPP and 4 * config.K < logits.shape[1]:
        return _draw_topk(logits, u, config)
    return draw_rows(filter_rows(_softmax(logits.astype(np.float64)), config), u)


def sample_jobs(model, jobs, config):
    """Batched autoregressive sampling.

    jobs: list of (prefix_ids, n_steps, seed, n_samples).  Returns one int array
    (n_samples, n_steps) of generated ids per job.  Rows are processed longest
    first so finished samples drop out of the batch.
    """
    prefixes = [list(j[0]) for j in jobs]
    h0, c0 = _encode_prefixes(model, prefixes)
    rows = np.concatenate([np.full(j[3], k) for k, j in enumerate(jobs)])
    steps = np.concatenate([np.full(j[3], j[1]) for j in jobs])
    n_max = int(steps.max()) if len(steps) else 0
    U = np.zeros((len(rows), n_max))
    r = 0
    for prefix, n_steps, seed, n in jobs:
        U[r:r + n, :n_steps] = sample_streams(seed, n, n_steps)
        r += n
    order = np.argsort(-steps, kind="stable")
    h, c, U, steps = h0[rows[order]], c0[rows[order]], U[order], steps[order]
    out = np.zeros((len(rows), n_max), dtype=np.int64)
    for t in range(n_max):
        n_active = int(np.count_nonzero(steps > t))
        h, c = h[:n_active], c[:n_active]
        tok = _draw_next(model, h, U[:n_active, t], config)
        out[:n_active, t] = tok
        if t + 1 < n_max:
            h, c, _ = model.step(model.inputs[tok], h, c)
    unsorted = np.empty_like(out)
    unsorted[order] = out
    result, r = [], 0
    for prefix, n_steps, seed, n in jobs:
        result.append(unsorted[r:r + n, :n_steps])
        r += n
    return result


def generate(model, prefix, stop_len, config, sample_index=0):
    """Extend ``prefix`` with sampled tokens until it holds ``stop_len`` tokens.

    Sample ``i`` with a given decoder seed is reproducible on its own and equals
    row ``i`` of the batched sampler.
    """
    if stop_len <= len(prefix):
        raise ValueError("stop_len must exceed the prefix length")
    ids = model.encode(prefix)
    n_steps = stop_len - len(prefix)
    seed_seq = np.random.SeedSequence(config.seed, spawn_key=(sample_index,))
    U = np.random.default_rng(seed_seq).random(n_steps)
    h, c = _encode_prefixes(model, [ids])
    out = []
    for t in range(n_steps):
        tok = _draw_next(model, h, U[t:t + 1], config)
        out.append(int(tok[0]))
        if t + 1 < n_steps:
            h, c, _ = model.step(model.inputs[tok], h, c)
    return list(prefix) + [model.vocab[i] for i in out]


def evaluate_hr_at_k(model, holdout, k, batch_size=256):
    """Share of (non-empty prefix, next token) pairs whose target ranks in the top k."""
    chunks = _prepare(holdout, model, model.config.max_len)
    hits, total = 0, 0
    for a in range(0, len(chunks), batch_size):
        ids, targets, mask = _batch(chunks[a:a + batch_size], model.bos)
        _, hs, _, _ = model.forward(ids)
        logits = model.logits(hs[1:])
        true = np.take_along_axis(logits, targets[..., None], axis=-1)
        rank = (logits > true).sum(axis=-1)
        valid = mask.astype(bool)
        valid[0] = False  # the first token has an empty prefix
        hits += int(((rank < k) & valid).sum())
        total += int(valid.sum())
    if total == 0:
        raise ValueError("holdout has no (prefix, next token) pairs")
    return hits / total


# ---------------------------------------------------------------------------
# checkpoint


def save_model(model, path):
    """Layout: magic line, one JSON header line, then raw little-endian arrays in header order."""
    arrays = [("inputs", model.inputs)] + [(k, model.params[k]) for k in PARAM_NAMES]
    header = {
        "arrays": [{"name": n, "dtype": a.dtype.newbyteorder("<").str, "shape": list(a.shape)}
                   for n, a in arrays],
        "vocab": [str(t) for t in model.vocab],
        "hidden": model.hidden,
        "dim": int(model.inputs.shape[1]),
        "config": asdict(model.config),
        "holdout_loss": model.holdout_loss,
        "loss_history": model.loss_history,
    }
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<")).tobytes())


def load_model(path):
    with open(path, "rb") as fh:
        if fh.readline() != MODEL_MAGIC:
            raise FormatError(f"{path}: not a {MODEL_MAGIC.decode().strip()!r} checkpoint")
        header = json.loads(fh.readline())
        arrays = {}
        for spec in header["arrays"]:
            dt = np.dtype(spec["dtype"])
            n = int(np.prod(spec["shape"])) if spec["shape"] else 1
            buf = fh.read(n * dt.itemsize)
            if len(buf) != n * dt.itemsize:
                raise FormatError(f"{path}: truncated array {spec['name']}")
            arrays[spec["name"]] = np.frombuffer(buf, dtype=dt).reshape(spec["shape"]).astype(dt.newbyteorder("="))
    vocab = [parse_token(s) for s in header["vocab"]]
    config = BrowseTrainConfig(**header["config"])
    model = BrowsingModel(vocab, arrays.pop("inputs"), {k: arrays[k] for k in PARAM_NAMES}, config)
    model.holdout_loss = header["holdout_loss"]
    model.loss_history = header["loss_history"]
    return model

