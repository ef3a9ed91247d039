"""Search attribution deciders (GA, CB, SS, MV), the timeline classifier and reports."""

import enum
from dataclasses import dataclass

import numpy as np

from .core import SearchEvent, tokenize_session
from .embed import cosine_distance
from .multiverse import locate_search_interaction
from .synth import RELEVANT, SEARCH_LABELS

TABLE1_MAGIC = "#mvattrib-table1 v1"
TABLE2_MAGIC = "#mvattrib-table2 v1"
METRICS_MAGIC = "#mvattrib-metrics v1"


class Method(enum.Enum):
    GA = "GA"
    CB = "CB"
    SS = "SS"
    MV = "MV"


def _require_converted(session):
    if not session.converted:
        raise ValueError(f"session {session.session_id!r} did not convert")


def attribute_ga(session):
    """Any converting session with a search counts as a search win."""
    _require_converted(session)
    return session.has_search


def attribute_cb(session):
    """Click-then-buy: the purchased product was clicked on a results page before the purchase."""
    _require_converted(session)
    bought = session.purchased_product
    for ev in session.events[: session.purchase_position()]:
        if isinstance(ev, SearchEvent) and bought in ev.clicked:
            return True
    return False


def ss_feature(session, space):
    """Cosine distance between the post-search click and the purchase token."""
    spec = locate_search_interaction(session)
    tokens = tokenize_session(session)
    return cosine_distance(space.vector(tokens[spec.click_index]),
                           space.vector(tokens[spec.purchase_index]))


def mv_features(result):
    """(d1, d2, raw_ds) of one multiverse result."""
    t = result.timelines
    return np.array([t.d1, t.d2, result.score.raw])


# ---------------------------------------------------------------------------
# classifier


class ClassifierMLP:
    """One tanh hidden layer and a sigmoid output, trained by minibatch SGD on log-loss."""

    def __init__(self, width=16, epochs=200, learning_rate=0.01, batch_size=32, seed=0):
        self.width = width
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.seed = seed
        self.mean = self.scale = None
        self.params = None

    def _standardize(self, X):
        return (X - self.mean) / self.scale

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        X = X.reshape(len(X), -1)
        y = np.asarray(y, dtype=np.float64)
        rng = np.random.default_rng(self.seed)
        self.mean = X.mean(axis=0)
        self.scale = X.std(axis=0)
        self.scale[self.scale == 0] = 1.0
        Z = self._standardize(X)
        d = Z.shape[1]
        W1 = rng.normal(0, 1 / np.sqrt(d), (d, self.width))
        b1 = np.zeros(self.width)
        w2 = rng.normal(0, 1 / np.sqrt(self.width), self.width)
        b2 = 0.0
        lr = self.learning_rate
        for _ in range(self.epochs):
            order = rng.permutation(len(Z))
            for a in range(0, len(Z), self.batch_size):
                idx = order[a:a + self.batch_size]
                h = np.tanh(Z[idx] @ W1 + b1)
                p = 1.0 / (1.0 + np.exp(-(h @ w2 + b2)))
                g = (p - y[idx]) / len(idx)
                gh = np.outer(g, w2) * (1.0 - h * h)
                w2 -= lr * (h.T @ g)
                b2 -= lr * g.sum()
                W1 -= lr * (Z[idx].T @ gh)
                b1 -= lr * gh.sum(axis=0)
        self.params = (W1, b1, w2, b2)
        return self

    def predict_proba(self, X):
        if self.params is None:
            raise ValueError("classifier is not trained")
        X = np.asarray(X, dtype=np.float64)
        W1, b1, w2, b2 = self.params
        h = np.tanh(self._standardize(X.reshape(len(X), -1)) @ W1 + b1)
        return 1.0 / (1.0 + np.exp(-(h @ w2 + b2)))

    def predict(self, X):
        # exactly 0.5 counts as not attributed
        return self.predict_proba(X) > 0.5


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int


def evaluate(predictions, labels):
    pred = np.asarray(predictions, dtype=bool)
    true = np.asarray(labels, dtype=bool)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {true.shape}")
    if pred.size == 0:
        raise ValueError("nothing to evaluate")
    tp = int((pred & true).sum())
    fp = int((pred & ~true).sum())
    tn = int((~pred & ~true).sum())
    fn = int((~pred & true).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if tp else 0.0
    return Metrics((tp + tn) / pred.size, precision, recall, f1, tp, fp, tn, fn)


@dataclass
class TrainedClassifier:
    model: ClassifierMLP
    metrics: Metrics
    train_index: np.ndarray
    test_index: np.ndarray


def train_classifier(features, labels, split=0.8, seed=0, **mlp_kwargs):
    """Fit on a seeded ``split`` share of the rows and score the rest."""
    X = np.asarray(features, dtype=np.float64)
    X = X.reshape(len(X), -1)
    y = np.asarray(labels, dtype=bool)
    if len(np.unique(y)) < 2:
        raise ValueError("both classes must be present")
    perm = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(11,))).permutation(len(X))
    n_train = int(round(split * len(X)))
    tr, te = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    model = ClassifierMLP(seed=seed, **mlp_kwargs).fit(X[tr], y[tr])
    metrics = evaluate(model.predict(X[te]), y[te]) if len(te) else None
    return TrainedClassifier(model, metrics, tr, te)


# ---------------------------------------------------------------------------
# comparison


def attribution_decisions(method, sessions, classifier=None, features=None):
    method = Method(method)
    if method is Method.GA:
        return np.array([attribute_ga(s) for s in sessions], dtype=bool)
    if method is Method.CB:
        return np.array([attribute_cb(s) for s in sessions], dtype=bool)
    if classifier is None:
        raise ValueError(f"{method.value} needs a trained classifier")
    if features is None or len(features) != len(sessions):
        raise ValueError(f"{method.value} needs one feature row per session")
    model = classifier.model if isinstance(classifier, TrainedClassifier) else classifier
    return model.predict(np.asarray(features))


def attribution_rate(method, sessions, classifier=None, features=None):
    """Percentage of converting search sessions credited to search."""
    if not sessions:
        raise ValueError("no sessions")
    return 100.0 * float(attribution_decisions(method, sessions, classifier, features).mean())


def pattern_distance_table(norm_scores, labels):
    """Mean normalised Distance Score per search pattern."""
    norm_scores = np.asarray(norm_scores, dtype=np.float64)
    labels = list(labels)
    table = {}
    for lab in SEARCH_LABELS:
        mask = np.array([l is lab for l in labels])
        if not mask.any():
            raise ValueError(f"no scored sessions for pattern {lab.value}")
        table[lab] = float(norm_scores[mask].mean())
    return table


def is_relevant(label):
    return label in RELEVANT


def pre_search_truncation(session, keep):
    """Drop all but the last ``keep`` events before the intervention's search."""
    spec_event = next(j for j, ev in enumerate(session.events)
                      if isinstance(ev, SearchEvent) and ev.clicked)
    start = max(0, spec_event - keep)
    return type(session)(session.session_id, session.events[start:])


# ---------------------------------------------------------------------------
# reports


def write_table1(table, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(TABLE1_MAGIC + "\n")
        for lab, v in table.items():
            fh.write(f"{lab.value}\t{v!r}\n")


def write_table2(rates, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(TABLE2_MAGIC + "\n")
        for method, pct in rates.items():
            fh.write(f"{Method(method).value}\t{pct!r}\n")


def write_metrics(metrics_by_name, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(METRICS_MAGIC + "\n")
        for name, m in metrics_by_name.items():
            fh.write(
                f"{name}\t{m.accuracy!r}\t{m.precision!r}\t{m.recall!r}\t{m.f1!r}"
                f"\t{m.tp}\t{m.fp}\t{m.tn}\t{m.fn}\n"
            )


def read_table(path, magic):
    with open(path, encoding="utf-8") as fh:
        if fh.readline().rstrip("\n") != magic:
            raise ValueError(f"{path}: missing header {magic!r}")
        return [line.rstrip("\n").split("\t") for line in fh if line.strip()]

