"""Sessions, events, tokens, and the tab-separated session log."""

import enum
import hashlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

LOG_MAGIC = "#mvattrib-log v1"
EVENT_TYPES = ("detail", "click", "add", "purchase", "search")


class FormatError(ValueError):
    """Raised when an artifact file does not match its documented layout."""


class InteractionKind(enum.Enum):
    DETAIL = "detail"
    CLICK = "click"
    ADD = "add"
    PURCHASE = "purchase"


@dataclass(frozen=True)
class ProductEvent:
    product: str
    kind: InteractionKind

    def __post_init__(self):
        if not self.product:
            raise ValueError("empty product id")
        if not isinstance(self.kind, InteractionKind):
            raise TypeError(f"kind must be an InteractionKind, got {self.kind!r}")


@dataclass(frozen=True)
class SearchEvent:
    query_id: str
    clicked: tuple = ()

    def __post_init__(self):
        if not self.query_id:
            raise ValueError("empty query id")
        object.__setattr__(self, "clicked", tuple(self.clicked))


@dataclass(frozen=True)
class ProductToken:
    product: str
    kind: InteractionKind

    def __str__(self):
        return f"{self.product}_{self.kind.value}"


@dataclass(frozen=True)
class QueryToken:
    query_id: str

    def __str__(self):
        return f"{self.query_id}_query"


def parse_token(text):
    """Inverse of ``str(token)``: ``SKU_kind`` or ``QID_query``."""
    base, _, suffix = text.rpartition("_")
    if not base:
        raise FormatError(f"malformed token {text!r}")
    if suffix == "query":
        return QueryToken(base)
    try:
        return ProductToken(base, InteractionKind(suffix))
    except ValueError:
        raise FormatError(f"unknown interaction kind in token {text!r}") from None


@dataclass(frozen=True)
class Session:
    session_id: str
    events: tuple
    converted: bool = field(init=False)

    def __post_init__(self):
        events = tuple(self.events)
        if not events:
            raise ValueError(f"session {self.session_id!r} has no events")
        object.__setattr__(self, "events", events)
        first = self.purchase_position()
        if first == 0:
            raise ValueError(f"session {self.session_id!r} starts with a purchase")
        object.__setattr__(self, "converted", first is not None)

    def purchase_position(self):
        """Event index of the first purchase, or None."""
        for i, ev in enumerate(self.events):
            if isinstance(ev, ProductEvent) and ev.kind is InteractionKind.PURCHASE:
                return i
        return None

    @property
    def purchased_product(self):
        pos = self.purchase_position()
        return None if pos is None else self.events[pos].product

    @property
    def has_search(self):
        return any(isinstance(ev, SearchEvent) for ev in self.events)


def tokenize_session(session):
    tokens = []
    for ev in session.events:
        if isinstance(ev, ProductEvent):
            tokens.append(ProductToken(ev.product, ev.kind))
        else:
            tokens.append(QueryToken(ev.query_id))
            tokens.extend(ProductToken(p, InteractionKind.CLICK) for p in ev.clicked)
    return tokens


def event_token_offsets(session):
    """Token index at which each event starts in ``tokenize_session`` order."""
    offsets = []
    pos = 0
    for ev in session.events:
        offsets.append(pos)
        pos += 1 + (len(ev.clicked) if isinstance(ev, SearchEvent) else 0)
    return offsets


# ---------------------------------------------------------------------------
# log I/O


def _parse_line(fields, lineno):
    if len(fields) != 6:
        raise FormatError(f"line {lineno}: expected 6 tab-separated fields, got {len(fields)}")
    sid, ts, etype, product, query, clicked = fields
    if not sid:
        raise FormatError(f"line {lineno}: empty session_id")
    try:
        ts = int(ts)
    except ValueError:
        raise FormatError(f"line {lineno}: timestamp {ts!r} is not an integer") from None
    if etype not in EVENT_TYPES:
        raise FormatError(f"line {lineno}: unknown event_type {etype!r}")
    if etype == "search":
        if product or not query:
            raise FormatError(f"line {lineno}: search needs query_id and no product_id")
        ev = SearchEvent(query, tuple(p for p in clicked.split(",") if p) if clicked else ())
    else:
        if not product or query or clicked:
            raise FormatError(f"line {lineno}: product event needs product_id only")
        ev = ProductEvent(product, InteractionKind(etype))
    return sid, ts, ev


def parse_session_log(path):
    """Read a session log; sessions come back in order of first appearance."""
    grouped = {}
    last_ts = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        if not header:
            return []
        if header.rstrip("\n") != LOG_MAGIC:
            raise FormatError(f"line 1: expected header {LOG_MAGIC!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            sid, ts, ev = _parse_line(line.split("\t"), lineno)
            if sid in last_ts and ts < last_ts[sid]:
                raise FormatError(f"line {lineno}: timestamp goes backwards in session {sid!r}")
            last_ts[sid] = ts
            grouped.setdefault(sid, []).append(ev)
    sessions = []
    for sid, events in grouped.items():
        try:
            sessions.append(Session(sid, tuple(events)))
        except ValueError as exc:
            raise FormatError(str(exc)) from None
    return sessions


def format_session_lines(session):
    for ts, ev in enumerate(session.events):
        if isinstance(ev, ProductEvent):
            yield f"{session.session_id}\t{ts}\t{ev.kind.value}\t{ev.product}\t\t"
        else:
            yield f"{session.session_id}\t{ts}\tsearch\t\t{ev.query_id}\t{','.join(ev.clicked)}"


def write_session_log(sessions, path):
    """Timestamps are written as event ordinals."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(LOG_MAGIC + "\n")
        for s in sessions:
            for line in format_session_lines(s):
                fh.write(line + "\n")


# ---------------------------------------------------------------------------


@dataclass
class SessionStats:
    n_sessions: int
    n_events: int
    n_converted: int
    n_with_search: int
    conversion_rate: float
    search_session_rate: float
    length_histogram: dict


def session_stats(sessions):
    if not sessions:
        raise ValueError("session_stats needs at least one session")
    n = len(sessions)
    conv = sum(s.converted for s in sessions)
    search = sum(s.has_search for s in sessions)
    hist = Counter(len(s.events) for s in sessions)
    return SessionStats(
        n_sessions=n,
        n_events=sum(len(s.events) for s in sessions),
        n_converted=conv,
        n_with_search=search,
        conversion_rate=conv / n,
        search_session_rate=search / n,
        length_histogram=dict(sorted(hist.items())),
    )


def derive_seed(seed, *names):
    """Stable 64-bit seed from a parent seed and a path of names."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for name in names:
        h.update(b"\x00" + str(name).encode())
    return int.from_bytes(h.digest(), "little")


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
