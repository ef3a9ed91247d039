"""Seeded toy shop: catalog, mock search engine and category-sticky browsing sessions."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import FormatError, InteractionKind, ProductEvent, SearchEvent, Session

CATALOG_MAGIC = "#mvattrib-catalog v1"

WALK_KINDS = (InteractionKind.DETAIL, InteractionKind.CLICK, InteractionKind.ADD)
WALK_KIND_CDF = np.cumsum([0.8, 0.15, 0.05])


@dataclass(frozen=True)
class WorldConfig:
    n_categories: int = 10
    products_per_category: int = 50
    p_stay: float = 0.9
    conversion_prob: float = 0.3
    mean_session_len: int = 8
    seed: int = 0
    search_rate: float = 0.3
    # probability a query denotes the category the shopper is already in
    search_same_category: float = 0.3
    top_n: int = 20
    zipf_exponent: float = 1.0

    def __post_init__(self):
        if self.n_categories < 2:
            raise ValueError("need at least 2 categories")
        if self.products_per_category < 2:
            raise ValueError("need at least 2 products per category")
        for name in ("p_stay", "conversion_prob", "search_rate", "search_same_category"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} is not a probability")
        if self.mean_session_len < 2:
            raise ValueError("mean_session_len must be >= 2")
        if self.top_n < 1:
            raise ValueError("top_n must be positive")


class Catalog:
    """Products grouped by category, with a popularity weight per product."""

    def __init__(self, products, popularity):
        # products: product_id -> category_id, popularity: product_id -> weight
        self.products = dict(products)
        self.popularity = {p: float(popularity[p]) for p in self.products}
        cats = sorted(set(self.products.values()))
        if len(cats) < 2:
            raise ValueError("catalog needs at least 2 categories")
        self.categories = cats
        self.by_category = {c: [] for c in cats}
        for p, c in self.products.items():
            self.by_category[c].append(p)
        for c, items in self.by_category.items():
            if len(items) < 2:
                raise ValueError(f"category {c} has fewer than 2 products")
            # most popular first, product id breaks ties
            items.sort(key=lambda p: (-self.popularity[p], p))
        self.category_weights = np.array(
            [sum(self.popularity[p] for p in self.by_category[c]) for c in cats]
        )
        self._cdf = {
            c: np.cumsum([self.popularity[p] for p in self.by_category[c]])
            for c in cats
        }

    def __len__(self):
        return len(self.products)

    def category_of(self, product):
        return self.products[product]

    def draw_product(self, category, u):
        """Popularity-weighted product draw from a uniform variate ``u``."""
        cdf = self._cdf[category]
        i = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
        return self.by_category[category][min(i, len(cdf) - 1)]

    def __eq__(self, other):
        return (
            isinstance(other, Catalog)
            and self.products == other.products
            and self.popularity == other.popularity
        )


def query_for_category(category):
    return f"q{category}"


class MockSearchEngine:
    """Each query denotes one category; results are that category by popularity."""

    def __init__(self, catalog):
        self.catalog = catalog
        self.query_category = {query_for_category(c): c for c in catalog.categories}
        self.results = {q: list(catalog.by_category[c]) for q, c in self.query_category.items()}

    @property
    def queries(self):
        return sorted(self.query_category)

    def search(self, query_id, n):
        return search(self, query_id, n)


def search(engine, query_id, n):
    if query_id not in engine.results:
        raise KeyError(f"unknown query {query_id!r}")
    ranked = engine.results[query_id]
    if n > len(ranked):
        raise ValueError(f"query {query_id!r} has only {len(ranked)} results, {n} requested")
    return ranked[:n]


def build_catalog(config):
    if config.products_per_category < config.top_n:
        raise ValueError(
            f"products_per_category={config.products_per_category} is below the "
            f"query result size top_n={config.top_n}"
        )
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(1,)))
    n = config.n_categories * config.products_per_category
    width = max(2, len(str(config.n_categories - 1)))
    cats = [f"c{i:0{width}d}" for i in range(config.n_categories)]
    # categories are not equally busy: rank^-0.5 traffic share, random order
    cat_scale = 1.0 / np.sqrt(1.0 + rng.permutation(config.n_categories))
    cat_scale /= cat_scale.sum()
    owner = rng.permutation(np.repeat(np.arange(config.n_categories), config.products_per_category))
    ranks = np.arange(1, config.products_per_category + 1, dtype=float)
    zipf = ranks ** -config.zipf_exponent
    zipf /= zipf.sum()
    pwidth = len(str(n - 1))
    products, popularity = {}, {}
    seen = {c: 0 for c in range(config.n_categories)}
    rank_order = {c: rng.permutation(config.products_per_category) for c in range(config.n_categories)}
    for i in range(n):
        c = int(owner[i])
        pid = f"sku{i:0{pwidth}d}"
        products[pid] = cats[c]
        popularity[pid] = float(cat_scale[c] * zipf[rank_order[c][seen[c]]])
        seen[c] += 1
    return Catalog(products, popularity)


def write_catalog(catalog, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(CATALOG_MAGIC + "\n")
        for p in sorted(catalog.products):
            fh.write(f"{p}\t{catalog.products[p]}\t{catalog.popularity[p]!r}\n")


def read_catalog(path):
    products, popularity = {}, {}
    with open(path, encoding="utf-8") as fh:
        if fh.readline().rstrip("\n") != CATALOG_MAGIC:
            raise FormatError(f"{path}: missing header {CATALOG_MAGIC!r}")
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise FormatError(f"{path} line {lineno}: expected 3 fields")
            products[parts[0]] = parts[1]
            popularity[parts[0]] = float(parts[2])
    return Catalog(products, popularity)


# ---------------------------------------------------------------------------
# sessions


def _session_length(rng, config, converted):
    length = 2 + int(rng.poisson(config.mean_session_len - 2))
    return max(length, 3) if converted else length


def _search_event(rng, catalog, engine, config, current):
    if rng.random() < config.search_same_category:
        cat = current
    else:
        others = [c for c in catalog.categories if c != current]
        cat = others[int(rng.integers(len(others)))]
    query = query_for_category(cat)
    top = search(engine, query, config.top_n)
    n_clicks = 0 if rng.random() < 0.1 else int(rng.integers(1, 4))
    # position bias: rank r clicked with weight 1/(r+1)
    w = 1.0 / np.arange(1, len(top) + 1)
    picks = rng.choice(len(top), size=n_clicks, replace=False, p=w / w.sum()) if n_clicks else []
    return SearchEvent(query, tuple(top[i] for i in sorted(picks))), cat


def _one_session(session_id, catalog, engine, config, rng):
    converted = rng.random() < config.conversion_prob
    length = _session_length(rng, config, converted)
    walk_len = length - 2 if converted else length
    search_at = int(rng.integers(walk_len)) if rng.random() < config.search_rate else -1
    cdf = np.cumsum(catalog.category_weights)
    current = catalog.categories[int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))]
    events = []
    last_product = None
    for step in range(walk_len):
        if step == search_at:
            ev, current = _search_event(rng, catalog, engine, config, current)
            events.append(ev)
            if ev.clicked:
                last_product = ev.clicked[-1]
            continue
        if step > 0 and rng.random() >= config.p_stay:
            others = [c for c in catalog.categories if c != current]
            current = others[int(rng.integers(len(others)))]
        product = catalog.draw_product(current, rng.random())
        kind = WALK_KINDS[int(np.searchsorted(WALK_KIND_CDF, rng.random(), side="right"))]
        events.append(ProductEvent(product, kind))
        last_product = product
    if converted:
        if last_product is None:
            last_product = catalog.draw_product(current, rng.random())
        events.append(ProductEvent(last_product, InteractionKind.ADD))
        events.append(ProductEvent(last_product, InteractionKind.PURCHASE))
    return Session(session_id, tuple(events))


def session_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2, index)))


def generate_base_sessions(catalog, config, count, *, engine=None, prefix="s", workers=1):
    """Category-sticky random-walk sessions, one independent RNG stream per index."""
    if count <= 0:
        return []
    engine = engine or MockSearchEngine(catalog)
    width = max(6, len(str(count - 1)))

    def make(i):
        return _one_session(f"{prefix}{i:0{width}d}", catalog, engine, config, session_rng(config.seed, i))

    if workers <= 1:
        return [make(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(make, range(count), chunksize=256))
