from dataclasses import replace

import numpy as np
import pytest

from mvattrib.core import InteractionKind, ProductEvent, SearchEvent
from mvattrib.shopworld import (
    MockSearchEngine,
    WorldConfig,
    build_catalog,
    generate_base_sessions,
    query_for_category,
    read_catalog,
    search,
    write_catalog,
)

SMALL = WorldConfig(n_categories=5, products_per_category=50, seed=3)


def test_catalog_size():
    assert len(build_catalog(SMALL)) == 250


def test_catalog_is_seeded():
    assert build_catalog(SMALL) == build_catalog(SMALL)
    assert build_catalog(SMALL) != build_catalog(replace(SMALL, seed=4))


def test_too_few_products_for_result_page():
    with pytest.raises(ValueError):
        build_catalog(replace(SMALL, products_per_category=10, top_n=20))


def test_catalog_round_trip(tmp_path):
    cat = build_catalog(SMALL)
    write_catalog(cat, tmp_path / "c.tsv")
    assert read_catalog(tmp_path / "c.tsv") == cat


def test_popularity_decreases_within_category():
    cat = build_catalog(SMALL)
    for items in cat.by_category.values():
        pops = [cat.popularity[p] for p in items]
        assert pops == sorted(pops, reverse=True)


def _intra_fraction(sessions, catalog):
    same = total = 0
    for s in sessions:
        prods = [e.product for e in s.events if isinstance(e, ProductEvent)]
        for a, b in zip(prods, prods[1:]):
            total += 1
            same += catalog.category_of(a) == catalog.category_of(b)
    return same / total


def test_sticky_walk():
    cfg = replace(SMALL, p_stay=0.95)
    cat = build_catalog(cfg)
    assert _intra_fraction(generate_base_sessions(cat, cfg, 10_000), cat) > 0.9


@pytest.mark.parametrize("prob, expected", [(0.0, False), (1.0, True)])
def test_conversion_extremes(prob, expected):
    cfg = replace(SMALL, conversion_prob=prob)
    sessions = generate_base_sessions(build_catalog(cfg), cfg, 300)
    assert all(s.converted is expected for s in sessions)


def test_converted_sessions_buy_what_they_added():
    cfg = replace(SMALL, conversion_prob=1.0)
    for s in generate_base_sessions(build_catalog(cfg), cfg, 200):
        add, buy = s.events[-2:]
        assert buy.kind is InteractionKind.PURCHASE and add.kind is InteractionKind.ADD
        assert add.product == buy.product


def test_sessions_reproducible_and_worker_independent():
    cat = build_catalog(SMALL)
    a = generate_base_sessions(cat, SMALL, 400)
    b = generate_base_sessions(cat, SMALL, 400, workers=4)
    assert a == b
    # the stream of session i does not depend on how many sessions are drawn
    assert generate_base_sessions(cat, SMALL, 50) == a[:50]


def test_search_rate_near_config():
    cfg = replace(SMALL, search_rate=0.5)
    sessions = generate_base_sessions(build_catalog(cfg), cfg, 4000)
    rate = np.mean([s.has_search for s in sessions])
    assert abs(rate - 0.5) < 0.03


def test_search_top_one_is_most_popular():
    cat = build_catalog(SMALL)
    eng = MockSearchEngine(cat)
    c = cat.categories[2]
    (top,) = search(eng, query_for_category(c), 1)
    assert top == max(cat.by_category[c], key=lambda p: cat.popularity[p])


def test_search_results_share_category_and_repeat():
    cat = build_catalog(SMALL)
    eng = MockSearchEngine(cat)
    for q in eng.queries:
        res = search(eng, q, 20)
        assert len({cat.category_of(p) for p in res}) == 1
        assert res == eng.search(q, 20)


def test_search_errors():
    eng = MockSearchEngine(build_catalog(SMALL))
    with pytest.raises(KeyError):
        search(eng, "nope", 3)
    with pytest.raises(ValueError):
        search(eng, eng.queries[0], 51)


def test_clicks_come_from_result_page():
    cat = build_catalog(SMALL)
    eng = MockSearchEngine(cat)
    for s in generate_base_sessions(cat, SMALL, 500, engine=eng):
        for e in s.events:
            if isinstance(e, SearchEvent):
                assert set(e.clicked) <= set(search(eng, e.query_id, SMALL.top_n))
