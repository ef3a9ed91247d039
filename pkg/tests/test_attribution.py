import numpy as np
import pytest

from mvattrib.attribution import (
    ClassifierMLP,
    Method,
    attribute_cb,
    attribute_ga,
    attribution_rate,
    evaluate,
    pattern_distance_table,
    pre_search_truncation,
    read_table,
    ss_feature,
    train_classifier,
    write_metrics,
    write_table1,
    write_table2,
    TABLE1_MAGIC,
    TABLE2_MAGIC,
)
from mvattrib.core import InteractionKind as K, ProductEvent, ProductToken, SearchEvent, Session
from mvattrib.embed import EmbeddingSpace
from mvattrib.synth import PatternLabel as L


def pe(p, kind):
    return ProductEvent(p, K(kind))


# the shopper who searched for basketball shoes, clicked one pair, browsed, then bought another
BOB = Session("bob", (pe("headband", "detail"), SearchEvent("nba_shoes", ("shoe3",)),
                      pe("shoe4", "detail"), pe("shoe5", "detail"), pe("shoe5", "add"),
                      pe("shoe5", "purchase")))


def test_ga_counts_any_search():
    assert attribute_ga(BOB)
    assert not attribute_ga(Session("x", (pe("a", "detail"), pe("a", "purchase"))))


def test_cb_exact_click_then_buy():
    s = Session("x", (SearchEvent("q", ("B",)), pe("B", "purchase")))
    assert attribute_cb(s)


def test_cb_rejects_click_on_other_product():
    assert not attribute_cb(BOB)


def test_cb_ignores_clicks_after_purchase():
    s = Session("x", (pe("B", "detail"), pe("B", "purchase"), SearchEvent("q", ("B",))))
    assert not attribute_cb(s)


def test_rules_need_conversion():
    s = Session("x", (SearchEvent("q", ("B",)),))
    with pytest.raises(ValueError):
        attribute_ga(s)
    with pytest.raises(ValueError):
        attribute_cb(s)


def test_cb_rate_zero_without_clicks():
    sessions = [Session(f"s{i}", (SearchEvent("q"), pe("a", "detail"), pe("a", "purchase"))) for i in range(4)]
    assert attribution_rate("CB", sessions) == 0.0
    assert attribution_rate("GA", sessions) == 100.0


def _ss_space():
    toks = [ProductToken("B", K.CLICK), ProductToken("B", K.PURCHASE), ProductToken("A", K.DETAIL),
            ProductToken("C", K.PURCHASE)]
    return EmbeddingSpace(toks, np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.2]]))


def test_ss_identical_vectors_give_zero():
    s = Session("x", (pe("A", "detail"), SearchEvent("q", ("B",)), pe("B", "purchase")))
    assert ss_feature(s, _ss_space()) == 0.0


def test_ss_ignores_pre_search_events():
    s = Session("x", (pe("A", "detail"), pe("A", "detail"), SearchEvent("q", ("B",)), pe("C", "purchase")))
    sp = _ss_space()
    full = ss_feature(s, sp)
    for keep in range(3):
        assert ss_feature(pre_search_truncation(s, keep), sp) == full


def test_truncation_keeps_search_and_tail():
    s = Session("x", (pe("A", "detail"), pe("C", "detail"), SearchEvent("q", ("B",)), pe("B", "purchase")))
    t = pre_search_truncation(s, 1)
    assert t.events == s.events[1:]
    assert pre_search_truncation(s, 0).events[0] == SearchEvent("q", ("B",))


# -- classifier --------------------------------------------------------------


def test_separable_features_are_learned():
    rng = np.random.default_rng(0)
    X = np.r_[rng.normal(-3, 0.5, (200, 2)), rng.normal(3, 0.5, (200, 2))]
    y = np.r_[np.zeros(200), np.ones(200)]
    clf = train_classifier(X, y, seed=1)
    assert clf.metrics.accuracy == 1.0
    assert len(clf.train_index) == 320 and len(clf.test_index) == 80
    assert not set(clf.train_index) & set(clf.test_index)


def test_shuffled_labels_give_chance():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(4000, 3))
    y = rng.permutation(np.r_[np.zeros(2000), np.ones(2000)])
    clf = train_classifier(X, y, seed=3, epochs=20)
    assert abs(clf.metrics.accuracy - 0.5) <= 0.05


def test_half_probability_is_not_attributed():
    clf = ClassifierMLP()
    clf.mean, clf.scale = np.zeros(1), np.ones(1)
    clf.params = (np.zeros((1, 16)), np.zeros(16), np.zeros(16), 0.0)
    assert clf.predict_proba(np.array([[1.0]]))[0] == 0.5
    assert not clf.predict(np.array([[1.0]]))[0]


def test_classifier_is_seeded():
    rng = np.random.default_rng(4)
    X, y = rng.normal(size=(100, 2)), rng.integers(0, 2, 100)
    a = ClassifierMLP(seed=5, epochs=5).fit(X, y).predict_proba(X)
    b = ClassifierMLP(seed=5, epochs=5).fit(X, y).predict_proba(X)
    np.testing.assert_array_equal(a, b)


def test_single_class_rejected():
    with pytest.raises(ValueError):
        train_classifier(np.zeros((10, 1)), np.ones(10))


def test_metrics_all_correct():
    m = evaluate([1, 0, 1, 0], [1, 0, 1, 0])
    assert m.accuracy == m.recall == m.f1 == 1.0


def test_metrics_all_positive_balanced():
    m = evaluate([1, 1, 1, 1], [1, 0, 1, 0])
    assert (m.accuracy, m.recall) == (0.5, 1.0)


def test_metrics_no_true_positive():
    m = evaluate([0, 0, 1], [1, 1, 0])
    assert m.f1 == 0.0 and m.tp == 0


def test_metrics_shape_mismatch():
    with pytest.raises(ValueError):
        evaluate([1, 0], [1])


def test_classifier_methods_need_a_model():
    with pytest.raises(ValueError):
        attribution_rate(Method.MV, [BOB])


# -- tables ------------------------------------------------------------------


def test_pattern_table_means():
    labels = [L.CU, L.CU, L.SE, L.ME, L.SR, L.SR]
    table = pattern_distance_table([-1, -3, 2, 4, 1, 2], labels)
    assert list(table) == [L.CU, L.SE, L.ME, L.SR]
    assert table == {L.CU: -2.0, L.SE: 2.0, L.ME: 4.0, L.SR: 1.5}


def test_pattern_table_needs_every_bucket():
    with pytest.raises(ValueError):
        pattern_distance_table([1.0], [L.SE])


def test_report_files(tmp_path):
    write_table1({L.CU: -1.0, L.SE: 2.0, L.ME: 3.0, L.SR: 1.0}, tmp_path / "t1.tsv")
    write_table2({Method.GA: 100.0, Method.CB: 40.0}, tmp_path / "t2.tsv")
    write_metrics({"MV": evaluate([1, 0], [1, 0])}, tmp_path / "m.tsv")
    assert read_table(tmp_path / "t1.tsv", TABLE1_MAGIC)[0] == ["CU", "-1.0"]
    assert read_table(tmp_path / "t2.tsv", TABLE2_MAGIC) == [["GA", "100.0"], ["CB", "40.0"]]
    with pytest.raises(ValueError):
        read_table(tmp_path / "t1.tsv", TABLE2_MAGIC)
