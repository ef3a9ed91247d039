import numpy as np
import pytest
from hypothesis import given, strategies as st

from mvattrib.browse import BrowseTrainConfig, DecoderConfig, init_model, model_vocabulary
from mvattrib.core import InteractionKind as K, ProductEvent, ProductToken, SearchEvent, Session, tokenize_session
from mvattrib.embed import EmbeddingSpace
from mvattrib.multiverse import (
    InterventionSpec,
    distance_score,
    generate_w1,
    generate_w2,
    locate_search_interaction,
    normalize_scores,
    read_results,
    run_multiverse,
    run_multiverse_batch,
    w1_prefix,
    w2_prefix,
    write_results,
)


def pe(p, kind):
    return ProductEvent(p, K(kind))


def toy_space():
    toks = [ProductToken(p, k) for p in "ABCD" for k in (K.DETAIL, K.CLICK, K.ADD, K.PURCHASE)]
    vecs = np.random.default_rng(0).normal(size=(len(toks), 6))
    sp = EmbeddingSpace(toks, vecs)
    sp.query_vectors["q"] = vecs[:4].mean(axis=0)
    sp.query_vectors["r"] = vecs[8:12].mean(axis=0)
    return sp


def toy_model(space, seed=3, scale=1.0):
    vocab, inputs = model_vocabulary(space)
    m = init_model(vocab, inputs, BrowseTrainConfig(hidden=8, dtype="float64"), np.random.default_rng(seed))
    for p in m.params.values():
        p *= scale
    return m


SESSION = Session("s", (pe("A", "detail"), pe("C", "detail"), SearchEvent("q", ("B",)),
                        pe("D", "detail"), pe("B", "add"), pe("B", "purchase")))


def test_locate_reference_case():
    s = Session("s", (pe("A", "detail"), SearchEvent("q", ("B",)), pe("B", "purchase")))
    assert locate_search_interaction(s) == InterventionSpec(1, 2, 3)


def test_locate_requires_clicked_search():
    s = Session("s", (pe("A", "detail"), SearchEvent("q"), pe("B", "purchase")))
    with pytest.raises(ValueError):
        locate_search_interaction(s)


def test_locate_takes_first_clicked_search():
    s = Session("s", (SearchEvent("q", ("A",)), pe("A", "detail"), SearchEvent("r", ("B", "C")),
                      pe("B", "purchase")))
    assert locate_search_interaction(s) == InterventionSpec(0, 1, 6)


def test_locate_ignores_searches_after_purchase():
    s = Session("s", (pe("A", "detail"), pe("A", "purchase"), SearchEvent("q", ("B",))))
    with pytest.raises(ValueError):
        locate_search_interaction(s)


def test_spec_validates_order():
    with pytest.raises(ValueError):
        InterventionSpec(2, 2, 3)


def test_prefix_containment():
    toks = tokenize_session(SESSION)
    spec = locate_search_interaction(SESSION)
    w1, w2 = w1_prefix(toks, spec), w2_prefix(toks, spec)
    assert w1[: len(w2)] == w2
    assert w1[len(w2):] == toks[spec.query_index:spec.click_index + 1]
    assert all(t not in w2 for t in toks[spec.query_index:spec.click_index + 1])


def test_generation_lengths():
    sp = toy_space()
    m = toy_model(sp)
    spec = locate_search_interaction(SESSION)
    toks = tokenize_session(SESSION)
    for gen, prefix in ((generate_w1, w1_prefix(toks, spec)), (generate_w2, w2_prefix(toks, spec))):
        end = gen(SESSION, spec, m, sp, DecoderConfig(T=5))
        assert end.shape == (sp.dim,)
    # continuation lengths follow from the indices alone
    assert spec.purchase_index + 1 - len(w1_prefix(toks, spec)) == spec.purchase_index - spec.click_index
    assert spec.purchase_index + 1 - len(w2_prefix(toks, spec)) == spec.purchase_index + 1 - spec.query_index


def test_search_first_uses_start_token_only():
    s = Session("s", (SearchEvent("q", ("B",)), pe("B", "purchase")))
    sp = toy_space()
    r = run_multiverse(s, toy_model(sp), sp, DecoderConfig(T=4))
    assert r.spec.query_index == 0 and np.isfinite(r.timelines.d2)


def test_greedy_single_sample_is_deterministic():
    sp = toy_space()
    m = toy_model(sp)
    spec = locate_search_interaction(SESSION)
    dec = DecoderConfig(K=1, T=1)
    ends = {tuple(generate_w1(SESSION, spec, m, sp, DecoderConfig(K=1, T=1, seed=s))) for s in range(4)}
    assert len(ends) == 1
    np.testing.assert_array_equal(generate_w2(SESSION, spec, m, sp, dec), generate_w2(SESSION, spec, m, sp, dec))


def test_converging_timelines_saturate():
    sp = toy_space()
    m = toy_model(sp)
    target = m.index[ProductToken("B", K.PURCHASE)]
    m.params["bo"][:] = 0.0
    m.params["bo"][target] = 50.0  # every continuation ends on B_purchase
    r = run_multiverse(SESSION, m, sp, DecoderConfig(T=10))
    assert r.timelines.d1 == pytest.approx(0.0, abs=1e-12)
    assert r.timelines.d2 == pytest.approx(0.0, abs=1e-12)
    assert r.score.saturated


def test_batch_size_does_not_change_results():
    sp = toy_space()
    m = toy_model(sp, scale=2.0)
    other = Session("t", (pe("C", "detail"), SearchEvent("r", ("C",)), pe("D", "detail"), pe("C", "purchase")))
    sessions = [SESSION, other, SESSION]
    a = run_multiverse_batch(sessions, m, sp, DecoderConfig(T=20), batch_sessions=1)
    b = run_multiverse_batch(sessions, m, sp, DecoderConfig(T=20), batch_sessions=3)
    c = run_multiverse_batch(sessions, m, sp, DecoderConfig(T=20), batch_sessions=2, threads=2)
    for x, y, z in zip(a, b, c):
        assert x.timelines.d1 == y.timelines.d1 == z.timelines.d1
        assert x.timelines.d2 == y.timelines.d2 == z.timelines.d2


def test_results_file_round_trip(tmp_path):
    sp = toy_space()
    res = run_multiverse_batch([SESSION], toy_model(sp), sp, DecoderConfig(T=8))
    write_results(res, tmp_path / "mv.tsv")
    (row,) = read_results(tmp_path / "mv.tsv")
    r = res[0]
    assert row == (r.session_id, r.timelines.d1, r.timelines.d2, r.score.raw, r.score.normalized)


# -- distance score ----------------------------------------------------------


def test_distance_score_formula():
    assert distance_score(1.0, 1.0).raw == 1.0
    assert distance_score(0.5, 2.0).raw == 8.0
    assert not distance_score(0.5, 2.0).saturated


def test_distance_score_clamps_zero_d1():
    ds = distance_score(0.0, 0.3)
    assert ds.saturated and ds.raw == pytest.approx(0.3 / 1e-12)


def test_normalize_constant_input():
    out = normalize_scores([2.5, 2.5, 2.5])
    assert len(set(out.tolist())) == 1


def test_normalize_needs_input():
    with pytest.raises(ValueError):
        normalize_scores([])


@given(st.lists(st.floats(0, 1e6, allow_nan=False), min_size=2, max_size=40))
def test_normalize_is_monotone(raw):
    out = normalize_scores(raw)
    for i in range(len(raw)):
        for j in range(len(raw)):
            if raw[i] < raw[j]:
                assert out[i] <= out[j]
            elif raw[i] == raw[j]:
                assert out[i] == out[j]
