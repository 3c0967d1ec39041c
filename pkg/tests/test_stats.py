from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcin import stats
from dcin.corpus import Corpus, generate

from oracles import (
    brute_cond_prob,
    build_random,
    crossed_with_strata,
    random_corpus,
    brute_do_prob,
    corpus_c0,
    independence_spec,
    make_vocab,
    record,
    six_concept_spec,
)


def test_counts_on_c0():
    t = stats.count(corpus_c0())
    assert t.N == 10
    assert t.n1[t.ci("child")] == 5
    assert t.n2[t.ci("child"), t.ci("school")] == 4
    assert np.array_equal(t.n2, t.n2.T)


def test_token_repetition_counted_once():
    vocab = make_vocab(linguistic=["dog"], strata=["z"])
    c = Corpus(vocab, [record("r0", caption=["dog", "dog", "dog"], stratum="z")])
    t = stats.count(c)
    assert t.n1[t.ci("dog")] == 1


def test_shard_counts_add_up():
    c = corpus_c0()
    a = stats.count(Corpus(c.vocab, c.records[:4]))
    b = stats.count(Corpus(c.vocab, c.records[4:]))
    whole = stats.count(c)
    merged = a + b
    for f in ("n1", "n2", "nz", "nxz", "nxyz"):
        assert np.array_equal(getattr(merged, f), getattr(whole, f))
    assert merged.N == whole.N


def test_empty_corpus_rejected():
    with pytest.raises(stats.EstimationError):
        stats.count(Corpus(make_vocab(visual=["a"]), []))


def test_cond_prob_examples():
    t = stats.count(corpus_c0())
    assert stats.cond_prob(t, "child", "school") == 0.8
    assert stats.cond_prob(t, "adult", "adult") == 1.0
    assert stats.cond_prob(t, "adult", "cookout") == 0.0


def test_cond_prob_undefined_names_concept():
    c = corpus_c0()
    vocab = make_vocab(visual=["child", "adult", "school", "cookout", "ghost"], strata=["indoor", "outdoor"])
    t = stats.count(Corpus(vocab, c.records))
    with pytest.raises(stats.UndefinedConditional, match="ghost"):
        stats.cond_prob(t, "ghost", "child")


def test_do_prob_removes_bias_on_c0():
    t = stats.count(corpus_c0())
    assert stats.do_prob_exact(t, "child", "school") == Fraction(7, 10)
    assert stats.do_prob(t, "child", "school") == 0.7
    assert stats.do_prob(t, "child", "school") < stats.cond_prob(t, "child", "school")


def test_single_stratum_collapses_to_conditional():
    c = corpus_c0()
    for r in c.records:
        r.stratum_label = "indoor"
    t = stats.count(c)
    for x in ("child", "adult"):
        for y in t.concepts:
            assert stats.do_prob_exact(t, x, y) == stats.cond_prob_exact(t, x, y)


def test_independent_strata_do_equals_cond():
    spec = independence_spec()
    c = crossed_with_strata(generate(spec, 300, seed=9), spec.strata, [2, 1, 1])
    t = stats.count(c)
    for x in t.concepts:
        for y in t.concepts:
            assert abs(stats.do_prob(t, x, y) - stats.cond_prob(t, x, y)) <= 1e-12


def test_no_overlap_error():
    vocab = make_vocab(visual=["a", "b"], strata=["z0", "z1"])
    c = Corpus(vocab, [record("r0", visual=["a"], stratum="z0")])
    t = stats.count(c)
    with pytest.raises(stats.NoOverlapError):
        stats.do_prob(t, "a", "b", strata=["z1"])


@settings(max_examples=60, deadline=None)
@given(random_corpus)
def test_do_prob_bit_exact_against_joint_table(params):
    c, concepts, strata = build_random(params)
    t = stats.count(c)
    for x in concepts:
        if t.n1[t.ci(x)] == 0:
            continue
        for y in concepts:
            assert stats.do_prob_exact(t, x, y) == brute_do_prob(c, concepts, strata, x, y)
            assert stats.cond_prob_exact(t, x, y) == brute_cond_prob(c, concepts, x, y)


@settings(max_examples=40, deadline=None)
@given(random_corpus, st.integers(1, 3))
def test_do_prob_invariant_under_duplication(params, times):
    c, concepts, _ = build_random(params)
    t1 = stats.count(c)
    t2 = stats.count(Corpus(c.vocab, c.records * times))
    for x in concepts:
        if t1.n1[t1.ci(x)]:
            for y in concepts:
                assert stats.do_prob_exact(t1, x, y) == stats.do_prob_exact(t2, x, y)


@settings(max_examples=40, deadline=None)
@given(random_corpus, random_corpus)
def test_counts_monotone_under_append(params, extra):
    c, concepts, strata = build_random(params)
    n_c, n_s, rows = extra
    more = [
        record(f"x{i}", [cc for b, cc in enumerate(concepts) if mask >> b & 1], stratum=strata[s % len(strata)])
        for i, (mask, s) in enumerate(rows)
    ]
    t1 = stats.count(c)
    t2 = stats.count(Corpus(c.vocab, c.records + more))
    for f in ("n1", "n2", "nz", "nxz", "nxyz"):
        assert np.all(getattr(t2, f) >= getattr(t1, f))
    assert np.all(t1.nxyz <= t1.nxz[:, None, :])
    assert np.all(t1.nxz <= np.minimum(t1.n1[:, None], t1.nz[None, :]))


def test_oracle_do_prob_examples():
    spec = six_concept_spec()
    spec.prior = [0.5, 0.5]
    spec.linguistic["t_a"] = [1.0, 0.0]
    assert stats.oracle_do_prob(spec, "v_a", "t_a") == 0.5
    ind = independence_spec()
    assert stats.oracle_do_prob(ind, "v_a", "t_b") == ind.marginal("t_b")
    assert stats.oracle_do_prob(ind, "v_a", "v_a") == 1.0


def test_oracle_refuses_linked_concepts():
    spec = six_concept_spec()
    spec.caption_links = {"v_a": "t_a"}
    with pytest.raises(stats.EstimationError):
        stats.oracle_do_prob(spec, "v_a", "t_b")


def test_relation_matrix_on_c0():
    t = stats.count(corpus_c0())
    rel = stats.build_relation_matrix(t, ["child", "adult"], ["school", "cookout"])
    E = rel.E
    assert rel.concepts == ["child", "adult", "school", "cookout"]
    assert E[0, 2] == 0.7
    assert np.all(np.diag(E) == 1.0)
    assert np.all((E >= 0) & (E <= 1))


def test_relation_matrix_missing_concept():
    t = stats.count(corpus_c0())
    with pytest.raises(KeyError):
        stats.build_relation_matrix(t, ["child", "nope"], [])


def test_concept_set_strata_and_clamp():
    spec = six_concept_spec()
    c = generate(spec, 400, seed=0)
    vis, lin = list(spec.visual), list(spec.linguistic)
    t = stats.count(c, stratum_source=stats.CONCEPT_SET, strata=vis + lin)
    rel = stats.build_relation_matrix(t, vis, lin, strata_policy="concept")
    assert np.all((rel.E >= 0) & (rel.E <= 1))
    assert stats.relation_strata("v_a", "v_b", vis, lin, t, "concept") == ["v_c"]
    assert stats.relation_strata("v_a", "t_a", vis, lin, t, "concept") == ["v_b", "v_c", "t_b", "t_c"]


def test_table_json_round_trip():
    t = stats.count(corpus_c0())
    back = stats.CoocTable.from_json(t.to_json())
    assert back.concepts == t.concepts and back.N == t.N
    assert np.array_equal(back.nxyz, t.nxyz)


def test_kitchen_bias_conditional_exceeds_interventional():
    # plate and fork both caused by a "dining" stratum; no direct link
    vocab = make_vocab(visual=["plate", "fork"], strata=["dining", "other"])
    from dcin.corpus import ScmSpec

    spec = ScmSpec(vocab, ["dining", "other"], [0.2, 0.8],
                   {"plate": [0.9, 0.05], "fork": [0.8, 0.02]}, {},
                   {"plate": [1.0, 0.0], "fork": [0.0, 1.0]}, n_regions=2)
    t = stats.count(generate(spec, 5000, seed=11))
    cond = stats.cond_prob(t, "plate", "fork")
    do = stats.do_prob(t, "plate", "fork")
    assert cond > 2 * do
    assert abs(do - stats.oracle_do_prob(spec, "plate", "fork")) < 0.03
