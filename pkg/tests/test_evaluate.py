import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dcin import evaluate as ev
from dcin.corpus import Corpus

from oracles import make_vocab, record


def ref_rank(S, i):
    order = sorted(range(S.shape[1]), key=lambda j: (-S[i, j], j))
    return order.index(i) + 1


square = st.integers(1, 8).flatmap(lambda n: arrays(np.float64, (n, n), elements=st.floats(-1, 1)))


def test_recall_from_rank_list():
    assert ev.recall_from_ranks([1, 2, 6, 1, 3], 1) == 40.0
    assert ev.recall_from_ranks([1, 2, 6, 1, 3], 5) == 80.0
    with pytest.raises(ev.MetricError):
        ev.recall_from_ranks([1], 0)


def test_recall_examples():
    rng = np.random.default_rng(0)
    S = rng.uniform(size=(7, 7))
    assert ev.recall_at_k(S, 7) == 100.0 and ev.recall_at_k(S, 50, "t2i") == 100.0
    assert ev.recall_at_k(np.eye(5) + 0.1 * rng.uniform(size=(5, 5)) * 0.5, 1) == 100.0
    with pytest.raises(ev.MetricError):
        ev.recall_at_k(S, 0)
    with pytest.raises(ev.MetricError):
        ev.recall_at_k(np.ones((2, 3)), 1)


def test_ties_go_to_smaller_index():
    S = np.zeros((3, 3))
    assert ev.ranks(S).tolist() == [1, 2, 3]
    assert ev.ranks(S, "t2i").tolist() == [1, 2, 3]


def test_rsum_examples():
    full = {d: {k: 100.0 for k in ev.KS} for d in ev.DIRECTIONS}
    assert ev.rsum(full) == 600.0
    assert ev.rsum({d: {k: 0.0 for k in ev.KS} for d in ev.DIRECTIONS}) == 0.0
    fixture = {d: {1: 40.0, 5: 80.0, 10: 100.0} for d in ev.DIRECTIONS}
    assert ev.rsum(fixture) == 440.0
    with pytest.raises(ev.MetricError, match="R@10"):
        ev.rsum({d: {1: 1.0, 5: 1.0} for d in ev.DIRECTIONS})


@settings(max_examples=300, deadline=None)
@given(square)
def test_report_properties(S):
    rep = ev.retrieval_report(S)
    for d in ev.DIRECTIONS:
        vals = [rep.r_at[d][k] for k in ev.KS]
        assert all(0.0 <= v <= 100.0 for v in vals)
        assert vals == sorted(vals)
    # correctly rounded sum of the six entries
    assert rep.rsum == math.fsum(rep.r_at[d][k] for d in ev.DIRECTIONS for k in ev.KS)
    assert ev.ranks(S).tolist() == [ref_rank(S, i) for i in range(S.shape[0])]
    assert ev.ranks(S, "t2i").tolist() == [ref_rank(S.T, i) for i in range(S.shape[0])]


grid = st.integers(1, 8).flatmap(
    lambda n: arrays(np.int64, (n, n), elements=st.integers(-16, 16)).map(lambda a: a / 16.0))


@settings(max_examples=100, deadline=None)
@given(grid)
def test_recall_invariant_under_monotone_transform(S):
    # on a coarse grid these maps stay strictly increasing in floating point
    base = ev.retrieval_report(S).to_json()
    assert ev.retrieval_report(np.exp(3 * S) - 7).to_json() == base
    assert ev.retrieval_report(S**3 + 0.5 * S).to_json() == base
    assert ev.retrieval_report(np.tanh(S)).to_json() == base


def spurious_corpus():
    vocab = make_vocab(visual=["kid"], linguistic=["kid_w", "school"])
    recs = [
        record("a", ["kid"], ["kid_w"]),
        record("b", ["kid"], ["kid_w", "school"]),
        record("c", [], ["school"]),
        record("d", ["kid"], ["kid_w"]),
    ]
    return Corpus(vocab, recs)


def test_spurious_rate_examples():
    c = spurious_corpus()
    pairs = [("kid", "school")]
    assert ev.spurious_rate(np.eye(4), c, pairs) == 0.0
    S = np.zeros((4, 4))
    S[:, 1] = 1.0
    # eligible queries a and d both retrieve b, whose caption says school
    assert ev.spurious_rate(S, c, pairs) == 100.0
    S = np.eye(4)
    S[0, 2] = 2.0
    assert ev.spurious_rate(S, c, pairs) == 50.0


def test_spurious_rate_without_triggers():
    c = spurious_corpus()
    with pytest.raises(ev.MetricError):
        ev.spurious_rate(np.eye(4), c, [("nothing", "school")])
    with pytest.raises(ev.MetricError):
        ev.spurious_rate(np.eye(3), c, [("kid", "school")])


def test_report_json_keys():
    rep = ev.retrieval_report(np.eye(3))
    js = rep.to_json()
    assert set(js["r_at"]) == {"i2t", "t2i"} and set(js["r_at"]["i2t"]) == {"1", "5", "10"}
    assert js["rsum"] == 600.0
