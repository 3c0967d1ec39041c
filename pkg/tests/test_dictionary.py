import numpy as np
import pytest

from dcin import dictionary as dc
from dcin.corpus import Corpus, ScmSpec, generate
from dcin.numerics import Tensor

from oracles import make_vocab, naive_matmul, record


CATS = {"dog": "object", "cat": "object", "red": "property", "run": "action", "man": "gender"}


def small_corpus():
    vocab = make_vocab(linguistic=["dog", "cat", "red", "run", "man"], stopwords=["is", "a"], categories=CATS)
    caps = [["dog", "is", "red"], ["cat", "is", "a"], ["dog", "run", "is"], ["cat", "man"], ["dog", "is"]]
    return Corpus(vocab, [record(f"r{i}", caption=c) for i, c in enumerate(caps)])


def test_quota_split():
    assert dc.quotas(300, (7, 2, 1)) == {"object": 210, "property": 60, "action": 30}
    assert dc.quotas(8, (7, 2, 1)) == {"object": 6, "property": 1, "action": 1}
    assert sum(dc.quotas(17, (7, 2, 1)).values()) == 17


def test_forced_quota_and_stopword_exclusion():
    c = small_corpus()
    lin = dc._select(c, "linguistic", 3, (1, 1, 1))
    assert set(lin) == {"dog", "red", "run"}
    assert "is" not in dc._select(c, "linguistic", 3, (1, 1, 1))


def test_tie_break_by_id():
    vocab = make_vocab(linguistic=["dog", "cat"])
    c = Corpus(vocab, [record("r0", caption=["dog"]), record("r1", caption=["cat"])])
    assert dc._select(c, "linguistic", 2, (1, 0, 0)) == ["cat", "dog"]


def test_gender_shares_object_quota():
    c = small_corpus()
    lin = dc._select(c, "linguistic", 3, (1, 0, 0))
    assert lin == ["dog", "cat", "man"]


def test_insufficient_concepts_reports_shortfall():
    with pytest.raises(dc.DictionaryError, match=r"property.*shortfall 1"):
        dc._select(small_corpus(), "linguistic", 4, (2, 2, 0))


def test_selection_deterministic():
    c = small_corpus()
    assert dc._select(c, "linguistic", 3, (1, 1, 1)) == dc._select(c, "linguistic", 3, (1, 1, 1))


def test_prototype_of_constant_regions():
    vocab = make_vocab(visual=["a"])
    f = np.tile([0.5, -1.25], (4, 1))
    c = Corpus(vocab, [record("r0", visual=["a"], features=f)])
    assert np.array_equal(dc.build_visual_prototypes(c, ["a"]), [[0.5, -1.25]])


def test_prototype_matches_formula_on_small_corpus():
    rng = np.random.default_rng(0)
    vocab = make_vocab(visual=["a", "b"])
    feats = [rng.normal(size=(3, 2)) for _ in range(5)]
    members = [["a"], ["a", "b"], ["b"], ["a"], ["b"]]
    c = Corpus(vocab, [record(f"r{i}", visual=m, features=f) for i, (m, f) in enumerate(zip(members, feats))])
    got = dc.build_visual_prototypes(c, ["a", "b"])
    for row, concept in zip(got, ["a", "b"]):
        imgs = [f for f, m in zip(feats, members) if concept in m]
        per_image = []
        for f in imgs:
            acc = np.zeros(2)
            for r in range(f.shape[0]):
                acc = acc + f[r]
            per_image.append(acc / f.shape[0])
        acc = np.zeros(2)
        for m in per_image:
            acc = acc + m
        assert np.array_equal(row, acc / len(per_image))
    two = dc.build_visual_prototypes(Corpus(vocab, c.records[:2]), ["a"])
    m1, m2 = feats[0].sum(axis=0) / 3, feats[1].sum(axis=0) / 3
    assert np.array_equal(two[0], (m1 + m2) / 2)


def test_zero_noise_generator_round_trip():
    # dyadic prototypes keep every sum exact; each image shows one concept only
    vocab = make_vocab(visual=["a", "b"], strata=["z0", "z1"])
    protos = {"a": [0.25, -1.5, 2.0], "b": [-0.75, 0.5, 1.125]}
    spec = ScmSpec(vocab, ["z0", "z1"], [0.5, 0.5], {"a": [1.0, 0.0], "b": [0.0, 1.0]}, {}, protos,
                   noise_scale=0.0, n_regions=4)
    c = generate(spec, 40, seed=1)
    got = dc.build_visual_prototypes(c, ["a", "b"])
    assert np.array_equal(got, np.array([protos["a"], protos["b"]]))


def test_zero_support_concept_raises():
    vocab = make_vocab(visual=["a", "b"])
    c = Corpus(vocab, [record("r0", visual=["a"])])
    with pytest.raises(dc.DictionaryError, match="'b'"):
        dc.build_visual_prototypes(c, ["a", "b"])


def test_linguistic_embeddings():
    a = dc.build_linguistic_embeddings(["x", "y"], 8, seed=3)
    assert np.array_equal(a, dc.build_linguistic_embeddings(["x", "y"], 8, seed=3))
    # each concept owns its stream, so order does not matter
    assert np.array_equal(a[::-1], dc.build_linguistic_embeddings(["y", "x"], 8, seed=3))
    table = {"x": [1.0, 2.0], "y": [3.0, 4.0]}
    assert dc.build_linguistic_embeddings(["y"], 2, 0, table).tolist() == [[3.0, 4.0]]
    with pytest.raises(dc.DictionaryError, match="'z'"):
        dc.build_linguistic_embeddings(["z"], 2, 0, table)


def test_linguistic_embedding_scale():
    g = dc.build_linguistic_embeddings([f"c{i}" for i in range(50)], 64, seed=0)
    assert abs(g.std() - 0.1) <= 0.02
    # a 64-sample std has spread about 0.1 / sqrt(128); allow four of those
    for row in g:
        assert abs(row.std() - 0.1) <= 4 * 0.1 / np.sqrt(128)


def _dict(g_v, g_t, W_v, W_t):
    return dc.ConfounderDictionary(["a"] * g_v.shape[0], ["b"] * g_t.shape[0], g_v, g_t, Tensor(W_v), Tensor(W_t))


def test_projection_examples():
    rng = np.random.default_rng(2)
    g_v, g_t = rng.normal(size=(3, 4)), rng.normal(size=(3, 5))
    d = dc.project(_dict(g_v, g_t, np.eye(4), np.zeros((5, 4))))
    assert np.array_equal(d.D1.data, g_v)
    assert np.all(d.D2.data == 0)
    W_v, W_t = rng.normal(size=(4, 6)), rng.normal(size=(5, 6))
    d = dc.project(_dict(g_v, g_t, W_v, W_t))
    assert np.array_equal(d.D1.data, naive_matmul(g_v, W_v))
    assert np.array_equal(d.D2.data, naive_matmul(g_t, W_t))
    with pytest.raises(ValueError):
        dc.project(_dict(g_v, g_t, np.eye(3), W_t))
