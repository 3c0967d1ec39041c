import numpy as np
import pytest

from dcin import benchmark as bm
from dcin.corpus import generate
from dcin.model import DCINModel, ModelConfig, build_model


@pytest.fixture(scope="module")
def corpus():
    return generate(bm.benchmark_spec(), 80, seed=0, stream="train")


def test_dictionary_layout(corpus):
    m = build_model(corpus, ModelConfig(d=8, d_t=8), 0.05, seed=0)
    assert len(m.visual_concepts) == 8 and len(m.linguistic_concepts) == 8
    assert "school" in m.linguistic_concepts
    assert not set(m.visual_concepts) & set(bm.STRATA)
    D = m.final_dictionary()
    assert D.shape == (16, 8)
    E = m.buffers["E"]
    assert np.all(np.diag(E) == 1) and np.all((0 <= E) & (E <= 1))
    A = m.buffers["A_tilde"]
    assert np.max(np.abs(A - A.T)) <= 1e-12


def test_scores_in_range_and_consistent(corpus):
    m = build_model(corpus, ModelConfig(d=8, d_t=8), 0.05, seed=1)
    S = m.score_matrix(corpus)
    assert S.shape == (80, 80) and np.all(np.abs(S) < 1)
    assert np.array_equal(S[:5, :5], m.score(corpus.records[:5]).data)
    assert all(t.requires_grad for t in m.params.values())


def test_seeded_build_is_deterministic(corpus):
    a = build_model(corpus, ModelConfig(d=8, d_t=8), 0.05, seed=2).state()
    b = build_model(corpus, ModelConfig(d=8, d_t=8), 0.05, seed=2).state()
    c = build_model(corpus, ModelConfig(d=8, d_t=8), 0.05, seed=3).state()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["param/enc.W_img"], c["param/enc.W_img"])


def test_checkpoint_round_trip(corpus, tmp_path):
    m = build_model(corpus, ModelConfig(d=8, d_t=8, pooling="sorted", gcn_layers=2), 0.1, seed=0)
    m.save(tmp_path / "m.json")
    back = DCINModel.load(tmp_path / "m.json")
    assert back.config == m.config and back.lam == m.lam
    assert list(back.params) == list(m.params)
    assert np.array_equal(back.score_matrix(corpus), m.score_matrix(corpus))
    back.save(tmp_path / "again.json")
    assert (tmp_path / "again.json").read_bytes() == (tmp_path / "m.json").read_bytes()


def test_copy_is_independent(corpus):
    m = build_model(corpus, ModelConfig(d=8, d_t=8), 0.05, seed=0)
    c = m.copy()
    c.params["enc.W_img"].data[0, 0] += 1.0
    assert m.params["enc.W_img"].data[0, 0] != c.params["enc.W_img"].data[0, 0]


def test_concept_strata_policy_builds(corpus):
    m = build_model(corpus, ModelConfig(d=8, d_t=8, strata="concept"), 0.05, seed=0)
    assert m.buffers["E"].shape == (16, 16)


def test_config_validation():
    for bad in ({"d": 0}, {"pooling": "max"}, {"strata": "none"}, {"gcn_layers": -1}):
        with pytest.raises(ValueError):
            ModelConfig.from_dict(bad)
    assert ModelConfig.from_dict({"ratio": [1, 1, 1]}).ratio == (1, 1, 1)


def test_lambda_override(corpus):
    m = build_model(corpus, ModelConfig(d=8, d_t=8), 0.05, seed=0)
    assert not np.array_equal(m.score_matrix(corpus, lam=0.0), m.score_matrix(corpus))
    assert m.lam == 0.05
