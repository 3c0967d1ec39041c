"""Full matching model: encoders, confounder dictionary, GCN and head.

All learnable tensors live in one ordered name -> Tensor mapping so the
optimizer, checkpointing and gradient checks treat them uniformly.
Frozen inputs (prototypes ``g_v``, linguistic rows ``g_t`` and the
normalized adjacency) are buffers.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from . import stats
from .corpus import Corpus, PairRecord
from .deconfound import DeconfoundHead, score_batch
from .dictionary import (
    ConfounderDictionary,
    build_linguistic_embeddings,
    build_visual_prototypes,
    project,
    select_concepts,
)
from .encoder import EncoderParams, encode_images, encode_texts
from .knowledge import gcn_forward, normalize_adjacency
from .numerics import Tensor


@dataclass
class ModelConfig:
    d: int = 32
    d_t: int = 32
    k: int = 8
    ratio: tuple[float, float, float] = (7, 2, 1)
    gcn_layers: int = 1
    pooling: str = "mean"
    strata: str = "explicit"
    max_positions: int = 16
    embedding_table: str | None = None

    def validate(self):
        for name in ("d", "d_t", "k", "max_positions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.gcn_layers < 0:
            raise ValueError("gcn_layers must be >= 0")
        if self.pooling not in ("mean", "sorted"):
            raise ValueError(f"pooling must be 'mean' or 'sorted', got {self.pooling!r}")
        if self.strata not in ("explicit", "concept"):
            raise ValueError(f"strata must be 'explicit' or 'concept', got {self.strata!r}")

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "ratio" in known:
            known["ratio"] = tuple(known["ratio"])
        cfg = cls(**known)
        cfg.validate()
        return cfg


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class DCINModel:
    config: ModelConfig
    lam: float
    tokens: list[str]
    visual_concepts: list[str]
    linguistic_concepts: list[str]
    params: dict[str, Tensor]
    buffers: dict[str, np.ndarray]
    info: dict = field(default_factory=dict)

    @property
    def d_v(self) -> int:
        return self.buffers["g_v"].shape[1]

    def encoder(self) -> EncoderParams:
        p = self.params
        return EncoderParams(
            W_img=p["enc.W_img"],
            token_table=p["enc.token_table"],
            W_txt=p["enc.W_txt"],
            token_index={t: i for i, t in enumerate(self.tokens)},
            pool_img=p.get("enc.pool_img"),
            pool_txt=p.get("enc.pool_txt"),
        )

    def head(self, lam: float | None = None) -> DeconfoundHead:
        p = self.params
        return DeconfoundHead(
            p["mlp.w1"], p["mlp.b1"], p["mlp.w2"], p["mlp.b2"],
            p["psi_v.w"], p["psi_v.b"], p["psi_t.w"], p["psi_t.b"],
            self.lam if lam is None else lam,
        )

    def confounder_dictionary(self) -> ConfounderDictionary:
        return project(ConfounderDictionary(
            self.visual_concepts, self.linguistic_concepts,
            self.buffers["g_v"], self.buffers["g_t"],
            self.params["dict.W_v"], self.params["dict.W_t"],
        ))

    def final_dictionary(self) -> Tensor:
        dic = self.confounder_dictionary()
        H0 = nx.concat_rows([dic.D1, dic.D2])
        layers = [self.params[f"gcn.W{l}"] for l in range(self.config.gcn_layers)]
        return gcn_forward(H0, self.buffers["A_tilde"], layers)

    def embed_images(self, records: Sequence[PairRecord]) -> Tensor:
        return encode_images([r.region_features for r in records], self.encoder())[1]

    def embed_texts(self, records: Sequence[PairRecord]) -> Tensor:
        return encode_texts([r.caption_tokens for r in records], self.encoder())[1]

    def score(self, images: Sequence[PairRecord], texts: Sequence[PairRecord] | None = None,
              lam: float | None = None) -> Tensor:
        """Score matrix of images (rows) against texts (columns)."""
        texts = images if texts is None else texts
        return score_batch(self.embed_images(images), self.embed_texts(texts),
                           self.final_dictionary(), self.head(lam))

    def score_matrix(self, corpus: Corpus, lam: float | None = None) -> np.ndarray:
        with_grad = [t for t in self.params.values() if t.requires_grad]
        for t in with_grad:
            t.requires_grad = False
        try:
            return self.score(corpus.records, lam=lam).data.copy()
        finally:
            for t in with_grad:
                t.requires_grad = True

    def state(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v.data for k, v in self.params.items()}
        out.update({f"buffer/{k}": v for k, v in self.buffers.items()})
        return out

    def meta(self) -> dict:
        cfg = asdict(self.config)
        cfg["ratio"] = list(cfg["ratio"])
        return {
            "model_config": cfg,
            "lambda": self.lam,
            "tokens": self.tokens,
            "visual_concepts": self.visual_concepts,
            "linguistic_concepts": self.linguistic_concepts,
            "param_order": list(self.params),
            **({"info": self.info} if self.info else {}),
        }

    def save(self, path, extra_meta: dict | None = None):
        meta = self.meta()
        if extra_meta:
            meta.update(extra_meta)
        nx.save_checkpoint(path, self.state(), meta)

    @classmethod
    def from_state(cls, tensors: dict[str, np.ndarray], meta: dict) -> DCINModel:
        params = {k: Tensor(tensors[f"param/{k}"].copy(), requires_grad=True, name=k) for k in meta["param_order"]}
        buffers = {k[len("buffer/"):]: v for k, v in tensors.items() if k.startswith("buffer/")}
        return cls(
            ModelConfig.from_dict(meta["model_config"]), float(meta["lambda"]), list(meta["tokens"]),
            list(meta["visual_concepts"]), list(meta["linguistic_concepts"]), params, buffers,
            meta.get("info", {}),
        )

    @classmethod
    def load(cls, path) -> DCINModel:
        return cls.from_state(*nx.load_checkpoint(path))

    def copy(self) -> DCINModel:
        return DCINModel.from_state({k: v.copy() for k, v in self.state().items()}, self.meta())


def build_model(train: Corpus, config: ModelConfig, lam: float, seed: int,
                embedding_table: dict | None = None) -> DCINModel:
    """Select dictionary concepts, estimate E by backdoor adjustment, and initialize parameters."""
    config.validate()
    vocab = train.vocab
    vis, lin = select_concepts(train, k=config.k, ratio=config.ratio)
    g_v = build_visual_prototypes(train, vis)
    g_t = build_linguistic_embeddings(lin, config.d_t, seed, embedding_table)

    if config.strata == "explicit":
        table = stats.count(train, stratum_source=stats.EXPLICIT, concepts=vis + lin)
    else:
        table = stats.count(train, stratum_source=stats.CONCEPT_SET,
                            strata=vis + [c for c in lin if c not in vis], concepts=vis + lin)
    relation = stats.build_relation_matrix(table, vis, lin, strata_policy=config.strata)
    A = normalize_adjacency(relation.E)

    tokens = [c.id for c in vocab.entries if c.modality == "linguistic" and c.category != "stratum"]
    d_v = g_v.shape[1]
    d, d_t = config.d, config.d_t
    rng = nx.rng_for(seed, "init")
    p: dict[str, np.ndarray] = {
        "enc.W_img": _glorot(rng, d_v, d),
        "enc.token_table": build_linguistic_embeddings(tokens, d_t, seed, embedding_table),
        "enc.W_txt": _glorot(rng, d_t, d),
    }
    if config.pooling == "sorted":
        p["enc.pool_img"] = np.zeros(config.max_positions)
        p["enc.pool_txt"] = np.zeros(config.max_positions)
    p["dict.W_v"] = _glorot(rng, d_v, d)
    p["dict.W_t"] = _glorot(rng, d_t, d)
    for l in range(config.gcn_layers):
        p[f"gcn.W{l}"] = _glorot(rng, d, d)
    p["mlp.w1"] = _glorot(rng, d, d)
    p["mlp.b1"] = np.zeros(d)
    p["mlp.w2"] = _glorot(rng, d, d)
    p["mlp.b2"] = np.zeros(d)
    p["psi_v.w"] = _glorot(rng, 2 * d, d)
    p["psi_v.b"] = np.zeros(d)
    p["psi_t.w"] = _glorot(rng, 2 * d, d)
    p["psi_t.b"] = np.zeros(d)

    return DCINModel(
        config=config,
        lam=lam,
        tokens=tokens,
        visual_concepts=vis,
        linguistic_concepts=lin,
        params={k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()},
        buffers={"g_v": g_v, "g_t": g_t, "A_tilde": A, "E": relation.E},
    )
