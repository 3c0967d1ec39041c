"""Concept-annotated image-caption pairs and a synthetic SCM generator.

A record is sampled as ``z ~ P(z)`` followed by independent per-concept
draws ``x ~ P(x | z)``; region features are concept prototypes plus isotropic
gaussian noise. With ``counterfactual=True`` the stratum label is drawn
uniformly and independently of the concepts, which are drawn from their
training marginals ``sum_z P(z) P(x | z)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numerics import rng_for

MODALITIES = ("visual", "linguistic")
CATEGORIES = ("object", "property", "action", "gender", "stopword", "stratum")
SPLITS = ("train", "val", "test", "test_debiased")


class SpecError(ValueError):
    pass


class VocabularyError(KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "vocabulary error"


class CorpusFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Concept:
    id: str
    surface: str
    modality: str
    category: str


class ConceptVocab:
    def __init__(self, entries: Iterable[Concept]):
        self.entries: list[Concept] = list(entries)
        self._index: dict[str, Concept] = {}
        for c in self.entries:
            if c.id in self._index:
                raise SpecError(f"duplicate concept_id {c.id!r}")
            if c.modality not in MODALITIES:
                raise SpecError(f"concept {c.id!r}: modality {c.modality!r} not in {MODALITIES}")
            if c.category not in CATEGORIES:
                raise SpecError(f"concept {c.id!r}: category {c.category!r} not in {CATEGORIES}")
            self._index[c.id] = c

    def __contains__(self, cid):
        return cid in self._index

    def __getitem__(self, cid) -> Concept:
        try:
            return self._index[cid]
        except KeyError:
            raise VocabularyError(f"unknown concept_id {cid!r}") from None

    def __len__(self):
        return len(self.entries)

    def __eq__(self, other):
        return isinstance(other, ConceptVocab) and self.entries == other.entries

    @property
    def ids(self) -> list[str]:
        return [c.id for c in self.entries]

    def select(self, modality=None, category=None) -> list[str]:
        cats = (category,) if isinstance(category, str) else category
        return [
            c.id for c in self.entries
            if (modality is None or c.modality == modality) and (cats is None or c.category in cats)
        ]

    def to_json(self) -> list[dict]:
        return [{"id": c.id, "surface": c.surface, "modality": c.modality, "category": c.category}
                for c in self.entries]

    @classmethod
    def from_json(cls, items: list[dict]) -> ConceptVocab:
        return cls(Concept(d["id"], d.get("surface", d["id"]), d["modality"], d["category"]) for d in items)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> ConceptVocab:
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class PairRecord:
    id: str
    visual_concepts: frozenset[str]
    region_features: np.ndarray
    caption_tokens: list[str]
    stratum_label: str | None = None

    def concepts(self) -> set[str]:
        """Every concept present in the record, counted once."""
        return set(self.visual_concepts) | set(self.caption_tokens)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "visual_concepts": sorted(self.visual_concepts),
            "region_features": [[float(v) for v in row] for row in self.region_features],
            "caption_tokens": list(self.caption_tokens),
            "stratum_label": self.stratum_label,
        }

    def __eq__(self, other):
        return (
            isinstance(other, PairRecord)
            and self.id == other.id
            and self.visual_concepts == other.visual_concepts
            and self.caption_tokens == other.caption_tokens
            and self.stratum_label == other.stratum_label
            and self.region_features.shape == other.region_features.shape
            and np.array_equal(self.region_features, other.region_features)
        )


@dataclass
class Corpus:
    vocab: ConceptVocab
    records: list[PairRecord]
    split: str = "train"

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def subset(self, indices: Sequence[int], split: str | None = None) -> Corpus:
        return Corpus(self.vocab, [self.records[i] for i in indices], split or self.split)

    def validate(self):
        for rec in self.records:
            _check_record(rec, self.vocab)


def _check_record(rec: PairRecord, vocab: ConceptVocab, n_regions: int | None = None, where: str = ""):
    for cid in list(rec.visual_concepts) + list(rec.caption_tokens):
        if cid not in vocab:
            raise VocabularyError(f"unknown concept_id {cid!r}{where}")
    if rec.stratum_label is not None:
        if rec.stratum_label not in vocab:
            raise VocabularyError(f"unknown concept_id {rec.stratum_label!r}{where}")
        if vocab[rec.stratum_label].category != "stratum":
            raise SpecError(f"stratum_label {rec.stratum_label!r} is not a stratum concept{where}")
    if rec.region_features.ndim != 2:
        raise CorpusFormatError(f"region_features must be a matrix{where}")
    if n_regions is not None and rec.region_features.shape[0] != n_regions:
        raise CorpusFormatError(f"expected {n_regions} regions, got {rec.region_features.shape[0]}{where}")


@dataclass
class ScmSpec:
    """Generative parameters of a synthetic corpus.

    ``visual`` and ``linguistic`` map concept ids to one probability per
    stratum. ``caption_links`` maps a visual concept to the word a caption
    uses for it; a present linked visual concept is mentioned with
    probability ``mention_prob``. Linked words are therefore not
    conditionally independent of the image given ``z``, so
    :func:`dcin.stats.oracle_do_prob` refuses them. ``filler`` lists stopword
    tokens each inserted with probability one half; a caption that would be
    empty gets the first filler token.
    """

    vocab: ConceptVocab
    strata: list[str]
    prior: list[float]
    visual: dict[str, list[float]]
    linguistic: dict[str, list[float]]
    prototypes: dict[str, list[float]]
    noise_scale: float = 0.1
    n_regions: int = 6
    counterfactual: bool = False
    caption_links: dict[str, str] = field(default_factory=dict)
    mention_prob: float = 1.0
    filler: list[str] = field(default_factory=list)
    planted_pairs: list[tuple[str, str]] = field(default_factory=list)

    @property
    def d_v(self) -> int:
        return len(next(iter(self.prototypes.values())))

    def validate(self):
        if not self.strata:
            raise SpecError("at least one stratum required")
        if len(self.prior) != len(self.strata):
            raise SpecError("prior length must equal number of strata")
        if any(not 0.0 <= p <= 1.0 for p in self.prior):
            raise SpecError("stratum priors must lie in [0,1]")
        if abs(math.fsum(self.prior) - 1.0) > 1e-12:
            raise SpecError(f"stratum priors sum to {math.fsum(self.prior)!r}, not 1 within 1e-12")
        for z in self.strata:
            if self.vocab[z].category != "stratum":
                raise SpecError(f"stratum {z!r} must have category 'stratum'")
        for table, modality in ((self.visual, "visual"), (self.linguistic, "linguistic")):
            for cid, probs in table.items():
                c = self.vocab[cid]
                if c.modality != modality or c.category == "stratum":
                    raise SpecError(f"concept {cid!r} cannot be a {modality} generator concept")
                if len(probs) != len(self.strata):
                    raise SpecError(f"concept {cid!r}: need {len(self.strata)} conditionals")
                if any(not 0.0 <= p <= 1.0 for p in probs):
                    raise SpecError(f"concept {cid!r}: conditionals must lie in [0,1]")
        if not self.prototypes:
            raise SpecError("prototype table is empty")
        dims = {len(v) for v in self.prototypes.values()}
        if len(dims) != 1:
            raise SpecError("prototypes must share one dimension")
        for cid in self.visual:
            if cid not in self.prototypes:
                raise SpecError(f"visual concept {cid!r} has no prototype")
        if self.noise_scale < 0:
            raise SpecError("noise_scale must be nonnegative")
        if self.n_regions < 1:
            raise SpecError("n_regions must be >= 1")
        for v, w in self.caption_links.items():
            if v not in self.visual:
                raise SpecError(f"caption link source {v!r} is not a visual generator concept")
            if self.vocab[w].modality != "linguistic" or self.vocab[w].category == "stratum":
                raise SpecError(f"caption link target {w!r} must be a linguistic concept")
        if not 0.0 <= self.mention_prob <= 1.0:
            raise SpecError("mention_prob must lie in [0,1]")
        for w in self.filler:
            if self.vocab[w].category != "stopword":
                raise SpecError(f"filler token {w!r} must be a stopword")

    def marginal(self, cid: str) -> float:
        probs = self.visual.get(cid) or self.linguistic.get(cid)
        if probs is None:
            raise VocabularyError(f"{cid!r} is not a generator concept")
        return math.fsum(pz * p for pz, p in zip(self.prior, probs))

    def to_json(self) -> dict:
        return {
            "vocab": self.vocab.to_json(),
            "strata": [{"id": z, "prior": p} for z, p in zip(self.strata, self.prior)],
            "visual": self.visual,
            "linguistic": self.linguistic,
            "prototypes": self.prototypes,
            "noise_scale": self.noise_scale,
            "n_regions": self.n_regions,
            "counterfactual": self.counterfactual,
            "caption_links": self.caption_links,
            "mention_prob": self.mention_prob,
            "filler": self.filler,
            "planted_pairs": [list(p) for p in self.planted_pairs],
        }

    @classmethod
    def from_json(cls, doc: dict) -> ScmSpec:
        spec = cls(
            vocab=ConceptVocab.from_json(doc["vocab"]),
            strata=[s["id"] for s in doc["strata"]],
            prior=[float(s["prior"]) for s in doc["strata"]],
            visual={k: [float(p) for p in v] for k, v in doc.get("visual", {}).items()},
            linguistic={k: [float(p) for p in v] for k, v in doc.get("linguistic", {}).items()},
            prototypes={k: [float(x) for x in v] for k, v in doc["prototypes"].items()},
            noise_scale=float(doc.get("noise_scale", 0.1)),
            n_regions=int(doc.get("n_regions", 6)),
            counterfactual=bool(doc.get("counterfactual", False)),
            caption_links=dict(doc.get("caption_links", {})),
            mention_prob=float(doc.get("mention_prob", 1.0)),
            filler=list(doc.get("filler", [])),
            planted_pairs=[tuple(p) for p in doc.get("planted_pairs", [])],
        )
        spec.validate()
        return spec

    @classmethod
    def load(cls, path) -> ScmSpec:
        return cls.from_json(json.loads(Path(path).read_text()))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")


def _render_regions(items: list[str], spec: ScmSpec, rng: np.random.Generator) -> np.ndarray:
    proto = np.zeros((spec.n_regions, spec.d_v))
    if items:
        for r in range(spec.n_regions):
            proto[r] = spec.prototypes[items[r % len(items)]]
    if spec.noise_scale == 0:
        return proto
    return proto + spec.noise_scale * rng.standard_normal(proto.shape)


def generate(spec: ScmSpec, n_records: int, seed: int, split: str | None = None,
             id_prefix: str = "r", stream: str = "") -> Corpus:
    """Sample ``n_records`` pairs from the SCM, deterministically in ``seed``.

    ``stream`` names an independent sample drawn from the same seed (e.g.
    ``"val"``), so several splits can share one experiment seed.
    """
    spec.validate()
    if n_records < 1:
        raise SpecError("n_records must be >= 1")
    split = split or ("test_debiased" if spec.counterfactual else "train")
    rng = rng_for(seed, f"data:{'counterfactual' if spec.counterfactual else 'factual'}:{stream}")
    S = len(spec.strata)
    vis_ids = list(spec.visual)
    lin_ids = list(spec.linguistic)
    if spec.counterfactual:
        vis_p = np.array([[spec.marginal(c)] * S for c in vis_ids]).reshape(len(vis_ids), S)
        lin_p = np.array([[spec.marginal(c)] * S for c in lin_ids]).reshape(len(lin_ids), S)
        prior = np.full(S, 1.0 / S)
    else:
        vis_p = np.array([spec.visual[c] for c in vis_ids]).reshape(len(vis_ids), S)
        lin_p = np.array([spec.linguistic[c] for c in lin_ids]).reshape(len(lin_ids), S)
        prior = np.asarray(spec.prior)
    width = max(1, len(str(n_records - 1)))
    records = []
    for i in range(n_records):
        z = int(rng.choice(S, p=prior))
        zid = spec.strata[z]
        visual = [c for c, hit in zip(vis_ids, rng.random(len(vis_ids)) < vis_p[:, z]) if hit]
        words = [c for c, hit in zip(lin_ids, rng.random(len(lin_ids)) < lin_p[:, z]) if hit]
        for v in visual:
            w = spec.caption_links.get(v)
            if w is not None and rng.random() < spec.mention_prob and w not in words:
                words.append(w)
        words += [w for w, u in zip(spec.filler, rng.random(len(spec.filler))) if u < 0.5]
        if not words and spec.filler:
            words = [spec.filler[0]]
        order = rng.permutation(len(words))
        caption = [words[j] for j in order]
        items = ([zid] if zid in spec.prototypes else []) + sorted(visual)
        feats = _render_regions(items, spec, rng)
        records.append(PairRecord(f"{id_prefix}{i:0{width}d}", frozenset(visual), feats, caption, zid))
    return Corpus(spec.vocab, records, split)


def save_jsonl(corpus: Corpus, path):
    with open(path, "w") as fh:
        for rec in corpus.records:
            fh.write(json.dumps(rec.to_json()) + "\n")


def load_jsonl(path, vocab: ConceptVocab, split: str = "train", n_regions: int | None = None) -> Corpus:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f" (line {lineno})"
            try:
                d = json.loads(line)
                feats = np.array(d["region_features"], dtype=np.float64)
                if feats.size == 0:
                    feats = feats.reshape(0, 0)
                rec = PairRecord(
                    id=str(d["id"]),
                    visual_concepts=frozenset(d["visual_concepts"]),
                    region_features=feats,
                    caption_tokens=list(d["caption_tokens"]),
                    stratum_label=d.get("stratum_label"),
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CorpusFormatError(f"malformed record at line {lineno}: {exc}") from None
            _check_record(rec, vocab, n_regions, where)
            records.append(rec)
    return Corpus(vocab, records, split)


def split(corpus: Corpus, fractions: Sequence[float] = (0.7, 0.2, 0.1), seed: int = 0):
    """Seeded disjoint partition into (train, val, test)."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(math.fsum(fractions) - 1.0) > 1e-9:
        raise SpecError(f"fractions must be three nonnegative values summing to 1, got {list(fractions)}")
    n = len(corpus)
    perm = rng_for(seed, "split").permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = min(n - n_train, int(round(fractions[1] * n)))
    parts = perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]
    return tuple(corpus.subset(sorted(p), name) for p, name in zip(parts, ("train", "val", "test")))
