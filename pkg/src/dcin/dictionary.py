"""Visual and linguistic confounder dictionaries.

Concepts are ranked by record frequency and drawn per category quota.
Visual rows are prototype features (mean over supporting images of each
image's mean region feature); linguistic rows come from a seeded gaussian
table or an external embedding file. Both are projected into the common
space by learnable matrices: ``D1 = g_v @ W_v`` and ``D2 = g_t @ W_t``.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .corpus import Corpus
from .numerics import Tensor

QUOTA_CATEGORIES = ("object", "property", "action")
# gender concepts compete for the object quota
CATEGORY_QUOTA = {"object": "object", "gender": "object", "property": "property", "action": "action"}


class DictionaryError(ValueError):
    pass


def quotas(k: int, ratio: Sequence[float]) -> dict[str, int]:
    """Split k slots over object/property/action by largest remainder."""
    if len(ratio) != 3 or any(r < 0 for r in ratio) or sum(ratio) <= 0:
        raise DictionaryError(f"ratio must be three nonnegative weights, got {list(ratio)}")
    fr = [Fraction(r).limit_denominator(10**6) for r in ratio]
    raw = [k * r / sum(fr) for r in fr]
    q = [int(x) for x in raw]
    order = sorted(range(3), key=lambda i: (-(raw[i] - q[i]), i))
    for i in order[: k - sum(q)]:
        q[i] += 1
    return dict(zip(QUOTA_CATEGORIES, q))


def concept_frequencies(corpus: Corpus, modality: str) -> Counter:
    freq: Counter = Counter()
    for rec in corpus.records:
        present = rec.visual_concepts if modality == "visual" else set(rec.caption_tokens)
        freq.update(present)
    return freq


def _select(corpus: Corpus, modality: str, k: int, ratio) -> list[str]:
    freq = concept_frequencies(corpus, modality)
    want = quotas(k, ratio)
    pools: dict[str, list[str]] = {c: [] for c in QUOTA_CATEGORIES}
    for entry in corpus.vocab.entries:
        if entry.modality != modality or freq[entry.id] == 0:
            continue
        slot = CATEGORY_QUOTA.get(entry.category)
        if slot is not None:
            pools[slot].append(entry.id)
    chosen = []
    for cat in QUOTA_CATEGORIES:
        ranked = sorted(pools[cat], key=lambda c: (-freq[c], c))
        if len(ranked) < want[cat]:
            raise DictionaryError(
                f"{modality} {cat}: need {want[cat]} concepts, only {len(ranked)} available "
                f"(shortfall {want[cat] - len(ranked)})"
            )
        chosen += ranked[: want[cat]]
    return sorted(chosen, key=lambda c: (-freq[c], c))


def select_concepts(corpus: Corpus, vocab=None, k: int = 300, ratio=(7, 2, 1)) -> tuple[list[str], list[str]]:
    """Top-k non-stopword concepts per modality under the category ratio.

    Each list is ordered by (record frequency desc, concept id asc).
    """
    if vocab is not None and vocab is not corpus.vocab:
        corpus = Corpus(vocab, corpus.records, corpus.split)
    return _select(corpus, "visual", k, ratio), _select(corpus, "linguistic", k, ratio)


def build_visual_prototypes(corpus: Corpus, concepts: Sequence[str]) -> np.ndarray:
    rows = []
    for c in concepts:
        means = [rec.region_features.sum(axis=0) / rec.region_features.shape[0]
                 for rec in corpus.records if c in rec.visual_concepts and rec.region_features.size]
        if not means:
            raise DictionaryError(f"visual concept {c!r} has no supporting image")
        rows.append(np.sum(means, axis=0) / len(means))
    return np.array(rows, dtype=np.float64).reshape(len(concepts), -1)


def build_linguistic_embeddings(concepts: Sequence[str], d_t: int, seed: int,
                                table: Mapping[str, Sequence[float]] | None = None) -> np.ndarray:
    """0.1 * N(0, 1) rows, one stream per concept id; ``table`` rows override."""
    if d_t < 1:
        raise DictionaryError("d_t must be >= 1")
    out = np.empty((len(concepts), d_t))
    for i, c in enumerate(concepts):
        if table is not None:
            if c not in table:
                raise DictionaryError(f"external embedding table has no row for {c!r}")
            row = np.asarray(table[c], dtype=np.float64)
            if row.shape != (d_t,):
                raise DictionaryError(f"embedding for {c!r} has shape {row.shape}, expected ({d_t},)")
            out[i] = row
        else:
            out[i] = 0.1 * nx.rng_for(seed, "word-embedding:" + c).standard_normal(d_t)
    return out


def load_embedding_table(path) -> dict[str, list[float]]:
    return json.loads(Path(path).read_text())


@dataclass
class ConfounderDictionary:
    visual_concepts: list[str]
    linguistic_concepts: list[str]
    g_v: np.ndarray
    g_t: np.ndarray
    W_v: Tensor
    W_t: Tensor
    D1: Tensor | None = None
    D2: Tensor | None = None

    @property
    def concepts(self) -> list[str]:
        return self.visual_concepts + self.linguistic_concepts

    @property
    def k(self) -> int:
        return len(self.visual_concepts)


def project(dic: ConfounderDictionary) -> ConfounderDictionary:
    """Refresh D1, D2 from the current projection weights (recorded on the tape)."""
    dic.D1 = nx.matmul(Tensor(dic.g_v), dic.W_v)
    dic.D2 = nx.matmul(Tensor(dic.g_t), dic.W_t)
    return dic
