"""Bidirectional retrieval metrics and the spurious-retrieval diagnostic.

Ground truth is the diagonal pairing. Ranking is by descending score with
ties broken toward the smaller index, so reports are reproducible.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import Corpus

KS = (1, 5, 10)
DIRECTIONS = ("i2t", "t2i")


class MetricError(ValueError):
    pass


def _scores(S) -> np.ndarray:
    S = np.asarray(getattr(S, "data", S), dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise MetricError(f"score matrix must be square, got {S.shape}")
    return S


def ranks(S, direction: str = "i2t") -> np.ndarray:
    """1-based rank of the true item for every query."""
    S = _scores(S)
    if direction == "t2i":
        S = S.T
    elif direction != "i2t":
        raise MetricError(f"direction must be i2t or t2i, got {direction!r}")
    B = S.shape[0]
    true = np.diag(S)[:, None]
    idx = np.arange(B)
    ahead = (S > true) | ((S == true) & (idx[None, :] < idx[:, None]))
    return ahead.sum(axis=1) + 1


def recall_from_ranks(r: Sequence[int], K: int) -> float:
    if K < 1:
        raise MetricError("K must be >= 1")
    r = np.asarray(r)
    return 100.0 * float(np.count_nonzero(r <= K)) / len(r)


def recall_at_k(S, K: int, direction: str = "i2t") -> float:
    if K < 1:
        raise MetricError("K must be >= 1")
    return recall_from_ranks(ranks(S, direction), K)


@dataclass
class RetrievalReport:
    r_at: dict[str, dict[int, float]]
    rsum: float
    spurious_top1_rate: float | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {
            "r_at": {d: {str(k): v for k, v in row.items()} for d, row in self.r_at.items()},
            "rsum": self.rsum,
        }
        if self.spurious_top1_rate is not None:
            out["spurious_top1_rate"] = self.spurious_top1_rate
        out.update(self.extra)
        return out


def rsum(report: RetrievalReport | dict) -> float:
    r_at = report.r_at if isinstance(report, RetrievalReport) else report
    values = []
    for d in DIRECTIONS:
        for k in KS:
            try:
                values.append(r_at[d][k])
            except KeyError:
                raise MetricError(f"report lacks R@{k} for {d}") from None
    return math.fsum(values)


def retrieval_report(S) -> RetrievalReport:
    S = _scores(S)
    r_at = {}
    for d in DIRECTIONS:
        rk = ranks(S, d)
        r_at[d] = {k: recall_from_ranks(rk, k) for k in KS}
    return RetrievalReport(r_at, rsum(r_at))


def spurious_rate(model_or_scores, corpus: Corpus, planted_pairs: Sequence[tuple[str, str]]) -> float:
    """Percentage of eligible image queries whose top-1 caption carries the spurious word.

    An image query is eligible for a planted (trigger, spurious) pair when
    the image contains the trigger and its own caption lacks the spurious
    concept. Each (query, pair) combination counts once.
    """
    if hasattr(model_or_scores, "score_matrix"):
        S = model_or_scores.score_matrix(corpus)
    else:
        S = _scores(model_or_scores)
    if S.shape[0] != len(corpus):
        raise MetricError("score matrix does not match corpus size")
    # argmax returns the first maximum, matching the smaller-index tie rule
    top1 = S.argmax(axis=1)
    recs = corpus.records
    eligible = hits = 0
    for trigger, spurious in planted_pairs:
        for i, rec in enumerate(recs):
            if trigger not in rec.visual_concepts or spurious in rec.caption_tokens:
                continue
            eligible += 1
            hits += spurious in recs[top1[i]].caption_tokens
    if eligible == 0:
        raise MetricError("no eligible trigger queries for the planted pairs")
    return 100.0 * hits / eligible
