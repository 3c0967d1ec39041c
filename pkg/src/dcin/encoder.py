"""Linear region/token encoders and pooling to global embeddings.

Region features are projected with ``W_img``; caption tokens are looked up
in a learnable table and projected with ``W_txt``. Pooling is either the
mean or a simplified generalized pooling: each coordinate is sorted in
descending order over the items and combined with position weights
(softmax of learnable logits, truncated to the sequence length).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .corpus import VocabularyError
from .numerics import Tensor


class EncoderError(ValueError):
    pass


@dataclass
class EncoderParams:
    W_img: Tensor
    token_table: Tensor
    W_txt: Tensor
    token_index: dict[str, int]
    pool_img: Tensor | None = None
    pool_txt: Tensor | None = None

    def token_ids(self, tokens: Sequence[str]) -> list[int]:
        try:
            return [self.token_index[t] for t in tokens]
        except KeyError as exc:
            raise VocabularyError(f"unknown token {exc.args[0]!r}") from None


def position_weights(logits: Tensor, lengths: Sequence[int]) -> Tensor:
    """Per-item weights: softmax over the first m logits for a length-m group."""
    parts = []
    for m in lengths:
        if m > logits.shape[0]:
            raise EncoderError(f"sequence of length {m} exceeds {logits.shape[0]} pooling positions")
        parts.append(nx.softmax_rows(nx.reshape(nx.take(logits, (slice(0, m),)), (1, m))))
    return nx.reshape(nx.concat_cols(parts), (sum(lengths),))


def sorted_pool(X: Tensor, lengths: Sequence[int], weights: Tensor) -> Tensor:
    """Weighted sum over each group's values sorted descending per coordinate.

    ``weights`` holds one normalized weight per row of ``X`` (rank order
    within its group).
    """
    lengths = list(lengths)
    n, d = X.shape
    rows = np.empty((n, d), dtype=np.int64)
    start = 0
    for m in lengths:
        block = X.data[start:start + m]
        # stable sort of negated values keeps ties in index order
        rows[start:start + m] = start + np.argsort(-block, axis=0, kind="stable")
        start += m
    cols = np.broadcast_to(np.arange(d), (n, d))
    ranked = nx.take(X, (rows, cols))
    return nx.segment_sum(nx.scale_rows(ranked, weights), lengths)


def pool(X: Tensor, lengths: Sequence[int], logits: Tensor | None = None) -> Tensor:
    if any(m < 1 for m in lengths):
        raise EncoderError("cannot pool an empty set of items")
    if logits is None:
        return nx.segment_mean(X, lengths)
    return sorted_pool(X, lengths, position_weights(logits, lengths))


def encode_images(features: Sequence[np.ndarray], params: EncoderParams) -> tuple[Tensor, Tensor]:
    """Batch of region matrices -> (stacked region embeddings V, pooled B x d)."""
    lengths = [f.shape[0] for f in features]
    if not features or any(m == 0 for m in lengths):
        raise EncoderError("image with no regions")
    V = nx.matmul(Tensor(np.concatenate(features, axis=0)), params.W_img)
    return V, pool(V, lengths, params.pool_img)


def encode_texts(captions: Sequence[Sequence[str]], params: EncoderParams) -> tuple[Tensor, Tensor]:
    lengths = [len(c) for c in captions]
    if not captions or any(m == 0 for m in lengths):
        raise EncoderError("caption with no tokens")
    ids = [i for c in captions for i in params.token_ids(c)]
    C = nx.take(params.token_table, (np.array(ids, dtype=np.int64),))
    T = nx.matmul(C, params.W_txt)
    return T, pool(T, lengths, params.pool_txt)


def encode_image(region_features: np.ndarray, params: EncoderParams) -> tuple[Tensor, Tensor]:
    V, pooled = encode_images([np.asarray(region_features, dtype=np.float64)], params)
    return V, nx.reshape(pooled, (pooled.shape[1],))


def encode_text(tokens: Sequence[str], params: EncoderParams) -> tuple[Tensor, Tensor]:
    T, pooled = encode_texts([list(tokens)], params)
    return T, nx.reshape(pooled, (pooled.shape[1],))
