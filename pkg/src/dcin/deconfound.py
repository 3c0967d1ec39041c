"""Deconfounded scoring head.

The dictionary expectation conditioned on a query embedding q is
approximated in one pass, ``mlp(softmax(q D^T) D)``, instead of sampling
dictionary entries. Query and expectation are fused with confidence lambda
and embedded by psi; the score is ``tanh(<psi_v(.), psi_t(.)>)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from . import numerics as nx
from .numerics import Tensor


class HeadConfigError(ValueError):
    pass


@dataclass
class DeconfoundHead:
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    psi_v_w: Tensor
    psi_v_b: Tensor
    psi_t_w: Tensor
    psi_t_b: Tensor
    lam: float = 0.05

    def check(self):
        if not 0.0 <= self.lam <= 1.0:
            raise HeadConfigError(f"lambda must lie in [0,1], got {self.lam}")


def attention_weights(D: Tensor, Q: Tensor) -> Tensor:
    """Row-softmax of dictionary scores: (B x d) queries against 2k rows."""
    return nx.softmax_rows(nx.matmul(Q, nx.transpose(D)))


def expect_dict(D: Tensor, Q: Tensor, head: DeconfoundHead) -> Tensor:
    if Q.data.ndim == 1:
        Q = nx.reshape(Q, (1, Q.shape[0]))
    if Q.shape[1] != D.shape[1]:
        raise nx.DimensionError(f"query dim {Q.shape[1]} != dictionary dim {D.shape[1]}")
    context = nx.matmul(attention_weights(D, Q), D)
    hidden = nx.tanh(nx.add_bias(nx.matmul(context, head.mlp_w1), head.mlp_b1))
    return nx.add_bias(nx.matmul(hidden, head.mlp_w2), head.mlp_b2)


def fuse(Q: Tensor, context: Tensor, lam: float) -> Tensor:
    return nx.concat_cols([nx.scale(Q, math.sqrt(1.0 - lam)), nx.scale(context, math.sqrt(lam))])


def embed(Q: Tensor, D: Tensor, head: DeconfoundHead, side: str) -> Tensor:
    """psi over the fused [query, dictionary expectation] pair for one side."""
    head.check()
    if Q.data.ndim == 1:
        Q = nx.reshape(Q, (1, Q.shape[0]))
    W, b = (head.psi_v_w, head.psi_v_b) if side == "image" else (head.psi_t_w, head.psi_t_b)
    return nx.add_bias(nx.matmul(fuse(Q, expect_dict(D, Q, head), head.lam), W), b)


def score_pair(v: Tensor, t: Tensor, D: Tensor, head: DeconfoundHead) -> Tensor:
    u = embed(v, D, head, "image")
    w = embed(t, D, head, "text")
    return nx.reshape(nx.tanh(nx.dot_rows(u, w)), ())


def score_batch(V: Tensor, T: Tensor, D: Tensor, head: DeconfoundHead) -> Tensor:
    """S[i, j] = score of image i against text j; one expectation per embedding."""
    U = embed(V, D, head, "image")
    W = embed(T, D, head, "text")
    return nx.tanh(nx.matmul(U, nx.transpose(W)))
