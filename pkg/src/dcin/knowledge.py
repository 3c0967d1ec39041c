"""Graph propagation of debiased concept knowledge.

The relation matrix is symmetrised, normalised as ``D^-1/2 E D^-1/2`` and
used in residual graph convolution layers
``H(l+1) = leaky_relu(A H(l) W(l)) + H(0)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor

log = logging.getLogger(__name__)


def normalize_adjacency(E: np.ndarray) -> np.ndarray:
    E = np.asarray(E, dtype=np.float64)
    if E.ndim != 2 or E.shape[0] != E.shape[1]:
        raise nx.DimensionError(f"relation matrix must be square, got {E.shape}")
    if np.any(E < 0):
        raise ValueError("relation matrix has negative entries")
    S = (E + E.T) / 2
    deg = S.sum(axis=1)
    nz = deg > 0
    if not np.all(nz):
        log.warning("%d isolated concepts get zero rows in the adjacency", int((~nz).sum()))
    # one square root of the degree product per entry: fewer roundings than
    # scaling twice, and the product commutes so the result is exactly symmetric
    root = np.sqrt(deg)
    with np.errstate(under="ignore", over="ignore"):
        denom = np.sqrt(np.outer(deg, deg))
    # outside the normal float range the product is lost; scale by each root instead
    bad = ~np.isfinite(denom) | (denom < np.finfo(float).tiny)
    denom[bad] = np.outer(root, root)[bad]
    A = np.zeros_like(S)
    mask = np.outer(nz, nz)
    A[mask] = S[mask] / denom[mask]
    return A


@dataclass
class KnowledgeGraph:
    A_tilde: np.ndarray
    layers: list[Tensor] = field(default_factory=list)
    H0: Tensor | None = None
    H_final: Tensor | None = None

    def forward(self, H0: Tensor) -> Tensor:
        self.H0 = H0
        self.H_final = gcn_forward(H0, self.A_tilde, self.layers)
        return self.H_final


def gcn_forward(H0: Tensor, A_tilde, layers: Sequence[Tensor]) -> Tensor:
    A = A_tilde if isinstance(A_tilde, Tensor) else Tensor(A_tilde)
    if A.shape != (H0.shape[0], H0.shape[0]):
        raise nx.DimensionError(f"adjacency {A.shape} does not match {H0.shape[0]} nodes")
    H = H0
    for W in layers:
        H = nx.add(nx.leaky_relu(nx.matmul(nx.matmul(A, H), W)), H0)
    return H
