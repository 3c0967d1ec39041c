"""Exact co-occurrence counts and backdoor-adjusted concept probabilities.

All counts are record-level document frequencies held as int64 arrays.
Probabilities are formed as exact rationals (:class:`fractions.Fraction`)
and converted to float once, so results are reproducible to the last bit.

    P(y | x)      = n(x, y) / n(x)
    P(y | do(x))  = sum_z  n(x, y, z) * n(z) / (N * n(x, z))

Strata with ``n(x, z) = 0`` contribute nothing and are logged.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Corpus, ConceptVocab, ScmSpec, VocabularyError

log = logging.getLogger(__name__)

EXPLICIT = "explicit_label"
CONCEPT_SET = "concept_set"


class EstimationError(ValueError):
    pass


class UndefinedConditional(EstimationError):
    pass


class NoOverlapError(EstimationError):
    pass


@dataclass
class CoocTable:
    concepts: list[str]
    strata: list[str]
    N: int
    n1: np.ndarray
    n2: np.ndarray
    nz: np.ndarray
    nxz: np.ndarray
    nxyz: np.ndarray
    stratum_source: str = EXPLICIT

    def __post_init__(self):
        self._ci = {c: i for i, c in enumerate(self.concepts)}
        self._si = {z: i for i, z in enumerate(self.strata)}

    def ci(self, concept: str) -> int:
        try:
            return self._ci[concept]
        except KeyError:
            raise VocabularyError(f"concept {concept!r} not in co-occurrence table") from None

    def si(self, stratum: str) -> int:
        try:
            return self._si[stratum]
        except KeyError:
            raise VocabularyError(f"stratum {stratum!r} not in co-occurrence table") from None

    def __add__(self, other: CoocTable) -> CoocTable:
        if (self.concepts, self.strata, self.stratum_source) != (other.concepts, other.strata, other.stratum_source):
            raise ValueError("can only merge tables over the same concepts and strata")
        return CoocTable(
            self.concepts, self.strata, self.N + other.N,
            self.n1 + other.n1, self.n2 + other.n2, self.nz + other.nz,
            self.nxz + other.nxz, self.nxyz + other.nxyz, self.stratum_source,
        )

    def to_json(self) -> dict:
        return {
            "concepts": self.concepts,
            "strata": self.strata,
            "stratum_source": self.stratum_source,
            "N": int(self.N),
            "n1": self.n1.tolist(),
            "n2": self.n2.tolist(),
            "nz": self.nz.tolist(),
            "nxz": self.nxz.tolist(),
            "nxyz": self.nxyz.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> CoocTable:
        C, S = len(d["concepts"]), len(d["strata"])
        arr = lambda key, shape: np.array(d[key], dtype=np.int64).reshape(shape)
        return cls(
            list(d["concepts"]), list(d["strata"]), int(d["N"]),
            arr("n1", (C,)), arr("n2", (C, C)), arr("nz", (S,)), arr("nxz", (C, S)),
            arr("nxyz", (C, C, S)), d.get("stratum_source", EXPLICIT),
        )


def count(corpus: Corpus, vocab: ConceptVocab | None = None, stratum_source: str = EXPLICIT,
          strata: Sequence[str] | None = None, concepts: Sequence[str] | None = None) -> CoocTable:
    """Count concept and stratum co-occurrences over the records of ``corpus``.

    With ``explicit_label`` each record's ``stratum_label`` is its stratum
    (default: every stratum concept of the vocabulary). With ``concept_set``
    the supplied ``strata`` are ordinary concepts and a record belongs to
    every stratum whose concept it contains.
    """
    vocab = vocab or corpus.vocab
    if len(corpus) == 0:
        raise EstimationError("cannot count an empty corpus")
    if concepts is None:
        concepts = [c.id for c in vocab.entries if c.category != "stratum"]
    concepts = list(concepts)
    index = {c: i for i, c in enumerate(concepts)}
    N = len(corpus)
    X = np.zeros((N, len(concepts)), dtype=np.int64)
    for r, rec in enumerate(corpus.records):
        for c in rec.concepts():
            if c not in vocab:
                raise VocabularyError(f"unknown concept_id {c!r} in record {rec.id!r}")
            j = index.get(c)
            if j is not None:
                X[r, j] = 1

    if stratum_source == EXPLICIT:
        strata = list(strata) if strata is not None else vocab.select(category="stratum")
        sidx = {z: i for i, z in enumerate(strata)}
        Z = np.zeros((N, len(strata)), dtype=np.int64)
        for r, rec in enumerate(corpus.records):
            if rec.stratum_label is None:
                raise EstimationError(f"record {rec.id!r} has no stratum_label")
            if rec.stratum_label not in sidx:
                raise VocabularyError(f"stratum {rec.stratum_label!r} of record {rec.id!r} not in strata")
            Z[r, sidx[rec.stratum_label]] = 1
    elif stratum_source == CONCEPT_SET:
        if not strata:
            raise EstimationError("concept_set stratification needs a confounder concept list")
        strata = list(strata)
        Z = np.zeros((N, len(strata)), dtype=np.int64)
        for r, rec in enumerate(corpus.records):
            present = rec.concepts()
            for s, z in enumerate(strata):
                if z not in vocab:
                    raise VocabularyError(f"unknown confounder concept {z!r}")
                Z[r, s] = z in present
    else:
        raise ValueError(f"unknown stratum_source {stratum_source!r}")

    # integer matmuls are exact
    return CoocTable(
        concepts=concepts,
        strata=strata,
        N=N,
        n1=X.sum(axis=0),
        n2=X.T @ X,
        nz=Z.sum(axis=0),
        nxz=X.T @ Z,
        nxyz=np.einsum("nx,ny,nz->xyz", X, X, Z),
        stratum_source=stratum_source,
    )


def cond_prob_exact(table: CoocTable, x: str, y: str) -> Fraction:
    i, j = table.ci(x), table.ci(y)
    if table.n1[i] == 0:
        raise UndefinedConditional(f"P(. | {x}) undefined: {x!r} never observed")
    return Fraction(int(table.n2[i, j]), int(table.n1[i]))


def cond_prob(table: CoocTable, x: str, y: str) -> float:
    return float(cond_prob_exact(table, x, y))


def do_prob_exact(table: CoocTable, x: str, y: str, strata: Sequence[str] | None = None) -> Fraction:
    i, j = table.ci(x), table.ci(y)
    if table.n1[i] == 0:
        raise UndefinedConditional(f"P(. | do({x})) undefined: {x!r} never observed")
    strata = table.strata if strata is None else list(strata)
    if not strata:
        raise NoOverlapError(f"no strata given for do({x})")
    total = Fraction(0)
    covered = 0
    for z in strata:
        s = table.si(z)
        nxz = int(table.nxz[i, s])
        if nxz == 0:
            log.debug("do(%s)->%s: stratum %s has no records with %s; contributes 0", x, y, z, x)
            continue
        covered += 1
        total += Fraction(int(table.nxyz[i, j, s]) * int(table.nz[s]), table.N * nxz)
    if covered == 0:
        raise NoOverlapError(f"{x!r} co-occurs with none of the {len(strata)} strata")
    return total


def do_prob(table: CoocTable, x: str, y: str, strata: Sequence[str] | None = None) -> float:
    return float(do_prob_exact(table, x, y, strata))


def oracle_do_prob(spec: ScmSpec, x: str, y: str) -> float:
    """Closed-form P(y | do(x)) = sum_z P(y | z) P(z) under the generator.

    Holds because generator concepts are independent given the stratum;
    caption-linked words break that and are rejected.
    """
    linked = set(spec.caption_links) | set(spec.caption_links.values())
    if x in linked or y in linked:
        raise EstimationError(f"no closed form for caption-linked concepts ({x!r}, {y!r})")
    spec.marginal(x)
    if x == y:
        return 1.0
    probs = spec.visual.get(y) or spec.linguistic.get(y)
    if probs is None:
        raise VocabularyError(f"{y!r} is not a generator concept")
    return float(sum(Fraction(pz) * Fraction(p) for pz, p in zip(spec.prior, probs)))


@dataclass
class RelationMatrix:
    concepts: list[str]
    E: np.ndarray

    def to_json(self) -> dict:
        return {"concepts": self.concepts, "E": self.E.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> RelationMatrix:
        return cls(list(d["concepts"]), np.array(d["E"], dtype=np.float64))


def relation_strata(x: str, y: str, visual: Sequence[str], linguistic: Sequence[str],
                    table: CoocTable, policy: str) -> list[str]:
    """Strata that adjust the pair (x, y).

    ``explicit``: every stratum label in the table. ``concept``: the
    dictionary of the pair's modality (the union of both dictionaries for a
    cross-modal pair), minus x and y themselves.
    """
    if policy == "explicit":
        return list(table.strata)
    if policy != "concept":
        raise ValueError(f"unknown strata policy {policy!r}")
    vis, lin = set(visual), set(linguistic)
    if x in vis and y in vis:
        pool = list(visual)
    elif x in lin and y in lin:
        pool = list(linguistic)
    else:
        pool = list(visual) + [c for c in linguistic if c not in vis]
    return [z for z in pool if z not in (x, y) and z in table._si]


def build_relation_matrix(table: CoocTable, visual: Sequence[str], linguistic: Sequence[str],
                          strata_policy: str = "explicit") -> RelationMatrix:
    """E[i, j] = P(c_j | do(c_i)) over the concatenated [visual, linguistic] list."""
    concepts = list(visual) + list(linguistic)
    for c in concepts:
        table.ci(c)
    n = len(concepts)
    E = np.zeros((n, n))
    for i, x in enumerate(concepts):
        for j, y in enumerate(concepts):
            if i == j:
                continue
            strata = relation_strata(x, y, visual, linguistic, table, strata_policy)
            try:
                E[i, j] = do_prob(table, x, y, strata)
            except (UndefinedConditional, NoOverlapError) as exc:
                log.info("relation %s->%s set to 0: %s", x, y, exc)
    np.clip(E, 0.0, 1.0, out=E)
    np.fill_diagonal(E, 1.0)
    return RelationMatrix(concepts, E)


def save_json(obj, path):
    Path(path).write_text(json.dumps(obj.to_json()) + "\n")
