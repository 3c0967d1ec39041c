"""The biased synthetic benchmark and the baseline-vs-deconfounded experiment.

Two scene strata (indoor, outdoor) drive both the visual concepts and the
context word ``school``. Indoor scenes carry many children and almost
always the word ``school``, so in training ``child`` in an image predicts
``school`` in the caption without any causal link. The counterfactual test
split draws strata independently of the concepts, which breaks the
association.
"""
from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .corpus import Concept, ConceptVocab, Corpus, ScmSpec, generate, save_jsonl
from .evaluate import retrieval_report, spurious_rate
from .model import ModelConfig
from .numerics import rng_for
from .trainer import TrainConfig, train

VISUAL = {
    "v_child": "object", "v_man": "gender", "v_woman": "gender", "v_dog": "object",
    "v_ball": "object", "v_bike": "object", "v_red": "property", "v_running": "action",
}
WORDS = {
    "child": "object", "man": "gender", "woman": "gender", "dog": "object",
    "ball": "object", "school": "object", "red": "property", "running": "action",
}
LINKS = {
    "v_child": "child", "v_man": "man", "v_woman": "woman", "v_dog": "dog",
    "v_ball": "ball", "v_red": "red", "v_running": "running",
}
STOPWORDS = ("a", "is", "the")
STRATA = ("indoor", "outdoor")

# P(concept | indoor), P(concept | outdoor)
VISUAL_PROBS = {
    "v_child": [0.75, 0.15], "v_man": [0.3, 0.4], "v_woman": [0.4, 0.3], "v_dog": [0.2, 0.5],
    "v_ball": [0.3, 0.4], "v_bike": [0.1, 0.5], "v_red": [0.3, 0.3], "v_running": [0.2, 0.6],
}
CONTEXT_PROBS = {"school": [0.9, 0.05]}

PLANTED = [("v_child", "school")]


def benchmark_vocab() -> ConceptVocab:
    entries = [Concept(c, c[2:], "visual", cat) for c, cat in VISUAL.items()]
    entries += [Concept(w, w, "linguistic", cat) for w, cat in WORDS.items()]
    entries += [Concept(w, w, "linguistic", "stopword") for w in STOPWORDS]
    entries += [Concept(z, z, "visual", "stratum") for z in STRATA]
    return ConceptVocab(entries)


def benchmark_spec(d_v: int = 16, n_regions: int = 6, noise_scale: float = 0.1,
                   counterfactual: bool = False, prototype_seed: int = 0) -> ScmSpec:
    rng = rng_for(prototype_seed, "prototypes")
    names = list(VISUAL) + list(STRATA)
    protos = {c: (0.5 * rng.standard_normal(d_v)).tolist() for c in names}
    return ScmSpec(
        vocab=benchmark_vocab(),
        strata=list(STRATA),
        prior=[0.5, 0.5],
        visual={c: list(p) for c, p in VISUAL_PROBS.items()},
        linguistic={c: list(p) for c, p in CONTEXT_PROBS.items()},
        prototypes=protos,
        noise_scale=noise_scale,
        n_regions=n_regions,
        counterfactual=counterfactual,
        caption_links=dict(LINKS),
        mention_prob=0.9,
        filler=list(STOPWORDS),
        planted_pairs=list(PLANTED),
    )


@dataclass
class BenchmarkData:
    train: Corpus
    val: Corpus
    test: Corpus
    spec: ScmSpec


def benchmark_data(seed: int, n_train: int = 2000, n_val: int = 200, n_test: int = 200) -> BenchmarkData:
    spec = benchmark_spec()
    cf = replace(spec, counterfactual=True)
    return BenchmarkData(
        train=generate(spec, n_train, seed, split="train", id_prefix="tr", stream="train"),
        val=generate(spec, n_val, seed, split="val", id_prefix="va", stream="val"),
        test=generate(cf, n_test, seed, split="test_debiased", id_prefix="te", stream="test"),
        spec=spec,
    )


def default_configs(seed: int, lam: float, epochs: int = 25) -> tuple[TrainConfig, ModelConfig]:
    return TrainConfig(seed=seed, lam=lam, epochs=epochs), ModelConfig(d=32, d_t=32, k=8)


def run_one(seed: int, lam: float, epochs: int = 25, data: BenchmarkData | None = None) -> dict:
    data = data or benchmark_data(seed)
    tcfg, mcfg = default_configs(seed, lam, epochs)
    result = train(data.train, data.val, tcfg, mcfg)
    S = result.best.score_matrix(data.test)
    report = retrieval_report(S)
    return {
        "seed": seed,
        "lambda": lam,
        "rsum": report.rsum,
        "r_at": report.to_json()["r_at"],
        "spurious_top1_rate": spurious_rate(S, data.test, data.spec.planted_pairs),
        "best_epoch": result.best_epoch,
        "final_loss": result.metrics[-1]["loss"] if result.metrics else None,
    }


def compare(seeds=(0, 1, 2, 3, 4), lam: float = 0.05, epochs: int = 25) -> dict:
    """Baseline (lambda = 0) against the deconfounded head on shared data, per seed."""
    start = time.perf_counter()
    runs = []
    for seed in seeds:
        data = benchmark_data(seed)
        runs.append({"base": run_one(seed, 0.0, epochs, data), "dcin": run_one(seed, lam, epochs, data)})
    med = lambda key, arm: statistics.median(r[arm][key] for r in runs)
    return {
        "runs": runs,
        "median": {
            arm: {"spurious_top1_rate": med("spurious_top1_rate", arm), "rsum": med("rsum", arm)}
            for arm in ("base", "dcin")
        },
        "seconds": time.perf_counter() - start,
    }


def write_benchmark(seed: int, out_dir) -> dict:
    """Write the benchmark vocab, spec and the three splits as files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = benchmark_data(seed)
    data.spec.vocab.save(out / "vocab.json")
    data.spec.save(out / "spec.json")
    paths = {}
    for name in ("train", "val", "test"):
        paths[name] = str(out / f"{name}.jsonl")
        save_jsonl(getattr(data, name), paths[name])
    (out / "planted.json").write_text(json.dumps([list(p) for p in data.spec.planted_pairs]) + "\n")
    return paths
