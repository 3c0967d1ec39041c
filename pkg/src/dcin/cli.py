"""``dcin`` command-line interface.

Subcommands::

    generate        sample a corpus from an SCM spec file
    stats           co-occurrence table and relation matrix of a corpus
    train           train from a JSON config; writes checkpoint + metrics JSONL
    eval            retrieval report (optionally spurious rate, lambda sweep)
    query           top-K retrieval for one image id or a token list
    benchmark-data  write the biased benchmark (vocab, spec, splits, planted pairs)
    benchmark       baseline vs deconfounded comparison over several seeds

Every error from the library ends the process with status 1 and a single
``error: <Type>: <message>`` line on stderr. All randomness comes from
``--seed`` (or the config's ``seed``); outputs carry a ``created``
timestamp unless ``--no-timestamp`` is given, and are otherwise
byte-identical across runs.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import benchmark as bm
from . import stats
from .corpus import ConceptVocab, CorpusFormatError, PairRecord, ScmSpec, generate, load_jsonl, save_jsonl
from .dictionary import load_embedding_table, select_concepts
from .evaluate import retrieval_report, spurious_rate
from .model import DCINModel, ModelConfig, build_model
from .trainer import TrainConfig, config_to_dict, load_config, train, write_metrics

log = logging.getLogger("dcin")

PATH_KEYS = ("train", "val", "vocab", "out", "metrics", "embedding_table")


class CliError(Exception):
    pass


def _stamp(doc: dict, args) -> dict:
    if not args.no_timestamp:
        doc["created"] = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    return doc


def _write_json(path, doc):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _require(path, what):
    if not Path(path).is_file():
        raise CliError(f"{what} file not found: {path}")
    return Path(path)


def parse_sweep(text: str) -> list[float]:
    """``start:stop:step`` -> inclusive grid, computed in exact decimals.

    ``0:0.15:0.025`` gives the seven points 0, 0.025, ..., 0.15.
    """
    try:
        start, stop, step = (Fraction(p) for p in text.split(":"))
    except ValueError:
        raise CliError(f"sweep must look like start:stop:step, got {text!r}") from None
    if step <= 0 or stop < start:
        raise CliError(f"sweep needs step > 0 and stop >= start, got {text!r}")
    n = int((stop - start) / step)
    points = [start + i * step for i in range(n + 1)]
    if not all(0 <= p <= 1 for p in points):
        raise CliError("lambda sweep must stay inside [0, 1]")
    return [float(p) for p in points]


def _load_corpus(path, vocab, split):
    return load_jsonl(_require(path, "corpus"), vocab, split=split)


def _model_vocab(model: DCINModel, vocab_path) -> ConceptVocab:
    if vocab_path:
        return ConceptVocab.load(_require(vocab_path, "vocab"))
    if "vocab" not in model.info:
        raise CliError("checkpoint carries no vocab; pass --vocab")
    return ConceptVocab.from_json(model.info["vocab"])


def _parse_ratio(text: str):
    try:
        ratio = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise CliError(f"ratio must be comma separated numbers, got {text!r}") from None
    if len(ratio) != 3:
        raise CliError("ratio needs three weights (object,property,action)")
    return ratio


def cmd_generate(args) -> int:
    spec = ScmSpec.load(_require(args.scm, "spec"))
    if args.counterfactual:
        spec.counterfactual = True
    if args.n < 0:
        raise CliError("--n must be nonnegative")
    corpus = generate(spec, args.n, args.seed, split=args.split, id_prefix=args.id_prefix, stream=args.stream)
    save_jsonl(corpus, args.out)
    print(json.dumps({"records": len(corpus), "out": str(args.out)}))
    return 0


def cmd_stats(args) -> int:
    vocab = ConceptVocab.load(_require(args.vocab, "vocab"))
    corpus = _load_corpus(args.corpus, vocab, "train")
    vis, lin = select_concepts(corpus, k=args.k, ratio=_parse_ratio(args.ratio))
    if args.strata == "explicit":
        table = stats.count(corpus, stratum_source=stats.EXPLICIT, concepts=vis + lin)
    else:
        table = stats.count(corpus, stratum_source=stats.CONCEPT_SET,
                            strata=vis + [c for c in lin if c not in vis], concepts=vis + lin)
    _write_json(args.out, _stamp(table.to_json(), args))
    rel = stats.build_relation_matrix(table, vis, lin, strata_policy=args.strata)
    if args.relation:
        _write_json(args.relation, _stamp(rel.to_json(), args))
    print(json.dumps({"records": table.N, "concepts": len(vis) + len(lin), "out": str(args.out)}))
    return 0


def run_config(path) -> dict:
    """Load a training config; paths inside it are relative to the file."""
    cfg = load_config(_require(path, "config"))
    base = Path(path).resolve().parent
    for key in PATH_KEYS:
        if cfg.get(key):
            cfg[key] = str((base / cfg[key]) if not Path(cfg[key]).is_absolute() else Path(cfg[key]))
    return cfg


def cmd_train(args) -> int:
    cfg = run_config(args.config)
    for key in ("out", "metrics"):
        if getattr(args, key):
            cfg[key] = getattr(args, key)
    if args.seed is not None:
        cfg["seed"] = args.seed
    for key in ("train", "val", "vocab", "out"):
        if not cfg.get(key):
            raise CliError(f"config needs a {key!r} entry")
    tcfg = TrainConfig.from_dict(cfg)
    mcfg = ModelConfig.from_dict(cfg.get("model", {}))
    vocab = ConceptVocab.load(_require(cfg["vocab"], "vocab"))
    table = load_embedding_table(cfg["embedding_table"]) if cfg.get("embedding_table") else None
    train_c = _load_corpus(cfg["train"], vocab, "train")
    val_c = _load_corpus(cfg["val"], vocab, "val")

    model = build_model(train_c, mcfg, tcfg.lam, tcfg.seed, embedding_table=table)
    result = train(train_c, val_c, tcfg, model=model)
    result.best.info = {"vocab": vocab.to_json()}
    meta = {"train_config": config_to_dict(tcfg), "best_epoch": result.best_epoch}
    result.best.save(cfg["out"], _stamp(meta, args))
    if cfg.get("metrics"):
        write_metrics(result.metrics, cfg["metrics"])
    print(json.dumps({"checkpoint": cfg["out"], "best_epoch": result.best_epoch,
                      "best_val_rsum": max((r["val_rsum"] for r in result.metrics), default=None)}))
    return 0


def _planted(args):
    if not args.planted:
        raise CliError("--debiased needs --planted pairs.json")
    pairs = json.loads(_require(args.planted, "planted pairs").read_text())
    return [tuple(p) for p in pairs]


def _report_row(model, corpus, lam, planted):
    S = model.score_matrix(corpus, lam=lam)
    report = retrieval_report(S)
    if planted is not None:
        report.spurious_top1_rate = spurious_rate(S, corpus, planted)
    return report


def cmd_eval(args) -> int:
    model = DCINModel.load(_require(args.ckpt, "checkpoint"))
    corpus = _load_corpus(args.corpus, _model_vocab(model, args.vocab), "test")
    planted = _planted(args) if args.debiased else None
    lam = args.lam if args.lam is not None else model.lam
    report = _report_row(model, corpus, lam, planted)
    doc = report.to_json()
    doc.update({"lambda": lam, "records": len(corpus)})
    _write_json(args.report, _stamp(doc, args))
    if args.sweep_lambda:
        out = Path(args.sweep_out) if args.sweep_out else Path(args.report).with_suffix(".sweep.csv")
        write_sweep(model, corpus, parse_sweep(args.sweep_lambda), planted, out)
    print(json.dumps({"rsum": report.rsum, "report": str(args.report)}))
    return 0


def write_sweep(model, corpus, lambdas, planted, path):
    """One CSV row per lambda: six recalls, rsum and (if planted) spurious rate."""
    header = ["lambda"] + [f"{d}_r{k}" for d in ("i2t", "t2i") for k in (1, 5, 10)] + ["rsum"]
    if planted is not None:
        header.append("spurious_top1_rate")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for lam in lambdas:
            rep = _report_row(model, corpus, lam, planted)
            row = [repr(lam)] + [repr(rep.r_at[d][k]) for d in ("i2t", "t2i") for k in (1, 5, 10)]
            row.append(repr(rep.rsum))
            if planted is not None:
                row.append(repr(rep.spurious_top1_rate))
            w.writerow(row)


def cmd_query(args) -> int:
    model = DCINModel.load(_require(args.ckpt, "checkpoint"))
    corpus = _load_corpus(args.corpus, _model_vocab(model, args.vocab), "test")
    if (args.image is None) == (args.tokens is None):
        raise CliError("give exactly one of --image or --tokens")
    if args.top < 1:
        raise CliError("--top must be >= 1")
    for t in model.params.values():
        t.requires_grad = False
    if args.image is not None:
        matches = [r for r in corpus.records if r.id == args.image]
        if not matches:
            raise CliError(f"image id {args.image!r} not in corpus")
        scores = model.score(matches, corpus.records).data[0]
    else:
        probe = PairRecord("query", frozenset(), np.zeros((1, model.d_v)), args.tokens.split(), None)
        scores = model.score(corpus.records, [probe]).data[:, 0]
    order = sorted(range(len(scores)), key=lambda j: (-scores[j], j))[: args.top]
    hits = []
    for rank, j in enumerate(order, 1):
        rec = corpus.records[j]
        hit = {"rank": rank, "id": rec.id, "score": float(scores[j])}
        hit["caption" if args.image is not None else "visual_concepts"] = (
            rec.caption_tokens if args.image is not None else sorted(rec.visual_concepts))
        hits.append(hit)
    print(json.dumps(hits, indent=2))
    return 0


def cmd_benchmark_data(args) -> int:
    paths = bm.write_benchmark(args.seed, args.out)
    print(json.dumps(paths, sort_keys=True))
    return 0


def cmd_benchmark(args) -> int:
    seeds = [int(s) for s in args.seeds.split(",")]
    result = bm.compare(seeds=seeds, lam=args.lam, epochs=args.epochs)
    if args.no_timestamp:
        result.pop("seconds")
    doc = _stamp(result, args)
    if args.out:
        _write_json(args.out, doc)
    print(json.dumps(doc["median"], sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dcin", description="Deconfounded image-text matching toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--no-timestamp", action="store_true", help="omit the 'created' field from outputs")
        sp.set_defaults(fn=fn)
        return sp

    g = add("generate", cmd_generate, "sample a corpus from an SCM spec")
    g.add_argument("--scm", required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--split", default=None)
    g.add_argument("--stream", default="", help="sub-stream name, so splits from one seed differ")
    g.add_argument("--id-prefix", default="r")
    g.add_argument("--counterfactual", action="store_true", help="draw strata independently of concepts")

    s = add("stats", cmd_stats, "co-occurrence table and relation matrix")
    s.add_argument("--corpus", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--relation", default=None)
    s.add_argument("--k", type=int, default=8)
    s.add_argument("--ratio", default="7,2,1")
    s.add_argument("--strata", choices=("explicit", "concept"), default="explicit")

    t = add("train", cmd_train, "train a model from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default=None, help="checkpoint path (overrides the config)")
    t.add_argument("--metrics", default=None, help="metrics JSONL path (overrides the config)")
    t.add_argument("--seed", type=int, default=None)

    e = add("eval", cmd_eval, "retrieval report for a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--vocab", default=None)
    e.add_argument("--lambda", dest="lam", type=float, default=None, help="override the checkpoint's lambda")
    e.add_argument("--debiased", action="store_true", help="also report the spurious top-1 rate")
    e.add_argument("--planted", default=None, help="JSON list of [trigger, spurious] pairs")
    e.add_argument("--sweep-lambda", default=None, metavar="START:STOP:STEP")
    e.add_argument("--sweep-out", default=None, help="CSV path (default: report path with .sweep.csv)")

    q = add("query", cmd_query, "top-K retrieval for one query")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--corpus", required=True)
    q.add_argument("--vocab", default=None)
    q.add_argument("--image", default=None, help="record id whose image is the query")
    q.add_argument("--tokens", default=None, help="space separated caption tokens")
    q.add_argument("--top", type=int, default=5)

    bd = add("benchmark-data", cmd_benchmark_data, "write the biased benchmark files")
    bd.add_argument("--seed", type=int, default=0)
    bd.add_argument("--out", required=True)

    b = add("benchmark", cmd_benchmark, "baseline vs deconfounded over several seeds")
    b.add_argument("--seeds", default="0,1,2,3,4")
    b.add_argument("--lambda", dest="lam", type=float, default=0.05)
    b.add_argument("--epochs", type=int, default=25)
    b.add_argument("--out", default=None)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except (CliError, ValueError, KeyError, OSError, CorpusFormatError, ArithmeticError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {type(exc).__name__}: {' '.join(str(msg).split())}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
