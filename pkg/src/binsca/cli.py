"""``binsca`` command line."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from binsca._io import FormatError, dumps, iter_jsonl, read_json, write_json, write_jsonl
from binsca.corpus import ingest_source_corpus, load_database, persist_database, read_records
from binsca.detect import DEFAULT_THETA, report_from_dict
from binsca.embedding import (
    DEFAULT_DIM,
    LossBatch,
    clip_symmetric_loss,
    embed_tokens,
    import_external_embeddings,
    train_toy_projection,
    write_embeddings,
)
from binsca.evaluate import BinaryMismatchError, evaluate_matching, evaluate_sca
from binsca.locality import DEFAULT_MARGIN, write_binary
from binsca.pipeline import ScanError, closure_stats, load_match_report, run_scan
from binsca.simulate import GroundTruth, SimConfig, generate_training_pairs, simulate

log = logging.getLogger("binsca")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_BAD_INPUT = 2


def _seed_override(seed: int) -> int:
    env = os.environ.get("SCA_SEED")
    if env is None or env == "":
        return seed
    try:
        return int(env)
    except ValueError:
        raise FormatError(f"SCA_SEED must be an integer, got {env!r}") from None


def _emit(doc: Any, out: str | None) -> None:
    if out:
        write_json(out, doc)
    else:
        print(dumps(doc))


# -- corpus ----------------------------------------------------------------

def cmd_corpus_build(args: argparse.Namespace) -> int:
    db = ingest_source_corpus(read_records(args.inp))
    for msg in db.rejected:
        log.warning("corpus build: %s", msg)
    persist_database(db, args.out)
    log.info(
        "corpus build: %d functions, %d files, %d TPLs, %d rejected record(s)",
        len(db.functions), len(db.files), len(db.tpls), len(db.rejected),
    )
    return EXIT_OK


def cmd_corpus_embed(args: argparse.Namespace) -> int:
    db = load_database(args.db)
    if args.import_path:
        vectors = import_external_embeddings(args.import_path)
        unknown = sorted(set(vectors) - set(db.functions))
        if unknown:
            raise FormatError(f"{args.import_path}: {len(unknown)} id(s) not in the database, first {unknown[0]!r}")
        missing = len(db.functions) - len(vectors)
        if missing:
            log.warning("corpus embed: %d database function(s) have no imported vector", missing)
    else:
        vectors = {fid: embed_tokens(fn.tokens, args.dim) for fid, fn in db.functions.items()}
        empty = sum(1 for e in vectors.values() if e.is_sentinel)
        if empty:
            log.warning("corpus embed: %d empty function(s) left out of the index", empty)
    write_embeddings(args.out, vectors)
    return EXIT_OK


# -- scan ------------------------------------------------------------------

def cmd_scan(args: argparse.Namespace) -> int:
    margin = None if args.margin < 0 else args.margin
    try:
        result = run_scan(
            args.binary, args.db, args.corpus, args.k, args.theta, args.deps, args.out,
            margin=margin, contiguous=not args.no_contiguous, query_vectors_path=args.query_vectors,
        )
    except ScanError as exc:
        print(f"binsca scan: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    for w in result.component_document()["warnings"]:
        log.warning("scan: %s", w)
    print(dumps({"binary": result.binary.name, "components": sorted(result.report.tpl_ids),
                 "matches": len(result.matches.matches)}))
    return EXIT_OK


# -- eval ------------------------------------------------------------------

def cmd_eval_match(args: argparse.Namespace) -> int:
    report = load_match_report(args.pred)
    truth = GroundTruth.from_dict(read_json(args.truth))
    db = load_database(args.db)
    try:
        outcome = evaluate_matching(report.matches, truth, db, binary=report.binary)
    except BinaryMismatchError as exc:
        print(f"binsca eval: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    doc = outcome.to_dict()
    if report.candidates:
        stats = closure_stats(report.candidates, report.matches, truth, report.k)
        doc["closure"] = {
            "k": stats.k,
            "raw_recall_at_1": stats.raw_recall_at_1,
            "raw_recall_at_k": stats.raw_recall_at_k,
            "final_recall": stats.final_recall,
            "holds": stats.holds,
        }
        if not stats.holds:
            log.error("eval: final recall exceeds raw recall@%d", stats.k)
    _emit(doc, args.out)
    return EXIT_OK if doc.get("closure", {}).get("holds", True) else EXIT_FAILURE


def _labeled_tpls(path: str) -> set[str]:
    doc = read_json(path)
    if isinstance(doc, list) and all(isinstance(x, str) for x in doc):
        return set(doc)
    return set(GroundTruth.from_dict(doc).component_list)


def cmd_eval_sca(args: argparse.Namespace) -> int:
    report = report_from_dict(read_json(args.pred))
    outcome = evaluate_sca(report, _labeled_tpls(args.truth))
    _emit(outcome.to_dict(), args.out)
    return EXIT_OK


# -- simulate / loss -------------------------------------------------------

def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = SimConfig.load(args.config) if args.config else SimConfig()
    seed = _seed_override(cfg.seed)
    if seed != cfg.seed:
        cfg = SimConfig.from_dict({**cfg.to_dict(), "seed": seed})
    sim = simulate(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "corpus.jsonl", sim.records)
    write_binary(out / "binary.jsonl", sim.binary)
    write_json(out / "truth.json", sim.truth.to_dict())
    write_jsonl(out / "deps.jsonl", [{tpl: sorted(used)} for tpl, used in sim.dependencies.items()])
    write_json(out / "config.json", cfg.to_dict())
    pairs = generate_training_pairs(sim.db, cfg, args.pairs) if args.pairs else []
    write_jsonl(out / "pairs.jsonl", [{"bin": b, "src": s} for b, s in pairs])
    return EXIT_OK


def _read_pairs(path: str) -> list[tuple[list[str], list[str]]]:
    pairs = []
    for lineno, rec in iter_jsonl(path):
        if not (isinstance(rec, dict) and isinstance(rec.get("bin"), list) and isinstance(rec.get("src"), list)):
            raise FormatError(f"{path}:{lineno}: expected {{'bin': [tokens], 'src': [tokens]}}")
        pairs.append((rec["bin"], rec["src"]))
    return pairs


def cmd_loss(args: argparse.Namespace) -> int:
    pairs = _read_pairs(args.pairs)
    bins = [embed_tokens(b, args.dim) for b, _ in pairs]
    srcs = [embed_tokens(s, args.dim) for _, s in pairs]
    result = clip_symmetric_loss(LossBatch([e.vec for e in bins], [e.vec for e in srcs], args.tau))
    doc: dict[str, Any] = {"pairs": len(pairs), "tau": args.tau, "dim": args.dim,
                           "loss": result.loss, "l_bin": result.l_bin, "l_src": result.l_src}
    if args.train:
        proj = train_toy_projection(pairs, args.train, in_dim=args.dim, seed=_seed_override(args.seed))
        doc["training"] = {"epochs": args.train, "initial": proj.losses[0],
                           "final": proj.losses[-1], "tau": proj.tau}
    print(dumps(doc))
    return EXIT_OK


# -- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="binsca", description="Binary software composition analysis.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    corpus = sub.add_parser("corpus", help="build and embed the source corpus")
    csub = corpus.add_subparsers(dest="corpus_command", required=True)
    b = csub.add_parser("build", help="ingest raw function records into a database")
    b.add_argument("--in", dest="inp", required=True)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_corpus_build)
    e = csub.add_parser("embed", help="embed every database function")
    e.add_argument("--db", required=True)
    e.add_argument("--dim", type=int, default=DEFAULT_DIM)
    e.add_argument("--import", dest="import_path", help="use externally computed vectors")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_corpus_embed)

    s = sub.add_parser("scan", help="detect TPLs inside a binary artifact")
    s.add_argument("--binary", required=True)
    s.add_argument("--db", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--theta", type=float, default=DEFAULT_THETA)
    s.add_argument("--deps")
    s.add_argument("--out", required=True)
    s.add_argument("--margin", type=float, default=DEFAULT_MARGIN,
                   help="candidate pruning margin below top-1; negative disables pruning")
    s.add_argument("--no-contiguous", action="store_true",
                   help="search each file's pairs as one space instead of contiguous runs")
    s.add_argument("--query-vectors", help="precomputed binary vectors keyed by hex address")
    s.set_defaults(func=cmd_scan)

    ev = sub.add_parser("eval", help="score reports against ground truth")
    esub = ev.add_subparsers(dest="eval_command", required=True)
    m = esub.add_parser("match", help="exact / fuzzy function-match scoring")
    m.add_argument("--pred", required=True)
    m.add_argument("--truth", required=True)
    m.add_argument("--db", required=True)
    m.add_argument("--out")
    m.set_defaults(func=cmd_eval_match)
    c = esub.add_parser("sca", help="component precision / recall")
    c.add_argument("--pred", required=True)
    c.add_argument("--truth", required=True, help="ground truth document or JSON list of TPL ids")
    c.add_argument("--out")
    c.set_defaults(func=cmd_eval_sca)

    sim = sub.add_parser("simulate", help="generate a labeled synthetic corpus and binary")
    sim.add_argument("--config")
    sim.add_argument("--out", required=True)
    sim.add_argument("--pairs", type=int, default=32, help="training pairs to emit (0 for none)")
    sim.set_defaults(func=cmd_simulate)

    lo = sub.add_parser("loss", help="symmetric contrastive loss over (bin, src) pairs")
    lo.add_argument("--pairs", required=True)
    lo.add_argument("--tau", type=float, default=1.0)
    lo.add_argument("--dim", type=int, default=DEFAULT_DIM)
    lo.add_argument("--train", type=int, default=0, metavar="EPOCHS")
    lo.add_argument("--seed", type=int, default=0)
    lo.set_defaults(func=cmd_loss)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except (FormatError, ValueError, OSError) as exc:
        print(f"binsca {args.command}: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    raise SystemExit(main())
