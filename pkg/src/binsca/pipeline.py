"""End-to-end scan: embed, retrieve, locality-match, detect, and report."""

from __future__ import annotations

import logging
import os
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from binsca._io import FormatError, read_json, write_json
from binsca.corpus import ScaDatabase, load_database
from binsca.detect import (
    DEFAULT_THETA,
    ComponentReport,
    TplDependency,
    detect_components,
    load_dependencies,
    report_to_dict,
)
from binsca.embedding import Embedding, embed_tokens, import_external_embeddings
from binsca.locality import (
    DEFAULT_MARGIN,
    BinaryArtifact,
    Match,
    MatchResult,
    load_binary,
    match_func_pairs,
)
from binsca.retrieval import CandidateSet, VectorCorpus, build_corpus, retrieve_candidates
from binsca.simulate import GroundTruth

log = logging.getLogger(__name__)

MATCH_SCHEMA = "binsca.matches/1"
COMPONENT_SCHEMA = "binsca.components/1"
MATCH_REPORT = "matches.json"
COMPONENT_REPORT = "components.json"


class ScanError(RuntimeError):
    """A scan failure tagged with the phase that raised it."""

    def __init__(self, phase: str, message: str) -> None:
        super().__init__(f"[{phase}] {message}")
        self.phase = phase


@dataclass
class ScanResult:
    binary: BinaryArtifact
    candidates: list[CandidateSet]
    matches: MatchResult
    report: ComponentReport
    k: int
    warnings: list[str] = field(default_factory=list)

    def closure_violations(self) -> list[int]:
        """Addresses whose final match is not one of their own top-k candidates."""
        allowed = {cs.bin_rva: {c.func_id for c in cs.candidates} for cs in self.candidates}
        return [rva for rva, m in self.matches.matches.items() if m.func_id not in allowed.get(rva, ())]

    def match_document(self) -> dict[str, Any]:
        return {
            "schema": MATCH_SCHEMA,
            "binary": self.binary.name,
            "k": self.k,
            "matches": {
                f"{rva:#x}": {
                    "func_id": m.func_id,
                    "file_id": m.file_id,
                    "provenance": m.provenance,
                    "similarity": m.similarity,
                }
                for rva, m in sorted(self.matches.matches.items())
            },
            "candidates": {
                f"{cs.bin_rva:#x}": [c.func_id for c in cs.candidates] for cs in self.candidates
            },
            "intervals": [
                {"file_id": iv.file_id, "start": f"{iv.start:#x}", "end": f"{iv.end:#x}", "max_hit": iv.max_hit}
                for iv in self.matches.selected
            ],
            "closure_ok": not self.closure_violations(),
        }

    def component_document(self) -> dict[str, Any]:
        doc = report_to_dict(self.report)
        doc["binary"] = self.binary.name
        doc["warnings"] = list(self.warnings) + doc["warnings"]
        return doc


def embed_binary(binary: BinaryArtifact, dim: int) -> dict[int, Embedding]:
    return {rva: embed_tokens(f.tokens, dim) for rva, f in binary.functions.items()}


def scan(
    binary: BinaryArtifact,
    db: ScaDatabase,
    corpus: VectorCorpus,
    *,
    k: int = 10,
    theta: float = DEFAULT_THETA,
    dependencies: TplDependency | None = None,
    margin: float | None = DEFAULT_MARGIN,
    contiguous: bool = True,
    queries: Mapping[int, Embedding] | None = None,
    notes: Sequence[str] = (),
) -> ScanResult:
    """In-memory scan.  Raises :class:`ScanError` tagged with the failing phase.

    ``notes`` are caller-side warnings copied into the component report.
    """
    warnings = list(notes)
    try:
        if queries is None:
            queries = embed_binary(binary, corpus.dim)
        missing = set(binary.functions) - set(queries)
        if missing:
            raise ValueError(f"{len(missing)} binary function(s) have no query vector")
    except ValueError as exc:
        raise ScanError("embed", str(exc)) from exc
    try:
        candidates = retrieve_candidates(corpus, db, queries, k)
    except ValueError as exc:
        raise ScanError("retrieve", str(exc)) from exc
    try:
        matches = match_func_pairs(candidates, db, binary.callgraph, margin=margin, contiguous=contiguous)
    except ValueError as exc:
        raise ScanError("match", str(exc)) from exc
    if dependencies is None and not warnings:
        warnings.append("no dependency data: internal clones are not filtered")
    try:
        report = detect_components(matches, db, dependencies, theta)
    except ValueError as exc:
        raise ScanError("detect", str(exc)) from exc
    result = ScanResult(binary, candidates, matches, report, k, warnings)
    bad = result.closure_violations()
    if bad:
        # The matcher only ever picks among retrieved candidates; anything else is a bug.
        raise ScanError("match", f"closure violated at {len(bad)} address(es), first {bad[0]:#x}")
    return result


def run_scan(
    binary_path: str | os.PathLike[str],
    db_path: str | os.PathLike[str],
    embeddings_path: str | os.PathLike[str],
    k: int,
    theta: float,
    dep_path: str | os.PathLike[str] | None,
    out_dir: str | os.PathLike[str],
    *,
    margin: float | None = DEFAULT_MARGIN,
    contiguous: bool = True,
    query_vectors_path: str | os.PathLike[str] | None = None,
) -> ScanResult:
    """File-level scan writing ``matches.json`` and ``components.json`` into ``out_dir``.

    On failure nothing is left behind in ``out_dir`` and the raised
    :class:`ScanError` names the phase.
    """
    out = Path(out_dir)
    targets = [out / MATCH_REPORT, out / COMPONENT_REPORT]
    for t in targets:
        t.unlink(missing_ok=True)
    try:
        return _run_scan(
            binary_path, db_path, embeddings_path, k, theta, dep_path, out,
            margin, contiguous, query_vectors_path,
        )
    except BaseException:
        for t in targets:
            t.unlink(missing_ok=True)
        raise


def _run_scan(
    binary_path: str | os.PathLike[str],
    db_path: str | os.PathLike[str],
    embeddings_path: str | os.PathLike[str],
    k: int,
    theta: float,
    dep_path: str | os.PathLike[str] | None,
    out: Path,
    margin: float | None,
    contiguous: bool,
    query_vectors_path: str | os.PathLike[str] | None,
) -> ScanResult:
    try:
        db = load_database(db_path)
        binary = load_binary(binary_path)
        vectors = import_external_embeddings(embeddings_path)
        queries = None
        if query_vectors_path is not None:
            queries = {int(rid, 16): e for rid, e in import_external_embeddings(query_vectors_path).items()}
    except (OSError, FormatError, ValueError) as exc:
        raise ScanError("load", str(exc)) from exc

    unknown = sorted(set(vectors) - set(db.functions))
    if unknown:
        raise ScanError("load", f"corpus has {len(unknown)} id(s) not in the database, first {unknown[0]!r}")
    try:
        corpus = build_corpus(vectors)
    except ValueError as exc:
        raise ScanError("load", str(exc)) from exc

    dependencies: TplDependency | None = None
    extra: list[str] = []
    if dep_path is not None:
        if Path(dep_path).exists():
            try:
                dependencies = load_dependencies(dep_path)
            except (OSError, FormatError, ValueError) as exc:
                raise ScanError("load", str(exc)) from exc
        else:
            extra.append(f"dependency file {Path(dep_path).name!r} not found: filtering skipped")
            log.warning("scan: %s", extra[-1])

    result = scan(
        binary, db, corpus, k=k, theta=theta, dependencies=dependencies,
        margin=margin, contiguous=contiguous, queries=queries, notes=extra,
    )
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / MATCH_REPORT, result.match_document())
        write_json(out / COMPONENT_REPORT, result.component_document())
    except OSError as exc:
        raise ScanError("write", str(exc)) from exc
    return result


# -- reading reports back --------------------------------------------------

@dataclass(frozen=True)
class MatchReport:
    binary: str
    k: int
    matches: dict[int, Match]
    candidates: dict[int, list[str]]


def load_match_report(path: str | os.PathLike[str]) -> MatchReport:
    doc = read_json(path)
    if not isinstance(doc, dict) or doc.get("schema") != MATCH_SCHEMA:
        raise FormatError(f"{path}: expected schema {MATCH_SCHEMA!r}")
    try:
        matches = {
            int(rva, 16): Match(m["func_id"], m["provenance"], float(m["similarity"]), m.get("file_id"))
            for rva, m in doc["matches"].items()
        }
        cands = {int(rva, 16): list(ids) for rva, ids in doc.get("candidates", {}).items()}
        return MatchReport(str(doc["binary"]), int(doc["k"]), matches, cands)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed match report ({exc})") from exc


@dataclass(frozen=True)
class ClosureStats:
    raw_recall_at_1: float
    raw_recall_at_k: float
    final_recall: float
    k: int

    @property
    def holds(self) -> bool:
        return self.final_recall <= self.raw_recall_at_k


def closure_stats(
    candidates: Mapping[int, Sequence[str]],
    matches: Mapping[int, Match | str],
    truth: GroundTruth,
    k: int,
) -> ClosureStats:
    """Raw retrieval recall@1 / recall@k and final matched recall over the truth labels."""
    if not truth.mapping:
        raise ValueError("ground truth has no labeled functions")
    n = len(truth.mapping)
    at1 = atk = final = 0
    for rva, want in truth.mapping.items():
        ranked = list(candidates.get(rva, ()))[:k]
        at1 += bool(ranked) and ranked[0] == want
        atk += want in ranked
        m = matches.get(rva)
        got = m.func_id if isinstance(m, Match) else m
        final += got == want
    return ClosureStats(at1 / n, atk / n, final / n, k)


def result_closure(result: ScanResult, truth: GroundTruth) -> ClosureStats:
    cands = {cs.bin_rva: [c.func_id for c in cs.candidates] for cs in result.candidates}
    return closure_stats(cands, result.matches.matches, truth, result.k)
