"""Binary software composition analysis via function embeddings and link-time locality."""

from __future__ import annotations

from binsca.corpus import ScaDatabase, function_id, ingest_source_corpus, load_database, persist_database
from binsca.detect import ComponentReport, TplDependency, detect_components, filter_by_dependency
from binsca.embedding import Embedding, clip_symmetric_loss, embed_tokens, tokenize
from binsca.evaluate import EvalOutcome, evaluate_matching, evaluate_sca, normalize_function
from binsca.locality import BinaryArtifact, MatchResult, match_func_pairs
from binsca.pipeline import ScanError, run_scan, scan
from binsca.retrieval import build_corpus, compute_mrr, compute_recall_at_k, query_topk
from binsca.simulate import GroundTruth, SimConfig, simulate

__version__ = "0.1.0"

__all__ = [
    "BinaryArtifact",
    "ComponentReport",
    "Embedding",
    "EvalOutcome",
    "GroundTruth",
    "MatchResult",
    "ScaDatabase",
    "ScanError",
    "SimConfig",
    "TplDependency",
    "build_corpus",
    "clip_symmetric_loss",
    "compute_mrr",
    "compute_recall_at_k",
    "detect_components",
    "embed_tokens",
    "evaluate_matching",
    "evaluate_sca",
    "filter_by_dependency",
    "function_id",
    "ingest_source_corpus",
    "load_database",
    "match_func_pairs",
    "normalize_function",
    "persist_database",
    "query_topk",
    "run_scan",
    "scan",
    "simulate",
    "tokenize",
]
