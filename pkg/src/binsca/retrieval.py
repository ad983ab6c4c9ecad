"""Exact cosine top-k search over the source-function corpus, plus retrieval metrics."""

from __future__ import annotations

from collections.abc import Hashable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from binsca.corpus import ScaDatabase
from binsca.embedding import Embedding

# Rows scored per block; bounds the temporary of the broadcast product.
_BLOCK = 2048


class DuplicateIdError(ValueError):
    pass


@dataclass(frozen=True)
class VectorCorpus:
    ids: tuple[str, ...]
    matrix: np.ndarray = field(repr=False)
    dim: int

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class Candidate:
    func_id: str
    similarity: float
    file_ids: frozenset[str]


@dataclass(frozen=True)
class CandidateSet:
    bin_rva: int
    candidates: tuple[Candidate, ...]

    @property
    def top1(self) -> Candidate | None:
        return self.candidates[0] if self.candidates else None


def build_corpus(
    embeddings: Mapping[str, Embedding] | Sequence[tuple[str, Embedding]],
    dim: int | None = None,
) -> VectorCorpus:
    """Stack unit vectors into a corpus.  Sentinel (empty-function) vectors are left out.

    Rows are stored in id order, so results never depend on insertion order.
    """
    items = list(embeddings.items()) if isinstance(embeddings, Mapping) else list(embeddings)
    seen: set[str] = set()
    for fid, _ in items:
        if fid in seen:
            raise DuplicateIdError(f"duplicate function id {fid!r} in corpus")
        seen.add(fid)
    items = sorted((kv for kv in items if not kv[1].is_sentinel), key=lambda kv: kv[0])
    dims = {e.dim for _, e in items}
    if len(dims) > 1:
        raise ValueError(f"corpus embeddings have mixed dimensions {sorted(dims)}")
    if items:
        dim = dims.pop()
    elif dim is None:
        dim = 0
    matrix = np.stack([e.vec for _, e in items]) if items else np.zeros((0, dim))
    norms = np.sqrt((matrix * matrix).sum(axis=1))
    if not np.allclose(norms, 1.0, rtol=0, atol=1e-6):
        raise ValueError("corpus embeddings must be unit normalized")
    return VectorCorpus(tuple(fid for fid, _ in items), matrix, dim)


def _scores(corpus: VectorCorpus, q: np.ndarray) -> np.ndarray:
    # Row-wise product and sum: identical rows always get identical scores,
    # which a blocked GEMV does not guarantee.
    out = np.empty(len(corpus))
    for lo in range(0, len(corpus), _BLOCK):
        out[lo : lo + _BLOCK] = (corpus.matrix[lo : lo + _BLOCK] * q).sum(axis=1)
    return out


def query_topk(corpus: VectorCorpus, query: Embedding, k: int) -> list[tuple[str, float]]:
    """The ``min(k, len(corpus))`` most similar ids, similarity descending, ties by id."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(corpus) == 0:
        return []
    if query.dim != corpus.dim:
        raise ValueError(f"query dimension {query.dim} != corpus dimension {corpus.dim}")
    sims = _scores(corpus, query.vec)
    # Rows are in id order, so a stable sort on -sim breaks ties by id.
    order = np.argsort(-sims, kind="stable")[:k]
    return [(corpus.ids[i], float(sims[i])) for i in order]


def retrieve_candidates(
    corpus: VectorCorpus,
    db: ScaDatabase,
    queries: Mapping[int, Embedding],
    k: int,
) -> list[CandidateSet]:
    """Top-k candidates for every binary function, each tagged with its containing files."""
    out = []
    for rva in sorted(queries):
        q = queries[rva]
        hits = [] if q.is_sentinel else query_topk(corpus, q, k)
        out.append(
            CandidateSet(rva, tuple(Candidate(fid, sim, db.files_of(fid)) for fid, sim in hits))
        )
    return out


# -- metrics ---------------------------------------------------------------

def _rank(ranked: Sequence[Hashable], truth: Hashable) -> int | None:
    for i, rid in enumerate(ranked, start=1):
        if rid == truth:
            return i
    return None


def compute_mrr(ranked_results: Sequence[Sequence[Hashable]], truth: Sequence[Hashable]) -> float:
    """Mean reciprocal rank; a truth missing from its list contributes 0."""
    if len(ranked_results) != len(truth):
        raise ValueError("ranked_results and truth differ in length")
    if not truth:
        raise ValueError("MRR is undefined over an empty query set")
    total = 0.0
    for ranked, t in zip(ranked_results, truth):
        r = _rank(ranked, t)
        if r is not None:
            total += 1.0 / r
    return total / len(truth)


def compute_recall_at_k(
    ranked_results: Sequence[Sequence[Hashable]], truth: Sequence[Hashable], k: int
) -> tuple[int, float]:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(ranked_results) != len(truth):
        raise ValueError("ranked_results and truth differ in length")
    if not truth:
        raise ValueError("recall is undefined over an empty query set")
    count = sum(1 for ranked, t in zip(ranked_results, truth) if t in list(ranked[:k]))
    return count, count / len(truth)
