"""Function embeddings in one space shared by source and pseudo-code.

The default embedder is deterministic feature hashing (unigrams + bigrams,
signed buckets, L2 normalized).  A trained model's vectors can be dropped in
through :func:`import_external_embeddings`.  :func:`clip_symmetric_loss` is
the symmetric contrastive objective such a model would be trained with, and
:func:`train_toy_projection` fits a single linear map against it.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
import re
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from binsca._io import FormatError, dumps, iter_jsonl

log = logging.getLogger(__name__)

DEFAULT_DIM = 256

# Order matters: comments before operators ("/" vs "//"), longer operators first.
_TOKEN_RULES: list[tuple[str, str]] = [
    ("space", r"\s+"),
    ("comment", r"//[^\n]*|/\*.*?(?:\*/|\Z)"),
    ("string", r'"(?:\\.|[^"\\\n])*"?'),
    ("char", r"'(?:\\.|[^'\\\n])*'?"),
    ("number", r"0[xX][0-9A-Fa-f]+[uUlL]*|(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?[uUlLfF]*"),
    ("ident", r"[A-Za-z_]\w*"),
    ("op", r"\.\.\.|<<=|>>=|->|\+\+|--|<<|>>|<=|>=|==|!=|&&|\|\||[-+*/%&|^]=|::|##"),
    ("punct", r"\S"),
]
_TOKEN_RE = re.compile("|".join(f"(?P<{k}>{p})" for k, p in _TOKEN_RULES), re.DOTALL)
_DROPPED = {"space", "comment"}


def tokenize(text: str) -> list[str]:
    """Split C-like source or pseudo-code into tokens, dropping comments and whitespace."""
    return [m.group() for m in _TOKEN_RE.finditer(text) if m.lastgroup not in _DROPPED]


class Embedding:
    """A unit vector, or the all-zero sentinel for an empty function."""

    __slots__ = ("vec",)

    def __init__(self, vec: np.ndarray) -> None:
        self.vec = np.asarray(vec, dtype=np.float64)

    @property
    def dim(self) -> int:
        return int(self.vec.shape[0])

    @property
    def is_sentinel(self) -> bool:
        return not self.vec.any()

    def __repr__(self) -> str:
        return f"Embedding(dim={self.dim}, sentinel={self.is_sentinel})"


@lru_cache(maxsize=1 << 18)
def _feature_hash(feature: str) -> int:
    return int.from_bytes(hashlib.blake2b(feature.encode("utf-8"), digest_size=8).digest(), "little")


def _features(tokens: Sequence[str]) -> Iterable[str]:
    for tok in tokens:
        yield "u\x1f" + tok
    for a, b in zip(tokens, tokens[1:]):
        yield "b\x1f" + a + "\x1f" + b


def hashed_features(tokens: Sequence[str], dim: int = DEFAULT_DIM) -> np.ndarray:
    """Signed-count feature vector (not normalized)."""
    if dim < 8:
        raise ValueError(f"embedding dimension must be >= 8, got {dim}")
    vec = np.zeros(dim, dtype=np.float64)
    for feat in _features(tokens):
        h = _feature_hash(feat)
        vec[h % dim] += 1.0 if h >> 63 else -1.0
    return vec


def _unit(vec: np.ndarray) -> np.ndarray:
    norm = math.sqrt(float(np.dot(vec, vec)))
    return vec / norm if norm > 0 else vec


def embed_tokens(tokens: Sequence[str], dim: int = DEFAULT_DIM) -> Embedding:
    # Empty input, or features cancelling exactly, yields the sentinel.
    return Embedding(_unit(hashed_features(tokens, dim)))


def cosine(a: Embedding, b: Embedding) -> float:
    return float(np.dot(a.vec, b.vec))


# -- contrastive loss ------------------------------------------------------

class ClipLoss(NamedTuple):
    loss: float
    l_bin: float
    l_src: float


@dataclass
class LossBatch:
    bin_embs: np.ndarray
    src_embs: np.ndarray
    tau: float = 1.0

    def __post_init__(self) -> None:
        self.bin_embs = _as_matrix(self.bin_embs)
        self.src_embs = _as_matrix(self.src_embs)
        if self.bin_embs.shape != self.src_embs.shape:
            raise ValueError(
                f"binary/source batches differ in shape: {self.bin_embs.shape} vs {self.src_embs.shape}"
            )
        if self.bin_embs.shape[0] < 2:
            raise ValueError("contrastive loss needs at least 2 pairs (no negatives otherwise)")
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise ValueError(f"temperature must be a positive finite number, got {self.tau}")


def _as_matrix(embs: np.ndarray | Sequence[Embedding]) -> np.ndarray:
    if isinstance(embs, np.ndarray):
        mat = np.asarray(embs, dtype=np.float64)
    else:
        mat = np.stack([e.vec if isinstance(e, Embedding) else np.asarray(e, float) for e in embs])
    if mat.ndim != 2:
        raise ValueError("embeddings must form an N x dim matrix")
    return mat


def _row_unit(mat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt((mat * mat).sum(axis=1))
    if not np.all(norms > 0):
        raise ValueError("cosine similarity undefined for a zero embedding")
    return mat / norms[:, None], norms


def _cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Broadcast-and-sum instead of a GEMM: sim(b, a) is then bitwise sim(a, b).T,
    # which keeps the swap symmetry of the loss exact.
    return (a[:, None, :] * b[None, :, :]).sum(axis=-1)


def _cross_entropy_diag(logits: np.ndarray) -> float:
    """Mean over rows of -log softmax(row)[diagonal]."""
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return float(np.mean(lse - np.diagonal(logits)))


def clip_symmetric_loss(batch: LossBatch) -> ClipLoss:
    ub, _ = _row_unit(batch.bin_embs)
    us, _ = _row_unit(batch.src_embs)
    logits = _cosine_matrix(ub, us) / batch.tau
    l_bin = _cross_entropy_diag(logits)
    l_src = _cross_entropy_diag(np.ascontiguousarray(logits.T))
    return ClipLoss((l_bin + l_src) / 2, l_bin, l_src)


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def projected_clip_loss(
    proj: np.ndarray, bin_feats: np.ndarray, src_feats: np.ndarray, tau: float
) -> tuple[ClipLoss, np.ndarray, float]:
    """Loss of ``proj`` applied to both feature batches, with analytic gradients.

    Returns ``(loss, d loss / d proj, d loss / d tau)``.
    """
    zb = bin_feats @ proj.T
    zs = src_feats @ proj.T
    ub, nb = _row_unit(zb)
    us, ns = _row_unit(zs)
    n = ub.shape[0]
    logits = _cosine_matrix(ub, us) / tau
    l_bin = _cross_entropy_diag(logits)
    l_src = _cross_entropy_diag(np.ascontiguousarray(logits.T))

    eye = np.eye(n)
    g_logits = ((_softmax(logits, 1) - eye) + (_softmax(logits, 0) - eye)) / (2 * n)
    g_tau = float(-(g_logits * logits).sum() / tau)
    g_sim = g_logits / tau
    g_ub = g_sim @ us
    g_us = g_sim.T @ ub
    # Back through row normalization: dz = (du - u <u, du>) / |z|
    g_zb = (g_ub - ub * (ub * g_ub).sum(axis=1, keepdims=True)) / nb[:, None]
    g_zs = (g_us - us * (us * g_us).sum(axis=1, keepdims=True)) / ns[:, None]
    g_proj = g_zb.T @ bin_feats + g_zs.T @ src_feats
    return ClipLoss((l_bin + l_src) / 2, l_bin, l_src), g_proj, g_tau


class TrainingError(RuntimeError):
    pass


@dataclass
class ToyProjection:
    matrix: np.ndarray
    tau: float
    in_dim: int
    losses: list[float] = field(default_factory=list)

    def embed(self, tokens: Sequence[str]) -> Embedding:
        return Embedding(_unit(self.matrix @ embed_tokens(tokens, self.in_dim).vec))


def train_toy_projection(
    pairs: Sequence[tuple[Sequence[str], Sequence[str]]],
    epochs: int = 50,
    lr: float = 0.5,
    *,
    in_dim: int = DEFAULT_DIM,
    out_dim: int = 64,
    tau: float = 0.5,
    learn_tau: bool = True,
    seed: int = 0,
) -> ToyProjection:
    """Fit a linear map over hashed features by full-batch gradient descent on the CLIP loss.

    ``losses[0]`` is the loss at initialization and ``losses[-1]`` the loss of
    the returned projection.  ``tau`` is trained in log space when ``learn_tau``.
    """
    if len(pairs) < 8:
        raise ValueError(f"need at least 8 training pairs, got {len(pairs)}")
    xb = np.stack([embed_tokens(b, in_dim).vec for b, _ in pairs])
    xs = np.stack([embed_tokens(s, in_dim).vec for _, s in pairs])
    rng = np.random.default_rng(seed)
    proj = rng.normal(0.0, 1.0 / math.sqrt(in_dim), size=(out_dim, in_dim))
    log_tau = math.log(tau)

    loss, g_proj, g_tau = projected_clip_loss(proj, xb, xs, math.exp(log_tau))
    losses = [loss.loss]
    for epoch in range(epochs):
        proj = proj - lr * g_proj
        if learn_tau:
            log_tau -= lr * g_tau * math.exp(log_tau)
        loss, g_proj, g_tau = projected_clip_loss(proj, xb, xs, math.exp(log_tau))
        if not math.isfinite(loss.loss):
            raise TrainingError(f"non-finite loss at epoch {epoch + 1} (tau={math.exp(log_tau):.3g})")
        losses.append(loss.loss)
    log.debug("toy projection: loss %.4f -> %.4f over %d epochs", losses[0], losses[-1], epochs)
    return ToyProjection(proj, math.exp(log_tau), in_dim, losses)


# -- vector files ----------------------------------------------------------

class EmbeddingFormatError(FormatError):
    pass


def import_external_embeddings(path: str | os.PathLike[str]) -> dict[str, Embedding]:
    """Read ``{"id": str, "vec": [float]}`` lines and re-normalize every vector."""
    out: dict[str, Embedding] = {}
    dim: int | None = None
    for lineno, rec in iter_jsonl(path):
        where = f"{path}:{lineno}"
        if not isinstance(rec, dict) or not isinstance(rec.get("id"), str) or not isinstance(rec.get("vec"), list):
            raise EmbeddingFormatError(f"{where}: expected {{'id': str, 'vec': [float]}}")
        rid = rec["id"]
        try:
            vec = np.asarray(rec["vec"], dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise EmbeddingFormatError(f"{where}: record {rid!r} has non-numeric values") from exc
        if vec.ndim != 1 or vec.size == 0:
            raise EmbeddingFormatError(f"{where}: record {rid!r} is not a flat vector")
        if dim is None:
            dim = vec.size
        elif vec.size != dim:
            raise EmbeddingFormatError(
                f"{where}: record {rid!r} has dimension {vec.size}, expected {dim}"
            )
        if not np.all(np.isfinite(vec)):
            raise EmbeddingFormatError(f"{where}: record {rid!r} has non-finite values")
        if not vec.any():
            raise EmbeddingFormatError(f"{where}: record {rid!r} is the zero vector")
        if rid in out:
            raise EmbeddingFormatError(f"{where}: duplicate id {rid!r}")
        out[rid] = Embedding(_unit(vec))
    return out


def write_embeddings(path: str | os.PathLike[str], embeddings: Mapping[str, Embedding]) -> None:
    """Write vectors in the import format, sorted by id.  Sentinels are skipped."""
    with open(path, "w", encoding="utf-8") as fh:
        for rid in sorted(embeddings):
            emb = embeddings[rid]
            if emb.is_sentinel:
                continue
            fh.write(dumps({"id": rid, "vec": [float(x) for x in emb.vec]}))
            fh.write("\n")
