"""Slow reference implementations used as test oracles."""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence

import numpy as np


def brute_topk(ids: Sequence[str], vecs: Sequence[np.ndarray], query: np.ndarray, k: int) -> list[tuple[str, float]]:
    """One row at a time, then a plain sort on (-similarity, id)."""
    scored = [(fid, float((v * query).sum())) for fid, v in zip(ids, vecs)]
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored[:k]


def fsum_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Correctly rounded dot product, independent of numpy's summation order."""
    return math.fsum(float(x) * float(y) for x, y in zip(a, b))


def brute_max_file_interval(
    pairs: Mapping[int, Sequence[str]], file_func_count: int
) -> tuple[int, int, int] | None:
    """Enumerate every window of the address-sorted pairs.

    Returns ``(start, end, max_hit)`` of the feasible window with the most
    pairs, earliest end among ties, or None when the best has < 2 pairs.
    """
    addrs = sorted(pairs)
    best: tuple[int, int, int] | None = None
    for i in range(len(addrs)):
        distinct: set[str] = set()
        hits = 0
        for j in range(i, len(addrs)):
            distinct |= set(pairs[addrs[j]])
            hits += len(set(pairs[addrs[j]]))
            if len(distinct) > file_func_count:
                break  # supersets of an infeasible window stay infeasible
            if best is None or hits > best[2] or (hits == best[2] and addrs[j] < best[1]):
                best = (addrs[i], addrs[j], hits)
    if best is None or best[2] < 2:
        return None
    return best
