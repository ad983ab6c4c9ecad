"""Locality-driven matching of binary functions to source functions.

Functions compiled from one source file land in one object file, and object
files are linked contiguously, so the binary functions of a file occupy an
unbroken address range.  Each source file's retrieved pairs are sliced into
its best address window, the windows are greedily packed over the binary's
address space, and inside every accepted window the call graph (or, failing
that, similarity) decides between competing candidates.
"""

from __future__ import annotations

import os
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

from binsca._io import FormatError, dumps, iter_jsonl
from binsca.corpus import ScaDatabase
from binsca.retrieval import CandidateSet

BINARY_SCHEMA = "binsca.binary/1"

PROV_TOP1 = "top1"
PROV_LOCALITY = "locality"
PROV_FCG = "locality+fcg"


@dataclass(frozen=True)
class BinaryFunction:
    bin_rva: int
    tokens: tuple[str, ...]
    callees: frozenset[int] = frozenset()


@dataclass
class BinaryArtifact:
    name: str
    functions: dict[int, BinaryFunction]
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def callgraph(self) -> dict[int, frozenset[int]]:
        return {rva: f.callees for rva, f in self.functions.items()}


class BinaryFormatError(FormatError):
    pass


def load_binary(path: str | os.PathLike[str]) -> BinaryArtifact:
    """Read a binary artifact: one header line, then one line per function.

    Callees that point outside the binary are dropped.
    """
    header: dict[str, Any] | None = None
    raw: dict[int, tuple[tuple[str, ...], list[int]]] = {}
    for lineno, rec in iter_jsonl(path):
        where = f"{path}:{lineno}"
        if header is None:
            if not isinstance(rec, dict) or rec.get("schema") != BINARY_SCHEMA:
                raise BinaryFormatError(f"{where}: expected header with schema {BINARY_SCHEMA!r}")
            header = rec
            continue
        if not isinstance(rec, dict):
            raise BinaryFormatError(f"{where}: function record is not an object")
        rva, tokens, callees = rec.get("bin_rva"), rec.get("tokens"), rec.get("callees", [])
        if not isinstance(rva, int) or isinstance(rva, bool) or rva < 0:
            raise BinaryFormatError(f"{where}: bin_rva must be a non-negative integer")
        if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
            raise BinaryFormatError(f"{where}: tokens must be a list of strings")
        if not isinstance(callees, list) or not all(isinstance(c, int) for c in callees):
            raise BinaryFormatError(f"{where}: callees must be a list of integers")
        if rva in raw:
            raise BinaryFormatError(f"{where}: duplicate bin_rva {rva:#x}")
        raw[rva] = (tuple(tokens), callees)
    if header is None:
        raise BinaryFormatError(f"{path}: empty binary artifact")
    functions = {
        rva: BinaryFunction(rva, toks, frozenset(c for c in callees if c in raw))
        for rva, (toks, callees) in sorted(raw.items())
    }
    meta = {k: v for k, v in header.items() if k not in ("schema", "binary")}
    return BinaryArtifact(str(header.get("binary", "")), functions, meta)


def write_binary(path: str | os.PathLike[str], artifact: BinaryArtifact) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps({"schema": BINARY_SCHEMA, "binary": artifact.name, **artifact.metadata}) + "\n")
        for rva in sorted(artifact.functions):
            f = artifact.functions[rva]
            fh.write(dumps({"bin_rva": rva, "tokens": list(f.tokens), "callees": sorted(f.callees)}) + "\n")


# -- interval matching -----------------------------------------------------

@dataclass(frozen=True)
class FileInterval:
    """Best address window of one source file: ``[start, end]`` are binary addresses."""

    file_id: str
    start: int
    end: int
    max_hit: int
    func_pairs: Mapping[int, frozenset[str]]

    @property
    def distinct_sources(self) -> frozenset[str]:
        return frozenset().union(*self.func_pairs.values()) if self.func_pairs else frozenset()


@dataclass(frozen=True)
class Match:
    func_id: str
    provenance: str
    similarity: float
    file_id: str | None = None


@dataclass
class MatchResult:
    matches: dict[int, Match]
    selected: list[FileInterval] = field(default_factory=list)
    # Valid intervals, one per file that produced a non-isolated window.
    intervals: list[FileInterval] = field(default_factory=list)


def build_file_to_pairs(topk: Iterable[CandidateSet]) -> dict[str, dict[int, set[str]]]:
    """``file -> {bin_rva -> candidate func_ids in that file}``."""
    file2pairs: dict[str, dict[int, set[str]]] = {}
    for cs in topk:
        for cand in cs.candidates:
            for file_id in cand.file_ids:
                file2pairs.setdefault(file_id, {}).setdefault(cs.bin_rva, set()).add(cand.func_id)
    return file2pairs


def max_file_interval(
    pairs: Mapping[int, Iterable[str]], file_func_count: int, file_id: str = ""
) -> FileInterval | None:
    """Two-pointer slice of one file's pairs over sorted addresses.

    The window maximizes the number of (bin_rva, func_id) pairs while the
    number of distinct source functions in it stays <= ``file_func_count``.
    Among equally good windows the one ending first wins.  A window with fewer
    than two pairs is an isolated match and yields ``None``.
    """
    if file_func_count < 1:
        raise ValueError("file_func_count must be >= 1")
    addrs = sorted(pairs)
    cands = [frozenset(pairs[a]) for a in addrs]
    in_window: Counter[str] = Counter()
    hits = 0
    best: tuple[int, int, int] | None = None  # (max_hit, i, j)
    i = 0
    for j, srcs in enumerate(cands):
        in_window.update(srcs)
        hits += len(srcs)
        while i <= j and len(in_window) > file_func_count:
            in_window.subtract(cands[i])
            for s in cands[i]:
                if in_window[s] == 0:
                    del in_window[s]
            hits -= len(cands[i])
            i += 1
        if i <= j and (best is None or hits > best[0]):
            best = (hits, i, j)
    if best is None or best[0] < 2:
        return None
    hits, i, j = best
    window = {addrs[x]: cands[x] for x in range(i, j + 1)}
    return FileInterval(file_id, addrs[i], addrs[j], hits, window)


def interval_sort_key(iv: FileInterval) -> tuple[int, int, int, str]:
    # Lower start, then higher end, then more pairs; file id keeps it total.
    return (iv.start, -iv.end, -iv.max_hit, iv.file_id)


def select_intervals(intervals: Iterable[FileInterval]) -> list[FileInterval]:
    """Greedy cover: accept an interval only if it starts after the last accepted end."""
    selected: list[FileInterval] = []
    last_end = -1
    for iv in sorted(intervals, key=interval_sort_key):
        if iv.start > last_end:
            selected.append(iv)
            last_end = iv.end
    return selected


def restrict_by_fcg(
    interval: FileInterval,
    bin_callgraph: Mapping[int, Iterable[int]],
    src_callgraph: Mapping[str, Iterable[str]],
    similarity: Mapping[tuple[int, str], float] | None = None,
) -> dict[int, tuple[str, bool]]:
    """Pick one source function per binary address of a selected interval.

    A pair (b1, s1) is confirmed when another pair (b2, s2) of the interval
    has b1 -> b2 and s1 -> s2 (or b2 -> b1 and s2 -> s1).  Returns
    ``bin_rva -> (func_id, confirmed)``; an address with no confirmed pair
    keeps its most similar candidate (ties to the smaller id).
    """
    sim = similarity or {}
    pairs = interval.func_pairs
    confirmed: set[tuple[int, str]] = set()
    for b1, srcs1 in pairs.items():
        for b2 in bin_callgraph.get(b1, ()):
            if b2 not in pairs:
                continue
            for s1 in srcs1:
                s1_callees = src_callgraph.get(s1, ())
                for s2 in pairs[b2]:
                    if (b1, s1) == (b2, s2):
                        continue
                    if s2 in s1_callees:
                        confirmed.add((b1, s1))
                        confirmed.add((b2, s2))

    def best(rva: int, options: Iterable[str]) -> str:
        return min(options, key=lambda s: (-sim.get((rva, s), float("-inf")), s))

    out: dict[int, tuple[str, bool]] = {}
    for rva in sorted(pairs):
        ok = [s for s in pairs[rva] if (rva, s) in confirmed]
        out[rva] = (best(rva, ok), True) if ok else (best(rva, pairs[rva]), False)
    return out


DEFAULT_MARGIN = 0.2


def prune_candidates(topk: Iterable[CandidateSet], margin: float | None) -> list[CandidateSet]:
    """Drop candidates whose similarity trails the top-1 by more than ``margin``.

    ``None`` keeps every candidate.  The top-1 itself always survives.
    """
    if margin is None:
        return list(topk)
    out = []
    for cs in topk:
        if not cs.candidates:
            out.append(cs)
            continue
        floor = cs.candidates[0].similarity - margin
        out.append(CandidateSet(cs.bin_rva, tuple(c for c in cs.candidates if c.similarity >= floor)))
    return out


def contiguous_runs(pairs: Mapping[int, Iterable[str]], address_order: Sequence[int]) -> list[dict[int, frozenset[str]]]:
    """Split one file's pairs into runs of neighbouring binary functions.

    Two pairs are neighbours when no function of ``address_order`` lies between
    them.  Single-function runs are isolated pairs and are dropped.
    """
    position = {rva: i for i, rva in enumerate(address_order)}
    runs: list[dict[int, frozenset[str]]] = []
    current: dict[int, frozenset[str]] = {}
    last = None
    for rva in sorted(pairs, key=position.__getitem__):
        if current and position[rva] != last + 1:
            runs.append(current)
            current = {}
        current[rva] = frozenset(pairs[rva])
        last = position[rva]
    if current:
        runs.append(current)
    return [r for r in runs if len(r) >= 2]


def file_intervals(
    file2pairs: Mapping[str, Mapping[int, Iterable[str]]],
    db: ScaDatabase,
    address_order: Sequence[int] | None = None,
) -> list[FileInterval]:
    """One best interval per file; files unknown to ``db`` are ignored.

    With ``address_order`` the window search runs inside each contiguous run
    and the best run wins (more pairs, then earlier).  Without it the whole
    pair set of the file is one search space.
    """
    intervals = []
    for file_id, pairs in sorted(file2pairs.items()):
        sf = db.files.get(file_id)
        if sf is None:
            continue
        spaces = [pairs] if address_order is None else contiguous_runs(pairs, address_order)
        best: FileInterval | None = None
        for space in spaces:
            iv = max_file_interval(space, sf.func_count, file_id)
            if iv is not None and (best is None or iv.max_hit > best.max_hit):
                best = iv
        if best is not None:
            intervals.append(best)
    return intervals


def match_func_pairs(
    topk: Sequence[CandidateSet],
    db: ScaDatabase,
    bin_callgraph: Mapping[int, Iterable[int]],
    *,
    margin: float | None = DEFAULT_MARGIN,
    contiguous: bool = True,
) -> MatchResult:
    """Top-1 initialization, then overwrite from every greedily selected file interval.

    ``margin`` prunes candidates far below the top-1 before intervals are
    built, and ``contiguous`` restricts each file's window to runs of
    neighbouring binary functions.  ``margin=None, contiguous=False`` is the
    bare interval search, which degrades badly when most of a top-k list is
    unrelated functions (small corpora).
    """
    matches: dict[int, Match] = {}
    similarity: dict[tuple[int, str], float] = {}
    for cs in topk:
        for cand in cs.candidates:
            similarity.setdefault((cs.bin_rva, cand.func_id), cand.similarity)
        top = cs.top1
        if top is not None:
            file_id = min(top.file_ids) if top.file_ids else None
            matches[cs.bin_rva] = Match(top.func_id, PROV_TOP1, top.similarity, file_id)

    kept = prune_candidates(topk, margin)
    # Functions without any candidate carry no evidence and do not break a run.
    order = sorted(cs.bin_rva for cs in kept if cs.candidates) if contiguous else None
    intervals = file_intervals(build_file_to_pairs(kept), db, order)

    selected = select_intervals(intervals)
    for iv in selected:
        for rva, (fid, confirmed) in restrict_by_fcg(iv, bin_callgraph, db.src_calls, similarity).items():
            matches[rva] = Match(
                fid, PROV_FCG if confirmed else PROV_LOCALITY, similarity[(rva, fid)], iv.file_id
            )
    return MatchResult(dict(sorted(matches.items())), selected, intervals)
