"""Exact and fuzzy match scoring, and component-level precision/recall."""

from __future__ import annotations

import re
from collections.abc import Collection, Iterable, Mapping
from dataclasses import asdict, dataclass
from typing import Any

from binsca.corpus import ScaDatabase
from binsca.detect import ComponentReport
from binsca.locality import Match, MatchResult
from binsca.simulate import GroundTruth

C_KEYWORDS = frozenset(
    """auto break case char const continue default do double else enum extern float for
    goto if inline int long register restrict return short signed sizeof static struct
    switch typedef union unsigned void volatile while bool _bool true false null""".split()
)
_IDENT = re.compile(r"[a-z_][a-z0-9_]*\Z")


class BinaryMismatchError(ValueError):
    pass


def normalize_function(tokens: Iterable[str]) -> str:
    """Rename-insensitive canonical form of a token stream.

    Tokens are lowercased and whitespace is dropped.  Each distinct identifier
    becomes ``@n@`` in order of first appearance; keywords, operators and
    literals stay as they are.
    """
    names: dict[str, int] = {}
    out = []
    for tok in tokens:
        tok = "".join(tok.lower().split())
        if not tok:
            continue
        if _IDENT.match(tok) and tok not in C_KEYWORDS:
            tok = f"@{names.setdefault(tok, len(names))}@"
        out.append(tok)
    return "".join(out)


@dataclass(frozen=True)
class EvalOutcome:
    exact_tp: int
    fuzzy_tp: int
    total_matches: int
    total_labels: int
    precision_exact: float
    recall_exact: float
    precision_fuzzy: float
    recall_fuzzy: float
    f1: float
    f1_fuzzy: float
    # True when nothing was predicted and precision fell back to 0.
    precision_undefined: bool = False

    @property
    def false_positives(self) -> int:
        return self.total_matches - self.exact_tp

    @property
    def false_negatives(self) -> int:
        return self.total_labels - self.exact_tp

    def to_dict(self) -> dict[str, Any]:
        doc = asdict(self)
        doc["false_positives"] = self.false_positives
        doc["false_negatives"] = self.false_negatives
        return doc


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def _outcome(exact: int, fuzzy: int, predicted: int, labels: int) -> EvalOutcome:
    pe = exact / predicted if predicted else 0.0
    pf = fuzzy / predicted if predicted else 0.0
    re_ = exact / labels if labels else 0.0
    rf = fuzzy / labels if labels else 0.0
    return EvalOutcome(
        exact, fuzzy, predicted, labels, pe, re_, pf, rf, _f1(pe, re_), _f1(pf, rf),
        precision_undefined=predicted == 0,
    )


def evaluate_matching(
    matches: MatchResult | Mapping[int, Match | str],
    truth: GroundTruth,
    db: ScaDatabase,
    *,
    binary: str | None = None,
) -> EvalOutcome:
    """Score predicted ``bin_rva -> func_id`` pairs against labeled truth.

    A prediction is an exact hit when its function id equals the label (ids
    are content hashes, so a clone in another file still counts) and a fuzzy
    hit when both functions normalize to the same string.
    """
    if binary is not None and binary != truth.binary:
        raise BinaryMismatchError(f"matches are for {binary!r} but truth is for {truth.binary!r}")
    raw = matches.matches if isinstance(matches, MatchResult) else matches
    norm_cache: dict[str, str | None] = {}

    def norm(fid: str) -> str | None:
        if fid not in norm_cache:
            fn = db.functions.get(fid)
            norm_cache[fid] = normalize_function(fn.tokens) if fn else None
        return norm_cache[fid]

    exact = fuzzy = 0
    for rva, m in raw.items():
        fid = m.func_id if isinstance(m, Match) else m
        want = truth.mapping.get(rva)
        if want is None:
            continue
        if fid == want:
            exact += 1
            fuzzy += 1
        else:
            got_n = norm(fid)
            if got_n is not None and got_n == norm(want):
                fuzzy += 1
    return _outcome(exact, fuzzy, len(raw), len(truth.mapping))


def evaluate_sca(report: ComponentReport | Collection[str], labeled: Collection[str]) -> EvalOutcome:
    reported = report.tpl_ids if isinstance(report, ComponentReport) else set(report)
    tp = len(reported & set(labeled))
    return _outcome(tp, tp, len(reported), len(set(labeled)))
