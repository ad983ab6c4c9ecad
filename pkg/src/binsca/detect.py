"""Third-party library detection from matched source functions."""

from __future__ import annotations

import logging
import os
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from typing import Any

from binsca._io import FormatError, iter_jsonl
from binsca.corpus import ScaDatabase
from binsca.locality import Match, MatchResult

log = logging.getLogger(__name__)

DEFAULT_THETA = 0.01


class DependencyFormatError(FormatError):
    pass


@dataclass(frozen=True)
class TplDependency:
    """``reuse[tpl]`` is the set of TPLs that ``tpl`` reuses (vendors)."""

    reuse: Mapping[str, frozenset[str]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for tpl, used in self.reuse.items():
            if tpl in used:
                raise ValueError(f"TPL {tpl!r} cannot reuse itself")

    def reused_by(self, tpl: str) -> frozenset[str]:
        return self.reuse.get(tpl, frozenset())


def load_dependencies(path: str | os.PathLike[str]) -> TplDependency:
    """Read ``{"tpl": [reused, ...]}`` lines; repeated keys are merged."""
    reuse: dict[str, set[str]] = {}
    for lineno, rec in iter_jsonl(path):
        where = f"{path}:{lineno}"
        if not isinstance(rec, dict):
            raise DependencyFormatError(f"{where}: expected an object")
        for tpl, used in rec.items():
            if not isinstance(used, list) or not all(isinstance(u, str) for u in used):
                raise DependencyFormatError(f"{where}: {tpl!r} must map to a list of TPL names")
            if tpl in used:
                raise DependencyFormatError(f"{where}: {tpl!r} lists itself as reused")
            reuse.setdefault(tpl, set()).update(used)
    return TplDependency({k: frozenset(v) for k, v in sorted(reuse.items())})


def filter_by_dependency(src_tpls: Iterable[str], dep: TplDependency) -> set[str]:
    """Drop every TPL that reuses another TPL of the same function's TPL set."""
    src = set(src_tpls)
    return {tpl for tpl in src if not (dep.reused_by(tpl) & src)}


@dataclass(frozen=True)
class Component:
    tpl_id: str
    matched_func_count: int
    total_func_count: int
    ratio: float
    evidence: frozenset[int]


@dataclass
class ComponentReport:
    components: list[Component]
    theta: float
    skipped_unknown: int = 0
    warnings: list[str] = field(default_factory=list)
    # Every TPL credited with at least one match, before thresholding: tpl -> matched count.
    credited: dict[str, int] = field(default_factory=dict)
    count_by: str = "function"

    @property
    def tpl_ids(self) -> set[str]:
        return {c.tpl_id for c in self.components}


def detect_components(
    matches: MatchResult | Mapping[int, Match | str],
    db: ScaDatabase,
    dep: TplDependency | None = None,
    theta: float = DEFAULT_THETA,
    *,
    count_by: str = "function",
) -> ComponentReport:
    """Credit surviving TPLs per matched binary address and keep those above ``theta``.

    ``matches`` may be a :class:`MatchResult` or a plain ``bin_rva -> func_id``
    mapping.  Each address credits a TPL at most once.  With
    ``count_by="function"`` the matched count is the number of distinct source
    functions behind the crediting addresses, which keeps the ratio <= 1 when
    one source function was emitted several times.  ``"address"`` counts the
    addresses themselves.
    """
    if not 0.0 < theta < 1.0:
        raise ValueError(f"theta must lie in (0, 1), got {theta}")
    if count_by not in ("function", "address"):
        raise ValueError(f"count_by must be 'function' or 'address', got {count_by!r}")
    dep = dep or TplDependency()
    raw = matches.matches if isinstance(matches, MatchResult) else matches
    tpl2rvas: dict[str, set[int]] = {}
    tpl2funcs: dict[str, set[str]] = {}
    skipped = 0
    emptied: set[tuple[str, ...]] = set()
    for rva, m in sorted(raw.items()):
        fid = m.func_id if isinstance(m, Match) else m
        src_tpls = db.tpls_of(fid)
        if not src_tpls:
            skipped += 1
            continue
        kept = filter_by_dependency(src_tpls, dep)
        if not kept:
            emptied.add(tuple(sorted(src_tpls)))
        for tpl in kept:
            tpl2rvas.setdefault(tpl, set()).add(rva)
            tpl2funcs.setdefault(tpl, set()).add(fid)

    warnings = [
        f"dependency filter removed every TPL of a match (reuse cycle among {list(group)})"
        for group in sorted(emptied)
    ]
    if skipped:
        warnings.append(f"{skipped} matched function(s) unknown to the database were skipped")
    for w in warnings:
        log.warning("detect: %s", w)

    counted = tpl2funcs if count_by == "function" else tpl2rvas
    components = []
    for tpl, rvas in tpl2rvas.items():
        total = db.tpls[tpl].total_func_count
        matched = len(counted[tpl])
        ratio = matched / total
        if ratio > theta:
            components.append(Component(tpl, matched, total, ratio, frozenset(rvas)))
    components.sort(key=lambda c: (-c.ratio, c.tpl_id))
    credited = {tpl: len(counted[tpl]) for tpl in sorted(tpl2rvas)}
    return ComponentReport(components, theta, skipped, warnings, credited, count_by)


def report_to_dict(report: ComponentReport) -> dict[str, Any]:
    return {
        "schema": "binsca.components/1",
        "theta": report.theta,
        "count_by": report.count_by,
        "components": [
            {
                "tpl": c.tpl_id,
                "matched": c.matched_func_count,
                "total": c.total_func_count,
                "ratio": c.ratio,
                "evidence": [f"{rva:#x}" for rva in sorted(c.evidence)],
                "advisories": None,
            }
            for c in report.components
        ],
        "skipped_unknown": report.skipped_unknown,
        "warnings": list(report.warnings),
    }


def report_from_dict(doc: Any) -> ComponentReport:
    if not isinstance(doc, dict) or doc.get("schema") != "binsca.components/1":
        raise FormatError("component report: expected schema 'binsca.components/1'")
    try:
        comps = [
            Component(
                str(c["tpl"]), int(c["matched"]), int(c["total"]), float(c["ratio"]),
                frozenset(int(e, 16) for e in c["evidence"]),
            )
            for c in doc["components"]
        ]
        return ComponentReport(
            comps, float(doc["theta"]), int(doc.get("skipped_unknown", 0)),
            list(doc.get("warnings", [])), count_by=str(doc.get("count_by", "function")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"component report: malformed document ({exc})") from exc
