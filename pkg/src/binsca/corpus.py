"""Source-side SCA database: deduplicated functions plus the two inverted indexes.

Functions are identified by a content hash of their token stream, so a body
that is vendored into several files (or several libraries) is stored once and
linked to every file and every TPL that contains it.
"""

from __future__ import annotations

import hashlib
import logging
import os
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field
from typing import Any

from binsca._io import FormatError, dumps, iter_jsonl, read_json

log = logging.getLogger(__name__)

DB_SCHEMA = "binsca.db/1"
_RECORD_KEYS = ("tpl", "file", "name", "tokens", "callees")


class DatabaseFormatError(FormatError):
    pass


class SchemaVersionError(DatabaseFormatError):
    pass


def function_id(tokens: Iterable[str]) -> str:
    """Content hash of a raw token stream (no normalization)."""
    h = hashlib.sha256()
    for tok in tokens:
        # Length prefix keeps ["ab", "c"] and ["a", "bc"] apart.
        b = tok.encode("utf-8")
        h.update(len(b).to_bytes(4, "little"))
        h.update(b)
    return h.hexdigest()[:32]


def qualify_file(tpl_id: str, path: str) -> str:
    return f"{tpl_id}/{path}"


@dataclass(frozen=True)
class SourceFunction:
    func_id: str
    name: str
    tokens: tuple[str, ...]
    callee_names: frozenset[str] = frozenset()


@dataclass(frozen=True)
class SourceFile:
    file_id: str
    tpl_id: str
    func_ids: tuple[str, ...]

    @property
    def func_count(self) -> int:
        return len(self.func_ids)


@dataclass(frozen=True)
class TplRecord:
    tpl_id: str
    file_ids: frozenset[str]
    total_func_count: int


@dataclass
class ScaDatabase:
    """Immutable-after-build SCA database.

    ``src_calls`` holds the source call graph resolved inside each file:
    ``func_id -> {callee func_id}``.  ``rejected`` collects per-record
    ingestion diagnostics and is not part of the database identity.
    """

    functions: dict[str, SourceFunction] = field(default_factory=dict)
    func_to_files: dict[str, frozenset[str]] = field(default_factory=dict)
    func_to_tpls: dict[str, frozenset[str]] = field(default_factory=dict)
    files: dict[str, SourceFile] = field(default_factory=dict)
    tpls: dict[str, TplRecord] = field(default_factory=dict)
    src_calls: dict[str, frozenset[str]] = field(default_factory=dict)
    rejected: list[str] = field(default_factory=list, compare=False)

    def files_of(self, func_id: str) -> frozenset[str]:
        return self.func_to_files.get(func_id, frozenset())

    def tpls_of(self, func_id: str) -> frozenset[str]:
        return self.func_to_tpls.get(func_id, frozenset())

    def callees_of(self, func_id: str) -> frozenset[str]:
        return self.src_calls.get(func_id, frozenset())


def query_files_of_function(db: ScaDatabase, func_id: str) -> frozenset[str]:
    return db.files_of(func_id)


def query_tpls_of_function(db: ScaDatabase, func_id: str) -> frozenset[str]:
    return db.tpls_of(func_id)


def _check_record(rec: Any) -> str | None:
    if not isinstance(rec, Mapping):
        return "record is not an object"
    for key in _RECORD_KEYS:
        if key not in rec:
            return f"missing key {key!r}"
    for key in ("tpl", "file", "name"):
        if not isinstance(rec[key], str) or not rec[key]:
            return f"{key!r} must be a non-empty string"
    for key in ("tokens", "callees"):
        if not isinstance(rec[key], list) or not all(isinstance(t, str) for t in rec[key]):
            return f"{key!r} must be a list of strings"
    if not rec["tokens"]:
        return "empty token list"
    return None


def ingest_source_corpus(records: Iterable[Mapping[str, Any]]) -> ScaDatabase:
    """Build the SCA database from raw function records.

    Bad records are skipped and described in ``db.rejected``; ingestion
    carries on with the rest of the stream.
    """
    functions: dict[str, SourceFunction] = {}
    callee_names: dict[str, set[str]] = {}
    file_funcs: dict[str, list[str]] = {}
    file_tpl: dict[str, str] = {}
    # Per file: name -> first func_id seen under that name, for call resolution.
    file_names: dict[str, dict[str, str]] = {}
    seen: set[tuple[str, str, str]] = set()
    rejected: list[str] = []

    for idx, rec in enumerate(records):
        problem = _check_record(rec)
        if problem is not None:
            rejected.append(f"record {idx}: {problem}")
            continue
        file_id = qualify_file(rec["tpl"], rec["file"])
        if file_tpl.setdefault(file_id, rec["tpl"]) != rec["tpl"]:
            rejected.append(f"record {idx}: file {file_id!r} already owned by another TPL")
            continue
        tokens = tuple(rec["tokens"])
        fid = function_id(tokens)
        key = (file_id, rec["name"], fid)
        if key in seen:
            continue
        seen.add(key)
        if fid not in functions:
            functions[fid] = SourceFunction(fid, rec["name"], tokens)
            callee_names[fid] = set()
        callee_names[fid].update(rec["callees"])
        funcs = file_funcs.setdefault(file_id, [])
        if fid not in funcs:
            funcs.append(fid)
        file_names.setdefault(file_id, {}).setdefault(rec["name"], fid)

    for msg in rejected:
        log.warning("ingest: %s", msg)

    calls: dict[str, set[str]] = {}
    for file_id, funcs in file_funcs.items():
        names = file_names[file_id]
        for fid in funcs:
            resolved = {names[c] for c in callee_names[fid] if c in names}
            if resolved:
                calls.setdefault(fid, set()).update(resolved)

    functions = {
        fid: SourceFunction(f.func_id, f.name, f.tokens, frozenset(callee_names[fid]))
        for fid, f in functions.items()
    }
    files = {
        file_id: SourceFile(file_id, file_tpl[file_id], tuple(funcs))
        for file_id, funcs in file_funcs.items()
    }
    db = _assemble(functions, files, {k: frozenset(v) for k, v in calls.items()})
    db.rejected = rejected
    return db


def _assemble(
    functions: dict[str, SourceFunction],
    files: dict[str, SourceFile],
    calls: dict[str, frozenset[str]],
) -> ScaDatabase:
    f2files: dict[str, set[str]] = {}
    f2tpls: dict[str, set[str]] = {}
    tpl_files: dict[str, set[str]] = {}
    tpl_funcs: dict[str, set[str]] = {}
    for sf in files.values():
        tpl_files.setdefault(sf.tpl_id, set()).add(sf.file_id)
        tpl_funcs.setdefault(sf.tpl_id, set()).update(sf.func_ids)
        for fid in sf.func_ids:
            f2files.setdefault(fid, set()).add(sf.file_id)
            f2tpls.setdefault(fid, set()).add(sf.tpl_id)
    tpls = {
        t: TplRecord(t, frozenset(tpl_files[t]), len(tpl_funcs[t])) for t in sorted(tpl_files)
    }
    return ScaDatabase(
        functions=dict(sorted(functions.items())),
        func_to_files={k: frozenset(v) for k, v in sorted(f2files.items())},
        func_to_tpls={k: frozenset(v) for k, v in sorted(f2tpls.items())},
        files=dict(sorted(files.items())),
        tpls=tpls,
        src_calls=dict(sorted(calls.items())),
    )


def read_records(path: str | os.PathLike[str]) -> Iterator[Any]:
    for _, rec in iter_jsonl(path):
        yield rec


# -- persistence -----------------------------------------------------------

def database_to_dict(db: ScaDatabase) -> dict[str, Any]:
    return {
        "schema": DB_SCHEMA,
        "functions": [
            {
                "id": f.func_id,
                "name": f.name,
                "tokens": list(f.tokens),
                "callee_names": sorted(f.callee_names),
                "calls": sorted(db.callees_of(f.func_id)),
            }
            for f in sorted(db.functions.values(), key=lambda f: f.func_id)
        ],
        "files": [
            {"id": sf.file_id, "tpl": sf.tpl_id, "funcs": list(sf.func_ids)}
            for sf in sorted(db.files.values(), key=lambda s: s.file_id)
        ],
    }


def persist_database(db: ScaDatabase, path: str | os.PathLike[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(database_to_dict(db)))
        fh.write("\n")


def _field(obj: Any, key: str, kind: type, where: str) -> Any:
    if not isinstance(obj, dict) or key not in obj:
        raise DatabaseFormatError(f"{where}: missing key {key!r}")
    val = obj[key]
    if not isinstance(val, kind):
        raise DatabaseFormatError(f"{where}.{key}: expected {kind.__name__}")
    return val


def _strings(obj: Any, key: str, where: str) -> list[str]:
    val = _field(obj, key, list, where)
    if not all(isinstance(v, str) for v in val):
        raise DatabaseFormatError(f"{where}.{key}: expected a list of strings")
    return val


def database_from_dict(doc: Any) -> ScaDatabase:
    if not isinstance(doc, dict) or "schema" not in doc:
        raise DatabaseFormatError("database: missing schema tag")
    if doc["schema"] != DB_SCHEMA:
        raise SchemaVersionError(f"database: unsupported schema {doc['schema']!r} (want {DB_SCHEMA!r})")

    functions: dict[str, SourceFunction] = {}
    calls: dict[str, frozenset[str]] = {}
    for i, rec in enumerate(_field(doc, "functions", list, "database")):
        where = f"functions[{i}]"
        fid = _field(rec, "id", str, where)
        tokens = _strings(rec, "tokens", where)
        if not tokens:
            raise DatabaseFormatError(f"{where}: empty token list")
        if function_id(tokens) != fid:
            raise DatabaseFormatError(f"{where}: id does not match token hash")
        functions[fid] = SourceFunction(
            fid,
            _field(rec, "name", str, where),
            tuple(tokens),
            frozenset(_strings(rec, "callee_names", where)),
        )
        callees = _strings(rec, "calls", where)
        if callees:
            calls[fid] = frozenset(callees)

    files: dict[str, SourceFile] = {}
    for i, rec in enumerate(_field(doc, "files", list, "database")):
        where = f"files[{i}]"
        funcs = _strings(rec, "funcs", where)
        missing = [f for f in funcs if f not in functions]
        if missing:
            raise DatabaseFormatError(f"{where}: unknown function {missing[0]!r}")
        if len(set(funcs)) != len(funcs):
            raise DatabaseFormatError(f"{where}: duplicate function ids")
        file_id = _field(rec, "id", str, where)
        files[file_id] = SourceFile(file_id, _field(rec, "tpl", str, where), tuple(funcs))

    for fid, callees in calls.items():
        bad = [c for c in callees if c not in functions]
        if bad:
            raise DatabaseFormatError(f"functions[{fid}].calls: unknown function {bad[0]!r}")
    return _assemble(functions, files, calls)


def load_database(path: str | os.PathLike[str]) -> ScaDatabase:
    try:
        doc = read_json(path)
    except FormatError as exc:
        raise DatabaseFormatError(str(exc)) from exc
    return database_from_dict(doc)
