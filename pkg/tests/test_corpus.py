from __future__ import annotations

import json
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from binsca.corpus import (
    DatabaseFormatError,
    SchemaVersionError,
    database_to_dict,
    function_id,
    ingest_source_corpus,
    load_database,
    persist_database,
    query_files_of_function,
    query_tpls_of_function,
    qualify_file,
)
from conftest import body, rec


def fixture_records() -> list[dict]:
    """12 records over 3 TPLs; two bodies are shared across TPLs, so 10 unique functions."""
    shared1 = body("deflateInit", "0")
    shared2 = body("crc32", "1")
    return [
        rec("zlib", "deflate.c", "deflateInit", shared1),
        rec("zlib", "deflate.c", "deflate", body("deflate"), ["deflateInit"]),
        rec("zlib", "crc.c", "crc32", shared2),
        rec("zlib", "crc.c", "crc_table", body("crc_table")),
        rec("llvm", "third_party/zlib/deflate.c", "deflateInit", shared1),
        rec("llvm", "lib/ir.c", "ir_build", body("ir_build"), ["ir_emit"]),
        rec("llvm", "lib/ir.c", "ir_emit", body("ir_emit")),
        rec("llvm", "lib/opt.c", "opt_run", body("opt_run")),
        rec("png", "png.c", "png_read", body("png_read"), ["crc32"]),
        rec("png", "png.c", "crc32", shared2),
        rec("png", "png.c", "png_write", body("png_write")),
        rec("png", "io.c", "png_io", body("png_io")),
    ]


def naive_maps(records: list[dict]) -> tuple[dict, dict]:
    files: dict[str, set[str]] = {}
    tpls: dict[str, set[str]] = {}
    for r in records:
        fid = function_id(r["tokens"])
        files.setdefault(fid, set()).add(qualify_file(r["tpl"], r["file"]))
        tpls.setdefault(fid, set()).add(r["tpl"])
    return files, tpls


def test_function_id_depends_only_on_tokens() -> None:
    assert function_id(["a", "b"]) == function_id(("a", "b"))
    assert function_id(["a", "b"]) != function_id(["ab"])
    assert function_id(["ab", ""]) != function_id(["a", "b", ""])


def test_same_tokens_in_two_tpls_dedup() -> None:
    toks = body("f")
    db = ingest_source_corpus([rec("X", "a.c", "f", toks), rec("Y", "b.c", "f", toks)])
    assert len(db.functions) == 1
    fid = function_id(toks)
    assert db.func_to_files[fid] == {"X/a.c", "Y/b.c"}
    assert db.func_to_tpls[fid] == {"X", "Y"}


def test_empty_stream() -> None:
    db = ingest_source_corpus([])
    assert not db.functions and not db.func_to_files and not db.func_to_tpls
    assert not db.files and not db.tpls


def test_fixture_matches_naive_oracle() -> None:
    records = fixture_records()
    db = ingest_source_corpus(records)
    assert len(db.functions) == 10
    files, tpls = naive_maps(records)
    assert db.func_to_files == files
    assert db.func_to_tpls == tpls
    assert db.tpls["zlib"].total_func_count == 4
    assert db.tpls["llvm"].total_func_count == 4
    assert db.tpls["png"].total_func_count == 4


def test_query_helpers() -> None:
    db = ingest_source_corpus(fixture_records())
    deflate_init = function_id(body("deflateInit", "0"))
    assert query_tpls_of_function(db, deflate_init) == {"zlib", "llvm"}
    assert query_files_of_function(db, deflate_init) == {"zlib/deflate.c", "llvm/third_party/zlib/deflate.c"}
    assert query_files_of_function(db, "deadbeef") == frozenset()
    assert query_tpls_of_function(db, "deadbeef") == frozenset()
    only = function_id(body("opt_run"))
    assert query_files_of_function(db, only) == {"llvm/lib/opt.c"}
    assert query_tpls_of_function(db, only) == {"llvm"}


def test_callees_resolved_within_file() -> None:
    db = ingest_source_corpus(fixture_records())
    build, emit = function_id(body("ir_build")), function_id(body("ir_emit"))
    assert db.callees_of(build) == {emit}
    # png_read calls crc32, which lives in the same file
    assert db.callees_of(function_id(body("png_read"))) == {function_id(body("crc32", "1"))}
    assert db.callees_of(emit) == frozenset()


def test_bad_records_rejected_and_ingestion_continues() -> None:
    records = [
        rec("X", "a.c", "empty", []),
        {"tpl": "X", "file": "a.c", "name": "nokey", "tokens": ["x"]},
        "not a record",
        rec("X", "a.c", "ok", body("ok")),
    ]
    db = ingest_source_corpus(records)
    assert len(db.functions) == 1
    assert len(db.rejected) == 3
    assert db.rejected[0].startswith("record 0: empty token list")
    assert "record 1" in db.rejected[1] and "callees" in db.rejected[1]


def test_duplicate_triple_is_noop() -> None:
    r = rec("X", "a.c", "f", body("f"))
    once = ingest_source_corpus([r])
    twice = ingest_source_corpus([r, dict(r)])
    assert once == twice
    assert once.files["X/a.c"].func_count == 1


def test_ingest_is_idempotent() -> None:
    records = fixture_records()
    assert ingest_source_corpus(records) == ingest_source_corpus(records + records)


def test_index_consistency() -> None:
    db = ingest_source_corpus(fixture_records())
    for fid, files in db.func_to_files.items():
        for file_id in files:
            assert fid in db.files[file_id].func_ids
            assert db.files[file_id].tpl_id in db.func_to_tpls[fid]
    for sf in db.files.values():
        assert sf.func_count == len(sf.func_ids) == len(set(sf.func_ids))
        for fid in sf.func_ids:
            assert fid in db.functions and sf.file_id in db.func_to_files[fid]


def test_round_trip(tmp_path: Path) -> None:
    db = ingest_source_corpus(fixture_records())
    path = tmp_path / "db.json"
    persist_database(db, path)
    back = load_database(path)
    assert back == db
    persist_database(back, tmp_path / "again.json")
    assert (tmp_path / "again.json").read_bytes() == path.read_bytes()


def test_truncated_file_is_format_error(tmp_path: Path) -> None:
    db = ingest_source_corpus(fixture_records())
    path = tmp_path / "db.json"
    persist_database(db, path)
    data = path.read_text()
    path.write_text(data[: len(data) // 2])
    with pytest.raises(DatabaseFormatError):
        load_database(path)


def test_unknown_schema_is_version_error(tmp_path: Path) -> None:
    doc = database_to_dict(ingest_source_corpus(fixture_records()))
    doc["schema"] = "binsca.db/99"
    path = tmp_path / "db.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(SchemaVersionError):
        load_database(path)


def test_malformed_record_is_named(tmp_path: Path) -> None:
    doc = database_to_dict(ingest_source_corpus(fixture_records()))
    del doc["functions"][3]["tokens"]
    path = tmp_path / "db.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(DatabaseFormatError, match=r"functions\[3\]"):
        load_database(path)
    doc = database_to_dict(ingest_source_corpus(fixture_records()))
    doc["files"][1]["funcs"].append("feedface")
    path.write_text(json.dumps(doc))
    with pytest.raises(DatabaseFormatError, match=r"files\[1\].*feedface"):
        load_database(path)


def test_tampered_tokens_detected() -> None:
    from binsca.corpus import database_from_dict

    doc = database_to_dict(ingest_source_corpus(fixture_records()))
    doc["functions"][0]["tokens"] = ["changed"]
    with pytest.raises(DatabaseFormatError, match="hash"):
        database_from_dict(doc)


_tok = st.sampled_from(["int", "x", "y", "+", "(", ")", "return", "1", ";"])
_records = st.lists(
    st.builds(
        rec,
        st.sampled_from(["A", "B", "C"]),
        st.sampled_from(["f1.c", "f2.c"]),
        st.sampled_from(["p", "q", "r", "s"]),
        st.lists(_tok, min_size=1, max_size=5),
        st.lists(st.sampled_from(["p", "q", "r", "s"]), max_size=2),
    ),
    max_size=25,
)


@given(_records)
def test_dedup_and_indexes_match_oracle(records: list[dict]) -> None:
    db = ingest_source_corpus(records)
    files, tpls = naive_maps(records)
    assert db.func_to_files == files
    assert db.func_to_tpls == tpls
    assert set(db.functions) == set(files)
    for t, tr in db.tpls.items():
        assert tr.total_func_count == len({fid for fid, ts in tpls.items() if t in ts}) >= 1


@given(_records)
def test_duplicated_stream_and_round_trip(records: list[dict]) -> None:
    from binsca.corpus import database_from_dict

    db = ingest_source_corpus(records)
    assert ingest_source_corpus(records + records) == db
    assert database_from_dict(json.loads(json.dumps(database_to_dict(db)))) == db
