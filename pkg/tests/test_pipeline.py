from __future__ import annotations

from pathlib import Path

import pytest

from binsca._io import write_jsonl
from binsca.corpus import persist_database
from binsca.detect import TplDependency
from binsca.embedding import embed_tokens, write_embeddings
from binsca.locality import write_binary
from binsca.pipeline import (
    COMPONENT_REPORT,
    MATCH_REPORT,
    ScanError,
    closure_stats,
    load_match_report,
    result_closure,
    run_scan,
    scan,
)
from binsca.retrieval import build_corpus
from binsca.simulate import SimConfig, Simulation, simulate


def corpus_of(sim: Simulation, dim: int = 256):
    return build_corpus({fid: embed_tokens(f.tokens, dim) for fid, f in sim.db.functions.items()})


def materialize(sim: Simulation, root: Path, dim: int = 256) -> dict[str, Path]:
    paths = {"db": root / "db.json", "binary": root / "bin.jsonl", "vec": root / "vec.jsonl", "deps": root / "deps.jsonl"}
    persist_database(sim.db, paths["db"])
    write_binary(paths["binary"], sim.binary)
    write_embeddings(paths["vec"], {fid: embed_tokens(f.tokens, dim) for fid, f in sim.db.functions.items()})
    write_jsonl(paths["deps"], [{k: sorted(v)} for k, v in sim.dependencies.items()])
    return paths


def test_identity_scan_recovers_truth() -> None:
    sim = simulate(SimConfig(seed=0))
    res = scan(sim.binary, sim.db, corpus_of(sim), k=10, dependencies=TplDependency())
    assert {r: m.func_id for r, m in res.matches.matches.items()} == sim.truth.mapping
    assert res.report.tpl_ids == sim.truth.component_list
    assert not res.closure_violations()


def test_k1_final_recall_equals_raw_top1() -> None:
    sim = simulate(SimConfig(seed=1, clone_fanout=3, mutation_rate=0.1, n_tpls=6, linked_tpls=2, strip_symbols=True))
    res = scan(sim.binary, sim.db, corpus_of(sim), k=1)
    stats = result_closure(res, sim.truth)
    assert stats.final_recall == stats.raw_recall_at_1 == stats.raw_recall_at_k
    assert stats.holds


def test_closure_on_harder_scenario() -> None:
    sim = simulate(SimConfig(seed=2, clone_fanout=5, mutation_rate=0.05, n_tpls=10, linked_tpls=3, strip_symbols=True))
    res = scan(sim.binary, sim.db, corpus_of(sim), k=10)
    stats = result_closure(res, sim.truth)
    assert stats.holds and stats.raw_recall_at_1 <= stats.raw_recall_at_k
    assert stats.final_recall > stats.raw_recall_at_1


def test_closure_stats_arithmetic() -> None:
    from binsca.simulate import GroundTruth

    truth = GroundTruth("b", {1: "a", 2: "b", 3: "c", 4: "d"}, [], frozenset())
    cands = {1: ["a", "x"], 2: ["x", "b"], 3: ["x", "y"], 4: []}
    stats = closure_stats(cands, {1: "a", 2: "b", 3: "x"}, truth, 2)
    assert (stats.raw_recall_at_1, stats.raw_recall_at_k, stats.final_recall) == (0.25, 0.5, 0.5)
    assert stats.holds
    # A "match" that was never retrieved breaks the bound and is flagged.
    bad = closure_stats(cands, {1: "a", 2: "b", 3: "c"}, truth, 1)
    assert bad.final_recall == 0.75 and not bad.holds


def test_run_scan_writes_reports(tmp_path: Path) -> None:
    sim = simulate(SimConfig(seed=0, n_tpls=4, vendored_files=2))
    p = materialize(sim, tmp_path)
    res = run_scan(p["binary"], p["db"], p["vec"], 10, 0.01, p["deps"], tmp_path / "out")
    rep = load_match_report(tmp_path / "out" / MATCH_REPORT)
    assert rep.binary == "sim.bin" and rep.k == 10
    assert {r: m.func_id for r, m in rep.matches.items()} == {r: m.func_id for r, m in res.matches.matches.items()}
    assert (tmp_path / "out" / COMPONENT_REPORT).exists()
    assert res.report.tpl_ids == sim.truth.component_list


def test_reports_are_byte_identical(tmp_path: Path) -> None:
    cfg = SimConfig(seed=3, clone_fanout=3, mutation_rate=0.05, n_tpls=5, linked_tpls=2, duplication_rate=0.2)
    outs = []
    for run in ("a", "b"):
        root = tmp_path / run
        root.mkdir()
        p = materialize(simulate(cfg), root)
        run_scan(p["binary"], p["db"], p["vec"], 10, 0.01, p["deps"], root / "out")
        outs.append([(root / "out" / n).read_bytes() for n in (MATCH_REPORT, COMPONENT_REPORT)])
    assert outs[0] == outs[1]


def test_missing_dependency_file_is_a_warning(tmp_path: Path) -> None:
    sim = simulate(SimConfig(seed=0))
    p = materialize(sim, tmp_path)
    res = run_scan(p["binary"], p["db"], p["vec"], 10, 0.01, tmp_path / "nope.jsonl", tmp_path / "out")
    doc = res.component_document()
    assert any("nope.jsonl" in w and "skipped" in w for w in doc["warnings"])
    assert res.report.tpl_ids == sim.truth.component_list


def test_failure_removes_partial_outputs(tmp_path: Path) -> None:
    sim = simulate(SimConfig(seed=0))
    p = materialize(sim, tmp_path)
    out = tmp_path / "out"
    run_scan(p["binary"], p["db"], p["vec"], 10, 0.01, p["deps"], out)
    assert (out / MATCH_REPORT).exists()
    p["binary"].write_text("not json\n")
    with pytest.raises(ScanError) as err:
        run_scan(p["binary"], p["db"], p["vec"], 10, 0.01, p["deps"], out)
    assert err.value.phase == "load"
    assert not (out / MATCH_REPORT).exists() and not (out / COMPONENT_REPORT).exists()


def test_phase_tags(tmp_path: Path) -> None:
    sim = simulate(SimConfig(seed=0))
    p = materialize(sim, tmp_path)
    with pytest.raises(ScanError) as err:
        run_scan(p["binary"], p["db"], p["vec"], 0, 0.01, None, tmp_path / "o1")
    assert err.value.phase == "retrieve" and str(err.value).startswith("[retrieve]")
    with pytest.raises(ScanError) as err:
        run_scan(p["binary"], p["db"], p["vec"], 10, 1.5, None, tmp_path / "o2")
    assert err.value.phase == "detect"
    small = simulate(SimConfig(seed=1))
    write_embeddings(p["vec"], {fid: embed_tokens(f.tokens) for fid, f in small.db.functions.items()})
    with pytest.raises(ScanError) as err:
        run_scan(p["binary"], p["db"], p["vec"], 10, 0.01, None, tmp_path / "o3")
    assert err.value.phase == "load" and "not in the database" in str(err.value)


def test_query_vectors_must_cover_binary(tmp_path: Path) -> None:
    sim = simulate(SimConfig(seed=0))
    p = materialize(sim, tmp_path, dim=64)
    q = tmp_path / "q.jsonl"
    some = dict(list(sim.binary.functions.items())[:5])
    write_embeddings(q, {f"{r:#x}": embed_tokens(f.tokens, 64) for r, f in some.items()})
    with pytest.raises(ScanError) as err:
        run_scan(p["binary"], p["db"], p["vec"], 10, 0.01, None, tmp_path / "o", query_vectors_path=q)
    assert err.value.phase == "embed"
    write_embeddings(q, {f"{r:#x}": embed_tokens(f.tokens, 64) for r, f in sim.binary.functions.items()})
    res = run_scan(p["binary"], p["db"], p["vec"], 10, 0.01, None, tmp_path / "o", query_vectors_path=q)
    assert {r: m.func_id for r, m in res.matches.matches.items()} == sim.truth.mapping


def test_bare_interval_search_is_weaker_on_small_corpora() -> None:
    # Keeps the reason for pruning and contiguous runs visible: without them one
    # file interval swallows most of the binary and locality stops helping.
    cfg = SimConfig(seed=0, clone_fanout=5, mutation_rate=0.05, n_tpls=10, linked_tpls=3, strip_symbols=True)
    sim = simulate(cfg)
    corpus = corpus_of(sim)
    tuned = result_closure(scan(sim.binary, sim.db, corpus, k=10), sim.truth)
    bare = result_closure(scan(sim.binary, sim.db, corpus, k=10, margin=None, contiguous=False), sim.truth)
    assert tuned.final_recall >= 0.95 * tuned.raw_recall_at_k
    assert bare.final_recall < tuned.final_recall
