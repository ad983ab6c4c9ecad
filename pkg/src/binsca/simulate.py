"""Synthetic TPL corpora and a toy "compiler" that links them into a labeled binary.

The compiler follows the three compilation facts the matcher relies on:
functions of one source file stay together (their order inside the object
may shuffle), object files are laid out back to back, and a source function
may turn into several binary functions (or none, when inlined).
"""

from __future__ import annotations

import os
import random
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, fields
from typing import Any

from binsca._io import FormatError, read_json
from binsca.corpus import ScaDatabase, ingest_source_corpus, qualify_file
from binsca.locality import BinaryArtifact, BinaryFunction

TRUTH_SCHEMA = "binsca.truth/1"

_KEYWORD_STMTS = ("if", "while", "for")
_OPS = ("+", "-", "*", "/", "%", "&", "|", "^", "<<", ">>")
_CMPS = ("<", ">", "<=", ">=", "==", "!=")


@dataclass
class SimConfig:
    seed: int = 0
    n_tpls: int = 3
    files_per_tpl: int = 4
    funcs_per_file: int = 6
    # Probability a source function is emitted ``duplication_copies`` times.
    duplication_rate: float = 0.0
    duplication_copies: int = 2
    mutation_rate: float = 0.0
    # Number of files holding each cloned body (1 = no clones).
    clone_fanout: int = 1
    clone_rate: float = 1.0
    inline_rate: float = 0.0
    # Replace function and callee names by FUN_<addr> in the binary, like a stripped decompile.
    strip_symbols: bool = False
    # None links every TPL; otherwise the number of TPLs linked into the binary.
    linked_tpls: int | None = None
    # Verbatim copies of one TPL's file inside another (internal clones + dependency edges).
    vendored_files: int = 0
    # "unlinked": clones live only in TPLs the binary does not link (falls back to
    # any other TPL when everything is linked); "any": any other TPL.
    clone_hosts: str = "unlinked"
    junk_functions: int = 0
    call_prob: float = 0.7
    body_statements: tuple[int, int] = (3, 6)
    vocab_size: int = 4000

    def __post_init__(self) -> None:
        self.body_statements = tuple(self.body_statements)  # type: ignore[assignment]
        for name in ("duplication_rate", "mutation_rate", "clone_rate", "inline_rate", "call_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        for name in ("n_tpls", "files_per_tpl", "funcs_per_file", "duplication_copies", "clone_fanout", "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.clone_fanout > 1 and self.n_tpls < 2:
            raise ValueError("clones need at least two TPLs")
        if self.linked_tpls is not None and not 1 <= self.linked_tpls <= self.n_tpls:
            raise ValueError("linked_tpls must be between 1 and n_tpls")
        if self.clone_hosts not in ("unlinked", "any"):
            raise ValueError("clone_hosts must be 'unlinked' or 'any'")
        if self.vendored_files < 0 or self.junk_functions < 0:
            raise ValueError("vendored_files and junk_functions must be >= 0")
        lo, hi = self.body_statements
        if not 1 <= lo <= hi:
            raise ValueError("body_statements must be (lo, hi) with 1 <= lo <= hi")

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> SimConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise FormatError(f"unknown simulator config keys: {unknown}")
        return cls(**doc)

    @classmethod
    def load(cls, path: str | os.PathLike[str]) -> SimConfig:
        doc = read_json(path)
        if not isinstance(doc, dict):
            raise FormatError(f"{path}: simulator config must be an object")
        return cls.from_dict(doc)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["body_statements"] = list(self.body_statements)
        return d


@dataclass
class GroundTruth:
    binary: str
    mapping: dict[int, str]
    file_layout: list[tuple[str, int, int]]
    component_list: frozenset[str]

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema": TRUTH_SCHEMA,
            "binary": self.binary,
            "mapping": {f"{rva:#x}": fid for rva, fid in sorted(self.mapping.items())},
            "file_layout": [[f, s, e] for f, s, e in self.file_layout],
            "components": sorted(self.component_list),
        }

    @classmethod
    def from_dict(cls, doc: Any) -> GroundTruth:
        if not isinstance(doc, dict) or doc.get("schema") != TRUTH_SCHEMA:
            raise FormatError(f"ground truth: expected schema {TRUTH_SCHEMA!r}")
        try:
            return cls(
                str(doc["binary"]),
                {int(k, 16): str(v) for k, v in doc["mapping"].items()},
                [(str(f), int(s), int(e)) for f, s, e in doc["file_layout"]],
                frozenset(doc["components"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"ground truth: malformed document ({exc})") from exc


@dataclass
class Simulation:
    config: SimConfig
    records: list[dict[str, Any]]
    db: ScaDatabase
    binary: BinaryArtifact
    truth: GroundTruth
    dependencies: dict[str, frozenset[str]] = field(default_factory=dict)


# -- corpus ----------------------------------------------------------------

def _tpl_name(t: int) -> str:
    return f"tpl{t:02d}"


def _ident(rng: random.Random, cfg: SimConfig) -> str:
    return f"v{rng.randrange(cfg.vocab_size)}"


def _statement(rng: random.Random, cfg: SimConfig) -> list[str]:
    kind = rng.random()
    a, b, c = (_ident(rng, cfg) for _ in range(3))
    num = str(rng.randrange(1, 256))
    if kind < 0.5:
        return [a, "=", b, rng.choice(_OPS), rng.choice((c, num)), ";"]
    if kind < 0.8:
        return [rng.choice(_KEYWORD_STMTS[:2]), "(", a, rng.choice(_CMPS), b, ")",
                "{", c, "=", c, rng.choice(_OPS), num, ";", "}"]
    return [a, "[", b, "]", "=", c, "->", _ident(rng, cfg), ";"]


def _function_tokens(
    name: str, callees: Sequence[str], rng: random.Random, cfg: SimConfig
) -> list[str]:
    nargs = rng.randrange(1, 4)
    args = [_ident(rng, cfg) for _ in range(nargs)]
    toks = ["int", name, "("]
    for i, a in enumerate(args):
        if i:
            toks.append(",")
        toks += ["int", a]
    toks += [")", "{"]
    body: list[list[str]] = [_statement(rng, cfg) for _ in range(rng.randint(*cfg.body_statements))]
    for callee in callees:
        pos = rng.randrange(len(body) + 1)
        body.insert(pos, [_ident(rng, cfg), "=", callee, "(", rng.choice(args), ")", ";"])
    for stmt in body:
        toks += stmt
    toks += ["return", rng.choice(args), ";", "}"]
    return toks


def generate_corpus(config: SimConfig) -> list[dict[str, Any]]:
    """Deterministic raw function records for ``config`` (ingestible by the corpus builder)."""
    rng = random.Random(config.seed)
    per_file: dict[tuple[str, str], list[dict[str, Any]]] = {}
    originals: list[tuple[str, dict[str, Any]]] = []
    for t in range(config.n_tpls):
        tpl = _tpl_name(t)
        for m in range(config.files_per_tpl):
            path = f"src/mod{m}.c"
            names = [f"{tpl}_mod{m}_fn{k}" for k in range(config.funcs_per_file)]
            callees: list[list[str]] = [[] for _ in names]
            for k in range(1, len(names)):
                if rng.random() < config.call_prob:
                    callees[rng.randrange(k)].append(names[k])
            recs = []
            for name, cs in zip(names, callees):
                rec = {"tpl": tpl, "file": path, "name": name,
                       "tokens": _function_tokens(name, cs, rng, config), "callees": cs}
                recs.append(rec)
                originals.append((tpl, rec))
            per_file[(tpl, path)] = recs

    if config.clone_fanout > 1:
        linked = set(linked_tpl_ids(config))
        all_files = list(per_file)
        if config.clone_hosts == "unlinked" and len(linked) < config.n_tpls:
            all_files = [f for f in all_files if f[0] not in linked]
        for tpl, rec in originals:
            if rng.random() >= config.clone_rate:
                continue
            hosts = [f for f in all_files if f[0] != tpl]
            for host_tpl, host_path in rng.sample(hosts, min(config.clone_fanout - 1, len(hosts))):
                stem = host_path.rsplit("/", 1)[-1].split(".")[0]
                new_name = f"{rec['name']}__{host_tpl}_{stem}"
                toks = [new_name if tok == rec["name"] else tok for tok in rec["tokens"]]
                per_file[(host_tpl, host_path)].append(
                    {"tpl": host_tpl, "file": host_path, "name": new_name,
                     "tokens": toks, "callees": list(rec["callees"])}
                )

    for v in range(config.vendored_files):
        if config.n_tpls < 2:
            break
        src_tpl, dst_tpl = rng.sample(range(config.n_tpls), 2)
        m = rng.randrange(config.files_per_tpl)
        src_key = (_tpl_name(src_tpl), f"src/mod{m}.c")
        dst_key = (_tpl_name(dst_tpl), f"third_party/{_tpl_name(src_tpl)}/mod{m}.c")
        if dst_key in per_file:
            continue
        per_file[dst_key] = [
            {**rec, "tpl": dst_key[0], "file": dst_key[1]}
            for rec in per_file[src_key]
            if rec["name"].startswith(src_key[0] + "_")
        ]

    return [rec for key in per_file for rec in per_file[key]]


def vendoring_dependencies(db: ScaDatabase) -> dict[str, frozenset[str]]:
    """Reuse edges implied by ``third_party/<tpl>/`` paths in the corpus."""
    deps: dict[str, set[str]] = {}
    for sf in db.files.values():
        rel = sf.file_id[len(sf.tpl_id) + 1 :]
        if rel.startswith("third_party/"):
            origin = rel.split("/")[1]
            if origin != sf.tpl_id and origin in db.tpls:
                deps.setdefault(sf.tpl_id, set()).add(origin)
    return {k: frozenset(v) for k, v in sorted(deps.items())}


# -- compilation -----------------------------------------------------------

def _mutate(tokens: list[str], rate: float, rng: random.Random, cfg: SimConfig) -> list[str]:
    if rate <= 0:
        return tokens
    out: list[str] = []
    for tok in tokens:
        if rng.random() >= rate:
            out.append(tok)
            continue
        op = rng.randrange(3)
        if op == 0:
            out.append(_ident(rng, cfg))
        elif op == 1:
            out += [tok, _ident(rng, cfg)]
        # op == 2: deletion
    return out or tokens[:1]


def compile_binary(
    db: ScaDatabase,
    linked_files: Sequence[str],
    config: SimConfig,
    *,
    name: str = "sim.bin",
    seed_offset: int = 1,
) -> tuple[BinaryArtifact, GroundTruth]:
    """Link ``linked_files`` (in order) into a labeled binary artifact."""
    if not linked_files:
        raise ValueError("compile_binary needs at least one linked file")
    missing = [f for f in linked_files if f not in db.files]
    if missing:
        raise ValueError(f"unknown source file {missing[0]!r}")
    rng = random.Random(config.seed * 1_000_003 + seed_offset)

    addr = 0x1000
    mapping: dict[int, str] = {}
    layout: list[tuple[str, int, int]] = []
    placed: list[tuple[int, str, str]] = []  # (rva, func_id, file_id)
    for file_id in linked_files:
        funcs = list(db.files[file_id].func_ids)
        rng.shuffle(funcs)
        start = None
        for fid in funcs:
            if rng.random() < config.inline_rate:
                continue
            copies = config.duplication_copies if rng.random() < config.duplication_rate else 1
            for _ in range(copies):
                if start is None:
                    start = addr
                mapping[addr] = fid
                placed.append((addr, fid, file_id))
                last = addr
                addr += rng.randint(1, 16)
        if start is not None:
            layout.append((file_id, start, last))

    # First emitted copy of each function inside each file, for call edges and FUN_ names.
    first_copy: dict[tuple[str, str], int] = {}
    for rva, fid, file_id in placed:
        first_copy.setdefault((file_id, fid), rva)
    # Callee name -> func_id, per file.
    name_of = {fid: f.name for fid, f in db.functions.items()}

    functions: dict[int, BinaryFunction] = {}
    for rva, fid, file_id in placed:
        src = db.functions[fid]
        callee_rvas = {
            first_copy[(file_id, c)] for c in db.callees_of(fid) if (file_id, c) in first_copy
        }
        toks = list(src.tokens)
        if config.strip_symbols:
            rename = {src.name: f"FUN_{rva:08x}"}
            for c in db.callees_of(fid):
                target = first_copy.get((file_id, c))
                rename[name_of[c]] = f"FUN_{target:08x}" if target is not None else "FUN_extern"
            toks = [rename.get(t, t) for t in toks]
        toks = _mutate(toks, config.mutation_rate, rng, config)
        functions[rva] = BinaryFunction(rva, tuple(toks), frozenset(callee_rvas))

    for _ in range(config.junk_functions):
        toks = _function_tokens(f"FUN_{addr:08x}", [], rng, config)
        functions[addr] = BinaryFunction(addr, tuple(toks))
        addr += rng.randint(1, 16)

    components = set()
    for file_id in linked_files:
        tpl = db.files[file_id].tpl_id
        rel = file_id[len(tpl) + 1 :]
        components.add(rel.split("/")[1] if rel.startswith("third_party/") else tpl)
    meta = {"seed": config.seed, "linked_files": list(linked_files)}
    return (
        BinaryArtifact(name, dict(sorted(functions.items())), meta),
        GroundTruth(name, mapping, layout, frozenset(components)),
    )


def linked_tpl_ids(config: SimConfig) -> list[str]:
    every = [_tpl_name(t) for t in range(config.n_tpls)]
    if config.linked_tpls is None:
        return every
    return sorted(random.Random(config.seed * 7919 + 17).sample(every, config.linked_tpls))


def linked_files_for(db: ScaDatabase, config: SimConfig) -> list[str]:
    """Files linked by default: every first-party file of the chosen TPLs, TPL by TPL."""
    rng = random.Random(config.seed * 7919 + 29)
    out = []
    for tpl in linked_tpl_ids(config):
        files = sorted(f for f in db.tpls[tpl].file_ids if "/third_party/" not in f)
        rng.shuffle(files)
        out += files
    return out


def simulate(config: SimConfig, *, name: str = "sim.bin") -> Simulation:
    records = generate_corpus(config)
    db = ingest_source_corpus(records)
    binary, truth = compile_binary(db, linked_files_for(db, config), config, name=name)
    return Simulation(config, records, db, binary, truth, vendoring_dependencies(db))


def generate_training_pairs(
    db: ScaDatabase, config: SimConfig, n_pairs: int = 32
) -> list[tuple[list[str], list[str]]]:
    """Positive (binary tokens, source tokens) pairs from repeated simulated compilations."""
    pairs: list[tuple[list[str], list[str]]] = []
    files = sorted(db.files)
    rng = random.Random(config.seed * 31 + 5)
    round_ = 0
    while len(pairs) < n_pairs:
        round_ += 1
        binary, truth = compile_binary(db, files, config, seed_offset=100 + round_)
        rvas = sorted(truth.mapping)
        rng.shuffle(rvas)
        for rva in rvas[: n_pairs - len(pairs)]:
            pairs.append((list(binary.functions[rva].tokens), list(db.functions[truth.mapping[rva]].tokens)))
        if round_ > 1000:
            raise RuntimeError("corpus too small to draw training pairs")
    return pairs
