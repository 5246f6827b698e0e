"""Command-line pipeline: mine, init-embeddings, train, gradcheck,
gen-queries, eval.

Configuration comes from an INI file (sections [run], [paths], [train],
[eval], [gradcheck]) with every value overridable by a command-line flag.
The resolved configuration is echoed to <out>/effective_config.ini, and the
only timestamp any command emits lives in <out>/run_meta.json, so repeated
runs with the same seed produce byte-identical primary outputs.

Exit codes: 0 success, 1 usage error, 2 validation/config error, 3 runtime
failure (I/O and the like).
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone

from srbox import evalgen, params as params_mod, train as train_mod
from srbox.corpus import load_corpus, chunk_sequences
from srbox.errors import ValidationError
from srbox.rng import STREAM_QUERY_GEN, substream
from srbox.structures import (
    StructureKind,
    mine_structures,
    structure_record,
)

CONFIG_DEFAULTS: dict[str, dict[str, str]] = {
    "run": {"mode": "text", "seed": "0", "out": "out", "dim": "32", "seq_len": "512"},
    "paths": {
        "corpus": "",
        "vectors": "",
        "kg": "",
        "checkpoint": "",
        "checkpoint_out": "",
        "queries": "",
    },
    "train": {
        "gamma": "24.0",
        "alpha": "0.02",
        "lambda1": "1.0",
        "lambda2": "0.1",
        "k_negatives": "16",
        "lr": "0.05",
        "beta1": "0.9",
        "beta2": "0.98",
        "eps": "1e-8",
        "steps": "1000",
        "batch_size": "64",
        "offset_mode": "shared",
        "negative_pool": "same_sequence",
        "norm": "l1",
        "warmup": "true",
        "trace_every": "100",
        "complex_pool": "0",
    },
    "eval": {
        "types": "1p,2p,3p,2i,3i,ip,pi,2u,up",
        "count": "200",
        "split": "test",
        "scorer": "box",
        "raw": "false",
    },
    "gradcheck": {"trials": "200", "dim": "6", "entities": "12", "relations": "5"},
}

_TRUE = ("1", "true", "yes", "on")
_FALSE = ("0", "false", "no", "off")


def _typed(section: str, key: str, value: str, kind: str):
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "bool":
            low = value.strip().lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(value)
        return value
    except ValueError:
        raise ValidationError(
            f"config [{section}] {key}: cannot read {value!r} as {kind}"
        ) from None


@dataclass
class RunConfig:
    """Fully resolved configuration for one command invocation."""

    raw: dict[str, dict[str, str]] = field(default_factory=dict)

    def get(self, section: str, key: str) -> str:
        return self.raw[section][key]

    def get_int(self, section: str, key: str) -> int:
        return _typed(section, key, self.get(section, key), "int")

    def get_float(self, section: str, key: str) -> float:
        return _typed(section, key, self.get(section, key), "float")

    def get_bool(self, section: str, key: str) -> bool:
        return _typed(section, key, self.get(section, key), "bool")

    @property
    def seed(self) -> int:
        return self.get_int("run", "seed")

    @property
    def out_dir(self) -> str:
        return self.get("run", "out")

    def train_config(self) -> train_mod.TrainConfig:
        cfg = train_mod.TrainConfig(
            gamma=self.get_float("train", "gamma"),
            alpha=self.get_float("train", "alpha"),
            lambda1=self.get_float("train", "lambda1"),
            lambda2=self.get_float("train", "lambda2"),
            k_negatives=self.get_int("train", "k_negatives"),
            lr=self.get_float("train", "lr"),
            beta1=self.get_float("train", "beta1"),
            beta2=self.get_float("train", "beta2"),
            eps=self.get_float("train", "eps"),
            steps=self.get_int("train", "steps"),
            batch_size=self.get_int("train", "batch_size"),
            seed=self.seed,
            offset_mode=self.get("train", "offset_mode"),
            negative_pool=self.get("train", "negative_pool"),
            norm=self.get("train", "norm"),
            warmup=self.get_bool("train", "warmup"),
            trace_every=self.get_int("train", "trace_every"),
        )
        cfg.validate()
        return cfg


def load_config(path: str | None) -> RunConfig:
    resolved = {s: dict(kv) for s, kv in CONFIG_DEFAULTS.items()}
    if path:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ValidationError(f"config file not found: {path}")
        for section in parser.sections():
            if section not in CONFIG_DEFAULTS:
                raise ValidationError(f"unknown config section [{section}]")
            for key, value in parser.items(section):
                if key not in CONFIG_DEFAULTS[section]:
                    raise ValidationError(f"unknown config key [{section}] {key}")
                resolved[section][key] = value
    return RunConfig(resolved)


# flag destination -> (section, key); flags default to None = not given
OVERRIDES: dict[str, tuple[str, str]] = {
    "mode": ("run", "mode"),
    "seed": ("run", "seed"),
    "out": ("run", "out"),
    "dim": ("run", "dim"),
    "seq_len": ("run", "seq_len"),
    "corpus": ("paths", "corpus"),
    "vectors": ("paths", "vectors"),
    "kg": ("paths", "kg"),
    "checkpoint": ("paths", "checkpoint"),
    "checkpoint_out": ("paths", "checkpoint_out"),
    "queries": ("paths", "queries"),
    "gamma": ("train", "gamma"),
    "alpha": ("train", "alpha"),
    "lr": ("train", "lr"),
    "steps": ("train", "steps"),
    "batch_size": ("train", "batch_size"),
    "k_negatives": ("train", "k_negatives"),
    "offset_mode": ("train", "offset_mode"),
    "negative_pool": ("train", "negative_pool"),
    "complex_pool": ("train", "complex_pool"),
    "types": ("eval", "types"),
    "count": ("eval", "count"),
    "split": ("eval", "split"),
    "scorer": ("eval", "scorer"),
    "raw": ("eval", "raw"),
    "trials": ("gradcheck", "trials"),
    "gc_dim": ("gradcheck", "dim"),
    "gc_entities": ("gradcheck", "entities"),
    "gc_relations": ("gradcheck", "relations"),
}


def apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    for dest, (section, key) in OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            cfg.raw[section][key] = str(value)
    return cfg


def _prepare_out(cfg: RunConfig, command: str, argv: list[str]) -> str:
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    echo = configparser.ConfigParser()
    for section, kv in cfg.raw.items():
        echo[section] = kv
    with open(os.path.join(out, "effective_config.ini"), "w", encoding="utf-8") as fh:
        echo.write(fh)
    meta = {
        "command": command,
        "argv": argv,
        "started": datetime.now(timezone.utc).isoformat(),
    }
    with open(os.path.join(out, "run_meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")
    return out


def _require(cfg: RunConfig, section: str, key: str, why: str) -> str:
    value = cfg.get(section, key)
    if not value:
        raise ValidationError(f"[{section}] {key} is required {why}")
    return value


def _load_kg_dir(cfg: RunConfig) -> evalgen.KnowledgeGraph:
    kg_dir = _require(cfg, "paths", "kg", "to locate the train/valid/test TSV files")
    return evalgen.load_kg(
        os.path.join(kg_dir, "train.tsv"),
        os.path.join(kg_dir, "valid.tsv"),
        os.path.join(kg_dir, "test.tsv"),
    )


def _load_or_init_params(
    cfg: RunConfig, n_entities: int, n_relations: int,
    entity_ids: list[str] | None = None, relation_ids: list[str] | None = None,
) -> params_mod.ParamStore:
    ckpt = cfg.get("paths", "checkpoint")
    dim = cfg.get_int("run", "dim")
    if ckpt:
        return params_mod.load(ckpt, expected_dim=dim)
    return params_mod.init_random(
        dim,
        n_entities,
        n_relations,
        cfg.seed,
        offset_mode=cfg.get("train", "offset_mode"),
        entity_ids=entity_ids,
        relation_ids=relation_ids,
    )


# ---------------------------------------------------------------------------
# commands


def cmd_mine(cfg: RunConfig, out: str) -> int:
    corpus = load_corpus(_require(cfg, "paths", "corpus", "to mine structures"))
    seq_len = cfg.get_int("run", "seq_len")
    counts = {kind.value: 0 for kind in StructureKind}
    n_seq = 0
    with open(os.path.join(out, "structures.jsonl"), "w", encoding="utf-8") as fh:
        for seq in chunk_sequences(corpus, seq_len):
            n_seq += 1
            for structure in mine_structures(seq.triplets):
                counts[structure.kind.value] += 1
                rec = structure_record(structure, corpus.entity_ids, corpus.relation_ids)
                rec["seq"] = seq.seq_id
                fh.write(json.dumps(rec) + "\n")
    print(f"sequences: {n_seq}")
    for kind in StructureKind:
        print(f"{kind.value}: {counts[kind.value]}")
    return 0


def cmd_init_embeddings(cfg: RunConfig, out: str) -> int:
    corpus = load_corpus(_require(cfg, "paths", "corpus", "to size the embedding tables"))
    store = params_mod.init_random(
        cfg.get_int("run", "dim"),
        corpus.n_entities,
        corpus.n_relations,
        cfg.seed,
        offset_mode=cfg.get("train", "offset_mode"),
        entity_ids=corpus.entity_ids,
        relation_ids=corpus.relation_ids,
    )
    vectors_path = cfg.get("paths", "vectors")
    source = "random"
    if vectors_path:
        vectors = params_mod.load_vectors(vectors_path)
        params_mod.import_contextual(corpus, vectors, store)
        source = "contextual"
    ckpt = cfg.get("paths", "checkpoint_out") or os.path.join(out, "params.ckpt")
    params_mod.save(store, ckpt)
    print(
        f"initialized {store.n_entities} entities, {store.n_relations} relations "
        f"(dim {store.dim}, {source}) -> {ckpt}"
    )
    return 0


def cmd_train(cfg: RunConfig, out: str) -> int:
    mode = cfg.get("run", "mode")
    tc = cfg.train_config()
    if mode == "text":
        corpus = load_corpus(_require(cfg, "paths", "corpus", "for text-mode training"))
        store = _load_or_init_params(
            cfg, corpus.n_entities, corpus.n_relations,
            corpus.entity_ids, corpus.relation_ids,
        )
        source = train_mod.TextSource(corpus, cfg.get_int("run", "seq_len"))
    elif mode == "kg":
        kg = _load_kg_dir(cfg)
        store = _load_or_init_params(
            cfg, kg.n_entities, kg.n_relations, kg.entity_ids, kg.relation_ids
        )
        rng = substream(cfg.seed, STREAM_QUERY_GEN)
        pool_count = cfg.get_int("train", "complex_pool")
        complex_queries = []
        for qtype in ("2p", "3p", "2i", "3i"):
            for q in evalgen.generate_queries(kg, qtype, pool_count, "train", rng):
                complex_queries.append((q.dag, tuple(sorted(q.answers_train))))
        source = train_mod.KgSource(
            kg.train, complex_queries, kg.n_entities,
            answer_sets=train_mod.KgSource.build_answer_sets(kg.train),
        )
    else:
        raise ValidationError(f"unknown mode {mode!r}")

    trace_path = os.path.join(out, "train_trace.jsonl")
    with open(trace_path, "w", encoding="utf-8") as fh:

        def emit(record: dict) -> None:
            fh.write(json.dumps(record) + "\n")

        store, trace = train_mod.train(source, store, tc, callback=emit)
    ckpt = cfg.get("paths", "checkpoint_out") or os.path.join(out, "params.ckpt")
    params_mod.save(store, ckpt)
    last = trace[-1]["loss"] if trace else float("nan")
    print(f"trained {tc.steps} steps (mode {mode}); final loss {last:.6f} -> {ckpt}")
    return 0


def cmd_gradcheck(cfg: RunConfig, out: str) -> int:
    ckpt = cfg.get("paths", "checkpoint")
    gc_dim = cfg.get_int("gradcheck", "dim")
    if gc_dim > 8:
        raise ValidationError(
            f"gradient checking is restricted to dim <= 8, got {gc_dim}"
        )
    if ckpt:
        store = params_mod.load(ckpt)
        if store.dim > 8:
            raise ValidationError(
                f"gradient checking is restricted to dim <= 8, got checkpoint dim {store.dim}"
            )
    else:
        store = params_mod.init_random(
            gc_dim,
            cfg.get_int("gradcheck", "entities"),
            cfg.get_int("gradcheck", "relations"),
            cfg.seed,
            offset_mode=cfg.get("train", "offset_mode"),
        )
    trials = cfg.get_int("gradcheck", "trials")
    err = train_mod.grad_check(store, trials, cfg.seed)
    print(f"max relative error {err:.3e} over {trials} trials")
    with open(os.path.join(out, "gradcheck.json"), "w", encoding="utf-8") as fh:
        json.dump({"trials": trials, "max_relative_error": err}, fh)
        fh.write("\n")
    return 0 if err <= 1e-4 else 2


def _eval_types(cfg: RunConfig) -> list[str]:
    types = [t.strip() for t in cfg.get("eval", "types").split(",") if t.strip()]
    if not types:
        raise ValidationError("no query types requested")
    for t in types:
        if t not in evalgen.EVAL_QUERY_TYPES:
            raise ValidationError(f"unknown query type {t!r}")
    return types


def cmd_gen_queries(cfg: RunConfig, out: str) -> int:
    kg = _load_kg_dir(cfg)
    rng = substream(cfg.seed, STREAM_QUERY_GEN)
    split = cfg.get("eval", "split")
    count = cfg.get_int("eval", "count")
    for qtype in _eval_types(cfg):
        queries = evalgen.generate_queries(kg, qtype, count, split, rng)
        path = os.path.join(out, f"queries_{qtype}.jsonl")
        evalgen.save_queries(queries, kg, path)
        print(f"{qtype}: {len(queries)} queries -> {path}")
    return 0


def cmd_eval(cfg: RunConfig, out: str) -> int:
    kg = _load_kg_dir(cfg)
    ckpt = _require(cfg, "paths", "checkpoint", "to score queries")
    store = params_mod.load(ckpt)
    scorer = cfg.get("eval", "scorer")
    raw = cfg.get_bool("eval", "raw")
    alpha = cfg.get_float("train", "alpha")
    norm = cfg.get("train", "norm")

    queries_path = cfg.get("paths", "queries")
    batches: list[tuple[str, list[evalgen.GeneratedQuery]]] = []
    if queries_path:
        loaded = evalgen.load_queries(queries_path, kg)
        by_type: dict[str, list[evalgen.GeneratedQuery]] = {}
        for q in loaded:
            by_type.setdefault(q.qtype, []).append(q)
        batches = sorted(by_type.items())
    else:
        rng = substream(cfg.seed, STREAM_QUERY_GEN)
        split = cfg.get("eval", "split")
        count = cfg.get_int("eval", "count")
        for qtype in _eval_types(cfg):
            batches.append((qtype, evalgen.generate_queries(kg, qtype, count, split, rng)))

    header = f"{'type':<6}{'scorer':<10}{'H@1':>8}{'H@3':>8}{'H@10':>8}{'MRR':>8}{'n':>7}"
    print(header)
    with open(os.path.join(out, "metrics.jsonl"), "w", encoding="utf-8") as fh:
        for qtype, queries in batches:
            report = evalgen.metrics_report(queries, store, scorer, alpha, norm, raw)
            fh.write(json.dumps(report) + "\n")
            print(
                f"{qtype:<6}{scorer:<10}"
                f"{report['H@1']:>8.4f}{report['H@3']:>8.4f}{report['H@10']:>8.4f}"
                f"{report['MRR']:>8.4f}{report['n_queries']:>7d}"
            )
    return 0


COMMANDS = {
    "mine": cmd_mine,
    "init-embeddings": cmd_init_embeddings,
    "train": cmd_train,
    "gradcheck": cmd_gradcheck,
    "gen-queries": cmd_gen_queries,
    "eval": cmd_eval,
}


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    """argparse variant whose usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> _Parser:
    parser = _Parser(prog="srbox", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="INI configuration file")
        p.add_argument("--seed", type=int, help="run seed (overrides config)")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("mine", help="extract knowledge structures from a corpus")
    common(p)
    p.add_argument("--corpus", help="corpus JSONL path")
    p.add_argument("--seq-len", dest="seq_len", type=int, help="sequence window length")

    p = sub.add_parser("init-embeddings", help="build an initial checkpoint")
    common(p)
    p.add_argument("--corpus", help="corpus JSONL path")
    p.add_argument("--vectors", help="contextual vectors file (omit for random init)")
    p.add_argument("--dim", type=int, help="embedding dimension")
    p.add_argument("--checkpoint-out", dest="checkpoint_out", help="checkpoint to write")

    p = sub.add_parser("train", help="run the training loop")
    common(p)
    p.add_argument("--mode", choices=("text", "kg"), help="training source kind")
    p.add_argument("--corpus", help="corpus JSONL path (text mode)")
    p.add_argument("--kg", help="directory with train/valid/test TSV files (kg mode)")
    p.add_argument("--checkpoint", help="checkpoint to start from")
    p.add_argument("--checkpoint-out", dest="checkpoint_out", help="checkpoint to write")
    p.add_argument("--dim", type=int, help="embedding dimension for fresh params")
    p.add_argument("--steps", type=int, help="optimization steps")
    p.add_argument("--lr", type=float, help="peak learning rate")
    p.add_argument("--batch-size", dest="batch_size", type=int, help="examples per step")
    p.add_argument("--k-negatives", dest="k_negatives", type=int, help="negatives per query")
    p.add_argument("--seq-len", dest="seq_len", type=int, help="sequence window length")
    p.add_argument("--offset-mode", dest="offset_mode", choices=("shared", "per_relation"))
    p.add_argument(
        "--negative-pool", dest="negative_pool", choices=("same_sequence", "global")
    )
    p.add_argument(
        "--complex-pool", dest="complex_pool", type=int,
        help="complex training queries to pre-generate per shape (kg mode)",
    )

    p = sub.add_parser("gradcheck", help="finite-difference check of the gradients")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint to check (default: small random store)")
    p.add_argument("--trials", type=int, help="number of random examples")
    p.add_argument("--gc-dim", dest="gc_dim", type=int, help="dimension of the random store")
    p.add_argument("--gc-entities", dest="gc_entities", type=int)
    p.add_argument("--gc-relations", dest="gc_relations", type=int)

    p = sub.add_parser("gen-queries", help="sample structured queries from a KG")
    common(p)
    p.add_argument("--kg", help="directory with train/valid/test TSV files")
    p.add_argument("--types", help="comma-separated query types")
    p.add_argument("--count", type=int, help="queries per type")
    p.add_argument("--split", choices=("train", "valid", "test"), help="seed split")

    p = sub.add_parser("eval", help="rank hard answers and report H@k / MRR")
    common(p)
    p.add_argument("--kg", help="directory with train/valid/test TSV files")
    p.add_argument("--checkpoint", help="trained checkpoint")
    p.add_argument("--queries", help="pre-generated query file (else sampled fresh)")
    p.add_argument("--types", help="comma-separated query types")
    p.add_argument("--count", type=int, help="queries per type")
    p.add_argument("--split", choices=("train", "valid", "test"), help="seed split")
    p.add_argument("--scorer", choices=("box", "ptranse"), help="ranking scorer")
    p.add_argument(
        "--raw", action="store_const", const="true",
        help="rank against all entities instead of the filtered pool",
    )

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = apply_overrides(load_config(args.config), args)
        out = _prepare_out(cfg, args.command, argv)
        return COMMANDS[args.command](cfg, out)
    except ValidationError as exc:  # includes ParseError
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # I/O and other runtime faults
        print(f"error: {exc}", file=sys.stderr)
        return 3


def entry() -> int:
    return main()


if __name__ == "__main__":
    sys.exit(main())
