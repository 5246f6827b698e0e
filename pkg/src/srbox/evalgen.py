"""Complex-query generation over a KG, answer oracles, and ranking metrics.

Nine query shapes are supported: chains (1p, 2p, 3p), intersections (2i,
3i), intersection-then-projection (ip), chain-joined-intersection (pi), and
unions (2u, up). Training queries may use only the first five shapes; all
nine are available for evaluation.

Queries are generated by walking outward from a seed edge of the requested
split: evaluation queries walk the full graph so every query touches at
least one held-out edge, training queries walk the training graph only.
Candidates whose hard-answer set (answers over the full graph minus answers
over the training graph) is empty are rejected and redrawn; a retry budget
caps the search and a short warning reports a partial result.

Ranking follows the filtered convention: a hard answer competes only
against entities that are not known answers, ties count half (average
rank). A raw mode that filters nothing but the ranked entity itself is
available. Metrics are hits@k and mean reciprocal rank.

The grid KG builder makes a deterministic synthetic benchmark: entities are
cells of a rectangular grid and every relation is a fixed set of one or two
coordinate displacements, so all relations are exactly representable by
translations and learnability is a property of the trainer, not luck.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from srbox import boxalg
from srbox.errors import ParseError, ValidationError
from srbox.rng import substream
from srbox.structures import (
    Edge,
    NodeKind,
    QueryDag,
    chain_dag,
    intersection_dag,
    topological_order,
    validate_dag,
)

TRAIN_QUERY_TYPES = ("1p", "2p", "3p", "2i", "3i")
EVAL_QUERY_TYPES = TRAIN_QUERY_TYPES + ("ip", "pi", "2u", "up")
SPLITS = ("train", "valid", "test")


@dataclass
class KnowledgeGraph:
    entity_ids: list[str]
    relation_ids: list[str]
    train: list[tuple[int, int, int]]
    valid: list[tuple[int, int, int]]
    test: list[tuple[int, int, int]]
    entity_index: dict[str, int] = field(default_factory=dict)
    relation_index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.entity_index:
            self.entity_index = {e: i for i, e in enumerate(self.entity_ids)}
        if not self.relation_index:
            self.relation_index = {r: i for i, r in enumerate(self.relation_ids)}

    @property
    def n_entities(self) -> int:
        return len(self.entity_ids)

    @property
    def n_relations(self) -> int:
        return len(self.relation_ids)

    def edges(self, split: str) -> list[tuple[int, int, int]]:
        if split not in SPLITS:
            raise ValidationError(f"unknown split {split!r}")
        return getattr(self, split)

    def all_edges(self) -> list[tuple[int, int, int]]:
        return self.train + self.valid + self.test

    def validate(self) -> None:
        train_set = set(self.train)
        for split in ("valid", "test"):
            overlap = train_set & set(getattr(self, split))
            if overlap:
                raise ValidationError(
                    f"{split} split shares {len(overlap)} triplet(s) with train"
                )
        n_e, n_r = self.n_entities, self.n_relations
        for split in SPLITS:
            for h, r, t in getattr(self, split):
                if not (0 <= h < n_e and 0 <= t < n_e and 0 <= r < n_r):
                    raise ValidationError(f"triplet ({h}, {r}, {t}) out of id range")


def load_kg(train_path: str, valid_path: str, test_path: str) -> KnowledgeGraph:
    """Read three head<TAB>relation<TAB>tail files into one dense-id graph."""
    raw: dict[str, list[tuple[str, str, str]]] = {}
    for split, path in (("train", train_path), ("valid", valid_path), ("test", test_path)):
        rows = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise ParseError(
                        f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}"
                    )
                rows.append(tuple(parts))
        raw[split] = rows
    entities = sorted({h for rows in raw.values() for h, _, _ in rows}
                      | {t for rows in raw.values() for _, _, t in rows})
    relations = sorted({r for rows in raw.values() for _, r, _ in rows})
    e_idx = {e: i for i, e in enumerate(entities)}
    r_idx = {r: i for i, r in enumerate(relations)}
    splits = {}
    for split, rows in raw.items():
        seen = set()
        ids = []
        for h, r, t in rows:
            key = (e_idx[h], r_idx[r], e_idx[t])
            if key not in seen:
                seen.add(key)
                ids.append(key)
        splits[split] = ids
    kg = KnowledgeGraph(entities, relations, splits["train"], splits["valid"], splits["test"])
    kg.validate()
    return kg


def save_kg(kg: KnowledgeGraph, out_dir: str) -> dict[str, str]:
    """Write train.tsv / valid.tsv / test.tsv; returns the path map."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for split in SPLITS:
        path = os.path.join(out_dir, f"{split}.tsv")
        with open(path, "w", encoding="utf-8") as fh:
            for h, r, t in kg.edges(split):
                fh.write(f"{kg.entity_ids[h]}\t{kg.relation_ids[r]}\t{kg.entity_ids[t]}\n")
        paths[split] = path
    return paths


# ---------------------------------------------------------------------------
# edge index and the set-semantics oracle


class EdgeIndex:
    """Adjacency maps for fast forward/inverse traversal, all sorted."""

    def __init__(self, edges) -> None:
        fwd: dict[tuple[int, int], set[int]] = {}
        rev: dict[tuple[int, int], set[int]] = {}
        out_adj: dict[int, set[tuple[int, int]]] = {}
        in_adj: dict[int, set[tuple[int, int]]] = {}
        for h, r, t in edges:
            fwd.setdefault((h, r), set()).add(t)
            rev.setdefault((t, r), set()).add(h)
            out_adj.setdefault(h, set()).add((r, t))
            in_adj.setdefault(t, set()).add((h, r))
        self.fwd = {k: tuple(sorted(v)) for k, v in fwd.items()}
        self.rev = {k: tuple(sorted(v)) for k, v in rev.items()}
        self.out_adj = {k: tuple(sorted(v)) for k, v in out_adj.items()}
        self.in_adj = {k: tuple(sorted(v)) for k, v in in_adj.items()}

    def map_forward(self, sources: set[int], rel: int) -> set[int]:
        out: set[int] = set()
        for e in sources:
            out.update(self.fwd.get((e, rel), ()))
        return out

    def map_inverse(self, sources: set[int], rel: int) -> set[int]:
        out: set[int] = set()
        for e in sources:
            out.update(self.rev.get((e, rel), ()))
        return out


def _answers(dag: QueryDag, index: EdgeIndex) -> set[int]:
    order = topological_order(dag)
    anchors = dag.anchor_entities()
    kinds = dag.node_kinds()
    incoming = dag.incoming()
    values: dict[int, set[int]] = {}
    for n in order:
        if n in anchors:
            values[n] = {anchors[n]}
            continue
        pulled = []
        for e in incoming[n]:
            src = values[e.src]
            pulled.append(
                index.map_inverse(src, e.relation) if e.inverse
                else index.map_forward(src, e.relation)
            )
        kind = kinds[n]
        if kind is NodeKind.PROJECTION:
            values[n] = pulled[0]
        elif kind is NodeKind.INTERSECTION:
            acc = pulled[0]
            for s in pulled[1:]:
                acc = acc & s
            values[n] = acc
        else:
            acc = set()
            for s in pulled:
                acc |= s
            values[n] = acc
    return values[dag.answer_node]


def brute_force_answers(dag: QueryDag, edges) -> set[int]:
    """Exact answer set of a query DAG over an edge collection, by plain set
    semantics (anchor singletons, relational image per edge, set
    intersection/union at operator nodes)."""
    validate_dag(dag)
    index = edges if isinstance(edges, EdgeIndex) else EdgeIndex(edges)
    return _answers(dag, index)


# ---------------------------------------------------------------------------
# query generation


@dataclass(frozen=True)
class GeneratedQuery:
    qtype: str
    dag: QueryDag
    answers_train: frozenset[int]
    answers_full: frozenset[int]

    @property
    def hard_answers(self) -> frozenset[int]:
        return self.answers_full - self.answers_train

    def validate(self) -> None:
        if not self.answers_full:
            raise ValidationError("query has no answers over the full graph")
        if not self.answers_full >= self.answers_train:
            raise ValidationError("train answers are not a subset of full answers")


def _pick(options, rng: np.random.Generator):
    return options[int(rng.integers(len(options)))]


def _walk_dag(
    qtype: str,
    seed_edge: tuple[int, int, int],
    index: EdgeIndex,
    rng: np.random.Generator,
) -> QueryDag | None:
    """Grow one DAG of the requested shape around a seed edge; None = dead end."""
    h, r, t = seed_edge
    if qtype == "1p":
        return chain_dag(h, [(r, False)])
    if qtype in ("2p", "3p"):
        hops = [(r, False)]
        node = t
        for _ in range(1 if qtype == "2p" else 2):
            nxt = index.out_adj.get(node)
            if not nxt:
                return None
            r2, node = _pick(nxt, rng)
            hops.append((r2, False))
        return chain_dag(h, hops)
    if qtype in ("2i", "3i"):
        others = [p for p in index.in_adj.get(t, ()) if p != (h, r)]
        need = 1 if qtype == "2i" else 2
        if len(others) < need:
            return None
        if need == 1:
            extra = [_pick(others, rng)]
        else:
            picks = rng.choice(len(others), size=2, replace=False)
            extra = [others[i] for i in picks]
        branches = [(h, r, False)] + [(h2, r2, False) for h2, r2 in extra]
        return intersection_dag(branches)
    if qtype == "ip":
        others = [p for p in index.in_adj.get(t, ()) if p != (h, r)]
        hops = index.out_adj.get(t)
        if not others or not hops:
            return None
        h2, r2 = _pick(others, rng)
        r3, _ = _pick(hops, rng)
        return QueryDag(
            anchors=((0, h), (1, h2)),
            edges=(
                Edge(0, 2, r, False),
                Edge(1, 2, r2, False),
                Edge(2, 3, r3, False),
            ),
            nodes=((2, NodeKind.INTERSECTION), (3, NodeKind.PROJECTION)),
            answer_node=3,
        )
    if qtype == "pi":
        hops = index.out_adj.get(t)
        if not hops:
            return None
        r2, t2 = _pick(hops, rng)
        others = [p for p in index.in_adj.get(t2, ()) if p != (t, r2)]
        if not others:
            return None
        h2, r3 = _pick(others, rng)
        return QueryDag(
            anchors=((0, h), (1, h2)),
            edges=(
                Edge(0, 2, r, False),
                Edge(2, 3, r2, False),
                Edge(1, 3, r3, False),
            ),
            nodes=((2, NodeKind.PROJECTION), (3, NodeKind.INTERSECTION)),
            answer_node=3,
        )
    if qtype == "2u":
        others = [p for p in index.in_adj.get(t, ()) if p != (h, r)]
        if not others:
            return None
        h2, r2 = _pick(others, rng)
        return QueryDag(
            anchors=((0, h), (1, h2)),
            edges=(Edge(0, 2, r, False), Edge(1, 2, r2, False)),
            nodes=((2, NodeKind.UNION),),
            answer_node=2,
        )
    if qtype == "up":
        others = [p for p in index.in_adj.get(t, ()) if p != (h, r)]
        hops = index.out_adj.get(t)
        if not others or not hops:
            return None
        h2, r2 = _pick(others, rng)
        r3, _ = _pick(hops, rng)
        return QueryDag(
            anchors=((0, h), (1, h2)),
            edges=(
                Edge(0, 2, r, False),
                Edge(1, 2, r2, False),
                Edge(2, 3, r3, False),
            ),
            nodes=((2, NodeKind.UNION), (3, NodeKind.PROJECTION)),
            answer_node=3,
        )
    raise ValidationError(f"unknown query type {qtype!r}")


def generate_queries(
    kg: KnowledgeGraph,
    qtype: str,
    count: int,
    split: str,
    rng: np.random.Generator,
    retry_budget: int | None = None,
) -> list[GeneratedQuery]:
    """Sample ``count`` queries of one shape seeded from the given split.

    Train-split queries use only the five training shapes and walk training
    edges. Eval-split queries walk the full graph and must have at least one
    hard answer. Runs out of retries -> partial list plus a warning.
    """
    if split not in SPLITS:
        raise ValidationError(f"unknown split {split!r}")
    allowed = TRAIN_QUERY_TYPES if split == "train" else EVAL_QUERY_TYPES
    if qtype not in allowed:
        raise ValidationError(
            f"query type {qtype!r} is not available for the {split} split"
        )
    if count < 0:
        raise ValidationError(f"count must be >= 0, got {count}")
    seeds = kg.edges(split)
    if not seeds:
        raise ValidationError(f"{split} split has no edges to seed from")
    train_index = EdgeIndex(kg.train)
    walk_index = train_index if split == "train" else EdgeIndex(kg.all_edges())
    full_index = walk_index if split != "train" else EdgeIndex(kg.all_edges())

    budget = retry_budget if retry_budget is not None else max(100, 30 * count)
    out: list[GeneratedQuery] = []
    attempts = 0
    while len(out) < count and attempts < budget:
        attempts += 1
        seed_edge = _pick(seeds, rng)
        dag = _walk_dag(qtype, seed_edge, walk_index, rng)
        if dag is None:
            continue
        answers_train = frozenset(_answers(dag, train_index))
        answers_full = frozenset(_answers(dag, full_index))
        if not answers_full:
            continue
        if split == "train":
            if not answers_train:
                continue
        elif not (answers_full - answers_train):
            continue
        out.append(GeneratedQuery(qtype, dag, answers_train, answers_full))
    if len(out) < count:
        warnings.warn(
            f"generated {len(out)}/{count} {qtype} queries for split {split} "
            f"within the retry budget of {budget}",
            stacklevel=2,
        )
    return out


# ---------------------------------------------------------------------------
# ranking


def dag_to_path(dag: QueryDag) -> tuple[int, list[tuple[int, bool]]]:
    """Anchor and relation hops of a pure chain; anything else is rejected."""
    kinds = dag.node_kinds()
    if len(dag.anchors) != 1 or any(k is not NodeKind.PROJECTION for k in kinds.values()):
        raise ValidationError("unsupported query shape for the path scorer (chains only)")
    anchor_node, anchor = dag.anchors[0]
    by_src = {e.src: e for e in dag.edges}
    if len(by_src) != len(dag.edges):
        raise ValidationError("unsupported query shape for the path scorer (chains only)")
    path = []
    node = anchor_node
    while node in by_src:
        e = by_src[node]
        path.append((e.relation, e.inverse))
        node = e.dst
    if node != dag.answer_node or len(path) != len(dag.edges):
        raise ValidationError("unsupported query shape for the path scorer (chains only)")
    return anchor, path


def query_distances(
    query: GeneratedQuery,
    params,
    scorer: str = "box",
    alpha: float = 0.02,
    norm: str = "l1",
) -> np.ndarray:
    """Per-entity distance vector under the chosen scorer (lower is better)."""
    if scorer == "box":
        boxes = boxalg.execute_query(query.dag, params)
        per_box = np.stack(
            [boxalg.distance_batch(params.entity_centers, b, alpha, norm) for b in boxes]
        )
        return per_box.min(axis=0)
    if scorer == "ptranse":
        anchor, path = dag_to_path(query.dag)
        vec = params.entity_centers[anchor].copy()
        for rel, inverse in path:
            row = params.relation_centers[params.center_row(rel, False)]
            vec = vec - row if inverse else vec + row
        return np.abs(params.entity_centers - vec).sum(axis=1)
    raise ValidationError(f"unknown scorer {scorer!r}")


def ranks_from_distances(
    dist: np.ndarray, hard: frozenset[int], answers_full: frozenset[int], raw: bool = False
) -> dict[int, float]:
    """Rank of each hard answer: 1 + competitors strictly closer + half the
    competitors at the same distance. Filtered mode drops every known answer
    from the competitor pool; raw mode drops only the ranked entity."""
    ranks: dict[int, float] = {}
    n = dist.shape[0]
    if raw:
        mask = np.ones(n, dtype=bool)
    else:
        mask = np.ones(n, dtype=bool)
        mask[sorted(answers_full)] = False
    for a in sorted(hard):
        da = dist[a]
        m = mask.copy()
        m[a] = False
        better = int(np.count_nonzero(dist[m] < da))
        tied = int(np.count_nonzero(dist[m] == da))
        ranks[a] = 1.0 + better + 0.5 * tied
    return ranks


def rank_answers(
    query: GeneratedQuery,
    params,
    scorer: str = "box",
    alpha: float = 0.02,
    norm: str = "l1",
    raw: bool = False,
) -> dict[int, float]:
    """Filtered (or raw) ranks of the query's hard answers."""
    dist = query_distances(query, params, scorer, alpha, norm)
    return ranks_from_distances(dist, query.hard_answers, query.answers_full, raw)


def hits_at_k(ranks, k: int) -> float:
    ranks = list(ranks)
    if not ranks:
        raise ValidationError("no ranks to aggregate")
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    return sum(1 for r in ranks if r <= k) / len(ranks)


def mrr(ranks) -> float:
    ranks = list(ranks)
    if not ranks:
        raise ValidationError("no ranks to aggregate")
    return sum(1.0 / r for r in ranks) / len(ranks)


def metrics_report(
    queries: list[GeneratedQuery],
    params,
    scorer: str = "box",
    alpha: float = 0.02,
    norm: str = "l1",
    raw: bool = False,
) -> dict:
    """Aggregate H@1/3/10 and MRR over every hard answer of one query batch."""
    if not queries:
        raise ValidationError("no queries to evaluate")
    qtypes = {q.qtype for q in queries}
    all_ranks: list[float] = []
    for q in queries:
        all_ranks.extend(rank_answers(q, params, scorer, alpha, norm, raw).values())
    return {
        "scorer": scorer,
        "query_type": qtypes.pop() if len(qtypes) == 1 else "mixed",
        "H@1": hits_at_k(all_ranks, 1),
        "H@3": hits_at_k(all_ranks, 3),
        "H@10": hits_at_k(all_ranks, 10),
        "MRR": mrr(all_ranks),
        "n_queries": len(queries),
    }


# ---------------------------------------------------------------------------
# query (de)serialization


def query_record(q: GeneratedQuery, kg: KnowledgeGraph) -> dict:
    return {
        "type": q.qtype,
        "dag": {
            "anchors": [[n, kg.entity_ids[e]] for n, e in q.dag.anchors],
            "edges": [
                [e.src, e.dst, kg.relation_ids[e.relation], e.inverse] for e in q.dag.edges
            ],
            "nodes": [[n, kind.value] for n, kind in q.dag.nodes],
            "answer_node": q.dag.answer_node,
        },
        "answers_train": sorted(kg.entity_ids[a] for a in q.answers_train),
        "answers_full": sorted(kg.entity_ids[a] for a in q.answers_full),
    }


def record_to_query(rec: dict, kg: KnowledgeGraph) -> GeneratedQuery:
    try:
        dag = QueryDag(
            anchors=tuple((int(n), kg.entity_index[e]) for n, e in rec["dag"]["anchors"]),
            edges=tuple(
                Edge(int(s), int(d), kg.relation_index[r], bool(i))
                for s, d, r, i in rec["dag"]["edges"]
            ),
            nodes=tuple((int(n), NodeKind(k)) for n, k in rec["dag"]["nodes"]),
            answer_node=int(rec["dag"]["answer_node"]),
        )
        q = GeneratedQuery(
            rec["type"],
            dag,
            frozenset(kg.entity_index[e] for e in rec["answers_train"]),
            frozenset(kg.entity_index[e] for e in rec["answers_full"]),
        )
    except (KeyError, TypeError) as exc:
        raise ParseError(f"bad query record: {exc}") from exc
    q.validate()
    return q


def save_queries(queries: list[GeneratedQuery], kg: KnowledgeGraph, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in queries:
            fh.write(json.dumps(query_record(q, kg)) + "\n")


def load_queries(path: str, kg: KnowledgeGraph) -> list[GeneratedQuery]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            out.append(record_to_query(rec, kg))
    return out


# ---------------------------------------------------------------------------
# synthetic grid benchmark


GRID_RELATIONS: tuple[tuple[str, tuple[tuple[int, int], ...]], ...] = (
    ("east", ((1, 0),)),
    ("north", ((0, 1),)),
    ("west", ((-1, 0),)),
    ("south", ((0, -1),)),
    ("east_span", ((1, 0), (2, 0))),
    ("north_span", ((0, 1), (0, 2))),
    ("east_diag", ((1, 1), (1, -1))),
    ("west_mix", ((-1, -1), (-2, 0))),
)


def build_grid_kg(
    width: int = 20,
    height: int = 10,
    seed: int = 0,
    fractions: tuple[float, float, float] = (0.85, 0.05, 0.10),
) -> KnowledgeGraph:
    """Deterministic translation-structured KG on a width x height grid.

    Every relation moves a cell by one of its displacement vectors (edges
    leaving the grid are dropped), so each relation is representable as a
    translation with a bounded spread, learnable by construction. Edges are
    shuffled with the seed and split by the given fractions.
    """
    if width < 3 or height < 3:
        raise ValidationError("grid must be at least 3x3")
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) <= 0:
        raise ValidationError("fractions must be three positive numbers summing to 1")
    entity_ids = [f"c{x:02d}_{y:02d}" for x in range(width) for y in range(height)]
    e_idx = {e: i for i, e in enumerate(entity_ids)}
    relation_ids = sorted(name for name, _ in GRID_RELATIONS)
    r_idx = {r: i for i, r in enumerate(relation_ids)}
    edges = []
    for name, moves in GRID_RELATIONS:
        rid = r_idx[name]
        for x in range(width):
            for y in range(height):
                for dx, dy in moves:
                    nx, ny = x + dx, y + dy
                    if 0 <= nx < width and 0 <= ny < height:
                        edges.append(
                            (e_idx[f"c{x:02d}_{y:02d}"], rid, e_idx[f"c{nx:02d}_{ny:02d}"])
                        )
    edges.sort()
    rng = substream(seed, "kg-split")
    order = rng.permutation(len(edges))
    shuffled = [edges[i] for i in order]
    n_valid = int(fractions[1] * len(edges))
    n_test = int(fractions[2] * len(edges))
    n_train = len(edges) - n_valid - n_test
    kg = KnowledgeGraph(
        entity_ids,
        relation_ids,
        shuffled[:n_train],
        shuffled[n_train : n_train + n_valid],
        shuffled[n_train + n_valid :],
    )
    kg.validate()
    return kg
