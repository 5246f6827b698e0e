"""Box-embedding kernel: representation, operators, distance, DAG execution.

A box is an axis-aligned hyper-rectangle given by a center vector and a
nonnegative offset vector; it covers { e : center - offset <= e <= center +
offset } elementwise. Entities are zero-offset boxes. Relation projection
translates and dilates: project(b, r) = (Cen(b) + Cen(r), Off(b) + Off(r)).

Intersection combines n boxes with a dimension-wise attention over centers
and a shrunken offset:

    center = sum_i a_i * Cen(b_i),  a_i = softmax_i(attMLP(Cen(b_i)))
    offset = min_i(Off(b_i)) * sigmoid(outerMLP(mean_i innerMLP([Cen;Off])))

where all three MLPs are two-layer ReLU networks of hidden width d and the
softmax is taken per dimension across the n boxes.

The entity-to-box distance has an outer part (L1 gap to the nearest box
face, zero inside the box) and an inner part (L1 gap from the clamped point
to the center), combined as d_out + alpha * d_in. The norm is configurable
to L2.

Every operation here has a matching hand-written backward; forward variants
with ``_with_cache`` record exactly what the backward needs, plus the branch
indicators (ReLU masks, hinge sides, argmins) that let a gradient checker
recognize when a finite-difference probe crosses a non-smooth point.

Query DAGs are executed by topological evaluation. Union nodes branch the
evaluation into disjuncts (one output box per disjunct; union-free DAGs
yield exactly one box); scoring takes the minimum distance over disjuncts.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np

from srbox.errors import ValidationError
from srbox.structures import NodeKind, QueryDag, topological_order


@dataclass(frozen=True)
class Box:
    center: np.ndarray
    offset: np.ndarray

    @property
    def bmax(self) -> np.ndarray:
        return self.center + self.offset

    @property
    def bmin(self) -> np.ndarray:
        return self.center - self.offset

    @property
    def dim(self) -> int:
        return self.center.shape[0]


@dataclass
class IntersectionNet:
    """Weights of the attention MLP and the two DeepSets MLPs (inner 2d->d->d,
    outer d->d->d, attention d->d->d)."""

    att_w1: np.ndarray
    att_b1: np.ndarray
    att_w2: np.ndarray
    att_b2: np.ndarray
    inner_w1: np.ndarray
    inner_b1: np.ndarray
    inner_w2: np.ndarray
    inner_b2: np.ndarray
    outer_w1: np.ndarray
    outer_b1: np.ndarray
    outer_w2: np.ndarray
    outer_b2: np.ndarray

    def copy(self) -> "IntersectionNet":
        return IntersectionNet(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def validate(self, dim: int) -> None:
        expect = {
            "att_w1": (dim, dim), "att_b1": (dim,), "att_w2": (dim, dim), "att_b2": (dim,),
            "inner_w1": (dim, 2 * dim), "inner_b1": (dim,),
            "inner_w2": (dim, dim), "inner_b2": (dim,),
            "outer_w1": (dim, dim), "outer_b1": (dim,),
            "outer_w2": (dim, dim), "outer_b2": (dim,),
        }
        for name, shape in expect.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValidationError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contains non-finite entries")


NET_FIELDS = tuple(f.name for f in fields(IntersectionNet))


def net_random(dim: int, rng: np.random.Generator) -> IntersectionNet:
    """Fan-in-scaled uniform init for all three MLPs."""

    def layer(out_d: int, in_d: int) -> tuple[np.ndarray, np.ndarray]:
        bound = 1.0 / np.sqrt(in_d)
        w = rng.uniform(-bound, bound, size=(out_d, in_d))
        b = rng.uniform(-bound, bound, size=out_d)
        return w, b

    att_w1, att_b1 = layer(dim, dim)
    att_w2, att_b2 = layer(dim, dim)
    inner_w1, inner_b1 = layer(dim, 2 * dim)
    inner_w2, inner_b2 = layer(dim, dim)
    outer_w1, outer_b1 = layer(dim, dim)
    outer_w2, outer_b2 = layer(dim, dim)
    return IntersectionNet(
        att_w1, att_b1, att_w2, att_b2,
        inner_w1, inner_b1, inner_w2, inner_b2,
        outer_w1, outer_b1, outer_w2, outer_b2,
    )


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# elementary operators


def entity_box(center: np.ndarray) -> Box:
    """An entity as the degenerate box at its own center."""
    center = np.asarray(center, dtype=np.float64)
    if not np.all(np.isfinite(center)):
        raise ValidationError("entity center must be finite")
    return Box(center, np.zeros_like(center))


def project(b: Box, rel: tuple[np.ndarray, np.ndarray]) -> Box:
    """Translate the center and dilate the offset by the relation's parameters."""
    r_center, r_offset = rel
    if r_center.shape != b.center.shape or r_offset.shape != b.offset.shape:
        raise ValidationError(
            f"relation shape {r_center.shape}/{r_offset.shape} does not match box dim {b.dim}"
        )
    return Box(b.center + r_center, b.offset + r_offset)


class _MlpCache(NamedTuple):
    x: np.ndarray
    mask: np.ndarray
    h: np.ndarray
    w1: np.ndarray
    w2: np.ndarray


def _mlp2(x: np.ndarray, w1: np.ndarray, b1: np.ndarray, w2: np.ndarray, b2: np.ndarray):
    h_pre = x @ w1.T + b1
    mask = h_pre > 0
    h = np.where(mask, h_pre, 0.0)
    y = h @ w2.T + b2
    return y, _MlpCache(x, mask, h, w1, w2)


def _mlp2_backward(cache: _MlpCache, dy: np.ndarray):
    dw2 = dy.T @ cache.h
    db2 = dy.sum(axis=0)
    dh = dy @ cache.w2
    dh_pre = np.where(cache.mask, dh, 0.0)
    dw1 = dh_pre.T @ cache.x
    db1 = dh_pre.sum(axis=0)
    dx = dh_pre @ cache.w1
    return dx, (dw1, db1, dw2, db2)


class IntersectCache(NamedTuple):
    centers: np.ndarray  # (n, d) input centers
    offsets: np.ndarray  # (n, d) input offsets
    att: np.ndarray  # (n, d) softmax weights
    att_cache: _MlpCache
    inner_cache: _MlpCache
    outer_cache: _MlpCache
    gate: np.ndarray  # (d,)
    min_idx: np.ndarray  # (d,) argmin box per dimension
    min_off: np.ndarray  # (d,)

    def signature(self) -> bytes:
        return b"".join(
            (
                self.att_cache.mask.tobytes(),
                self.inner_cache.mask.tobytes(),
                self.outer_cache.mask.tobytes(),
                self.min_idx.tobytes(),
            )
        )


def intersect_with_cache(boxes: list[Box], net: IntersectionNet) -> tuple[Box, IntersectCache]:
    if not boxes:
        raise ValidationError("intersect requires at least one box")
    d = boxes[0].dim
    if any(b.dim != d for b in boxes):
        raise ValidationError("intersect requires boxes of equal dimension")
    n = len(boxes)
    centers = np.stack([b.center for b in boxes])  # (n, d)
    offsets = np.stack([b.offset for b in boxes])

    logits, att_cache = _mlp2(centers, net.att_w1, net.att_b1, net.att_w2, net.att_b2)
    logits = logits - logits.max(axis=0, keepdims=True)
    expz = np.exp(logits)
    att = expz / expz.sum(axis=0, keepdims=True)  # softmax across boxes, per dim
    center = (att * centers).sum(axis=0)

    pooled_in = np.concatenate([centers, offsets], axis=1)  # (n, 2d)
    inner, inner_cache = _mlp2(pooled_in, net.inner_w1, net.inner_b1, net.inner_w2, net.inner_b2)
    mean_inner = inner.mean(axis=0, keepdims=True)  # (1, d)
    outer, outer_cache = _mlp2(mean_inner, net.outer_w1, net.outer_b1, net.outer_w2, net.outer_b2)
    gate = sigmoid(outer[0])

    min_idx = offsets.argmin(axis=0)  # first argmin on ties
    min_off = offsets[min_idx, np.arange(d)]
    offset = min_off * gate

    cache = IntersectCache(
        centers, offsets, att, att_cache, inner_cache, outer_cache, gate, min_idx, min_off
    )
    return Box(center, offset), cache


def intersect(boxes: list[Box], net: IntersectionNet) -> Box:
    return intersect_with_cache(boxes, net)[0]


def intersect_backward(
    cache: IntersectCache, dcenter: np.ndarray, doffset: np.ndarray
) -> tuple[np.ndarray, np.ndarray, dict[str, np.ndarray]]:
    """Gradients of (dcenter, doffset) w.r.t. input centers/offsets and net weights.

    Returns (d_centers (n, d), d_offsets (n, d), net gradient dict). Min over
    offsets routes to the first argmin on ties; ReLU and sigmoid use the
    usual pointwise derivatives.
    """
    n, d = cache.centers.shape
    att = cache.att

    # center = sum_i att_i * centers_i, att = softmax over axis 0
    datt = dcenter[None, :] * cache.centers
    dcent_in = att * dcenter[None, :]
    s = (att * datt).sum(axis=0, keepdims=True)
    dlogits = att * (datt - s)
    dx_att, att_grads = _mlp2_backward(cache.att_cache, dlogits)
    dcent_in = dcent_in + dx_att

    # offset = min_off * gate
    dmin_off = doffset * cache.gate
    dgate = doffset * cache.min_off
    douter = dgate * cache.gate * (1.0 - cache.gate)
    dmean, outer_grads = _mlp2_backward(cache.outer_cache, douter[None, :])
    dinner = np.repeat(dmean / n, n, axis=0)
    dpooled, inner_grads = _mlp2_backward(cache.inner_cache, dinner)
    dcent_in = dcent_in + dpooled[:, :d]
    doff_in = dpooled[:, d:].copy()
    doff_in[cache.min_idx, np.arange(d)] += dmin_off

    net_grads = {
        "att_w1": att_grads[0], "att_b1": att_grads[1],
        "att_w2": att_grads[2], "att_b2": att_grads[3],
        "inner_w1": inner_grads[0], "inner_b1": inner_grads[1],
        "inner_w2": inner_grads[2], "inner_b2": inner_grads[3],
        "outer_w1": outer_grads[0], "outer_b1": outer_grads[1],
        "outer_w2": outer_grads[2], "outer_b2": outer_grads[3],
    }
    return dcent_in, doff_in, net_grads


# ---------------------------------------------------------------------------
# distance


class Distance(NamedTuple):
    d: float
    d_out: float
    d_in: float


class DistanceCache(NamedTuple):
    entity: np.ndarray
    center: np.ndarray
    offset: np.ndarray
    above: np.ndarray  # e strictly above the top face
    below: np.ndarray  # e strictly below the bottom face
    v_out: np.ndarray  # per-dim outer gap
    u_in: np.ndarray  # center - clamped point
    alpha: float
    norm: str

    def signature(self) -> bytes:
        return b"".join(
            (
                self.above.tobytes(),
                self.below.tobytes(),
                np.sign(self.u_in).tobytes(),
            )
        )


def _norm_and_grad(v: np.ndarray, norm: str) -> tuple[float, np.ndarray]:
    if norm == "l1":
        return float(np.abs(v).sum()), np.sign(v)
    if norm == "l2":
        mag = float(np.sqrt((v * v).sum()))
        if mag == 0.0:
            return 0.0, np.zeros_like(v)
        return mag, v / mag
    raise ValidationError(f"unknown norm {norm!r}")


def distance_with_cache(
    e: np.ndarray, b: Box, alpha: float = 0.02, norm: str = "l1"
) -> tuple[Distance, DistanceCache]:
    if e.shape != b.center.shape:
        raise ValidationError(f"entity shape {e.shape} does not match box dim {b.dim}")
    bmax = b.center + b.offset
    bmin = b.center - b.offset
    above = e > bmax
    below = e < bmin
    v_out = np.maximum(e - bmax, 0.0) + np.maximum(bmin - e, 0.0)
    clamped = np.minimum(bmax, np.maximum(bmin, e))
    u_in = b.center - clamped
    d_out, _ = _norm_and_grad(v_out, norm)
    d_in, _ = _norm_and_grad(u_in, norm)
    dist = Distance(d_out + alpha * d_in, d_out, d_in)
    return dist, DistanceCache(e, b.center, b.offset, above, below, v_out, u_in, alpha, norm)


def distance(e: np.ndarray, b: Box, alpha: float = 0.02, norm: str = "l1") -> Distance:
    """Two-part entity-to-box distance d_out + alpha * d_in."""
    return distance_with_cache(e, b, alpha, norm)[0]


def distance_backward(
    cache: DistanceCache, dd: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (d_entity, d_center, d_offset) of dd * distance.

    Hinge points (entity exactly on a box face, or exactly at the center)
    take the zero subgradient.
    """
    above = cache.above
    below = cache.below
    _, g_out = _norm_and_grad(cache.v_out, cache.norm)
    _, g_in = _norm_and_grad(cache.u_in, cache.norm)

    # outer part: v = max(e - bmax, 0) + max(bmin - e, 0)
    w = dd * g_out
    de = w * (above.astype(np.float64) - below.astype(np.float64))
    dc = -de.copy()
    doff = -w * (above.astype(np.float64) + below.astype(np.float64))

    # inner part: u = center - clamp(e); outside the box the clamp lands on a
    # face, whose center dependence cancels the leading center term
    w_in = dd * cache.alpha * g_in
    inside = ~(above | below)
    de -= w_in * inside
    dc += w_in * inside
    doff -= w_in * above.astype(np.float64)
    doff += w_in * below.astype(np.float64)
    return de, dc, doff


def distance_batch(
    entities: np.ndarray, b: Box, alpha: float = 0.02, norm: str = "l1"
) -> np.ndarray:
    """Distance from every row of ``entities`` (m, d) to one box; returns (m,)."""
    bmax = b.center + b.offset
    bmin = b.center - b.offset
    v_out = np.maximum(entities - bmax, 0.0) + np.maximum(bmin - entities, 0.0)
    clamped = np.minimum(bmax, np.maximum(bmin, entities))
    u_in = b.center - clamped
    if norm == "l1":
        d_out = np.abs(v_out).sum(axis=1)
        d_in = np.abs(u_in).sum(axis=1)
    elif norm == "l2":
        d_out = np.sqrt((v_out * v_out).sum(axis=1))
        d_in = np.sqrt((u_in * u_in).sum(axis=1))
    else:
        raise ValidationError(f"unknown norm {norm!r}")
    return d_out + alpha * d_in


# ---------------------------------------------------------------------------
# query execution


@dataclass
class _NodeTrace:
    node: int
    kind: str  # anchor | projection | intersection | union
    entity: int | None = None
    edges: tuple = ()
    combos: list[tuple[int, ...]] | None = None
    union_sources: list[tuple[int, int]] | None = None
    inter_caches: list[IntersectCache] | None = None
    boxes: list[Box] | None = None


@dataclass
class ExecutionTrace:
    dag: QueryDag
    order: list[int]
    nodes: dict[int, _NodeTrace]

    def answer_boxes(self) -> list[Box]:
        return list(self.nodes[self.dag.answer_node].boxes)

    def signature(self) -> bytes:
        parts = []
        for n in self.order:
            tr = self.nodes[n]
            if tr.inter_caches:
                parts.extend(c.signature() for c in tr.inter_caches)
        return b"".join(parts)


def _relation_params(params, rel: int, inverse: bool) -> tuple[np.ndarray, np.ndarray]:
    crow = params.center_row(rel, inverse)
    orow = params.offset_row(rel, inverse)
    return params.relation_centers[crow], params.relation_offsets[orow]


def execute_with_trace(dag: QueryDag, params) -> ExecutionTrace:
    """Topologically evaluate the DAG; returns the trace holding all node boxes.

    Anchors become zero-offset boxes; each edge applies its relation's
    projection (inverse edges use the inverse parameter rows); intersection
    nodes intersect, union nodes branch into disjuncts (one output box per
    disjunct, cartesian across intersected unions).
    """
    order = topological_order(dag)
    anchor_ent = dag.anchor_entities()
    kinds = dag.node_kinds()
    incoming = dag.incoming()
    n_entities = params.entity_centers.shape[0]
    n_relations = len(params.relation_ids)

    traces: dict[int, _NodeTrace] = {}
    for n in order:
        if n in anchor_ent:
            ent = anchor_ent[n]
            if not 0 <= ent < n_entities:
                raise ValidationError(f"anchor entity id {ent} out of range")
            box = entity_box(params.entity_centers[ent])
            traces[n] = _NodeTrace(n, "anchor", entity=ent, boxes=[box])
            continue
        edges = tuple(incoming.get(n, ()))
        if not edges:
            raise ValidationError(f"non-anchor node {n} has no incoming edges")
        for e in edges:
            if not 0 <= e.relation < n_relations:
                raise ValidationError(f"relation id {e.relation} out of range")
        projected: list[list[Box]] = []
        for e in edges:
            rel = _relation_params(params, e.relation, e.inverse)
            projected.append([project(b, rel) for b in traces[e.src].boxes])
        kind = kinds[n]
        if kind is NodeKind.PROJECTION:
            if len(edges) != 1:
                raise ValidationError(f"projection node {n} has {len(edges)} incoming edges")
            traces[n] = _NodeTrace(n, "projection", edges=edges, boxes=projected[0])
        elif kind is NodeKind.UNION:
            sources = []
            boxes = []
            for k, branch in enumerate(projected):
                for j, box in enumerate(branch):
                    sources.append((k, j))
                    boxes.append(box)
            traces[n] = _NodeTrace(n, "union", edges=edges, union_sources=sources, boxes=boxes)
        elif kind is NodeKind.INTERSECTION:
            combos = list(itertools.product(*(range(len(br)) for br in projected)))
            boxes = []
            caches = []
            for combo in combos:
                inputs = [projected[k][j] for k, j in enumerate(combo)]
                box, cache = intersect_with_cache(inputs, params.net)
                boxes.append(box)
                caches.append(cache)
            traces[n] = _NodeTrace(
                n, "intersection", edges=edges, combos=combos, inter_caches=caches, boxes=boxes
            )
        else:  # pragma: no cover - enum is exhaustive
            raise ValidationError(f"unknown node kind {kind!r}")
    return ExecutionTrace(dag, order, traces)


def execute_query(dag: QueryDag, params) -> list[Box]:
    """Evaluate the DAG to its disjunct boxes (singleton for union-free queries)."""
    return execute_with_trace(dag, params).answer_boxes()


def backward_through_dag(trace: ExecutionTrace, seed_grads, grads) -> None:
    """Propagate per-disjunct (dcenter, doffset) seeds at the answer node back
    to entity centers, relation rows, and intersection-net weights.

    ``seed_grads`` is a list aligned with the answer node's disjuncts; entries
    may be None for disjuncts that received no gradient (e.g. non-minimal
    union branches). ``grads`` is a Grads accumulator.
    """
    acc: dict[int, list] = {
        n: [None] * len(tr.boxes) for n, tr in trace.nodes.items()
    }
    answer = trace.dag.answer_node
    for j, seed in enumerate(seed_grads):
        if seed is not None:
            acc[answer][j] = [
                np.array(seed[0], dtype=np.float64),
                np.array(seed[1], dtype=np.float64),
            ]

    def route_edge(edge, src_disjunct: int, dcen: np.ndarray, doff: np.ndarray, params_like) -> None:
        grads.add_rel_center(params_like.center_row(edge.relation, edge.inverse), dcen)
        grads.add_rel_offset(params_like.offset_row(edge.relation, edge.inverse), doff)
        slot = acc[edge.src][src_disjunct]
        if slot is None:
            acc[edge.src][src_disjunct] = [dcen.copy(), doff.copy()]
        else:
            slot[0] += dcen
            slot[1] += doff

    params_like = grads.params
    for n in reversed(trace.order):
        tr = trace.nodes[n]
        for j, slot in enumerate(acc[n]):
            if slot is None:
                continue
            dcen, doff = slot
            if tr.kind == "anchor":
                grads.add_entity(tr.entity, dcen)  # anchor offset is a constant zero
            elif tr.kind == "projection":
                route_edge(tr.edges[0], j, dcen, doff, params_like)
            elif tr.kind == "union":
                k, src_j = tr.union_sources[j]
                route_edge(tr.edges[k], src_j, dcen, doff, params_like)
            elif tr.kind == "intersection":
                cache = tr.inter_caches[j]
                dcent_in, doff_in, net_grads = intersect_backward(cache, dcen, doff)
                for name, g in net_grads.items():
                    grads.add_net(name, g)
                for k, src_j in enumerate(tr.combos[j]):
                    route_edge(tr.edges[k], src_j, dcent_in[k], doff_in[k], params_like)


class Grads:
    """Sparse gradient accumulator mirroring a parameter store.

    Entity centers and relation rows are dicts keyed by row index; the
    intersection net is a dense dict keyed by field name. ``params`` is the
    store the rows refer to (used for row arithmetic, never mutated here).
    """

    def __init__(self, params) -> None:
        self.params = params
        self.entity: dict[int, np.ndarray] = {}
        self.rel_center: dict[int, np.ndarray] = {}
        self.rel_offset: dict[int, np.ndarray] = {}
        self.net: dict[str, np.ndarray] = {}

    def add_entity(self, ent: int, g: np.ndarray) -> None:
        slot = self.entity.get(ent)
        if slot is None:
            self.entity[ent] = g.copy()
        else:
            slot += g

    def add_rel_center(self, row: int, g: np.ndarray) -> None:
        slot = self.rel_center.get(row)
        if slot is None:
            self.rel_center[row] = g.copy()
        else:
            slot += g

    def add_rel_offset(self, row: int, g: np.ndarray) -> None:
        slot = self.rel_offset.get(row)
        if slot is None:
            self.rel_offset[row] = g.copy()
        else:
            slot += g

    def add_net(self, name: str, g: np.ndarray) -> None:
        slot = self.net.get(name)
        if slot is None:
            self.net[name] = g.copy()
        else:
            slot += g

    def scale(self, s: float) -> "Grads":
        for d in (self.entity, self.rel_center, self.rel_offset, self.net):
            for g in d.values():
                g *= s
        return self

    def iadd(self, other: "Grads") -> "Grads":
        for ent, g in other.entity.items():
            self.add_entity(ent, g)
        for row, g in other.rel_center.items():
            self.add_rel_center(row, g)
        for row, g in other.rel_offset.items():
            self.add_rel_offset(row, g)
        for name, g in other.net.items():
            self.add_net(name, g)
        return self
