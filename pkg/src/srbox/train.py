"""Training loop: negative sampling, margin loss, analytic gradients, Adam.

The per-query loss scores the answer entity and K sampled negatives against
the executed query box(es):

    L = -log sigmoid(gamma - D(a)) - (1/K) * sum_k log sigmoid(D(a'_k) - gamma)

where D(e) is the minimum distance over the query's disjunct boxes. The full
objective weights a simple (single-triplet) query and an optional complex
query per draw: lambda1 * L_simple + lambda2 * L_complex.

Gradients are hand-derived end to end (distance, min over disjuncts,
intersection attention and DeepSets pooling, projection chains) and applied
with a sparse Adam that keeps first/second-moment state only for rows that
have ever been touched. Relation offsets are clamped to >= 0 after every
step. A finite-difference checker validates the whole chain on small
dimensions, skipping coordinates whose probe points straddle a hinge
(different max/min/ReLU branches on the two sides).

Two training sources are supported: text sequences (structures mined per
sequence, negatives drawn from the same sequence) and a knowledge graph
(simple examples are train triplets, complex examples come from a
pre-generated query pool, negatives drawn from the global entity set).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple

import numpy as np

from srbox import boxalg
from srbox.boxalg import Box, Grads, execute_with_trace
from srbox.corpus import Corpus, Sequence, chunk_sequences
from srbox.errors import ValidationError
from srbox.params import OFFSET_MODES, ParamStore
from srbox.rng import STREAM_NEGATIVES, STREAM_QUERY_GEN, STREAM_TRAIN, substream
from srbox.structures import (
    Edge,
    NodeKind,
    QueryDag,
    chain_dag,
    intersection_dag,
    mine_structures,
    sample_pair_from_structures,
)

NEGATIVE_POOLS = ("same_sequence", "global")


@dataclass
class TrainConfig:
    gamma: float = 24.0
    alpha: float = 0.02
    lambda1: float = 1.0
    lambda2: float = 0.1
    k_negatives: int = 16
    lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    steps: int = 1000
    batch_size: int = 64
    seed: int = 0
    offset_mode: str = "shared"
    negative_pool: str = "same_sequence"
    norm: str = "l1"
    warmup: bool = True  # 10% linear warmup, then linear decay to zero
    trace_every: int = 100

    def validate(self) -> None:
        if self.gamma <= 0:
            raise ValidationError(f"gamma must be > 0, got {self.gamma}")
        if self.alpha < 0:
            raise ValidationError(f"alpha must be >= 0, got {self.alpha}")
        if self.k_negatives < 1:
            raise ValidationError(f"k_negatives must be >= 1, got {self.k_negatives}")
        if self.lr < 0:
            raise ValidationError(f"lr must be >= 0, got {self.lr}")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ValidationError("adam betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ValidationError("adam eps must be > 0")
        if self.steps < 0:
            raise ValidationError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.negative_pool not in NEGATIVE_POOLS:
            raise ValidationError(f"unknown negative pool {self.negative_pool!r}")
        if self.offset_mode not in OFFSET_MODES:
            raise ValidationError(f"unknown offset mode {self.offset_mode!r}")
        if self.norm not in ("l1", "l2"):
            raise ValidationError(f"unknown norm {self.norm!r}")
        if self.trace_every < 1:
            raise ValidationError("trace_every must be >= 1")


@dataclass(frozen=True)
class TrainExample:
    query: QueryDag
    answer: int
    negatives: tuple[int, ...]
    with_replacement: bool = False

    def validate(self) -> None:
        if self.answer in self.negatives:
            raise ValidationError("answer appears among its own negatives")
        if not self.with_replacement and len(set(self.negatives)) != len(self.negatives):
            raise ValidationError("negatives must be distinct")
        if not self.negatives:
            raise ValidationError("example needs at least one negative")


class NegativeSample(NamedTuple):
    ids: tuple[int, ...]
    with_replacement: bool


def sample_negatives(
    pool: Sequence | list[int] | range, answer: int, k: int, rng: np.random.Generator
) -> NegativeSample | None:
    """K negatives, uniform without replacement when the pool allows it.

    ``pool`` is either a text sequence (its entity set is used) or an
    explicit id collection. The answer is excluded. A pool smaller than K
    falls back to with-replacement draws and flags it; an empty pool returns
    None as the skip signal.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if isinstance(pool, Sequence):
        ids = [e for e in pool.entities if e != answer]
    else:
        ids = sorted(set(int(e) for e in pool) - {int(answer)})
    if not ids:
        return None
    if len(ids) >= k:
        picks = rng.choice(len(ids), size=k, replace=False)
        flag = False
    else:
        picks = rng.choice(len(ids), size=k, replace=True)
        flag = True
    return NegativeSample(tuple(int(ids[i]) for i in picks), flag)


# ---------------------------------------------------------------------------
# loss


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    ex = math.exp(x)
    return ex / (1.0 + ex)


def _softplus(x: float) -> float:
    """log(1 + exp(x)) without overflow; equals -log sigmoid(-x)."""
    return float(np.logaddexp(0.0, x))


def min_distance(e: np.ndarray, query_boxes: list[Box], cfg: TrainConfig) -> float:
    """D(e): minimum distance over the query's disjunct boxes."""
    if not query_boxes:
        raise ValidationError("query produced no boxes")
    return min(
        boxalg.distance(e, b, cfg.alpha, cfg.norm).d for b in query_boxes
    )


def qa_loss(
    query_boxes: list[Box],
    answer: np.ndarray,
    negatives: list[np.ndarray],
    cfg: TrainConfig,
) -> float:
    """Margin loss of one query against its answer vector and negatives."""
    if not negatives:
        raise ValidationError("qa_loss needs at least one negative")
    d_ans = min_distance(answer, query_boxes, cfg)
    loss = _softplus(d_ans - cfg.gamma)
    for vec in negatives:
        loss += _softplus(cfg.gamma - min_distance(vec, query_boxes, cfg)) / len(negatives)
    return loss


def example_loss(example: TrainExample, params: ParamStore, cfg: TrainConfig) -> float:
    boxes = boxalg.execute_query(example.query, params)
    answer = params.entity_centers[example.answer]
    negatives = [params.entity_centers[k] for k in example.negatives]
    return qa_loss(boxes, answer, negatives, cfg)


def sr_loss(
    simple: TrainExample,
    complex_example: TrainExample | None,
    params: ParamStore,
    cfg: TrainConfig,
    aux_loss: float = 0.0,
) -> float:
    """Weighted objective: lambda1 * simple + lambda2 * complex (+ optional
    additive auxiliary term supplied by the caller)."""
    total = cfg.lambda1 * example_loss(simple, params, cfg)
    if complex_example is not None:
        total += cfg.lambda2 * example_loss(complex_example, params, cfg)
    return total + aux_loss


def _loss_and_grads(
    example: TrainExample,
    params: ParamStore,
    cfg: TrainConfig,
    weight: float,
    grads: Grads | None,
    want_signature: bool = False,
) -> tuple[float, bytes]:
    """One example's weighted loss; gradients accumulate into ``grads``.

    The signature concatenates every branch indicator met along the way
    (intersection masks/argmins, distance hinge sides, disjunct argmins) so
    a caller can tell whether two nearby parameter points share all branches.
    """
    trace = execute_with_trace(example.query, params)
    boxes = trace.answer_boxes()
    k = len(example.negatives)
    ents = (example.answer, *example.negatives)
    vecs = params.entity_centers[list(ents)]  # (k+1, d)

    # distances of every entity to every disjunct box, vectorized per box;
    # per-entity rows of the mask matrices are exactly the DistanceCache
    # fields, so backward can slice instead of recomputing
    per_box = []
    for b in boxes:
        bmax = b.center + b.offset
        bmin = b.center - b.offset
        above = vecs > bmax
        below = vecs < bmin
        v_out = np.maximum(vecs - bmax, 0.0) + np.maximum(bmin - vecs, 0.0)
        clamped = np.minimum(bmax, np.maximum(bmin, vecs))
        u_in = b.center - clamped
        if cfg.norm == "l1":
            dist = np.abs(v_out).sum(axis=1) + cfg.alpha * np.abs(u_in).sum(axis=1)
        else:
            dist = np.sqrt((v_out * v_out).sum(axis=1)) + cfg.alpha * np.sqrt(
                (u_in * u_in).sum(axis=1)
            )
        per_box.append((dist, above, below, v_out, u_in))

    all_d = np.stack([pb[0] for pb in per_box])  # (n_boxes, k+1)
    argmins = np.argmin(all_d, axis=0)
    d_min = all_d[argmins, np.arange(len(ents))]

    def cache_for(i: int) -> boxalg.DistanceCache:
        j = int(argmins[i])
        b = boxes[j]
        _, above, below, v_out, u_in = per_box[j]
        return boxalg.DistanceCache(
            vecs[i], b.center, b.offset, above[i], below[i], v_out[i], u_in[i],
            cfg.alpha, cfg.norm,
        )

    sig_parts = None
    if want_signature:
        sig_parts = [trace.signature()]
        for i in range(len(ents)):
            sig_parts.append(int(argmins[i]).to_bytes(4, "little"))
            sig_parts.append(cache_for(i).signature())

    loss = _softplus(float(d_min[0]) - cfg.gamma)
    for d_neg in d_min[1:]:
        loss += _softplus(cfg.gamma - float(d_neg)) / k
    loss *= weight

    if grads is not None:
        seeds: list[list[np.ndarray] | None] = [None] * len(boxes)
        for i, ent in enumerate(ents):
            d_val = float(d_min[i])
            if i == 0:
                coef = weight * _sigmoid(d_val - cfg.gamma)
            else:
                coef = -weight * _sigmoid(cfg.gamma - d_val) / k
            de, dc, doff = boxalg.distance_backward(cache_for(i), coef)
            grads.add_entity(ent, de)
            j = int(argmins[i])
            if seeds[j] is None:
                seeds[j] = [dc, doff]
            else:
                seeds[j][0] += dc
                seeds[j][1] += doff
        boxalg.backward_through_dag(trace, seeds, grads)

    return loss, b"".join(sig_parts) if want_signature else b""


def backward(
    example: TrainExample, params: ParamStore, cfg: TrainConfig, weight: float = 1.0
) -> Grads:
    """Exact gradients of the weighted qa loss for one example. Parameters
    never touched by the example do not appear in the result."""
    grads = Grads(params)
    _loss_and_grads(example, params, cfg, weight, grads)
    return grads


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int = 0
    ent_m: dict[int, np.ndarray] = field(default_factory=dict)
    ent_v: dict[int, np.ndarray] = field(default_factory=dict)
    relc_m: dict[int, np.ndarray] = field(default_factory=dict)
    relc_v: dict[int, np.ndarray] = field(default_factory=dict)
    relo_m: dict[int, np.ndarray] = field(default_factory=dict)
    relo_v: dict[int, np.ndarray] = field(default_factory=dict)
    net_m: dict[str, np.ndarray] = field(default_factory=dict)
    net_v: dict[str, np.ndarray] = field(default_factory=dict)


def _adam_row(m_d, v_d, key, grad, lr, cfg, bc1, bc2) -> np.ndarray:
    m = m_d.get(key)
    if m is None:
        m = np.zeros_like(grad)
        v = np.zeros_like(grad)
    else:
        v = v_d[key]
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
    m_d[key] = m
    v_d[key] = v
    return lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


def adam_step(
    params: ParamStore, grads: Grads, state: AdamState, cfg: TrainConfig, lr: float
) -> None:
    """Sparse Adam update on every touched row, then clamp offsets to >= 0.

    Rows are visited in sorted key order so accumulation is reproducible.
    Bias correction uses the global step count.
    """
    state.step += 1
    bc1 = 1.0 - cfg.beta1 ** state.step
    bc2 = 1.0 - cfg.beta2 ** state.step
    for ent in sorted(grads.entity):
        params.entity_centers[ent] -= _adam_row(
            state.ent_m, state.ent_v, ent, grads.entity[ent], lr, cfg, bc1, bc2
        )
    for row in sorted(grads.rel_center):
        params.relation_centers[row] -= _adam_row(
            state.relc_m, state.relc_v, row, grads.rel_center[row], lr, cfg, bc1, bc2
        )
    for row in sorted(grads.rel_offset):
        params.relation_offsets[row] -= _adam_row(
            state.relo_m, state.relo_v, row, grads.rel_offset[row], lr, cfg, bc1, bc2
        )
    for name in sorted(grads.net):
        update = _adam_row(state.net_m, state.net_v, name, grads.net[name], lr, cfg, bc1, bc2)
        arr = getattr(params.net, name)
        arr -= update
    np.maximum(params.relation_offsets, 0.0, out=params.relation_offsets)


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Step-indexed learning rate: linear warmup over the first 10% of steps,
    then linear decay to zero; constant when the schedule is off."""
    if not cfg.warmup or cfg.steps <= 0:
        return cfg.lr
    warm = max(1, int(0.1 * cfg.steps))
    if step < warm:
        return cfg.lr * (step + 1) / warm
    if cfg.steps == warm:
        return cfg.lr
    return cfg.lr * (cfg.steps - step) / (cfg.steps - warm)


# ---------------------------------------------------------------------------
# training sources


@dataclass
class TextSource:
    corpus: Corpus
    seq_len: int = 512


@dataclass
class KgSource:
    """Pre-assembled KG training material.

    ``triplets`` are dense-id train edges used as simple (1p) examples;
    ``complex_queries`` are pre-generated (dag, train-answer tuple) pairs of
    any mix of shapes; negatives come from the global entity range. When
    ``answer_sets`` maps (head, relation) to every known tail, all of a
    query's known answers are excluded from its negative pool, not just the
    sampled one; otherwise co-answers of multi-tail queries get pushed away
    as false negatives.
    """

    triplets: list[tuple[int, int, int]]
    complex_queries: list[tuple[QueryDag, tuple[int, ...]]]
    n_entities: int
    answer_sets: dict[tuple[int, int], tuple[int, ...]] | None = None

    @staticmethod
    def build_answer_sets(
        triplets: list[tuple[int, int, int]],
    ) -> dict[tuple[int, int], tuple[int, ...]]:
        sets: dict[tuple[int, int], set[int]] = {}
        for h, r, t in triplets:
            sets.setdefault((h, r), set()).add(t)
        return {k: tuple(sorted(v)) for k, v in sets.items()}


def _text_draw(state, rng: np.random.Generator):
    """One (simple, complex) query pair from a random eligible sequence."""
    seqs, cache = state
    idx = int(rng.integers(len(seqs)))
    seq = seqs[idx]
    structures = cache.get(idx)
    if structures is None:
        structures = mine_structures(seq.triplets)
        cache[idx] = structures
    pair = sample_pair_from_structures(structures, rng)
    return seq, pair


def train(
    source: TextSource | KgSource,
    params: ParamStore,
    cfg: TrainConfig,
    callback: Callable[[dict], None] | None = None,
) -> tuple[ParamStore, list[dict]]:
    """Run the optimization loop; returns the trained store and loss trace.

    Each step draws ``batch_size`` example pairs, accumulates analytic
    gradients (simple examples weighted by lambda1, complex by lambda2),
    averages them over the batch, applies one Adam update, and clamps
    relation offsets. The trace records {step, loss, loss_simple,
    loss_complex, lr} every ``trace_every`` steps and at the final step.
    Deterministic for a fixed seed; aborts on a non-finite loss.
    """
    cfg.validate()
    params.validate()
    rng_train = substream(cfg.seed, STREAM_TRAIN)
    rng_neg = substream(cfg.seed, STREAM_NEGATIVES)

    if isinstance(source, TextSource):
        seqs = [s for s in chunk_sequences(source.corpus, source.seq_len) if s.triplets]
        if not seqs and cfg.steps > 0:
            raise ValidationError("no sequence carries any triplet; nothing to train on")
        text_state = (seqs, {})
        global_pool = range(source.corpus.n_entities)
    else:
        if not source.triplets and cfg.steps > 0:
            raise ValidationError("KG source has no train triplets")
        global_pool = range(source.n_entities)
        all_ids = frozenset(global_pool)
        simple_pools: dict[tuple[int, int], list[int]] = {}
        complex_pools: dict[int, list[int]] = {}

    state = AdamState()
    trace: list[dict] = []
    for step in range(cfg.steps):
        grads = Grads(params)
        loss_simple = 0.0
        loss_complex = 0.0
        n_simple = 0
        n_complex = 0
        for _ in range(cfg.batch_size):
            if isinstance(source, TextSource):
                seq, pair = _text_draw(text_state, rng_train)
                if pair is None:
                    continue
                (simple_dag, simple_ans), complex_pick = pair
                pool = seq if cfg.negative_pool == "same_sequence" else global_pool
                neg = sample_negatives(pool, simple_ans, cfg.k_negatives, rng_neg)
                if neg is not None:
                    ex = TrainExample(simple_dag, simple_ans, neg.ids, neg.with_replacement)
                    val, _ = _loss_and_grads(ex, params, cfg, cfg.lambda1, grads)
                    loss_simple += val
                    n_simple += 1
                if complex_pick is not None:
                    c_dag, c_ans = complex_pick
                    neg = sample_negatives(pool, c_ans, cfg.k_negatives, rng_neg)
                    if neg is not None:
                        ex = TrainExample(c_dag, c_ans, neg.ids, neg.with_replacement)
                        val, _ = _loss_and_grads(ex, params, cfg, cfg.lambda2, grads)
                        loss_complex += val
                        n_complex += 1
            else:
                h, r, t = source.triplets[int(rng_train.integers(len(source.triplets)))]
                if source.answer_sets is None:
                    pool = global_pool
                else:
                    pool = simple_pools.get((h, r))
                    if pool is None:
                        known = source.answer_sets.get((h, r), (t,))
                        pool = sorted(all_ids.difference(known))
                        simple_pools[(h, r)] = pool
                neg = sample_negatives(pool, t, cfg.k_negatives, rng_neg)
                if neg is not None:
                    ex = TrainExample(chain_dag(h, [(r, False)]), t, neg.ids, neg.with_replacement)
                    val, _ = _loss_and_grads(ex, params, cfg, cfg.lambda1, grads)
                    loss_simple += val
                    n_simple += 1
                if source.complex_queries:
                    qi = int(rng_train.integers(len(source.complex_queries)))
                    dag, answers = source.complex_queries[qi]
                    ans = int(answers[int(rng_train.integers(len(answers)))])
                    if source.answer_sets is None:
                        pool = global_pool
                    else:
                        pool = complex_pools.get(qi)
                        if pool is None:
                            pool = sorted(all_ids.difference(answers))
                            complex_pools[qi] = pool
                    neg = sample_negatives(pool, ans, cfg.k_negatives, rng_neg)
                    if neg is not None:
                        ex = TrainExample(dag, ans, neg.ids, neg.with_replacement)
                        val, _ = _loss_and_grads(ex, params, cfg, cfg.lambda2, grads)
                        loss_complex += val
                        n_complex += 1
        n_formed = n_simple + n_complex
        if n_formed == 0:
            continue
        loss = (loss_simple + loss_complex) / cfg.batch_size
        if not math.isfinite(loss):
            raise ValidationError(f"non-finite loss at step {step}")
        grads.scale(1.0 / cfg.batch_size)
        lr = lr_at(cfg, step)
        adam_step(params, grads, state, cfg, lr)
        if step % cfg.trace_every == 0 or step == cfg.steps - 1:
            record = {
                "step": step,
                "loss": loss,
                "loss_simple": loss_simple / n_simple if n_simple else None,
                "loss_complex": loss_complex / n_complex if n_complex else None,
                "lr": lr,
            }
            trace.append(record)
            if callback is not None:
                callback(record)
    return params, trace


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def _touched_coordinates(example: TrainExample, params: ParamStore):
    """Every parameter coordinate the example can reach, as (array, row) pairs."""
    dag = example.query
    ents = sorted(
        {e for _, e in dag.anchors} | {example.answer} | set(example.negatives)
    )
    coords: list[tuple[np.ndarray, int]] = [(params.entity_centers, e) for e in ents]
    crows = sorted({params.center_row(e.relation, e.inverse) for e in dag.edges})
    orows = sorted({params.offset_row(e.relation, e.inverse) for e in dag.edges})
    coords += [(params.relation_centers, r) for r in crows]
    coords += [(params.relation_offsets, r) for r in orows]
    has_intersection = any(kind is NodeKind.INTERSECTION for _, kind in dag.nodes)
    net_arrays = (
        [getattr(params.net, f) for f in boxalg.NET_FIELDS] if has_intersection else []
    )
    return coords, net_arrays


def _random_example(
    shape: str, params: ParamStore, rng: np.random.Generator, k: int
) -> TrainExample:
    n_ent = params.n_entities
    n_rel = params.n_relations
    ent = lambda: int(rng.integers(n_ent))
    rel = lambda: int(rng.integers(n_rel))
    if shape == "1p":
        dag = chain_dag(ent(), [(rel(), False)])
    elif shape == "2p":
        dag = chain_dag(ent(), [(rel(), False), (rel(), False)])
    elif shape == "2i":
        dag = intersection_dag([(ent(), rel(), False), (ent(), rel(), False)])
    elif shape == "2i_inverse":
        dag = intersection_dag([(ent(), rel(), True), (ent(), rel(), True)])
    elif shape == "2u":
        dag = QueryDag(
            anchors=((0, ent()), (1, ent())),
            edges=(Edge(0, 2, rel(), False), Edge(1, 2, rel(), False)),
            nodes=((2, NodeKind.UNION),),
            answer_node=2,
        )
    else:
        raise ValidationError(f"unknown query shape {shape!r}")
    answer = ent()
    pool = [e for e in range(n_ent) if e != answer]
    picks = rng.choice(len(pool), size=min(k, len(pool)), replace=False)
    negatives = tuple(pool[i] for i in picks)
    return TrainExample(dag, answer, negatives)


GRAD_CHECK_SHAPES = ("1p", "2p", "2i", "2i_inverse", "2u")


def grad_check(
    params: ParamStore,
    n_trials: int,
    seed: int,
    cfg: TrainConfig | None = None,
    h: float = 1e-3,
) -> float:
    """Compare analytic gradients against central finite differences.

    Cycles through the five query shapes, perturbing every touched
    coordinate by +/- h. Coordinates whose two probe points fall on
    different branches (any hinge, argmin, or ReLU flip in between) are
    skipped; the rest must agree. Returns the max relative error
    |g_a - g_n| / max(1e-8, |g_a| + |g_n|).

    The default check config uses a small margin: central differences of a
    loss sitting at the scale of gamma carry cancellation noise of about
    |loss| * eps / h, which at gamma = 24 already rivals the tolerance on
    flat coordinates. The gradient expressions do not depend on gamma's
    magnitude, so checking at a small margin loses nothing.
    """
    if cfg is None:
        cfg = replace(TrainConfig(), k_negatives=2, alpha=0.02, gamma=2.0)
    rng = substream(seed, STREAM_QUERY_GEN)
    worst = 0.0
    for trial in range(n_trials):
        shape = GRAD_CHECK_SHAPES[trial % len(GRAD_CHECK_SHAPES)]
        example = _random_example(shape, params, rng, cfg.k_negatives)
        grads = Grads(params)
        _, sig0 = _loss_and_grads(example, params, cfg, 1.0, grads, want_signature=True)

        def probe(arr: np.ndarray, idx: tuple[int, ...]) -> tuple[float, bytes, float, bytes]:
            orig = arr[idx]
            arr[idx] = orig + h
            up, sig_up = _loss_and_grads(example, params, cfg, 1.0, None, want_signature=True)
            arr[idx] = orig - h
            dn, sig_dn = _loss_and_grads(example, params, cfg, 1.0, None, want_signature=True)
            arr[idx] = orig
            return up, sig_up, dn, sig_dn

        def check(arr: np.ndarray, idx: tuple[int, ...], analytic: float) -> None:
            nonlocal worst
            up, sig_up, dn, sig_dn = probe(arr, idx)
            if sig_up != sig_dn or sig_up != sig0:
                return  # probes straddle a hinge; derivative is not defined here
            numeric = (up - dn) / (2.0 * h)
            err = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
            worst = max(worst, err)

        coords, net_arrays = _touched_coordinates(example, params)
        for arr, row in coords:
            if arr is params.entity_centers:
                g_row = grads.entity.get(row)
            elif arr is params.relation_centers:
                g_row = grads.rel_center.get(row)
            else:
                g_row = grads.rel_offset.get(row)
            for j in range(params.dim):
                analytic = 0.0 if g_row is None else float(g_row[j])
                check(arr, (row, j), analytic)
        for name, arr in zip(boxalg.NET_FIELDS, net_arrays):
            g = grads.net.get(name)
            it = np.ndindex(arr.shape)
            for idx in it:
                analytic = 0.0 if g is None else float(g[idx])
                check(arr, idx, analytic)
    return worst


# ---------------------------------------------------------------------------
# path-translation baseline


def ptranse_score(
    anchor: int, path: list[tuple[int, bool]], answer: int, params: ParamStore
) -> float:
    """Translation-composition score for chain queries:
    -|Cen(anchor) + sum of signed relation centers - Cen(answer)|_1,
    inverse hops contributing their negated forward center."""
    if not path:
        raise ValidationError("path must contain at least one relation")
    vec = params.entity_centers[anchor].astype(np.float64).copy()
    for rel, inverse in path:
        row = params.relation_centers[params.center_row(rel, False)]
        vec += -row if inverse else row
    return -float(np.abs(vec - params.entity_centers[answer]).sum())
