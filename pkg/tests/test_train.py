"""Tests for losses, analytic gradients, the optimizer, and the train loop."""

import json
import math

import numpy as np
import pytest

from srbox import boxalg, train
from srbox.boxalg import Box, entity_box
from srbox.corpus import load_corpus
from srbox.errors import ValidationError
from srbox.params import init_random
from srbox.rng import STREAM_NEGATIVES, substream
from srbox.structures import chain_dag, intersection_dag
from srbox.train import (
    AdamState,
    KgSource,
    TextSource,
    TrainConfig,
    TrainExample,
    adam_step,
    backward,
    grad_check,
    lr_at,
    ptranse_score,
    qa_loss,
    sample_negatives,
    sr_loss,
)

TWO_LN2 = 2.0 * math.log(2.0)


class TestTrainConfig:
    def test_defaults_are_valid(self):
        TrainConfig().validate()

    @pytest.mark.parametrize(
        "field,value",
        [
            ("gamma", 0.0),
            ("gamma", -1.0),
            ("k_negatives", 0),
            ("lr", -0.1),
            ("batch_size", 0),
            ("steps", -1),
            ("negative_pool", "nearby"),
            ("norm", "linf"),
            ("offset_mode", "blended"),
            ("trace_every", 0),
        ],
    )
    def test_invalid_fields(self, field, value):
        cfg = TrainConfig(**{field: value})
        with pytest.raises(ValidationError):
            cfg.validate()


class TestTrainExample:
    def test_answer_among_negatives(self):
        ex = TrainExample(chain_dag(0, [(0, False)]), 1, (1, 2))
        with pytest.raises(ValidationError):
            ex.validate()

    def test_duplicate_negatives(self):
        ex = TrainExample(chain_dag(0, [(0, False)]), 1, (2, 2))
        with pytest.raises(ValidationError):
            ex.validate()
        TrainExample(chain_dag(0, [(0, False)]), 1, (2, 2), with_replacement=True).validate()

    def test_empty_negatives(self):
        with pytest.raises(ValidationError):
            TrainExample(chain_dag(0, [(0, False)]), 1, ()).validate()


def entity_seq(entities):
    """A bare Sequence carrying only an entity pool."""
    from srbox.corpus import Sequence

    return Sequence(0, 0, 8, (0,), (), tuple(entities))


class TestSampleNegatives:
    def test_forced_single_choice(self):
        rng = np.random.default_rng(0)
        got = sample_negatives(entity_seq([0, 1]), 0, 1, rng)
        assert got.ids == (1,)
        assert got.with_replacement is False

    def test_excludes_answer_and_distinct(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            got = sample_negatives(list(range(10)), 4, 3, rng)
            assert 4 not in got.ids
            assert len(set(got.ids)) == 3
            assert got.with_replacement is False

    def test_deterministic_under_seed(self):
        a = sample_negatives(list(range(10)), 0, 3, substream(7, STREAM_NEGATIVES))
        b = sample_negatives(list(range(10)), 0, 3, substream(7, STREAM_NEGATIVES))
        assert a == b

    def test_small_pool_flags_replacement(self):
        rng = np.random.default_rng(2)
        got = sample_negatives(list(range(3)), 0, 5, rng)
        assert got.with_replacement is True
        assert len(got.ids) == 5
        assert all(x in (1, 2) for x in got.ids)

    def test_empty_pool_skips(self):
        rng = np.random.default_rng(3)
        assert sample_negatives([7], 7, 2, rng) is None
        assert sample_negatives(entity_seq([]), 0, 2, rng) is None

    def test_bad_k(self):
        with pytest.raises(ValidationError):
            sample_negatives(list(range(4)), 0, 0, np.random.default_rng(0))

    def test_uniform_coverage(self):
        rng = np.random.default_rng(4)
        counts = {i: 0 for i in range(1, 6)}
        for _ in range(4000):
            for e in sample_negatives(list(range(6)), 0, 2, rng).ids:
                counts[e] += 1
        expected = 4000 * 2 / 5
        chi2 = sum((c - expected) ** 2 / expected for c in counts.values())
        assert chi2 < 13.28  # df=4 critical value at 0.01


class TestQaLoss:
    def setup_method(self):
        # alpha=0 makes D equal the exactly representable outer distance.
        self.cfg = TrainConfig(gamma=24.0, alpha=0.0, k_negatives=2)
        self.boxes = [entity_box(np.zeros(2))]

    def test_symmetric_point_constant(self):
        ans = np.array([24.0, 0.0])
        negs = [np.array([0.0, 24.0]), np.array([-24.0, 0.0])]
        got = qa_loss(self.boxes, ans, negs, self.cfg)
        assert got == pytest.approx(TWO_LN2, abs=1e-12)

    def test_ideal_separation_is_tiny(self):
        ans = np.array([0.0, 0.0])
        negs = [np.array([48.0, 0.0])]
        got = qa_loss(self.boxes, ans, negs, self.cfg)
        # both terms are softplus(-24); each about 3.78e-11
        assert got == pytest.approx(2 * math.log1p(math.exp(-24.0)), rel=1e-9)
        assert got < 1e-10

    def test_monotone_in_answer_distance(self):
        negs = [np.array([30.0, 0.0])]
        losses = [
            qa_loss(self.boxes, np.array([d, 0.0]), negs, self.cfg)
            for d in (2.0, 10.0, 20.0, 26.0)
        ]
        assert losses == sorted(losses)

    def test_negative_permutation_invariance(self):
        rng = np.random.default_rng(0)
        negs = [rng.normal(size=2) * 20 for _ in range(6)]
        ans = np.array([3.0, 4.0])
        a = qa_loss(self.boxes, ans, negs, self.cfg)
        b = qa_loss(self.boxes, ans, list(reversed(negs)), self.cfg)
        assert a == pytest.approx(b, abs=1e-12)

    def test_min_over_disjuncts(self):
        far = entity_box(np.array([100.0, 0.0]))
        near = entity_box(np.array([24.0, 0.0]))
        ans = np.array([24.0, 0.0])
        negs = [np.array([0.0, 24.0])]
        got = qa_loss([far, near], ans, negs, self.cfg)
        # the near disjunct gives D(ans) = 0; the negative is at 24 from
        # far's... no: D(neg) = min(|neg-far|, |neg-near|) and both are >= 24
        assert got == qa_loss([near, far], ans, negs, self.cfg)
        assert got < TWO_LN2

    def test_no_negatives_rejected(self):
        with pytest.raises(ValidationError):
            qa_loss(self.boxes, np.zeros(2), [], self.cfg)


def symmetric_store():
    """dim=1 store rigged so every query/answer distance is exactly gamma."""
    store = init_random(1, 4, 1, seed=0)
    store.entity_centers[:] = np.array([[0.0], [24.0], [-24.0], [24.0]])
    store.relation_centers[:] = 0.0
    store.relation_offsets[:] = 0.0
    return store


class TestSrLoss:
    def setup_method(self):
        self.cfg = TrainConfig(gamma=24.0, alpha=0.0, lambda1=1.0, lambda2=0.1)
        self.store = symmetric_store()
        dag = chain_dag(0, [(0, False)])
        self.simple = TrainExample(dag, 1, (2,))
        self.complex = TrainExample(dag, 3, (2,))

    def test_simple_only(self):
        got = sr_loss(self.simple, None, self.store, self.cfg)
        assert got == pytest.approx(TWO_LN2, abs=1e-12)

    def test_weighted_pair_constant(self):
        got = sr_loss(self.simple, self.complex, self.store, self.cfg)
        assert got == pytest.approx(1.1 * TWO_LN2, abs=1e-12)

    def test_lambda2_zero_matches_simple(self):
        cfg = TrainConfig(gamma=24.0, alpha=0.0, lambda1=1.0, lambda2=0.0)
        a = sr_loss(self.simple, self.complex, self.store, cfg)
        b = sr_loss(self.simple, None, self.store, cfg)
        assert a == b

    def test_common_scale(self):
        cfg2 = TrainConfig(gamma=24.0, alpha=0.0, lambda1=3.0, lambda2=0.3)
        a = sr_loss(self.simple, self.complex, self.store, self.cfg)
        b = sr_loss(self.simple, self.complex, self.store, cfg2)
        assert b == pytest.approx(3.0 * a, rel=1e-12)

    def test_aux_term_added_exactly(self):
        a = sr_loss(self.simple, None, self.store, self.cfg)
        b = sr_loss(self.simple, None, self.store, self.cfg, aux_loss=0.625)
        assert b == a + 0.625


class TestBackward:
    def test_gradients_sparse(self):
        store = init_random(4, 10, 3, seed=1)
        ex = TrainExample(chain_dag(2, [(1, False)]), 5, (7, 8))
        grads = backward(ex, store, TrainConfig(k_negatives=2))
        assert set(grads.entity) <= {2, 5, 7, 8}
        assert set(grads.rel_center) == {1}
        assert set(grads.rel_offset) == {0}
        assert grads.net == {}

    def test_intersection_touches_net(self):
        store = init_random(4, 10, 3, seed=1)
        dag = intersection_dag([(0, 0, False), (1, 1, False)])
        ex = TrainExample(dag, 5, (7,))
        grads = backward(ex, store, TrainConfig(k_negatives=1))
        assert set(grads.net) == set(boxalg.NET_FIELDS)

    def test_weight_scales_gradients(self):
        store = init_random(4, 10, 3, seed=1)
        ex = TrainExample(chain_dag(2, [(1, False)]), 5, (7, 8))
        cfg = TrainConfig(k_negatives=2)
        g1 = backward(ex, store, cfg, weight=1.0)
        g2 = backward(ex, store, cfg, weight=2.5)
        for ent, g in g1.entity.items():
            np.testing.assert_allclose(g2.entity[ent], 2.5 * g, rtol=1e-12)


class TestGradCheck:
    def test_small_suite_passes(self):
        store = init_random(5, 12, 4, seed=3)
        err = grad_check(store, n_trials=40, seed=11)
        assert err <= 1e-4

    def test_zero_trials(self):
        store = init_random(4, 8, 3, seed=0)
        assert grad_check(store, n_trials=0, seed=0) == 0.0

    def test_negative_control_sign_bug(self, monkeypatch):
        # Flip the sign of the entity gradient in the distance backward and
        # the checker must blow past 1e-1.
        store = init_random(5, 12, 4, seed=3)
        original = boxalg.distance_backward

        def flipped(cache, dd):
            de, dc, doff = original(cache, dd)
            return -de, dc, doff

        monkeypatch.setattr(boxalg, "distance_backward", flipped)
        err = grad_check(store, n_trials=10, seed=11)
        assert err > 1e-1


class TestAdam:
    def test_offsets_clamped(self):
        store = init_random(3, 4, 2, seed=0)
        grads = boxalg.Grads(store)
        grads.add_rel_offset(0, np.full(3, 100.0))  # strong push downward
        adam_step(store, grads, AdamState(), TrainConfig(), lr=10.0)
        assert np.all(store.relation_offsets >= 0.0)

    def test_untouched_rows_unchanged(self):
        store = init_random(3, 4, 2, seed=0)
        before = store.copy()
        grads = boxalg.Grads(store)
        grads.add_entity(1, np.ones(3))
        adam_step(store, grads, AdamState(), TrainConfig(), lr=0.1)
        np.testing.assert_array_equal(store.entity_centers[0], before.entity_centers[0])
        assert not np.array_equal(store.entity_centers[1], before.entity_centers[1])
        np.testing.assert_array_equal(store.relation_centers, before.relation_centers)

    def test_first_step_magnitude(self):
        # With bias correction the first update is lr * g / (|g| + eps).
        store = init_random(2, 2, 1, seed=0)
        before = store.entity_centers[0].copy()
        grads = boxalg.Grads(store)
        grads.add_entity(0, np.array([3.0, -0.5]))
        adam_step(store, grads, AdamState(), TrainConfig(eps=0.0), lr=0.01)
        delta = store.entity_centers[0] - before
        np.testing.assert_allclose(delta, [-0.01, 0.01], rtol=1e-12)


class TestLrSchedule:
    def test_warmup_and_decay(self):
        cfg = TrainConfig(lr=1.0, steps=100, warmup=True)
        values = [lr_at(cfg, s) for s in range(100)]
        assert values[0] == pytest.approx(0.1)
        assert max(values) == pytest.approx(1.0)
        assert values[9] == pytest.approx(1.0)
        assert values[99] == pytest.approx(1.0 / 90.0)
        assert all(a <= b + 1e-12 for a, b in zip(values[:9], values[1:10]))
        assert all(a >= b - 1e-12 for a, b in zip(values[10:], values[11:]))

    def test_constant_when_disabled(self):
        cfg = TrainConfig(lr=0.5, steps=100, warmup=False)
        assert {lr_at(cfg, s) for s in (0, 50, 99)} == {0.5}


def toy_corpus(tmp_path):
    recs = [
        {
            "id": "d0",
            "tokens": [f"t{i}" for i in range(12)],
            "mentions": [
                {"entity": "A", "start": 0, "end": 0},
                {"entity": "B", "start": 2, "end": 2},
                {"entity": "C", "start": 4, "end": 4},
                {"entity": "D", "start": 6, "end": 6},
            ],
            "triplets": [
                {"head": "A", "relation": "r1", "tail": "B"},
                {"head": "B", "relation": "r2", "tail": "C"},
                {"head": "A", "relation": "r3", "tail": "C"},
            ],
        }
    ]
    path = tmp_path / "toy.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        for r in recs:
            fh.write(json.dumps(r) + "\n")
    return load_corpus(path)


class TestTrainLoop:
    def test_zero_steps_unchanged(self, tmp_path):
        corpus = toy_corpus(tmp_path)
        store = init_random(4, corpus.n_entities, corpus.n_relations, seed=0)
        before = store.copy()
        after, trace = train.train(TextSource(corpus, 12), store, TrainConfig(steps=0))
        assert after.equals(before)
        assert trace == []

    def test_zero_lr_unchanged(self, tmp_path):
        corpus = toy_corpus(tmp_path)
        store = init_random(4, corpus.n_entities, corpus.n_relations, seed=0)
        before = store.copy()
        cfg = TrainConfig(steps=5, lr=0.0, k_negatives=2, batch_size=2, seed=0)
        after, _ = train.train(TextSource(corpus, 12), store, cfg)
        assert after.equals(before)

    def test_deterministic_batch_one(self, tmp_path):
        corpus = toy_corpus(tmp_path)
        cfg = TrainConfig(steps=25, lr=0.05, k_negatives=2, batch_size=1, seed=9)
        runs = []
        for _ in range(2):
            store = init_random(4, corpus.n_entities, corpus.n_relations, seed=3)
            after, trace = train.train(TextSource(corpus, 12), store, cfg)
            runs.append((after, trace))
        assert runs[0][0].equals(runs[1][0])
        assert runs[0][1] == runs[1][1]

    def test_loss_decreases_on_toy_corpus(self, tmp_path):
        corpus = toy_corpus(tmp_path)
        wins = 0
        for seed in range(10):
            store = init_random(8, corpus.n_entities, corpus.n_relations, seed=seed)
            cfg = TrainConfig(
                steps=10, lr=0.05, k_negatives=2, batch_size=4, seed=seed,
                gamma=2.0, trace_every=1, warmup=False,
            )
            _, trace = train.train(TextSource(corpus, 12), store, cfg)
            by_step = {rec["step"]: rec["loss"] for rec in trace}
            if by_step[9] < by_step[3]:
                wins += 1
        assert wins >= 8

    def test_trace_cadence_and_callback(self, tmp_path):
        corpus = toy_corpus(tmp_path)
        store = init_random(4, corpus.n_entities, corpus.n_relations, seed=0)
        seen = []
        cfg = TrainConfig(steps=7, lr=0.01, k_negatives=2, batch_size=1, seed=0, trace_every=3)
        _, trace = train.train(TextSource(corpus, 12), store, cfg, callback=seen.append)
        assert [r["step"] for r in trace] == [0, 3, 6]
        assert seen == trace
        assert all({"step", "loss", "loss_simple", "loss_complex", "lr"} <= set(r) for r in trace)

    def test_aborts_on_non_finite(self, tmp_path):
        corpus = toy_corpus(tmp_path)
        store = init_random(4, corpus.n_entities, corpus.n_relations, seed=0)
        cfg = TrainConfig(steps=5, lr=1e200, k_negatives=2, batch_size=1, seed=0, warmup=False)
        with pytest.raises(ValidationError, match="step"):
            train.train(TextSource(corpus, 12), store, cfg)

    def test_offsets_nonnegative_throughout(self, tmp_path):
        corpus = toy_corpus(tmp_path)
        store = init_random(4, corpus.n_entities, corpus.n_relations, seed=1)
        cfg = TrainConfig(steps=30, lr=0.2, k_negatives=2, batch_size=2, seed=1, gamma=1.0)
        after, _ = train.train(TextSource(corpus, 12), store, cfg)
        assert np.all(after.relation_offsets >= 0.0)

    def test_kg_source_runs_and_filters(self):
        triplets = [(0, 0, 1), (1, 0, 2), (2, 0, 3), (3, 0, 4), (0, 1, 2)]
        src = KgSource(
            triplets, [], 5, answer_sets=KgSource.build_answer_sets(triplets)
        )
        store = init_random(4, 5, 2, seed=0)
        cfg = TrainConfig(steps=10, lr=0.05, k_negatives=2, batch_size=2, seed=0)
        after, trace = train.train(src, store, cfg)
        assert trace[-1]["step"] == 9
        assert np.isfinite(trace[-1]["loss"])

    def test_empty_kg_source_rejected(self):
        store = init_random(4, 5, 2, seed=0)
        with pytest.raises(ValidationError):
            train.train(KgSource([], [], 5), store, TrainConfig(steps=1))


class TestPtranse:
    def test_hand_case(self):
        store = init_random(1, 4, 2, seed=0)
        store.entity_centers[:] = np.array([[0.0], [3.0], [1.0], [9.0]])
        store.relation_centers[:] = 0.0
        store.relation_centers[0] = 2.0
        assert ptranse_score(0, [(0, False)], 1, store) == -1.0

    def test_exact_match_is_max(self):
        store = init_random(1, 3, 1, seed=0)
        store.entity_centers[:] = np.array([[0.0], [2.0], [5.0]])
        store.relation_centers[:] = 0.0
        store.relation_centers[0] = 2.0
        scores = [ptranse_score(0, [(0, False)], e, store) for e in range(3)]
        assert scores[1] == 0.0
        assert scores[1] == max(scores)

    def test_inverse_negates(self):
        store = init_random(1, 2, 1, seed=0)
        store.entity_centers[:] = np.array([[5.0], [3.0]])
        store.relation_centers[:] = 0.0
        store.relation_centers[0] = 2.0
        assert ptranse_score(0, [(0, True)], 1, store) == 0.0

    def test_two_hop_composition(self):
        store = init_random(1, 2, 2, seed=0)
        store.entity_centers[:] = np.array([[0.0], [7.0]])
        store.relation_centers[:] = 0.0
        store.relation_centers[0] = 2.0
        store.relation_centers[1] = 4.0
        assert ptranse_score(0, [(0, False), (1, False)], 1, store) == -1.0

    def test_empty_path_rejected(self):
        store = init_random(2, 2, 1, seed=0)
        with pytest.raises(ValidationError):
            ptranse_score(0, [], 1, store)
