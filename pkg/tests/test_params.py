"""Tests for the parameter store, contextual initialization, and file formats."""

import json

import numpy as np
import pytest

from srbox.corpus import load_corpus
from srbox.errors import ParseError, ValidationError
from srbox.params import (
    CHECKPOINT_MAGIC,
    ContextualVectors,
    entity_center_from_context,
    import_contextual,
    init_random,
    load,
    load_vectors,
    save,
    write_vectors,
)


def write_corpus(path, docs):
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            fh.write(json.dumps(d) + "\n")
    return path


class TestInitRandom:
    def test_deterministic(self):
        a = init_random(8, 10, 3, seed=5)
        b = init_random(8, 10, 3, seed=5)
        assert a.equals(b)
        c = init_random(8, 10, 3, seed=6)
        assert not a.equals(c)

    def test_shapes_and_bounds(self):
        store = init_random(16, 7, 4, seed=0)
        bound = 0.5 / np.sqrt(16)
        assert store.entity_centers.shape == (7, 16)
        assert store.relation_centers.shape == (8, 16)
        assert store.relation_offsets.shape == (1, 16)
        assert np.all(np.abs(store.entity_centers) <= bound)
        assert np.all(np.abs(store.relation_centers) <= bound)
        assert np.all(store.relation_offsets == 0.1)

    def test_per_relation_offsets(self):
        store = init_random(4, 3, 5, seed=0, offset_mode="per_relation")
        assert store.relation_offsets.shape == (10, 4)

    def test_bad_arguments(self):
        with pytest.raises(ValidationError):
            init_random(0, 3, 2, seed=0)
        with pytest.raises(ValidationError):
            init_random(4, 3, 2, seed=0, offset_mode="fused")
        with pytest.raises(ValidationError):
            init_random(4, 3, 2, seed=0, entity_ids=["only-one"])

    def test_row_arithmetic(self):
        store = init_random(4, 3, 5, seed=0, offset_mode="per_relation")
        assert store.center_row(2, inverse=False) == 2
        assert store.center_row(2, inverse=True) == 7
        assert store.offset_row(2, inverse=True) == 7
        shared = init_random(4, 3, 5, seed=0)
        assert shared.offset_row(2, inverse=True) == 0

    def test_validate_catches_corruption(self):
        store = init_random(4, 3, 2, seed=0)
        store.relation_offsets[0, 0] = -0.5
        with pytest.raises(ValidationError):
            store.validate()
        store = init_random(4, 3, 2, seed=0)
        store.entity_centers[1, 1] = np.nan
        with pytest.raises(ValidationError):
            store.validate()

    def test_copy_is_independent(self):
        store = init_random(4, 3, 2, seed=0)
        dup = store.copy()
        assert store.equals(dup)
        dup.entity_centers[0, 0] += 1.0
        assert not store.equals(dup)


class TestContextualVectors:
    def test_span_mean(self):
        mat = np.array([[0.0, 0.0], [2.0, 4.0], [6.0, 8.0]])
        v = ContextualVectors(2, {"d0": mat})
        np.testing.assert_array_equal(v.span_mean("d0", 1, 2), [4.0, 6.0])
        np.testing.assert_array_equal(v.span_mean("d0", 0, 0), [0.0, 0.0])

    def test_span_errors(self):
        v = ContextualVectors(2, {"d0": np.zeros((2, 2))})
        with pytest.raises(ValidationError):
            v.span_mean("nope", 0, 0)
        with pytest.raises(ValidationError):
            v.span_mean("d0", 0, 5)

    def test_entity_center_multi_document(self):
        from srbox.corpus import Mention

        m0 = np.arange(8.0).reshape(4, 2)
        m1 = 10.0 + np.arange(6.0).reshape(3, 2)
        v = ContextualVectors(2, {"a": m0, "b": m1})
        mentions = [("a", Mention(0, 0, 1)), ("b", Mention(0, 2, 2))]
        got = entity_center_from_context(v, mentions)
        want = (0.5 * (m0[0] + m0[1]) + 0.5 * (m1[2] + m1[2])) / 2
        np.testing.assert_allclose(got, want, atol=1e-15)

    def test_no_mentions_rejected(self):
        v = ContextualVectors(2, {})
        with pytest.raises(ValidationError):
            entity_center_from_context(v, [])


def corpus_fixture(tmp_path):
    """Two documents; entity E2 is mentioned in both."""
    return load_corpus(
        write_corpus(
            tmp_path / "c.jsonl",
            [
                {
                    "id": "a",
                    "tokens": ["t0", "t1", "t2", "t3"],
                    "mentions": [
                        {"entity": "E1", "start": 0, "end": 1},
                        {"entity": "E2", "start": 3, "end": 3},
                    ],
                    "triplets": [{"head": "E1", "relation": "r", "tail": "E2"}],
                },
                {
                    "id": "b",
                    "tokens": ["u0", "u1"],
                    "mentions": [{"entity": "E2", "start": 0, "end": 0}],
                    "triplets": [],
                },
            ],
        )
    )


def vectors_fixture(rng):
    mats = {"a": rng.normal(size=(4, 3)), "b": rng.normal(size=(2, 3))}
    spans = {"a": {"r": (1, 2)}}
    return ContextualVectors(3, mats, spans)


class TestImportContextual:
    def test_centers_match_averaging_oracle(self, tmp_path):
        corpus = corpus_fixture(tmp_path)
        rng = np.random.default_rng(0)
        vectors = vectors_fixture(rng)
        store = init_random(3, corpus.n_entities, corpus.n_relations, seed=1)
        before_off = store.relation_offsets.copy()
        before_net = store.net.copy()
        import_contextual(corpus, vectors, store)

        a, b = vectors.matrices["a"], vectors.matrices["b"]
        e1 = 0.5 * (a[0] + a[1])
        e2 = (0.5 * (a[3] + a[3]) + 0.5 * (b[0] + b[0])) / 2
        np.testing.assert_allclose(store.entity_centers[corpus.entity_index["E1"]], e1, atol=1e-12)
        np.testing.assert_allclose(store.entity_centers[corpus.entity_index["E2"]], e2, atol=1e-12)

        r_fwd = 0.5 * (a[1] + a[2])
        np.testing.assert_allclose(store.relation_centers[0], r_fwd, atol=1e-12)
        np.testing.assert_allclose(store.relation_centers[1], -r_fwd, atol=1e-12)

        np.testing.assert_array_equal(store.relation_offsets, before_off)
        for name in ("att_w1", "inner_w2", "outer_b2"):
            np.testing.assert_array_equal(getattr(store.net, name), getattr(before_net, name))

    def test_dim_mismatch_names_both(self, tmp_path):
        corpus = corpus_fixture(tmp_path)
        vectors = vectors_fixture(np.random.default_rng(0))
        store = init_random(5, corpus.n_entities, corpus.n_relations, seed=1)
        with pytest.raises(ValidationError, match="3.*5|5.*3"):
            import_contextual(corpus, vectors, store)

    def test_missing_entity_coverage_lists_ids(self, tmp_path):
        # E3 is mentioned only in document b; dropping b's vectors leaves it
        # uncovered, and the error must name it.
        corpus = load_corpus(
            write_corpus(
                tmp_path / "c2.jsonl",
                [
                    {
                        "id": "a",
                        "tokens": ["t0", "t1"],
                        "mentions": [
                            {"entity": "E1", "start": 0, "end": 0},
                            {"entity": "E2", "start": 1, "end": 1},
                        ],
                        "triplets": [{"head": "E1", "relation": "r", "tail": "E2"}],
                    },
                    {
                        "id": "b",
                        "tokens": ["u0"],
                        "mentions": [{"entity": "E3", "start": 0, "end": 0}],
                        "triplets": [],
                    },
                ],
            )
        )
        vectors = ContextualVectors(
            3, {"a": np.zeros((2, 3))}, {"a": {"r": (0, 1)}}
        )
        store = init_random(3, corpus.n_entities, corpus.n_relations, seed=1)
        with pytest.raises(ValidationError, match="E3"):
            import_contextual(corpus, vectors, store)

    def test_row_count_mismatch(self, tmp_path):
        corpus = corpus_fixture(tmp_path)
        vectors = vectors_fixture(np.random.default_rng(0))
        vectors.matrices["b"] = np.zeros((5, 3))
        store = init_random(3, corpus.n_entities, corpus.n_relations, seed=1)
        with pytest.raises(ValidationError, match="'b'"):
            import_contextual(corpus, vectors, store)

    def test_relation_span_for_unknown_document(self, tmp_path):
        corpus = corpus_fixture(tmp_path)
        vectors = vectors_fixture(np.random.default_rng(0))
        vectors.relation_spans["ghost"] = {"r": (0, 0)}
        store = init_random(3, corpus.n_entities, corpus.n_relations, seed=1)
        with pytest.raises(ValidationError, match="ghost"):
            import_contextual(corpus, vectors, store)

    def test_unknown_relation_id_ignored(self, tmp_path):
        corpus = corpus_fixture(tmp_path)
        vectors = vectors_fixture(np.random.default_rng(0))
        vectors.relation_spans["a"]["not_a_relation"] = (0, 0)
        store = init_random(3, corpus.n_entities, corpus.n_relations, seed=1)
        import_contextual(corpus, vectors, store)  # no error

    def test_missing_relation_coverage(self, tmp_path):
        corpus = corpus_fixture(tmp_path)
        vectors = vectors_fixture(np.random.default_rng(0))
        vectors.relation_spans = {}
        store = init_random(3, corpus.n_entities, corpus.n_relations, seed=1)
        with pytest.raises(ValidationError, match="r"):
            import_contextual(corpus, vectors, store)


class TestVectorsFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        vectors = vectors_fixture(rng)
        path = str(tmp_path / "v.ctx")
        write_vectors(path, vectors)
        back = load_vectors(path)
        assert back.dim == 3
        assert set(back.matrices) == {"a", "b"}
        for k in ("a", "b"):
            np.testing.assert_array_equal(back.matrices[k], vectors.matrices[k])
        assert back.relation_spans == {"a": {"r": (1, 2)}}

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "v.ctx"
        path.write_text("")
        with pytest.raises(ParseError):
            load_vectors(str(path))

    def test_truncated_payload(self, tmp_path):
        rng = np.random.default_rng(3)
        path = str(tmp_path / "v.ctx")
        write_vectors(path, vectors_fixture(rng))
        data = open(path, "rb").read()
        with open(path, "wb") as fh:
            fh.write(data[:-8])
        with pytest.raises(ParseError):
            load_vectors(path)

    def test_duplicate_document(self, tmp_path):
        mat = np.zeros((1, 2))
        path = str(tmp_path / "v.ctx")
        with open(path, "wb") as fh:
            for _ in range(2):
                fh.write(json.dumps({"id": "a", "rows": 1, "dim": 2}).encode() + b"\n")
                fh.write(mat.astype("<f8").tobytes())
        with pytest.raises(ParseError, match="'a'"):
            load_vectors(path)

    def test_dim_drift_between_documents(self, tmp_path):
        path = str(tmp_path / "v.ctx")
        with open(path, "wb") as fh:
            fh.write(json.dumps({"id": "a", "rows": 1, "dim": 2}).encode() + b"\n")
            fh.write(np.zeros((1, 2)).astype("<f8").tobytes())
            fh.write(json.dumps({"id": "b", "rows": 1, "dim": 3}).encode() + b"\n")
            fh.write(np.zeros((1, 3)).astype("<f8").tobytes())
        with pytest.raises(ParseError):
            load_vectors(path)


class TestCheckpoint:
    def test_round_trip_shared(self, tmp_path):
        store = init_random(6, 9, 4, seed=2)
        path = str(tmp_path / "p.ckpt")
        save(store, path)
        assert store.equals(load(path))

    def test_round_trip_per_relation(self, tmp_path):
        store = init_random(6, 9, 4, seed=2, offset_mode="per_relation")
        store.relation_offsets[3] = 0.0
        path = str(tmp_path / "p.ckpt")
        save(store, path)
        back = load(path)
        assert back.offset_mode == "per_relation"
        assert store.equals(back)

    def test_save_is_canonical(self, tmp_path):
        store = init_random(5, 4, 2, seed=9)
        p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
        save(store, p1)
        save(load(p1), p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_preserves_id_strings(self, tmp_path):
        store = init_random(3, 2, 1, seed=0, entity_ids=["x", "y"], relation_ids=["likes"])
        path = str(tmp_path / "p.ckpt")
        save(store, path)
        back = load(path)
        assert back.entity_ids == ["x", "y"]
        assert back.relation_ids == ["likes"]

    def test_expected_dim_mismatch_names_both(self, tmp_path):
        store = init_random(6, 3, 2, seed=0)
        path = str(tmp_path / "p.ckpt")
        save(store, path)
        with pytest.raises(ValidationError, match="6") as exc:
            load(path, expected_dim=8)
        assert "8" in str(exc.value)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "p.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 64)
        with pytest.raises(ParseError):
            load(str(path))

    def test_bad_version(self, tmp_path):
        store = init_random(3, 2, 1, seed=0)
        path = str(tmp_path / "p.ckpt")
        save(store, path)
        data = bytearray(open(path, "rb").read())
        data[len(CHECKPOINT_MAGIC)] = 99
        open(path, "wb").write(bytes(data))
        with pytest.raises(ParseError):
            load(path)

    def test_truncated(self, tmp_path):
        store = init_random(3, 2, 1, seed=0)
        path = str(tmp_path / "p.ckpt")
        save(store, path)
        data = open(path, "rb").read()
        open(path, "wb").write(data[: len(data) - 16])
        with pytest.raises(ParseError):
            load(path)
