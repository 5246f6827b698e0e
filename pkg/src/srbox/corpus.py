"""Corpus data model: annotated documents, validation, and sequence chunking.

The input is a line-delimited JSON file, one document per line:

    {"id": str, "tokens": [str],
     "mentions": [{"entity": str, "start": int, "end": int}],
     "triplets": [{"head": str, "relation": str, "tail": str}]}

Token indices are 0-based and span ends are inclusive. Entity and relation
ids are interned to dense integer indices in order of first appearance, so
the same file bytes always produce the same id assignment.

Documents are concatenated in file order and split into fixed-length token
windows (sequences). A sequence carries every triplet of every document it
covers whose head and tail entities both have at least one mention lying
fully inside the window; this is what allows triplets from different
documents to combine into cross-document structures downstream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from srbox.errors import ParseError, ValidationError


@dataclass(frozen=True)
class Mention:
    """An entity mention: token span [start, end], ends inclusive."""

    entity: int
    start: int
    end: int


@dataclass(frozen=True)
class Triplet:
    """A (head, relation, tail) assertion, attributed to the document it came from."""

    head: int
    relation: int
    tail: int
    doc: int

    def key(self) -> tuple[int, int, int]:
        return (self.head, self.relation, self.tail)


@dataclass(frozen=True)
class Document:
    doc_id: str
    tokens: tuple[str, ...]
    mentions: tuple[Mention, ...]
    triplets: tuple[Triplet, ...]


@dataclass(frozen=True)
class Sequence:
    """A fixed-length token window over the concatenated corpus.

    ``entities`` are the entities with at least one mention fully inside the
    window; they double as the same-text negative-sampling pool. ``triplets``
    is the deduplicated union over covered documents, restricted to triplets
    whose endpoints are both in ``entities``.
    """

    seq_id: int
    start: int
    stop: int
    doc_ids: tuple[int, ...]
    triplets: tuple[Triplet, ...]
    entities: tuple[int, ...]

    def __len__(self) -> int:
        return self.stop - self.start


@dataclass
class Corpus:
    documents: list[Document]
    entity_ids: list[str]
    relation_ids: list[str]
    entity_index: dict[str, int] = field(repr=False)
    relation_index: dict[str, int] = field(repr=False)

    @property
    def n_entities(self) -> int:
        return len(self.entity_ids)

    @property
    def n_relations(self) -> int:
        return len(self.relation_ids)

    @property
    def n_tokens(self) -> int:
        return sum(len(d.tokens) for d in self.documents)

    def doc_offsets(self) -> list[int]:
        """Global token offset of each document under file-order concatenation."""
        offsets = []
        pos = 0
        for doc in self.documents:
            offsets.append(pos)
            pos += len(doc.tokens)
        return offsets


def _intern(name: str, index: dict[str, int], names: list[str]) -> int:
    idx = index.get(name)
    if idx is None:
        idx = len(names)
        index[name] = idx
        names.append(name)
    return idx


def load_corpus(path: str | Path) -> Corpus:
    """Parse and validate a corpus file.

    Raises ParseError for malformed records and ValidationError for records
    that parse but violate an invariant (span out of range, self-loop
    triplet, triplet referencing an entity never mentioned anywhere in the
    corpus). Messages name the 1-based line number.
    """
    path = Path(path)
    entity_index: dict[str, int] = {}
    relation_index: dict[str, int] = {}
    entity_ids: list[str] = []
    relation_ids: list[str] = []
    documents: list[Document] = []
    mentioned: set[int] = set()
    # (line, entity) pairs to verify once the whole corpus is read: a triplet
    # may legitimately reference an entity first mentioned in a later document.
    pending: list[tuple[int, int]] = []
    seen_doc_ids: set[str] = set()

    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}: malformed record: {exc}") from exc
            if not isinstance(record, dict):
                raise ParseError(f"line {lineno}: record is not an object")
            try:
                doc_id = record["id"]
                tokens = record["tokens"]
                raw_mentions = record.get("mentions", [])
                raw_triplets = record.get("triplets", [])
            except KeyError as exc:
                raise ParseError(f"line {lineno}: missing field {exc}") from exc
            if not isinstance(doc_id, str) or not isinstance(tokens, list):
                raise ParseError(f"line {lineno}: 'id' must be a string and 'tokens' a list")
            if doc_id in seen_doc_ids:
                raise ValidationError(f"line {lineno}: duplicate document id {doc_id!r}")
            seen_doc_ids.add(doc_id)

            n_tok = len(tokens)
            doc_idx = len(documents)
            mentions = []
            for m in raw_mentions:
                try:
                    ent_name, start, end = m["entity"], m["start"], m["end"]
                except (KeyError, TypeError) as exc:
                    raise ParseError(f"line {lineno}: malformed mention {m!r}") from exc
                if not (0 <= start <= end < n_tok):
                    raise ValidationError(
                        f"line {lineno}: mention span ({start}, {end}) outside "
                        f"document of {n_tok} tokens"
                    )
                ent = _intern(ent_name, entity_index, entity_ids)
                mentioned.add(ent)
                mentions.append(Mention(ent, start, end))

            triplets = []
            for t in raw_triplets:
                try:
                    head_name, rel_name, tail_name = t["head"], t["relation"], t["tail"]
                except (KeyError, TypeError) as exc:
                    raise ParseError(f"line {lineno}: malformed triplet {t!r}") from exc
                if head_name == tail_name:
                    raise ValidationError(
                        f"line {lineno}: self-loop triplet on {head_name!r} rejected"
                    )
                head = _intern(head_name, entity_index, entity_ids)
                tail = _intern(tail_name, entity_index, entity_ids)
                rel = _intern(rel_name, relation_index, relation_ids)
                pending.append((lineno, head))
                pending.append((lineno, tail))
                triplets.append(Triplet(head, rel, tail, doc_idx))

            documents.append(
                Document(doc_id, tuple(tokens), tuple(mentions), tuple(triplets))
            )

    for lineno, ent in pending:
        if ent not in mentioned:
            raise ValidationError(
                f"line {lineno}: triplet references entity {entity_ids[ent]!r} "
                f"with no mention anywhere in the corpus"
            )

    return Corpus(documents, entity_ids, relation_ids, entity_index, relation_index)


def chunk_sequences(corpus: Corpus, seq_len: int) -> list[Sequence]:
    """Split the concatenated corpus into consecutive ``seq_len``-token windows.

    All windows have exactly ``seq_len`` tokens except possibly the last. A
    mention counts as inside a window only when its whole span is; triplets
    whose endpoint mentions straddle a boundary are dropped from both sides.
    """
    if seq_len < 1:
        raise ValidationError(f"seq_len must be >= 1, got {seq_len}")

    offsets = corpus.doc_offsets()
    total = corpus.n_tokens
    sequences: list[Sequence] = []
    for seq_id, w_start in enumerate(range(0, total, seq_len)):
        w_stop = min(w_start + seq_len, total)
        doc_ids = []
        window_entities: set[int] = set()
        for d, doc in enumerate(corpus.documents):
            d_start, d_stop = offsets[d], offsets[d] + len(doc.tokens)
            if d_start >= w_stop or d_stop <= w_start:
                continue
            doc_ids.append(d)
            for m in doc.mentions:
                if d_start + m.start >= w_start and d_start + m.end < w_stop:
                    window_entities.add(m.entity)
        by_key: dict[tuple[int, int, int], Triplet] = {}
        for d in doc_ids:
            for t in corpus.documents[d].triplets:
                if t.head in window_entities and t.tail in window_entities:
                    by_key.setdefault(t.key(), t)
        triplets = tuple(by_key[k] for k in sorted(by_key))
        sequences.append(
            Sequence(
                seq_id=seq_id,
                start=w_start,
                stop=w_stop,
                doc_ids=tuple(doc_ids),
                triplets=triplets,
                entities=tuple(sorted(window_entities)),
            )
        )
    return sequences
