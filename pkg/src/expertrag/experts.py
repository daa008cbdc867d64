"""Modality-specific retrieval experts: corpus ingestion, indexing, BM25 search."""

from __future__ import annotations

import enum
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import kernels

BM25_K1 = 1.2
BM25_B = 0.75
DEFAULT_TOP_K = 3

_TOKEN_RE = re.compile(r"[^\W_]+")


class CorpusError(ValueError):
    """Raised for unreadable, malformed or inconsistent corpus input."""


class ExpertKind(str, enum.Enum):
    TEXT = "text"
    IMAGE = "image"
    TABLE = "table"

    @classmethod
    def parse(cls, value: str | ExpertKind) -> ExpertKind:
        if isinstance(value, ExpertKind):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValueError(f"unknown expert kind {value!r}; expected one of text, image, table") from None


def tokenize(text: str) -> list[str]:
    """Lowercase and split on anything that is not a letter or digit."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Table:
    header: tuple[str, ...]
    rows: tuple[tuple[str, ...], ...]


@dataclass(frozen=True)
class Document:
    id: str
    kind: ExpertKind
    title: str
    body: str
    source_ref: str | None = None
    image_ref: str | None = None
    table: Table | None = None

    def indexed_text(self) -> str:
        # table bodies already start with the title
        if self.kind is ExpertKind.TABLE or not self.title:
            return self.body
        return f"{self.title}\n{self.body}"

    def to_record(self) -> dict:
        rec = {"id": self.id, "kind": self.kind.value, "title": self.title, "body": self.body}
        if self.source_ref is not None:
            rec["source_ref"] = self.source_ref
        if self.image_ref is not None:
            rec["image_ref"] = self.image_ref
        if self.table is not None:
            rec["header"] = list(self.table.header)
            rec["rows"] = [list(r) for r in self.table.rows]
        return rec

    @classmethod
    def from_record(cls, rec: Mapping) -> Document:
        table = None
        if "header" in rec:
            table = Table(tuple(rec["header"]), tuple(tuple(r) for r in rec["rows"]))
        return cls(
            id=rec["id"],
            kind=ExpertKind.parse(rec["kind"]),
            title=rec.get("title", ""),
            body=rec["body"],
            source_ref=rec.get("source_ref"),
            image_ref=rec.get("image_ref"),
            table=table,
        )


@dataclass(frozen=True)
class Corpus:
    kind: ExpertKind
    documents: tuple[Document, ...]

    def __len__(self) -> int:
        return len(self.documents)


@dataclass(frozen=True)
class ScoredDocument:
    doc: Document
    score: float
    rank: int


# --- tables ----------------------------------------------------------------


def _escape(text: str, extra: str = "") -> str:
    out = text.replace("\\", "\\\\").replace("|", "\\|").replace("\n", "\\n")
    for ch in extra:
        out = out.replace(ch, "\\" + ch)
    return out


def serialize_table(header: Sequence, rows: Sequence[Sequence], title: str) -> str:
    """Linearize a table as ``title`` then one ``col: cell | col: cell`` line per row.

    Backslashes, ``|`` and newlines are backslash-escaped in every field, and
    ``:`` is additionally escaped in column names, so the output parses back
    unambiguously (see :func:`parse_table_text`).
    """
    if not header:
        raise CorpusError("table header is empty")
    cols = [_escape(str(h), ":") for h in header]
    lines = [_escape(str(title))]
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise CorpusError(f"row {i} has {len(row)} cells, header has {len(header)}")
        lines.append(" | ".join(f"{c}: {_escape(str(v))}" for c, v in zip(cols, row)))
    return "\n".join(lines)


def _split_unescaped(text: str, sep: str) -> list[str]:
    parts, buf, i = [], [], 0
    while i < len(text):
        if text[i] == "\\" and i + 1 < len(text):
            buf.append(text[i : i + 2])
            i += 2
        elif text.startswith(sep, i):
            parts.append("".join(buf))
            buf = []
            i += len(sep)
        else:
            buf.append(text[i])
            i += 1
    parts.append("".join(buf))
    return parts


def _unescape(text: str) -> str:
    out, i = [], 0
    while i < len(text):
        if text[i] == "\\" and i + 1 < len(text):
            nxt = text[i + 1]
            out.append("\n" if nxt == "n" else nxt)
            i += 2
        else:
            out.append(text[i])
            i += 1
    return "".join(out)


def parse_table_text(text: str) -> tuple[str, list[str], list[list[str]]]:
    """Inverse of :func:`serialize_table` for tables with at least one row."""
    lines = text.split("\n")
    title = _unescape(lines[0])
    header: list[str] = []
    rows = []
    for line in lines[1:]:
        cols, cells = [], []
        for pair in _split_unescaped(line, " | "):
            # column names have ':' escaped, so the first bare ": " is the separator
            col, *rest = _split_unescaped(pair, ": ")
            cols.append(_unescape(col))
            cells.append(_unescape(": ".join(rest)))
        header = cols
        rows.append(cells)
    return title, header, rows


# --- ingestion -------------------------------------------------------------


def _require_str(rec: Mapping, key: str, lineno: int) -> str:
    value = rec.get(key)
    if not isinstance(value, str):
        raise CorpusError(f"line {lineno}: field {key!r} missing or not a string")
    return value


def _parse_record(rec: Mapping, kind: ExpertKind, lineno: int) -> Document:
    doc_id = _require_str(rec, "id", lineno).strip()
    if not doc_id:
        raise CorpusError(f"line {lineno}: empty id")
    title = rec.get("title", "")
    if not isinstance(title, str):
        raise CorpusError(f"line {lineno}: field 'title' is not a string")
    source_ref = rec.get("source_ref")
    if kind is ExpertKind.TABLE:
        header, rows = rec.get("header"), rec.get("rows")
        if not isinstance(header, list) or not isinstance(rows, list) or not all(isinstance(r, list) for r in rows):
            raise CorpusError(f"line {lineno}: table records need list fields 'header' and 'rows'")
        try:
            body = serialize_table(header, rows, title)
        except CorpusError as exc:
            raise CorpusError(f"line {lineno}: {exc}") from None
        table = Table(tuple(str(h) for h in header), tuple(tuple(str(c) for c in r) for r in rows))
        doc = Document(doc_id, kind, title, body, source_ref=source_ref, table=table)
    else:
        body = _require_str(rec, "body", lineno)
        image_ref = rec.get("image_ref") if kind is ExpertKind.IMAGE else None
        doc = Document(doc_id, kind, title, body.strip(), source_ref=source_ref, image_ref=image_ref)
    if not doc.body.strip():
        raise CorpusError(f"line {lineno}: empty body")
    return doc


def ingest_corpus(path: str | Path, kind: ExpertKind | str) -> Corpus:
    """Load a JSON-lines corpus file for one expert.

    Text and image records carry ``id``, ``title``, ``body`` (image records may
    add ``image_ref``); table records carry ``id``, ``title``, ``header`` and
    ``rows`` and are linearized with :func:`serialize_table`.
    """
    kind = ExpertKind.parse(kind)
    docs: list[Document] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise CorpusError(f"line {lineno}: record is not an object")
            doc = _parse_record(rec, kind, lineno)
            if doc.id in seen:
                raise CorpusError(f"duplicate id {doc.id!r} on lines {seen[doc.id]} and {lineno}")
            seen[doc.id] = lineno
            docs.append(doc)
    if not docs:
        raise CorpusError(f"{path}: corpus file is empty")
    return Corpus(kind, tuple(docs))


# --- index -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ExpertIndex:
    """Immutable inverted index over one expert's corpus.

    Documents are held in id order; ``postings`` maps each term to
    ``(doc_id, term_frequency)`` pairs in that order.
    """

    kind: ExpertKind
    documents: Mapping[str, Document]
    postings: Mapping[str, tuple[tuple[str, int], ...]]
    doc_lengths: Mapping[str, int]
    avg_doc_length: float
    doc_count: int
    _doc_ids: tuple[str, ...] = field(repr=False)
    _term_spans: Mapping[str, tuple[int, int]] = field(repr=False)
    _post_doc: np.ndarray = field(repr=False)
    _post_tf: np.ndarray = field(repr=False)
    _len_arr: np.ndarray = field(repr=False)

    def search(self, query: str, k: int = DEFAULT_TOP_K) -> list[ScoredDocument]:
        return retrieve(self, query, k)

    def document_frequency(self, term: str) -> int:
        return len(self.postings.get(term, ()))


def build_index(corpus: Corpus | Iterable[Document]) -> ExpertIndex:
    docs = list(corpus.documents if isinstance(corpus, Corpus) else corpus)
    if not docs:
        raise CorpusError("cannot index an empty corpus")
    kinds = {d.kind for d in docs}
    if len(kinds) != 1:
        raise CorpusError(f"corpus mixes expert kinds: {sorted(k.value for k in kinds)}")
    docs.sort(key=lambda d: d.id)
    for a, b in zip(docs, docs[1:]):
        if a.id == b.id:
            raise CorpusError(f"duplicate id {a.id!r}")

    lengths: dict[str, int] = {}
    inverted: dict[str, list[tuple[str, int]]] = {}
    for doc in docs:
        tokens = tokenize(doc.indexed_text())
        lengths[doc.id] = len(tokens)
        counts: dict[str, int] = {}
        for tok in tokens:
            counts[tok] = counts.get(tok, 0) + 1
        for term, tf in counts.items():
            inverted.setdefault(term, []).append((doc.id, tf))

    pos = {d.id: i for i, d in enumerate(docs)}
    spans: dict[str, tuple[int, int]] = {}
    post_doc, post_tf = [], []
    for term in sorted(inverted):
        start = len(post_doc)
        for doc_id, tf in inverted[term]:
            post_doc.append(pos[doc_id])
            post_tf.append(tf)
        spans[term] = (start, len(post_doc))

    def frozen(values, dtype):
        arr = np.asarray(values, dtype=dtype)
        arr.setflags(write=False)
        return arr

    ids = tuple(d.id for d in docs)
    return ExpertIndex(
        kind=next(iter(kinds)),
        documents=MappingProxyType({d.id: d for d in docs}),
        postings=MappingProxyType({t: tuple(p) for t, p in sorted(inverted.items())}),
        doc_lengths=MappingProxyType(lengths),
        avg_doc_length=sum(lengths.values()) / len(lengths),
        doc_count=len(docs),
        _doc_ids=ids,
        _term_spans=MappingProxyType(spans),
        _post_doc=frozen(post_doc, np.int64),
        _post_tf=frozen(post_tf, np.float64),
        _len_arr=frozen([lengths[i] for i in ids], np.float64),
    )


def bm25_idf(doc_count: int, doc_freq: int) -> float:
    # the +1 inside the log keeps idf positive for terms in over half the docs
    return math.log(1.0 + (doc_count - doc_freq + 0.5) / (doc_freq + 0.5))


def retrieve(index: ExpertIndex, query: str, k: int = DEFAULT_TOP_K) -> list[ScoredDocument]:
    """Top-``k`` documents by Okapi BM25 (k1=1.2, b=0.75).

    Each distinct query term counts once. Zero-score documents are dropped;
    equal scores are ordered by document id.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    terms = sorted(set(tokenize(query)))
    if not terms:
        raise ValueError(f"query {query!r} has no indexable tokens")
    terms = [t for t in terms if t in index._term_spans]
    if not terms:
        return []
    spans = np.array([index._term_spans[t] for t in terms], dtype=np.int64)
    idf = np.array([bm25_idf(index.doc_count, s[1] - s[0]) for s in spans])
    scores = kernels.bm25_scores(
        spans[:, 0].copy(), spans[:, 1].copy(), index._post_doc, index._post_tf,
        idf, index._len_arr, index.avg_doc_length, BM25_K1, BM25_B, index.doc_count,
    )
    hits = np.flatnonzero(scores > 0.0)
    # doc positions are already in id order, so a stable sort on -score breaks ties by id
    order = hits[np.argsort(-scores[hits], kind="stable")][:k]
    ids = index._doc_ids
    return [
        ScoredDocument(index.documents[ids[i]], float(scores[i]), rank)
        for rank, i in enumerate(order, 1)
    ]


# --- persistence -----------------------------------------------------------


def save_index(index: ExpertIndex, path: str | Path) -> None:
    payload = {
        "kind": index.kind.value,
        "bm25": {"k1": BM25_K1, "b": BM25_B},
        "doc_count": index.doc_count,
        "avg_doc_length": index.avg_doc_length,
        "documents": [index.documents[i].to_record() for i in index._doc_ids],
        "postings": {t: [list(p) for p in ps] for t, ps in index.postings.items()},
    }
    Path(path).write_text(json.dumps(payload, ensure_ascii=False), encoding="utf-8")


def load_index(path: str | Path) -> ExpertIndex:
    """Load a saved index; the postings are rebuilt and checked against the file."""
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    index = build_index(Document.from_record(r) for r in payload["documents"])
    stored = {t: tuple((d, int(f)) for d, f in ps) for t, ps in payload.get("postings", {}).items()}
    if stored and stored != dict(index.postings):
        raise CorpusError(f"{path}: stored postings do not match the documents")
    if index.kind.value != payload["kind"]:
        raise CorpusError(f"{path}: kind mismatch")
    return index


def index_filename(kind: ExpertKind) -> str:
    return f"{kind.value}.index.json"


def load_experts(directory: str | Path) -> dict[ExpertKind, ExpertIndex]:
    directory = Path(directory)
    experts = {}
    for kind in ExpertKind:
        path = directory / index_filename(kind)
        if not path.exists():
            raise CorpusError(f"missing index for {kind.value} expert: {path}")
        experts[kind] = load_index(path)
    return experts
