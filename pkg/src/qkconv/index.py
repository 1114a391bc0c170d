"""Inverted index with Okapi BM25 scoring for fast knowledge recall."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import KnowledgeBase, tokenize

K1 = 0.9
B = 0.4

_MAGIC = b"QKIX1"


@dataclass(frozen=True)
class RetrievalHit:
    doc_id: str
    score: float


@dataclass
class InvertedIndex:
    """Term postings plus the document statistics BM25 needs.

    Postings lists are sorted by doc id; idf uses the ln(1 + .) variant so
    scores are always non-negative.
    """

    postings: dict[str, list[tuple[str, int]]] = field(default_factory=dict)
    doc_len: dict[str, int] = field(default_factory=dict)
    avg_doc_len: float = 0.0
    num_docs: int = 0

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        return math.log((self.num_docs - df + 0.5) / (df + 0.5) + 1.0)

    def _tf_weight(self, tf: int, doc_id: str) -> float:
        norm = 1.0 - B + B * self.doc_len[doc_id] / self.avg_doc_len
        return tf * (K1 + 1.0) / (tf + K1 * norm)


def build_index(kb: KnowledgeBase) -> InvertedIndex:
    """Index every entry's title-plus-text; an empty kb gives a valid empty index."""
    postings: dict[str, dict[str, int]] = {}
    doc_len: dict[str, int] = {}
    for entry in kb:
        tokens = tokenize(entry.indexed_text())
        doc_len[entry.id] = len(tokens)
        for tok in tokens:
            counts = postings.setdefault(tok, {})
            counts[entry.id] = counts.get(entry.id, 0) + 1
    sorted_postings = {
        term: sorted(counts.items()) for term, counts in sorted(postings.items())
    }
    num_docs = len(doc_len)
    avg = sum(doc_len.values()) / num_docs if num_docs else 0.0
    return InvertedIndex(postings=sorted_postings, doc_len=doc_len, avg_doc_len=avg, num_docs=num_docs)


def bm25_score(idx: InvertedIndex, query_tokens: list[str], doc_id: str) -> float:
    """Okapi BM25 score of one document; additive over query-term occurrences."""
    if doc_id not in idx.doc_len:
        raise KeyError(f"unknown doc id: {doc_id!r}")
    score = 0.0
    for tok in query_tokens:
        plist = idx.postings.get(tok)
        if not plist:
            continue
        tf = 0
        for candidate, freq in plist:
            if candidate == doc_id:
                tf = freq
                break
        if tf == 0:
            continue
        score += idx.idf(tok) * idx._tf_weight(tf, doc_id)
    return score


def retrieve(idx: InvertedIndex, query_tokens: list[str], top_n: int = 50) -> list[RetrievalHit]:
    """Top ``top_n`` documents with positive BM25 score, ties broken by ascending doc id."""
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    scores: dict[str, float] = {}
    for tok in query_tokens:
        plist = idx.postings.get(tok)
        if not plist:
            continue
        idf = idx.idf(tok)
        for doc_id, tf in plist:
            scores[doc_id] = scores.get(doc_id, 0.0) + idf * idx._tf_weight(tf, doc_id)
    ranked = sorted(
        ((doc_id, s) for doc_id, s in scores.items() if s > 0.0),
        key=lambda item: (-item[1], item[0]),
    )
    return [RetrievalHit(doc_id=doc_id, score=s) for doc_id, s in ranked[:top_n]]


def save_index(idx: InvertedIndex, path: str | Path) -> None:
    payload = {
        "postings": {t: [[d, tf] for d, tf in pl] for t, pl in idx.postings.items()},
        "doc_len": idx.doc_len,
        "avg_doc_len": idx.avg_doc_len,
        "num_docs": idx.num_docs,
    }
    Path(path).write_bytes(_MAGIC + json.dumps(payload).encode("utf-8"))


def load_index(path: str | Path) -> InvertedIndex:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ValueError(f"{path}: not an index file (bad magic bytes)")
    payload = json.loads(raw[len(_MAGIC):].decode("utf-8"))
    postings = {t: [(d, int(tf)) for d, tf in pl] for t, pl in payload["postings"].items()}
    return InvertedIndex(
        postings=postings,
        doc_len={d: int(n) for d, n in payload["doc_len"].items()},
        avg_doc_len=float(payload["avg_doc_len"]),
        num_docs=int(payload["num_docs"]),
    )
