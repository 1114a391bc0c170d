"""Two-stage knowledge selection: BM25 recall, reranking, and sigmoid score fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .corpus import KnowledgeBase, KnowledgeEntry, tokenize
from .index import InvertedIndex, retrieve
from .metrics import unigram_f1

_CLAMP = 1e-6

FUSION_MODES = ("minmax", "raw")


class RerankScorer:
    """Fine-grained relevance scorer applied to the retrieved candidates.

    Implementations must be pure and deterministic given (query, entry).
    """

    name = "base"

    def score(self, query: str, entry: KnowledgeEntry) -> float:
        raise NotImplementedError


class LexicalF1Reranker(RerankScorer):
    """Reference reranker: unigram-F1 overlap mapped to a logit."""

    name = "lexical-f1"

    def score(self, query: str, entry: KnowledgeEntry) -> float:
        f1 = unigram_f1(query, entry.text)
        p = min(max(f1, _CLAMP), 1.0 - _CLAMP)
        return math.log(p / (1.0 - p))


_RERANKERS: dict[str, type[RerankScorer]] = {}


def register_reranker(cls: type[RerankScorer]) -> type[RerankScorer]:
    _RERANKERS[cls.name] = cls
    return cls


register_reranker(LexicalF1Reranker)


def get_reranker(name: str) -> RerankScorer:
    if name not in _RERANKERS:
        raise ValueError(f"unknown reranker {name!r}; available: {sorted(_RERANKERS)}")
    return _RERANKERS[name]()


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def fuse(s_retrieval: float, s_rerank: float) -> float:
    """Selection probability: sigmoid of the summed (normalized) two-stage scores."""
    return sigmoid(s_retrieval + s_rerank)


def minmax_normalize(scores: list[float]) -> list[float]:
    """Per-candidate-list min-max to [0, 1]; a constant list maps to all 0.5."""
    lo, hi = min(scores), max(scores)
    if hi == lo:
        return [0.5] * len(scores)
    return [(s - lo) / (hi - lo) for s in scores]


@dataclass(frozen=True)
class SelectionCandidate:
    knowledge_id: str
    s_retrieval: float
    s_rerank: float
    fused_prob: float


def select(
    idx: InvertedIndex,
    kb: KnowledgeBase,
    reranker: RerankScorer,
    query: str,
    top_n: int = 50,
    top_k: int = 1,
    fusion: str = "minmax",
) -> list[SelectionCandidate]:
    """Retrieve top_n, rerank, fuse the two scores, and return the top_k knowledge.

    Raw retrieval and rerank scores live on incomparable scales, so each score
    vector is min-max normalized over the candidate list before fusion (mode
    "raw" sums the unnormalized scores instead). Ties break by ascending id.
    """
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    if top_k > top_n:
        raise ValueError("top_k must not exceed top_n")
    if fusion not in FUSION_MODES:
        raise ValueError(f"unknown fusion mode {fusion!r}")
    hits = retrieve(idx, tokenize(query), top_n)
    if not hits:
        return []
    retrieval_scores = [h.score for h in hits]
    rerank_scores = [reranker.score(query, kb.get(h.doc_id)) for h in hits]
    if fusion == "minmax":
        r_norm = minmax_normalize(retrieval_scores)
        k_norm = minmax_normalize(rerank_scores)
    else:
        r_norm, k_norm = retrieval_scores, rerank_scores
    candidates = [
        SelectionCandidate(
            knowledge_id=h.doc_id,
            s_retrieval=h.score,
            s_rerank=rr,
            fused_prob=fuse(rn, kn),
        )
        for h, rr, rn, kn in zip(hits, rerank_scores, r_norm, k_norm)
    ]
    candidates.sort(key=lambda c: (-c.fused_prob, c.knowledge_id))
    return candidates[:top_k]


@dataclass
class KnowledgeSelector:
    """Bundled index + corpus + reranker with pipeline-wide selection defaults."""

    index: InvertedIndex
    kb: KnowledgeBase
    reranker: RerankScorer
    top_n: int = 50
    top_k: int = 1
    fusion: str = "minmax"

    def select(self, query: str, top_k: int | None = None) -> list[SelectionCandidate]:
        return select(
            self.index,
            self.kb,
            self.reranker,
            query,
            top_n=self.top_n,
            top_k=self.top_k if top_k is None else top_k,
            fusion=self.fusion,
        )
