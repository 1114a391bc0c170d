"""Evaluation metrics for grounded dialogue: lexical overlap, selection ranking, and gated scores.

Every lexical metric uses the shared corpus tokenizer, so values are comparable
across metrics. All values are in [0, 1]; tables conventionally report them x100.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

from .corpus import Dialogue, KnowledgeBase, flatten_context, tokenize


def _f1_from_counts(overlap: float, pred_total: float, ref_total: float) -> float:
    if pred_total == 0 or ref_total == 0 or overlap == 0:
        return 0.0
    precision = overlap / pred_total
    recall = overlap / ref_total
    return 2 * precision * recall / (precision + recall)


def unigram_f1(pred: str, ref: str) -> float:
    """Token-multiset F1 with clipped counts; 0 if either side is empty."""
    pred_tokens = Counter(tokenize(pred))
    ref_tokens = Counter(tokenize(ref))
    overlap = sum((pred_tokens & ref_tokens).values())
    return _f1_from_counts(overlap, sum(pred_tokens.values()), sum(ref_tokens.values()))


def exact_match(pred: str, ref: str) -> int:
    """1 iff the two strings tokenize identically (case/punctuation-insensitive)."""
    return int(tokenize(pred) == tokenize(ref))


def recall_at_k(ranked_ids: list[str], gold_id: str, k: int) -> int:
    return int(gold_id in ranked_ids[:k])


def mrr_at_10(ranked_ids: list[str], gold_id: str) -> float:
    """Reciprocal rank of the gold id, 0 if it is not in the top 10."""
    for rank, doc_id in enumerate(ranked_ids[:10], 1):
        if doc_id == gold_id:
            return 1.0 / rank
    return 0.0


def kr_f1(response: str, knowledge_text: str) -> float:
    """Overlap between a generated response and its selected knowledge (grounding degree)."""
    return unigram_f1(response, knowledge_text)


def kilt_gate(metric_value: float, recall_at_1: int) -> float:
    """Award the metric only when knowledge selection was accurate."""
    return metric_value if recall_at_1 == 1 else 0.0


class EntityLexicon:
    """Multiword entity lexicon with longest-match extraction over token streams."""

    def __init__(self, entities: list[str]):
        self.entities = list(entities)
        self._by_first: dict[str, list[tuple[str, ...]]] = {}
        for ent in self.entities:
            toks = tuple(tokenize(ent))
            if not toks:
                continue
            self._by_first.setdefault(toks[0], []).append(toks)
        for variants in self._by_first.values():
            variants.sort(key=len, reverse=True)

    def extract(self, text: str) -> set[str]:
        """Scan left to right, matching the longest lexicon entity at each position."""
        tokens = tokenize(text)
        found: set[str] = set()
        i = 0
        while i < len(tokens):
            matched = False
            for variant in self._by_first.get(tokens[i], ()):
                if tuple(tokens[i : i + len(variant)]) == variant:
                    found.add(" ".join(variant))
                    i += len(variant)
                    matched = True
                    break
            if not matched:
                i += 1
        return found


def entity_f1(pred: str, ref: str, lexicon: EntityLexicon) -> float | None:
    """Set-F1 over lexicon entities extracted from both strings.

    Returns None (example excluded) when the reference mentions no entity.
    """
    ref_entities = lexicon.extract(ref)
    if not ref_entities:
        return None
    pred_entities = lexicon.extract(pred)
    overlap = len(pred_entities & ref_entities)
    return _f1_from_counts(overlap, len(pred_entities), len(ref_entities))


def _ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(pred: str, ref: str) -> float:
    """Sentence BLEU-4 with brevity penalty and add-one smoothing on orders 2-4."""
    pred_tokens = tokenize(pred)
    ref_tokens = tokenize(ref)
    if not pred_tokens or not ref_tokens:
        return 0.0
    log_precisions = 0.0
    for n in range(1, 5):
        pred_ngrams = _ngram_counts(pred_tokens, n)
        ref_ngrams = _ngram_counts(ref_tokens, n)
        matches = sum((pred_ngrams & ref_ngrams).values())
        total = sum(pred_ngrams.values())
        if n == 1:
            if matches == 0:
                return 0.0
            p_n = matches / total
        else:
            p_n = (matches + 1) / (total + 1)
        log_precisions += 0.25 * math.log(p_n)
    c, r = len(pred_tokens), len(ref_tokens)
    brevity = 1.0 if c >= r else math.exp(1 - r / c)
    return brevity * math.exp(log_precisions)


def _lcs_length(a: list[str], b: list[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(pred: str, ref: str) -> float:
    """LCS-based F-measure (beta = 1)."""
    pred_tokens = tokenize(pred)
    ref_tokens = tokenize(ref)
    if not pred_tokens or not ref_tokens:
        return 0.0
    lcs = _lcs_length(pred_tokens, ref_tokens)
    return _f1_from_counts(lcs, len(pred_tokens), len(ref_tokens))


def query_stats(queries: list[str], dialogues: list[Dialogue]) -> dict[str, float]:
    """Mean query length plus mean overlap-F1 against context and target response.

    Context-F1 is computed against the role-marker-free flattened context so
    marker tokens never inflate overlap.
    """
    if len(queries) != len(dialogues):
        raise ValueError("queries and dialogues must align one-to-one")
    if not queries:
        return {"length": 0.0, "context_f1": 0.0, "response_f1": 0.0}
    lengths, c_f1, r_f1 = [], [], []
    for q, d in zip(queries, dialogues):
        lengths.append(len(tokenize(q)))
        c_f1.append(unigram_f1(q, flatten_context(d, role_markers=False)))
        r_f1.append(unigram_f1(q, d.response))
    n = len(queries)
    return {
        "length": sum(lengths) / n,
        "context_f1": sum(c_f1) / n,
        "response_f1": sum(r_f1) / n,
    }


@dataclass
class EvalReport:
    """Per-example metric rows plus corpus-level means of the defined values."""

    per_example: list[dict] = field(default_factory=list)
    means: dict[str, float] = field(default_factory=dict)
    n_examples: int = 0

    def to_dict(self) -> dict:
        return {
            "n_examples": self.n_examples,
            "means": self.means,
            "per_example": self.per_example,
        }


_MEAN_FIELDS = (
    "f1",
    "em",
    "bleu",
    "rouge_l",
    "entity_f1",
    "kilt_f1",
    "kilt_rl",
    "recall_at_1",
    "mrr_at_10",
    "kr_f1",
    "context_f1",
    "response_f1",
    "query_len",
)


def evaluate_predictions(
    predictions: list[dict],
    dialogues: list[Dialogue],
    kb: KnowledgeBase,
    lexicon: EntityLexicon | None = None,
) -> EvalReport:
    """Score predictions ``{"dialogue_id", "query", "knowledge_id", "knowledge_ids"?, "response"}``.

    Examples without a gold knowledge id are excluded from the selection metrics
    (Recall@1, MRR@10 and the gated metrics) but still count toward F1/EM.
    """
    by_id = {d.id: d for d in dialogues}
    rows: list[dict] = []
    for pred in predictions:
        dlg = by_id.get(pred["dialogue_id"])
        if dlg is None:
            raise ValueError(f"prediction for unknown dialogue id: {pred['dialogue_id']!r}")
        response = pred.get("response", "")
        query = pred.get("query", "")
        knowledge_id = pred.get("knowledge_id")
        ranked_ids = pred.get("knowledge_ids")
        if ranked_ids is None:
            ranked_ids = [knowledge_id] if knowledge_id is not None else []
        knowledge_text = kb.get(knowledge_id).text if knowledge_id is not None and knowledge_id in kb else ""

        row: dict = {
            "dialogue_id": dlg.id,
            "f1": unigram_f1(response, dlg.response),
            "em": exact_match(response, dlg.response),
            "bleu": bleu(response, dlg.response),
            "rouge_l": rouge_l(response, dlg.response),
            "kr_f1": kr_f1(response, knowledge_text),
            "context_f1": unigram_f1(query, flatten_context(dlg, role_markers=False)),
            "response_f1": unigram_f1(query, dlg.response),
            "query_len": len(tokenize(query)),
        }
        if lexicon is not None:
            ent = entity_f1(response, dlg.response, lexicon)
            if ent is not None:
                row["entity_f1"] = ent
        if dlg.gold_knowledge_id is not None:
            r1 = recall_at_k(ranked_ids, dlg.gold_knowledge_id, 1)
            row["recall_at_1"] = r1
            row["mrr_at_10"] = mrr_at_10(ranked_ids, dlg.gold_knowledge_id)
            row["kilt_f1"] = kilt_gate(row["f1"], r1)
            row["kilt_rl"] = kilt_gate(row["rouge_l"], r1)
        rows.append(row)

    means: dict[str, float] = {}
    for name in _MEAN_FIELDS:
        values = [row[name] for row in rows if name in row]
        if values:
            means[name] = sum(values) / len(values)
    return EvalReport(per_example=rows, means=means, n_examples=len(rows))
