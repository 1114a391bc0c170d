"""Knowledge base and dialogue corpus: JSONL loading, tokenization, context flattening.

All lexical operations in the pipeline (retrieval, reranking, metrics) share the
single tokenizer defined here.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

_TOKEN_RE = re.compile(r"[a-z0-9]+")

ROLES = ("user", "system")


class CorpusError(ValueError):
    """Malformed corpus file (bad JSON, missing fields, duplicate ids)."""


def tokenize(text: str) -> list[str]:
    """Lowercase and split on runs of non-alphanumeric characters.

    Empty segments are dropped; empty input gives an empty list.
    """
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class KnowledgeEntry:
    id: str
    text: str
    title: str | None = None

    def indexed_text(self) -> str:
        """Text as seen by the retriever: title (if any) concatenated before text."""
        if self.title:
            return f"{self.title} {self.text}"
        return self.text


class KnowledgeBase:
    """Immutable id-addressable collection of knowledge entries."""

    def __init__(self, entries: list[KnowledgeEntry]):
        self.entries = list(entries)
        self._by_id: dict[str, KnowledgeEntry] = {}
        for e in self.entries:
            if e.id in self._by_id:
                raise CorpusError(f"duplicate knowledge id: {e.id!r}")
            self._by_id[e.id] = e

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __contains__(self, entry_id: str) -> bool:
        return entry_id in self._by_id

    def get(self, entry_id: str) -> KnowledgeEntry:
        return self._by_id[entry_id]


@dataclass(frozen=True)
class Utterance:
    role: str
    text: str


@dataclass(frozen=True)
class Dialogue:
    id: str
    context: tuple[Utterance, ...]
    response: str
    gold_query: str | None = None
    gold_knowledge_id: str | None = None

    def last_utterance(self) -> str:
        return self.context[-1].text


def flatten_context(d: Dialogue, role_markers: bool = True) -> str:
    """Concatenate context utterances in order, joined by single spaces.

    With ``role_markers`` each utterance is prefixed by a literal "user:" or
    "system:" marker; the markers tokenize to ordinary tokens.
    """
    if role_markers:
        parts = [f"{u.role}: {u.text}" for u in d.context]
    else:
        parts = [u.text for u in d.context]
    return " ".join(parts)


def _parse_json_line(line: str, lineno: int, path: str) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CorpusError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from exc
    if not isinstance(obj, dict):
        raise CorpusError(f"{path}: line {lineno}: expected a JSON object")
    return obj


def _require(obj: dict, key: str, lineno: int, path: str):
    if key not in obj:
        raise CorpusError(f"{path}: line {lineno}: missing {key!r}")
    return obj[key]


def load_knowledge_base(path: str | Path) -> KnowledgeBase:
    """Load a knowledge base from JSONL, one ``{"id", "text", "title"?}`` object per line."""
    path = Path(path)
    entries: list[KnowledgeEntry] = []
    seen: set[str] = set()
    with path.open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            obj = _parse_json_line(line, lineno, str(path))
            entry_id = str(_require(obj, "id", lineno, str(path)))
            text = _require(obj, "text", lineno, str(path))
            if not isinstance(text, str) or not tokenize(text):
                raise CorpusError(f"{path}: line {lineno}: 'text' must tokenize to at least one token")
            if entry_id in seen:
                raise CorpusError(f"{path}: line {lineno}: duplicate knowledge id: {entry_id!r}")
            seen.add(entry_id)
            title = obj.get("title")
            entries.append(KnowledgeEntry(id=entry_id, text=text, title=title))
    return KnowledgeBase(entries)


def load_dialogues(path: str | Path) -> list[Dialogue]:
    """Load dialogues from JSONL per the dialogue wire format."""
    path = Path(path)
    dialogues: list[Dialogue] = []
    seen: set[str] = set()
    with path.open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            obj = _parse_json_line(line, lineno, str(path))
            dlg_id = str(_require(obj, "id", lineno, str(path)))
            if dlg_id in seen:
                raise CorpusError(f"{path}: line {lineno}: duplicate dialogue id: {dlg_id!r}")
            seen.add(dlg_id)
            raw_context = _require(obj, "context", lineno, str(path))
            if not isinstance(raw_context, list) or not raw_context:
                raise CorpusError(f"{path}: line {lineno}: 'context' must be a non-empty list")
            utterances = []
            for u in raw_context:
                role = u.get("role") if isinstance(u, dict) else None
                if role not in ROLES:
                    raise CorpusError(f"{path}: line {lineno}: utterance role must be one of {ROLES}")
                if "text" not in u or not isinstance(u["text"], str):
                    raise CorpusError(f"{path}: line {lineno}: utterance missing 'text'")
                utterances.append(Utterance(role=role, text=u["text"]))
            response = _require(obj, "response", lineno, str(path))
            if not isinstance(response, str):
                raise CorpusError(f"{path}: line {lineno}: 'response' must be a string")
            dialogues.append(
                Dialogue(
                    id=dlg_id,
                    context=tuple(utterances),
                    response=response,
                    gold_query=obj.get("gold_query"),
                    gold_knowledge_id=obj.get("gold_knowledge_id"),
                )
            )
    return dialogues


def save_knowledge_base(kb: KnowledgeBase, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as f:
        for e in kb:
            obj = {"id": e.id, "text": e.text}
            if e.title is not None:
                obj["title"] = e.title
            f.write(json.dumps(obj) + "\n")


def save_dialogues(dialogues: list[Dialogue], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as f:
        for d in dialogues:
            obj = {
                "id": d.id,
                "context": [{"role": u.role, "text": u.text} for u in d.context],
                "response": d.response,
            }
            if d.gold_query is not None:
                obj["gold_query"] = d.gold_query
            if d.gold_knowledge_id is not None:
                obj["gold_knowledge_id"] = d.gold_knowledge_id
            f.write(json.dumps(obj) + "\n")
