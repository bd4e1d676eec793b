"""Passage store and Okapi BM25 retriever."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from steprag.text import terms

INDEX_FORMAT = "steprag-index"
INDEX_VERSION = 1
MAX_PASSAGE_TOKENS = 256
PASSAGE_OVERLAP = 32


@dataclass(frozen=True)
class Passage:
    id: str
    title: str
    text: str
    tokens: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.text:
            raise ValueError(f"passage {self.id!r} has empty text")
        if not self.tokens:
            object.__setattr__(self, "tokens", tuple(terms(self.text)))


@dataclass(frozen=True)
class RetrievalResult:
    passage_id: str
    score: float
    rank: int


@dataclass(frozen=True, eq=True)
class CorpusIndex:
    passages: dict[str, Passage]
    postings: dict[str, tuple[tuple[str, int], ...]]
    doc_lengths: dict[str, int]
    avg_doc_length: float
    doc_count: int
    k1: float = 1.2
    b: float = 0.75
    _df: dict[str, int] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        self._df.update({t: len(p) for t, p in self.postings.items()})

    def idf(self, term: str) -> float:
        df = self._df.get(term, 0)
        return math.log(1.0 + (self.doc_count - df + 0.5) / (df + 0.5))

    def passage(self, pid: str) -> Passage:
        return self.passages[pid]


def split_long_passage(p: Passage, max_tokens: int = MAX_PASSAGE_TOKENS,
                       overlap: int = PASSAGE_OVERLAP) -> list[Passage]:
    """Split passages longer than ``max_tokens`` words into overlapping windows."""
    words = p.text.split()
    if len(words) <= max_tokens:
        return [p]
    out = []
    step = max_tokens - overlap
    for n, start in enumerate(range(0, len(words), step)):
        chunk = words[start : start + max_tokens]
        out.append(Passage(f"{p.id}#{n}", p.title, " ".join(chunk)))
        if start + max_tokens >= len(words):
            break
    return out


def build_index(passages: Iterable[Passage], k1: float = 1.2, b: float = 0.75) -> CorpusIndex:
    passages = list(passages)
    if not passages:
        raise ValueError("empty passage list")
    store: dict[str, Passage] = {}
    for p in passages:
        if p.id in store:
            raise ValueError(f"duplicate passage id: {p.id}")
        store[p.id] = p

    postings: dict[str, list[tuple[str, int]]] = {}
    lengths = {}
    for pid in sorted(store):
        toks = store[pid].tokens
        lengths[pid] = len(toks)
        for term, tf in sorted(Counter(toks).items()):
            postings.setdefault(term, []).append((pid, tf))
    avg = sum(lengths.values()) / len(lengths)
    return CorpusIndex(
        passages=store,
        postings={t: tuple(v) for t, v in postings.items()},
        doc_lengths=lengths,
        avg_doc_length=avg,
        doc_count=len(store),
        k1=k1,
        b=b,
    )


def _score_all(index: CorpusIndex, query: str) -> dict[str, float]:
    k1, b, avgdl = index.k1, index.b, index.avg_doc_length
    scores: dict[str, float] = {}
    # sorted term order keeps float summation order fixed
    for term in sorted(set(terms(query))):
        plist = index.postings.get(term)
        if not plist:
            continue
        idf = index.idf(term)
        for pid, tf in plist:
            norm = tf + k1 * (1.0 - b + b * index.doc_lengths[pid] / avgdl)
            scores[pid] = scores.get(pid, 0.0) + idf * tf * (k1 + 1.0) / norm
    return scores


def _ranked(scores: dict[str, float]) -> list[tuple[str, float]]:
    return sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))


def retrieve(index: CorpusIndex, query: str, k: int = 5) -> list[RetrievalResult]:
    if k < 1:
        raise ValueError("k must be >= 1")
    ranked = _ranked(_score_all(index, query))[:k]
    return [RetrievalResult(pid, s, r) for r, (pid, s) in enumerate(ranked, start=1)]


def score_distribution(index: CorpusIndex, query: str, n: int = 100,
                       required_terms: Iterable[str] = ()) -> list[tuple[str, float]]:
    """Normalize BM25 scores of the top ``n`` matching passages into a distribution.

    ``required_terms`` restricts matches to passages containing every listed term,
    which is how entity-coverage queries keep only documents mentioning the entity.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    scores = _score_all(index, query)
    req = [t for t in required_terms]
    if req:
        allowed = None
        for t in req:
            ids = {pid for pid, _ in index.postings.get(t, ())}
            allowed = ids if allowed is None else allowed & ids
        scores = {pid: s for pid, s in scores.items() if pid in allowed}
    ranked = [(pid, s) for pid, s in _ranked(scores)[:n]]
    total = math.fsum(s for _, s in ranked)
    if not ranked:
        return []
    if total <= 0.0:
        return [(pid, 1.0 / len(ranked)) for pid, _ in ranked]
    return [(pid, s / total) for pid, s in ranked]


# -- persistence ---------------------------------------------------------------

def read_corpus(path: str | Path) -> list[Passage]:
    """Read a line-delimited corpus; long passages are split at ingestion."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                p = Passage(str(rec["id"]), str(rec.get("title", "")), str(rec["text"]))
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: missing field {exc}") from None
            out.extend(split_long_passage(p))
    return out


def write_corpus(passages: Iterable[Passage], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in passages:
            fh.write(json.dumps({"id": p.id, "title": p.title, "text": p.text}) + "\n")


def save_index(index: CorpusIndex, path: str | Path) -> None:
    doc = {
        "format": INDEX_FORMAT,
        "version": INDEX_VERSION,
        "k1": index.k1,
        "b": index.b,
        "avg_doc_length": index.avg_doc_length,
        "doc_count": index.doc_count,
        "passages": [[p.id, p.title, p.text, list(p.tokens)] for p in index.passages.values()],
        "doc_lengths": index.doc_lengths,
        "postings": {t: [list(x) for x in v] for t, v in index.postings.items()},
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_index(path: str | Path) -> CorpusIndex:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != INDEX_FORMAT or doc.get("version") != INDEX_VERSION:
        raise ValueError(f"{path}: not a version-{INDEX_VERSION} {INDEX_FORMAT} file")
    passages = {pid: Passage(pid, title, text, tuple(toks)) for pid, title, text, toks in doc["passages"]}
    return CorpusIndex(
        passages=passages,
        postings={t: tuple((pid, tf) for pid, tf in v) for t, v in doc["postings"].items()},
        doc_lengths={k: int(v) for k, v in doc["doc_lengths"].items()},
        avg_doc_length=float(doc["avg_doc_length"]),
        doc_count=int(doc["doc_count"]),
        k1=float(doc["k1"]),
        b=float(doc["b"]),
    )
