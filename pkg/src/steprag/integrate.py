"""Evidence compression, the injection protocol, speculative prefetch and latency accounting."""

from __future__ import annotations

import math
import re
import threading
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Sequence

from steprag.corpus import CorpusIndex, Passage, RetrievalResult, retrieve
from steprag.policy import information_need, next_relation
from steprag.rsus import extract_entities
from steprag.text import content_terms, split_sentences, terms

OPEN_TAG = "<retrieved>"
CLOSE_TAG = "</retrieved>"
CONTINUE_PROMPT = "Continue your reasoning, using this evidence if relevant."
MAX_PREFETCH = 4

_LINE_RE = re.compile(r"^\[([^\]]+)\] (.*)$")
_BLOCK_RE = re.compile(re.escape(OPEN_TAG) + r"\n(.*?)\n" + re.escape(CLOSE_TAG), re.S)


@dataclass(frozen=True)
class EvidenceSentence:
    passage_id: str
    text: str
    score: float


@dataclass(frozen=True)
class InjectionBlock:
    sentences: tuple[EvidenceSentence, ...]
    source_query: str
    input_tokens: int = field(default=0, compare=False)

    @property
    def tokens(self) -> int:
        return sum(len(s.text.split()) for s in self.sentences)


@dataclass(frozen=True)
class CompressionConfig:
    tau_rel: float = 0.45
    scorer: str = "token_cosine"

    def __post_init__(self):
        if not 0.0 <= self.tau_rel <= 1.0:
            raise ValueError("tau_rel must lie in [0, 1]")
        if self.scorer not in SCORERS:
            raise ValueError(f"unknown scorer {self.scorer!r}")


def token_cosine(sentence: str, query: str) -> float:
    """Cosine between content-term frequency vectors (stopwords dropped)."""
    a, b = Counter(content_terms(sentence)), Counter(content_terms(query))
    if not a or not b:
        return 0.0
    dot = sum(v * b.get(k, 0) for k, v in a.items())
    return dot / (math.sqrt(sum(v * v for v in a.values())) * math.sqrt(sum(v * v for v in b.values())))


SCORERS: dict[str, Callable[[str, str], float]] = {"token_cosine": token_cosine}


def compress(passages: Sequence[Passage], query: str,
             config: CompressionConfig = CompressionConfig()) -> InjectionBlock:
    """Keep sentences scoring >= tau_rel against the query, else the single best sentence."""
    if not passages:
        raise ValueError("empty passage list")
    scorer = SCORERS[config.scorer]
    scored = []
    total_tokens = 0
    for p in passages:
        for s in split_sentences(p.text):
            scored.append(EvidenceSentence(p.id, s, scorer(s, query)))
            total_tokens += len(s.split())
    kept = tuple(s for s in scored if s.score >= config.tau_rel)
    if not kept:
        # first maximum wins ties
        best = max(range(len(scored)), key=lambda i: (scored[i].score, -i))
        kept = (scored[best],)
    return InjectionBlock(kept, query, total_tokens)


def uncompressed(passages: Sequence[Passage], query: str) -> InjectionBlock:
    sents = tuple(EvidenceSentence(p.id, s, 1.0) for p in passages for s in split_sentences(p.text))
    return InjectionBlock(sents, query, sum(len(s.text.split()) for s in sents))


def retention_rate(block: InjectionBlock) -> float:
    return block.tokens / block.input_tokens if block.input_tokens else 0.0


# -- injection protocol ------------------------------------------------------------

def render_injection(block: InjectionBlock) -> str:
    if not block.sentences:
        raise ValueError("cannot render an empty injection block")
    lines = [OPEN_TAG]
    for s in block.sentences:
        if "\n" in s.text:
            raise ValueError("evidence sentences must be single-line")
        lines.append(f"[{s.passage_id}] {s.text}")
    lines += [CLOSE_TAG, CONTINUE_PROMPT]
    return "\n".join(lines)


def parse_injection(text: str) -> list[tuple[str, str]]:
    """(passage id, sentence) pairs from every injection block in ``text``."""
    out = []
    for body in _BLOCK_RE.findall(text):
        for line in body.split("\n"):
            m = _LINE_RE.match(line)
            if not m:
                raise ValueError(f"malformed evidence line: {line!r}")
            out.append((m.group(1), m.group(2)))
    return out


# -- speculative cache ---------------------------------------------------------------

def normalize_query(q: str) -> str:
    q = " ".join(q.lower().split())
    return q.rstrip(" ?.!")


@dataclass
class SpeculativeCache:
    capacity: int = 32
    entries: "OrderedDict[str, tuple[tuple[RetrievalResult, ...], int]]" = field(default_factory=OrderedDict)
    issued: int = 0
    hits: int = 0
    misses: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("cache capacity must be >= 1")

    def __contains__(self, query: str) -> bool:
        return normalize_query(query) in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def put(self, query: str, results: Sequence[RetrievalResult], step_index: int = 0) -> None:
        key = normalize_query(query)
        with self._lock:
            if key in self.entries:
                self.entries[key] = (tuple(results), self.entries[key][1])
                return
            self.entries[key] = (tuple(results), step_index)
            while len(self.entries) > self.capacity:
                # least-recently-created goes first
                self.entries.popitem(last=False)

    def get(self, query: str):
        return self.entries.get(normalize_query(query))

    @property
    def lookups(self) -> int:
        return self.hits + self.misses

    @property
    def hit_rate(self) -> float:
        return self.hits / self.lookups if self.lookups else 0.0


@dataclass(frozen=True)
class LatencyModel:
    retrieval_ms: float = 171.0
    per_token_ms: float = 1.47
    prefix_reuse_discount: float = 2.1
    restart_ms: float = 420.0  # full-context re-feed cost per injection before the discount
    output_price_per_million: float = 2.19

    def __post_init__(self):
        for name in ("retrieval_ms", "per_token_ms", "prefix_reuse_discount", "restart_ms",
                     "output_price_per_million"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")


def cache_lookup(cache: SpeculativeCache | None, query: str, index: CorpusIndex, k: int = 5,
                 latency: LatencyModel = LatencyModel(), retriever=None):
    """Return (results, hit, charged_latency_ms); a hit is free, a miss pays the retrieval."""
    fetch = retriever or (lambda q, kk: retrieve(index, q, kk))
    if cache is not None:
        entry = cache.get(query)
        with cache._lock:
            if entry is not None:
                cache.hits += 1
            else:
                cache.misses += 1
        if entry is not None:
            return list(entry[0][:k]), 1, 0.0
    results = fetch(normalize_query(query), k)
    return results, 0, latency.retrieval_ms


def _rarity(index: CorpusIndex, surface: str) -> float:
    return sum(index.idf(t) for t in terms(surface))


def prefetch_queries(block: InjectionBlock, index: CorpusIndex, question: str = "",
                     max_queries: int = MAX_PREFETCH) -> list[str]:
    """Likely next-step queries from entities in the retained evidence, rarest entities first."""
    candidates: dict[str, str] = {}
    for s in block.sentences:
        m = re.search(r"\bthe (\w+) of ", s.text, re.I)
        rel = next_relation(question, m.group(1).lower() if m else None) if question else None
        for e in extract_entities(s.text):
            if e.surface not in candidates:
                candidates[e.surface] = information_need(e.surface, rel) if rel else f"What is {e.surface}?"
    ranked = sorted(candidates, key=lambda e: (-_rarity(index, e), e))[:max_queries]
    return [candidates[e] for e in ranked]


def speculative_prefetch(cache: SpeculativeCache, retrieved: InjectionBlock, index: CorpusIndex,
                         k: int = 5, question: str = "", step_index: int = 0, retriever=None) -> int:
    """Issue retrievals for uncached likely-next queries; returns the number issued."""
    fetch = retriever or (lambda q, kk: retrieve(index, q, kk))
    issued = 0
    for q in prefetch_queries(retrieved, index, question):
        if q in cache:
            continue
        cache.put(q, fetch(normalize_query(q), k), step_index)
        issued += 1
    cache.issued += issued
    return issued


# -- accounting --------------------------------------------------------------------

@dataclass(frozen=True)
class CallEvent:
    latency_ms: float        # charged latency (0 on cache hits)
    hit: bool = False


@dataclass(frozen=True)
class LatencyReport:
    total_calls: int
    charged_calls: int
    total_retrieval_ms: float
    per_call_ms: float | None
    end_to_end_ms: float
    output_tokens: int
    output_cost: float
    f1_per_call: float | None


def account(events: Sequence[CallEvent], tokens: int, model: LatencyModel = LatencyModel(),
            f1: float | None = None, injections: int | None = None) -> LatencyReport:
    calls = len(events)
    charged = [e.latency_ms for e in events if not e.hit]
    total = math.fsum(e.latency_ms if not e.hit else 0.0 for e in events)
    n_inject = calls if injections is None else injections
    e2e = tokens * model.per_token_ms + total + n_inject * model.restart_ms / model.prefix_reuse_discount
    return LatencyReport(
        total_calls=calls,
        charged_calls=len(charged),
        total_retrieval_ms=total,
        per_call_ms=total / calls if calls else None,
        end_to_end_ms=e2e,
        output_tokens=tokens,
        output_cost=tokens * model.output_price_per_million / 1e6,
        f1_per_call=(f1 / calls if calls else None) if f1 is not None else None,
    )


def f1_per_call(f1: float, avg_calls: float) -> float | None:
    return f1 / avg_calls if avg_calls > 0 else None
