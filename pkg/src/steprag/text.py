"""Shared lexical helpers: tokenization, sentence splitting and small lexicons."""

from __future__ import annotations

import re
import zlib

_TERM_RE = re.compile(r"[a-z0-9]+")
_SENT_RE = re.compile(r"[^.!?\n]+(?:[.!?]+|$)")

DISCOURSE_MARKERS = (
    "therefore",
    "however",
    "this means",
    "so",
    "next",
    "let me verify",
    "to confirm",
    "thus",
    "hence",
)

LOGICAL_CONNECTIVES = (
    "because",
    "since",
    "consequently",
    "as a result",
    "which means",
    "it follows",
    "accordingly",
)

HEDGE_PHRASES = ("probably", "i think", "maybe", "perhaps", "possibly", "not sure")

STOPWORDS = frozenset(
    """
    a about after again all also an and any are as at be because been before being
    but by can could did do does each for from had has have he her here his how i
    if in into is it its itself just let me more most my no nor not now of on once
    only or other our out over own same she should so some such than that the their
    them then there these they this those through to too under until up very was we
    were what when where which while who whom why will with would you your s
    first next therefore thus hence however answer according evidence
    """.split()
)


def terms(text: str) -> list[str]:
    """Lowercased alphanumeric terms; no stemming."""
    return _TERM_RE.findall(text.lower())


def content_terms(text: str) -> list[str]:
    return [t for t in terms(text) if t not in STOPWORDS]


def split_sentences(text: str) -> list[str]:
    """Split on sentence-final punctuation and newlines, keeping the punctuation."""
    return [m.group(0).strip() for m in _SENT_RE.finditer(text) if m.group(0).strip()]


def phrase_in(phrase: str, words: list[str]) -> bool:
    """True if the multi-word ``phrase`` occurs as a contiguous run in ``words``."""
    parts = phrase.split()
    n = len(parts)
    return any(words[i : i + n] == parts for i in range(len(words) - n + 1))


def starts_with_phrase(words: list[str], lexicon: tuple[str, ...]) -> bool:
    return any(words[: len(p.split())] == p.split() for p in lexicon)


def hedge_count(text: str) -> int:
    words = terms(text)
    total = 0
    for phrase in HEDGE_PHRASES:
        parts = phrase.split()
        n = len(parts)
        total += sum(1 for i in range(len(words) - n + 1) if words[i : i + n] == parts)
    return total


def stable_hash(token: str) -> int:
    return zlib.crc32(token.encode("utf-8"))


# relation noun -> information-need query template
RELATION_QUERIES = {
    "director": "Who directed {e}?",
    "founder": "Who founded {e}?",
    "mentor": "What is {e}'s mentor?",
    "rival": "What is {e}'s rival?",
    "employer": "What is {e}'s employer?",
    "sponsor": "What is {e}'s sponsor?",
    "successor": "What is {e}'s successor?",
    "partner": "What is {e}'s partner?",
}
RELATION_VERBS = {"directed": "director", "founded": "founder"}


def fact_sentence(subject: str, relation: str, obj: str) -> str:
    return f"The {relation} of {subject} is {obj}."
