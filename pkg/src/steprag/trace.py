"""Reasoning-step segmentation with a feature-based logistic boundary classifier."""

from __future__ import annotations

import json
import math
import random
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from steprag.text import DISCOURSE_MARKERS, LOGICAL_CONNECTIVES, phrase_in, starts_with_phrase, terms

MODEL_FORMAT = "steprag-segmenter v1"
FEATURE_NAMES = ("discourse_marker", "logical_connective", "topic_shift", "punctuation")
DEFAULT_WINDOW = 128
DEFAULT_STRIDE = 64
TOPIC_SPAN = 64
LOOKAHEAD = 4  # tokens after a candidate inspected for a discourse marker

_TOKEN_RE = re.compile(r"\s+|\S+\s*")


class StreamSource(str, Enum):
    REPLAY = "replay"
    SYNTHETIC = "synthetic"
    EXTERNAL = "external"


@dataclass(frozen=True)
class TokenStream:
    tokens: tuple[str, ...]
    source: StreamSource = StreamSource.EXTERNAL

    @classmethod
    def from_text(cls, text: str, source: StreamSource = StreamSource.EXTERNAL) -> "TokenStream":
        # whitespace stays attached so "".join(tokens) == text
        return cls(tuple(_TOKEN_RE.findall(text)), source)

    @property
    def text(self) -> str:
        return "".join(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class ReasoningStep:
    index: int
    text: str
    token_span: tuple[int, int]
    boundary_confidence: float


@dataclass(frozen=True)
class BoundaryFeatures:
    discourse_marker_hit: int
    logical_connective_hit: int
    topic_shift_score: float
    punctuation_signal: int

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.discourse_marker_hit, self.logical_connective_hit,
             self.topic_shift_score, self.punctuation_signal],
            dtype=float,
        )


@dataclass
class SegmenterModel:
    weights: np.ndarray  # 4 feature weights followed by the bias
    decision_threshold: float = 0.5
    metrics: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (len(FEATURE_NAMES) + 1,):
            raise ValueError("segmenter weight vector must have one entry per feature plus bias")
        if not 0.0 < self.decision_threshold < 1.0:
            raise ValueError("decision_threshold must lie in (0, 1)")

    def probability(self, feats: BoundaryFeatures) -> float:
        z = float(self.weights[:-1] @ feats.as_array() + self.weights[-1])
        return 1.0 / (1.0 + math.exp(-z))


# Fit by train_segmenter on synthetic_traces(200, seed=0); frozen so segmentation
# needs no training step.
BUNDLED_WEIGHTS = (9.34, 2.06, -0.82, -2.52, -2.74)


def bundled_model() -> SegmenterModel:
    return SegmenterModel(np.array(BUNDLED_WEIGHTS))


# -- features ------------------------------------------------------------------

def _words(tok: str) -> list[str]:
    return terms(tok)


def is_candidate(tokens: tuple[str, ...] | list[str], i: int) -> bool:
    """Boundary candidates sit after sentence-final punctuation or a newline."""
    if i <= 0 or i >= len(tokens):
        return False
    prev = tokens[i - 1]
    if "\n" in prev:
        return True
    return prev.rstrip().endswith((".", "?", "!"))


def _cosine(a: Counter, b: Counter) -> float:
    if not a or not b:
        return 0.0
    dot = sum(v * b.get(k, 0) for k, v in a.items())
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    return dot / (na * nb)


def boundary_features(tokens, i: int, lo: int = 0, hi: int | None = None) -> BoundaryFeatures:
    """Features for a boundary placed before token ``i``; context is clipped to [lo, hi)."""
    hi = len(tokens) if hi is None else hi
    after = [w for t in tokens[i : min(hi, i + LOOKAHEAD)] for w in _words(t)]
    marker = int(starts_with_phrase(after, DISCOURSE_MARKERS))

    # words of the sentence that the candidate closes
    j = i - 1
    while j > lo and not is_candidate(tokens, j):
        j -= 1
    prev_sentence = [w for t in tokens[j:i] for w in _words(t)]
    connective = int(any(phrase_in(c, prev_sentence) for c in LOGICAL_CONNECTIVES))

    left = Counter(w for t in tokens[max(lo, i - TOPIC_SPAN) : i] for w in _words(t))
    right = Counter(w for t in tokens[i : min(hi, i + TOPIC_SPAN)] for w in _words(t))
    topic = 1.0 - _cosine(left, right)

    prev = tokens[i - 1]
    nxt = tokens[i].lstrip()
    final = prev.rstrip().endswith((".", "?", "!"))
    punct = int(final and ("\n" in prev or (nxt[:1].isupper())))
    return BoundaryFeatures(marker, connective, min(max(topic, 0.0), 1.0), punct)


def _candidate_probabilities(stream: TokenStream, model: SegmenterModel, window: int,
                             stride: int) -> dict[int, float]:
    toks = stream.tokens
    n = len(toks)
    full: dict[int, list[float]] = {}
    clipped: dict[int, list[float]] = {}
    start = 0
    while True:
        end = min(n, start + window)
        for i in range(start + 1, end):
            if is_candidate(toks, i):
                p = model.probability(boundary_features(toks, i, start, end))
                # a window that cuts off the marker lookahead only counts as a last resort
                bucket = full if i + LOOKAHEAD <= end or end == n else clipped
                bucket.setdefault(i, []).append(p)
        if end >= n:
            break
        start += stride
    # overlapping window predictions are averaged
    probs = {i: sum(ps) / len(ps) for i, ps in clipped.items()}
    probs.update({i: sum(ps) / len(ps) for i, ps in full.items()})
    return dict(sorted(probs.items()))


def segment(stream: TokenStream, model: SegmenterModel | None = None,
            window: int = DEFAULT_WINDOW, stride: int = DEFAULT_STRIDE) -> list[ReasoningStep]:
    if not stream.tokens:
        raise ValueError("empty stream")
    if not window >= stride >= 1:
        raise ValueError("require window >= stride >= 1")
    model = model or bundled_model()
    probs = _candidate_probabilities(stream, model, window, stride)
    cuts = [(i, p) for i, p in probs.items() if p > model.decision_threshold]
    starts = [(0, 1.0)] + cuts
    steps = []
    for n, (s, conf) in enumerate(starts):
        e = starts[n + 1][0] if n + 1 < len(starts) else len(stream.tokens)
        steps.append(ReasoningStep(n + 1, "".join(stream.tokens[s:e]), (s, e), conf))
    return steps


# -- training ------------------------------------------------------------------

def _candidate_matrix(data):
    X, y = [], []
    for stream, gold in data:
        gold = set(gold)
        for i in range(1, len(stream.tokens)):
            if is_candidate(stream.tokens, i):
                X.append(boundary_features(stream.tokens, i).as_array())
                y.append(1.0 if i in gold else 0.0)
    return np.array(X), np.array(y)


def fit_logistic(X: np.ndarray, y: np.ndarray, lr: float = 0.5, epochs: int = 2000,
                 l2: float = 1e-4) -> np.ndarray:
    """Full-batch gradient descent on mean log loss; returns weights with bias last."""
    Xb = np.hstack([X, np.ones((len(X), 1))])
    w = np.zeros(Xb.shape[1])
    for _ in range(epochs):
        p = 1.0 / (1.0 + np.exp(-(Xb @ w)))
        grad = Xb.T @ (p - y) / len(y)
        grad[:-1] += l2 * w[:-1]
        w -= lr * grad
    return w


def boundary_prf(predicted: set[int], gold: set[int]) -> tuple[int, int, int]:
    tp = len(predicted & gold)
    return tp, len(predicted) - tp, len(gold) - tp


def _prf(tp, fp, fn):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def evaluate_segmenter(model: SegmenterModel, data, window: int = DEFAULT_WINDOW,
                       stride: int = DEFAULT_STRIDE) -> dict:
    tp = fp = fn = 0
    for stream, gold in data:
        pred = {s.token_span[0] for s in segment(stream, model, window, stride)[1:]}
        a, b, c = boundary_prf(pred, set(gold))
        tp, fp, fn = tp + a, fp + b, fn + c
    p, r, f = _prf(tp, fp, fn)
    return {"precision": p, "recall": r, "f1": f}


def train_segmenter(annotated, holdout: float = 0.2, seed: int = 0,
                    drop_features: tuple[str, ...] = (), threshold: float = 0.5) -> SegmenterModel:
    """Fit the boundary classifier; held-out precision/recall/F1 land in ``model.metrics``.

    ``drop_features`` pins the named features' weights at zero (ablation runs).
    """
    annotated = list(annotated)
    if len(annotated) < 10:
        raise ValueError("insufficient training data")
    order = list(range(len(annotated)))
    random.Random(seed).shuffle(order)
    n_test = max(1, int(round(holdout * len(annotated))))
    test = [annotated[i] for i in order[:n_test]]
    train = [annotated[i] for i in order[n_test:]]

    X, y = _candidate_matrix(train)
    if len(set(y.tolist())) < 2:
        raise ValueError("training candidates need both boundary and non-boundary labels")
    keep = [k for k, name in enumerate(FEATURE_NAMES) if name not in drop_features]
    w_sub = fit_logistic(X[:, keep], y)
    w = np.zeros(len(FEATURE_NAMES) + 1)
    w[keep] = w_sub[:-1]
    w[-1] = w_sub[-1]
    model = SegmenterModel(w, threshold)
    model.metrics = evaluate_segmenter(model, test)
    model.metrics["n_train"] = len(train)
    model.metrics["n_test"] = len(test)
    return model


# -- persistence ---------------------------------------------------------------

def save_model(model: SegmenterModel, path: str | Path) -> None:
    lines = [MODEL_FORMAT, f"threshold {model.decision_threshold!r}"]
    lines += [f"{name} {w!r}" for name, w in zip(FEATURE_NAMES + ("bias",), model.weights.tolist())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_model(path: str | Path) -> SegmenterModel:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != MODEL_FORMAT:
        raise ValueError(f"{path}: not a {MODEL_FORMAT} file")
    vals = dict(line.split(" ", 1) for line in lines[1:] if line.strip())
    weights = [float(vals[name]) for name in FEATURE_NAMES + ("bias",)]
    return SegmenterModel(np.array(weights), float(vals["threshold"]))


def read_annotated(path: str | Path) -> list[tuple[TokenStream, list[int]]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out.append((TokenStream(tuple(rec["tokens"]), StreamSource.REPLAY),
                            [int(b) for b in rec["boundaries"]]))
    return out


def write_annotated(data, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for stream, gold in data:
            fh.write(json.dumps({"tokens": list(stream.tokens), "boundaries": list(gold)}) + "\n")


# -- synthetic annotated traces --------------------------------------------------

_NAMES = ("Orla", "Bram", "Cleo", "Dario", "Esme", "Fenn", "Greta", "Hugo", "Ines", "Jory",
          "Kaia", "Lionel", "Mira", "Nico", "Oona", "Pavel", "Quinn", "Rosa", "Silas", "Tova")
_PLACES = ("Harwick", "Lindmoor", "Caster Bay", "Oldfield", "Vell", "Marrow Point", "Ennis Cross")
_NOUNS = ("archive", "treaty", "bridge", "festival", "company", "film", "library", "expedition")
_BODY = (
    "The {noun} in {place} is linked to {name}.",
    "It was recorded during the {noun} season.",
    "Records from {place} mention the {noun} twice.",
    "{name} was connected with that {noun} for years.",
    "The clue points toward the {noun} near {place}.",
    "Only one source mentions the {noun} at all.",
    "There is also a note about {name} in the register.",
    "That detail narrows the search to {place}.",
    "Several accounts agree on the date of the {noun}.",
    "The earlier entry lists {name} as a witness.",
)
_CLOSERS = (
    "As a result, {name} must be the person tied to the {noun}.",
    "This holds because the {noun} records name {name}.",
    "It follows that the {noun} belongs to {place}.",
    "Which means {place} is the right location.",
)
_OPENERS = ("Therefore,", "However,", "This means", "So", "Next,", "Let me verify", "To confirm,",
            "Thus,", "Hence,")


def synthetic_traces(n: int, seed: int = 0, steps: tuple[int, int] = (3, 6),
                     sentences: tuple[int, int] = (3, 6)):
    """Rule-generated traces: every step after the first opens with a discourse marker.

    Returns (TokenStream, gold boundary token offsets) pairs.
    """
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        parts: list[str] = []
        boundary_chars: list[int] = []
        for s in range(rng.randint(*steps)):
            topic = {"name": rng.choice(_NAMES), "place": rng.choice(_PLACES), "noun": rng.choice(_NOUNS)}
            count = rng.randint(*sentences)
            sents = []
            for k in range(count):
                tpl = rng.choice(_BODY)
                if k == count - 1 and rng.random() < 0.5:
                    tpl = rng.choice(_CLOSERS)
                sents.append(tpl.format(**topic))
            if s > 0:
                opener = rng.choice(_OPENERS)
                first = sents[0]
                sents[0] = f"{opener} {first[0].lower()}{first[1:]}"
            text = " ".join(sents)
            if s > 0:
                sep = "\n" if rng.random() < 0.3 else " "
                parts.append(sep)
                boundary_chars.append(sum(len(p) for p in parts))
            parts.append(text)
        full = "".join(parts)
        stream = TokenStream.from_text(full, StreamSource.SYNTHETIC)
        offsets, pos, gold = [], 0, []
        for i, tok in enumerate(stream.tokens):
            offsets.append(pos)
            pos += len(tok)
        starts = {c: i for i, c in enumerate(offsets)}
        for c in boundary_chars:
            gold.append(starts[c])
        out.append((stream, gold))
    return out
