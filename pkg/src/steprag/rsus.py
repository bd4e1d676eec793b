"""Reasoning Step Uncertainty Score: verbalized, entity-coverage and consistency signals."""

from __future__ import annotations

import itertools
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from scipy.stats import rankdata

from steprag.corpus import CorpusIndex, score_distribution
from steprag.text import DISCOURSE_MARKERS, STOPWORDS, hedge_count, starts_with_phrase, terms
from steprag.trace import fit_logistic

log = logging.getLogger(__name__)

CONFIDENCE_PROMPT = (
    "Given the reasoning so far, rate your confidence that the current conclusion is "
    "factually correct on a scale of 0-100, where 0 means completely uncertain and 100 "
    "means absolutely certain. Respond with only a number:"
)
VERB_FALLBACK = 0.5
DEFAULT_WEIGHTS = (0.40, 0.35, 0.25)
GRID_STEP = 0.05

_WORD_RE = re.compile(r"[A-Za-z0-9][A-Za-z0-9'\-]*")
_YEAR_RE = re.compile(r"^\d{4}$")
_INT_RE = re.compile(r"-?\d+")


class Backend(Protocol):
    def probe_confidence(self, context: str) -> str | None: ...

    def sample_continuations(self, context: str, k: int) -> list[str] | None: ...


@dataclass(frozen=True)
class EntityMention:
    surface: str
    span: tuple[int, int]


@dataclass(frozen=True)
class RsusConfig:
    alpha: float = DEFAULT_WEIGHTS[0]
    beta: float = DEFAULT_WEIGHTS[1]
    gamma: float = DEFAULT_WEIGHTS[2]
    k_consistency: int = 3
    entropy_window: int = 100
    correlation: float | None = field(default=None, compare=False)
    equal_weights_correlation: float | None = field(default=None, compare=False)

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("RSUS weights must be non-negative")
        if not math.isclose(self.alpha + self.beta + self.gamma, 1.0, abs_tol=1e-9):
            raise ValueError("RSUS weights must sum to 1")
        if self.k_consistency < 2:
            raise ValueError("k_consistency must be >= 2")


@dataclass(frozen=True)
class RsusScore:
    u_verb: float
    u_ent: float
    u_cons: float
    combined: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.u_verb, self.u_ent, self.u_cons, self.combined)


# -- entities ------------------------------------------------------------------

def _is_cap(word: str) -> bool:
    return word[:1].isupper()


def extract_entities(text: str) -> list[EntityMention]:
    """Maximal runs of capitalized words, trimmed of stopwords and bare years."""
    words = [(m.group(0), m.start(), m.end()) for m in _WORD_RE.finditer(text)]
    spans: list[list[tuple[str, int, int]]] = []
    run: list[tuple[str, int, int]] = []
    for idx, w in enumerate(words):
        # a run breaks at sentence punctuation between two words
        if run and idx > 0 and re.search(r"[.!?,;:\n]", text[words[idx - 1][2] : w[1]]):
            spans.append(run)
            run = []
        if _is_cap(w[0]) and not _YEAR_RE.match(w[0]):
            run.append(w)
        else:
            if run:
                spans.append(run)
            run = []
    if run:
        spans.append(run)

    out: list[EntityMention] = []
    seen = set()
    for run in spans:
        while run and run[0][0].lower() in STOPWORDS:
            run = run[1:]
        while run and run[-1][0].lower() in STOPWORDS:
            run = run[:-1]
        if not run:
            continue
        surface = text[run[0][1] : run[-1][2]]
        if surface.endswith("'s"):
            surface = surface[:-2]
        if surface and surface not in seen:
            seen.add(surface)
            out.append(EntityMention(surface, (run[0][1], run[0][1] + len(surface))))
    return out


# -- verbalized confidence ------------------------------------------------------

def parse_confidence(reply: str | None) -> int | None:
    if reply is None:
        return None
    m = _INT_RE.search(reply)
    if not m:
        return None
    c = int(m.group(0))
    return c if 0 <= c <= 100 else None


def u_verb(backend: Backend, context: str, proxy: "VerbProxy | None" = None,
           proxy_features: Sequence[float] | None = None, events: list | None = None) -> float:
    """1 - confidence/100 from a probe reply; falls back to the proxy, then to 0.5."""
    reply = backend.probe_confidence(context + "\n" + CONFIDENCE_PROMPT)
    c = parse_confidence(reply)
    if c is not None:
        return 1.0 - c / 100.0
    if proxy is not None and proxy_features is not None:
        return proxy.predict(proxy_features)
    log.warning("unparseable confidence reply %r; using fallback %.1f", reply, VERB_FALLBACK)
    if events is not None:
        events.append(("u_verb_fallback", reply))
    return VERB_FALLBACK


def proxy_features(step_text: str, recent_u_ent: Sequence[float]) -> list[float]:
    """Surface features for the verbalized-confidence proxy."""
    recent = list(recent_u_ent)[-3:]
    return [
        float(len(terms(step_text))),
        float(hedge_count(step_text)),
        float(len(extract_entities(step_text))),
        float(np.mean(recent)) if recent else 0.0,
    ]


@dataclass
class VerbProxy:
    weights: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    auroc: float = float("nan")

    def predict(self, feats: Sequence[float]) -> float:
        z = (np.asarray(feats, dtype=float) - self.mean) / self.scale
        return float(1.0 / (1.0 + math.exp(-(z @ self.weights[:-1] + self.weights[-1]))))


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUROC with average ranks for ties."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=int)
    n_pos, n_neg = int(y.sum()), int(len(y) - y.sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("degenerate labels")
    ranks = rankdata(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def u_verb_proxy_train(features: Sequence[Sequence[float]], labels: Sequence[int],
                       holdout: float = 0.3, seed: int = 0) -> VerbProxy:
    """Logistic proxy for verbalized uncertainty; label 1 = next step revised or doubted."""
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=float)
    if len(y) < 50:
        raise ValueError("need at least 50 labeled steps")
    if len(set(y.tolist())) < 2:
        raise ValueError("degenerate labels")
    order = np.random.default_rng(seed).permutation(len(y))
    n_test = max(2, int(round(holdout * len(y))))
    test, train = order[:n_test], order[n_test:]
    mean = X[train].mean(axis=0)
    scale = X[train].std(axis=0)
    scale[scale == 0] = 1.0
    w = fit_logistic((X[train] - mean) / scale, y[train], lr=0.5, epochs=1500)
    proxy = VerbProxy(w, mean, scale)
    preds = [proxy.predict(x) for x in X[test]]
    if len(set(y[test].tolist())) == 2:
        proxy.auroc = auroc(preds, y[test].astype(int))
    return proxy


# -- entity coverage entropy ------------------------------------------------------

def normalized_entropy(probs: Sequence[float]) -> float:
    """Shannon entropy divided by ln(m); 0 for m <= 1."""
    m = len(probs)
    if m <= 1:
        return 0.0
    h = -math.fsum(p * math.log(p) for p in probs if p > 0)
    return min(1.0, max(0.0, h / math.log(m)))


def entity_contribution(index: CorpusIndex, surface: str, n: int = 100) -> float:
    dist = score_distribution(index, f"What is {surface}?", n, required_terms=terms(surface))
    if not dist:
        return 1.0
    return normalized_entropy([p for _, p in dist])


def u_ent(index: CorpusIndex, entities: Sequence[EntityMention], n: int = 100,
          contribution=None) -> float:
    """Mean normalized document-score entropy over distinct entity surfaces."""
    surfaces = sorted({e.surface for e in entities})
    if not surfaces:
        return 0.0
    fn = contribution or (lambda s: entity_contribution(index, s, n))
    return math.fsum(fn(s) for s in surfaces) / len(surfaces)


# -- consistency ---------------------------------------------------------------

def jaccard(a: set, b: set) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def is_critical(step_text: str) -> bool:
    return starts_with_phrase(terms(step_text), DISCOURSE_MARKERS)


def u_cons(backend: Backend, context: str, k: int = 3, step_text: str | None = None,
           events: list | None = None) -> float:
    """1 - mean pairwise Jaccard over k sampled continuations (critical steps only)."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if step_text is not None and not is_critical(step_text):
        return 0.0
    samples = backend.sample_continuations(context, k)
    if not samples or len(samples) < 2:
        log.warning("backend cannot sample continuations; u_cons falls back to 0.0")
        if events is not None:
            events.append(("u_cons_fallback", None))
        return 0.0
    sets = [set(terms(s)) for s in samples]
    sims = [jaccard(a, b) for a, b in itertools.combinations(sets, 2)]
    return 1.0 - math.fsum(sims) / len(sims)


# -- combination and weight fitting ----------------------------------------------

def combine(config: RsusConfig, u_verb: float, u_ent: float, u_cons: float) -> RsusScore:
    for name, v in (("u_verb", u_verb), ("u_ent", u_ent), ("u_cons", u_cons)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name}={v} outside [0, 1]")
    total = config.alpha * u_verb + config.beta * u_ent + config.gamma * u_cons
    return RsusScore(u_verb, u_ent, u_cons, min(1.0, total))


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    sx, sy = x.std(), y.std()
    if sx < 1e-15 or sy < 1e-15:
        return -math.inf
    return float(np.mean((x - x.mean()) * (y - y.mean())) / (sx * sy))


def simplex_grid(step: float = GRID_STEP) -> list[tuple[float, float, float]]:
    n = int(round(1 / step))
    return [(i / n, j / n, (n - i - j) / n) for i in range(n + 1) for j in range(n + 1 - i)]


def fit_weights(components: Sequence[Sequence[float]], benefit: Sequence[float],
                step: float = GRID_STEP, base: RsusConfig | None = None) -> RsusConfig:
    """Grid search over the weight simplex maximizing Pearson r with retrieval benefit.

    ``components`` rows are (u_verb, u_ent, u_cons). The exact equal-weights point is
    searched alongside the grid, so the result never scores below it.
    """
    C = np.asarray(components, dtype=float)
    y = np.asarray(benefit, dtype=float)
    if len(y) < 20 or C.shape != (len(y), 3):
        raise ValueError("need at least 20 labeled steps with three components each")
    if y.std() < 1e-15:
        raise ValueError("constant benefit labels: correlation undefined")
    equal = (1 / 3, 1 / 3, 1 - 2 / 3)
    equal_r = _pearson(C @ np.array(equal), y)
    best, best_r = equal, equal_r
    for w in simplex_grid(step):
        r = _pearson(C @ np.array(w), y)
        if r > best_r + 1e-12:
            best, best_r = w, r
    base = base or RsusConfig()
    return RsusConfig(best[0], best[1], best[2], base.k_consistency, base.entropy_window,
                      correlation=best_r, equal_weights_correlation=equal_r)
