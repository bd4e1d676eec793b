"""Answer metrics, paired bootstrap comparison and Pareto-frontier tables."""

from __future__ import annotations

import re
import string
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_ITERATIONS = 10_000
_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = str.maketrans("", "", string.punctuation)


def normalize_answer(s: str) -> str:
    s = s.lower().translate(_PUNCT)
    s = _ARTICLES.sub(" ", s)
    return " ".join(s.split())


def answer_metrics(prediction: str, gold: str) -> tuple[int, float]:
    """Exact match and token-level F1 after extractive-QA normalization."""
    p, g = normalize_answer(prediction).split(), normalize_answer(gold).split()
    if not p and not g:
        return 1, 1.0
    if not p or not g:
        return 0, 0.0
    em = int(p == g)
    common = sum((Counter(p) & Counter(g)).values())
    if common == 0:
        return em, 0.0
    precision, recall = common / len(p), common / len(g)
    return em, 2 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class BootstrapResult:
    delta: float
    ci_low: float
    ci_high: float
    p_value: float
    iterations: int
    level: float


def bootstrap_compare(scores_a: Sequence[float], scores_b: Sequence[float],
                      iterations: int = DEFAULT_ITERATIONS, alpha: float = 0.05,
                      comparisons: int = 1, seed: int = 0, chunk: int = 1000) -> BootstrapResult:
    """Paired bootstrap of mean(a - b) with a Bonferroni-adjusted percentile interval."""
    a = np.asarray(scores_a, dtype=float)
    b = np.asarray(scores_b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ValueError("empty input")
    if a.shape != b.shape:
        raise ValueError("paired score lists differ in length")
    if a.size < 2:
        raise ValueError("need at least 2 paired scores")
    if iterations < 100:
        raise ValueError("iterations must be >= 100")
    if not 0 < alpha < 1 or comparisons < 1:
        raise ValueError("need 0 < alpha < 1 and comparisons >= 1")
    d = a - b
    n = d.size
    rng = np.random.default_rng(seed)
    means = np.empty(iterations)
    for lo in range(0, iterations, chunk):
        hi = min(iterations, lo + chunk)
        means[lo:hi] = d[rng.integers(0, n, size=(hi - lo, n))].mean(axis=1)
    level = alpha / comparisons
    ci_low, ci_high = np.quantile(means, [level / 2, 1 - level / 2])
    p = min(1.0, 2 * min(float(np.mean(means <= 0)), float(np.mean(means >= 0))))
    return BootstrapResult(float(d.mean()), float(ci_low), float(ci_high), p, iterations, level)


@dataclass(frozen=True)
class ParetoRow:
    name: str
    f1: float
    avg_calls: float
    frontier: bool


def pareto_report(points: Sequence[tuple[str, float, float]]) -> list[ParetoRow]:
    """Flag (name, f1, avg_calls) points as frontier or dominated; higher F1, fewer calls win."""
    if len(points) < 2:
        raise ValueError("need at least 2 reports")
    rows = []
    for name, f1, calls in points:
        dominated = any(
            f2 >= f1 and c2 <= calls and (f2 > f1 or c2 < calls)
            for other, f2, c2 in points if other != name or (f2, c2) != (f1, calls)
        )
        rows.append(ParetoRow(name, f1, calls, not dominated))
    return sorted(rows, key=lambda r: (r.avg_calls, -r.f1, r.name))


def write_pareto(rows: Sequence[ParetoRow], path: str | Path) -> None:
    lines = ["name\tf1\tavg_calls\tfrontier"]
    lines += [f"{r.name}\t{r.f1:.6f}\t{r.avg_calls:.6f}\t{int(r.frontier)}" for r in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
