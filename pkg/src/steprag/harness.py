"""Episode runner, strategy baselines, benchmark aggregation and the policy training environment."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from steprag.corpus import CorpusIndex, RetrievalResult, retrieve
from steprag.env import FactWorld, SyntheticBackend, SyntheticQuestion
from steprag.evaluation import answer_metrics
from steprag.integrate import (
    CompressionConfig, InjectionBlock, LatencyModel, SpeculativeCache, CallEvent, account,
    cache_lookup, compress, normalize_query, render_injection, speculative_prefetch, uncompressed,
)
from steprag.policy import (
    DEFAULT_DIM, DEFAULT_TAU, MAX_RETRIEVALS, HistoryFeatures, PolicyModel, Rollout, decide,
    encode_state, formulate_query, token_overlap,
)
from steprag.rsus import RsusConfig, RsusScore, combine, entity_contribution, extract_entities, u_cons, u_ent, u_verb
from steprag.text import split_sentences
from steprag.trace import ReasoningStep, SegmenterModel, StreamSource, TokenStream, segment

DEFAULT_SEEDS = (42, 123, 456)
STEP_CAP = 32
HIST_BINS = 10
REPORT_FORMAT = "steprag-report"
REPORT_VERSION = 1
STRATEGY_KINDS = ("none", "single", "fixed", "naive", "adaptive", "forced")


@dataclass(frozen=True)
class StrategySpec:
    kind: str
    interval: int = 1
    per_sentence: bool = False
    policy: PolicyModel | None = field(default=None, compare=False)
    tau: float = DEFAULT_TAU          # RSUS trigger threshold when no policy is given
    at_steps: frozenset[int] = frozenset()  # "forced": retrieve after exactly these steps

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}")
        if self.interval < 1:
            raise ValueError("fixed-interval m must be >= 1")

    @property
    def name(self) -> str:
        if self.kind == "fixed":
            return f"fixed:{self.interval}" + (":sentence" if self.per_sentence else "")
        if self.kind == "adaptive":
            return "adaptive" if self.policy is not None else "adaptive:rsus"
        return self.kind


def parse_strategy(text: str, policy: PolicyModel | None = None) -> StrategySpec:
    """Parse ``none``, ``single``, ``fixed[:m[:sentence]]``, ``naive`` or ``adaptive``."""
    parts = text.split(":")
    kind = parts[0]
    if kind == "fixed":
        m = int(parts[1]) if len(parts) > 1 and parts[1] else 1
        return StrategySpec("fixed", interval=m, per_sentence=len(parts) > 2 and parts[2] == "sentence")
    if kind == "adaptive":
        return StrategySpec("adaptive", policy=policy)
    if len(parts) > 1 or kind not in ("none", "single", "naive"):
        raise ValueError(f"unknown strategy {text!r}")
    return StrategySpec(kind)


@dataclass(frozen=True)
class PipelineConfig:
    k: int = 5
    compression: CompressionConfig = CompressionConfig()
    latency: LatencyModel = LatencyModel()
    rsus: RsusConfig = RsusConfig()
    cache_capacity: int = 32
    step_cap: int = STEP_CAP
    max_retrievals: int = MAX_RETRIEVALS
    dim: int = DEFAULT_DIM
    prefetch: bool = True


class Pipeline:
    """An immutable index plus memo tables for retrieval, entity coverage and segmentation."""

    def __init__(self, index: CorpusIndex, config: PipelineConfig = PipelineConfig(),
                 segmenter: SegmenterModel | None = None):
        self.index = index
        self.config = config
        self.segmenter = segmenter
        self._retrieved: dict[tuple[str, int], list[RetrievalResult]] = {}
        self._coverage: dict[str, float] = {}
        self._segments: dict[str, list[ReasoningStep]] = {}

    def retrieve(self, query: str, k: int) -> list[RetrievalResult]:
        key = (normalize_query(query), k)
        hit = self._retrieved.get(key)
        if hit is None:
            hit = self._retrieved[key] = retrieve(self.index, key[0], k)
        return hit

    def entity_uncertainty(self, surface: str) -> float:
        v = self._coverage.get(surface)
        if v is None:
            v = self._coverage[surface] = entity_contribution(self.index, surface, self.config.rsus.entropy_window)
        return v

    def segment(self, text: str) -> list[ReasoningStep]:
        v = self._segments.get(text)
        if v is None:
            v = self._segments[text] = segment(TokenStream.from_text(text, StreamSource.SYNTHETIC), self.segmenter)
        return v

    def rsus(self, backend, context: str, step_text: str) -> RsusScore:
        cfg = self.config.rsus
        ents = extract_entities(step_text)
        return combine(
            cfg,
            u_verb(backend, context),
            u_ent(self.index, ents, cfg.entropy_window, contribution=self.entity_uncertainty),
            u_cons(backend, context, cfg.k_consistency, step_text=step_text),
        )


@dataclass(frozen=True)
class RetrievalEvent:
    step_index: int                 # retrieval happens after this step; 0 = before the first
    query: str
    result_ids: tuple[str, ...]
    hit: bool
    latency_ms: float
    block: InjectionBlock | None = field(default=None, compare=False)


@dataclass
class Episode:
    question_id: str
    question: str
    gold_answer: str
    hops: int
    strategy: str
    seed: int
    steps: list[ReasoningStep] = field(default_factory=list)
    step_info: list[dict] = field(default_factory=list)
    events: list[RetrievalEvent] = field(default_factory=list)
    decisions: list[tuple[int, float, int]] = field(default_factory=list)
    final_answer: str = ""
    answered: bool = False
    token_count: int = 0
    prefetches: int = 0
    em: int = 0
    f1: float = 0.0

    @property
    def calls(self) -> int:
        return len(self.events)

    @property
    def charged_latency_ms(self) -> float:
        return math.fsum(e.latency_ms for e in self.events)

    @property
    def cache_hits(self) -> int:
        return sum(e.hit for e in self.events)


def extract_answer(text: str) -> str | None:
    idx = text.rfind("ANSWER:")
    if idx < 0:
        return None
    return text[idx + len("ANSWER:"):].split("\n", 1)[0].strip()


def run_episode(strategy: StrategySpec, backend, question: str, gold_answer: str, pipeline: Pipeline,
                seed: int = 0, question_id: str = "", hops: int = 0, mode: str = "greedy",
                rng: np.random.Generator | None = None, recorder: list | None = None,
                rsus_log: list | None = None) -> Episode:
    """Drive one reasoning chain, retrieving and injecting evidence at step boundaries.

    ``recorder`` collects (state vector, action) pairs for sampled policy decisions;
    ``rsus_log`` collects (step index, RsusScore) for every non-terminal step.
    """
    cfg = pipeline.config
    ep = Episode(question_id, question, gold_answer, hops, strategy.name, seed)
    cache = SpeculativeCache(cfg.cache_capacity) if strategy.kind == "adaptive" else None
    if mode == "sample" and rng is None:
        rng = np.random.default_rng(seed)
    context = question
    last_query, last_ret_step = "", None

    def do_retrieval(step_index: int, query: str, compressed: bool = True) -> None:
        nonlocal context, last_query, last_ret_step
        results, hit, ms = cache_lookup(cache, query, pipeline.index, cfg.k, cfg.latency,
                                        retriever=pipeline.retrieve)
        block = None
        if results:
            passages = [pipeline.index.passage(r.passage_id) for r in results]
            block = compress(passages, query, cfg.compression) if compressed else uncompressed(passages, query)
            context += "\n" + render_injection(block)
            if cache is not None and cfg.prefetch:
                ep.prefetches += speculative_prefetch(cache, block, pipeline.index, cfg.k, question,
                                                      step_index, retriever=pipeline.retrieve)
        ep.events.append(RetrievalEvent(step_index, query, tuple(r.passage_id for r in results),
                                        bool(hit), ms, block))
        last_query, last_ret_step = query, step_index

    if strategy.kind in ("single", "fixed", "naive") or (strategy.kind == "forced" and 0 in strategy.at_steps):
        do_retrieval(0, question, compressed=strategy.kind != "naive")

    done = False
    while not done and len(ep.steps) < cfg.step_cap:
        text, done = backend.next_step(context)
        context += "\n" + text
        ep.token_count += len(text.split())
        for st in pipeline.segment(text):
            ep.steps.append(ReasoningStep(len(ep.steps) + 1, st.text, st.token_span, st.boundary_confidence))
        ep.step_info.append(dict(getattr(backend, "last_step_info", {}) or {}, step=len(ep.steps)))
        if done:
            break
        i = len(ep.steps)
        score = None
        if rsus_log is not None or strategy.kind == "adaptive":
            score = pipeline.rsus(backend, context, text)
            if rsus_log is not None:
                rsus_log.append((i, score))

        if strategy.kind == "fixed" and i % strategy.interval == 0:
            queries = split_sentences(text) if strategy.per_sentence else [text]
            for q in queries:
                do_retrieval(i, q)
        elif strategy.kind == "naive":
            do_retrieval(i, text, compressed=False)
        elif strategy.kind == "forced" and i in strategy.at_steps:
            do_retrieval(i, formulate_query(None, text, question))
        elif strategy.kind == "adaptive" and len(ep.events) < cfg.max_retrievals:
            query = formulate_query(None, text, question)
            if strategy.policy is not None:
                history = HistoryFeatures(
                    len(ep.events),
                    i - last_ret_step if last_ret_step is not None else i,
                    token_overlap(query, last_query) if last_query else 0.0,
                    ep.charged_latency_ms / 1000.0,
                )
                state = encode_state(question, [s.text for s in ep.steps], score, history, cfg.dim)
                dec = decide(strategy.policy, state, mode, rng, query)
                if recorder is not None and mode == "sample":
                    recorder.append((state.vector(), dec.retrieve))
                ep.decisions.append((i, dec.probability, dec.retrieve))
                fire = bool(dec.retrieve)
            else:
                fire = score.combined > strategy.tau
                ep.decisions.append((i, score.combined, int(fire)))
            if fire:
                do_retrieval(i, query)

    answer = extract_answer(ep.steps[-1].text) if done and ep.steps else None
    ep.answered = answer is not None
    ep.final_answer = answer or ""
    ep.em, ep.f1 = answer_metrics(ep.final_answer, gold_answer) if ep.answered else (0, 0.0)
    return ep


# -- benchmarks --------------------------------------------------------------------

BackendFactory = Callable[[object, int], object]


def synthetic_factory(world: FactWorld) -> BackendFactory:
    return lambda q, seed: SyntheticBackend(world, q, seed)


def run_questions(strategy: StrategySpec, questions: Sequence, factory: BackendFactory, pipeline: Pipeline,
                  seed: int, workers: int = 1) -> list[Episode]:
    def one(q) -> Episode:
        return run_episode(strategy, factory(q, seed), q.text, q.gold_answer, pipeline, seed,
                           question_id=q.id, hops=q.hops)

    if workers <= 1:
        return [one(q) for q in questions]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, questions))


@dataclass
class MetricsReport:
    strategy: str
    seeds: list[int]
    n_episodes: int
    em: float
    f1: float
    avg_calls: float
    f1_per_call: float | None
    avg_latency_ms: float
    avg_end_to_end_ms: float
    avg_tokens: float
    cost_per_query: float
    cache_hit_rate: float
    per_hop: dict[str, float]
    histogram: list[int]
    per_seed: list[dict]
    f1_std: float
    avg_calls_std: float
    episodes: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        body = {"format": REPORT_FORMAT, "version": REPORT_VERSION, **self.__dict__}
        return json.dumps(body, indent=1, sort_keys=True) + "\n"


def _mean(xs: Sequence[float]) -> float:
    return math.fsum(xs) / len(xs) if xs else 0.0


def position_histogram(episodes: Sequence[Episode], bins: int = HIST_BINS) -> list[int]:
    """Retrieval events by position along the chain (step index over chain length)."""
    hist = [0] * bins
    for ep in episodes:
        n = max(len(ep.steps), 1)
        for e in ep.events:
            hist[min(int(bins * e.step_index / n), bins - 1)] += 1
    return hist


def episode_row(ep: Episode) -> dict:
    return {
        "seed": ep.seed, "question_id": ep.question_id, "hops": ep.hops, "em": ep.em, "f1": ep.f1,
        "answered": ep.answered, "final_answer": ep.final_answer, "calls": ep.calls,
        "cache_hits": ep.cache_hits, "charged_latency_ms": ep.charged_latency_ms,
        "tokens": ep.token_count, "n_steps": len(ep.steps),
        "event_steps": [e.step_index for e in ep.events], "queries": [e.query for e in ep.events],
    }


def summarize(strategy: str, episodes: Sequence[Episode], latency: LatencyModel = LatencyModel()) -> MetricsReport:
    if not episodes:
        raise ValueError("empty question set")
    seeds = sorted({ep.seed for ep in episodes})
    f1 = _mean([ep.f1 for ep in episodes])
    calls = _mean([ep.calls for ep in episodes])
    reports = [account([CallEvent(e.latency_ms, e.hit) for e in ep.events], ep.token_count, latency, ep.f1)
               for ep in episodes]
    hops = sorted({ep.hops for ep in episodes})
    per_seed = []
    for s in seeds:
        eps = [ep for ep in episodes if ep.seed == s]
        per_seed.append({"seed": s, "em": _mean([e.em for e in eps]), "f1": _mean([e.f1 for e in eps]),
                         "avg_calls": _mean([e.calls for e in eps])})
    n_calls = sum(ep.calls for ep in episodes)
    return MetricsReport(
        strategy=strategy,
        seeds=seeds,
        n_episodes=len(episodes),
        em=_mean([ep.em for ep in episodes]),
        f1=f1,
        avg_calls=calls,
        f1_per_call=f1 / calls if calls > 0 else None,
        avg_latency_ms=_mean([ep.charged_latency_ms for ep in episodes]),
        avg_end_to_end_ms=_mean([r.end_to_end_ms for r in reports]),
        avg_tokens=_mean([ep.token_count for ep in episodes]),
        cost_per_query=_mean([r.output_cost for r in reports]),
        cache_hit_rate=sum(ep.cache_hits for ep in episodes) / n_calls if n_calls else 0.0,
        per_hop={str(h): _mean([ep.f1 for ep in episodes if ep.hops == h]) for h in hops},
        histogram=position_histogram(episodes),
        per_seed=per_seed,
        f1_std=float(np.std([p["f1"] for p in per_seed])),
        avg_calls_std=float(np.std([p["avg_calls"] for p in per_seed])),
        episodes=[episode_row(ep) for ep in episodes],
    )


def run_benchmark(strategy: StrategySpec, questions: Sequence, factory: BackendFactory, pipeline: Pipeline,
                  seeds: Sequence[int] = DEFAULT_SEEDS, workers: int = 1) -> tuple[MetricsReport, list[Episode]]:
    if not questions:
        raise ValueError("empty question set")
    episodes = []
    for s in seeds:
        episodes += run_questions(strategy, questions, factory, pipeline, s, workers)
    return summarize(strategy.name, episodes, pipeline.config.latency), episodes


def write_report(report: MetricsReport, path: str | Path) -> None:
    Path(path).write_text(report.to_json(), encoding="utf-8")


def read_report(path: str | Path) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != REPORT_FORMAT or doc.get("version") != REPORT_VERSION:
        raise ValueError(f"{path}: not a version-{REPORT_VERSION} {REPORT_FORMAT} file")
    return doc


def paired_scores(a: dict, b: dict, metric: str = "f1") -> tuple[list[float], list[float]]:
    """Align two reports' episode rows on (seed, question id)."""
    rows_b = {(r["seed"], r["question_id"]): r[metric] for r in b["episodes"]}
    xs, ys = [], []
    for r in a["episodes"]:
        key = (r["seed"], r["question_id"])
        if key not in rows_b:
            raise ValueError(f"episode {key} missing from the second report")
        xs.append(r[metric])
        ys.append(rows_b[key])
    if len(xs) != len(rows_b):
        raise ValueError("reports cover different episodes")
    return xs, ys


def write_histogram(report: MetricsReport, path: str | Path) -> None:
    lines = ["bin_low\tbin_high\tcount"]
    for i, c in enumerate(report.histogram):
        lines.append(f"{i / HIST_BINS:.1f}\t{(i + 1) / HIST_BINS:.1f}\t{c}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- training environment ----------------------------------------------------------

class SyntheticEpisodeEnv:
    """Sampled-policy rollouts over a fixed question pool for REINFORCE."""

    def __init__(self, world: FactWorld, questions: Sequence[SyntheticQuestion], pipeline: Pipeline):
        if not questions:
            raise ValueError("empty question set")
        self.world = world
        self.questions = list(questions)
        self.pipeline = pipeline
        self.input_dim = 2 * pipeline.config.dim + 8

    def rollout(self, model: PolicyModel, rng: np.random.Generator) -> Rollout:
        q = self.questions[int(rng.integers(len(self.questions)))]
        seed = int(rng.integers(2**31))
        rec: list = []
        ep = run_episode(StrategySpec("adaptive", policy=model), SyntheticBackend(self.world, q, seed),
                         q.text, q.gold_answer, self.pipeline, seed, q.id, q.hops, mode="sample",
                         rng=rng, recorder=rec)
        X = np.array([x for x, _ in rec]) if rec else np.zeros((0, self.input_dim))
        a = np.array([float(act) for _, act in rec])
        return Rollout(X, a, ep.f1, ep.calls, ep.charged_latency_ms / 1000.0)


def gap_trigger_rate(episodes: Sequence[Episode]) -> float:
    """Share of episodes with a retrieval right after a hedged (knowledge-gap) step."""
    with_gap = [ep for ep in episodes if any(i.get("kind") == "hedged" for i in ep.step_info)]
    if not with_gap:
        return 0.0
    hits = 0
    for ep in with_gap:
        gap_steps = {i["step"] for i in ep.step_info if i.get("kind") == "hedged"}
        hits += any(e.step_index in gap_steps for e in ep.events)
    return hits / len(with_gap)


def retrieval_rate(episodes: Sequence[Episode]) -> float:
    """Share of policy decisions that triggered a retrieval."""
    decisions = [d for ep in episodes for d in ep.decisions]
    return sum(d[2] for d in decisions) / len(decisions) if decisions else 0.0


def benefit_labels(world: FactWorld, questions: Sequence[SyntheticQuestion], pipeline: Pipeline,
                   seed: int = 0) -> tuple[list[tuple[float, float, float]], list[float]]:
    """Per-step RSUS components with a binary label: 1 iff retrieving after that step alone raises F1."""
    comps, gains = [], []
    for q in questions:
        log: list = []
        base = run_episode(StrategySpec("none"), SyntheticBackend(world, q, seed), q.text, q.gold_answer,
                           pipeline, seed, q.id, q.hops, rsus_log=log)
        for i, score in log:
            forced = run_episode(StrategySpec("forced", at_steps=frozenset({i})), SyntheticBackend(world, q, seed),
                                 q.text, q.gold_answer, pipeline, seed, q.id, q.hops)
            comps.append((score.u_verb, score.u_ent, score.u_cons))
            gains.append(1.0 if forced.f1 > base.f1 else 0.0)
    return comps, gains
