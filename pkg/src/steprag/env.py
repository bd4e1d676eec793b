"""Reasoning backends: a seeded synthetic multi-hop reasoner and a trace-replay backend."""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from steprag.corpus import Passage
from steprag.integrate import parse_injection
from steprag.text import RELATION_QUERIES, fact_sentence

WORLD_FORMAT = "steprag-world"
QUESTIONS_FORMAT = "steprag-questions"
TRACE_FORMAT = "steprag-traces"
FORMAT_VERSION = 1

# relations whose information-need query shares the fact's noun come first
WORLD_RELATIONS = ("mentor", "rival", "employer", "sponsor", "successor", "partner",
                   "director", "founder")

_FIRST = ("Alder", "Brina", "Cato", "Dessa", "Elric", "Farah", "Gideon", "Halle", "Ivo", "Jessa",
          "Kellan", "Liora", "Magnus", "Nerys", "Osric", "Perrin", "Quilla", "Rowan", "Sable",
          "Tamsin", "Ulric", "Vesna", "Wyatt", "Xanthe", "Yorick", "Zelda", "Anselm", "Bettina",
          "Corwin", "Delphine", "Emrys", "Fiora", "Garrick", "Hesper", "Isolde", "Jareth")
_LAST = ("Voss", "Kell", "Dunn", "Orr", "Marlow", "Thorne", "Quade", "Ashby", "Brannock", "Crane",
         "Dray", "Ellery", "Fairweather", "Gant", "Holloway", "Ives", "Jessup", "Kestrel", "Lark",
         "Mercer", "Nash", "Oakes", "Pryce", "Rourke", "Sallow", "Tolliver", "Underhill", "Vane",
         "Whitlock", "Yarrow", "Zane", "Abernethy", "Blackwood", "Corbin", "Dalloway", "Everly")
_FILLER = (
    "This connection is noted in several regional registers.",
    "The arrangement lasted for a number of years.",
    "Accounts of it appear in older newsletters and letters.",
    "Little else about the matter was ever published.",
    "Local historians have described the details at length.",
    "The records were later copied into a municipal archive.",
    "Several contemporaries commented on it in their diaries.",
    "It is mentioned briefly in a number of later summaries.",
    "Some of the surviving documents are damaged or incomplete.",
    "The story was retold in a popular magazine decades afterwards.",
)
_DECOYS = ("was once mistaken for the {r} of {x}", "was briefly rumored to be the {r} of {x}",
           "appeared in a portrait beside the {r} of {x}")
_OPENERS = ("So,", "Next,", "Thus,", "Hence,")


def _rng(*key) -> random.Random:
    digest = hashlib.sha256(repr(key).encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


# -- world -----------------------------------------------------------------------

@dataclass
class FactWorld:
    entities: list[str]
    relations: list[str]
    facts: dict[tuple[str, str], str]
    seed: int

    def obj(self, subject: str, relation: str) -> str:
        return self.facts[(subject, relation)]

    def objects_of(self, relation: str) -> list[str]:
        return sorted({o for (s, r), o in self.facts.items() if r == relation})


@dataclass(frozen=True)
class SyntheticQuestion:
    id: str
    text: str
    hops: int
    gold_answer: str
    gold_chain: tuple[tuple[str, str, str], ...]
    gap_steps: frozenset[int] = frozenset()

    def __post_init__(self):
        if len(self.gold_chain) != self.hops:
            raise ValueError("gold_chain length must equal hops")
        if not set(self.gap_steps) <= set(range(1, self.hops + 1)):
            raise ValueError("gap_steps must be hop indices")


def _entity_names(n: int, rng: random.Random) -> list[str]:
    pool = [f"{a} {b}" for a in _FIRST for b in _LAST]
    if n > len(pool):
        raise ValueError(f"at most {len(pool)} entities supported")
    return sorted(rng.sample(pool, n))


def generate_world(seed: int, n_entities: int = 200, relation_types: int = 3) -> tuple[FactWorld, list[Passage]]:
    if n_entities < 20:
        raise ValueError("insufficient entities for 4-hop chains")
    if relation_types < 2 or relation_types > len(WORLD_RELATIONS):
        raise ValueError(f"relation_types must be in [2, {len(WORLD_RELATIONS)}]")
    rng = random.Random(seed)
    ents = _entity_names(n_entities, rng)
    rels = list(WORLD_RELATIONS[:relation_types])
    facts = {}
    for s in ents:
        for r in rels:
            o = rng.choice(ents)
            while o == s:
                o = rng.choice(ents)
            facts[(s, r)] = o
    world = FactWorld(ents, rels, facts, seed)
    return world, world_passages(world)


def world_passages(world: FactWorld) -> list[Passage]:
    """One templated passage per fact plus one decoy passage per fact (1:1)."""
    rng = random.Random(f"passages:{world.seed}")
    facts = sorted(world.facts.items())
    out = []
    for i, ((s, r), o) in enumerate(facts):
        filler = rng.sample(_FILLER, 3)
        out.append(Passage(f"f{i:05d}", s, " ".join([fact_sentence(s, r, o)] + filler)))
    for i, ((s, r), o) in enumerate(facts):
        x = rng.choice(world.entities)
        while x in (s, o):
            x = rng.choice(world.entities)
        decoy = rng.choice(_DECOYS).format(r=r, x=x)
        filler = rng.sample(_FILLER, 3)
        out.append(Passage(f"d{i:05d}", s, " ".join([f"{s} {decoy}."] + filler)))
    return out


def generate_questions(world: FactWorld, hops: int | str, n: int, gap_rate: float = 0.5,
                       seed: int = 0, n_gaps: int | None = None) -> list[SyntheticQuestion]:
    """Compose relation chains into questions; each hop is withheld with prob ``gap_rate``.

    ``hops`` is 2, 3, 4 or "mixed" (uniform over 2-4). ``n_gaps`` withholds exactly that
    many hops instead.
    """
    if hops != "mixed" and hops not in (2, 3, 4):
        raise ValueError("hops must be 2, 3, 4 or 'mixed'")
    if not 0.0 <= gap_rate <= 1.0:
        raise ValueError("gap_rate must lie in [0, 1]")
    rng = random.Random(f"questions:{world.seed}:{seed}")
    out = []
    while len(out) < n:
        h = rng.randint(2, 4) if hops == "mixed" else int(hops)
        if n_gaps is not None and not 0 <= n_gaps <= h:
            raise ValueError("n_gaps must be between 0 and hops")
        rels = (rng.sample(world.relations, h) if len(world.relations) >= h
                else [rng.choice(world.relations) for _ in range(h)])
        start = rng.choice(world.entities)
        chain, cur, seen = [], start, {start}
        for r in rels:
            nxt = world.obj(cur, r)
            chain.append((cur, r, nxt))
            cur = nxt
            seen.add(nxt)
        if len(seen) != h + 1:
            continue  # skip chains that revisit an entity
        phrase = start
        for r in rels:
            phrase = f"the {r} of {phrase}"
        if n_gaps is not None:
            gaps = frozenset(rng.sample(range(1, h + 1), n_gaps))
        else:
            gaps = frozenset(i for i in range(1, h + 1) if rng.random() < gap_rate)
        out.append(SyntheticQuestion(f"q{len(out):05d}", f"What is {phrase}?", h, cur,
                                     tuple(chain), gaps))
    return out


# -- synthetic reasoner ------------------------------------------------------------

@dataclass
class _Pending:
    hop: int
    subject: str
    relation: str
    truth: str
    wrong: str


@dataclass
class SyntheticBackend:
    """Deterministic reasoner over a fact world.

    Withheld hops produce a hedged step naming a wrong same-relation object; if the true
    fact sentence is injected right after such a step, the next step revises it.
    """

    world: FactWorld
    question: SyntheticQuestion
    seed: int = 0
    hop: int = field(default=1, init=False)
    subject: str = field(default="", init=False)
    pending: _Pending | None = field(default=None, init=False)
    done: bool = field(default=False, init=False)
    last_step_info: dict = field(default_factory=dict, init=False)
    _last_statement: str = field(default="", init=False)

    def __post_init__(self):
        self.subject = self.question.gold_chain[0][0]

    def _wrong(self, relation: str, subject: str, truth: str, salt: int = 0) -> str:
        pool = [o for o in self.world.objects_of(relation) if o not in (truth, subject)]
        return _rng(self.seed, self.question.id, self.hop, subject, salt).choice(pool)

    def next_step(self, context: str) -> tuple[str, bool]:
        if not context.startswith(self.question.text):
            raise ValueError("malformed context: missing question prefix")
        if self.done:
            raise RuntimeError("episode already finished")
        evidence = {s for _, s in parse_injection(context)}

        if self.pending is not None:
            pend, self.pending = self.pending, None
            if fact_sentence(pend.subject, pend.relation, pend.truth) in evidence:
                self.subject = pend.truth
                stmt = f"the {pend.relation} of {pend.subject} is {pend.truth}"
                self._last_statement = stmt
                self.last_step_info = {"kind": "revision", "hop": pend.hop}
                return f"Let me verify. The evidence shows {stmt}, not {pend.wrong}.", False

        rels = [r for _, r, _ in self.question.gold_chain]
        if self.hop > len(rels):
            self.done = True
            self.last_step_info = {"kind": "answer", "hop": None}
            self._last_statement = f"the answer is {self.subject}"
            return f"Therefore, the answer is {self.subject}.\nANSWER: {self.subject}", True

        h, r, s = self.hop, rels[self.hop - 1], self.subject
        truth = self.world.obj(s, r)
        opener = "First," if h == 1 else _rng(self.seed, self.question.id, "opener", h).choice(_OPENERS)
        in_context = fact_sentence(s, r, truth) in evidence
        if h not in self.question.gap_steps or in_context:
            via = " according to the retrieved evidence," if h in self.question.gap_steps else ""
            stmt = f"the {r} of {s} is {truth}"
            text = f"{opener}{via} {stmt}."
            self.subject = truth
            kind = "confident"
        else:
            wrong = self._wrong(r, s, truth)
            stmt = f"I think the {r} of {s} is probably {wrong}"
            text = f"{opener} {stmt}."
            self.pending = _Pending(h, s, r, truth, wrong)
            self.subject = wrong
            kind = "hedged"
        self._last_statement = stmt
        self.last_step_info = {"kind": kind, "hop": h}
        self.hop += 1
        return text, False

    def probe_confidence(self, context: str) -> str:
        rng = _rng(self.seed, self.question.id, "probe", context)
        if self.last_step_info.get("kind") == "hedged":
            return str(rng.randint(5, 20))
        return str(rng.randint(75, 98))

    def sample_continuations(self, context: str, k: int) -> list[str]:
        info = self.last_step_info
        if info.get("kind") == "hedged":
            h = info["hop"]
            r = self.question.gold_chain[h - 1][1]
            pend_subject = self._last_statement.split(" of ", 1)[1].split(" is ", 1)[0]
            truth = self.world.obj(pend_subject, r)
            pool = [o for o in self.world.objects_of(r) if o not in (truth, pend_subject)]
            picks = _rng(self.seed, self.question.id, "alts", context).sample(pool, k)
            return [f"I think the {r} of {pend_subject} is probably {w}." for w in picks]
        return [self._last_statement + "."] * k


# -- replay backend ------------------------------------------------------------------

@dataclass(frozen=True)
class TraceRecord:
    question: str
    gold_answer: str
    steps: tuple[str, ...]
    alternatives: tuple[tuple[str, ...], ...] | None = None
    confidence_replies: tuple[str, ...] | None = None
    id: str = ""
    hops: int = 0


class ReplayBackend:
    """Replays a recorded chain; injected evidence does not change the recorded steps."""

    def __init__(self, record: TraceRecord):
        if not record.steps:
            raise ValueError("trace has no steps")
        self.record = record
        self.i = 0
        self.last_step_info: dict = {}

    def next_step(self, context: str) -> tuple[str, bool]:
        if not context.startswith(self.record.question):
            raise ValueError("malformed context: missing question prefix")
        if self.i >= len(self.record.steps):
            raise RuntimeError("trace exhausted")
        text = self.record.steps[self.i]
        self.i += 1
        self.last_step_info = {"kind": "replay", "hop": None}
        return text, self.i == len(self.record.steps)

    def probe_confidence(self, context: str) -> str | None:
        replies = self.record.confidence_replies
        if not replies or self.i == 0 or self.i > len(replies):
            return None
        return replies[self.i - 1]

    def sample_continuations(self, context: str, k: int) -> list[str] | None:
        alts = self.record.alternatives
        if not alts or self.i == 0 or self.i > len(alts) or not alts[self.i - 1]:
            return None
        return list(alts[self.i - 1][:k])


def replay_backend(record: TraceRecord) -> ReplayBackend:
    return ReplayBackend(record)


def read_traces(path: str | Path) -> list[TraceRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("format") == TRACE_FORMAT:
                continue
            try:
                steps = tuple(str(s) for s in rec["steps"])
                alts = rec.get("alternatives")
                conf = rec.get("confidence_replies")
                out.append(TraceRecord(
                    question=str(rec["question"]),
                    gold_answer=str(rec["gold_answer"]),
                    steps=steps,
                    alternatives=tuple(tuple(a) for a in alts) if alts is not None else None,
                    confidence_replies=tuple(str(c) for c in conf) if conf is not None else None,
                    id=str(rec.get("id", f"t{len(out):05d}")),
                    hops=int(rec.get("hops", 0)),
                ))
            except (KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed trace record ({exc})") from None
            if not steps:
                raise ValueError(f"{path}:{lineno}: trace has no steps")
    return out


# -- serialization ---------------------------------------------------------------------

def save_world(world: FactWorld, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": WORLD_FORMAT, "version": FORMAT_VERSION, "seed": world.seed,
                             "entities": world.entities, "relations": world.relations}) + "\n")
        for (s, r), o in sorted(world.facts.items()):
            fh.write(json.dumps({"subject": s, "relation": r, "object": o}) + "\n")


def load_world(path: str | Path) -> FactWorld:
    with open(path, encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    head = lines[0] if lines else {}
    if head.get("format") != WORLD_FORMAT or head.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: not a version-{FORMAT_VERSION} {WORLD_FORMAT} file")
    facts = {(row["subject"], row["relation"]): row["object"] for row in lines[1:]}
    return FactWorld(list(head["entities"]), list(head["relations"]), facts, int(head["seed"]))


def save_questions(questions: Sequence[SyntheticQuestion], path: str | Path, world_path: str = "") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": QUESTIONS_FORMAT, "version": FORMAT_VERSION,
                             "world": world_path}) + "\n")
        for q in questions:
            fh.write(json.dumps({"id": q.id, "text": q.text, "hops": q.hops, "gold_answer": q.gold_answer,
                                 "gold_chain": [list(f) for f in q.gold_chain],
                                 "gap_steps": sorted(q.gap_steps)}) + "\n")


def load_questions(path: str | Path) -> tuple[list[SyntheticQuestion], str]:
    with open(path, encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    head = lines[0] if lines else {}
    if head.get("format") != QUESTIONS_FORMAT or head.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: not a version-{FORMAT_VERSION} {QUESTIONS_FORMAT} file")
    qs = [SyntheticQuestion(r["id"], r["text"], int(r["hops"]), r["gold_answer"],
                            tuple(tuple(f) for f in r["gold_chain"]), frozenset(r["gap_steps"]))
          for r in lines[1:]]
    return qs, head.get("world", "")


def write_traces(records: Sequence[TraceRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            rec = {"question": r.question, "gold_answer": r.gold_answer, "steps": list(r.steps)}
            if r.alternatives is not None:
                rec["alternatives"] = [list(a) for a in r.alternatives]
            if r.confidence_replies is not None:
                rec["confidence_replies"] = list(r.confidence_replies)
            fh.write(json.dumps(rec) + "\n")


assert set(WORLD_RELATIONS) <= set(RELATION_QUERIES)
