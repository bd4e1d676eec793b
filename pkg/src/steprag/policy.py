"""Retrieval intervention policy: state encoding, decisions, query formulation, REINFORCE."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from steprag.rsus import RsusScore, extract_entities
from steprag.text import RELATION_QUERIES, RELATION_VERBS, hedge_count, stable_hash, terms

MODEL_FORMAT = "steprag-policy"
MODEL_VERSION = 1
DEFAULT_DIM = 64
DEFAULT_HIDDEN = 64
DEFAULT_TAU = 0.65
MAX_RETRIEVALS = 6
RSUS_FEATURES = 4
HISTORY_FEATURES = 4
LOGIT_CLIP = 30.0

_STATEMENT_RE = re.compile(r"\bthe (\w+) of ((?:[A-Z][\w'\-]*)(?: [A-Z][\w'\-]*)*) is (?:probably |maybe |perhaps |possibly )?((?:[A-Z][\w'\-]*)(?: [A-Z][\w'\-]*)*)")


@dataclass(frozen=True)
class HistoryFeatures:
    prior_retrieval_count: int = 0
    steps_since_last_retrieval: int = 0
    last_query_overlap: float = 0.0
    cumulative_retrieval_latency: float = 0.0  # seconds

    def as_array(self, cap: int = MAX_RETRIEVALS) -> np.ndarray:
        return np.array([
            self.prior_retrieval_count / cap,
            min(self.steps_since_last_retrieval, 10) / 10.0,
            self.last_query_overlap,
            self.cumulative_retrieval_latency,
        ])


@dataclass(frozen=True)
class PolicyState:
    query_vec: np.ndarray
    step_vec: np.ndarray
    rsus: RsusScore
    history: HistoryFeatures

    def vector(self) -> np.ndarray:
        return np.concatenate([self.query_vec, self.step_vec, np.array(self.rsus.as_tuple()),
                               self.history.as_array()])


@dataclass(frozen=True)
class RetrievalDecision:
    retrieve: int
    probability: float
    query: str = ""


@dataclass
class TrainConfig:
    lambda1_start: float = 0.5
    lambda1_end: float = 0.1
    lambda2: float = 0.05
    learning_rate: float = 1e-4
    batch_size: int = 64
    steps: int = 5000
    seed: int = 0
    baseline_decay: float = 0.99

    def __post_init__(self):
        if not self.lambda1_start >= self.lambda1_end >= 0:
            raise ValueError("need lambda1_start >= lambda1_end >= 0")
        if self.lambda2 < 0 or self.learning_rate <= 0 or self.batch_size < 1 or self.steps < 1:
            raise ValueError("rates, batch size and steps must be positive")

    def lambda1_at(self, step: int) -> float:
        if self.steps == 1:
            return self.lambda1_end
        frac = step / (self.steps - 1)
        return self.lambda1_start + (self.lambda1_end - self.lambda1_start) * frac


# -- text features ---------------------------------------------------------------

def hash_vector(text: str, dim: int = DEFAULT_DIM) -> np.ndarray:
    """Signed hashed bag of words, L2-normalized."""
    v = np.zeros(dim)
    for t in terms(text):
        h = stable_hash(t)
        v[h % dim] += 1.0 if (h >> 16) & 1 else -1.0
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def token_overlap(a: str, b: str) -> float:
    sa, sb = set(terms(a)), set(terms(b))
    if not sa or not sb:
        return 0.0
    return len(sa & sb) / len(sa | sb)


def encode_state(question: str, steps: Sequence[str], rsus: RsusScore,
                 history: HistoryFeatures | None = None, dim: int = DEFAULT_DIM) -> PolicyState:
    if not steps:
        raise ValueError("encode_state needs at least one segmented step")
    if history is None:
        history = HistoryFeatures(0, len(steps), 0.0, 0.0)
    return PolicyState(hash_vector(question, dim), hash_vector(steps[-1], dim), rsus, history)


# -- model -----------------------------------------------------------------------

@dataclass
class PolicyModel:
    W1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float
    tau: float = DEFAULT_TAU
    learn_tau: bool = False
    tau_logit: float = field(init=False)

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        self.tau_logit = math.log(self.tau / (1.0 - self.tau))

    @classmethod
    def init(cls, input_dim: int, hidden: int = DEFAULT_HIDDEN, seed: int = 0,
             tau: float = DEFAULT_TAU, learn_tau: bool = False) -> "PolicyModel":
        rng = np.random.default_rng(seed)
        W1 = rng.normal(0.0, 1.0 / math.sqrt(input_dim), size=(input_dim, hidden))
        return cls(W1, np.zeros(hidden), rng.normal(0.0, 0.1 / math.sqrt(hidden), size=hidden),
                   0.0, tau, learn_tau)

    @property
    def input_dim(self) -> int:
        return self.W1.shape[0]

    def params(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.w2, np.atleast_1d(np.float64(self.b2)),
                np.atleast_1d(np.float64(self.tau_logit))]

    def _forward(self, X: np.ndarray):
        H = np.tanh(X @ self.W1 + self.b1)
        z = H @ self.w2 + self.b2
        return H, z

    def probability(self, x: np.ndarray) -> float:
        """Retrieval probability in (0, 1) for one state vector."""
        if x.shape != (self.input_dim,):
            raise ValueError(f"state dimension {x.shape} != model input {self.input_dim}")
        _, z = self._forward(x[None, :])
        # clipping keeps the output strictly inside (0, 1) in floating point
        return float(_sigmoid(np.clip(z[0], -LOGIT_CLIP, LOGIT_CLIP)))

    def sampling_logits(self, X: np.ndarray) -> np.ndarray:
        _, z = self._forward(X)
        return z - self.tau_logit if self.learn_tau else z

    def log_prob_grads(self, X: np.ndarray, coef: np.ndarray) -> list[np.ndarray]:
        """Gradient of sum_j coef_j * (a_j - p_j) * dlogit_j, with coef already folding in (a - p)."""
        H, z = self._forward(X)
        dz = coef
        gW2 = H.T @ dz
        gb2 = np.array([dz.sum()])
        dH = np.outer(dz, self.w2) * (1.0 - H * H)
        gW1 = X.T @ dH
        gb1 = dH.sum(axis=0)
        gtau = np.array([-dz.sum()]) if self.learn_tau else np.zeros(1)
        return [gW1, gb1, gW2, gb2, gtau]

    def apply(self, updates: list[np.ndarray]) -> None:
        self.W1 = self.W1 + updates[0]
        self.b1 = self.b1 + updates[1]
        self.w2 = self.w2 + updates[2]
        self.b2 = float(self.b2 + updates[3][0])
        if self.learn_tau:
            self.tau_logit = float(self.tau_logit + updates[4][0])
            self.tau = float(_sigmoid(np.array(self.tau_logit)))

    def copy(self) -> "PolicyModel":
        m = PolicyModel(self.W1.copy(), self.b1.copy(), self.w2.copy(), self.b2, self.tau, self.learn_tau)
        m.tau_logit = self.tau_logit
        return m


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def decide(model: PolicyModel, state: PolicyState, mode: str = "greedy",
           rng: np.random.Generator | None = None, query: str = "") -> RetrievalDecision:
    x = state.vector()
    p = model.probability(x)
    if mode == "greedy":
        retrieve = int(p > model.tau)
    elif mode == "sample":
        if rng is None:
            raise ValueError("sample mode needs the run's random generator")
        ps = float(_sigmoid(model.sampling_logits(x[None, :]))[0])
        retrieve = int(rng.random() < ps)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return RetrievalDecision(retrieve, p, query if retrieve else "")


# -- query formulation -----------------------------------------------------------

def question_relations(question: str) -> list[str]:
    """Relations named in the question, in chain order (innermost first)."""
    found = []
    for m in re.finditer(r"\b(\w+)\b", question.lower()):
        w = m.group(1)
        rel = w if w in RELATION_QUERIES else RELATION_VERBS.get(w)
        if rel:
            found.append(rel)
    return found[::-1]


def information_need(entity: str, relation: str) -> str:
    return RELATION_QUERIES[relation].format(e=entity)


def next_relation(question: str, after: str | None) -> str | None:
    rels = question_relations(question)
    if after is None:
        return rels[0] if rels else None
    if after in rels:
        i = rels.index(after)
        return rels[i + 1] if i + 1 < len(rels) else None
    return rels[0] if rels else None


def formulate_query(state: PolicyState | None, step_text: str, question: str) -> str:
    """Phrase the retrieval as the information need the step leaves open.

    A hedged relation statement asks for that relation of its subject; a settled one
    asks for the next relation in the question about the newly reached entity.
    """
    stmt = _STATEMENT_RE.search(step_text)
    if stmt and stmt.group(1) in RELATION_QUERIES:
        rel, subj, obj = stmt.group(1), stmt.group(2), stmt.group(3)
        if hedge_count(step_text) > 0:
            return information_need(subj, rel)
        nxt = next_relation(question, rel)
        return information_need(obj, nxt) if nxt else question
    ents = extract_entities(step_text)
    if not ents:
        return question
    lowered = set(terms(step_text))
    open_rels = [r for r in question_relations(question) if r not in lowered]
    if not open_rels:
        return question
    return information_need(ents[-1].surface, open_rels[0])


# -- reward and training -----------------------------------------------------------

def reward(f1: float, n_ret: int, t_latency: float, lambda1: float, lambda2: float) -> float:
    return f1 - lambda1 * n_ret - lambda2 * t_latency


@dataclass
class Rollout:
    inputs: np.ndarray       # (decisions, input_dim)
    actions: np.ndarray      # (decisions,)
    f1: float
    n_ret: int
    latency_s: float


class EpisodeEnv(Protocol):
    input_dim: int

    def rollout(self, model: PolicyModel, rng: np.random.Generator) -> Rollout | None: ...


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float, b1: float = 0.9, b2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def ascent(self, grads: list[np.ndarray]) -> list[np.ndarray]:
        self.t += 1
        out = []
        for i, g in enumerate(grads):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mh = self.m[i] / (1 - self.b1 ** self.t)
            vh = self.v[i] / (1 - self.b2 ** self.t)
            out.append(self.lr * mh / (np.sqrt(vh) + self.eps))
        return out


def policy_gradient(model: PolicyModel, rollouts: Sequence[Rollout], advantages: Sequence[float]):
    """Score-function gradient of mean episode reward, summed in rollout order."""
    Xs, coefs = [], []
    for r, adv in zip(rollouts, advantages):
        if len(r.actions) == 0:
            continue
        p = _sigmoid(model.sampling_logits(r.inputs))
        Xs.append(r.inputs)
        coefs.append((r.actions - p) * adv)
    if not Xs:
        return [np.zeros_like(p) for p in model.params()]
    X = np.vstack(Xs)
    c = np.concatenate(coefs) / len(rollouts)
    return model.log_prob_grads(X, c)


def train_reinforce(env: EpisodeEnv, config: TrainConfig, model: PolicyModel | None = None,
                    hidden: int = DEFAULT_HIDDEN, callback=None) -> PolicyModel:
    """REINFORCE with an exponential-moving-average reward baseline.

    lambda1 follows a linear curriculum from ``lambda1_start`` to ``lambda1_end``.
    """
    rng = np.random.default_rng(config.seed)
    model = model.copy() if model else PolicyModel.init(env.input_dim, hidden, seed=config.seed)
    opt = Adam(model.params(), config.learning_rate)
    baseline = None
    for step in range(config.steps):
        lam1 = config.lambda1_at(step)
        batch = []
        for _ in range(config.batch_size):
            r = env.rollout(model, rng)
            if r is None:
                raise ValueError("environment yields no episodes")
            batch.append(r)
        rewards = [reward(r.f1, r.n_ret, r.latency_s, lam1, config.lambda2) for r in batch]
        if baseline is None:
            baseline = float(np.mean(rewards))
        advs = []
        for R in rewards:
            advs.append(R - baseline)
            baseline = config.baseline_decay * baseline + (1 - config.baseline_decay) * R
        grads = policy_gradient(model, batch, advs)
        model.apply(opt.ascent(grads))
        if callback is not None:
            callback(step, model, batch, rewards)
    return model


# -- numerical validation ---------------------------------------------------------

def _finite_difference_check(model: PolicyModel, seed: int = 0, n: int = 16,
                             h: float = 1e-5, floor: float = 1e-6) -> float:
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, model.input_dim))
    a = (rng.random(n) < 0.5).astype(float)
    w = rng.normal(size=n)

    def objective(m: PolicyModel) -> float:
        z = m.sampling_logits(X)
        logp = a * -np.logaddexp(0, -z) + (1 - a) * -np.logaddexp(0, z)
        return float(w @ logp)

    p = _sigmoid(model.sampling_logits(X))
    grads = model.log_prob_grads(X, (a - p) * w)
    names = ["W1", "b1", "w2", "b2"] + (["tau"] if model.learn_tau else [])
    worst = 0.0
    for gi, name in enumerate(names):
        g = grads[gi].reshape(-1)
        for j in range(g.size):
            plus, minus = model.copy(), model.copy()
            _nudge(plus, name, j, h)
            _nudge(minus, name, j, -h)
            num = (objective(plus) - objective(minus)) / (2 * h)
            err = abs(num - g[j]) / max(abs(num), abs(g[j]), floor)
            worst = max(worst, err)
    return worst


def _nudge(m: PolicyModel, name: str, j: int, h: float) -> None:
    if name == "b2":
        m.b2 += h
    elif name == "tau":
        m.tau_logit += h
    else:
        arr = getattr(m, name)
        arr.reshape(-1)[j] += h


def bandit_reinforce_check(rewards=(1.0, 0.0), logits=(0.3, -0.2), samples: int = 100_000,
                           seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo REINFORCE estimate vs the analytic expected-reward gradient (softmax arms)."""
    r = np.asarray(rewards, dtype=float)
    th = np.asarray(logits, dtype=float)
    pi = np.exp(th - th.max())
    pi /= pi.sum()
    analytic = pi * (r - pi @ r)
    rng = np.random.default_rng(seed)
    arms = rng.choice(len(r), size=samples, p=pi)
    onehot = np.eye(len(r))[arms]
    estimate = (r[arms][:, None] * (onehot - pi)).mean(axis=0)
    return estimate, analytic


def gradient_check(model: PolicyModel, seed: int = 0) -> dict:
    fd = _finite_difference_check(model, seed)
    est, ana = bandit_reinforce_check(seed=seed)
    est0, ana0 = bandit_reinforce_check(rewards=(1.0, 1.0), seed=seed)
    return {
        "finite_difference_max_rel_error": fd,
        "bandit_rel_error": float(np.linalg.norm(est - ana) / np.linalg.norm(ana)),
        "equal_arms_estimate": est0.tolist(),
        "equal_arms_analytic": ana0.tolist(),
    }


# -- persistence -----------------------------------------------------------------

def save_policy(model: PolicyModel, path: str | Path) -> None:
    doc = {
        "format": MODEL_FORMAT, "version": MODEL_VERSION,
        "tau": model.tau, "learn_tau": model.learn_tau, "tau_logit": model.tau_logit,
        "W1": model.W1.tolist(), "b1": model.b1.tolist(), "w2": model.w2.tolist(), "b2": model.b2,
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_policy(path: str | Path) -> PolicyModel:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != MODEL_FORMAT or doc.get("version") != MODEL_VERSION:
        raise ValueError(f"{path}: not a version-{MODEL_VERSION} {MODEL_FORMAT} file")
    m = PolicyModel(np.array(doc["W1"]), np.array(doc["b1"]), np.array(doc["w2"]),
                    float(doc["b2"]), float(doc["tau"]), bool(doc["learn_tau"]))
    m.tau_logit = float(doc["tau_logit"])
    return m
