import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import entropy_normalized, mean_pairwise_jaccard, pearson
from steprag.corpus import Passage, build_index
from steprag.rsus import (
    CONFIDENCE_PROMPT, DEFAULT_WEIGHTS, EntityMention, RsusConfig, auroc, combine, entity_contribution,
    extract_entities, fit_weights, normalized_entropy, parse_confidence, proxy_features, simplex_grid,
    u_cons, u_ent, u_verb, u_verb_proxy_train,
)


class StubBackend:
    def __init__(self, reply=None, samples=None):
        self.reply, self.samples, self.prompts = reply, samples, []

    def probe_confidence(self, context):
        self.prompts.append(context)
        return self.reply

    def sample_continuations(self, context, k):
        return self.samples


def surfaces(text):
    return [e.surface for e in extract_entities(text)]


def test_prompt_is_verbatim():
    assert CONFIDENCE_PROMPT == (
        "Given the reasoning so far, rate your confidence that the current conclusion is factually "
        "correct on a scale of 0-100, where 0 means completely uncertain and 100 means absolutely "
        "certain. Respond with only a number:")


@pytest.mark.parametrize("text,expected", [
    ("The Berlin Wall fell in 1989", ["Berlin Wall"]),
    ("", []),
    ("driving miss daisy", []),
    ("I think the mentor of Alder Voss is probably Cara Dunn.", ["Alder Voss", "Cara Dunn"]),
    ("So, Bruce Beresford directed it. Bruce Beresford again.", ["Bruce Beresford"]),
])
def test_extract_entities(text, expected):
    assert surfaces(text) == expected


def test_entity_spans_point_at_surface():
    text = "Later, Cara Dunn met Alder Voss in 1990."
    for e in extract_entities(text):
        assert text[e.span[0]:e.span[1]] == e.surface


@pytest.mark.parametrize("reply,expected", [("85", 0.15), ("100", 0.0), ("Confidence: 0", 1.0)])
def test_u_verb_transform(reply, expected):
    b = StubBackend(reply)
    assert u_verb(b, "ctx") == pytest.approx(expected)
    assert b.prompts == ["ctx\n" + CONFIDENCE_PROMPT]


@pytest.mark.parametrize("reply", ["very sure", None, "150"])
def test_u_verb_fallback(reply, caplog):
    events = []
    assert u_verb(StubBackend(reply), "ctx", events=events) == 0.5
    assert events and events[0][0] == "u_verb_fallback"
    assert "fallback" in caplog.text


def test_parse_confidence_takes_first_integer():
    assert parse_confidence("about 70, maybe 80") == 70


def test_u_cons_cases():
    same = ["the answer is x"] * 3
    assert u_cons(StubBackend(samples=same), "c", 3) == 0.0
    disjoint = ["alpha beta", "gamma delta", "epsilon zeta"]
    assert u_cons(StubBackend(samples=disjoint), "c", 3) == 1.0
    assert u_cons(StubBackend(samples=disjoint), "c", 3, step_text="A plain step.") == 0.0
    assert u_cons(StubBackend(samples=disjoint), "c", 3, step_text="Therefore, a step.") == 1.0
    with pytest.raises(ValueError):
        u_cons(StubBackend(samples=same), "c", 1)


def test_u_cons_fallback_without_samples():
    events = []
    assert u_cons(StubBackend(samples=None), "c", 3, events=events) == 0.0
    assert events[0][0] == "u_cons_fallback"


@settings(max_examples=100, deadline=None)
@given(st.lists(st.text(alphabet="abc de", min_size=1, max_size=12), min_size=2, max_size=5))
def test_u_cons_matches_jaccard_oracle(samples):
    got = u_cons(StubBackend(samples=samples), "c", len(samples))
    assert got == pytest.approx(1 - mean_pairwise_jaccard(samples), abs=1e-12)
    assert 0.0 <= got <= 1.0


@pytest.mark.parametrize("m", [2, 4, 10, 100])
def test_uniform_entropy_is_one(m):
    assert normalized_entropy([1 / m] * m) == pytest.approx(1.0, abs=1e-9)


def test_entropy_degenerate_sizes():
    assert normalized_entropy([]) == 0.0
    assert normalized_entropy([1.0]) == 0.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.001, 10.0), min_size=1, max_size=50))
def test_entropy_matches_oracle(weights):
    probs = [w / sum(weights) for w in weights]
    assert normalized_entropy(probs) == pytest.approx(entropy_normalized(probs), abs=1e-9)
    assert 0.0 <= normalized_entropy(probs) <= 1.0


def _tiny_index():
    return build_index([
        Passage("a", "", "Zed Quill founded."), Passage("b", "", "Zed Quill sings."),
        Passage("c", "", "Zed Quill reads."), Passage("d", "", "Zed Quill runs."),
        Passage("e", "", "Solo Wren is alone here."), Passage("f", "", "filler text only"),
    ])


def test_u_ent_cases():
    idx = _tiny_index()
    assert u_ent(idx, []) == 0.0
    assert entity_contribution(idx, "Nobody Here") == 1.0
    assert entity_contribution(idx, "Solo Wren") == 0.0
    # four equal-length passages mention Zed Quill: uniform scores
    assert entity_contribution(idx, "Zed Quill") == pytest.approx(1.0, abs=1e-9)


def test_u_ent_order_and_duplicate_invariant():
    idx = _tiny_index()
    a = [EntityMention("Zed Quill", (0, 9)), EntityMention("Solo Wren", (10, 19))]
    b = [a[1], a[0], EntityMention("Zed Quill", (30, 39))]
    assert u_ent(idx, a) == u_ent(idx, b) == pytest.approx(0.5)


def test_u_ent_bounded_on_random_inputs(index, world):
    rng = random.Random(0)
    pool = world.entities + ["Unknown Person", "Alder", "Zzz Top"]
    for _ in range(1000):
        ents = [EntityMention(s, (0, len(s))) for s in rng.sample(pool, rng.randint(0, 4))]
        v = u_ent(index, ents, contribution=lambda s, c={}: c.setdefault(s, entity_contribution(index, s)))
        assert 0.0 <= v <= 1.0


def test_combine_examples():
    cfg = RsusConfig()
    assert (cfg.alpha, cfg.beta, cfg.gamma) == DEFAULT_WEIGHTS
    assert combine(cfg, 1, 1, 1).combined == pytest.approx(1.0)
    assert combine(cfg, 0, 0, 0).combined == 0.0
    assert combine(cfg, 0.68, 0.81, 0.50).combined == pytest.approx(0.6805)
    with pytest.raises(ValueError):
        combine(cfg, 1.2, 0, 0)


def test_config_validation():
    with pytest.raises(ValueError):
        RsusConfig(0.5, 0.5, 0.5)
    with pytest.raises(ValueError):
        RsusConfig(k_consistency=1)
    assert RsusConfig().k_consistency == 3 and RsusConfig().entropy_window == 100


unit = st.floats(0.0, 1.0)


@settings(max_examples=200, deadline=None)
@given(unit, unit, unit, unit, st.sampled_from([0, 1, 2]))
def test_combine_monotone_and_bounded(a, b, c, bump, which):
    cfg = RsusConfig()
    base = combine(cfg, a, b, c)
    comps = [a, b, c]
    comps[which] = max(comps[which], bump)
    assert combine(cfg, *comps).combined >= base.combined - 1e-15
    assert 0.0 <= base.combined <= 1.0


def test_simplex_grid_size():
    grid = simplex_grid()
    assert len(grid) == 231
    assert all(abs(sum(w) - 1) < 1e-12 for w in grid)


def test_fit_weights_linear_construction():
    rng = np.random.default_rng(0)
    C = rng.random((200, 3))
    y = 0.5 * C[:, 0] + 0.5 * C[:, 1]
    cfg = fit_weights(C, y)
    assert cfg.gamma <= 0.05
    assert cfg.correlation >= 0.99
    assert cfg.correlation == pytest.approx(pearson(list(C @ [cfg.alpha, cfg.beta, cfg.gamma]), list(y)))


def test_fit_weights_errors():
    C = np.random.default_rng(1).random((30, 3))
    with pytest.raises(ValueError):
        fit_weights(C, np.ones(30))
    with pytest.raises(ValueError):
        fit_weights(C[:10], np.arange(10.0))


def test_auroc_oracle_and_errors():
    # brute-force pair count with ties as half
    s, y = [0.1, 0.4, 0.35, 0.8, 0.4], [0, 0, 1, 1, 1]
    pos = [a for a, l in zip(s, y) if l]
    neg = [a for a, l in zip(s, y) if not l]
    want = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg) / (len(pos) * len(neg))
    assert auroc(s, y) == pytest.approx(want)
    with pytest.raises(ValueError, match="degenerate labels"):
        auroc([0.1, 0.2], [1, 1])


def test_proxy_on_separable_data():
    rng = random.Random(0)
    feats, labels = [], []
    for _ in range(200):
        hedges = rng.randint(0, 3)
        feats.append([rng.randint(5, 30), hedges, rng.randint(0, 3), rng.random()])
        labels.append(int(hedges > 0))
    proxy = u_verb_proxy_train(feats, labels)
    assert proxy.auroc >= 0.95
    assert 0.0 < proxy.predict(feats[0]) < 1.0
    with pytest.raises(ValueError, match="degenerate labels"):
        u_verb_proxy_train(feats, [1] * 200)
    with pytest.raises(ValueError):
        u_verb_proxy_train(feats[:49], labels[:49])


def test_proxy_used_when_reply_unparseable():
    rng = random.Random(1)
    feats = [[rng.randint(5, 30), h, 1, 0.5] for h in [rng.randint(0, 2) for _ in range(100)]]
    proxy = u_verb_proxy_train(feats, [int(f[1] > 0) for f in feats])
    step = "I think it is probably Cara Dunn."
    x = proxy_features(step, [0.2, 0.4])
    assert u_verb(StubBackend("no idea"), "c", proxy=proxy, proxy_features=x) == pytest.approx(proxy.predict(x))
    assert x[1] == 2.0 and x[3] == pytest.approx(0.3)


def test_hedge_lexicon():
    from steprag.text import HEDGE_PHRASES
    assert {"probably", "i think", "maybe"} <= set(HEDGE_PHRASES)
