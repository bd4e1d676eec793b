import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from steprag.text import DISCOURSE_MARKERS, split_sentences, starts_with_phrase, terms
from steprag.trace import (
    BUNDLED_WEIGHTS, FEATURE_NAMES, SegmenterModel, StreamSource, TokenStream, boundary_features,
    bundled_model, evaluate_segmenter, is_candidate, load_model, read_annotated, save_model, segment,
    synthetic_traces, train_segmenter, write_annotated,
)


@pytest.fixture(scope="module")
def traces():
    return synthetic_traces(200, seed=0)


def _steps(text, model=None, **kw):
    return segment(TokenStream.from_text(text), model, **kw)


def test_boundary_before_therefore():
    text = "The wall fell in 1989. Therefore, the 1989 Best Picture winner was Driving Miss Daisy."
    steps = _steps(text)
    assert len(steps) == 2
    assert steps[1].text.startswith("Therefore")


def test_short_stream_without_markers_is_one_step():
    text = "The wall fell in 1989. It was a cold night. Crowds gathered."
    steps = _steps(text)
    assert len(steps) == 1
    assert steps[0].token_span == (0, len(TokenStream.from_text(text)))


def test_defaults_and_errors():
    with pytest.raises(ValueError):
        segment(TokenStream(()))
    with pytest.raises(ValueError):
        _steps("a. b.", window=4, stride=8)
    with pytest.raises(ValueError):
        SegmenterModel(np.zeros(3))


def _expected_boundaries(tokens):
    """Rule oracle: with the bundled weights a candidate splits iff a discourse marker follows."""
    out = []
    for i in range(1, len(tokens)):
        if is_candidate(tokens, i):
            after = [w for t in tokens[i:i + 4] for w in terms(t)]
            if starts_with_phrase(after, DISCOURSE_MARKERS):
                out.append(i)
    return out


def test_bundled_weights_make_marker_decisive():
    w = np.array(BUNDLED_WEIGHTS)
    # worst case with a marker: full topic shift and punctuation penalty, no connective
    assert w[0] + w[2] + w[3] + w[4] > 0
    # best case without a marker: connective hit, no penalties
    assert w[1] + w[4] < 0


sentence = st.sampled_from([
    "The bridge was built in Harwick.", "Records mention it twice.", "So the answer is near.",
    "Therefore it must be Vell.", "However, nobody agrees.", "Next, check the archive.",
    "It follows that Orla knew.", "This means the treaty held.", "Hence the delay.",
    "Let me verify the date.", "Some sources disagree!", "Why did it fail?",
])


@settings(max_examples=80, deadline=None)
@given(st.lists(sentence, min_size=1, max_size=12), st.lists(st.sampled_from([" ", "\n", "  "]), min_size=12, max_size=12))
def test_partition_and_rule_oracle(sents, seps):
    text = "".join(s + seps[i] for i, s in enumerate(sents)).rstrip()
    stream = TokenStream.from_text(text)
    steps = segment(stream, window=16, stride=8)
    assert "".join(s.text for s in steps) == text
    spans = [s.token_span for s in steps]
    assert spans[0][0] == 0 and spans[-1][1] == len(stream)
    assert all(a[1] == b[0] and a[0] < a[1] for a, b in zip(spans, spans[1:]))
    assert [s.index for s in steps] == list(range(1, len(steps) + 1))
    assert [s.token_span[0] for s in steps[1:]] == _expected_boundaries(stream.tokens)
    assert all(0.0 <= s.boundary_confidence <= 1.0 for s in steps)


@settings(max_examples=30, deadline=None)
@given(st.lists(sentence, min_size=2, max_size=10), st.floats(0.05, 0.9), st.floats(0.05, 0.9))
def test_lower_threshold_never_removes_boundaries(sents, t1, t2):
    lo, hi = sorted((t1, t2))
    stream = TokenStream.from_text(" ".join(sents))
    weights = np.array([1.5, 0.8, 0.6, 0.4, -1.0])
    b_hi = {s.token_span[0] for s in segment(stream, SegmenterModel(weights, hi))}
    b_lo = {s.token_span[0] for s in segment(stream, SegmenterModel(weights, lo))}
    assert b_hi <= b_lo


def test_features_in_range(traces):
    stream, _ = traces[0]
    for i in range(1, len(stream.tokens)):
        if is_candidate(stream.tokens, i):
            f = boundary_features(stream.tokens, i)
            assert f.discourse_marker_hit in (0, 1) and f.logical_connective_hit in (0, 1)
            assert f.punctuation_signal in (0, 1) and 0.0 <= f.topic_shift_score <= 1.0


def test_training_reaches_high_heldout_f1(traces):
    model = train_segmenter(traces, seed=0)
    assert model.metrics["f1"] >= 0.90
    assert model.metrics["n_test"] == 40


def test_bundled_model_matches_training(traces):
    model = train_segmenter(traces, seed=0)
    assert np.allclose(model.weights, BUNDLED_WEIGHTS, atol=0.01)


def test_training_needs_ten_streams(traces):
    with pytest.raises(ValueError, match="insufficient training data"):
        train_segmenter([])
    with pytest.raises(ValueError, match="insufficient training data"):
        train_segmenter(traces[:9])


def test_ablation_order(traces):
    f1 = {name: train_segmenter(traces, drop_features=(name,)).metrics["f1"] for name in FEATURE_NAMES}
    assert f1["discourse_marker"] <= f1["punctuation"]


def test_segments_much_longer_than_sentences(traces):
    model = bundled_model()
    seg_lens, sent_lens = [], []
    for stream, _ in traces:
        seg_lens += [len(s.text.split()) for s in segment(stream, model)]
        sent_lens += [len(s.split()) for s in split_sentences(stream.text)]
    assert np.mean(seg_lens) / np.mean(sent_lens) >= 3.0


def test_segmentation_deterministic(traces):
    stream, _ = traces[1]
    assert segment(stream) == segment(stream)


def test_model_and_annotation_round_trip(tmp_path, traces):
    model = bundled_model()
    save_model(model, tmp_path / "m.txt")
    assert np.array_equal(load_model(tmp_path / "m.txt").weights, model.weights)
    write_annotated(traces[:5], tmp_path / "a.jsonl")
    back = read_annotated(tmp_path / "a.jsonl")
    assert [(s.tokens, g) for s, g in back] == [(s.tokens, list(g)) for s, g in traces[:5]]
    assert back[0][0].source is StreamSource.REPLAY


def test_held_out_evaluation_counts(traces):
    metrics = evaluate_segmenter(bundled_model(), traces[:20])
    assert set(metrics) == {"precision", "recall", "f1"}
