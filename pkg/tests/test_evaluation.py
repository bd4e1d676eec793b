import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import frontier
from steprag.evaluation import (
    DEFAULT_ITERATIONS, answer_metrics, bootstrap_compare, normalize_answer, pareto_report, write_pareto,
)


def test_answer_metric_examples():
    assert answer_metrics("Driving Miss Daisy", "driving miss daisy.") == (1, 1.0)
    em, f1 = answer_metrics("Bruce Beresford directed it", "Bruce Beresford")
    assert em == 0 and round(f1, 3) == 0.667
    assert answer_metrics("alpha beta", "gamma") == (0, 0.0)
    assert answer_metrics("", "") == (1, 1.0)
    assert answer_metrics("the", "x") == (0, 0.0)
    assert normalize_answer("  The  Cat, an apple! ") == "cat apple"


@given(st.text(max_size=30), st.text(max_size=30))
def test_answer_metric_ranges(a, b):
    em, f1 = answer_metrics(a, b)
    assert em in (0, 1) and 0.0 <= f1 <= 1.0
    assert answer_metrics(b, a)[1] == pytest.approx(f1)
    if em:
        assert f1 == 1.0


def test_bootstrap_identical_inputs():
    x = np.random.default_rng(0).normal(size=50)
    r = bootstrap_compare(x, x)
    assert r.delta == 0 and r.ci_low <= 0 <= r.ci_high and r.p_value == 1.0
    assert r.iterations == DEFAULT_ITERATIONS == 10_000


def test_bootstrap_swap_and_determinism():
    rng = np.random.default_rng(1)
    a, b = rng.normal(0.2, 1, 80), rng.normal(0, 1, 80)
    r1, r2 = bootstrap_compare(a, b, 2000, seed=3), bootstrap_compare(b, a, 2000, seed=3)
    assert r1.delta == pytest.approx(-r2.delta)
    assert r1.p_value == pytest.approx(r2.p_value)
    assert r1.ci_low == pytest.approx(-r2.ci_high) and r1.ci_high == pytest.approx(-r2.ci_low)
    assert bootstrap_compare(a, b, 2000, seed=3) == r1


def test_bonferroni_widens_interval():
    rng = np.random.default_rng(2)
    a, b = rng.normal(0, 1, 100), rng.normal(0, 1, 100)
    r1 = bootstrap_compare(a, b, 4000, comparisons=1)
    r5 = bootstrap_compare(a, b, 4000, comparisons=5)
    assert r5.level == pytest.approx(0.01)
    assert r5.ci_low <= r1.ci_low and r5.ci_high >= r1.ci_high


def test_bootstrap_errors():
    with pytest.raises(ValueError):
        bootstrap_compare([], [])
    with pytest.raises(ValueError):
        bootstrap_compare([1, 2, 3], [1, 2])
    with pytest.raises(ValueError):
        bootstrap_compare([1.0], [2.0])
    with pytest.raises(ValueError):
        bootstrap_compare([1, 2], [2, 3], iterations=10)


def test_pareto_examples(tmp_path):
    rows = {r.name: r for r in pareto_report([("A", 0.7, 1.8), ("B", 0.65, 3.4)])}
    assert rows["A"].frontier and not rows["B"].frontier
    rows = {r.name: r for r in pareto_report([("A", 0.6, 1.0), ("B", 0.6, 2.0)])}
    assert rows["A"].frontier and not rows["B"].frontier
    pts = [("none", 48.7, 0), ("single", 59.4, 1), ("fixed", 65.4, 3.4), ("x", 66.8, 2.4), ("ours", 71.2, 1.8)]
    on = {(r.avg_calls, r.f1) for r in pareto_report(pts) if r.frontier}
    assert on == {(0, 48.7), (1, 59.4), (1.8, 71.2)}
    write_pareto(pareto_report(pts), tmp_path / "p.tsv")
    assert len((tmp_path / "p.tsv").read_text().splitlines()) == 6
    with pytest.raises(ValueError):
        pareto_report([("A", 0.5, 1.0)])


@settings(max_examples=100)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 10)), min_size=2, max_size=12))
def test_pareto_matches_oracle(coords):
    pts = [(f"s{i}", f, c) for i, (f, c) in enumerate(coords)]
    got = sorted((r.avg_calls, r.f1) for r in pareto_report(pts) if r.frontier)
    assert got == sorted(frontier([(c, f) for f, c in coords]))
