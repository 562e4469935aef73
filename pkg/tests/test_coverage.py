from __future__ import annotations

import itertools
import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from safetrace.coverage import CoverageError, atc, coverage_report, safety_coverage
from safetrace.schema import Trace, load_toolset

ABC = load_toolset("scenario: abc\napis:\n  - name: a\n  - name: b\n  - name: c\n")
GUARDED = load_toolset("scenario: guarded\napis:\n  - name: b\n"
                       + "".join(f"  - name: s{i}\n    safety_critical: true\n" for i in range(1, 5)))


def test_atc_counts_distinct_adjacent_pairs():
    ratio, pairs = atc([Trace.of(["a", "b", "a", "c"])], ABC)
    assert pairs == {("a", "b"), ("b", "a"), ("a", "c")}
    assert ratio == pytest.approx(3 / 9)


def test_atc_of_single_steps_is_zero():
    assert atc([["a"], ["b"], []], ABC)[0] == 0.0


def test_atc_full_and_self_pairs():
    # one de Bruijn-style walk covers all nine ordered pairs, self-pairs included
    walk = ["a", "a", "b", "b", "c", "c", "a", "c", "b", "a"]
    ratio, pairs = atc([walk], ABC)
    assert pairs == set(itertools.product("abc", repeat=2)) and ratio == 1.0


def test_atc_merges_pairs_across_traces():
    assert atc([["a", "b"], ["a", "b"], ["b", "c"]], ABC)[0] == pytest.approx(2 / 9)


def test_safety_coverage_examples():
    assert safety_coverage([["s1", "s2"], ["b", "s3", "s4"]], GUARDED)[0] == 1.0
    assert safety_coverage([["b", "b"]], GUARDED)[0] == 0.0
    ratio, covered = safety_coverage([["s1", "b"], ["s2"], ["s3", "s1"]], GUARDED)
    assert ratio == 0.75 and covered == {"s1", "s2", "s3"}


def test_unknown_api_rejected():
    with pytest.raises(CoverageError, match="teleport"):
        atc([["a", "teleport"]], ABC)
    with pytest.raises(CoverageError, match="teleport"):
        safety_coverage([["teleport"]], GUARDED)


def test_empty_safety_subset_rejected():
    with pytest.raises(CoverageError):
        safety_coverage([["a"]], ABC)


def test_report_serialises():
    rep = coverage_report([["s1", "b"], ["b", "s2"]], GUARDED)
    data = json.loads(rep.to_json())
    assert data["pairs_covered"] == 2 and data["pairs_possible"] == 25 and data["sc_cov"] == 0.5
    assert "50.00%" in rep.render()


traces = st.lists(st.lists(st.sampled_from(["b", "s1", "s2", "s3", "s4"]), max_size=8), max_size=6)


@given(traces, traces)
def test_monotone_under_union(xs, ys):
    for metric in (atc, safety_coverage):
        assert metric(xs, GUARDED)[0] <= metric(xs + ys, GUARDED)[0]


@given(traces, st.randoms())
def test_bounded_and_order_invariant(xs, rnd):
    shuffled = list(xs)
    rnd.shuffle(shuffled)
    for metric in (atc, safety_coverage):
        value = metric(xs, GUARDED)[0]
        assert 0.0 <= value <= 1.0
        assert metric(shuffled, GUARDED)[0] == value
