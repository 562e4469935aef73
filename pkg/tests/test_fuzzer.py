from __future__ import annotations

import itertools
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safetrace.fuzzer import (
    FuzzConfig,
    SearchExhausted,
    SignatureError,
    dump_trace_record,
    enumerate_candidates,
    first_executable_trace,
    load_trace_file,
    node_rng,
    sweep,
    synthesize_trace,
    trace_to_record,
    verify_trace,
)
from safetrace.ltl import evaluate, instantiate_template, monitor_finalize, monitor_run, Verdict
from safetrace.schema import Trace, check_precondition, execute_trace, load_toolset


def toolset(*apis: str, state: str = "") -> object:
    body = "".join(f"  - {a}\n" for a in apis)
    return load_toolset(f"scenario: t\n{state}apis:\n{body}")


def test_single_action_toolset():
    ts = toolset("name: noop")
    res = synthesize_trace(ts, [], FuzzConfig(target_length=3))
    assert res.trace.names == ("noop", "noop", "noop")


def test_ungrounded_oracle_rejected():
    ts = toolset("name: P2")
    with pytest.raises(SignatureError):
        synthesize_trace(ts, [instantiate_template("OperationalRestriction", "P1", "P2")], FuzzConfig(2))


def compliant_words(names, oracles, length):
    return {w for w in itertools.product(names, repeat=length)
            if all(evaluate(o.formula, w) for o in oracles)}


def test_check_before_act_length_two():
    ts = toolset("name: check", "name: act")
    oracles = [instantiate_template("OperationalRestriction", "check", "act")]
    allowed = compliant_words(("check", "act"), oracles, 2)
    assert allowed == {("check", "act"), ("check", "check")}
    for seed in range(20):
        res = synthesize_trace(ts, oracles, FuzzConfig(target_length=2, seed=seed))
        assert res.trace.names in allowed


FLAGGED = """state:
  ready: {type: bool, initial: false}
"""


def test_candidates_respect_preconditions():
    ts = toolset("name: check\n    effects: [ready = true]", "name: act\n    precondition: ready",
                 state=FLAGGED)
    cands = enumerate_candidates(ts, ts.initial_state(), random.Random(0))
    assert [a.name for a, _ in cands] == ["check"]


def test_boolean_param_has_two_bindings():
    ts = toolset("name: toggle\n    params:\n      enabled: {type: bool}")
    cands = enumerate_candidates(ts, ts.initial_state(), random.Random(0))
    assert sorted(args["enabled"] for _, args in cands) == [False, True]


def test_candidate_order_is_seeded():
    ts = toolset(*(f"name: api{i}" for i in range(12)))
    a = enumerate_candidates(ts, ts.initial_state(), node_rng(7, [1, 2]))
    b = enumerate_candidates(ts, ts.initial_state(), node_rng(7, [1, 2]))
    c = enumerate_candidates(ts, ts.initial_state(), node_rng(8, [1, 2]))
    assert [x.name for x, _ in a] == [x.name for x, _ in b]
    assert [x.name for x, _ in a] != [x.name for x, _ in c]
    assert len(enumerate_candidates(ts, ts.initial_state(), node_rng(0, []), limit=5)) == 5


def test_pending_obligation_at_horizon_is_dead_end():
    # the only way to answer the trigger is unreachable, so every trace ending after a trigger fails
    ts = toolset("name: trigger", "name: respond\n    precondition: ready", state=FLAGGED)
    oracles = [instantiate_template("InstructionAdherence", "trigger", "respond")]
    with pytest.raises(SearchExhausted) as err:
        synthesize_trace(ts, oracles, FuzzConfig(target_length=2))
    assert err.value.stats.backtracks > 0
    assert err.value.reason == "search space exhausted"


def test_violating_candidates_are_pruned():
    ts = toolset("name: check", "name: act")
    oracles = [instantiate_template("OperationalRestriction", "check", "act")]
    pruned = sum(synthesize_trace(ts, oracles, FuzzConfig(3, seed=s)).stats.prunes_safety for s in range(20))
    assert pruned > 0


def test_backtrack_budget():
    ts = toolset("name: trigger", "name: respond\n    precondition: ready", state=FLAGGED)
    oracles = [instantiate_template("InstructionAdherence", "trigger", "respond")]
    with pytest.raises(SearchExhausted) as err:
        synthesize_trace(ts, oracles, FuzzConfig(target_length=6, max_backtracks=3))
    assert err.value.reason == "backtrack budget exceeded"


def test_safety_step_inserted_before_only_business_action():
    ts = toolset("name: check\n    safety_critical: true", "name: act")
    oracles = [instantiate_template("OperationalRestriction", "check", "act")]
    for seed in range(30):
        for length in (1, 2, 3, 4):
            try:
                names = synthesize_trace(ts, oracles, FuzzConfig(length, seed=seed)).trace.names
            except SearchExhausted:
                assert length == 1  # a lone act would be unsafe, a lone check is not business
                continue
            assert "act" in names
            assert "check" in names[: names.index("act")]


def test_deterministic(scenario):
    _, ts, oracles = scenario
    cfg = FuzzConfig(target_length=8, seed=11)
    assert synthesize_trace(ts, oracles, cfg).trace == synthesize_trace(ts, oracles, cfg).trace


def test_lookahead_preserves_output(scenario):
    _, ts, oracles = scenario
    for seed in range(10):
        plain = synthesize_trace(ts, oracles, FuzzConfig(6 + seed % 5, seed=seed))
        guided = synthesize_trace(ts, oracles, FuzzConfig(6 + seed % 5, seed=seed, lookahead=True))
        assert plain.trace == guided.trace
        assert guided.stats.nodes_explored <= plain.stats.nodes_explored


def test_fixture_traces_satisfy_both_checks(scenario):
    _, ts, oracles = scenario
    for seed in range(10):
        res = synthesize_trace(ts, oracles, FuzzConfig(4 + seed % 7, seed=seed))
        assert len(res.trace) == 4 + seed % 7
        assert verify_trace(ts, oracles, res.trace)
        state = ts.initial_state()
        for inv in res.trace:
            assert check_precondition(ts.api(inv.api_name), inv.args, state)
            state = res.state_sequence[inv.step]
        assert res.final_state == execute_trace(ts, None, res.trace).final_state
        assert set(res.trace.names) - ts.safety_apis, "needs a business action"


def test_every_prefix_is_free_of_violation(scenario):
    _, ts, oracles = scenario
    res = synthesize_trace(ts, oracles, FuzzConfig(10, seed=3))
    for k in range(len(res.trace) + 1):
        m = monitor_run(oracles, res.trace.names[:k])
        assert Verdict.VIOLATED_PERM not in m.verdicts.values()
    assert monitor_finalize(monitor_run(oracles, res.trace.names))


SMALL = load_toolset("""
scenario: small
state:
  armed: {type: bool, initial: false}
apis:
  - name: a
    effects: [armed = true]
  - name: b
  - name: c
    precondition: armed
    effects: [armed = false]
""")
PAIRS = list(itertools.permutations("abc", 2))
oracle_sets = st.lists(
    st.tuples(st.sampled_from(["OperationalRestriction", "InstructionAdherence"]), st.sampled_from(PAIRS)),
    max_size=3,
).map(lambda items: [instantiate_template(k, p, q) for k, (p, q) in items])


@settings(max_examples=150, deadline=None)
@given(oracle_sets, st.integers(1, 4), st.integers(0, 50))
def test_complete_at_small_scale(oracles, length, seed):
    exists = any(
        execute_trace(SMALL, None, Trace.of(w)).ok and all(evaluate(o.formula, w) for o in oracles)
        for w in itertools.product("abc", repeat=length)
    )
    cfg = FuzzConfig(length, seed=seed, max_backtracks=3 ** (length + 1), require_business_action=False)
    try:
        res = synthesize_trace(SMALL, oracles, cfg)
    except SearchExhausted:
        assert not exists
        return
    assert exists and verify_trace(SMALL, oracles, res.trace)


def test_trace_file_round_trip(tmp_path, accounts, accounts_oracles):
    res = synthesize_trace(accounts, accounts_oracles, FuzzConfig(5, seed=2))
    path = tmp_path / "t.json"
    path.write_text(dump_trace_record(trace_to_record(res, "accounts")))
    trace, rec = load_trace_file(path)
    assert trace == res.trace
    assert rec["seed"] == 2 and rec["config"]["target_length"] == 5


def test_sweep_collects_exhausted():
    ts = toolset("name: trigger", "name: respond\n    precondition: ready", state=FLAGGED)
    oracles = [instantiate_template("InstructionAdherence", "trigger", "respond")]
    out = sweep(ts, oracles, [FuzzConfig(1, seed=0), FuzzConfig(2, seed=1)])
    assert len(out.results) == 0 and len(out.exhausted) == 2


def test_first_executable_baseline(accounts):
    t = first_executable_trace(accounts, 4)
    assert t.names == ("CreateUser", "CreateUser", "CreateUser", "CreateUser")
    assert execute_trace(accounts, None, t).ok
