from __future__ import annotations

import json

import pytest

from safetrace.clients import (
    CassetteMiss,
    ClientConfigError,
    HttpCompletionClient,
    MockClient,
    ReplayClient,
    interaction_key,
)
from safetrace.ingest import (
    CandidateRule,
    align_scope,
    build_extraction_prompt,
    deduplicate,
    extract_oracles,
    extract_rules,
    ground_rules,
    parse_completion,
    post_filter,
    split_policy,
)
from safetrace.ltl import TemplateKind, validate_signature
from safetrace.scenarios import SCENARIOS, load_scenario_oracles, load_scenario_policy, load_scenario_toolset, \
    scenario_cassette
from safetrace.schema import load_toolset

POLICY = "Staff must check authorisation before any transfer. Every transfer is logged afterwards."
BANK = load_toolset("scenario: bank\napis:\n  - name: check_auth\n  - name: transfer\n  - name: audit_log\n")


def rule(kind, p1, p2, excerpt):
    return f'RULE\nkind: {kind}\np1: {p1}\np2: {p2}\nexcerpt: "{excerpt}"\nEND\n'


OR_RULE = rule("OperationalRestriction", "check_auth", "transfer", "must check authorisation before any transfer")


def test_identical_rules_deduplicated():
    client = MockClient(OR_RULE + OR_RULE)
    rules = extract_rules(POLICY, BANK, client)
    assert len(rules) == 1
    assert rules[0].key == ("OperationalRestriction", "check_auth", "transfer")


def test_out_of_policy_excerpt_dropped():
    client = MockClient(rule("OperationalRestriction", "check_auth", "transfer", "must verify"))
    report_rules = extract_rules(POLICY, BANK, client)
    assert report_rules == []


def test_excerpt_match_ignores_line_breaks():
    policy = "Staff must check\n   authorisation before any transfer."
    kept, dropped = align_scope([CandidateRule(TemplateKind.OPERATIONAL_RESTRICTION, "a", "b",
                                               "must check authorisation")], policy)
    assert len(kept) == 1 and not dropped


def test_prompt_lists_apis_and_policy():
    client = MockClient(OR_RULE)
    extract_rules(POLICY, BANK, client)
    prompt = client.prompts[0]
    assert "check_auth" in prompt and "audit_log" in prompt and POLICY in prompt
    assert prompt == build_extraction_prompt(POLICY, BANK)


@pytest.mark.parametrize("reply, reason", [
    ("RULE\nkind: OperationalRestriction\np1: a\nexcerpt: \"x\"\nEND\n", "missing"),
    ("RULE\nkind: Sometimes\np1: a\np2: b\nexcerpt: \"x\"\nEND\n", "unknown rule kind"),
    ("RULE\nkind: OperationalRestriction\np1: a b\np2: c\nexcerpt: \"x\"\nEND\n", "identifier"),
    ("RULE\nkind: OperationalRestriction\np1: a\np2: a\nexcerpt: \"x\"\nEND\n", "same API"),
    ("RULE\nkind: OperationalRestriction\np1: a\np2: b\nexcerpt: x\nEND\n", "double-quoted"),
    ("RULE\nkind: OperationalRestriction\np1: a\np2: b\nexcerpt: \"x\"\n", "not closed"),
    ("Here are the rules I found.\n", "outside a RULE block"),
    ("RULE\nkind: OperationalRestriction\nkind: OperationalRestriction\nEND\n", "repeated"),
    ("RULE\nwhatever\nEND\n", "unexpected line"),
])
def test_malformed_items_rejected_individually(reply, reason):
    rules, rejections = parse_completion(OR_RULE + reply + OR_RULE)
    assert len(rules) == 2
    assert len(rejections) == 1 and reason in rejections[0].reason


def test_rationale_is_optional_and_kept():
    text = OR_RULE.replace("END", "rationale: guard transfers\nEND")
    (r,), _ = parse_completion(text)
    assert r.rationale == "guard transfers"
    (r,), _ = parse_completion(OR_RULE)
    assert r.rationale == ""


def test_grounding_accepts_known_apis():
    cand = CandidateRule(TemplateKind.OPERATIONAL_RESTRICTION, "check_auth", "transfer", "e")
    accepted, rejected = ground_rules([cand], BANK)
    assert [o.id for o in accepted] == ["OR:check_auth:transfer"] and not rejected
    assert accepted[0].provenance == "e"


def test_grounding_rejects_hallucinated_api():
    cand = CandidateRule(TemplateKind.OPERATIONAL_RESTRICTION, "verify_user", "transfer", "e")
    accepted, rejected = ground_rules([cand], BANK)
    assert not accepted
    assert rejected[0].unknown == ("verify_user",) and "verify_user" in rejected[0].reason


def test_grounding_empty():
    assert ground_rules([], BANK) == ([], [])


def test_post_filter_idempotent():
    cands = [CandidateRule(TemplateKind.OPERATIONAL_RESTRICTION, "check_auth", "transfer",
                           "must check authorisation"),
             CandidateRule(TemplateKind.OPERATIONAL_RESTRICTION, "check_auth", "transfer", "before any transfer"),
             CandidateRule(TemplateKind.INSTRUCTION_ADHERENCE, "transfer", "audit_log", "not in there")]
    once = post_filter(cands, POLICY)
    assert post_filter(once, POLICY) == once
    assert deduplicate(once)[0] == once
    assert len(once) == 1


def test_split_policy_chunks():
    policy = "\n\n".join(f"paragraph {i} " + "x" * 50 for i in range(10))
    chunks = split_policy(policy, max_chars=150)
    assert all(len(c) <= 150 for c in chunks) and len(chunks) > 1
    assert " ".join(chunks).replace("\n\n", " ").split() == policy.replace("\n\n", " ").split()


def test_long_policy_uses_several_prompts():
    policy = POLICY + "\n\n" + "Unrelated paragraph. " * 30
    client = MockClient([OR_RULE, OR_RULE])
    report_rules = extract_rules(policy, BANK, client, max_chunk_chars=120)
    assert len(client.prompts) == 2
    assert len(report_rules) == 1


def test_parallel_requests_match_sequential():
    policy = "\n\n".join([POLICY] * 4)
    seq = extract_oracles(policy, BANK, MockClient(OR_RULE), max_chunk_chars=100)
    par = extract_oracles(policy, BANK, MockClient(OR_RULE), max_chunk_chars=100, workers=4)
    assert seq.to_dict() == par.to_dict()


def test_healthcare_replay_has_audit_rule():
    name = "tele_healthcare"
    client = ReplayClient(scenario_cassette(name))
    report = extract_oracles(load_scenario_policy(name), load_scenario_toolset(name), client)
    audit = [o for o in report.accepted
             if o.template is TemplateKind.INSTRUCTION_ADHERENCE and o.parts == ("view_record", "log_access")]
    assert audit and "audit log" in audit[0].provenance


@pytest.mark.parametrize("name", SCENARIOS)
def test_replay_reproduces_bundled_oracles(name):
    toolset = load_scenario_toolset(name)
    reports = [extract_oracles(load_scenario_policy(name), toolset, ReplayClient(scenario_cassette(name)))
               for _ in range(2)]
    assert reports[0].to_dict() == reports[1].to_dict()
    assert reports[0].accepted == load_scenario_oracles(name)
    for o in reports[0].accepted:
        assert validate_signature(o, toolset).accepted
    for g in reports[0].grounding_rejections:
        assert g.unknown
    # each fixture's cassette carries noise that the filters must catch
    assert reports[0].grounding_rejections or reports[0].out_of_scope
    assert reports[0].duplicates and reports[0].parse_rejections


def test_review_report_renders_every_oracle():
    name = "smart_home"
    report = extract_oracles(load_scenario_policy(name), load_scenario_toolset(name),
                             ReplayClient(scenario_cassette(name)))
    text = report.render()
    for o in report.accepted:
        assert o.id in text
    assert "verify_user" in text


# clients


def test_mock_client_repeats_last_response():
    c = MockClient(["one", "two"])
    assert [c.complete("p") for _ in range(3)] == ["one", "two", "two"]
    assert c.prompts == ["p", "p", "p"]
    with pytest.raises(ValueError):
        MockClient([])


def test_cassette_record_then_replay(tmp_path):
    path = tmp_path / "c.json"
    rec = ReplayClient(path, mode="record", inner=MockClient("reply"))
    assert rec.complete("hello") == "reply"
    rec.save()
    replay = ReplayClient(path)
    assert replay.complete("hello") == "reply"
    with pytest.raises(CassetteMiss):
        replay.complete("other prompt")
    data = json.loads(path.read_text())
    assert data["interactions"][0]["key"] == interaction_key("hello", None)


def test_cassette_key_depends_on_params():
    assert interaction_key("p", {"temperature": 0}) != interaction_key("p", {"temperature": 1})
    assert interaction_key("p", None) == interaction_key("p", {"temperature": 0})


def test_replay_needs_existing_cassette(tmp_path):
    with pytest.raises(FileNotFoundError):
        ReplayClient(tmp_path / "missing.json")


def test_live_client_needs_endpoint():
    with pytest.raises(ClientConfigError):
        HttpCompletionClient.from_env({})
    client = HttpCompletionClient.from_env({"SAFETRACE_LLM_ENDPOINT": "http://localhost:1/v1/chat/completions",
                                            "SAFETRACE_LLM_MODEL": "m"})
    assert client.model == "m" and client.api_key is None
