from __future__ import annotations

import pytest

from safetrace.ltl import instantiate_template
from safetrace.scenarios import SCENARIOS, load_scenario_oracles, load_scenario_toolset
from safetrace.schema import load_toolset

# user-administration toy: one check guards access, one business call has a precondition
ACCOUNTS_YAML = """
scenario: accounts
description: toy user administration
state:
  user: {type: enum, values: [none, ann, bob], initial: none}
  verified: {type: bool, initial: false}
  access: {type: bool, initial: false}
  audit_count: {type: int, min: 0, max: 3, initial: 0}
apis:
  - name: CreateUser
    goal: create the user {name}
    params:
      name: {type: enum, values: [ann, bob]}
    effects: [user = name]
  - name: Verify
    safety_critical: true
    keywords: [verify, check]
    precondition: user != "none"
    effects: [verified = true]
  - name: GrantAccess
    goal: grant them access
    precondition: user != "none"
    effects: [access = true]
  - name: Audit
    safety_critical: true
    keywords: [audit, log]
    params:
      count: {type: int, min: 1, max: 3}
    effects: [audit_count = count]
"""


@pytest.fixture
def accounts():
    return load_toolset(ACCOUNTS_YAML)


@pytest.fixture
def accounts_oracles():
    return [
        instantiate_template("OperationalRestriction", "Verify", "GrantAccess", provenance="check first"),
        instantiate_template("InstructionAdherence", "GrantAccess", "Audit", provenance="log it"),
    ]


@pytest.fixture(params=SCENARIOS)
def scenario(request):
    name = request.param
    return name, load_scenario_toolset(name), load_scenario_oracles(name)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion and fail the test when it does not hold."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
        lines.append((number, line))
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
