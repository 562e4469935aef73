"""Diversity metrics over a set of traces.

Adjacent transition coverage counts the distinct ordered pairs of consecutive
calls seen anywhere in the set, over all ``|A|**2`` ordered pairs of declared
APIs (self-pairs included). Safety coverage is the share of safety-critical
APIs that appear in at least one trace.
"""

from __future__ import annotations

import json
from collections.abc import Iterable
from dataclasses import dataclass

from .schema import Toolset, Trace


class CoverageError(ValueError):
    pass


def _names(trace: Trace | Iterable[str]) -> tuple[str, ...]:
    return trace.names if isinstance(trace, Trace) else tuple(trace)


def _check_known(names: Iterable[str], toolset: Toolset) -> None:
    for n in names:
        if not toolset.has_api(n):
            raise CoverageError(f"trace calls {n!r}, which {toolset.scenario_name} does not declare")


def transition_pairs(traces: Iterable[Trace | Iterable[str]], toolset: Toolset) -> frozenset[tuple[str, str]]:
    pairs: set[tuple[str, str]] = set()
    for t in traces:
        names = _names(t)
        _check_known(names, toolset)
        pairs.update(zip(names, names[1:]))
    return frozenset(pairs)


def atc(traces: Iterable[Trace | Iterable[str]], toolset: Toolset) -> tuple[float, frozenset[tuple[str, str]]]:
    pairs = transition_pairs(traces, toolset)
    return len(pairs) / len(toolset.apis) ** 2, pairs


def safety_coverage(traces: Iterable[Trace | Iterable[str]], toolset: Toolset) -> tuple[float, frozenset[str]]:
    subset = toolset.safety_apis
    if not subset:
        raise CoverageError(f"{toolset.scenario_name} declares no safety-critical APIs")
    seen: set[str] = set()
    for t in traces:
        names = _names(t)
        _check_known(names, toolset)
        seen.update(names)
    covered = frozenset(seen & subset)
    return len(covered) / len(subset), covered


@dataclass(frozen=True)
class CoverageReport:
    scenario: str
    traces: int
    atc: float
    sc_cov: float
    pair_set: frozenset[tuple[str, str]]
    covered_safety_apis: frozenset[str]
    api_count: int
    safety_api_count: int

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "traces": self.traces,
            "atc": self.atc,
            "sc_cov": self.sc_cov,
            "pairs_covered": len(self.pair_set),
            "pairs_possible": self.api_count ** 2,
            "pair_set": sorted(list(p) for p in self.pair_set),
            "covered_safety_apis": sorted(self.covered_safety_apis),
            "api_count": self.api_count,
            "safety_api_count": self.safety_api_count,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def render(self) -> str:
        return (f"{self.scenario}: {self.traces} traces\n"
                f"  ATC     {100 * self.atc:6.2f}%  ({len(self.pair_set)}/{self.api_count ** 2} ordered pairs)\n"
                f"  S.C.Cov {100 * self.sc_cov:6.2f}%  ({len(self.covered_safety_apis)}/{self.safety_api_count} "
                f"safety-critical APIs)\n")


def coverage_report(traces: Iterable[Trace | Iterable[str]], toolset: Toolset) -> CoverageReport:
    traces = list(traces)
    ratio, pairs = atc(traces, toolset)
    sc, covered = safety_coverage(traces, toolset)
    return CoverageReport(toolset.scenario_name, len(traces), ratio, sc, pairs, covered,
                          len(toolset.apis), len(toolset.safety_apis))
