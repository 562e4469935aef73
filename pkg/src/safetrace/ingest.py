"""Policy text to grounded safety oracles.

The completion client proposes rules in a strict block format. Each proposal
goes through per-item parsing, scope alignment (its supporting excerpt must
occur in the policy), deduplication, template instantiation and the signature
check against the toolset.
"""

from __future__ import annotations

import re
from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from string import Template

from .clients import CompletionClient
from .ltl import SafetyOracle, TemplateError, TemplateKind, instantiate_template, validate_signature
from .schema import Toolset

_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")
_RULE_KINDS = {TemplateKind.OPERATIONAL_RESTRICTION.value, TemplateKind.INSTRUCTION_ADHERENCE.value}


@dataclass(frozen=True)
class CandidateRule:
    template: TemplateKind
    p1: str
    p2: str
    excerpt: str
    rationale: str = ""

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.template.value, self.p1, self.p2)

    def to_record(self) -> dict:
        return {"template": self.template.value, "p1": self.p1, "p2": self.p2,
                "excerpt": self.excerpt, "rationale": self.rationale}


@dataclass(frozen=True)
class ParseRejection:
    item: int
    reason: str
    raw: str


@dataclass(frozen=True)
class GroundingRejection:
    candidate: CandidateRule
    reason: str
    unknown: tuple[str, ...] = ()


@dataclass
class ExtractionReport:
    rules: list[CandidateRule] = field(default_factory=list)
    parse_rejections: list[ParseRejection] = field(default_factory=list)
    out_of_scope: list[CandidateRule] = field(default_factory=list)
    duplicates: list[CandidateRule] = field(default_factory=list)
    accepted: list[SafetyOracle] = field(default_factory=list)
    grounding_rejections: list[GroundingRejection] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "rules": [r.to_record() for r in self.rules],
            "parse_rejections": [{"item": p.item, "reason": p.reason, "raw": p.raw} for p in self.parse_rejections],
            "out_of_scope": [r.to_record() for r in self.out_of_scope],
            "duplicates": [r.to_record() for r in self.duplicates],
            "accepted": [o.to_record() for o in self.accepted],
            "grounding_rejections": [
                {"candidate": g.candidate.to_record(), "reason": g.reason, "unknown": list(g.unknown)}
                for g in self.grounding_rejections
            ],
        }

    def render(self) -> str:
        lines = [
            "Oracle extraction review",
            f"  accepted oracles:      {len(self.accepted)}",
            f"  grounding rejections:  {len(self.grounding_rejections)}",
            f"  out-of-scope proposals:{len(self.out_of_scope):>3}",
            f"  duplicate proposals:   {len(self.duplicates)}",
            f"  unparseable items:     {len(self.parse_rejections)}",
            "",
            "Accepted (review each against its excerpt):",
        ]
        for o in self.accepted:
            lines.append(f"  [ ] {o.id}  {o.formula}")
            lines.append(f"        \"{o.provenance}\"")
        if self.grounding_rejections:
            lines.append("")
            lines.append("Rejected by signature check:")
            for g in self.grounding_rejections:
                c = g.candidate
                lines.append(f"  - {c.template.value}({c.p1}, {c.p2}): {g.reason}")
        if self.out_of_scope:
            lines.append("")
            lines.append("Dropped, excerpt not found in policy:")
            for c in self.out_of_scope:
                lines.append(f"  - {c.template.value}({c.p1}, {c.p2}): \"{c.excerpt}\"")
        if self.parse_rejections:
            lines.append("")
            lines.append("Unparseable items:")
            for p in self.parse_rejections:
                lines.append(f"  - item {p.item}: {p.reason}")
        return "\n".join(lines) + "\n"


def load_prompt(name: str) -> Template:
    path = resources.files("safetrace").joinpath("data").joinpath("prompts").joinpath(f"{name}.txt")
    text = path.read_text(encoding="utf-8")
    return Template(text)


def build_extraction_prompt(policy: str, toolset: Toolset, template: Template | None = None) -> str:
    template = template or load_prompt("extract_rules")
    api_list = "\n".join(f"- {a.name}: {a.description}" if a.description else f"- {a.name}" for a in toolset.apis)
    return template.substitute(api_list=api_list, policy=policy.strip())


def split_policy(policy: str, max_chars: int = 8000) -> list[str]:
    """Split on blank lines into chunks of at most ``max_chars`` (a single long paragraph stays whole)."""
    paragraphs = [p.strip() for p in re.split(r"\n\s*\n", policy) if p.strip()]
    chunks: list[str] = []
    current: list[str] = []
    size = 0
    for p in paragraphs:
        if current and size + len(p) + 2 > max_chars:
            chunks.append("\n\n".join(current))
            current, size = [], 0
        current.append(p)
        size += len(p) + 2
    if current:
        chunks.append("\n\n".join(current))
    return chunks


def parse_completion(text: str, first_item: int = 0) -> tuple[list[CandidateRule], list[ParseRejection]]:
    """Parse ``RULE ... END`` blocks. Bad items are rejected individually."""
    rules: list[CandidateRule] = []
    rejections: list[ParseRejection] = []
    item = first_item
    block: list[str] | None = None
    stray: list[str] = []

    def flush_stray():
        nonlocal item
        if stray:
            rejections.append(ParseRejection(item, "text outside a RULE block", "\n".join(stray)))
            item += 1
            stray.clear()

    for raw_line in text.splitlines():
        line = raw_line.strip()
        if block is None:
            if line == "RULE":
                flush_stray()
                block = []
            elif line:
                stray.append(line)
            continue
        if line == "END":
            rule, reason = _parse_block(block)
            if rule is None:
                rejections.append(ParseRejection(item, reason, "\n".join(block)))
            else:
                rules.append(rule)
            item += 1
            block = None
        elif line == "RULE":
            rejections.append(ParseRejection(item, "RULE block not closed with END", "\n".join(block)))
            item += 1
            block = []
        elif line:
            block.append(line)
    if block is not None:
        rejections.append(ParseRejection(item, "RULE block not closed with END", "\n".join(block)))
        item += 1
    flush_stray()
    return rules, rejections


def _parse_block(lines: Sequence[str]) -> tuple[CandidateRule | None, str]:
    fields: dict[str, str] = {}
    for line in lines:
        key, sep, value = line.partition(":")
        key = key.strip().lower()
        if not sep or key not in ("kind", "p1", "p2", "excerpt", "rationale"):
            return None, f"unexpected line {line!r}"
        if key in fields:
            return None, f"repeated field {key!r}"
        fields[key] = value.strip()
    missing = [k for k in ("kind", "p1", "p2", "excerpt") if k not in fields]
    if missing:
        return None, f"missing field(s) {', '.join(missing)}"
    if fields["kind"] not in _RULE_KINDS:
        return None, f"unknown rule kind {fields['kind']!r}"
    for k in ("p1", "p2"):
        if not _IDENT.match(fields[k]):
            return None, f"{k} is not an identifier: {fields[k]!r}"
    if fields["p1"] == fields["p2"]:
        return None, "p1 and p2 name the same API"
    excerpt = fields["excerpt"]
    if len(excerpt) < 2 or excerpt[0] != '"' or excerpt[-1] != '"':
        return None, "excerpt must be double-quoted"
    excerpt = excerpt[1:-1].strip()
    if not excerpt:
        return None, "empty excerpt"
    return CandidateRule(TemplateKind(fields["kind"]), fields["p1"], fields["p2"], excerpt,
                         fields.get("rationale", "")), ""


def _normalise(text: str) -> str:
    return " ".join(text.split())


def align_scope(candidates: Iterable[CandidateRule], policy: str) -> tuple[list[CandidateRule], list[CandidateRule]]:
    """Keep candidates whose excerpt occurs in the policy (whitespace-normalised)."""
    haystack = _normalise(policy)
    kept, dropped = [], []
    for c in candidates:
        (kept if _normalise(c.excerpt) in haystack else dropped).append(c)
    return kept, dropped


def deduplicate(candidates: Iterable[CandidateRule]) -> tuple[list[CandidateRule], list[CandidateRule]]:
    """Drop exact (template, p1, p2) repeats; the first occurrence wins."""
    seen: set[tuple[str, str, str]] = set()
    kept, dropped = [], []
    for c in candidates:
        if c.key in seen:
            dropped.append(c)
        else:
            seen.add(c.key)
            kept.append(c)
    return kept, dropped


def post_filter(candidates: Iterable[CandidateRule], policy: str) -> list[CandidateRule]:
    kept, _ = align_scope(candidates, policy)
    kept, _ = deduplicate(kept)
    return kept


def extract_rules(policy: str, toolset: Toolset, client: CompletionClient, *,
                  report: ExtractionReport | None = None, max_chunk_chars: int = 8000,
                  workers: int = 1) -> list[CandidateRule]:
    """Ask ``client`` for rules over ``policy`` and return the scoped, deduplicated candidates."""
    report = report if report is not None else ExtractionReport()
    chunks = split_policy(policy, max_chunk_chars)
    prompts = [build_extraction_prompt(chunk, toolset) for chunk in chunks]
    if workers > 1 and len(prompts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            replies = list(pool.map(client.complete, prompts))
    else:
        replies = [client.complete(p) for p in prompts]
    proposed: list[CandidateRule] = []
    item = 0
    for reply in replies:
        rules, rejections = parse_completion(reply, first_item=item)
        item += len(rules) + len(rejections)
        proposed.extend(rules)
        report.parse_rejections.extend(rejections)
    in_scope, out_of_scope = align_scope(proposed, policy)
    unique, dupes = deduplicate(in_scope)
    report.out_of_scope.extend(out_of_scope)
    report.duplicates.extend(dupes)
    report.rules.extend(unique)
    return unique


def ground_rules(candidates: Iterable[CandidateRule], toolset: Toolset
                 ) -> tuple[list[SafetyOracle], list[GroundingRejection]]:
    accepted: list[SafetyOracle] = []
    rejected: list[GroundingRejection] = []
    for c in candidates:
        try:
            oracle = instantiate_template(c.template, c.p1, c.p2, provenance=c.excerpt)
        except TemplateError as exc:
            rejected.append(GroundingRejection(c, str(exc)))
            continue
        check = validate_signature(oracle, toolset)
        if check.accepted:
            accepted.append(oracle)
        else:
            rejected.append(GroundingRejection(c, f"unknown predicate(s): {', '.join(check.unknown)}", check.unknown))
    return accepted, rejected


def extract_oracles(policy: str, toolset: Toolset, client: CompletionClient, **kwargs) -> ExtractionReport:
    """Full extraction stage: propose, filter, ground. The report carries everything."""
    report = ExtractionReport()
    rules = extract_rules(policy, toolset, client, report=report, **kwargs)
    report.accepted, report.grounding_rejections = ground_rules(rules, toolset)
    return report
