"""Logic-guided trace synthesis.

Depth-first search that grows a trace one call at a time. A candidate call is
kept only if it is executable in the current world state and no oracle is
irremediably violated by the extended prefix; otherwise the branch is cut and
the search moves on to the next candidate, backtracking when a level runs out.

Candidate order at every node comes from a random stream keyed by the seed and
the path to that node, so the trace found does not depend on how much of the
tree other branches happened to explore.
"""

from __future__ import annotations

import hashlib
import json
import random
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from functools import lru_cache

from .ltl import (
    FALSE,
    TRUE,
    Formula,
    MonitorState,
    SafetyOracle,
    atoms,
    holds_on_empty,
    monitor_finalize,
    monitor_init,
    monitor_step,
    progress,
    validate_signature,
)
from .schema import (
    ApiSpec,
    Invocation,
    Toolset,
    Trace,
    Value,
    WorldState,
    apply_effects,
    eval_expr,
    execute_trace,
)


@dataclass(frozen=True)
class FuzzConfig:
    target_length: int
    seed: int = 0
    max_backtracks: int = 10_000
    max_candidates_per_step: int = 32
    require_business_action: bool = True
    lookahead: bool = False

    def __post_init__(self) -> None:
        if self.target_length < 1:
            raise ValueError("target_length must be >= 1")
        if self.max_backtracks < 1 or self.max_candidates_per_step < 1:
            raise ValueError("search bounds must be positive")


@dataclass
class SearchStats:
    nodes_explored: int = 0
    backtracks: int = 0
    prunes_schema: int = 0
    prunes_safety: int = 0
    prunes_lookahead: int = 0


@dataclass(frozen=True)
class FuzzResult:
    trace: Trace
    final_state: WorldState
    state_sequence: tuple[WorldState, ...]
    stats: SearchStats
    config: FuzzConfig


class SignatureError(ValueError):
    """An oracle mentions APIs the toolset does not declare."""


class SearchExhausted(Exception):
    """No compliant trace found within the backtrack budget (or none exists)."""

    def __init__(self, stats: SearchStats, config: FuzzConfig, reason: str):
        self.stats = stats
        self.config = config
        self.reason = reason
        super().__init__(f"search exhausted ({reason}) after {stats.nodes_explored} nodes, "
                         f"{stats.backtracks} backtracks")


def node_rng(seed: int, path: Sequence[int]) -> random.Random:
    """Random stream for the node reached by taking candidate indices ``path``."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(seed).encode())
    for idx in path:
        h.update(b"/" + str(idx).encode())
    return random.Random(int.from_bytes(h.digest(), "big"))


def _executable(toolset: Toolset, state: WorldState) -> tuple[list[tuple[ApiSpec, dict[str, Value]]], int]:
    ok, rejected = [], 0
    for api in toolset.apis:
        for args in api.bindings():
            if eval_expr(api.precondition, state, args):
                ok.append((api, args))
            else:
                rejected += 1
    return ok, rejected


def enumerate_candidates(toolset: Toolset, state: WorldState, rng: random.Random,
                         limit: int | None = None) -> list[tuple[ApiSpec, dict[str, Value]]]:
    """Executable ``(api, args)`` pairs in seeded-shuffled order, truncated to ``limit``."""
    cands, _ = _executable(toolset, state)
    rng.shuffle(cands)
    return cands if limit is None else cands[:limit]


class _Completion:
    """Can the pending oracles still be discharged within ``k`` more steps?

    Works on formulas alone, ignoring preconditions, so a ``False`` answer is a
    sound reason to cut a branch.
    """

    def __init__(self, toolset: Toolset, oracles: Sequence[SafetyOracle]):
        mentioned = set()
        for o in oracles:
            mentioned |= atoms(o.formula)
        alphabet = sorted(mentioned)
        # any API outside the formulas behaves the same; one stands in for all
        others = [n for n in toolset.api_names if n not in mentioned]
        if others:
            alphabet.append(others[0])
        self.alphabet = tuple(alphabet)
        self.within = lru_cache(maxsize=None)(self._within)

    def _within(self, formulas: frozenset[Formula], k: int) -> bool:
        if all(holds_on_empty(f) for f in formulas):
            return True
        if k == 0:
            return False
        for a in self.alphabet:
            nxt = set()
            for f in formulas:
                g = progress(f, a)
                if g == FALSE:
                    break
                if g != TRUE:
                    nxt.add(g)
            else:
                if self.within(frozenset(nxt), k - 1):
                    return True
        return False


class _Search:
    def __init__(self, toolset: Toolset, oracles: Sequence[SafetyOracle], config: FuzzConfig):
        self.toolset = toolset
        self.config = config
        self.stats = SearchStats()
        self.safety = toolset.safety_apis
        self.completion = _Completion(toolset, oracles) if config.lookahead else None
        self.monitor0 = monitor_init(oracles)

    def run(self) -> list[tuple[Invocation, WorldState]] | None:
        return self.explore(self.toolset.initial_state(), self.monitor0, [], [], False)

    def _can_finish(self, monitor: MonitorState, remaining: int, has_business: bool) -> bool:
        if self.config.require_business_action and not has_business and remaining == 0:
            return False
        if self.completion is None:
            return remaining > 0 or monitor_finalize(monitor)
        return self.completion.within(frozenset(monitor.pending()), remaining)

    def _dead_end(self) -> None:
        self.stats.backtracks += 1
        if self.stats.backtracks > self.config.max_backtracks:
            raise SearchExhausted(self.stats, self.config, "backtrack budget exceeded")

    def explore(self, state: WorldState, monitor: MonitorState, path: list[int],
                prefix: list[tuple[Invocation, WorldState]], has_business: bool):
        self.stats.nodes_explored += 1
        depth = len(prefix)
        cfg = self.config
        if depth == cfg.target_length:
            if monitor_finalize(monitor) and (has_business or not cfg.require_business_action):
                return prefix
            self._dead_end()
            return None
        cands, rejected = _executable(self.toolset, state)
        self.stats.prunes_schema += rejected
        node_rng(cfg.seed, path).shuffle(cands)
        remaining = cfg.target_length - depth - 1
        for idx, (api, args) in enumerate(cands[: cfg.max_candidates_per_step]):
            nxt = monitor_step(monitor, api.name)
            if nxt.any_violated:
                self.stats.prunes_safety += 1
                continue
            business = has_business or api.name not in self.safety
            if not self._can_finish(nxt, remaining, business):
                self.stats.prunes_lookahead += 1
                continue
            new_state = apply_effects(api, args, state)
            inv = Invocation(api.name, args, depth)
            found = self.explore(new_state, nxt, path + [idx], prefix + [(inv, new_state)], business)
            if found is not None:
                return found
        self._dead_end()
        return None


def synthesize_trace(toolset: Toolset, oracles: Sequence[SafetyOracle], config: FuzzConfig) -> FuzzResult:
    """Find a trace of exactly ``config.target_length`` calls that is executable and compliant.

    Raises SignatureError if an oracle is not grounded in ``toolset`` and
    SearchExhausted when no trace is found.
    """
    for o in oracles:
        res = validate_signature(o, toolset)
        if not res.accepted:
            raise SignatureError(f"oracle {o.id} references unknown APIs {list(res.unknown)}")
    search = _Search(toolset, oracles, config)
    found = search.run()
    if found is None:
        raise SearchExhausted(search.stats, config, "search space exhausted")
    trace = Trace(tuple(inv for inv, _ in found))
    states = tuple(s for _, s in found)
    return FuzzResult(trace, states[-1], states, search.stats, config)


def first_executable_trace(toolset: Toolset, length: int) -> Trace:
    """Naive baseline: always take the first executable API (declaration order, first binding)."""
    state = toolset.initial_state()
    calls = []
    for step in range(length):
        cands, _ = _executable(toolset, state)
        if not cands:
            break
        api, args = cands[0]
        calls.append(Invocation(api.name, args, step))
        state = apply_effects(api, args, state)
    return Trace(tuple(calls))


def verify_trace(toolset: Toolset, oracles: Sequence[SafetyOracle], trace: Trace) -> bool:
    """Independent re-check: executes in the sandbox and every oracle holds."""
    from .ltl import evaluate

    return execute_trace(toolset, None, trace).ok and all(evaluate(o.formula, trace) for o in oracles)


# ---------------------------------------------------------------------------
# trace files


TRACE_FORMAT = "safetrace.trace/1"


def trace_to_record(result: FuzzResult, scenario: str) -> dict:
    return {
        "format": TRACE_FORMAT,
        "scenario": scenario,
        "seed": result.config.seed,
        "config": asdict(result.config),
        "stats": asdict(result.stats),
        "actions": result.trace.to_records(),
    }


def dump_trace_record(record: dict) -> str:
    return json.dumps(record, indent=2, sort_keys=True) + "\n"


def load_trace_file(path) -> tuple[Trace, dict]:
    with open(path, encoding="utf-8") as fh:
        rec = json.load(fh)
    if rec.get("format") != TRACE_FORMAT:
        raise ValueError(f"{path}: not a {TRACE_FORMAT} file")
    return Trace.from_records(rec["actions"]), rec


@dataclass
class SweepOutcome:
    results: list[FuzzResult] = field(default_factory=list)
    exhausted: list[SearchExhausted] = field(default_factory=list)


def sweep(toolset: Toolset, oracles: Sequence[SafetyOracle], configs: Sequence[FuzzConfig]) -> SweepOutcome:
    out = SweepOutcome()
    for cfg in configs:
        try:
            out.results.append(synthesize_trace(toolset, oracles, cfg))
        except SearchExhausted as exc:
            out.exhausted.append(exc)
    return out
