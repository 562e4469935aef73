"""LTL over finite traces of API calls.

Each trace position holds exactly one atom: the name of the API invoked at that
step. Semantics are the usual LTL_f ones with strong Next. On the empty suffix,
atoms, ``X``, ``U`` and ``F`` are false and ``G`` is true.

Two independent routes decide satisfaction:

* :func:`evaluate` labels every position of a complete trace bottom-up.
* :func:`progress` rewrites a formula by one observed step; the
  :class:`MonitorState` helpers build a four-valued runtime monitor on top.

Concrete syntax (whitespace-insensitive)::

    formula := implies
    implies := or ( '->' implies )?          right-associative
    or      := and ( '|' and )*
    and     := until ( '&' until )*
    until   := unary ( 'U' until )?          right-associative
    unary   := ( '!' | 'X' | 'F' | 'G' ) unary | primary
    primary := 'true' | 'false' | IDENT | '(' formula ')'
"""

from __future__ import annotations

import enum
import re
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass
from functools import lru_cache

from .schema import Toolset, Trace

# ---------------------------------------------------------------------------
# AST


class Formula:
    """Base class for immutable formula nodes. Hashes are cached for memoisation."""

    __slots__ = ()

    def children(self) -> tuple[Formula, ...]:
        return ()

    def __str__(self) -> str:
        return pretty(self)


def _cached_hash(cls):
    orig = cls.__hash__

    def __hash__(self):
        d = self.__dict__
        h = d.get("_hc")
        if h is None:
            h = d["_hc"] = orig(self)
        return h

    cls.__hash__ = __hash__
    return cls


@_cached_hash
@dataclass(frozen=True, eq=True)
class Const(Formula):
    value: bool


@_cached_hash
@dataclass(frozen=True)
class Atom(Formula):
    name: str


@_cached_hash
@dataclass(frozen=True)
class Not(Formula):
    arg: Formula

    def children(self):
        return (self.arg,)


@_cached_hash
@dataclass(frozen=True)
class And(Formula):
    left: Formula
    right: Formula

    def children(self):
        return (self.left, self.right)


@_cached_hash
@dataclass(frozen=True)
class Or(Formula):
    left: Formula
    right: Formula

    def children(self):
        return (self.left, self.right)


@_cached_hash
@dataclass(frozen=True)
class Implies(Formula):
    left: Formula
    right: Formula

    def children(self):
        return (self.left, self.right)


@_cached_hash
@dataclass(frozen=True)
class Next(Formula):
    arg: Formula

    def children(self):
        return (self.arg,)


@_cached_hash
@dataclass(frozen=True)
class Until(Formula):
    left: Formula
    right: Formula

    def children(self):
        return (self.left, self.right)


@_cached_hash
@dataclass(frozen=True)
class Eventually(Formula):
    arg: Formula

    def children(self):
        return (self.arg,)


@_cached_hash
@dataclass(frozen=True)
class Always(Formula):
    arg: Formula

    def children(self):
        return (self.arg,)


TRUE = Const(True)
FALSE = Const(False)


def walk(f: Formula) -> Iterator[Formula]:
    stack = [f]
    while stack:
        node = stack.pop()
        yield node
        stack.extend(node.children())


def atoms(f: Formula) -> frozenset[str]:
    return frozenset(n.name for n in walk(f) if isinstance(n, Atom))


# ---------------------------------------------------------------------------
# parsing and printing


class FormulaParseError(ValueError):
    def __init__(self, position: int, expected: Iterable[str], got: str, text: str):
        self.position = position
        self.expected = tuple(sorted(set(expected)))
        self.got = got
        super().__init__(
            f"parse error at position {position}: expected one of {', '.join(self.expected)}; got {got} in {text!r}"
        )


_RESERVED = {"X", "U", "F", "G", "true", "false"}
_TOKEN = re.compile(r"\s*(?:(?P<op>->|[!&|()])|(?P<word>[A-Za-z_][A-Za-z0-9_]*))")


def _tokenize(text: str) -> list[tuple[str, int]]:
    tokens = []
    pos = 0
    n = len(text)
    while True:
        while pos < n and text[pos].isspace():
            pos += 1
        if pos >= n:
            break
        m = _TOKEN.match(text, pos)
        if m is None:
            raise FormulaParseError(pos, ["operator", "identifier"], repr(text[pos]), text)
        kind = m.lastgroup
        tokens.append((m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(("", n))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> str:
        return self.tokens[self.i][0]

    def error(self, expected: Iterable[str]) -> FormulaParseError:
        tok, pos = self.tokens[self.i]
        return FormulaParseError(pos, expected, repr(tok) if tok else "end of input", self.text)

    def parse(self) -> Formula:
        f = self.implies()
        if self.tok != "":
            raise self.error(["'->'", "'|'", "'&'", "'U'", "end of input"])
        return f

    def implies(self) -> Formula:
        left = self.disj()
        if self.tok == "->":
            self.i += 1
            return Implies(left, self.implies())
        return left

    def disj(self) -> Formula:
        left = self.conj()
        while self.tok == "|":
            self.i += 1
            left = Or(left, self.conj())
        return left

    def conj(self) -> Formula:
        left = self.until()
        while self.tok == "&":
            self.i += 1
            left = And(left, self.until())
        return left

    def until(self) -> Formula:
        left = self.unary()
        if self.tok == "U":
            self.i += 1
            return Until(left, self.until())
        return left

    _UNARY = {"!": Not, "X": Next, "F": Eventually, "G": Always}

    def unary(self) -> Formula:
        tok = self.tok
        if tok in self._UNARY:
            self.i += 1
            return self._UNARY[tok](self.unary())
        if tok == "(":
            self.i += 1
            inner = self.implies()
            if self.tok != ")":
                raise self.error(["')'", "'->'", "'|'", "'&'", "'U'"])
            self.i += 1
            return inner
        if tok == "true":
            self.i += 1
            return TRUE
        if tok == "false":
            self.i += 1
            return FALSE
        if tok and tok not in _RESERVED and (tok[0].isalpha() or tok[0] == "_"):
            self.i += 1
            return Atom(tok)
        raise self.error(["identifier", "'true'", "'false'", "'('", "'!'", "'X'", "'F'", "'G'"])


def parse_formula(text: str) -> Formula:
    return _Parser(text).parse()


_BINOPS = {And: "&", Or: "|", Implies: "->", Until: "U"}
_UNOPS = {Not: "!", Next: "X", Eventually: "F", Always: "G"}


@lru_cache(maxsize=None)
def pretty(f: Formula) -> str:
    """Fully parenthesised rendering; ``parse_formula(pretty(f)) == f``."""
    if isinstance(f, Const):
        return "true" if f.value else "false"
    if isinstance(f, Atom):
        return f.name
    op = _UNOPS.get(type(f))
    if op is not None:
        # binary operands print their own parentheses
        sep = "" if op == "!" else " "
        return f"{op}{sep}{pretty(f.arg)}"
    op = _BINOPS[type(f)]
    return f"({pretty(f.left)} {op} {pretty(f.right)})"


# ---------------------------------------------------------------------------
# full-trace evaluation


def _trace_names(trace: Trace | Sequence[str]) -> tuple[str, ...]:
    if isinstance(trace, Trace):
        return trace.names
    return tuple(trace)


def evaluate(formula: Formula, trace: Trace | Sequence[str]) -> bool:
    """Decide ``trace |= formula`` by labelling positions from the end backwards."""
    names = _trace_names(trace)
    n = len(names)
    table: dict[Formula, list[bool]] = {}

    def label(f: Formula) -> list[bool]:
        # entry n is the empty suffix
        got = table.get(f)
        if got is not None:
            return got
        if isinstance(f, Const):
            out = [f.value] * (n + 1)
        elif isinstance(f, Atom):
            out = [nm == f.name for nm in names] + [False]
        elif isinstance(f, Not):
            out = [not v for v in label(f.arg)]
        elif isinstance(f, And):
            a, b = label(f.left), label(f.right)
            out = [x and y for x, y in zip(a, b)]
        elif isinstance(f, Or):
            a, b = label(f.left), label(f.right)
            out = [x or y for x, y in zip(a, b)]
        elif isinstance(f, Implies):
            a, b = label(f.left), label(f.right)
            out = [(not x) or y for x, y in zip(a, b)]
        elif isinstance(f, Next):
            a = label(f.arg)
            out = [i + 1 < n and a[i + 1] for i in range(n)] + [False]
        elif isinstance(f, Until):
            a, b = label(f.left), label(f.right)
            out = [False] * (n + 1)
            for i in range(n - 1, -1, -1):
                out[i] = b[i] or (a[i] and out[i + 1])
        elif isinstance(f, Eventually):
            a = label(f.arg)
            out = [False] * (n + 1)
            for i in range(n - 1, -1, -1):
                out[i] = a[i] or out[i + 1]
        elif isinstance(f, Always):
            a = label(f.arg)
            out = [True] * (n + 1)
            for i in range(n - 1, -1, -1):
                out[i] = a[i] and out[i + 1]
        else:
            raise TypeError(f"not a formula: {f!r}")
        table[f] = out
        return out

    return label(formula)[0]


@lru_cache(maxsize=None)
def holds_on_empty(f: Formula) -> bool:
    """Truth value on the empty trace (what finalising a monitor checks)."""
    if isinstance(f, Const):
        return f.value
    if isinstance(f, (Atom, Next, Until, Eventually)):
        return False
    if isinstance(f, Always):
        return True
    if isinstance(f, Not):
        return not holds_on_empty(f.arg)
    if isinstance(f, And):
        return holds_on_empty(f.left) and holds_on_empty(f.right)
    if isinstance(f, Or):
        return holds_on_empty(f.left) or holds_on_empty(f.right)
    if isinstance(f, Implies):
        return (not holds_on_empty(f.left)) or holds_on_empty(f.right)
    raise TypeError(f"not a formula: {f!r}")


# ---------------------------------------------------------------------------
# simplification and progression
#
# Rules (applied bottom-up, each an exact equivalence):
#   constant folding   !true=false, a&false=false, a&true=a, a|true=true, a|false=a,
#                      true->a=a, false->a=true, a->true=true, a->false=!a
#   double negation    !!a = a
#   idempotence        conjunct/disjunct lists are deduplicated
#   complement         a & !a = false, a | !a = true
#   absorption         a & (a | b) = a,  a | (a & b) = a
# Conjunctions and disjunctions are flattened, sorted by their printed form and
# rebuilt right-nested, so equal sets of operands give identical trees.

NONEMPTY = Eventually(TRUE)  # true exactly on non-empty suffixes


def _flatten(f: Formula, cls) -> Iterator[Formula]:
    if isinstance(f, cls):
        yield from _flatten(f.left, cls)
        yield from _flatten(f.right, cls)
    else:
        yield f


def _rebuild(items: list[Formula], cls) -> Formula:
    out = items[-1]
    for item in reversed(items[:-1]):
        out = cls(item, out)
    return out


def _negate(f: Formula) -> Formula:
    if isinstance(f, Const):
        return FALSE if f.value else TRUE
    if isinstance(f, Not):
        return f.arg
    return Not(f)


def _assoc(parts: Iterable[Formula], cls) -> Formula:
    unit, zero = (TRUE, FALSE) if cls is And else (FALSE, TRUE)
    dual = Or if cls is And else And
    items: dict[Formula, None] = {}
    for p in parts:
        for q in _flatten(p, cls):
            if q == zero:
                return zero
            if q == unit:
                continue
            items[q] = None
    for q in items:
        if _negate(q) in items:
            return zero
    kept = []
    for q in items:
        if isinstance(q, dual) and any(r in items for r in _flatten(q, dual)):
            continue
        kept.append(q)
    if not kept:
        return unit
    kept.sort(key=pretty)
    return _rebuild(kept, cls)


def mk_not(a: Formula) -> Formula:
    return _negate(a)


def mk_and(*parts: Formula) -> Formula:
    return _assoc(parts, And)


def mk_or(*parts: Formula) -> Formula:
    return _assoc(parts, Or)


def mk_implies(a: Formula, b: Formula) -> Formula:
    if a == TRUE:
        return b
    if a == FALSE or b == TRUE:
        return TRUE
    if b == FALSE:
        return mk_not(a)
    if a == b:
        return TRUE
    return Implies(a, b)


@lru_cache(maxsize=None)
def simplify(f: Formula) -> Formula:
    if isinstance(f, (Const, Atom)):
        return f
    if isinstance(f, Not):
        return mk_not(simplify(f.arg))
    if isinstance(f, And):
        return mk_and(simplify(f.left), simplify(f.right))
    if isinstance(f, Or):
        return mk_or(simplify(f.left), simplify(f.right))
    if isinstance(f, Implies):
        return mk_implies(simplify(f.left), simplify(f.right))
    if isinstance(f, Next):
        return Next(simplify(f.arg))
    if isinstance(f, Until):
        left, right = simplify(f.left), simplify(f.right)
        if right == FALSE:
            return FALSE
        if right == TRUE:
            # satisfied at the first position, which must exist
            return NONEMPTY
        return Until(left, right)
    if isinstance(f, Eventually):
        arg = simplify(f.arg)
        return FALSE if arg == FALSE else Eventually(arg)
    if isinstance(f, Always):
        arg = simplify(f.arg)
        return TRUE if arg == TRUE else Always(arg)
    raise TypeError(f"not a formula: {f!r}")


@lru_cache(maxsize=None)
def progress(f: Formula, atom: str) -> Formula:
    """Formula the remaining suffix must satisfy after observing ``atom``.

    For every trace ``t``: ``[atom] + t |= f`` iff ``t |= progress(f, atom)``.
    """
    if isinstance(f, Const):
        return f
    if isinstance(f, Atom):
        return TRUE if f.name == atom else FALSE
    if isinstance(f, Not):
        return mk_not(progress(f.arg, atom))
    if isinstance(f, And):
        return mk_and(progress(f.left, atom), progress(f.right, atom))
    if isinstance(f, Or):
        return mk_or(progress(f.left, atom), progress(f.right, atom))
    if isinstance(f, Implies):
        return mk_implies(progress(f.left, atom), progress(f.right, atom))
    if isinstance(f, Next):
        # strong next: the suffix must be non-empty
        return mk_and(NONEMPTY, simplify(f.arg))
    if isinstance(f, Until):
        return mk_or(progress(f.right, atom), mk_and(progress(f.left, atom), simplify(f)))
    if isinstance(f, Eventually):
        return mk_or(progress(f.arg, atom), simplify(f))
    if isinstance(f, Always):
        return mk_and(progress(f.arg, atom), simplify(f))
    raise TypeError(f"not a formula: {f!r}")


# ---------------------------------------------------------------------------
# templates and oracles


class TemplateKind(str, enum.Enum):
    OPERATIONAL_RESTRICTION = "OperationalRestriction"
    INSTRUCTION_ADHERENCE = "InstructionAdherence"
    FREEFORM = "Freeform"


def operational_restriction(p1: str, p2: str) -> Formula:
    """``!((!p1) U p2)``: ``p2`` may not happen before ``p1`` has happened."""
    return Not(Until(Not(Atom(p1)), Atom(p2)))


def instruction_adherence(p1: str, p2: str) -> Formula:
    """``G (p1 -> F p2)``: every ``p1`` is eventually followed by ``p2``."""
    return Always(Implies(Atom(p1), Eventually(Atom(p2))))


def match_template(f: Formula) -> tuple[TemplateKind, str, str] | None:
    """Recognise the two template shapes, returning ``(kind, p1, p2)``."""
    if (isinstance(f, Not) and isinstance(f.arg, Until) and isinstance(f.arg.left, Not)
            and isinstance(f.arg.left.arg, Atom) and isinstance(f.arg.right, Atom)):
        return TemplateKind.OPERATIONAL_RESTRICTION, f.arg.left.arg.name, f.arg.right.name
    if (isinstance(f, Always) and isinstance(f.arg, Implies) and isinstance(f.arg.left, Atom)
            and isinstance(f.arg.right, Eventually) and isinstance(f.arg.right.arg, Atom)):
        return TemplateKind.INSTRUCTION_ADHERENCE, f.arg.left.name, f.arg.right.arg.name
    return None


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class SafetyOracle:
    id: str
    formula: Formula
    template: TemplateKind = TemplateKind.FREEFORM
    provenance: str = ""

    def __post_init__(self) -> None:
        if self.template is not TemplateKind.FREEFORM:
            shape = match_template(self.formula)
            if shape is None or shape[0] is not self.template:
                raise TemplateError(f"oracle {self.id}: formula {pretty(self.formula)} is not {self.template.value}")

    @property
    def parts(self) -> tuple[str, str] | None:
        shape = match_template(self.formula)
        if shape is None or self.template is TemplateKind.FREEFORM:
            return None
        return shape[1], shape[2]

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "template": self.template.value,
            "formula": pretty(self.formula),
            "provenance": self.provenance,
        }

    @classmethod
    def from_record(cls, rec: dict) -> SafetyOracle:
        return cls(rec["id"], parse_formula(rec["formula"]), TemplateKind(rec.get("template", "Freeform")),
                   rec.get("provenance", ""))


_TEMPLATE_PREFIX = {
    TemplateKind.OPERATIONAL_RESTRICTION: "OR",
    TemplateKind.INSTRUCTION_ADHERENCE: "IA",
}


def instantiate_template(kind: TemplateKind | str, p1: str, p2: str, provenance: str = "",
                         id: str | None = None) -> SafetyOracle:
    kind = TemplateKind(kind)
    if p1 == p2:
        raise TemplateError(f"template {kind.value} needs two distinct predicates, got {p1!r} twice")
    if kind is TemplateKind.OPERATIONAL_RESTRICTION:
        formula = operational_restriction(p1, p2)
    elif kind is TemplateKind.INSTRUCTION_ADHERENCE:
        formula = instruction_adherence(p1, p2)
    else:
        raise TemplateError("freeform oracles are built from formula text, not a template")
    return SafetyOracle(id or f"{_TEMPLATE_PREFIX[kind]}:{p1}:{p2}", formula, kind, provenance)


@dataclass(frozen=True)
class ValidationResult:
    accepted: bool
    unknown: tuple[str, ...] = ()


def validate_signature(oracle: SafetyOracle | Formula, toolset: Toolset) -> ValidationResult:
    """Accept iff every atom names an API declared in ``toolset``."""
    formula = oracle.formula if isinstance(oracle, SafetyOracle) else oracle
    unknown = tuple(sorted(a for a in atoms(formula) if not toolset.has_api(a)))
    return ValidationResult(not unknown, unknown)


# ---------------------------------------------------------------------------
# runtime monitor


class Verdict(str, enum.Enum):
    SATISFIED_PERM = "satisfied"
    VIOLATED_PERM = "violated"
    CURRENTLY_TRUE = "currently_true"
    CURRENTLY_FALSE = "currently_false"

    @property
    def absorbing(self) -> bool:
        return self in (Verdict.SATISFIED_PERM, Verdict.VIOLATED_PERM)


def verdict_of(f: Formula) -> Verdict:
    if f == TRUE:
        return Verdict.SATISFIED_PERM
    if f == FALSE:
        return Verdict.VIOLATED_PERM
    return Verdict.CURRENTLY_TRUE if holds_on_empty(f) else Verdict.CURRENTLY_FALSE


@dataclass(frozen=True)
class OracleTrack:
    oracle_id: str
    formula: Formula
    verdict: Verdict


@dataclass(frozen=True)
class MonitorState:
    tracks: tuple[OracleTrack, ...] = ()
    steps: int = 0

    @property
    def verdicts(self) -> dict[str, Verdict]:
        return {t.oracle_id: t.verdict for t in self.tracks}

    @property
    def violated(self) -> tuple[str, ...]:
        return tuple(t.oracle_id for t in self.tracks if t.verdict is Verdict.VIOLATED_PERM)

    @property
    def any_violated(self) -> bool:
        return any(t.verdict is Verdict.VIOLATED_PERM for t in self.tracks)

    def pending(self) -> tuple[Formula, ...]:
        """Formulas that can still change verdict."""
        return tuple(t.formula for t in self.tracks if not t.verdict.absorbing)


def monitor_init(oracles: Iterable[SafetyOracle]) -> MonitorState:
    tracks = []
    for o in oracles:
        f = simplify(o.formula)
        tracks.append(OracleTrack(o.id, f, verdict_of(f)))
    return MonitorState(tuple(tracks), 0)


def monitor_step(m: MonitorState, action) -> MonitorState:
    """Advance every non-absorbed oracle by one step. ``action`` is an API name or an invocation."""
    atom = action if isinstance(action, str) else action.api_name
    tracks = []
    for t in m.tracks:
        if t.verdict.absorbing:
            tracks.append(t)
            continue
        f = progress(t.formula, atom)
        tracks.append(OracleTrack(t.oracle_id, f, verdict_of(f)))
    return MonitorState(tuple(tracks), m.steps + 1)


def monitor_finalize(m: MonitorState) -> bool:
    return all(t.verdict in (Verdict.SATISFIED_PERM, Verdict.CURRENTLY_TRUE) for t in m.tracks)


def monitor_run(oracles: Iterable[SafetyOracle], trace: Trace | Sequence[str]) -> MonitorState:
    m = monitor_init(oracles)
    for name in _trace_names(trace):
        m = monitor_step(m, name)
    return m


# ---------------------------------------------------------------------------
# oracle files (JSON list of records)


def dump_oracles(oracles: Iterable[SafetyOracle]) -> str:
    import json

    return json.dumps([o.to_record() for o in oracles], indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def load_oracles(text: str) -> list[SafetyOracle]:
    import json

    data = json.loads(text)
    if isinstance(data, dict):
        data = data.get("oracles", [])
    oracles = [SafetyOracle.from_record(r) for r in data]
    ids = [o.id for o in oracles]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate oracle ids")
    return oracles


def load_oracles_file(path) -> list[SafetyOracle]:
    with open(path, encoding="utf-8") as fh:
        return load_oracles(fh.read())
