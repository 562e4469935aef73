"""Tool schemas, world state, and the deterministic sandbox executor.

A toolset is authored as YAML (see ``docs/schema-format.md``). State variables
and API parameters range over finite domains (booleans, bounded integers,
string enums), preconditions are small boolean expressions, and effects are
unconditional assignments applied in order.
"""

from __future__ import annotations

import enum
import itertools
import re
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Union

import yaml

Value = Union[bool, int, str]


class SchemaError(ValueError):
    """Malformed schema document. ``line``/``column`` are 1-based when known."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.message = message
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", column {column}" if column is not None else "") + ")"
        super().__init__(message + where)


class SchemaReferenceError(SchemaError):
    """A precondition or effect names a symbol that is not declared."""

    def __init__(self, symbol: str, context: str, line: int | None = None):
        self.symbol = symbol
        super().__init__(f"unknown symbol {symbol!r} in {context}", line)


class DomainError(ValueError):
    pass


# ---------------------------------------------------------------------------
# domains


@dataclass(frozen=True)
class Domain:
    kind: str  # "bool" | "int" | "enum"
    values: tuple[Value, ...]

    def __post_init__(self) -> None:
        if not self.values:
            raise SchemaError("domain must be non-empty")

    @classmethod
    def boolean(cls) -> Domain:
        return cls("bool", (False, True))

    @classmethod
    def integer(cls, lo: int, hi: int) -> Domain:
        if hi < lo:
            raise SchemaError(f"empty integer range {lo}..{hi}")
        return cls("int", tuple(range(lo, hi + 1)))

    @classmethod
    def enum(cls, values: Iterable[str]) -> Domain:
        vals = tuple(values)
        if len(set(vals)) != len(vals):
            raise SchemaError(f"duplicate enum values in {list(vals)}")
        return cls("enum", vals)

    def __contains__(self, value: object) -> bool:
        if self.kind == "bool":
            return type(value) is bool
        if self.kind == "int":
            return type(value) is int and value in self.values
        return isinstance(value, str) and value in self.values

    def issubset(self, other: Domain) -> bool:
        return self.kind == other.kind and all(v in other for v in self.values)

    def to_doc(self) -> dict:
        if self.kind == "bool":
            return {"type": "bool"}
        if self.kind == "int":
            return {"type": "int", "min": self.values[0], "max": self.values[-1]}
        return {"type": "enum", "values": list(self.values)}


@dataclass(frozen=True)
class StateVar:
    name: str
    domain: Domain
    initial: Value


@dataclass(frozen=True)
class ParamSpec:
    name: str
    domain: Domain


# ---------------------------------------------------------------------------
# precondition expressions


@dataclass(frozen=True)
class Lit:
    value: Value


@dataclass(frozen=True)
class VarRef:
    name: str


@dataclass(frozen=True)
class ParamRef:
    name: str


@dataclass(frozen=True)
class Compare:
    op: str
    left: Operand
    right: Operand


@dataclass(frozen=True)
class BoolNot:
    arg: Expr


@dataclass(frozen=True)
class BoolAnd:
    left: Expr
    right: Expr


@dataclass(frozen=True)
class BoolOr:
    left: Expr
    right: Expr


Operand = Union[Lit, VarRef, ParamRef]
Expr = Union[Lit, VarRef, ParamRef, Compare, BoolNot, BoolAnd, BoolOr]

TRUE_EXPR = Lit(True)

_CMP_OPS = ("==", "!=", "<=", ">=", "<", ">")
_EXPR_TOKEN = re.compile(
    r"""\s*(?:
        (?P<num>-?\d+)
      | (?P<str>"[^"]*")
      | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
      | (?P<op>==|!=|<=|>=|<|>|&|\||!|\(|\))
    )""",
    re.VERBOSE,
)


def _tokenize_expr(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _EXPR_TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            col = pos + len(text[pos:]) - len(text[pos:].lstrip())
            raise SchemaError(f"unexpected character {text[col]!r} in expression {text!r}", column=col + 1)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("eof", "", len(text)))
    return tokens


class _ExprParser:
    def __init__(self, text: str, resolve):
        self.text = text
        self.tokens = _tokenize_expr(text)
        self.i = 0
        self.resolve = resolve

    def peek(self) -> tuple[str, str, int]:
        return self.tokens[self.i]

    def take(self) -> tuple[str, str, int]:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def fail(self, expected: str) -> SchemaError:
        kind, val, pos = self.peek()
        got = "end of input" if kind == "eof" else repr(val)
        return SchemaError(f"expected {expected}, got {got} in expression {self.text!r}", column=pos + 1)

    def parse(self) -> Expr:
        expr = self.parse_or()
        if self.peek()[0] != "eof":
            raise self.fail("'&', '|' or end of input")
        return expr

    def parse_or(self) -> Expr:
        left = self.parse_and()
        while self.peek()[1] == "|":
            self.take()
            left = BoolOr(left, self.parse_and())
        return left

    def parse_and(self) -> Expr:
        left = self.parse_unary()
        while self.peek()[1] == "&":
            self.take()
            left = BoolAnd(left, self.parse_unary())
        return left

    def parse_unary(self) -> Expr:
        if self.peek()[1] == "!":
            self.take()
            return BoolNot(self.parse_unary())
        if self.peek()[1] == "(":
            self.take()
            inner = self.parse_or()
            if self.peek()[1] != ")":
                raise self.fail("')'")
            self.take()
            return inner
        left = self.parse_operand()
        if self.peek()[0] == "op" and self.peek()[1] in _CMP_OPS:
            op = self.take()[1]
            right = self.parse_operand()
            return Compare(op, left, right)
        return left

    def parse_operand(self) -> Operand:
        kind, val, pos = self.peek()
        if kind == "num":
            self.take()
            return Lit(int(val))
        if kind == "str":
            self.take()
            return Lit(val[1:-1])
        if kind == "ident":
            self.take()
            if val == "true":
                return Lit(True)
            if val == "false":
                return Lit(False)
            return self.resolve(val)
        raise self.fail("operand")


def parse_expr(text: str, resolve) -> Expr:
    """Parse a precondition; ``resolve(name)`` maps identifiers to refs."""
    return _ExprParser(text, resolve).parse()


def format_value(value: Value) -> str:
    if type(value) is bool:
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    return f'"{value}"'


def format_expr(expr: Expr) -> str:
    if isinstance(expr, Lit):
        return format_value(expr.value)
    if isinstance(expr, (VarRef, ParamRef)):
        return expr.name
    if isinstance(expr, Compare):
        return f"{format_expr(expr.left)} {expr.op} {format_expr(expr.right)}"
    if isinstance(expr, BoolNot):
        return f"!({format_expr(expr.arg)})"
    if isinstance(expr, BoolAnd):
        return f"({format_expr(expr.left)} & {format_expr(expr.right)})"
    if isinstance(expr, BoolOr):
        return f"({format_expr(expr.left)} | {format_expr(expr.right)})"
    raise TypeError(expr)


def _operand_value(op: Operand, state: Mapping[str, Value], args: Mapping[str, Value]) -> Value:
    if isinstance(op, Lit):
        return op.value
    if isinstance(op, VarRef):
        return state[op.name]
    return args[op.name]


def eval_expr(expr: Expr, state: Mapping[str, Value], args: Mapping[str, Value]) -> bool:
    if isinstance(expr, Compare):
        lhs = _operand_value(expr.left, state, args)
        rhs = _operand_value(expr.right, state, args)
        if expr.op == "==":
            return lhs == rhs and type(lhs) is type(rhs)
        if expr.op == "!=":
            return not (lhs == rhs and type(lhs) is type(rhs))
        if type(lhs) is not int or type(rhs) is not int:
            raise DomainError(f"ordering comparison on non-integers: {format_expr(expr)}")
        return {"<": lhs < rhs, "<=": lhs <= rhs, ">": lhs > rhs, ">=": lhs >= rhs}[expr.op]
    if isinstance(expr, BoolAnd):
        return eval_expr(expr.left, state, args) and eval_expr(expr.right, state, args)
    if isinstance(expr, BoolOr):
        return eval_expr(expr.left, state, args) or eval_expr(expr.right, state, args)
    if isinstance(expr, BoolNot):
        return not eval_expr(expr.arg, state, args)
    value = _operand_value(expr, state, args)
    if type(value) is not bool:
        raise DomainError(f"non-boolean used as condition: {format_expr(expr)}")
    return value


def expr_symbols(expr: Expr) -> Iterator[VarRef | ParamRef]:
    if isinstance(expr, (VarRef, ParamRef)):
        yield expr
    elif isinstance(expr, Compare):
        yield from expr_symbols(expr.left)
        yield from expr_symbols(expr.right)
    elif isinstance(expr, BoolNot):
        yield from expr_symbols(expr.arg)
    elif isinstance(expr, (BoolAnd, BoolOr)):
        yield from expr_symbols(expr.left)
        yield from expr_symbols(expr.right)


# ---------------------------------------------------------------------------
# APIs and toolsets


@dataclass(frozen=True)
class Effect:
    var: str
    source: Lit | ParamRef

    def value(self, args: Mapping[str, Value]) -> Value:
        if isinstance(self.source, Lit):
            return self.source.value
        return args[self.source.name]

    def __str__(self) -> str:
        return f"{self.var} = {format_expr(self.source)}"


@dataclass(frozen=True)
class ApiSpec:
    name: str
    params: tuple[ParamSpec, ...] = ()
    precondition: Expr = TRUE_EXPR
    effects: tuple[Effect, ...] = ()
    safety_critical: bool = False
    description: str = ""
    keywords: tuple[str, ...] = ()
    goal: str = ""

    @property
    def param_names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.params)

    def param(self, name: str) -> ParamSpec:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)

    def bindings(self) -> Iterator[dict[str, Value]]:
        """All argument maps over the finite parameter domains, in declaration order."""
        names = self.param_names
        for combo in itertools.product(*(p.domain.values for p in self.params)):
            yield dict(zip(names, combo))

    def written_vars(self) -> frozenset[str]:
        return frozenset(e.var for e in self.effects)


class WorldState(Mapping[str, Value]):
    """Immutable assignment of values to state variables."""

    __slots__ = ("_vars", "_hash")

    def __init__(self, vars: Mapping[str, Value] | Iterable[tuple[str, Value]] = ()):
        self._vars = dict(vars)
        self._hash: int | None = None

    def __getitem__(self, key: str) -> Value:
        return self._vars[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._vars)

    def __len__(self) -> int:
        return len(self._vars)

    def __hash__(self) -> int:
        if self._hash is None:
            self._hash = hash(frozenset((k, type(v).__name__, v) for k, v in self._vars.items()))
        return self._hash

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Mapping):
            return NotImplemented
        if set(self) != set(other):
            return False
        return all(type(v) is type(other[k]) and v == other[k] for k, v in self._vars.items())

    def __repr__(self) -> str:
        return f"WorldState({self._vars!r})"

    def updated(self, updates: Mapping[str, Value]) -> WorldState:
        merged = dict(self._vars)
        merged.update(updates)
        return WorldState(merged)

    def project(self, names: Iterable[str]) -> dict[str, Value]:
        return {n: self._vars[n] for n in sorted(names)}

    def to_dict(self) -> dict[str, Value]:
        return dict(self._vars)


@dataclass(frozen=True)
class Toolset:
    scenario_name: str
    apis: tuple[ApiSpec, ...]
    state_decl: tuple[StateVar, ...] = ()
    description: str = ""

    def __post_init__(self) -> None:
        if not self.apis:
            raise SchemaError("toolset declares no APIs")
        object.__setattr__(self, "_by_name", {a.name: a for a in self.apis})
        object.__setattr__(self, "_vars", {v.name: v for v in self.state_decl})

    def api(self, name: str) -> ApiSpec:
        return self._by_name[name]  # type: ignore[attr-defined]

    def has_api(self, name: str) -> bool:
        return name in self._by_name  # type: ignore[attr-defined]

    def var(self, name: str) -> StateVar:
        return self._vars[name]  # type: ignore[attr-defined]

    @property
    def api_names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.apis)

    @property
    def safety_apis(self) -> frozenset[str]:
        return frozenset(a.name for a in self.apis if a.safety_critical)

    def initial_state(self) -> WorldState:
        return WorldState((v.name, v.initial) for v in self.state_decl)


@dataclass(frozen=True)
class Invocation:
    api_name: str
    args: Mapping[str, Value] = field(default_factory=dict)
    step: int = 0

    def __str__(self) -> str:
        inner = ", ".join(f"{k}={format_value(v)}" for k, v in self.args.items())
        return f"{self.api_name}({inner})"


@dataclass(frozen=True)
class Trace:
    actions: tuple[Invocation, ...] = ()

    def __post_init__(self) -> None:
        for i, a in enumerate(self.actions):
            if a.step != i:
                raise ValueError(f"step indices must be contiguous from 0; action {i} has step {a.step}")

    @classmethod
    def of(cls, calls: Iterable[str | tuple[str, Mapping[str, Value]] | Invocation]) -> Trace:
        """Build a trace from API names, ``(name, args)`` pairs or invocations, reindexing steps."""
        actions = []
        for i, c in enumerate(calls):
            if isinstance(c, str):
                actions.append(Invocation(c, {}, i))
            elif isinstance(c, Invocation):
                actions.append(Invocation(c.api_name, dict(c.args), i))
            else:
                name, args = c
                actions.append(Invocation(name, dict(args), i))
        return cls(tuple(actions))

    def __len__(self) -> int:
        return len(self.actions)

    def __iter__(self) -> Iterator[Invocation]:
        return iter(self.actions)

    def __getitem__(self, i: int) -> Invocation:
        return self.actions[i]

    def __add__(self, other: Trace) -> Trace:
        return Trace.of(list(self.actions) + list(other.actions))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(a.api_name for a in self.actions)

    def to_records(self) -> list[dict]:
        return [{"api_name": a.api_name, "args": dict(a.args), "step": a.step} for a in self.actions]

    @classmethod
    def from_records(cls, records: Sequence[Mapping]) -> Trace:
        return cls(tuple(Invocation(r["api_name"], dict(r.get("args", {})), r["step"]) for r in records))


# ---------------------------------------------------------------------------
# loading / dumping


class _MarkedLoader(yaml.SafeLoader):
    pass


class _MarkedDict(dict):
    line: int | None = None


def _construct_marked_mapping(loader, node):
    loader.flatten_mapping(node)
    d = _MarkedDict(loader.construct_pairs(node, deep=True))
    d.line = node.start_mark.line + 1
    return d


_MarkedLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_marked_mapping)

_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")


def _line(obj) -> int | None:
    return getattr(obj, "line", None)


def _domain_from_doc(doc, where: str) -> Domain:
    if not isinstance(doc, Mapping) or "type" not in doc:
        raise SchemaError(f"{where}: domain must be a mapping with a 'type' key", _line(doc))
    kind = doc["type"]
    if kind == "bool":
        return Domain.boolean()
    if kind == "int":
        lo, hi = doc.get("min"), doc.get("max")
        if type(lo) is not int or type(hi) is not int:
            raise SchemaError(f"{where}: int domain needs integer 'min' and 'max'", _line(doc))
        return Domain.integer(lo, hi)
    if kind == "enum":
        values = doc.get("values")
        if not isinstance(values, list) or not values or not all(isinstance(v, str) for v in values):
            raise SchemaError(f"{where}: enum domain needs a non-empty list of string 'values'", _line(doc))
        return Domain.enum(values)
    raise SchemaError(f"{where}: unknown domain type {kind!r}", _line(doc))


def _check_ident(name, where: str, line: int | None) -> str:
    if not isinstance(name, str) or not _IDENT.match(name):
        raise SchemaError(f"{where}: invalid identifier {name!r}", line)
    return name


def _parse_effect(text, api_name: str, state: Mapping[str, StateVar], params: Mapping[str, ParamSpec],
                  line: int | None) -> Effect:
    if not isinstance(text, str) or "=" not in text:
        raise SchemaError(f"api {api_name}: effect must look like 'var = value', got {text!r}", line)
    lhs, rhs = (s.strip() for s in text.split("=", 1))
    if lhs not in state:
        raise SchemaReferenceError(lhs, f"effect of api {api_name}", line)
    decl = state[lhs]

    def resolve(name: str):
        if name in params:
            return ParamRef(name)
        raise SchemaReferenceError(name, f"effect of api {api_name}", line)

    try:
        source = parse_expr(rhs, resolve)
    except SchemaError as exc:
        if isinstance(exc, SchemaReferenceError):
            raise
        raise SchemaError(f"api {api_name}: bad effect {text!r}: {exc.message}", line) from None
    if isinstance(source, Lit):
        if source.value not in decl.domain:
            raise SchemaError(f"api {api_name}: value {format_value(source.value)} outside domain of {lhs}", line)
    elif isinstance(source, ParamRef):
        if not params[source.name].domain.issubset(decl.domain):
            raise SchemaError(f"api {api_name}: parameter {source.name} domain does not fit {lhs}", line)
    else:
        raise SchemaError(f"api {api_name}: effect right-hand side must be a constant or parameter", line)
    return Effect(lhs, source)


def _check_compare_types(expr: Expr, api_name: str, state: Mapping[str, StateVar],
                         params: Mapping[str, ParamSpec], line: int | None) -> None:
    def kind_of(op: Operand) -> str:
        if isinstance(op, Lit):
            v = op.value
            return "bool" if type(v) is bool else "int" if isinstance(v, int) else "enum"
        if isinstance(op, VarRef):
            return state[op.name].domain.kind
        return params[op.name].domain.kind

    if isinstance(expr, Compare):
        lk, rk = kind_of(expr.left), kind_of(expr.right)
        if lk != rk:
            raise SchemaError(f"api {api_name}: comparison of {lk} with {rk} in {format_expr(expr)!r}", line)
        if expr.op not in ("==", "!=") and lk != "int":
            raise SchemaError(f"api {api_name}: ordering comparison on {lk} in {format_expr(expr)!r}", line)
    elif isinstance(expr, (VarRef, ParamRef)):
        if kind_of(expr) != "bool":
            raise SchemaError(f"api {api_name}: non-boolean {expr.name} used as a condition", line)
    elif isinstance(expr, BoolNot):
        _check_compare_types(expr.arg, api_name, state, params, line)
    elif isinstance(expr, (BoolAnd, BoolOr)):
        _check_compare_types(expr.left, api_name, state, params, line)
        _check_compare_types(expr.right, api_name, state, params, line)


def _api_from_doc(doc, state: Mapping[str, StateVar]) -> ApiSpec:
    line = _line(doc)
    if not isinstance(doc, Mapping):
        raise SchemaError("each api must be a mapping", line)
    unknown = set(doc) - {"name", "description", "safety_critical", "keywords", "goal", "params",
                          "precondition", "effects"}
    if unknown:
        raise SchemaError(f"api {doc.get('name')!r}: unknown keys {sorted(unknown)}", line)
    name = _check_ident(doc.get("name"), "api", line)
    params: dict[str, ParamSpec] = {}
    raw_params = doc.get("params") or {}
    if not isinstance(raw_params, Mapping):
        raise SchemaError(f"api {name}: params must be a mapping", line)
    for pname, pdoc in raw_params.items():
        _check_ident(pname, f"api {name} param", _line(raw_params))
        if pname in state:
            raise SchemaError(f"api {name}: parameter {pname!r} shadows a state variable", _line(pdoc) or line)
        params[pname] = ParamSpec(pname, _domain_from_doc(pdoc, f"api {name} param {pname}"))

    def resolve(sym: str):
        if sym in params:
            return ParamRef(sym)
        if sym in state:
            return VarRef(sym)
        raise SchemaReferenceError(sym, f"precondition of api {name}", line)

    pre_text = doc.get("precondition", "true")
    if isinstance(pre_text, bool):
        pre_text = "true" if pre_text else "false"
    if not isinstance(pre_text, str):
        raise SchemaError(f"api {name}: precondition must be a string", line)
    try:
        precondition = parse_expr(pre_text, resolve)
    except SchemaReferenceError:
        raise
    except SchemaError as exc:
        raise SchemaError(f"api {name}: bad precondition: {exc.message}", line, exc.column) from None
    _check_compare_types(precondition, name, state, params, line)
    effects = tuple(_parse_effect(e, name, state, params, line) for e in (doc.get("effects") or []))
    keywords = doc.get("keywords") or []
    if not isinstance(keywords, list) or not all(isinstance(k, str) for k in keywords):
        raise SchemaError(f"api {name}: keywords must be a list of strings", line)
    safety = doc.get("safety_critical", False)
    if type(safety) is not bool:
        raise SchemaError(f"api {name}: safety_critical must be true or false", line)
    return ApiSpec(
        name=name,
        params=tuple(params.values()),
        precondition=precondition,
        effects=effects,
        safety_critical=safety,
        description=str(doc.get("description", "")),
        keywords=tuple(keywords),
        goal=str(doc.get("goal", "")),
    )


def load_toolset(doc: str) -> Toolset:
    """Parse and validate a YAML schema document."""
    try:
        data = yaml.load(doc, Loader=_MarkedLoader)  # noqa: S506 - SafeLoader subclass
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        raise SchemaError(f"YAML syntax error: {exc.problem}",
                          mark.line + 1 if mark else None, mark.column + 1 if mark else None) from None
    if not isinstance(data, Mapping):
        raise SchemaError("schema document must be a mapping", 1)
    scenario = data.get("scenario")
    if not isinstance(scenario, str) or not scenario:
        raise SchemaError("missing 'scenario' name", _line(data))

    state: dict[str, StateVar] = {}
    raw_state = data.get("state") or {}
    if not isinstance(raw_state, Mapping):
        raise SchemaError("'state' must be a mapping", _line(data))
    for vname, vdoc in raw_state.items():
        _check_ident(vname, "state variable", _line(raw_state))
        domain = _domain_from_doc(vdoc, f"state variable {vname}")
        if "initial" not in vdoc:
            raise SchemaError(f"state variable {vname}: missing 'initial'", _line(vdoc))
        initial = vdoc["initial"]
        if initial not in domain:
            raise SchemaError(f"state variable {vname}: initial value {initial!r} outside domain", _line(vdoc))
        state[vname] = StateVar(vname, domain, initial)

    raw_apis = data.get("apis")
    if not isinstance(raw_apis, list) or not raw_apis:
        raise SchemaError("'apis' must be a non-empty list", _line(data))
    apis = [_api_from_doc(a, state) for a in raw_apis]
    seen: set[str] = set()
    for api, raw in zip(apis, raw_apis):
        if api.name in seen:
            raise SchemaError(f"duplicate api name {api.name!r}", _line(raw))
        seen.add(api.name)
    return Toolset(scenario, tuple(apis), tuple(state.values()), str(data.get("description", "")))


def load_toolset_file(path) -> Toolset:
    with open(path, encoding="utf-8") as fh:
        return load_toolset(fh.read())


def toolset_to_doc(toolset: Toolset) -> dict:
    state = {}
    for v in toolset.state_decl:
        entry = v.domain.to_doc()
        entry["initial"] = v.initial
        state[v.name] = entry
    apis = []
    for a in toolset.apis:
        entry: dict = {"name": a.name}
        if a.description:
            entry["description"] = a.description
        entry["safety_critical"] = a.safety_critical
        if a.keywords:
            entry["keywords"] = list(a.keywords)
        if a.goal:
            entry["goal"] = a.goal
        if a.params:
            entry["params"] = {p.name: p.domain.to_doc() for p in a.params}
        entry["precondition"] = format_expr(a.precondition)
        if a.effects:
            entry["effects"] = [str(e) for e in a.effects]
        apis.append(entry)
    doc: dict = {"scenario": toolset.scenario_name}
    if toolset.description:
        doc["description"] = toolset.description
    doc["state"] = state
    doc["apis"] = apis
    return doc


def dump_toolset(toolset: Toolset) -> str:
    return yaml.safe_dump(toolset_to_doc(toolset), sort_keys=False, allow_unicode=True, width=100)


# ---------------------------------------------------------------------------
# execution


def check_args(api: ApiSpec, args: Mapping[str, Value]) -> None:
    """Raise DomainError unless ``args`` binds exactly the declared params within their domains."""
    declared = set(api.param_names)
    given = set(args)
    if given != declared:
        missing = sorted(declared - given)
        extra = sorted(given - declared)
        parts = []
        if missing:
            parts.append(f"missing {missing}")
        if extra:
            parts.append(f"unexpected {extra}")
        raise DomainError(f"{api.name}: " + ", ".join(parts))
    for p in api.params:
        if args[p.name] not in p.domain:
            raise DomainError(f"{api.name}: {p.name}={args[p.name]!r} outside its domain")


def check_precondition(api: ApiSpec, args: Mapping[str, Value], state: Mapping[str, Value]) -> bool:
    check_args(api, args)
    return eval_expr(api.precondition, state, args)


def apply_effects(api: ApiSpec, args: Mapping[str, Value], state: WorldState) -> WorldState:
    if not api.effects:
        return state
    updates: dict[str, Value] = {}
    for eff in api.effects:
        updates[eff.var] = eff.value(args)
    return state.updated(updates)


class FailureReason(str, enum.Enum):
    UNKNOWN_API = "unknown_api"
    BAD_ARGS = "bad_args"
    PRECONDITION = "precondition_false"


@dataclass(frozen=True)
class ExecutionResult:
    ok: bool
    final_state: WorldState
    states: tuple[WorldState, ...]  # state after each executed step
    failed_step: int | None = None
    reason: FailureReason | None = None
    message: str = ""

    @property
    def executed_steps(self) -> int:
        return len(self.states)


def execute_trace(toolset: Toolset, initial: WorldState | None, trace: Trace) -> ExecutionResult:
    """Replay ``trace`` in the sandbox. Failures are reported in the result, never raised."""
    state = toolset.initial_state() if initial is None else initial
    states: list[WorldState] = []
    for i, inv in enumerate(trace.actions):
        if not toolset.has_api(inv.api_name):
            return ExecutionResult(False, state, tuple(states), i, FailureReason.UNKNOWN_API,
                                   f"unknown api {inv.api_name!r}")
        api = toolset.api(inv.api_name)
        try:
            ok = check_precondition(api, inv.args, state)
        except DomainError as exc:
            return ExecutionResult(False, state, tuple(states), i, FailureReason.BAD_ARGS, str(exc))
        if not ok:
            return ExecutionResult(False, state, tuple(states), i, FailureReason.PRECONDITION,
                                   f"precondition of {api.name} is false: {format_expr(api.precondition)}")
        state = apply_effects(api, inv.args, state)
        states.append(state)
    return ExecutionResult(True, state, tuple(states))
