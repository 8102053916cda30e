"""Declarative formulae over primitives with dependency-driven recomputation.

Evaluation is pull-based: `value` computes what it needs and memoizes it
per (name, tick); `set` drops the memoized values of every transitive
dependent from that tick on.
"""

import csv
import logging
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, TextIO

import networkx as nx

from .errors import (
    CycleDetected,
    DivideByZero,
    DuplicateName,
    ExpressionSyntaxError,
    LagUnderflow,
    NotAPrimitive,
    TickRegression,
    UnknownName,
    Unset,
)
from .processors import Processor, Tree

logger = logging.getLogger(__name__)

FUNCTIONS = {"min": 2, "max": 2, "abs": 1, "lag": 2}


# -- expressions -------------------------------------------------------------

@dataclass(frozen=True)
class Number:
    value: float


@dataclass(frozen=True)
class Name:
    name: str


@dataclass(frozen=True)
class Negate:
    operand: Any


@dataclass(frozen=True)
class BinaryOp:
    op: str
    left: Any
    right: Any


@dataclass(frozen=True)
class Call:
    function: str
    args: tuple


@dataclass(frozen=True)
class Lag:
    name: str
    k: int


class ExpressionParser:
    """Recursive-descent parser for formula expressions.

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := '-' unary | primary
    primary := number | name | call | '(' expr ')'
    """

    TOKEN_PATTERN = re.compile(
        r"\s*(?:(?P<number>\d+(?:\.\d*)?(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
        r"|(?P<name>[A-Za-z_][A-Za-z0-9_]*)|(?P<op>[-+*/(),]))"
    )

    def __init__(self, text: str, line: int = 1):
        self.text = text
        self.line = line
        self.tokens = self._tokenize(text)
        self.pos = 0

    def _tokenize(self, text: str) -> list[tuple[str, str, int]]:
        tokens = []
        pos = 0
        while pos < len(text):
            if text[pos:].strip() == "":
                break
            match = self.TOKEN_PATTERN.match(text, pos)
            if not match:
                column = pos + len(text[pos:]) - len(text[pos:].lstrip()) + 1
                raise ExpressionSyntaxError(f"unexpected character {text[column - 1]!r}",
                                            self.line, column)
            kind = match.lastgroup
            tokens.append((kind, match.group(kind), match.start(kind) + 1))
            pos = match.end()
        return tokens

    def parse(self):
        if not self.tokens:
            raise ExpressionSyntaxError("empty expression", self.line, 1)
        node = self._expr()
        if self.pos != len(self.tokens):
            _, value, column = self.tokens[self.pos]
            raise ExpressionSyntaxError(f"unexpected {value!r}", self.line, column)
        return node

    def _peek(self) -> tuple[str, str, int] | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def _take(self, value: str | None = None) -> tuple[str, str, int]:
        token = self._peek()
        if token is None:
            raise ExpressionSyntaxError("unexpected end of expression", self.line, len(self.text) + 1)
        if value is not None and token[1] != value:
            raise ExpressionSyntaxError(f"expected {value!r}, got {token[1]!r}", self.line, token[2])
        self.pos += 1
        return token

    def _expr(self):
        node = self._term()
        while (token := self._peek()) and token[1] in ("+", "-"):
            self.pos += 1
            node = BinaryOp(token[1], node, self._term())
        return node

    def _term(self):
        node = self._unary()
        while (token := self._peek()) and token[1] in ("*", "/"):
            self.pos += 1
            node = BinaryOp(token[1], node, self._unary())
        return node

    def _unary(self):
        token = self._peek()
        if token and token[1] == "-":
            self.pos += 1
            return Negate(self._unary())
        return self._primary()

    def _primary(self):
        kind, value, column = self._take()
        if kind == "number":
            return Number(float(value))
        if kind == "op" and value == "(":
            node = self._expr()
            self._take(")")
            return node
        if kind == "name":
            following = self._peek()
            if following and following[1] == "(":
                return self._call(value, column)
            if value in FUNCTIONS:
                raise ExpressionSyntaxError(f"{value} needs arguments", self.line, column)
            return Name(value)
        raise ExpressionSyntaxError(f"unexpected {value!r}", self.line, column)

    def _call(self, function: str, column: int):
        if function not in FUNCTIONS:
            raise ExpressionSyntaxError(f"unknown function {function!r}", self.line, column)
        self._take("(")
        args = [self._expr()]
        while (token := self._peek()) and token[1] == ",":
            self.pos += 1
            args.append(self._expr())
        self._take(")")
        if len(args) != FUNCTIONS[function]:
            raise ExpressionSyntaxError(
                f"{function} takes {FUNCTIONS[function]} arguments, got {len(args)}", self.line, column)
        if function == "lag":
            target, k = args
            if not isinstance(target, Name):
                raise ExpressionSyntaxError("lag needs a name as first argument", self.line, column)
            if not isinstance(k, Number) or k.value != int(k.value):
                raise ExpressionSyntaxError("lag needs a non-negative integer offset", self.line, column)
            return Lag(target.name, int(k.value))
        return Call(function, tuple(args))


def parse_expression(text: str, line: int = 1):
    return ExpressionParser(text, line).parse()


def references(node) -> set[str]:
    """Names an expression depends on."""
    if isinstance(node, Name):
        return {node.name}
    if isinstance(node, Lag):
        return {node.name}
    if isinstance(node, Negate):
        return references(node.operand)
    if isinstance(node, BinaryOp):
        return references(node.left) | references(node.right)
    if isinstance(node, Call):
        return set().union(*(references(arg) for arg in node.args))
    return set()


# -- graph -------------------------------------------------------------------

@dataclass(frozen=True)
class Formula:
    text: str
    expression: Any
    dependencies: tuple[str, ...]


class ReactiveGraph:
    """Primitives and formulae with memoized, staleness-tracked evaluation."""

    NAME_PATTERN = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")

    def __init__(self):
        self._primitives: dict[str, dict[int, float]] = {}
        self._latest: dict[str, int] = {}
        self._formulas: dict[str, Formula] = {}
        self._dependencies = nx.DiGraph()  # edge dependency -> dependent
        self._cache: dict[str, dict[int, float]] = {}
        self.evaluations = 0
        self.evaluated: Counter[str] = Counter()

    @property
    def primitives(self) -> list[str]:
        return sorted(self._primitives)

    @property
    def formulas(self) -> list[str]:
        return sorted(self._formulas)

    def __contains__(self, name: str) -> bool:
        return name in self._primitives or name in self._formulas

    def _check_new_name(self, name: str) -> None:
        if not isinstance(name, str) or not self.NAME_PATTERN.match(name) or name in FUNCTIONS:
            raise ExpressionSyntaxError(f"invalid name {name!r}")
        if name in self:
            raise DuplicateName(f"{name!r} is already defined")

    def define_primitive(self, name: str) -> "ReactiveGraph":
        self._check_new_name(name)
        self._primitives[name] = {}
        self._dependencies.add_node(name)
        return self

    def define_formula(self, name: str, expression: str, line: int = 1) -> "ReactiveGraph":
        self._check_new_name(name)
        tree = parse_expression(expression, line)
        deps = references(tree)
        if name in deps:
            raise CycleDetected(f"formula {name!r} refers to itself")
        unknown = sorted(dep for dep in deps if dep not in self)
        if unknown:
            raise UnknownName(f"formula {name!r} refers to undefined {', '.join(unknown)}")

        self._formulas[name] = Formula(expression, tree, tuple(sorted(deps)))
        self._dependencies.add_node(name)
        self._dependencies.add_edges_from((dep, name) for dep in deps)
        return self

    def dependencies(self, name: str) -> tuple[str, ...]:
        if name in self._formulas:
            return self._formulas[name].dependencies
        if name in self._primitives:
            return ()
        raise UnknownName(f"{name!r} is not defined")

    def dependents(self, name: str) -> set[str]:
        """Transitive dependents of a name."""
        if name not in self:
            raise UnknownName(f"{name!r} is not defined")
        return nx.descendants(self._dependencies, name)

    def set(self, name: str, tick: int, value: float) -> "ReactiveGraph":
        if name in self._formulas:
            raise NotAPrimitive(f"{name!r} is a formula")
        if name not in self._primitives:
            raise UnknownName(f"{name!r} is not defined")
        latest = self._latest.get(name)
        if latest is not None and tick < latest:
            raise TickRegression(f"{name!r} was set at tick {latest}, cannot go back to {tick}")

        self._primitives[name][tick] = float(value)
        self._latest[name] = tick
        for dependent in self.dependents(name):
            cached = self._cache.get(dependent)
            if cached:
                for stale in [t for t in cached if t >= tick]:
                    del cached[stale]
        return self

    def value(self, name: str, tick: int) -> float:
        if name in self._primitives:
            return self._primitive_value(name, tick)
        if name not in self._formulas:
            raise UnknownName(f"{name!r} is not defined")

        cached = self._cache.setdefault(name, {})
        if tick in cached:
            return cached[tick]
        result = self._evaluate(self._formulas[name].expression, tick)
        self.evaluations += 1
        self.evaluated[name] += 1
        cached[tick] = result
        return result

    def reset_counters(self) -> None:
        self.evaluations = 0
        self.evaluated.clear()

    def _primitive_value(self, name: str, tick: int) -> float:
        """Latest value set at or before `tick`."""
        history = self._primitives[name]
        if tick in history:
            return history[tick]
        earlier = [t for t in history if t <= tick]
        if not earlier:
            raise Unset(f"{name!r} has no value at tick {tick}")
        return history[max(earlier)]

    def _evaluate(self, node, tick: int) -> float:
        if isinstance(node, Number):
            return node.value
        if isinstance(node, Name):
            return self.value(node.name, tick)
        if isinstance(node, Lag):
            if tick - node.k < 0:
                raise LagUnderflow(f"lag({node.name}, {node.k}) reaches before tick 0 at tick {tick}")
            return self.value(node.name, tick - node.k)
        if isinstance(node, Negate):
            return -self._evaluate(node.operand, tick)
        if isinstance(node, BinaryOp):
            left = self._evaluate(node.left, tick)
            right = self._evaluate(node.right, tick)
            if node.op == "+":
                return left + right
            if node.op == "-":
                return left - right
            if node.op == "*":
                return left * right
            if right == 0.0:
                raise DivideByZero(f"division by zero at tick {tick}")
            return left / right
        if isinstance(node, Call):
            args = [self._evaluate(arg, tick) for arg in node.args]
            if node.function == "min":
                return min(args)
            if node.function == "max":
                return max(args)
            return abs(args[0])
        raise TypeError(f"unknown expression node {node!r}")


# -- .reactive files ---------------------------------------------------------

DEFINITION_PATTERN = re.compile(r"\s*(?P<name>[A-Za-z_][A-Za-z0-9_]*)\s*:=\s*(?P<expr>.*)$")


def load_reactive(text: str) -> ReactiveGraph:
    """Build a graph from `name := expression` lines.

    Names that are referenced but never defined become primitives.
    """
    definitions: dict[str, tuple[str, int, set[str]]] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        if not line.strip():
            continue
        match = DEFINITION_PATTERN.match(line)
        if not match:
            raise ExpressionSyntaxError("expected '<name> := <expression>'", number, 1)
        name = match.group("name")
        if name in definitions:
            raise DuplicateName(f"line {number}: {name!r} is already defined")
        expression = match.group("expr")
        deps = references(parse_expression(expression, number))
        definitions[name] = (expression, number, deps)

    order = nx.DiGraph()
    order.add_nodes_from(definitions)
    for name, (_, _, deps) in definitions.items():
        order.add_edges_from((dep, name) for dep in deps if dep in definitions)
        if name in deps:
            raise CycleDetected(f"formula {name!r} refers to itself")
    if not nx.is_directed_acyclic_graph(order):
        cycle = nx.find_cycle(order)
        raise CycleDetected("formula cycle: " + " -> ".join(edge[0] for edge in cycle))

    graph = ReactiveGraph()
    primitives = sorted({dep for _, _, deps in definitions.values() for dep in deps} - set(definitions))
    for name in primitives:
        graph.define_primitive(name)
    for name in nx.lexicographical_topological_sort(order):
        expression, number, _ = definitions[name]
        graph.define_formula(name, expression, number)
    return graph


def load_reactive_file(path: Path) -> ReactiveGraph:
    return load_reactive(Path(path).read_text(encoding="utf-8"))


def evaluation_rows(graph: ReactiveGraph, names: Iterable[str],
                    ticks: Iterable[int]) -> list[tuple[int, str, float]]:
    names = list(names)
    return [(tick, name, graph.value(name, tick)) for tick in ticks for name in names]


def write_evaluations(rows: Iterable[tuple[int, str, float]], out: TextIO) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["tick", "name", "value"])
    for tick, name, value in rows:
        writer.writerow([tick, name, repr(float(value))])


# -- processor ---------------------------------------------------------------

class FormulaProcessor(Processor):
    """Evaluates a formula set over a stream; one fragment is one tick.

    Numeric fields named like primitives are set at the fragment's tick;
    each output fragment carries the input fields plus the formula values.
    """
    name = "formula"
    arity = 1
    parameters = {"definitions": "", "outputs": []}

    def process(self, trees: list[Tree], params: Mapping[str, Any], seed: int) -> list[Tree]:
        graph = load_reactive(str(params["definitions"]))
        outputs = list(params["outputs"]) or graph.formulas
        for name in outputs:
            if name not in graph:
                raise UnknownName(f"output {name!r} is not defined")

        results = []
        for tick, tree in enumerate(trees):
            for name in graph.primitives:
                if name in tree:
                    graph.set(name, tick, float(tree[name]))
            out = dict(tree)
            for name in outputs:
                out[name] = graph.value(name, tick)
            results.append(out)
        logger.debug("formula processor evaluated %d ticks, %d evaluations", len(trees), graph.evaluations)
        return results
