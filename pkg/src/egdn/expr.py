"""Small expression language for attribute predicates and computed variables.

Covers arithmetic, comparison, boolean logic, string equality, and (in
group expressions only) the aggregates count(), sum(x), min(x), max(x),
avg(x).  Runtime problems such as division by zero or mixing strings
into arithmetic raise EvalError, which aborts the surrounding run.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Union


class ExprSyntaxError(ValueError):
    """The expression text could not be parsed."""


class EvalError(Exception):
    """An expression failed at evaluation time."""


Value = Union[int, float, str, bool]
AGGREGATES = ("count", "sum", "min", "max", "avg")


@dataclass(frozen=True)
class Lit:
    value: Value


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str  # "-" | "not"
    operand: "Node"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Agg:
    fn: str
    var: Optional[str]  # None only for count()


Node = Union[Lit, Var, Unary, Binary, Agg]

_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+\.\d+|\d+)|(?P<name>[A-Za-z_][A-Za-z0-9_]*)"
    r'|(?P<str>"(?:[^"\\]|\\.)*")|(?P<op><=|>=|==|!=|[-+*/<>()]|,))'
)


def _tokenize(text: str) -> list[tuple[str, str]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            if text[pos:].strip():
                raise ExprSyntaxError(f"bad token at {text[pos:]!r}")
            break
        pos = m.end()
        for kind in ("num", "name", "str", "op"):
            tok = m.group(kind)
            if tok is not None:
                tokens.append((kind, tok))
                break
    return tokens


class _Parser:
    def __init__(self, tokens: list[tuple[str, str]], text: str):
        self.tokens = tokens
        self.text = text
        self.i = 0

    def peek(self) -> Optional[tuple[str, str]]:
        return self.tokens[self.i] if self.i < len(self.tokens) else None

    def take(self) -> tuple[str, str]:
        tok = self.peek()
        if tok is None:
            raise ExprSyntaxError(f"unexpected end of expression in {self.text!r}")
        self.i += 1
        return tok

    def expect(self, value: str) -> None:
        tok = self.take()
        if tok[1] != value:
            raise ExprSyntaxError(f"expected {value!r}, got {tok[1]!r} in {self.text!r}")

    def parse(self) -> Node:
        node = self.or_expr()
        if self.peek() is not None:
            raise ExprSyntaxError(f"trailing input {self.tokens[self.i:]} in {self.text!r}")
        return node

    def or_expr(self) -> Node:
        node = self.and_expr()
        while self.peek() == ("name", "or"):
            self.take()
            node = Binary("or", node, self.and_expr())
        return node

    def and_expr(self) -> Node:
        node = self.not_expr()
        while self.peek() == ("name", "and"):
            self.take()
            node = Binary("and", node, self.not_expr())
        return node

    def not_expr(self) -> Node:
        if self.peek() == ("name", "not"):
            self.take()
            return Unary("not", self.not_expr())
        return self.comparison()

    def comparison(self) -> Node:
        node = self.additive()
        tok = self.peek()
        if tok and tok[0] == "op" and tok[1] in ("==", "!=", "<", "<=", ">", ">="):
            op = self.take()[1]
            node = Binary(op, node, self.additive())
        return node

    def additive(self) -> Node:
        node = self.multiplicative()
        while True:
            tok = self.peek()
            if tok and tok[0] == "op" and tok[1] in ("+", "-"):
                node = Binary(self.take()[1], node, self.multiplicative())
            else:
                return node

    def multiplicative(self) -> Node:
        node = self.unary()
        while True:
            tok = self.peek()
            if tok and tok[0] == "op" and tok[1] in ("*", "/"):
                node = Binary(self.take()[1], node, self.unary())
            else:
                return node

    def unary(self) -> Node:
        tok = self.peek()
        if tok == ("op", "-"):
            self.take()
            return Unary("-", self.unary())
        return self.atom()

    def atom(self) -> Node:
        kind, tok = self.take()
        if kind == "num":
            return Lit(float(tok) if "." in tok else int(tok))
        if kind == "str":
            return Lit(tok[1:-1].replace('\\"', '"').replace("\\\\", "\\"))
        if kind == "name":
            if tok in ("true", "false"):
                return Lit(tok == "true")
            if self.peek() == ("op", "("):
                if tok not in AGGREGATES:
                    raise ExprSyntaxError(f"unknown function {tok!r} in {self.text!r}")
                self.take()
                if self.peek() == ("op", ")"):
                    self.take()
                    if tok != "count":
                        raise ExprSyntaxError(f"{tok}() needs a variable argument")
                    return Agg(tok, None)
                arg_kind, arg = self.take()
                if arg_kind != "name":
                    raise ExprSyntaxError(f"aggregate argument must be a variable, got {arg!r}")
                self.expect(")")
                return Agg(tok, arg)
            return Var(tok)
        if tok == "(":
            node = self.or_expr()
            self.expect(")")
            return node
        raise ExprSyntaxError(f"unexpected token {tok!r} in {self.text!r}")


def parse_expr(text: str) -> Node:
    return _Parser(_tokenize(text), text).parse()


def free_vars(node: Node) -> set[str]:
    """Variables referenced outside aggregate calls."""
    if isinstance(node, Var):
        return {node.name}
    if isinstance(node, Unary):
        return free_vars(node.operand)
    if isinstance(node, Binary):
        return free_vars(node.left) | free_vars(node.right)
    return set()


def agg_vars(node: Node) -> set[str]:
    if isinstance(node, Agg):
        return {node.var} if node.var else set()
    if isinstance(node, Unary):
        return agg_vars(node.operand)
    if isinstance(node, Binary):
        return agg_vars(node.left) | agg_vars(node.right)
    return set()


def has_aggregate(node: Node) -> bool:
    if isinstance(node, Agg):
        return True
    if isinstance(node, Unary):
        return has_aggregate(node.operand)
    if isinstance(node, Binary):
        return has_aggregate(node.left) or has_aggregate(node.right)
    return False


def _require_number(value, context: str):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise EvalError(f"{context}: expected a number, got {value!r}")
    return value


def _require_bool(value, context: str):
    if not isinstance(value, bool):
        raise EvalError(f"{context}: expected a boolean, got {value!r}")
    return value


def evaluate(
    node: Node,
    env: Mapping[str, Value],
    rows: Optional[Sequence[Mapping[str, Value]]] = None,
) -> Value:
    """Evaluate against variable bindings; `rows` supplies the group's
    tuples when aggregates are allowed."""
    if isinstance(node, Lit):
        return node.value
    if isinstance(node, Var):
        if node.name not in env:
            raise EvalError(f"unbound variable {node.name!r}")
        return env[node.name]
    if isinstance(node, Agg):
        if rows is None:
            raise EvalError(f"{node.fn}() used outside a group expression")
        if node.fn == "count":
            return len(rows)
        values = [_require_number(r[node.var], node.fn) for r in rows]
        if not values:
            raise EvalError(f"{node.fn}({node.var}) over an empty group")
        if node.fn == "sum":
            return sum(values)
        if node.fn == "min":
            return min(values)
        if node.fn == "max":
            return max(values)
        return sum(values) / len(values)
    if isinstance(node, Unary):
        value = evaluate(node.operand, env, rows)
        if node.op == "-":
            return -_require_number(value, "unary minus")
        return not _require_bool(value, "not")
    if isinstance(node, Binary):
        if node.op in ("and", "or"):
            left = _require_bool(evaluate(node.left, env, rows), node.op)
            # no short-circuit surprises for the reader: both sides type-check
            right = _require_bool(evaluate(node.right, env, rows), node.op)
            return (left and right) if node.op == "and" else (left or right)
        left = evaluate(node.left, env, rows)
        right = evaluate(node.right, env, rows)
        if node.op in ("==", "!="):
            same = left == right
            return same if node.op == "==" else not same
        if node.op in ("<", "<=", ">", ">="):
            try:
                return {
                    "<": left < right,
                    "<=": left <= right,
                    ">": left > right,
                    ">=": left >= right,
                }[node.op]
            except TypeError:
                raise EvalError(f"cannot compare {left!r} {node.op} {right!r}") from None
        left = _require_number(left, node.op)
        right = _require_number(right, node.op)
        if node.op == "+":
            return left + right
        if node.op == "-":
            return left - right
        if node.op == "*":
            return left * right
        if right == 0:
            raise EvalError(f"division by zero: {left} / {right}")
        return left / right
    raise EvalError(f"unknown node {node!r}")
