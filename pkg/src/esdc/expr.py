"""Arithmetic expressions over cube variables.

Grammar::

    expr   := term   { ("+" | "-") term }
    term   := factor { ("*" | "/") factor }
    factor := NUMBER | IDENT | "(" expr ")" | "-" factor

Evaluation is element-wise on float arrays; NaN propagates and division by
zero yields NaN.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Set, Union

import numpy as np

from .errors import ParseError, UnknownVariable

_TOKEN = re.compile(
    r"\s*(?:(?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)|(?P<op>[-+*/()]))"
)


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


Node = Union[Num, Var, Neg, BinOp]


def tokenize(text: str):
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if not m:
            bad = pos + len(text[pos:]) - len(text[pos:].lstrip())
            raise ParseError(f"unexpected character {text[bad]!r}", bad)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text):
        self.tokens = tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, text, pos = self.take()
        if text != value:
            found = "end of input" if kind == "end" else repr(text)
            raise ParseError(f"expected {value!r}, found {found}", pos)

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.factor()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.factor())
        return node

    def factor(self):
        kind, text, pos = self.take()
        if kind == "number":
            return Num(float(text))
        if kind == "ident":
            return Var(text)
        if text == "(":
            node = self.expr()
            self.expect(")")
            return node
        if text == "-":
            return Neg(self.factor())
        found = "end of input" if kind == "end" else repr(text)
        raise ParseError(f"unexpected {found}", pos)


def parse(text: str) -> Node:
    """Parse ``text`` into an expression tree; raises :class:`ParseError`."""
    p = _Parser(text)
    node = p.expr()
    kind, tok, pos = p.peek()
    if kind != "end":
        raise ParseError(f"unexpected {tok!r}", pos)
    return node


def identifiers(node: Node) -> Set[str]:
    if isinstance(node, Var):
        return {node.name}
    if isinstance(node, Neg):
        return identifiers(node.operand)
    if isinstance(node, BinOp):
        return identifiers(node.left) | identifiers(node.right)
    return set()


def evaluate(node: Union[Node, str], env: Mapping[str, np.ndarray]):
    """Evaluate a tree (or source string) with variables from ``env``."""
    if isinstance(node, str):
        node = parse(node)
    if isinstance(node, Num):
        return np.float64(node.value)
    if isinstance(node, Var):
        try:
            return np.asarray(env[node.name], dtype=np.float64)
        except KeyError:
            raise UnknownVariable(f"unknown variable {node.name!r}") from None
    if isinstance(node, Neg):
        return -evaluate(node.operand, env)
    a = evaluate(node.left, env)
    b = evaluate(node.right, env)
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        return np.where(b == 0, np.nan, a / np.where(b == 0, 1.0, b))
