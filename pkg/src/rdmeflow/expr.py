"""Propensity expressions.

Grammar (``^`` binds tightest, then unary minus, then ``* /``, then ``+ -``;
all binary operators associate to the left)::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := '-' unary | power
    power   := primary ('^' exponent)*
    exponent:= '-' exponent | primary
    primary := NUMBER | IDENT | IDENT '(' expr (',' expr)* ')' | '(' expr ')'

Identifiers are species counts, parameter names, or ``vol`` (the volume of the
voxel the propensity is evaluated in). Functions: ``min``, ``max``, ``exp``,
``pow``.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ExpressionError, ModelRuntimeError

VOLUME_SYMBOL = "vol"
FUNCTIONS = {"min": 2, "max": 2, "exp": 1, "pow": 2}


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Name:
    id: str
    pos: int = field(default=-1, compare=False)


@dataclass(frozen=True)
class Unary:
    op: str
    operand: object


@dataclass(frozen=True)
class Binary:
    op: str
    left: object
    right: object


@dataclass(frozen=True)
class Call:
    fn: str
    args: tuple
    pos: int = field(default=-1, compare=False)


_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z0-9_]*)|(?P<op>[-+*/^(),]))"
)


def tokenize(source: str):
    tokens = []
    pos = 0
    n = len(source)
    while pos < n:
        if source[pos].isspace():
            pos += 1
            continue
        m = _TOKEN.match(source, pos)
        if not m:
            raise ExpressionError(f"unknown token {source[pos]!r}", pos, source)
        kind = m.lastgroup
        text = m.group(kind)
        start = m.start(kind)
        if kind == "num":
            value = float(text)
            if not math.isfinite(value):
                raise ExpressionError(f"numeric literal {text} overflows", start, source)
            tokens.append(("num", value, start))
        else:
            tokens.append((kind, text, start))
        pos = m.end()
    tokens.append(("end", None, n))
    return tokens


class _Parser:
    def __init__(self, source):
        self.source = source
        self.tokens = tokenize(source)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def error(self, message, tok=None):
        tok = tok or self.peek()
        return ExpressionError(message, tok[2], self.source)

    def expect(self, text):
        tok = self.peek()
        if tok[0] == "op" and tok[1] == text:
            return self.take()
        if text == ")":
            raise self.error("unbalanced parenthesis: expected ')'")
        raise self.error(f"expected {text!r}")

    def parse(self):
        if self.peek()[0] == "end":
            raise self.error("empty expression")
        node = self.expr()
        tok = self.peek()
        if tok[0] != "end":
            if tok[1] == ")":
                raise self.error("unbalanced parenthesis: unexpected ')'")
            raise self.error(f"unexpected token {tok[1]!r}")
        return node

    def expr(self):
        node = self.term()
        while self.peek()[0] == "op" and self.peek()[1] in "+-":
            op = self.take()[1]
            node = Binary(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[0] == "op" and self.peek()[1] in "*/":
            op = self.take()[1]
            node = Binary(op, node, self.unary())
        return node

    def unary(self):
        if self.peek()[:2] == ("op", "-"):
            self.take()
            return Unary("-", self.unary())
        return self.power()

    def power(self):
        node = self.primary()
        while self.peek()[:2] == ("op", "^"):
            self.take()
            node = Binary("^", node, self.exponent())
        return node

    def exponent(self):
        if self.peek()[:2] == ("op", "-"):
            self.take()
            return Unary("-", self.exponent())
        return self.primary()

    def primary(self):
        tok = self.take()
        kind, text, pos = tok
        if kind == "num":
            return Num(text)
        if kind == "name":
            if self.peek()[:2] == ("op", "("):
                if text not in FUNCTIONS:
                    raise ExpressionError(f"unknown function {text!r}", pos, self.source)
                self.take()
                args = [self.expr()]
                while self.peek()[:2] == ("op", ","):
                    self.take()
                    args.append(self.expr())
                self.expect(")")
                if len(args) != FUNCTIONS[text]:
                    raise ExpressionError(
                        f"{text}() takes {FUNCTIONS[text]} argument(s), got {len(args)}", pos, self.source
                    )
                return Call(text, tuple(args), pos)
            return Name(text, pos)
        if kind == "op" and text == "(":
            node = self.expr()
            self.expect(")")
            return node
        if kind == "end":
            raise ExpressionError("unexpected end of expression", pos, self.source)
        raise ExpressionError(f"unexpected token {text!r}", pos, self.source)


def parse_propensity(source: str):
    """Parse ``source`` into an expression tree (unbound)."""
    return _Parser(source).parse()


_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}
_UNARY_PREC = 3


def pretty_print(node) -> str:
    """Render with the minimum parentheses; ``parse_propensity`` inverts it."""
    return _show(node, 0)


def _show(node, ctx):
    if isinstance(node, Num):
        return repr(float(node.value))
    if isinstance(node, Name):
        return node.id
    if isinstance(node, Call):
        return f"{node.fn}({', '.join(_show(a, 0) for a in node.args)})"
    if isinstance(node, Unary):
        text = "-" + _show(node.operand, _UNARY_PREC)
        return f"({text})" if _UNARY_PREC < ctx else text
    p = _PREC[node.op]
    text = f"{_show(node.left, p)} {node.op} {_show(node.right, p + 1)}"
    return f"({text})" if p < ctx else text


def identifiers(node) -> list:
    """All ``Name`` nodes in evaluation order."""
    if isinstance(node, Name):
        return [node]
    if isinstance(node, Unary):
        return identifiers(node.operand)
    if isinstance(node, Binary):
        return identifiers(node.left) + identifiers(node.right)
    if isinstance(node, Call):
        return [n for a in node.args for n in identifiers(a)]
    return []


def check_identifiers(node, species, parameters, source=None):
    """Raise ``ExpressionError`` for the first identifier that does not resolve."""
    known = set(species) | set(parameters) | {VOLUME_SYMBOL}
    for name in identifiers(node):
        if name.id not in known:
            raise ExpressionError(f"unresolved identifier {name.id!r}", name.pos, source)


def evaluate(node, env) -> float:
    """Tree-walking evaluation; ``env`` maps identifiers to numbers."""
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Name):
        return float(env[node.id])
    if isinstance(node, Unary):
        return -evaluate(node.operand, env)
    if isinstance(node, Call):
        args = [evaluate(a, env) for a in node.args]
        try:
            if node.fn == "min":
                return min(args)
            if node.fn == "max":
                return max(args)
            if node.fn == "exp":
                return math.exp(args[0])
            return math.pow(args[0], args[1])
        except (OverflowError, ValueError) as exc:
            raise ModelRuntimeError(f"{node.fn}() failed: {exc}") from None
    a, b = evaluate(node.left, env), evaluate(node.right, env)
    op = node.op
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        if b == 0:
            raise ModelRuntimeError("division by zero in propensity")
        return a / b
    try:
        return math.pow(a, b)
    except (OverflowError, ValueError) as exc:
        raise ModelRuntimeError(f"power failed: {exc}") from None


# RPN opcodes shared with the compiled kernels
OP_CONST, OP_SPECIES, OP_VOL = 0, 1, 2
OP_ADD, OP_SUB, OP_MUL, OP_DIV, OP_POW, OP_NEG, OP_MIN, OP_MAX, OP_EXP = range(3, 12)
_BIN = {"+": OP_ADD, "-": OP_SUB, "*": OP_MUL, "/": OP_DIV, "^": OP_POW}
_CALL = {"min": OP_MIN, "max": OP_MAX, "exp": OP_EXP, "pow": OP_POW}


def compile_rpn(node, species_index: dict, parameters: dict):
    """Flatten a tree into ``(ops, args, max_stack)`` for the compiled kernels.

    Parameters are folded to constants; species become count lookups.
    """
    ops, args = [], []
    depth = [0, 0]

    def push(op, arg=0.0, delta=0):
        ops.append(op)
        args.append(arg)
        depth[0] += delta
        depth[1] = max(depth[1], depth[0])

    def emit(n):
        if isinstance(n, Num):
            push(OP_CONST, n.value, 1)
        elif isinstance(n, Name):
            if n.id in species_index:
                push(OP_SPECIES, float(species_index[n.id]), 1)
            elif n.id in parameters:
                push(OP_CONST, float(parameters[n.id]), 1)
            elif n.id == VOLUME_SYMBOL:
                push(OP_VOL, 0.0, 1)
            else:
                raise ExpressionError(f"unresolved identifier {n.id!r}", n.pos)
        elif isinstance(n, Unary):
            emit(n.operand)
            push(OP_NEG)
        elif isinstance(n, Binary):
            emit(n.left)
            emit(n.right)
            push(_BIN[n.op], delta=-1)
        else:
            for a in n.args:
                emit(a)
            push(_CALL[n.fn], delta=-(len(n.args) - 1))

    emit(node)
    return np.array(ops, dtype=np.int64), np.array(args, dtype=np.float64), depth[1]
