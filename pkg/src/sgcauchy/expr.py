"""Expression strings for symbols and phases.

Grammar (precedence low to high)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := ('+' | '-') unary | power
    power  := atom (('^' | '**') unary)?
    atom   := number | name | '<' name '>' | func '(' expr ')' | '(' expr ')'

Names: ``t`` and ``s`` (times), ``x``/``xi`` in one dimension, ``x1, x2, xi1, xi2`` in two,
``pi``, and user parameters. ``<x>`` and ``<xi>`` are the Japanese brackets.
Functions: sin, cos, exp, atan (alias arctan), sqrt.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping

import sympy as sp

from .errors import ExpressionError

T = sp.Symbol("t", real=True)
S = sp.Symbol("s", real=True)

_FUNCS = {
    "sin": sp.sin,
    "cos": sp.cos,
    "exp": sp.exp,
    "atan": sp.atan,
    "arctan": sp.atan,
    "sqrt": sp.sqrt,
}

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[-+*/^(),<>]))"
)


def space_symbols(n: int) -> tuple[list[sp.Symbol], list[sp.Symbol]]:
    """The sympy symbols used for x and xi in dimension n."""
    if n == 1:
        return [sp.Symbol("x", real=True)], [sp.Symbol("xi", real=True)]
    xs = [sp.Symbol(f"x{i + 1}", real=True) for i in range(n)]
    xis = [sp.Symbol(f"xi{i + 1}", real=True) for i in range(n)]
    return xs, xis


@dataclass
class _Tok:
    kind: str
    text: str
    pos: int


def _tokenize(src: str) -> list[_Tok]:
    out = []
    pos = 0
    src = src.rstrip()
    while pos < len(src):
        m = _TOKEN.match(src, pos)
        if not m or m.end() == pos:
            raise ExpressionError(f"unexpected character {src[pos]!r} at position {pos} in {src!r}")
        kind = m.lastgroup
        out.append(_Tok(kind, m.group(kind), m.start(kind)))
        pos = m.end()
    out.append(_Tok("end", "", len(src)))
    return out


class _Parser:
    def __init__(self, src: str, names: Mapping[str, sp.Expr], brackets: Mapping[str, sp.Expr]):
        self.src = src
        self.toks = _tokenize(src)
        self.i = 0
        self.names = names
        self.brackets = brackets

    def peek(self) -> _Tok:
        return self.toks[self.i]

    def take(self) -> _Tok:
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, text: str) -> None:
        tok = self.take()
        if tok.text != text:
            self.fail(f"expected {text!r}", tok)

    def fail(self, msg: str, tok: _Tok | None = None):
        tok = tok or self.peek()
        raise ExpressionError(f"{msg} at position {tok.pos} in {self.src!r}")

    def parse(self) -> sp.Expr:
        e = self.expr()
        if self.peek().kind != "end":
            self.fail(f"unexpected token {self.peek().text!r}")
        return e

    def expr(self) -> sp.Expr:
        e = self.term()
        while self.peek().text in ("+", "-"):
            op = self.take().text
            rhs = self.term()
            e = e + rhs if op == "+" else e - rhs
        return e

    def term(self) -> sp.Expr:
        e = self.unary()
        while self.peek().text in ("*", "/"):
            op = self.take().text
            rhs = self.unary()
            e = e * rhs if op == "*" else e / rhs
        return e

    def unary(self) -> sp.Expr:
        if self.peek().text == "-":
            self.take()
            return -self.unary()
        if self.peek().text == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self) -> sp.Expr:
        base = self.atom()
        if self.peek().text in ("^", "**"):
            self.take()
            return base ** self.unary()
        return base

    def atom(self) -> sp.Expr:
        tok = self.take()
        if tok.kind == "num":
            return sp.nsimplify(tok.text, rational=True)
        if tok.text == "(":
            e = self.expr()
            self.expect(")")
            return e
        if tok.text == "<":
            name = self.take()
            if name.kind != "name" or name.text not in self.brackets:
                self.fail("expected <x> or <xi>", name)
            self.expect(">")
            return self.brackets[name.text]
        if tok.kind == "name":
            if tok.text in _FUNCS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return _FUNCS[tok.text](arg)
            if tok.text in self.names:
                return self.names[tok.text]
            self.fail(f"unknown name {tok.text!r}", tok)
        self.fail(f"unexpected token {tok.text!r}", tok)


def parse_expression(src: str, n: int = 1, params: Mapping[str, float] | None = None) -> sp.Expr:
    """Parse an expression string into a sympy expression over t, s, x, xi."""
    if not isinstance(src, str):
        return sp.nsimplify(src, rational=True) if isinstance(src, (int, float)) else sp.sympify(src)
    xs, xis = space_symbols(n)
    names: dict[str, sp.Expr] = {"t": T, "s": S, "pi": sp.pi}
    for sym in xs + xis:
        names[sym.name] = sym
    for key, val in (params or {}).items():
        if key in names:
            raise ExpressionError(f"parameter {key!r} shadows a reserved name")
        names[key] = sp.nsimplify(val, rational=True) if isinstance(val, (int, float)) else sp.sympify(val)
    brackets = {
        "x": sp.sqrt(1 + sum(v**2 for v in xs)),
        "xi": sp.sqrt(1 + sum(v**2 for v in xis)),
    }
    return _Parser(src, names, brackets).parse()
