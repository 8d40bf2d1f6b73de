"""Tiny arithmetic expression grammar for custom functions.

Grammar (case-sensitive):

    expr   := term (('+' | '-') term)*
    term   := factor (('*' | '/') factor)*
    factor := unary ('^' integer)?
    unary  := '-' unary | atom
    atom   := number | variable | 'sqrt' '(' expr ')' | 'atan' '(' expr ')'
            | '(' expr ')'

Variables are x[i] (coordinate j=1 implied) or x[i][j], 1-based, i <= v,
j <= n. Expressions are lowered to sympy for symbolic differentiation
(orders <= 3) and lambdified twice: numpy for batch evaluation, mpmath for
high-precision root isolation.
"""

from __future__ import annotations

import re
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np
import sympy as sp

from .errors import ConfigError, DerivativeUnavailable
from .functions import BoundCertificate, FunctionSpec, MultiIndex

SYMBOLIC_ORDER_CAP = 3

_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+(?:\.\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[\[\]()+\-*/^,]))")

_FUNCS = {"sqrt": sp.sqrt, "atan": sp.atan}


def _tokenize(text: str) -> list[str]:
    out = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ConfigError(f"bad token at ...{text[pos:pos + 20]!r}")
        out.append(m.group(m.lastgroup))
        pos = m.end()
    return out


class _Parser:
    def __init__(self, tokens: list[str], v: int, n: int, symbols):
        self.toks = tokens
        self.pos = 0
        self.v = v
        self.n = n
        self.symbols = symbols

    def peek(self) -> Optional[str]:
        return self.toks[self.pos] if self.pos < len(self.toks) else None

    def take(self, expected: Optional[str] = None) -> str:
        tok = self.peek()
        if tok is None or (expected is not None and tok != expected):
            raise ConfigError(f"expected {expected!r}, found {tok!r}")
        self.pos += 1
        return tok

    def parse(self):
        e = self.expr()
        if self.peek() is not None:
            raise ConfigError(f"trailing input from {self.peek()!r}")
        return e

    def expr(self):
        e = self.term()
        while self.peek() in ("+", "-"):
            op = self.take()
            rhs = self.term()
            e = e + rhs if op == "+" else e - rhs
        return e

    def term(self):
        e = self.factor()
        while self.peek() in ("*", "/"):
            op = self.take()
            rhs = self.factor()
            e = e * rhs if op == "*" else e / rhs
        return e

    def factor(self):
        e = self.unary()
        if self.peek() == "^":
            self.take()
            neg = False
            if self.peek() == "-":
                self.take()
                neg = True
            tok = self.take()
            if not tok.isdigit():
                raise ConfigError(f"exponent must be an integer, got {tok!r}")
            k = int(tok)
            e = e ** (-k if neg else k)
        return e

    def unary(self):
        if self.peek() == "-":
            self.take()
            return -self.unary()
        return self.atom()

    def atom(self):
        tok = self.peek()
        if tok is None:
            raise ConfigError("unexpected end of expression")
        if tok == "(":
            self.take()
            e = self.expr()
            self.take(")")
            return e
        if re.fullmatch(r"\d+(?:\.\d+)?", tok):
            self.take()
            if "." in tok:
                return sp.Rational(Fraction(tok))
            return sp.Integer(int(tok))
        if tok == "x":
            return self.variable()
        if tok in _FUNCS:
            self.take()
            self.take("(")
            e = self.expr()
            self.take(")")
            return _FUNCS[tok](e)
        raise ConfigError(f"unknown identifier {tok!r}")

    def variable(self):
        self.take("x")
        self.take("[")
        i = int(self.take())
        self.take("]")
        j = 1
        if self.peek() == "[":
            self.take()
            j = int(self.take())
            self.take("]")
        if not (1 <= i <= self.v):
            raise ConfigError(f"point index {i} outside 1..{self.v}")
        if not (1 <= j <= self.n):
            raise ConfigError(f"coordinate index {j} outside 1..{self.n}")
        return self.symbols[(i - 1) * self.n + (j - 1)]


class _ExprEval:
    """Batch-callable wrapper carrying its own grad and mpmath oracles."""

    def __init__(self, exprs: list[sp.Expr], symbols):
        self.exprs = exprs
        self.symbols = symbols
        self._fn = sp.lambdify(symbols, exprs, modules="numpy")
        self._mp_fn = None
        self._grad = None

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        cols = [x[:, j] for j in range(x.shape[1])]
        vals = self._fn(*cols)
        out = np.empty((x.shape[0], len(self.exprs)))
        for i, vrow in enumerate(vals):
            out[:, i] = np.broadcast_to(vrow, (x.shape[0],))
        return out

    @property
    def grad_fn(self):
        if self._grad is None:
            rows = [[sp.diff(e, s) for s in self.symbols] for e in self.exprs]
            flat = [d for row in rows for d in row]
            fn = sp.lambdify(self.symbols, flat, modules="numpy")
            m, nv = len(self.exprs), len(self.symbols)

            def grad(x: np.ndarray) -> np.ndarray:
                x = np.atleast_2d(np.asarray(x, dtype=float))
                cols = [x[:, j] for j in range(x.shape[1])]
                vals = fn(*cols)
                out = np.empty((x.shape[0], m, nv))
                for i, vrow in enumerate(vals):
                    out[:, i // nv, i % nv] = np.broadcast_to(vrow, (x.shape[0],))
                return out

            self._grad = grad
        return self._grad

    @property
    def mp_eval_fn(self):
        if self._mp_fn is None:
            fn = sp.lambdify(self.symbols, self.exprs, modules="mpmath")

            def mp_eval(args: Sequence):
                return fn(*args)

            self._mp_fn = mp_eval
        return self._mp_fn


def parse_function(components: str | Sequence[str], v: int, n: int = 1,
                   name: Optional[str] = None, eta: float = 1.0,
                   r_q: Optional[int] = None,
                   alpha_q: Optional[MultiIndex] = None,
                   i0: Optional[int] = None,
                   c0_cert: Optional[BoundCertificate] = None) -> FunctionSpec:
    """Parse component expression strings into a FunctionSpec."""
    if isinstance(components, str):
        components = [components]
    nv = n * v
    symbols = sp.symbols(f"u0:{nv}")
    exprs = []
    for text in components:
        toks = _tokenize(text)
        exprs.append(sp.expand(_Parser(toks, v, n, symbols).parse()))
    base = _ExprEval(exprs, symbols)

    def deriv(alpha: MultiIndex) -> _ExprEval:
        if sum(alpha) > SYMBOLIC_ORDER_CAP:
            raise DerivativeUnavailable(
                f"symbolic derivatives capped at order {SYMBOLIC_ORDER_CAP}, "
                f"requested {sum(alpha)}")
        if len(alpha) != nv:
            raise ValueError(f"alpha length {len(alpha)} != {nv}")
        d = [e for e in exprs]
        for j, k in enumerate(alpha):
            if k:
                d = [sp.diff(e, symbols[j], k) for e in d]
        return _ExprEval(d, symbols)

    return FunctionSpec(
        name=name or ";".join(components), n=n, v=v, m=len(exprs),
        eval_fn=base, grad_fn=base.grad_fn, deriv_fn=deriv,
        mp_eval_fn=base.mp_eval_fn, r_q=r_q, alpha_q=alpha_q, i0=i0,
        c0_cert=c0_cert, eta=eta)
