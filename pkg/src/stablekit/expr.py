"""Coefficient expressions: a small recursive-descent parser and evaluator.

Grammar (standard precedence, left associative)::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := '-' unary | primary
    primary := NUMBER | NAME | NAME '(' expr (',' expr)* ')' | '(' expr ')'

Names are ``x1 .. xd`` and ``t``; functions are ``sin cos exp abs tanh sqrt
log min max clamp``.  Evaluation works on scalars and on numpy arrays and
raises :class:`ExprDomainError` instead of producing NaN.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping

import numpy as np


class ExprError(ValueError):
    """Base class for expression errors."""


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, offset: int, expected: tuple[str, ...] = ()):
        self.offset = offset
        self.expected = tuple(sorted(expected))
        detail = f" (expected one of: {', '.join(self.expected)})" if expected else ""
        super().__init__(f"{message} at offset {offset}{detail}")


class ExprNameError(ExprError):
    pass


class ExprDomainError(ExprError, ArithmeticError):
    pass


FUNCTIONS: dict[str, tuple[int, int]] = {
    "sin": (1, 1),
    "cos": (1, 1),
    "exp": (1, 1),
    "abs": (1, 1),
    "tanh": (1, 1),
    "sqrt": (1, 1),
    "log": (1, 1),
    "min": (2, 64),
    "max": (2, 64),
    "clamp": (3, 3),
}

_VAR_RE = re.compile(r"x([1-9][0-9]*)\Z")


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    arg: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple["Node", ...]


Node = Num | Var | Neg | BinOp | Call

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _fmt_num(v: float) -> str:
    if v == int(v) and abs(v) < 1e15:
        return str(int(v)) if v >= 0 else f"({int(v)})"
    s = repr(float(v))
    return s if v >= 0 else f"({s})"


def _to_str(n: Node, parent_prec: int = 0, right: bool = False) -> str:
    if isinstance(n, Num):
        return _fmt_num(n.value)
    if isinstance(n, Var):
        return n.name
    if isinstance(n, Neg):
        return "-" + _to_str(n.arg, 3)
    if isinstance(n, Call):
        return f"{n.func}({', '.join(_to_str(a) for a in n.args)})"
    p = _PREC[n.op]
    s = f"{_to_str(n.left, p)} {n.op} {_to_str(n.right, p, True)}"
    if p < parent_prec or (right and p == parent_prec):
        return f"({s})"
    return s


class Expr:
    """Immutable parsed expression."""

    __slots__ = ("root", "source", "_vars")

    def __init__(self, root: Node, source: str | None = None):
        object.__setattr__(self, "root", root)
        object.__setattr__(self, "source", source)
        object.__setattr__(self, "_vars", frozenset(_collect_vars(root)))

    def __setattr__(self, key, value):
        raise AttributeError("Expr is immutable")

    @property
    def variables(self) -> frozenset[str]:
        return self._vars

    @property
    def is_constant(self) -> bool:
        return not self._vars

    def __str__(self) -> str:
        return _to_str(self.root)

    def __repr__(self) -> str:
        return f"Expr({str(self)!r})"

    def __eq__(self, other) -> bool:
        return isinstance(other, Expr) and self.root == other.root

    def __hash__(self) -> int:
        return hash(self.root)

    def __call__(self, x=None, t=None):
        return eval_expr(self, x, t)


def _collect_vars(n: Node) -> set[str]:
    if isinstance(n, Var):
        return {n.name}
    if isinstance(n, Num):
        return set()
    if isinstance(n, Neg):
        return _collect_vars(n.arg)
    if isinstance(n, BinOp):
        return _collect_vars(n.left) | _collect_vars(n.right)
    out: set[str] = set()
    for a in n.args:
        out |= _collect_vars(a)
    return out


_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/(),]))"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    data = text.encode("utf-8")
    # offsets are byte offsets; the grammar is ASCII so str and byte offsets
    # agree up to the first non-ASCII character, which is itself an error
    tokens = []
    pos = 0
    n = len(text)
    while pos < n:
        m = _TOKEN_RE.match(text, pos)
        if not m or m.end() == pos:
            stripped = pos
            while stripped < n and text[stripped].isspace():
                stripped += 1
            if stripped >= n:
                break
            off = len(text[:stripped].encode("utf-8"))
            raise ExprSyntaxError(f"unexpected character {text[stripped]!r}", off)
        kind = m.lastgroup
        start = len(text[: m.start(kind)].encode("utf-8"))
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", len(data)))
    return tokens


class _Parser:
    def __init__(self, text: str, dim: int | None):
        self.tokens = _tokenize(text)
        self.i = 0
        self.dim = dim

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, val, off = self.peek()
        if val != value or kind != "op":
            raise ExprSyntaxError(f"expected {value!r}", off, (value,))
        self.take()

    def parse(self) -> Node:
        node = self.expr()
        kind, val, off = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected token {val!r}", off, ("+", "-", "*", "/", "end of input"))
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek()[0] == "op" and self.peek()[1] in "+-":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek()[0] == "op" and self.peek()[1] in "*/":
            op = self.take()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Node:
        kind, val, _ = self.peek()
        if kind == "op" and val == "-":
            self.take()
            return Neg(self.unary())
        return self.primary()

    def primary(self) -> Node:
        kind, val, off = self.take()
        if kind == "num":
            return Num(float(val))
        if kind == "name":
            if self.peek()[0] == "op" and self.peek()[1] == "(":
                return self.call(val, off)
            if val == "t" or _VAR_RE.match(val):
                m = _VAR_RE.match(val)
                if m and self.dim is not None and int(m.group(1)) > self.dim:
                    raise ExprNameError(f"variable {val!r} exceeds dimension {self.dim} at offset {off}")
                return Var(val)
            raise ExprNameError(f"unknown identifier {val!r} at offset {off}")
        if kind == "op" and val == "(":
            node = self.expr()
            self.expect(")")
            return node
        raise ExprSyntaxError(
            "unexpected end of input" if kind == "end" else f"unexpected token {val!r}",
            off,
            ("number", "name", "(", "-"),
        )

    def call(self, name: str, off: int) -> Node:
        if name not in FUNCTIONS:
            raise ExprNameError(f"unknown function {name!r} at offset {off}")
        self.expect("(")
        args = [self.expr()]
        while self.peek()[0] == "op" and self.peek()[1] == ",":
            self.take()
            args.append(self.expr())
        kind, val, coff = self.peek()
        if not (kind == "op" and val == ")"):
            raise ExprSyntaxError("expected ')' or ','", coff, (")", ","))
        self.take()
        lo, hi = FUNCTIONS[name]
        if not lo <= len(args) <= hi:
            raise ExprSyntaxError(f"{name} takes {lo}..{hi} arguments, got {len(args)}", off)
        return Call(name, tuple(args))


def parse_expr(text: str, dim: int | None = None) -> Expr:
    """Parse ``text`` into an :class:`Expr`.

    ``dim`` (optional) rejects variables ``xk`` with ``k > dim``.
    """
    if isinstance(text, (int, float)):
        return Expr(Num(float(text)), str(text))
    return Expr(_Parser(text, dim).parse(), text)


def as_expr(value, dim: int | None = None) -> Expr:
    if isinstance(value, Expr):
        return value
    return parse_expr(value if isinstance(value, str) else float(value), dim)


def _check(mask, msg: str):
    if np.any(mask):
        raise ExprDomainError(msg)


def _eval(n: Node, env: Mapping[str, object]):
    if isinstance(n, Num):
        return n.value
    if isinstance(n, Var):
        try:
            return env[n.name]
        except KeyError:
            raise ExprNameError(f"unbound variable {n.name!r}") from None
    if isinstance(n, Neg):
        return -_eval(n.arg, env)
    if isinstance(n, BinOp):
        a = _eval(n.left, env)
        b = _eval(n.right, env)
        if n.op == "+":
            return a + b
        if n.op == "-":
            return a - b
        if n.op == "*":
            return a * b
        _check(np.asarray(b) == 0, "division by zero")
        return a / b
    args = [_eval(a, env) for a in n.args]
    f = n.func
    if f == "log":
        _check(np.asarray(args[0]) <= 0, "log of non-positive value")
        return np.log(args[0])
    if f == "sqrt":
        _check(np.asarray(args[0]) < 0, "sqrt of negative value")
        return np.sqrt(args[0])
    if f == "exp":
        with np.errstate(over="raise"):
            try:
                return np.exp(args[0])
            except FloatingPointError:
                raise ExprDomainError("exp overflow") from None
    if f == "min":
        out = args[0]
        for a in args[1:]:
            out = np.minimum(out, a)
        return out
    if f == "max":
        out = args[0]
        for a in args[1:]:
            out = np.maximum(out, a)
        return out
    if f == "clamp":
        v, lo, hi = args
        return np.minimum(np.maximum(v, lo), hi)
    return {"sin": np.sin, "cos": np.cos, "abs": np.abs, "tanh": np.tanh}[f](args[0])


def eval_expr(e: Expr, x=None, t=None):
    """Evaluate ``e`` at point(s) ``x`` and time ``t``.

    ``x`` is a scalar, a length-d vector, or an array of shape ``(..., d)``.
    Returns a float for a single point and an array otherwise.
    """
    env: dict[str, object] = {}
    shape: tuple[int, ...] = ()
    if x is not None:
        xa = np.asarray(x, dtype=float)
        if xa.ndim == 0:
            xa = xa.reshape(1)
        shape = xa.shape[:-1]
        for k in range(xa.shape[-1]):
            env[f"x{k + 1}"] = xa[..., k] if shape else float(xa[k])
    if t is not None:
        env["t"] = t
    val = _eval(e.root, env)
    if np.ndim(val) == 0 and not shape:
        return float(val)
    return np.broadcast_to(np.asarray(val, dtype=float), shape if shape else np.shape(val)).copy()
