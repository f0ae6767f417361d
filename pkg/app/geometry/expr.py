"""Closed-form scalar fields over chart coordinates.

Grammar (whitespace free-form)::

    expr   := term (("+" | "-") term)*
    term   := unary (("*" | "/") unary)*
    unary  := ("-" | "+") unary | power
    power  := atom (("^" | "**") unary)?
    atom   := NUMBER | CONST | VAR | FUNC "(" args ")" | "(" expr ")"

``VAR`` is ``x1`` .. ``xm``; ``CONST`` is ``pi`` or ``e``. Unary functions are
``exp log sin cos tan tanh sqrt abs`` (plus the internal ``sign`` produced by
differentiating ``abs``), binary ``pow(a, b)`` and ternary ``where(c, a, b)``,
which takes ``a`` where ``c <= 0`` and ``b`` elsewhere.

Trees are immutable and may share subtrees. Evaluation is vectorized over point
batches and memoized per call, so shared subtrees are computed once.
"""

import logging
import math
import re
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from app.errors import (
    ExprDomainError,
    ExprSyntaxError,
    NonDifferentiableError,
    SpecError,
    UnknownIdentifierError,
    VariableIndexError,
)

logger = logging.getLogger(__name__)

UNARY_OPS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "neg": np.negative,
    "exp": np.exp,
    "log": np.log,
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "tanh": np.tanh,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "sign": np.sign,
}
BINARY_OPS = ("+", "-", "*", "/", "^")
CONSTANTS = {"pi": math.pi, "e": math.e}


# ============================================
# Nodes
# ============================================


@dataclass(frozen=True, eq=False)
class Node:
    """Base class of expression tree nodes (identity semantics)."""


@dataclass(frozen=True, eq=False)
class Const(Node):
    value: float


@dataclass(frozen=True, eq=False)
class Var(Node):
    index: int


@dataclass(frozen=True, eq=False)
class Unary(Node):
    op: str
    arg: Node


@dataclass(frozen=True, eq=False)
class Binary(Node):
    op: str
    left: Node
    right: Node


@dataclass(frozen=True, eq=False)
class Where(Node):
    cond: Node
    nonpos: Node
    pos: Node


ZERO = Const(0.0)
ONE = Const(1.0)


def _is_const(node: Node, value: float | None = None) -> bool:
    return isinstance(node, Const) and (value is None or node.value == value)


def _add(a: Node, b: Node) -> Node:
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value + b.value)
    return Binary("+", a, b)


def _sub(a: Node, b: Node) -> Node:
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return _neg(b)
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value - b.value)
    return Binary("-", a, b)


def _mul(a: Node, b: Node) -> Node:
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return ZERO
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value * b.value)
    return Binary("*", a, b)


def _div(a: Node, b: Node) -> Node:
    if _is_const(b, 1.0):
        return a
    if _is_const(a, 0.0) and not _is_const(b, 0.0):
        return ZERO
    return Binary("/", a, b)


def _neg(a: Node) -> Node:
    if isinstance(a, Const):
        return Const(-a.value)
    if isinstance(a, Unary) and a.op == "neg":
        return a.arg
    return Unary("neg", a)


def _pow(a: Node, b: Node) -> Node:
    if _is_const(b, 1.0):
        return a
    if _is_const(b, 0.0):
        return ONE
    return Binary("^", a, b)


def _where(c: Node, a: Node, b: Node) -> Node:
    if isinstance(a, Const) and isinstance(b, Const) and a.value == b.value:
        return a
    return Where(c, a, b)


# ============================================
# Public AST wrapper
# ============================================


@dataclass(frozen=True, eq=False)
class ExprAST:
    """A parsed scalar field over ``dim`` chart coordinates."""

    root: Node
    dim: int

    @classmethod
    def constant(cls, value: float, dim: int) -> "ExprAST":
        return cls(Const(float(value)), dim)

    @classmethod
    def variable(cls, index: int, dim: int) -> "ExprAST":
        if not 0 <= index < dim:
            raise SpecError(f"variable index {index} outside dimension {dim}")
        return cls(Var(index), dim)

    def evaluate(self, points: np.ndarray | Sequence[float]) -> float | np.ndarray:
        return eval_expr(self, points)

    def diff(self, var: int) -> "ExprAST":
        return diff_expr(self, var)

    def substitute(self, mapping: Sequence["ExprAST"]) -> "ExprAST":
        """Replace ``x_{i+1}`` by ``mapping[i]`` (composition with a coordinate map)."""
        dim = max(m.dim for m in mapping) if mapping else self.dim
        memo: dict[int, Node] = {}

        def walk(node: Node) -> Node:
            key = id(node)
            if key in memo:
                return memo[key]
            match node:
                case Const():
                    out: Node = node
                case Var(index=i):
                    if i >= len(mapping):
                        raise SpecError(f"substitution has no image for x{i + 1}")
                    out = mapping[i].root
                case Unary(op=op, arg=arg):
                    out = _apply_unary(op, walk(arg))
                case Binary(op=op, left=left, right=right):
                    out = _apply_binary(op, walk(left), walk(right))
                case Where(cond=c, nonpos=a, pos=b):
                    out = _where(walk(c), walk(a), walk(b))
                case _:
                    raise TypeError(f"unknown node {node!r}")
            memo[key] = out
            return out

        return ExprAST(walk(self.root), dim)

    def to_text(self) -> str:
        return _print(self.root)

    def is_constant(self) -> bool:
        return isinstance(self.root, Const)

    def __str__(self) -> str:
        return self.to_text()

    # Arithmetic builders

    def _lift(self, other: "ExprAST | float") -> "ExprAST":
        if isinstance(other, ExprAST):
            return other
        return ExprAST.constant(float(other), self.dim)

    def _combine(self, other: "ExprAST | float", fn: Callable[[Node, Node], Node]) -> "ExprAST":
        rhs = self._lift(other)
        return ExprAST(fn(self.root, rhs.root), max(self.dim, rhs.dim))

    def __add__(self, other: "ExprAST | float") -> "ExprAST":
        return self._combine(other, _add)

    def __radd__(self, other: float) -> "ExprAST":
        return self._lift(other)._combine(self, _add)

    def __sub__(self, other: "ExprAST | float") -> "ExprAST":
        return self._combine(other, _sub)

    def __rsub__(self, other: float) -> "ExprAST":
        return self._lift(other)._combine(self, _sub)

    def __mul__(self, other: "ExprAST | float") -> "ExprAST":
        return self._combine(other, _mul)

    def __rmul__(self, other: float) -> "ExprAST":
        return self._lift(other)._combine(self, _mul)

    def __truediv__(self, other: "ExprAST | float") -> "ExprAST":
        return self._combine(other, _div)

    def __rtruediv__(self, other: float) -> "ExprAST":
        return self._lift(other)._combine(self, _div)

    def __pow__(self, other: "ExprAST | float") -> "ExprAST":
        return self._combine(other, _pow)

    def __neg__(self) -> "ExprAST":
        return ExprAST(_neg(self.root), self.dim)


def apply(op: str, arg: ExprAST) -> ExprAST:
    """Apply a named unary function."""
    if op not in UNARY_OPS:
        raise SpecError(f"unknown function {op!r}")
    return ExprAST(_apply_unary(op, arg.root), arg.dim)


def where(cond: ExprAST, nonpos: ExprAST | float, pos: ExprAST | float) -> ExprAST:
    """``nonpos`` where ``cond <= 0``, ``pos`` elsewhere."""
    a = cond._lift(nonpos)
    b = cond._lift(pos)
    return ExprAST(_where(cond.root, a.root, b.root), max(cond.dim, a.dim, b.dim))


def _apply_unary(op: str, arg: Node) -> Node:
    if op == "neg":
        return _neg(arg)
    if isinstance(arg, Const) and op not in ("log", "sqrt", "sign"):
        with np.errstate(all="ignore"):
            value = float(UNARY_OPS[op](np.float64(arg.value)))
        if math.isfinite(value):
            return Const(value)
    return Unary(op, arg)


def _apply_binary(op: str, left: Node, right: Node) -> Node:
    match op:
        case "+":
            return _add(left, right)
        case "-":
            return _sub(left, right)
        case "*":
            return _mul(left, right)
        case "/":
            return _div(left, right)
        case "^":
            return _pow(left, right)
    raise SpecError(f"unknown operator {op!r}")


# ============================================
# Parsing
# ============================================

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[-+*/^(),]))"
)


@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    offset: int


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        match = _TOKEN_RE.match(text, pos)
        if match is None or match.end() == pos:
            start = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
            raise ExprSyntaxError(f"unexpected character {text[start]!r}", _byte_offset(text, start))
        kind = match.lastgroup or "op"
        start = match.start(kind)
        tokens.append(_Token(kind, match.group(kind), _byte_offset(text, start)))
        pos = match.end()
    tokens.append(_Token("eof", "", len(text.encode("utf-8"))))
    return tokens


def _byte_offset(text: str, index: int) -> int:
    return len(text[:index].encode("utf-8"))


class _Parser:
    def __init__(self, text: str, dim: int):
        self.tokens = _tokenize(text)
        self.pos = 0
        self.dim = dim

    @property
    def current(self) -> _Token:
        return self.tokens[self.pos]

    def advance(self) -> _Token:
        token = self.tokens[self.pos]
        self.pos += 1
        return token

    def expect(self, text: str) -> None:
        token = self.current
        if token.text != text or token.kind == "eof":
            found = "end of input" if token.kind == "eof" else repr(token.text)
            raise ExprSyntaxError(f"expected {text!r}, found {found}", token.offset)
        self.advance()

    def parse(self) -> Node:
        node = self.expr()
        if self.current.kind != "eof":
            raise ExprSyntaxError(f"unexpected {self.current.text!r}", self.current.offset)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.current.text in ("+", "-") and self.current.kind == "op":
            op = self.advance().text
            rhs = self.term()
            node = Binary(op, node, rhs)
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.current.text in ("*", "/") and self.current.kind == "op":
            op = self.advance().text
            rhs = self.unary()
            node = Binary(op, node, rhs)
        return node

    def unary(self) -> Node:
        if self.current.kind == "op" and self.current.text in ("-", "+"):
            op = self.advance().text
            operand = self.unary()
            return Unary("neg", operand) if op == "-" else operand
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self.current.kind == "op" and self.current.text in ("^", "**"):
            self.advance()
            return Binary("^", base, self.unary())
        return base

    def atom(self) -> Node:
        token = self.current
        if token.kind == "num":
            self.advance()
            return Const(float(token.text))
        if token.kind == "op" and token.text == "(":
            self.advance()
            node = self.expr()
            self.expect(")")
            return node
        if token.kind == "ident":
            self.advance()
            return self.identifier(token)
        found = "end of input" if token.kind == "eof" else repr(token.text)
        raise ExprSyntaxError(f"unexpected {found}", token.offset)

    def identifier(self, token: _Token) -> Node:
        name = token.text
        if self.current.text == "(" and self.current.kind == "op":
            self.advance()
            args = [self.expr()]
            while self.current.text == "," and self.current.kind == "op":
                self.advance()
                args.append(self.expr())
            self.expect(")")
            return self.call(name, args, token.offset)
        if name in CONSTANTS:
            return Const(CONSTANTS[name])
        var = re.fullmatch(r"x(\d+)", name)
        if var is None or int(var.group(1)) == 0:
            raise UnknownIdentifierError(f"unknown identifier {name!r}", token.offset)
        index = int(var.group(1)) - 1
        if index >= self.dim:
            raise VariableIndexError(
                f"variable {name} exceeds dimension {self.dim}", token.offset
            )
        return Var(index)

    def call(self, name: str, args: list[Node], offset: int) -> Node:
        arity = {"pow": 2, "where": 3}.get(name, 1 if name in UNARY_OPS else None)
        if arity is None or name == "neg":
            raise UnknownIdentifierError(f"unknown function {name!r}", offset)
        if len(args) != arity:
            raise ExprSyntaxError(f"{name} takes {arity} argument(s), got {len(args)}", offset)
        if name == "pow":
            return Binary("^", args[0], args[1])
        if name == "where":
            return Where(args[0], args[1], args[2])
        return Unary(name, args[0])


def parse_expr(text: str, dim: int) -> ExprAST:
    """
    Parse an expression over ``x1 .. x{dim}``.

    Args:
        text: Expression source
        dim: Number of chart coordinates

    Returns:
        ExprAST with standard precedence (``^`` binds tighter than unary minus)

    Raises:
        ExprSyntaxError: Malformed input, with byte offset
        UnknownIdentifierError: Name that is neither a variable, constant nor function
        VariableIndexError: ``xk`` with ``k > dim``
    """
    if dim < 1:
        raise SpecError(f"dimension must be positive, got {dim}")
    if not text or not text.strip():
        raise ExprSyntaxError("empty expression", 0)
    return ExprAST(_Parser(text, dim).parse(), dim)


# ============================================
# Printing
# ============================================


def _print(node: Node) -> str:
    match node:
        case Const(value=v):
            return repr(v) if v >= 0 else f"({v!r})"
        case Var(index=i):
            return f"x{i + 1}"
        case Unary(op="neg", arg=arg):
            return f"(-{_print(arg)})"
        case Unary(op=op, arg=arg):
            return f"{op}({_print(arg)})"
        case Binary(op=op, left=left, right=right):
            return f"({_print(left)} {op} {_print(right)})"
        case Where(cond=c, nonpos=a, pos=b):
            return f"where({_print(c)}, {_print(a)}, {_print(b)})"
    raise TypeError(f"unknown node {node!r}")


# ============================================
# Evaluation
# ============================================

_Result = tuple[np.ndarray, np.ndarray | None, Node | None]


class _Evaluation:
    """One memoized evaluation pass over a batch of points of shape (m, n)."""

    def __init__(self, coords: np.ndarray):
        self.coords = coords
        self.n = coords.shape[1]
        self.cache: dict[int, _Result] = {}

    def run(self, node: Node) -> _Result:
        key = id(node)
        cached = self.cache.get(key)
        if cached is None:
            cached = self._compute(node)
            self.cache[key] = cached
        return cached

    def _compute(self, node: Node) -> _Result:
        match node:
            case Const(value=v):
                return np.full(self.n, v), None, None
            case Var(index=i):
                if i >= self.coords.shape[0]:
                    raise SpecError(f"point has no coordinate x{i + 1}")
                return self.coords[i], None, None
            case Unary(op=op, arg=arg):
                value, bad, culprit = self.run(arg)
                with np.errstate(all="ignore"):
                    out = UNARY_OPS[op](value)
                fresh = ~np.isfinite(out)
                if op == "sign":
                    fresh = fresh | (value == 0)
                return self._merge(out, bad, culprit, fresh, node)
            case Binary(op=op, left=left, right=right):
                lv, lbad, lcul = self.run(left)
                rv, rbad, rcul = self.run(right)
                with np.errstate(all="ignore"):
                    match op:
                        case "+":
                            out = lv + rv
                        case "-":
                            out = lv - rv
                        case "*":
                            out = lv * rv
                        case "/":
                            out = lv / rv
                        case _:
                            out = np.power(lv, rv)
                fresh = ~np.isfinite(out)
                if op == "/":
                    fresh = fresh | (rv == 0)
                bad = _or(lbad, rbad)
                return self._merge(out, bad, lcul if lbad is not None and lbad.any() else rcul, fresh, node)
            case Where(cond=c, nonpos=a, pos=b):
                cv, cbad, ccul = self.run(c)
                av, abad, acul = self.run(a)
                bv, bbad, bcul = self.run(b)
                pick = cv <= 0
                out = np.where(pick, av, bv)
                bad = cbad
                culprit = ccul
                if abad is not None and (abad & pick).any():
                    bad = _or(bad, abad & pick)
                    culprit = culprit or acul
                if bbad is not None and (bbad & ~pick).any():
                    bad = _or(bad, bbad & ~pick)
                    culprit = culprit or bcul
                return out, bad, culprit
        raise TypeError(f"unknown node {node!r}")

    @staticmethod
    def _merge(
        out: np.ndarray,
        bad: np.ndarray | None,
        culprit: Node | None,
        fresh: np.ndarray,
        node: Node,
    ) -> _Result:
        if bad is not None:
            fresh = fresh & ~bad
        if fresh.any():
            return out, _or(bad, fresh), culprit or node
        return out, bad, culprit


def _or(a: np.ndarray | None, b: np.ndarray | None) -> np.ndarray | None:
    if a is None:
        return b
    if b is None:
        return a
    return a | b


def eval_expr(ast: ExprAST, p: np.ndarray | Sequence[float]) -> float | np.ndarray:
    """
    Evaluate at one point (shape ``(m,)``) or a batch (shape ``(n, m)``).

    Raises:
        ExprDomainError: Some selected node produced a non-finite value or divided by zero
        NonDifferentiableError: A ``sign`` node (from d|u|) was hit at ``u = 0``
    """
    arr = np.asarray(p, dtype=float)
    single = arr.ndim == 1
    batch = arr.reshape(1, -1) if single else arr
    if batch.shape[1] != ast.dim:
        raise SpecError(f"expected points of dimension {ast.dim}, got {batch.shape[1]}")
    value, bad, culprit = _Evaluation(batch.T).run(ast.root)
    if bad is not None and bad.any():
        text = _print(culprit) if culprit is not None else _print(ast.root)
        where_bad = batch[int(np.argmax(bad))]
        if isinstance(culprit, Unary) and culprit.op == "sign":
            raise NonDifferentiableError(f"non-differentiable at {where_bad.tolist()}", text)
        raise ExprDomainError(f"domain error at {where_bad.tolist()}", text)
    if single:
        return float(value[0])
    return value


# ============================================
# Differentiation
# ============================================


def diff_expr(ast: ExprAST, var: int) -> ExprAST:
    """
    Symbolic partial derivative with respect to ``x_{var+1}`` (``var`` is 0-based).

    ``d|u|`` becomes ``sign(u) * du``; evaluating it at ``u = 0`` raises
    :class:`NonDifferentiableError` instead of silently choosing a one-sided value.
    """
    if not 0 <= var < ast.dim:
        raise SpecError(f"variable index {var} outside dimension {ast.dim}")
    memo: dict[int, Node] = {}

    def d(node: Node) -> Node:
        key = id(node)
        if key in memo:
            return memo[key]
        out = _derivative(node, var, d)
        memo[key] = out
        return out

    return ExprAST(d(ast.root), ast.dim)


def _derivative(node: Node, var: int, d: Callable[[Node], Node]) -> Node:
    match node:
        case Const():
            return ZERO
        case Var(index=i):
            return ONE if i == var else ZERO
        case Unary(op=op, arg=u):
            du = d(u)
            if op == "sign":
                # flat almost everywhere; keep the node so u = 0 is still reported
                return Binary("*", ZERO, node)
            if _is_const(du, 0.0):
                return ZERO
            match op:
                case "neg":
                    return _neg(du)
                case "exp":
                    return _mul(node, du)
                case "log":
                    return _div(du, u)
                case "sin":
                    return _mul(Unary("cos", u), du)
                case "cos":
                    return _neg(_mul(Unary("sin", u), du))
                case "tan":
                    return _div(du, _pow(Unary("cos", u), Const(2.0)))
                case "tanh":
                    return _mul(_sub(ONE, _pow(node, Const(2.0))), du)
                case "sqrt":
                    return _div(du, _mul(Const(2.0), node))
                case "abs":
                    return _mul(Unary("sign", u), du)
        case Binary(op=op, left=a, right=b):
            da, db = d(a), d(b)
            match op:
                case "+":
                    return _add(da, db)
                case "-":
                    return _sub(da, db)
                case "*":
                    return _add(_mul(da, b), _mul(a, db))
                case "/":
                    return _div(_sub(_mul(da, b), _mul(a, db)), _pow(b, Const(2.0)))
                case "^":
                    if isinstance(b, Const):
                        return _mul(_mul(b, _pow(a, Const(b.value - 1.0))), da)
                    return _mul(
                        node,
                        _add(_mul(db, Unary("log", a)), _div(_mul(b, da), a)),
                    )
        case Where(cond=c, nonpos=a, pos=b):
            return _where(c, d(a), d(b))
    raise TypeError(f"cannot differentiate {node!r}")
