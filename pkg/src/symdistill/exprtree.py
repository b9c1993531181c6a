"""Symbolic update-rule expressions over lagged optimization features.

An expression is an immutable tree of :class:`Op`, :class:`Var` and
:class:`Const` nodes. Variables reference a feature stream at a lag
(``g[0]`` is the current gradient, ``mhat[3]`` the Adam-type feature three
steps back). Infix grammar::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := '-' unary | primary
    primary := NUMBER | NAME '[' INT ']' | FUNC '(' expr (',' expr)? ')'
             | '(' expr ')'

``FUNC`` is one of ``sq sqrt_s exp tanh asinh sinh relu erfc`` (unary) or
``pow_s`` (binary); ``add sub mul div`` are also accepted in call form.
A minus directly before a number yields a negative constant; before
anything else it yields ``-1*operand``.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from . import kernels

DEFAULT_HORIZON = 20

# name -> (arity, opcode)
OPERATORS = {
    "add": (2, kernels.OP_ADD),
    "sub": (2, kernels.OP_SUB),
    "mul": (2, kernels.OP_MUL),
    "div": (2, kernels.OP_DIV),
    "pow_s": (2, kernels.OP_POW),
    "square": (1, kernels.OP_SQUARE),
    "sqrt_s": (1, kernels.OP_SQRT),
    "exp": (1, kernels.OP_EXP),
    "tanh": (1, kernels.OP_TANH),
    "asinh": (1, kernels.OP_ASINH),
    "sinh": (1, kernels.OP_SINH),
    "relu": (1, kernels.OP_RELU),
    "erfc": (1, kernels.OP_ERFC),
}
UNARY_OPS = tuple(k for k, (a, _) in OPERATORS.items() if a == 1)
BINARY_OPS = tuple(k for k, (a, _) in OPERATORS.items() if a == 2)
HYPERBOLIC_OPS = frozenset({"tanh", "asinh", "sinh", "erfc"})

_TEXT_NAME = {"square": "sq"}
_TEXT_ALIASES = {"sq": "square", "square": "square"}
_INFIX = {"add": "+", "sub": "-", "mul": "*", "div": "/"}
_PREC = {"add": 1, "sub": 1, "mul": 2, "div": 2}


class ExprError(ValueError):
    """Malformed expression tree."""


class ParseError(ExprError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class MissingInputError(KeyError):
    """The feature window lacks a stream or lag the expression reads."""


class NonFiniteError(ArithmeticError):
    """Gradient requested at a point where the expression is not finite."""


@dataclass(frozen=True)
class Const:
    value: float

    def __post_init__(self):
        object.__setattr__(self, "value", float(self.value))


@dataclass(frozen=True)
class Var:
    stream: str
    lag: int


@dataclass(frozen=True)
class Op:
    kind: str
    children: tuple

    def __post_init__(self):
        if self.kind not in OPERATORS:
            raise ExprError(f"unknown operator {self.kind!r}")
        arity = OPERATORS[self.kind][0]
        if len(self.children) != arity:
            raise ExprError(f"{self.kind} takes {arity} operand(s), got {len(self.children)}")


Node = Op | Var | Const


def iter_nodes(node: Node) -> Iterator[Node]:
    """Preorder traversal."""
    stack = [node]
    while stack:
        cur = stack.pop()
        yield cur
        if isinstance(cur, Op):
            stack.extend(reversed(cur.children))


def iter_paths(node: Node, prefix: tuple = ()) -> Iterator[tuple[tuple, Node]]:
    yield prefix, node
    if isinstance(node, Op):
        for i, child in enumerate(node.children):
            yield from iter_paths(child, prefix + (i,))


def node_at(node: Node, path: Sequence[int]) -> Node:
    for i in path:
        node = node.children[i]
    return node


def replace_at(node: Node, path: Sequence[int], new: Node) -> Node:
    if not path:
        return new
    head, rest = path[0], path[1:]
    children = list(node.children)
    children[head] = replace_at(children[head], rest, new)
    return Op(node.kind, tuple(children))


def node_count(node: Node) -> int:
    return sum(1 for _ in iter_nodes(node))


def depth(node: Node) -> int:
    if isinstance(node, Op):
        return 1 + max(depth(c) for c in node.children)
    return 1


@dataclass(frozen=True)
class Program:
    """Postfix layout consumed by :mod:`symdistill.kernels`."""

    codes: np.ndarray
    args: np.ndarray
    left: np.ndarray
    right: np.ndarray
    consts: np.ndarray
    streams: tuple
    horizon: int

    @property
    def n_cols(self) -> int:
        return len(self.streams) * self.horizon

    def _consts(self, consts):
        if consts is None:
            return self.consts
        consts = np.ascontiguousarray(consts, dtype=np.float64)
        if consts.shape != self.consts.shape:
            raise ValueError(f"expected {self.consts.shape[0]} constants, got {consts.shape}")
        return consts

    def eval(self, X: np.ndarray, consts=None) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        return kernels.eval_program(self.codes, self.args, self.left, self.right,
                                    self._consts(consts), X)

    def grad(self, X: np.ndarray, consts=None):
        """Returns ``(values, d_consts, d_inputs)`` for every row of ``X``."""
        X = np.ascontiguousarray(X, dtype=np.float64)
        return kernels.grad_program(self.codes, self.args, self.left, self.right,
                                    self._consts(consts), X, self.n_cols)


@dataclass(frozen=True)
class Expression:
    root: Node
    horizon: int = DEFAULT_HORIZON
    _cache: dict = field(default_factory=dict, compare=False, repr=False, hash=False)

    def __post_init__(self):
        for node in iter_nodes(self.root):
            if isinstance(node, Var):
                if not 0 <= node.lag < self.horizon:
                    raise ExprError(f"lag {node.lag} of {node.stream!r} outside [0, {self.horizon})")
            elif not isinstance(node, (Op, Const)):
                raise ExprError(f"not an expression node: {node!r}")

    @property
    def constants(self) -> tuple:
        """Constant leaf values, left to right."""
        return tuple(n.value for n in iter_nodes(self.root) if isinstance(n, Const))

    @property
    def variables(self) -> tuple:
        return tuple(sorted({(n.stream, n.lag) for n in iter_nodes(self.root) if isinstance(n, Var)}))

    @property
    def streams(self) -> tuple:
        return tuple(sorted({n.stream for n in iter_nodes(self.root) if isinstance(n, Var)}))

    @property
    def operators(self) -> frozenset:
        return frozenset(n.kind for n in iter_nodes(self.root) if isinstance(n, Op))

    @property
    def size(self) -> int:
        return node_count(self.root)

    def with_constants(self, values: Sequence[float]) -> "Expression":
        values = [float(v) for v in values]
        if len(values) != len(self.constants):
            raise ValueError(f"expected {len(self.constants)} constants, got {len(values)}")
        it = iter(values)

        def rebuild(node):
            if isinstance(node, Const):
                return Const(next(it))
            if isinstance(node, Op):
                return Op(node.kind, tuple(rebuild(c) for c in node.children))
            return node

        return Expression(rebuild(self.root), self.horizon)

    def compile(self, streams: Sequence[str] | None = None) -> Program:
        """Lower to a postfix program; data column = stream_index*horizon + lag."""
        streams = tuple(streams) if streams is not None else self.streams
        key = streams
        prog = self._cache.get(key)
        if prog is not None:
            return prog
        index = {s: i for i, s in enumerate(streams)}
        codes, args, left, right, consts = [], [], [], [], []

        def emit(node):
            if isinstance(node, Const):
                codes.append(kernels.OP_CONST)
                args.append(len(consts))
                consts.append(node.value)
                left.append(-1)
                right.append(-1)
            elif isinstance(node, Var):
                if node.stream not in index:
                    raise MissingInputError(node.stream)
                codes.append(kernels.OP_VAR)
                args.append(index[node.stream] * self.horizon + node.lag)
                left.append(-1)
                right.append(-1)
            else:
                kids = [emit(c) for c in node.children]
                codes.append(OPERATORS[node.kind][1])
                args.append(-1)
                left.append(kids[0])
                right.append(kids[1] if len(kids) > 1 else -1)
            return len(codes) - 1

        emit(self.root)
        as_int = lambda xs: np.asarray(xs, dtype=np.int64)
        prog = Program(as_int(codes), as_int(args), as_int(left), as_int(right),
                       np.asarray(consts, dtype=np.float64), streams, self.horizon)
        self._cache[key] = prog
        return prog

    def __str__(self):
        return render(self)


# --------------------------------------------------------------------------
# feature windows and single-point evaluation
# --------------------------------------------------------------------------

class FeatureWindow:
    """Per-stream histories of the last ``horizon`` values, newest at lag 0."""

    def __init__(self, values: Mapping[str, Sequence[float]] | None = None,
                 horizon: int = DEFAULT_HORIZON):
        self.horizon = horizon
        self.values = {}
        for name, seq in (values or {}).items():
            arr = np.asarray(seq, dtype=np.float64).ravel()
            if arr.shape[0] > horizon:
                raise ValueError(f"stream {name!r} has {arr.shape[0]} values, horizon is {horizon}")
            self.values[name] = arr

    def push(self, **latest: float) -> None:
        for name, value in latest.items():
            old = self.values.get(name, np.empty(0))
            self.values[name] = np.concatenate([[float(value)], old])[: self.horizon]

    def row(self, expr: Expression, streams: Sequence[str]) -> np.ndarray:
        for stream, lag in expr.variables:
            arr = self.values.get(stream)
            if arr is None:
                raise MissingInputError(f"stream {stream!r} not in window")
            if lag >= arr.shape[0]:
                raise MissingInputError(f"lag {lag} of stream {stream!r} not in window")
        out = np.zeros((1, len(streams) * expr.horizon))
        for i, s in enumerate(streams):
            arr = self.values[s]
            n = min(arr.shape[0], expr.horizon)
            out[0, i * expr.horizon: i * expr.horizon + n] = arr[:n]
        return out


def evaluate(expr: Expression, window: FeatureWindow) -> float:
    streams = expr.streams
    return float(expr.compile(streams).eval(window.row(expr, streams))[0])


def _grad_at(expr, window):
    streams = expr.streams
    prog = expr.compile(streams)
    y, dc, dx = prog.grad(window.row(expr, streams))
    if not np.isfinite(y[0]):
        raise NonFiniteError(f"expression is not finite at this window ({y[0]})")
    return streams, dc[0], dx[0]


def grad_constants(expr: Expression, window: FeatureWindow) -> np.ndarray:
    """d output / d constant_j, constants ordered as ``expr.constants``."""
    return _grad_at(expr, window)[1]


def grad_inputs(expr: Expression, window: FeatureWindow) -> dict:
    """d output / d window entry, as ``{stream: array over lags 0..horizon-1}``."""
    streams, _, dx = _grad_at(expr, window)
    T = expr.horizon
    return {s: dx[i * T:(i + 1) * T].copy() for i, s in enumerate(streams)}


# --------------------------------------------------------------------------
# complexity
# --------------------------------------------------------------------------

def complexity(expr: Expression | Node, operator_weight: int = 0, variable_weight: int = 0) -> int:
    """Node count, plus optional weights on distinct operator kinds and variables."""
    root = expr.root if isinstance(expr, Expression) else expr
    nodes = list(iter_nodes(root))
    score = len(nodes)
    if operator_weight:
        score += operator_weight * len({n.kind for n in nodes if isinstance(n, Op)})
    if variable_weight:
        score += variable_weight * len({(n.stream, n.lag) for n in nodes if isinstance(n, Var)})
    return int(score)


# --------------------------------------------------------------------------
# text forms
# --------------------------------------------------------------------------

def format_number(value: float) -> str:
    if math.isfinite(value) and value == int(value) and abs(value) < 1e15:
        text = str(int(value))
        if value == 0 and math.copysign(1.0, value) < 0:
            text = "-0"
        return text
    return repr(float(value))


def _render(node: Node) -> tuple[str, int]:
    if isinstance(node, Const):
        return format_number(node.value), 3
    if isinstance(node, Var):
        return f"{node.stream}[{node.lag}]", 3
    if node.kind in _INFIX:
        p = _PREC[node.kind]
        (ls, lp), (rs, rp) = _render(node.children[0]), _render(node.children[1])
        if lp < p:
            ls = f"({ls})"
        if rp <= p:
            rs = f"({rs})"
        sym = _INFIX[node.kind]
        joined = f"{ls} {sym} {rs}" if p == 1 else f"{ls}{sym}{rs}"
        return joined, p
    name = _TEXT_NAME.get(node.kind, node.kind)
    inner = ", ".join(_render(c)[0] for c in node.children)
    return f"{name}({inner})", 3


def render(expr: Expression | Node) -> str:
    root = expr.root if isinstance(expr, Expression) else expr
    return _render(root)[0]


_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z0-9_]*)|(?P<sym>[-+*/()\[\],]))"
)


def _tokenize(text: str):
    pos, tokens = 0, []
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            bad = len(text) - len(text[pos:].lstrip())
            raise ParseError(f"unexpected character {text[bad]!r}", bad)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, horizon: int):
        self.tokens = _tokenize(text)
        self.i = 0
        self.horizon = horizon

    def peek(self):
        return self.tokens[self.i]

    def take(self, value=None):
        tok = self.tokens[self.i]
        if value is not None and tok[1] != value:
            raise ParseError(f"expected {value!r}, found {tok[1] or 'end of input'!r}", tok[2])
        self.i += 1
        return tok

    def parse(self) -> Node:
        node = self.expr()
        tok = self.peek()
        if tok[0] != "end":
            raise ParseError(f"unexpected {tok[1]!r}", tok[2])
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-"):
            op = "add" if self.take()[1] == "+" else "sub"
            node = Op(op, (node, self.term()))
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/"):
            op = "mul" if self.take()[1] == "*" else "div"
            node = Op(op, (node, self.unary()))
        return node

    def unary(self):
        if self.peek()[1] == "-":
            self.take()
            if self.peek()[0] == "num":
                return Const(-float(self.take()[1]))
            if self.peek()[1] in ("inf", "nan"):
                return Const(-float(self.take()[1]))
            return Op("mul", (Const(-1.0), self.unary()))
        return self.primary()

    def primary(self):
        kind, value, pos = self.peek()
        if kind == "num":
            self.take()
            return Const(float(value))
        if value == "(":
            self.take()
            node = self.expr()
            self.take(")")
            return node
        if kind != "name":
            raise ParseError(f"unexpected {value or 'end of input'!r}", pos)
        self.take()
        nxt = self.peek()[1]
        if nxt == "[":
            self.take()
            lag_tok = self.take()
            if lag_tok[0] != "num" or not lag_tok[1].isdigit():
                raise ParseError("lag must be a non-negative integer", lag_tok[2])
            lag = int(lag_tok[1])
            if lag >= self.horizon:
                raise ParseError(f"lag {lag} >= horizon {self.horizon}", lag_tok[2])
            self.take("]")
            return Var(value, lag)
        if nxt == "(":
            name = _TEXT_ALIASES.get(value, value)
            if name not in OPERATORS:
                raise ParseError(f"unknown operator {value!r}", pos)
            self.take()
            args = [self.expr()]
            while self.peek()[1] == ",":
                self.take()
                args.append(self.expr())
            self.take(")")
            arity = OPERATORS[name][0]
            if len(args) != arity:
                raise ParseError(f"{value} takes {arity} argument(s), got {len(args)}", pos)
            return Op(name, tuple(args))
        if value in ("inf", "nan"):
            return Const(float(value))
        raise ParseError(f"bare name {value!r}: variables need a lag, e.g. {value}[0]", pos)


def parse(text: str, horizon: int = DEFAULT_HORIZON) -> Expression:
    return Expression(_Parser(text, horizon).parse(), horizon)


def to_sexpr(expr: Expression | Node) -> str:
    root = expr.root if isinstance(expr, Expression) else expr

    def go(node):
        if isinstance(node, Const):
            return format_number(node.value)
        if isinstance(node, Var):
            return f"{node.stream}[{node.lag}]"
        return "(" + " ".join([node.kind] + [go(c) for c in node.children]) + ")"

    return go(root)


_SEXPR_TOKEN = re.compile(r"\s*(\(|\)|[^\s()]+)")
_VAR_TOKEN = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)\[(\d+)\]$")


def parse_sexpr(text: str, horizon: int = DEFAULT_HORIZON) -> Expression:
    tokens = []
    pos = 0
    while pos < len(text) and text[pos:].strip():
        m = _SEXPR_TOKEN.match(text, pos)
        tokens.append((m.group(1), m.start(1)))
        pos = m.end()
    it = iter(tokens + [("", len(text))])

    def go(tok):
        value, where = tok
        if value == "(":
            name, npos = next(it)
            if name not in OPERATORS:
                raise ParseError(f"unknown operator {name!r}", npos)
            kids = []
            while True:
                nxt = next(it)
                if nxt[0] == ")":
                    break
                if nxt[0] == "":
                    raise ParseError("unclosed '('", nxt[1])
                kids.append(go(nxt))
            if len(kids) != OPERATORS[name][0]:
                raise ParseError(f"{name} takes {OPERATORS[name][0]} operand(s)", npos)
            return Op(name, tuple(kids))
        m = _VAR_TOKEN.match(value)
        if m:
            lag = int(m.group(2))
            if lag >= horizon:
                raise ParseError(f"lag {lag} >= horizon {horizon}", where)
            return Var(m.group(1), lag)
        try:
            return Const(float(value))
        except ValueError:
            raise ParseError(f"bad token {value!r}", where) from None

    root = go(next(it))
    rest = next(it)
    if rest[0] != "":
        raise ParseError(f"trailing {rest[0]!r}", rest[1])
    return Expression(root, horizon)


# --------------------------------------------------------------------------
# rewriting helpers
# --------------------------------------------------------------------------

def substitute(expr: Expression, var_fn: Callable[[Var], Node]) -> Expression:
    def go(node):
        if isinstance(node, Var):
            return var_fn(node)
        if isinstance(node, Op):
            return Op(node.kind, tuple(go(c) for c in node.children))
        return node

    return Expression(go(expr.root), expr.horizon)


def _fold(node: Node) -> Node:
    if not isinstance(node, Op):
        return node
    kids = tuple(_fold(c) for c in node.children)
    node = Op(node.kind, kids)
    if all(isinstance(c, Const) for c in kids):
        prog = Expression(node).compile(())
        value = float(prog.eval(np.zeros((1, 0)))[0])
        if math.isfinite(value):
            return Const(value)
        return node
    if node.kind == "div" and isinstance(kids[1], Const) and kids[1].value != 0:
        return _fold(Op("mul", (Const(1.0 / kids[1].value), kids[0])))
    if node.kind == "mul":
        a, b = kids
        if isinstance(b, Const) and not isinstance(a, Const):
            a, b = b, a
        if isinstance(a, Const):
            if a.value == 1.0:
                return b
            if isinstance(b, Op) and b.kind == "mul":
                inner_a, inner_b = b.children
                if isinstance(inner_a, Const):
                    return _fold(Op("mul", (Const(a.value * inner_a.value), inner_b)))
                if isinstance(inner_b, Const):
                    return _fold(Op("mul", (Const(a.value * inner_b.value), inner_a)))
            return Op("mul", (a, b))
    return node


def fold_constants(expr: Expression) -> Expression:
    """Collapse constant subtrees and chains of constant factors."""
    return Expression(_fold(expr.root), expr.horizon)


def rescale_variables(expr: Expression, scales: Mapping[str, float], out_scale: float = 1.0) -> Expression:
    """Rewrite an expression over ``v/scale[v]`` inputs into raw-input units.

    Every variable ``s[k]`` becomes ``(1/scales[s])*s[k]`` and the output is
    multiplied by ``out_scale``; constant factors are then folded.
    """
    def swap(v):
        return Op("mul", (Const(1.0 / float(scales[v.stream])), v))

    out = substitute(expr, swap)
    if out_scale != 1.0:
        out = Expression(Op("mul", (Const(float(out_scale)), out.root)), out.horizon)
    return fold_constants(out)
