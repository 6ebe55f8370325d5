"""Signal temporal logic over time-sampled signals.

Grammar (whitespace insensitive)::

    formula  := disj
    disj     := conj ("|" conj)*
    conj     := until ("&" until)*
    until    := unary ("U[" num "," num "]" unary)?
    unary    := "!" unary | "F[" num "," num "]" unary
              | "G[" num "," num "]" unary | atom
    atom     := "true" | "false" | "(" formula ")" | pred
    pred     := expr (">" | "<") expr
    expr     := term (("+" | "-") term)*
    term     := factor ("*" factor)*
    factor   := num | "y[" int "]" | "-" factor | "(" expr ")"
              | ("abs" | "min" | "max") "(" expr ("," expr)* ")"

Robustness uses the standard quantitative semantics with windows taken over
the sample timestamps that fall inside [t + a, t + b]; no interpolation.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

__all__ = [
    "StlSyntaxError",
    "UnboundCoordinate",
    "EmptyWindow",
    "Signal",
    "Const",
    "Coord",
    "Neg",
    "BinOp",
    "Call",
    "Predicate",
    "TrueF",
    "FalseF",
    "Not",
    "And",
    "Or",
    "Eventually",
    "Always",
    "Until",
    "parse",
    "robustness",
    "robustness_batch",
]

TIME_EPS = 1e-9


class StlSyntaxError(SyntaxError):
    def __init__(self, msg, pos):
        super().__init__(f"{msg} at position {pos}")
        self.pos = pos


class UnboundCoordinate(IndexError):
    pass


class EmptyWindow(ValueError):
    pass


@dataclass(frozen=True)
class Signal:
    times: np.ndarray
    values: np.ndarray  # (T, o)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if times.ndim != 1 or values.shape[0] != times.shape[0] or values.shape[1] < 1:
            raise ValueError("times must be 1-D and values must have shape (len(times), o)")
        if np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)


# --- expression nodes -------------------------------------------------------


def _fmt(v):
    return repr(float(v))


@dataclass(frozen=True)
class Const:
    value: float

    def eval(self, y):
        return np.full(y.shape[:-1], self.value)

    def __str__(self):
        return _fmt(self.value)


@dataclass(frozen=True)
class Coord:
    index: int

    def eval(self, y):
        if self.index >= y.shape[-1]:
            raise UnboundCoordinate(f"y[{self.index}] but the signal has {y.shape[-1]} coordinates")
        return y[..., self.index]

    def __str__(self):
        return f"y[{self.index}]"


@dataclass(frozen=True)
class Neg:
    arg: object

    def eval(self, y):
        return -self.arg.eval(y)

    def __str__(self):
        return f"(-{self.arg})"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: object
    right: object

    def eval(self, y):
        a, b = self.left.eval(y), self.right.eval(y)
        if self.op == "+":
            return a + b
        if self.op == "-":
            return a - b
        return a * b

    def __str__(self):
        return f"({self.left} {self.op} {self.right})"


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple

    def eval(self, y):
        vals = [arg.eval(y) for arg in self.args]
        if self.name == "abs":
            return np.abs(vals[0])
        red = np.minimum if self.name == "min" else np.maximum
        out = vals[0]
        for v in vals[1:]:
            out = red(out, v)
        return out

    def __str__(self):
        return f"{self.name}({', '.join(str(a) for a in self.args)})"


# --- formula nodes ----------------------------------------------------------


@dataclass(frozen=True)
class Predicate:
    left: object
    op: str  # ">" or "<"
    right: object

    def __str__(self):
        return f"({self.left} {self.op} {self.right})"


@dataclass(frozen=True)
class TrueF:
    def __str__(self):
        return "true"


@dataclass(frozen=True)
class FalseF:
    def __str__(self):
        return "false"


@dataclass(frozen=True)
class Not:
    arg: object

    def __str__(self):
        return f"!{_wrap(self.arg)}"


@dataclass(frozen=True)
class And:
    left: object
    right: object

    def __str__(self):
        return f"({self.left} & {self.right})"


@dataclass(frozen=True)
class Or:
    left: object
    right: object

    def __str__(self):
        return f"({self.left} | {self.right})"


@dataclass(frozen=True)
class Eventually:
    a: float
    b: float
    arg: object

    def __str__(self):
        return f"F[{_fmt(self.a)},{_fmt(self.b)}] {_wrap(self.arg)}"


@dataclass(frozen=True)
class Always:
    a: float
    b: float
    arg: object

    def __str__(self):
        return f"G[{_fmt(self.a)},{_fmt(self.b)}] {_wrap(self.arg)}"


@dataclass(frozen=True)
class Until:
    a: float
    b: float
    left: object
    right: object

    def __str__(self):
        return f"({_wrap(self.left)} U[{_fmt(self.a)},{_fmt(self.b)}] {_wrap(self.right)})"


def _wrap(node):
    s = str(node)
    return s if s.startswith("(") or isinstance(node, (TrueF, FalseF)) else f"({s})"


# --- parser -----------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+(?:\.\d*)?(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<temporal>[FGU]\[)"
    r"|(?P<coord>y\[)"
    r"|(?P<name>true|false|abs|min|max)\b"
    r"|(?P<op>[()\[\],!&|<>+\-*]))"
)


def _tokenize(text):
    tokens = []
    pos = 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            raise StlSyntaxError(f"unexpected character {text[pos:].lstrip()[:1]!r}", pos)
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text):
        self.tokens = _tokenize(text)
        self.i = 0

    @property
    def tok(self):
        return self.tokens[self.i]

    def take(self, value=None, kind=None):
        k, v, pos = self.tok
        if (value is not None and v != value) or (kind is not None and k != kind):
            want = value if value is not None else kind
            raise StlSyntaxError(f"expected {want!r}, found {v or 'end of input'!r}", pos)
        self.i += 1
        return v

    def at(self, value):
        return self.tok[1] == value

    def formula(self):
        node = self.conj()
        while self.at("|"):
            self.take("|")
            node = Or(node, self.conj())
        return node

    def conj(self):
        node = self.until()
        while self.at("&"):
            self.take("&")
            node = And(node, self.until())
        return node

    def until(self):
        node = self.unary()
        if self.at("U["):
            self.take("U[")
            a, b = self.interval()
            node = Until(a, b, node, self.unary())
        return node

    def interval(self):
        pos = self.tok[2]
        a = self.number()
        self.take(",")
        b = self.number()
        self.take("]")
        if not 0 <= a <= b:
            raise StlSyntaxError(f"invalid interval [{a}, {b}]", pos)
        return a, b

    def number(self):
        sign = 1.0
        if self.at("-"):
            self.take("-")
            sign = -1.0
        return sign * float(self.take(kind="num"))

    def unary(self):
        if self.at("!"):
            self.take("!")
            return Not(self.unary())
        for op, cls in (("F[", Eventually), ("G[", Always)):
            if self.at(op):
                self.take(op)
                a, b = self.interval()
                return cls(a, b, self.unary())
        return self.atom()

    def atom(self):
        if self.at("true"):
            self.take()
            return TrueF()
        if self.at("false"):
            self.take()
            return FalseF()
        if self.at("("):
            # "(" opens either a sub-formula or an arithmetic expression.
            saved = self.i
            try:
                self.take("(")
                node = self.formula()
                self.take(")")
                if self.tok[1] not in ("<", ">", "+", "-", "*"):
                    return node
            except StlSyntaxError:
                pass
            self.i = saved
        return self.predicate()

    def predicate(self):
        left = self.expr()
        k, v, pos = self.tok
        if v not in ("<", ">"):
            raise StlSyntaxError(f"expected '<' or '>', found {v or 'end of input'!r}", pos)
        self.take()
        return Predicate(left, v, self.expr())

    def expr(self):
        node = self.term()
        while self.tok[1] in ("+", "-"):
            op = self.take()
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.factor()
        while self.at("*"):
            self.take("*")
            node = BinOp("*", node, self.factor())
        return node

    def factor(self):
        k, v, pos = self.tok
        if k == "num":
            self.take()
            return Const(float(v))
        if v == "-":
            self.take()
            if self.tok[0] == "num":
                return Const(-float(self.take()))
            return Neg(self.factor())
        if k == "coord":
            self.take()
            idx = self.take(kind="num")
            self.take("]")
            if not idx.isdigit():
                raise StlSyntaxError("coordinate index must be a non-negative integer", pos)
            return Coord(int(idx))
        if v in ("abs", "min", "max"):
            self.take()
            self.take("(")
            args = [self.expr()]
            while self.at(","):
                self.take(",")
                args.append(self.expr())
            self.take(")")
            if v == "abs" and len(args) != 1:
                raise StlSyntaxError("abs takes exactly one argument", pos)
            return Call(v, tuple(args))
        if v == "(":
            self.take()
            node = self.expr()
            self.take(")")
            return node
        raise StlSyntaxError(f"unexpected token {v or 'end of input'!r}", pos)


def parse(text: str):
    """Parse a formula string into an immutable AST."""
    p = _Parser(text)
    node = p.formula()
    if p.tok[0] != "end":
        raise StlSyntaxError(f"unexpected trailing input {p.tok[1]!r}", p.tok[2])
    return node


# --- semantics --------------------------------------------------------------


def _window(times, i, a, b):
    t = times[i]
    lo = np.searchsorted(times, t + a - TIME_EPS, side="left")
    hi = np.searchsorted(times, t + b + TIME_EPS, side="right")
    if lo >= hi:
        raise EmptyWindow(f"no samples in [{t + a}, {t + b}]")
    return lo, hi


def _eval(node, values, times, idx):
    """Robustness of ``node`` at sample indices ``idx``; returns (B, len(idx))."""
    B = values.shape[0]
    if isinstance(node, Predicate):
        y = values[:, idx, :]
        lhs, rhs = node.left.eval(y), node.right.eval(y)
        return lhs - rhs if node.op == ">" else rhs - lhs
    if isinstance(node, TrueF):
        return np.full((B, len(idx)), np.inf)
    if isinstance(node, FalseF):
        return np.full((B, len(idx)), -np.inf)
    if isinstance(node, Not):
        return -_eval(node.arg, values, times, idx)
    if isinstance(node, (And, Or)):
        red = np.minimum if isinstance(node, And) else np.maximum
        return red(_eval(node.left, values, times, idx), _eval(node.right, values, times, idx))
    if isinstance(node, (Eventually, Always)):
        windows = [_window(times, i, node.a, node.b) for i in idx]
        lo = min(w[0] for w in windows)
        hi = max(w[1] for w in windows)
        inner = _eval(node.arg, values, times, np.arange(lo, hi))
        red = np.max if isinstance(node, Eventually) else np.min
        out = np.empty((B, len(idx)))
        for k, (wlo, whi) in enumerate(windows):
            out[:, k] = red(inner[:, wlo - lo:whi - lo], axis=1)
        return out
    if isinstance(node, Until):
        windows = [_window(times, i, node.a, node.b) for i in idx]
        start = min(min(idx), min(w[0] for w in windows))
        hi = max(w[1] for w in windows)
        span = np.arange(start, hi)
        left = _eval(node.left, values, times, span)
        right = _eval(node.right, values, times, span)
        out = np.empty((B, len(idx)))
        for k, (i, (wlo, whi)) in enumerate(zip(idx, windows)):
            # running min of the left operand from t to each t' in the window
            run = np.minimum.accumulate(left[:, i - start:whi - start], axis=1)
            cand = np.minimum(right[:, wlo - start:whi - start], run[:, wlo - i:])
            out[:, k] = np.max(cand, axis=1)
        return out
    raise TypeError(f"not a formula node: {node!r}")


def robustness_batch(phi, times, values, t: float = 0.0) -> np.ndarray:
    """Robustness of ``phi`` at time ``t`` for a batch of signals.

    ``values`` has shape (B, T, o) and shares ``times`` across the batch.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.ndim != 3 or values.shape[1] != times.shape[0]:
        raise ValueError("values must have shape (B, len(times), o)")
    hits = np.flatnonzero(np.abs(times - t) <= TIME_EPS)
    if hits.size == 0:
        raise ValueError(f"t = {t} is not a sample timestamp")
    return _eval(phi, values, times, hits[:1])[:, 0]


def robustness(phi, y: Signal, t: float = 0.0) -> float:
    return float(robustness_batch(phi, y.times, y.values[None], t)[0])
