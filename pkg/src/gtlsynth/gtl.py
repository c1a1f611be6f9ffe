"""Bounded graph temporal logic: AST, parser, horizons, and the trajectory monitor.

The formula language has node predicates (bare label names, ``label == name``,
and comparisons ``x >= c`` / ``x <= c`` / ``x == c`` against the state's
declared numeric value), boolean connectives ``!``, ``&``, ``|``, the bounded
temporal operators ``G[a,b]``, ``F[a,b]``, ``G<=k``, ``F<=k``, ``X``, and the
counting neighborhood operator ``E^N O{rho} ...`` where each ``O{rho}`` hop
follows edges whose label satisfies the edge predicate ``rho`` (``true`` or a
comparison on ``y``) at the current time.

Sugar is desugared at parse time: ``F<=k`` becomes ``F[0,k]``, ``G<=k``
becomes ``G[0,k]``, and a bare ``F``/``G`` is the identity window ``[0,0]``.
Interval bounds are inclusive at both ends. Precedence: unary operators bind
tighter than ``&``, which binds tighter than ``|``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass


class GtlError(ValueError):
    """Raised for parse errors and ill-posed evaluations."""


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Formula:
    pass


@dataclass(frozen=True)
class TrueF(Formula):
    pass


@dataclass(frozen=True)
class FalseF(Formula):
    pass


@dataclass(frozen=True)
class LabelProp(Formula):
    """Holds at (v,t) iff the state of node v at time t carries this label."""

    name: str


@dataclass(frozen=True)
class ValueProp(Formula):
    """Comparison against the node's declared state value, e.g. x >= 2."""

    op: str  # ">=", "<=", "=="
    bound: float


@dataclass(frozen=True)
class Not(Formula):
    sub: Formula


@dataclass(frozen=True)
class And(Formula):
    subs: tuple[Formula, ...]


@dataclass(frozen=True)
class Or(Formula):
    subs: tuple[Formula, ...]


@dataclass(frozen=True)
class Next(Formula):
    sub: Formula


@dataclass(frozen=True)
class Always(Formula):
    lo: int
    hi: int
    sub: Formula


@dataclass(frozen=True)
class Eventually(Formula):
    lo: int
    hi: int
    sub: Formula


@dataclass(frozen=True)
class EdgeProp:
    """Edge predicate inside O{...}: 'true' or a comparison on the edge label y."""

    op: str  # ">=", "<=", "==", "true"
    bound: float = 0.0

    def holds(self, y: float) -> bool:
        if self.op == "true":
            return True
        if self.op == ">=":
            return y >= self.bound
        if self.op == "<=":
            return y <= self.bound
        return y == self.bound


@dataclass(frozen=True)
class Exists(Formula):
    """At least `count` nodes reached through the O-chain satisfy `sub` now."""

    count: int
    chain: tuple[EdgeProp, ...]
    sub: Formula


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>-?\d+(?:\.\d+)?)|(?P<name>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>>=|<=|==|[\[\]{}(),^!&|]))"
)

_RESERVED = {"G", "F", "X", "E", "O", "label", "true", "false", "x", "y"}


def _tokenize(text: str) -> list[tuple[str, str]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            rest = text[pos:].strip()
            if not rest:
                break
            raise GtlError(f"cannot tokenize formula at: {rest[:20]!r}")
        pos = m.end()
        if m.group("num") is not None:
            tokens.append(("num", m.group("num")))
        elif m.group("name") is not None:
            tokens.append(("name", m.group("name")))
        else:
            tokens.append(("op", m.group("op")))
    return tokens


class _Parser:
    def __init__(self, tokens: list[tuple[str, str]]):
        self.tokens = tokens
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else (None, None)

    def take(self):
        tok = self.peek()
        self.pos += 1
        return tok

    def expect(self, kind, value=None):
        k, v = self.take()
        if k != kind or (value is not None and v != value):
            raise GtlError(f"expected {value or kind}, got {v!r}")
        return v

    # precedence: | < & < unary
    def formula(self) -> Formula:
        left = self.conjunction()
        subs = [left]
        while self.peek() == ("op", "|"):
            self.take()
            subs.append(self.conjunction())
        return Or(tuple(subs)) if len(subs) > 1 else left

    def conjunction(self) -> Formula:
        subs = [self.unary()]
        while self.peek() == ("op", "&"):
            self.take()
            subs.append(self.unary())
        return And(tuple(subs)) if len(subs) > 1 else subs[0]

    def unary(self) -> Formula:
        kind, value = self.peek()
        if (kind, value) == ("op", "!"):
            self.take()
            return Not(self.unary())
        if kind == "name" and value in ("G", "F"):
            self.take()
            lo, hi = self.bounds()
            sub = self.unary()
            return Always(lo, hi, sub) if value == "G" else Eventually(lo, hi, sub)
        if (kind, value) == ("name", "X"):
            self.take()
            return Next(self.unary())
        if (kind, value) == ("name", "E"):
            self.take()
            self.expect("op", "^")
            count = int(self.expect("num"))
            if count < 1:
                raise GtlError("E^N needs N >= 1")
            chain = []
            while self.peek() == ("name", "O"):
                self.take()
                self.expect("op", "{")
                chain.append(self.edge_prop())
                self.expect("op", "}")
            if not chain:
                chain = [EdgeProp("true")]
            return Exists(count, tuple(chain), self.unary())
        return self.atom()

    def bounds(self) -> tuple[int, int]:
        kind, value = self.peek()
        if (kind, value) == ("op", "["):
            self.take()
            lo = int(self.expect("num"))
            self.expect("op", ",")
            hi = int(self.expect("num"))
            self.expect("op", "]")
        elif (kind, value) == ("op", "<="):
            self.take()
            lo, hi = 0, int(self.expect("num"))
        else:
            lo = hi = 0  # bare F/G: identity window
        if lo < 0 or hi < lo:
            raise GtlError(f"bad interval [{lo},{hi}]")
        return lo, hi

    def edge_prop(self) -> EdgeProp:
        kind, value = self.take()
        if (kind, value) == ("name", "true"):
            return EdgeProp("true")
        if (kind, value) == ("name", "y"):
            op = self.expect("op")
            if op not in (">=", "<=", "=="):
                raise GtlError(f"bad edge comparison {op!r}")
            return EdgeProp(op, float(self.expect("num")))
        raise GtlError(f"bad edge predicate near {value!r}")

    def atom(self) -> Formula:
        kind, value = self.take()
        if (kind, value) == ("op", "("):
            f = self.formula()
            self.expect("op", ")")
            return f
        if kind != "name":
            raise GtlError(f"unexpected token {value!r}")
        if value == "true":
            return TrueF()
        if value == "false":
            return FalseF()
        if value == "label":
            self.expect("op", "==")
            return LabelProp(self.expect("name"))
        if value == "x":
            op = self.expect("op")
            if op not in (">=", "<=", "=="):
                raise GtlError(f"bad value comparison {op!r}")
            return ValueProp(op, float(self.expect("num")))
        if value in _RESERVED:
            raise GtlError(f"{value!r} is reserved and cannot be a label name")
        return LabelProp(value)


def parse_gtl(text: str) -> Formula:
    """Parse a formula string into its AST; raises GtlError on bad input."""
    parser = _Parser(_tokenize(text))
    f = parser.formula()
    if parser.pos != len(parser.tokens):
        _, value = parser.peek()
        raise GtlError(f"trailing input starting at {value!r}")
    return f


# ---------------------------------------------------------------------------
# Printing (canonical form; parse(format_formula(f)) == f)
# ---------------------------------------------------------------------------


def _fmt_num(c: float) -> str:
    return str(int(c)) if float(c).is_integer() else repr(c)


def format_formula(f: Formula) -> str:
    return _fmt(f, 0)


def _fmt(f: Formula, level: int) -> str:
    # level: 0 = or-context, 1 = and-context, 2 = unary-operand
    if isinstance(f, TrueF):
        return "true"
    if isinstance(f, FalseF):
        return "false"
    if isinstance(f, LabelProp):
        return f.name
    if isinstance(f, ValueProp):
        return f"(x {f.op} {_fmt_num(f.bound)})"
    if isinstance(f, Not):
        return "!" + _fmt(f.sub, 2)
    if isinstance(f, And):
        s = " & ".join(_fmt(g, 1) for g in f.subs)
        return f"({s})" if level >= 2 else s
    if isinstance(f, Or):
        s = " | ".join(_fmt(g, 0 if isinstance(g, Or) else 1) for g in f.subs)
        return f"({s})" if level >= 1 else s
    if isinstance(f, Next):
        return "X " + _fmt(f.sub, 2)
    if isinstance(f, Always):
        return f"G[{f.lo},{f.hi}] " + _fmt(f.sub, 2)
    if isinstance(f, Eventually):
        return f"F[{f.lo},{f.hi}] " + _fmt(f.sub, 2)
    if isinstance(f, Exists):
        chain = " ".join(
            "O{%s}" % ("true" if p.op == "true" else f"y {p.op} {_fmt_num(p.bound)}")
            for p in f.chain
        )
        return f"E^{f.count} {chain} " + _fmt(f.sub, 2)
    raise GtlError(f"unknown formula node {f!r}")


# ---------------------------------------------------------------------------
# Horizon
# ---------------------------------------------------------------------------


def horizon(f: Formula) -> int:
    """Least T such that satisfaction at time t is decided by indices t..t+T."""
    if isinstance(f, (TrueF, FalseF, LabelProp, ValueProp)):
        return 0
    if isinstance(f, Not):
        return horizon(f.sub)
    if isinstance(f, (And, Or)):
        return max(horizon(g) for g in f.subs)
    if isinstance(f, Next):
        return 1 + horizon(f.sub)
    if isinstance(f, (Always, Eventually)):
        return f.hi + horizon(f.sub)
    if isinstance(f, Exists):
        return horizon(f.sub)
    raise GtlError(f"unknown formula node {f!r}")


# ---------------------------------------------------------------------------
# Monitor semantics over graph trajectories
# ---------------------------------------------------------------------------
#
# A trajectory object must provide: .graph (AgentGraph), .horizon (last time
# index), .labels(v, t) -> set of label names, .value(v, t) -> float or None,
# .edge_label(u, v, t) -> float.


def neighbor_reach(graph, g, nodes, t: int, chain) -> set[int]:
    """Apply the chain of edge predicates: each hop keeps endpoints of edges
    whose label satisfies the predicate at time t."""
    if t < 0 or t > g.horizon:
        raise GtlError(f"time {t} outside trajectory 0..{g.horizon}")
    current = set(nodes)
    for prop in chain:
        nxt: set[int] = set()
        for u in current:
            for v in graph.neighbors(u):
                if prop.holds(g.edge_label(u, v, t)):
                    nxt.add(v)
        current = nxt
        if not current:
            break
    return current


def evaluate(g, v: int, t: int, f: Formula) -> bool:
    """Truth value of f at node v and time t on trajectory g.

    The trajectory must extend at least horizon(f) steps past t.
    """
    if t + horizon(f) > g.horizon:
        raise GtlError(
            f"trajectory of length {g.horizon + 1} too short for horizon "
            f"{horizon(f)} at t={t}"
        )
    return _eval(g, v, t, f)


def _eval(g, v: int, t: int, f: Formula) -> bool:
    if isinstance(f, TrueF):
        return True
    if isinstance(f, FalseF):
        return False
    if isinstance(f, LabelProp):
        return f.name in g.labels(v, t)
    if isinstance(f, ValueProp):
        x = g.value(v, t)
        if x is None:
            raise GtlError(f"state of node {v} at t={t} has no declared value")
        if f.op == ">=":
            return x >= f.bound
        if f.op == "<=":
            return x <= f.bound
        return x == f.bound
    if isinstance(f, Not):
        return not _eval(g, v, t, f.sub)
    if isinstance(f, And):
        return all(_eval(g, v, t, s) for s in f.subs)
    if isinstance(f, Or):
        return any(_eval(g, v, t, s) for s in f.subs)
    if isinstance(f, Next):
        return _eval(g, v, t + 1, f.sub)
    if isinstance(f, Eventually):
        return any(
            _eval(g, v, t + k, f.sub) for k in range(f.lo, f.hi + 1)
        )
    if isinstance(f, Always):
        return all(
            _eval(g, v, t + k, f.sub) for k in range(f.lo, f.hi + 1)
        )
    if isinstance(f, Exists):
        reached = neighbor_reach(g.graph, g, {v}, t, f.chain)
        hits = sum(1 for u in reached if _eval(g, u, t, f.sub))
        return hits >= f.count
    raise GtlError(f"unknown formula node {f!r}")
