"""A tiny expression language over attribution schemes and neuron sets.

Examples::

    top(P_ms, 1%)
    inter(top(P_a, 1%), top(P_b, 1%))
    fuse(P_ms, N_ms)
    inter(P_*)            # every scheme whose name matches the glob

Inside ``inter`` (and at the top level) a scheme without an explicit ``top``
is cut at the evaluation's pruning level, so ``inter(F_*)`` evaluated at 1%
means the intersection of every fused scheme's top 1%.
"""

from __future__ import annotations

import fnmatch
import re
from dataclasses import dataclass
from typing import Union

from .conductance import AttributionScheme
from .schemes import NeuronSet, fuse, intersect, top_percent

_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+(?:\.\d*)?|\.\d+)\s*%|(?P<name>[A-Za-z_*][A-Za-z0-9_*.\-]*)|(?P<punct>[(),]))"
)


class ExprError(ValueError):
    def __init__(self, msg: str, pos: int):
        super().__init__(f"{msg} at position {pos}")
        self.pos = pos


@dataclass(frozen=True)
class Name:
    ident: str
    pos: int


@dataclass(frozen=True)
class Percent:
    value: float
    pos: int


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple
    pos: int


Node = Union[Name, Percent, Call]
FUNCTIONS = ("top", "inter", "fuse")


def _tokenize(text: str):
    pos = 0
    out = []
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            start = pos + len(text[pos:]) - len(text[pos:].lstrip())
            raise ExprError(f"unexpected character {text[start]!r}", start)
        start = m.start(m.lastgroup)
        out.append((m.lastgroup, m.group(m.lastgroup), start))
        pos = m.end()
    out.append(("end", "", len(text)))
    return out


class _Parser:
    def __init__(self, text):
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def take(self, kind, value=None):
        tok = self.peek()
        if tok[0] != kind or (value is not None and tok[1] != value):
            want = value or kind
            got = tok[1] or "end of input"
            raise ExprError(f"expected {want!r}, found {got!r}", tok[2])
        self.i += 1
        return tok

    def expr(self) -> Node:
        kind, val, pos = self.peek()
        if kind == "num":
            self.i += 1
            return Percent(float(val), pos)
        if kind != "name":
            raise ExprError(f"expected a name, found {val or 'end of input'!r}", pos)
        self.i += 1
        if self.peek()[0] == "punct" and self.peek()[1] == "(":
            if val not in FUNCTIONS:
                raise ExprError(f"unknown function {val!r}", pos)
            self.i += 1
            args = []
            if not (self.peek()[0] == "punct" and self.peek()[1] == ")"):
                args.append(self.expr())
                while self.peek()[0] == "punct" and self.peek()[1] == ",":
                    self.i += 1
                    args.append(self.expr())
            self.take("punct", ")")
            return Call(val, tuple(args), pos)
        return Name(val, pos)


def parse(text: str) -> Node:
    p = _Parser(text)
    node = p.expr()
    kind, val, pos = p.peek()
    if kind != "end":
        raise ExprError(f"unexpected {val!r}", pos)
    return node


def _lookup(node: Name, env: dict, allow_glob: bool):
    if "*" in node.ident:
        if not allow_glob:
            raise ExprError(f"glob {node.ident!r} only allowed as a function argument", node.pos)
        names = sorted(n for n in env if fnmatch.fnmatchcase(n, node.ident))
        if not names:
            raise ExprError(f"glob {node.ident!r} matches no scheme", node.pos)
        return [env[n] for n in names]
    if node.ident not in env:
        raise ExprError(f"unresolved identifier {node.ident!r}", node.pos)
    return [env[node.ident]]


def _as_set(value, level, pos) -> NeuronSet:
    if isinstance(value, NeuronSet):
        return value
    if level is None:
        raise ExprError("scheme used as a set without a pruning level", pos)
    return top_percent(value, level)


def _eval(node: Node, env: dict, level, allow_glob=False) -> list:
    if isinstance(node, Percent):
        raise ExprError("percentage only allowed as the second argument of top()", node.pos)
    if isinstance(node, Name):
        return _lookup(node, env, allow_glob)
    if node.func == "top":
        if not 1 <= len(node.args) <= 2:
            raise ExprError("top() takes a scheme and an optional percentage", node.pos)
        if len(node.args) == 2:
            if not isinstance(node.args[1], Percent):
                raise ExprError("second argument of top() must be a percentage", node.args[1].pos)
            lv = node.args[1].value
        elif level is None:
            raise ExprError("top() without a percentage needs an evaluation level", node.pos)
        else:
            lv = level
        (scheme,) = _single(node.args[0], env, level)
        if not isinstance(scheme, AttributionScheme):
            raise ExprError("top() needs a scheme, got a neuron set", node.args[0].pos)
        return [top_percent(scheme, lv, name=_render(node.args[0]))]
    values = []
    for a in node.args:
        values.extend((v, a.pos) for v in _eval(a, env, level, allow_glob=True))
    if node.func == "inter":
        if not values:
            raise ExprError("inter() needs arguments", node.pos)
        return [intersect([_as_set(v, level, p) for v, p in values])]
    # fuse
    for v, p in values:
        if not isinstance(v, AttributionScheme):
            raise ExprError("fuse() operands must be schemes", p)
    if len(values) < 2:
        raise ExprError("fuse() needs at least two schemes", node.pos)
    return [fuse([v for v, _ in values], name=_render(node))]


def _single(node, env, level):
    vals = _eval(node, env, level)
    if len(vals) != 1:
        raise ExprError("expected a single value", node.pos)
    return vals


def _render(node: Node) -> str:
    if isinstance(node, Name):
        return node.ident
    if isinstance(node, Percent):
        return f"{node.value:g}%"
    return f"{node.func}(" + ",".join(_render(a) for a in node.args) + ")"


def evaluate(text: str, env: dict, level: float | None = None):
    """Evaluate to an :class:`AttributionScheme` or a :class:`NeuronSet`."""
    (value,) = _single(parse(text), env, level)
    return value


def evaluate_set(text: str, env: dict, level: float | None = None) -> NeuronSet:
    """Evaluate and cut a resulting scheme at ``level``."""
    node = parse(text)
    (value,) = _single(node, env, level)
    s = _as_set(value, level, node.pos)
    return NeuronSet(text if level is None else f"{text} @{level:g}%", s.level if s.level is not None else level,
                     s.members, s.n_total, s.model_hash)
