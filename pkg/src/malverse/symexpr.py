"""Immutable 64-bit bitvector expression trees and path constraints."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Union

MASK = (1 << 64) - 1
SIGN = 1 << 63


def to_signed(v: int) -> int:
    v &= MASK
    return v - (1 << 64) if v & SIGN else v


@dataclass(frozen=True)
class Const:
    value: int

    def __post_init__(self):
        object.__setattr__(self, "value", self.value & MASK)


@dataclass(frozen=True)
class Sym:
    name: str
    origin: int | None = None  # invocation seq that produced it; None = initial state


@dataclass(frozen=True)
class BinOp:
    op: str
    lhs: "Expr"
    rhs: "Expr"


@dataclass(frozen=True)
class Cmp:
    cond: str
    lhs: "Expr"
    rhs: "Expr"


@dataclass(frozen=True)
class Ite:
    cond: "Expr"
    then: "Expr"
    else_: "Expr"


Expr = Union[Const, Sym, BinOp, Cmp, Ite]


def apply_binop(op: str, a: int, b: int) -> int:
    if op == "add":
        r = a + b
    elif op == "sub":
        r = a - b
    elif op == "mul":
        r = a * b
    elif op == "and":
        r = a & b
    elif op == "or":
        r = a | b
    elif op == "xor":
        r = a ^ b
    else:
        raise ValueError(f"unknown op {op}")
    return r & MASK


def apply_cmp(cond: str, a: int, b: int) -> int:
    a &= MASK
    b &= MASK
    if cond == "eq":
        r = a == b
    elif cond == "ne":
        r = a != b
    elif cond == "ult":
        r = a < b
    elif cond == "ule":
        r = a <= b
    elif cond == "slt":
        r = to_signed(a) < to_signed(b)
    elif cond == "sle":
        r = to_signed(a) <= to_signed(b)
    else:
        raise ValueError(f"unknown condition {cond}")
    return int(r)


# -- folding constructors ---------------------------------------------------

def binop(op: str, a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(apply_binop(op, a.value, b.value))
    if op in ("add", "sub", "or", "xor") and isinstance(b, Const) and b.value == 0:
        return a
    if op in ("add", "or", "xor") and isinstance(a, Const) and a.value == 0:
        return b
    return BinOp(op, a, b)


def cmp(cond: str, a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(apply_cmp(cond, a.value, b.value))
    return Cmp(cond, a, b)


def ite(c: Expr, t: Expr, e: Expr) -> Expr:
    if isinstance(c, Const):
        return t if c.value else e
    return Ite(c, t, e)


_NEGATED = {"eq": ("ne", False), "ne": ("eq", False),
            "slt": ("sle", True), "sle": ("slt", True),
            "ult": ("ule", True), "ule": ("ult", True)}


def truth(e: Expr) -> Expr:
    """An expression that is non-zero exactly when ``e`` is non-zero, in comparison form."""
    if isinstance(e, (Cmp, Const)):
        return e
    return cmp("ne", e, Const(0))


def negate(e: Expr) -> Expr:
    """An expression that is non-zero exactly when ``e`` is zero."""
    if isinstance(e, Const):
        return Const(int(e.value == 0))
    if isinstance(e, Cmp):
        cond, swap = _NEGATED[e.cond]
        return Cmp(cond, e.rhs, e.lhs) if swap else Cmp(cond, e.lhs, e.rhs)
    return cmp("eq", e, Const(0))


# -- queries ----------------------------------------------------------------

def symbols(e: Expr) -> set[Sym]:
    out: set[Sym] = set()
    stack = [e]
    while stack:
        n = stack.pop()
        if isinstance(n, Sym):
            out.add(n)
        elif isinstance(n, (BinOp, Cmp)):
            stack += [n.lhs, n.rhs]
        elif isinstance(n, Ite):
            stack += [n.cond, n.then, n.else_]
    return out


def constants(e: Expr) -> set[int]:
    out: set[int] = set()
    stack = [e]
    while stack:
        n = stack.pop()
        if isinstance(n, Const):
            out.add(n.value)
        elif isinstance(n, (BinOp, Cmp)):
            stack += [n.lhs, n.rhs]
        elif isinstance(n, Ite):
            stack += [n.cond, n.then, n.else_]
    return out


class UnboundSymbol(KeyError):
    pass


def evaluate(e: Expr, env: Mapping[str, int]) -> int:
    """Concrete 64-bit value of ``e`` with symbols looked up by name."""
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Sym):
        try:
            return env[e.name] & MASK
        except KeyError:
            raise UnboundSymbol(e.name) from None
    if isinstance(e, BinOp):
        return apply_binop(e.op, evaluate(e.lhs, env), evaluate(e.rhs, env))
    if isinstance(e, Cmp):
        return apply_cmp(e.cond, evaluate(e.lhs, env), evaluate(e.rhs, env))
    if isinstance(e, Ite):
        return evaluate(e.then if evaluate(e.cond, env) else e.else_, env)
    raise TypeError(e)


_INFIX = {"add": "+", "sub": "-", "mul": "*", "and": "&", "or": "|", "xor": "^"}
_CMP = {"eq": "==", "ne": "!=", "slt": "<s", "sle": "<=s", "ult": "<u", "ule": "<=u"}


def render(e: Expr, top: bool = True) -> str:
    if isinstance(e, Const):
        return str(to_signed(e.value))
    if isinstance(e, Sym):
        return e.name
    if isinstance(e, BinOp):
        s = f"{render(e.lhs, False)} {_INFIX[e.op]} {render(e.rhs, False)}"
    elif isinstance(e, Cmp):
        s = f"{render(e.lhs, False)} {_CMP[e.cond]} {render(e.rhs, False)}"
    else:
        s = f"{render(e.cond, False)} ? {render(e.then, False)} : {render(e.else_, False)}"
    return s if top else f"({s})"


@dataclass(frozen=True)
class Constraint:
    """A path condition conjunct: ``expr`` must evaluate non-zero."""
    expr: Expr

    def __str__(self):
        return render(self.expr)


def make_constraint(e: Expr) -> Constraint | bool:
    """Build a constraint, folding symbol-free expressions to True/False."""
    e = truth(e)
    if isinstance(e, Const):
        return e.value != 0
    return Constraint(e)
