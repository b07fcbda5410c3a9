"""Feasibility checking and model generation for path constraints.

Constraints of the shape ``(±x + c) cond k``, ``(±x + c1) cond (±y + c2)`` and
``±x ± y + c ==/!= 0`` are handled exactly: each symbol carries a set of
unsigned intervals over ``[0, 2**64)``, unary constraints are intersected into
it, and a depth-first search in symbol order picks the smallest-magnitude value
while forward-checking binary constraints. Other shapes are only verified on
candidate assignments drawn from a small pool, so they can yield ``Unknown``
but never a wrong ``Sat``.
"""

from __future__ import annotations

import bisect
import hashlib
import heapq
import itertools
import os
import random
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

from .symexpr import (MASK, Cmp, Const, Constraint, Expr, Sym, BinOp, UnboundSymbol,
                      constants, evaluate, symbols, to_signed, truth)

MOD = 1 << 64
HALF = 1 << 63
BUDGET = 10_000
AC_LIMIT = 512


# -- interval sets ----------------------------------------------------------

class IntervalSet:
    """Sorted, disjoint, inclusive unsigned intervals within ``[0, 2**64)``."""

    __slots__ = ("ivs",)

    def __init__(self, ivs: Iterable[tuple[int, int]] = ()):
        self.ivs = self._normalize(ivs)

    @staticmethod
    def _normalize(ivs):
        ivs = sorted((lo, hi) for lo, hi in ivs if lo <= hi)
        out: list[tuple[int, int]] = []
        for lo, hi in ivs:
            if out and lo <= out[-1][1] + 1:
                out[-1] = (out[-1][0], max(out[-1][1], hi))
            else:
                out.append((lo, hi))
        return tuple(out)

    @classmethod
    def full(cls) -> "IntervalSet":
        return cls([(0, MASK)])

    @classmethod
    def point(cls, v: int) -> "IntervalSet":
        v &= MASK
        return cls([(v, v)])

    @classmethod
    def signed(cls, lo: int, hi: int) -> "IntervalSet":
        """Signed range ``[lo, hi]`` mapped onto unsigned space."""
        if lo > hi:
            return cls()
        if lo >= 0:
            return cls([(lo, hi)])
        if hi < 0:
            return cls([(lo + MOD, hi + MOD)])
        return cls([(lo + MOD, MASK), (0, hi)])

    def __bool__(self):
        return bool(self.ivs)

    def __eq__(self, other):
        return isinstance(other, IntervalSet) and self.ivs == other.ivs

    def __repr__(self):
        return f"IntervalSet({[(hex(a), hex(b)) for a, b in self.ivs]})"

    def __contains__(self, v: int) -> bool:
        v &= MASK
        i = bisect.bisect_right(self.ivs, (v, MASK)) - 1
        return i >= 0 and self.ivs[i][0] <= v <= self.ivs[i][1]

    def size(self) -> int:
        return sum(hi - lo + 1 for lo, hi in self.ivs)

    def __and__(self, other: "IntervalSet") -> "IntervalSet":
        out = []
        i = j = 0
        a, b = self.ivs, other.ivs
        while i < len(a) and j < len(b):
            lo, hi = max(a[i][0], b[j][0]), min(a[i][1], b[j][1])
            if lo <= hi:
                out.append((lo, hi))
            if a[i][1] < b[j][1]:
                i += 1
            else:
                j += 1
        return IntervalSet(out)

    def __or__(self, other: "IntervalSet") -> "IntervalSet":
        return IntervalSet(self.ivs + other.ivs)

    def complement(self) -> "IntervalSet":
        out, prev = [], 0
        for lo, hi in self.ivs:
            if lo > prev:
                out.append((prev, lo - 1))
            prev = hi + 1
        if prev <= MASK:
            out.append((prev, MASK))
        return IntervalSet(out)

    def shift(self, d: int) -> "IntervalSet":
        """Image under ``v -> v + d (mod 2**64)``."""
        d &= MASK
        out = []
        for lo, hi in self.ivs:
            a, b = lo + d, hi + d
            if a > MASK:
                out.append((a - MOD, b - MOD))
            elif b > MASK:
                out += [(a, MASK), (0, b - MOD)]
            else:
                out.append((a, b))
        return IntervalSet(out)

    def negate(self) -> "IntervalSet":
        """Image under ``v -> -v (mod 2**64)``."""
        out = []
        for lo, hi in self.ivs:
            if lo == 0:
                out.append((0, 0))
                lo = 1
            if lo <= hi:
                out.append((MOD - hi, MOD - lo))
        return IntervalSet(out)

    def values(self) -> Iterator[int]:
        for lo, hi in self.ivs:
            yield from range(lo, hi + 1)

    def by_magnitude(self) -> Iterator[int]:
        """Members ordered by |signed value|, non-negative first on ties."""
        streams = []
        for lo, hi in IntervalSet.split_signed(self):
            streams.append(_magnitude_stream(lo, hi))
        for _, v in heapq.merge(*streams):
            yield v & MASK

    @staticmethod
    def split_signed(s: "IntervalSet") -> list[tuple[int, int]]:
        out = []
        for lo, hi in s.ivs:
            if hi < HALF:
                out.append((lo, hi))
            elif lo >= HALF:
                out.append((lo - MOD, hi - MOD))
            else:
                out += [(lo, HALF - 1), (HALF - MOD, hi - MOD)]
        return out


def magnitude_key(v: int) -> tuple[int, int]:
    s = to_signed(v)
    return (abs(s), int(s < 0))


def _magnitude_stream(lo: int, hi: int) -> Iterator[tuple[tuple[int, int], int]]:
    # signed interval [lo, hi], yielded in magnitude_key order
    if lo >= 0:
        for v in range(lo, hi + 1):
            yield (v, 0), v
    elif hi < 0:
        for v in range(hi, lo - 1, -1):
            yield (-v, 1), v
    else:
        yield (0, 0), 0
        for m in itertools.count(1):
            if m > hi and -m < lo:
                return
            if m <= hi:
                yield (m, 0), m
            if -m >= lo:
                yield (m, 1), -m


def cond_set(cond: str, k: int, var_on_left: bool) -> IntervalSet:
    """Values ``w`` with ``w cond k`` (or ``k cond w`` when the variable is on the right)."""
    ku = k & MASK
    ks = to_signed(k)
    if cond == "eq":
        return IntervalSet.point(ku)
    if cond == "ne":
        return IntervalSet.point(ku).complement()
    if var_on_left:
        if cond == "ult":
            return IntervalSet([(0, ku - 1)]) if ku else IntervalSet()
        if cond == "ule":
            return IntervalSet([(0, ku)])
        if cond == "slt":
            return IntervalSet.signed(-HALF, ks - 1)
        if cond == "sle":
            return IntervalSet.signed(-HALF, ks)
    else:
        if cond == "ult":
            return IntervalSet([(ku + 1, MASK)]) if ku < MASK else IntervalSet()
        if cond == "ule":
            return IntervalSet([(ku, MASK)])
        if cond == "slt":
            return IntervalSet.signed(ks + 1, HALF - 1)
        if cond == "sle":
            return IntervalSet.signed(ks, HALF - 1)
    raise ValueError(cond)


# -- linear forms -----------------------------------------------------------

Linear = tuple[dict[str, int], int]


def linearize(e: Expr) -> Linear | None:
    """``e`` as ``sum(coef * sym) + const`` mod 2**64, or None if not linear."""
    if isinstance(e, Const):
        return {}, e.value
    if isinstance(e, Sym):
        return {e.name: 1}, 0
    if isinstance(e, BinOp) and e.op in ("add", "sub", "mul"):
        a, b = linearize(e.lhs), linearize(e.rhs)
        if a is None or b is None:
            return None
        if e.op == "mul":
            if a[0] and b[0]:
                return None
            (terms, c), k = (a, b[1]) if not b[0] else (b, a[1])
            return _clean({s: v * k for s, v in terms.items()}), (c * k) & MASK
        sign = 1 if e.op == "add" else -1
        terms = dict(a[0])
        for s, v in b[0].items():
            terms[s] = terms.get(s, 0) + sign * v
        return _clean(terms), (a[1] + sign * b[1]) & MASK
    return None


def _clean(terms: dict[str, int]) -> dict[str, int]:
    return {s: v & MASK for s, v in terms.items() if v & MASK}


@dataclass
class LinearConstraint:
    """``lhs cond rhs`` with each symbol occurring once, coefficient ±1."""
    cond: str
    lhs: Linear
    rhs: Linear
    syms: tuple[str, ...]

    def allowed(self, var: str, env: dict[str, int]) -> IntervalSet:
        """Exact set of values for ``var`` given values for the other symbol(s)."""
        on_left = var in self.lhs[0]
        side, other = (self.lhs, self.rhs) if on_left else (self.rhs, self.lhs)
        coef = side[0][var]
        c = side[1] + sum(v * env[s] for s, v in side[0].items() if s != var)
        k = other[1] + sum(v * env[s] for s, v in other[0].items())
        w = cond_set(self.cond, k, on_left)
        if coef == 1:
            return w.shift(-c)
        return w.negate().shift(c)


def as_linear(e: Expr) -> LinearConstraint | None:
    e = truth(e)
    if not isinstance(e, Cmp):
        return None
    l, r = linearize(e.lhs), linearize(e.rhs)
    if l is None or r is None:
        return None
    if e.cond in ("eq", "ne"):
        terms = dict(l[0])
        for s, v in r[0].items():
            terms[s] = terms.get(s, 0) - v
        l, r = (_clean(terms), (l[1] - r[1]) & MASK), ({}, 0)
    elif set(l[0]) & set(r[0]):
        return None
    syms = tuple(sorted(set(l[0]) | set(r[0])))
    if not 1 <= len(syms) <= 2:
        return None
    if any(v not in (1, MASK) for v in itertools.chain(l[0].values(), r[0].values())):
        return None
    return LinearConstraint(e.cond, l, r, syms)


# -- models and outcomes ----------------------------------------------------

@dataclass(frozen=True)
class Model:
    assignment: dict[str, int] = field(default_factory=dict)
    buffers: dict[str, bytes] = field(default_factory=dict)

    def value(self, name: str, default: int = 0) -> int:
        return self.assignment.get(name, default)

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.assignment):
            h.update(f"{k}={self.assignment[k]};".encode())
        for k in sorted(self.buffers):
            h.update(f"{k}:{self.buffers[k].hex()};".encode())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class Sat:
    model: Model


@dataclass(frozen=True)
class Unsat:
    pass


@dataclass(frozen=True)
class Unknown:
    reason: str


SolveOutcome = Sat | Unsat | Unknown


def eval_expr(e: Expr, m: Model) -> int:
    """Concrete value of ``e`` under ``m``; raises UnboundSymbol for missing symbols."""
    return evaluate(e, m.assignment)


def check_model(constraints: Sequence[Constraint], m: Model) -> bool:
    return all(eval_expr(c.expr, m) != 0 for c in constraints)


class _OutOfBudget(Exception):
    pass


def _seed() -> int:
    return int(os.environ.get("MALVERSE_SEED", "0"))


def _symbol_order(syms: Iterable[Sym]) -> list[str]:
    origin: dict[str, int] = {}
    for s in syms:
        o = -1 if s.origin is None else s.origin
        origin[s.name] = min(origin.get(s.name, o), o)
    return sorted(origin, key=lambda n: (origin[n], n))


def solve(constraints: Sequence[Constraint], budget: int = BUDGET) -> SolveOutcome:
    """Decide a conjunction of constraints; Sat models are minimal-magnitude in symbol order."""
    if not constraints:
        return Sat(Model())
    all_syms: set[Sym] = set()
    for c in constraints:
        all_syms |= symbols(c.expr)
    order = _symbol_order(all_syms)
    index = {n: i for i, n in enumerate(order)}

    domains = {n: IntervalSet.full() for n in order}
    binaries: list[LinearConstraint] = []
    opaque: list[Constraint] = []
    for c in constraints:
        lin = as_linear(c.expr)
        if lin is None:
            opaque.append(c)
        elif len(lin.syms) == 1:
            v = lin.syms[0]
            domains[v] = domains[v] & lin.allowed(v, {})
            if not domains[v]:
                return Unsat()
        else:
            binaries.append(lin)

    if not _propagate(domains, binaries):
        return Unsat()

    opaque_syms = {s.name for c in opaque for s in symbols(c.expr)}
    pool = _candidate_pool(constraints)
    # constraints checked by evaluation once their last symbol (in order) is fixed
    check_at: dict[int, list[Constraint]] = {}
    for c in constraints:
        last = max(index[s.name] for s in symbols(c.expr))
        check_at.setdefault(last, []).append(c)
    touching: dict[str, list[LinearConstraint]] = {n: [] for n in order}
    for b in binaries:
        for s in b.syms:
            touching[s].append(b)

    complete = True
    counter = [0]

    def candidates(name: str, dom: IntervalSet) -> Iterator[int]:
        nonlocal complete
        if name not in opaque_syms:
            return dom.by_magnitude()
        complete = False
        preferred = [v for v in pool if v in dom]
        seen = set(preferred)
        return itertools.chain(preferred, (v for v in dom.by_magnitude() if v not in seen))

    def dfs(i: int, doms: dict[str, IntervalSet], env: dict[str, int]) -> dict[str, int] | None:
        if i == len(order):
            return dict(env)
        name = order[i]
        for v in candidates(name, doms[name]):
            counter[0] += 1
            if counter[0] > budget:
                raise _OutOfBudget
            env[name] = v
            try:
                ok = all(evaluate(c.expr, env) != 0 for c in check_at.get(i, ()))
            except UnboundSymbol:
                ok = False
            if ok:
                new = dict(doms)
                for b in touching[name]:
                    other = b.syms[0] if b.syms[1] == name else b.syms[1]
                    if index[other] > i:
                        new[other] = new[other] & b.allowed(other, env)
                        if not new[other]:
                            ok = False
                            break
                if ok:
                    r = dfs(i + 1, new, env)
                    if r is not None:
                        return r
            del env[name]
        return None

    try:
        found = dfs(0, domains, {})
    except _OutOfBudget:
        return Unknown(f"candidate budget of {budget} evaluations exhausted")
    if found is None:
        if complete and not opaque:
            return Unsat()
        return Unknown("no candidate satisfied the non-linear constraints")
    m = Model(found)
    assert check_model(constraints, m), "solver produced a non-satisfying model"
    return Sat(m)


def _propagate(domains: dict[str, IntervalSet], binaries: list[LinearConstraint]) -> bool:
    """Arc consistency over binary constraints for small domains; False if a domain empties."""
    changed = True
    rounds = 0
    while changed and rounds < 32:
        changed = False
        rounds += 1
        for b in binaries:
            for x, y in (b.syms, b.syms[::-1]):
                dx, dy = domains[x], domains[y]
                if dx.size() > AC_LIMIT:
                    continue
                kept = [v for v in dx.values() if b.allowed(y, {x: v}) & dy]
                new = IntervalSet((v, v) for v in kept)
                if new != dx:
                    domains[x] = new
                    changed = True
                    if not new:
                        return False
    return True


def _candidate_pool(constraints: Sequence[Constraint]) -> list[int]:
    consts: set[int] = set()
    for c in constraints:
        consts |= constants(c.expr)
    base = {0, 1, MASK}
    for k in consts:
        base |= {k, (k + 1) & MASK, (k - 1) & MASK}
    rng = random.Random(_seed())
    draws = [rng.getrandbits(64) for _ in range(64)]
    return sorted(base, key=magnitude_key) + [d for d in draws if d not in base]


# -- concretization ---------------------------------------------------------

BUFFER_FILL = 0x41


@dataclass(frozen=True)
class ConcreteInvocation:
    seq: int
    callee: str
    ret: int
    kind: str = "scalar"
    buffer: bytes | None = None
    # comparator whose concrete result is induced by a preloaded buffer: (buffer seq, literal)
    induced_by: int | None = None

    @property
    def signed_ret(self) -> int:
        return to_signed(self.ret)

    def key(self):
        """What two paths must agree on for this invocation to match."""
        return (self.callee, self.ret, self.buffer)


def _compare_bytes(a: bytes, b: bytes) -> int:
    return (a > b) - (a < b)


def _comparator_links(path) -> dict[int, tuple[int, bytes]]:
    """Comparator seq -> (buffer invocation seq, literal bytes) for buffer-vs-literal calls."""
    regions = {}
    for r in path.history:
        if r.buffer_sym is not None and isinstance(r.ret, Const):
            regions[r.ret.value] = r.seq
    links = {}
    for r in path.history:
        if r.kind != "comparator" or len(r.args) < 2:
            continue
        a, b = r.args[0], r.args[1]
        for x, y in ((a, b), (b, a)):
            if isinstance(x, Const) and x.value in regions and isinstance(y, Const) \
                    and y.value not in regions:
                lit = path.read_cstring(y.value)
                if lit is not None:
                    links[r.seq] = (regions[x.value], lit)
                    break
    return links


def complete_model(path, m: Model) -> Model:
    """Add concrete bytes for every buffer symbol on ``path``.

    A comparator pinned to 0 that compares a stub buffer with a string literal
    makes the buffer hold the literal plus terminator. Pinned to another value,
    the buffer keeps 0x41 fill unless that fill compares with the wrong sign.
    Otherwise the buffer's first word comes from the model (or the fill).
    """
    buffers = dict(m.buffers)
    links = _comparator_links(path)
    by_seq = {r.seq: r for r in path.history}
    for cseq, (bseq, lit) in links.items():
        rec = by_seq[bseq]
        want = to_signed(m.value(by_seq[cseq].ret_sym or "", 0))
        if want == 0:
            data = lit
        else:
            data = bytes([BUFFER_FILL]) * max(1, len(lit))
            sign = _compare_bytes(data, lit)
            if want > 0 and sign <= 0:
                data = b"\x7e" * max(1, len(lit))
            elif want < 0 and sign >= 0:
                data = b""
        buffers.setdefault(rec.buffer_sym, data + b"\0")
    for r in path.history:
        if r.buffer_sym is None or r.buffer_sym in buffers:
            continue
        if r.buffer_sym in m.assignment:
            word = m.assignment[r.buffer_sym].to_bytes(8, "little")
            buffers[r.buffer_sym] = word.split(b"\0", 1)[0] + b"\0"
        else:
            buffers[r.buffer_sym] = bytes([BUFFER_FILL]) * 8 + b"\0"
    return Model(dict(m.assignment), buffers)


def concretize_history(path, m: Model) -> list[ConcreteInvocation]:
    """Concrete return (and buffer bytes) for each invocation on ``path``.

    Symbols that never entered a constraint are absent from ``m`` and take 0.
    """
    m = complete_model(path, m)
    links = _comparator_links(path)
    out = []
    for r in path.history:
        if r.ret_sym is not None:
            ret = m.value(r.ret_sym, 0)
        else:
            ret = eval_expr(r.ret, m)
        buf = m.buffers.get(r.buffer_sym) if r.buffer_sym else None
        induced = links[r.seq][0] if r.seq in links else None
        if induced is not None and to_signed(ret) not in (-1, 0, 1):
            induced = None  # not reproducible by a real comparison; keep a schedule
        out.append(ConcreteInvocation(r.seq, r.callee, ret, str(r.kind.value), buf, induced))
    return out


def model_for(path) -> SolveOutcome:
    """Solve ``path``'s constraints and fill in buffer contents."""
    out = solve(path.constraints)
    if isinstance(out, Sat):
        return Sat(complete_model(path, out.model))
    return out
