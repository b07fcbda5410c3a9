"""Breadth-first symbolic execution of one function with every callee stubbed.

Each call in the explored function is replaced by a stub that records an
:class:`InvocationRecord` and returns a fresh symbol (scalar and comparator
stubs) or the address of a fresh region holding a symbolic buffer (buffer
stubs). Branches on symbolic conditions fork the state; each child is kept
only if its extended path condition is not proven unsatisfiable.
"""

from __future__ import annotations

import enum
import hashlib
import json
from collections import deque
from dataclasses import dataclass, field

from . import ir
from .callgraph import AnalysisAnchors, CallGraph, anchors_for
from .prototypes import StubDescriptor, StubKind, StubRegistry
from .solver import Unsat, solve, Sat
from .symexpr import (Const, Constraint, Expr, Sym, binop, cmp, evaluate,
                      make_constraint, negate, render, truth, symbols)

BUFFER_BASE = 0x2000_0000
BUFFER_REGION = 256
EVADE_SITE = "<evade>"


class Status(str, enum.Enum):
    RUNNING = "running"
    REACHED_EXIT = "reached_exit"
    DEADEND = "deadend"
    EVADED = "evaded"


class NotInternal(Exception):
    pass


class SymbolicMemoryError(Exception):
    pass


@dataclass(frozen=True)
class Limits:
    max_states: int = 4096
    max_steps: int = 100_000
    # restrict every scalar stub return to a signed range (used by enumeration oracles)
    return_range: tuple[int, int] | None = None


@dataclass(frozen=True)
class InvocationRecord:
    seq: int
    callee: str
    callsite: str
    args: tuple[Expr, ...]
    ret: Expr
    kind: StubKind = StubKind.SCALAR
    buffer_sym: str | None = None

    @property
    def ret_sym(self) -> str | None:
        return self.ret.name if isinstance(self.ret, Sym) else None


@dataclass
class PathState:
    function: str
    block: str
    index: int = 0
    registers: dict[str, Expr] = field(default_factory=dict)
    memory: dict[int, tuple[Expr, int]] = field(default_factory=dict)  # addr -> (value, width)
    constraints: list[Constraint] = field(default_factory=list)
    history: list[InvocationRecord] = field(default_factory=list)
    marks: list[str] = field(default_factory=list)
    status: Status = Status.RUNNING
    exit_site: str | None = None
    ret_value: Expr | None = None
    steps: int = 0
    next_region: int = 0
    notes: list[str] = field(default_factory=list)

    def fork(self) -> "PathState":
        # expressions are immutable; only containers need copying
        return PathState(self.function, self.block, self.index, dict(self.registers),
                         dict(self.memory), list(self.constraints), list(self.history),
                         list(self.marks), self.status, self.exit_site, self.ret_value,
                         self.steps, self.next_region, list(self.notes))

    @property
    def pc(self) -> tuple[str, str, int]:
        return self.function, self.block, self.index

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps([self.status.value, self.exit_site,
                             [str(c) for c in self.constraints],
                             [(r.seq, r.callee, r.callsite) for r in self.history],
                             self.marks]).encode())
        return h.hexdigest()[:16]

    # -- memory ----------------------------------------------------------

    def store(self, addr: int, value: Expr, width: int = 8) -> None:
        for a in [a for a, (_, w) in self.memory.items() if a < addr + width and addr < a + w]:
            old, w = self.memory.pop(a)
            if not isinstance(old, Const):
                continue  # a partially overwritten symbolic cell is dropped
            for i in range(w):
                b = a + i
                if not addr <= b < addr + width:
                    self.memory[b] = (Const((old.value >> (8 * i)) & 0xFF), 1)
        self.memory[addr] = (value, width)

    def load(self, addr: int, width: int = 8) -> Expr:
        cell = self.memory.get(addr)
        if cell is not None and cell[1] == width:
            return cell[0]
        value = 0
        for i in range(width):
            byte = self.load_byte(addr + i)
            value |= byte << (8 * i)
        return Const(value)

    def load_byte(self, addr: int) -> int:
        for a, (v, w) in self.memory.items():
            if a <= addr < a + w:
                if not isinstance(v, Const):
                    raise SymbolicMemoryError(f"partial read of symbolic cell at {a:#x}")
                return (v.value >> (8 * (addr - a))) & 0xFF
        return 0

    def read_cstring(self, addr: int, limit: int = 4096) -> bytes | None:
        """Concrete NUL-terminated bytes at ``addr``, or None if any byte is symbolic."""
        out = bytearray()
        try:
            for i in range(limit):
                b = self.load_byte(addr + i)
                if b == 0:
                    return bytes(out)
                out.append(b)
        except SymbolicMemoryError:
            return None
        return bytes(out)


@dataclass
class PathSet:
    paths: list[PathState]
    truncated: bool = False
    dropped: int = 0

    def __iter__(self):
        return iter(self.paths)

    def __len__(self):
        return len(self.paths)

    def by_status(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for p in self.paths:
            out[p.status.value] = out.get(p.status.value, 0) + 1
        return dict(sorted(out.items()))


def site(function: str, block: str, index: int) -> str:
    return f"{function}:{block}:{index}"


def invoke_stub(state: PathState, desc: StubDescriptor, args: list[Expr],
                callsite: str = "", return_range: tuple[int, int] | None = None) -> Expr:
    """Record an invocation on ``state`` and return the stub's symbolic result."""
    desc.check_args(len(args))
    seq = len(state.history)
    base = f"{desc.name}_{seq}"
    buffer_sym = None
    if desc.kind is StubKind.BUFFER:
        addr = BUFFER_BASE + state.next_region * BUFFER_REGION
        state.next_region += 1
        buffer_sym = f"{base}_buf"
        state.store(addr, Sym(buffer_sym, seq))
        ret: Expr = Const(addr)
    else:
        ret = Sym(base, seq)
        if return_range is not None:
            lo, hi = return_range
            state.constraints.append(Constraint(cmp("sle", Const(lo), ret)))
            state.constraints.append(Constraint(cmp("sle", ret, Const(hi))))
    state.history.append(InvocationRecord(seq, desc.name, callsite, tuple(args), ret,
                                          desc.kind, buffer_sym))
    return ret


class _Explorer:
    def __init__(self, p: ir.Program, anchors: AnalysisAnchors, stubs: StubRegistry, limits: Limits):
        self.p = p
        self.fn = p.function(anchors.entry)
        self.exits = set(anchors.exits)
        self.stubs = stubs
        self.limits = limits
        self.strings = p.string_addresses()
        self.created = 1
        self.truncated = False
        self.dropped = 0

    def initial(self) -> PathState:
        st = PathState(self.fn.name, self.fn.entry.label)
        for r in self.fn.params:
            st.registers[r] = Sym(r)
        return st

    def run(self) -> PathSet:
        queue = deque([self.initial()])
        done: list[PathState] = []
        while queue:
            st = queue.popleft()
            children = self.advance(st)
            for c in children:
                if c.status is Status.RUNNING:
                    queue.append(c)
                else:
                    done.append(c)
        done.sort(key=PathState.fingerprint)
        return PathSet(done, self.truncated, self.dropped)

    def reg(self, st: PathState, r: str) -> Expr:
        try:
            return st.registers[r]
        except KeyError:
            raise ir.ParseError(f"register {r!r} read before write in {st.function}") from None

    def concrete_addr(self, st: PathState, e: Expr) -> int | None:
        if isinstance(e, Const):
            return e.value
        out = solve(st.constraints)
        if not isinstance(out, Sat):
            return None
        m = out.model
        env = {s.name: m.value(s.name) for s in symbols(e)}
        v = evaluate(e, env)
        c = make_constraint(cmp("eq", e, Const(v)))
        if isinstance(c, Constraint):
            st.constraints.append(c)
        st.notes.append(f"address {render(e)} concretized to {v:#x}")
        return v

    def advance(self, st: PathState) -> list[PathState]:
        """Run ``st`` until it terminates or forks; returns the resulting states."""
        while True:
            if st.steps >= self.limits.max_steps:
                self.truncated = True
                self.dropped += 1
                return []
            st.steps += 1
            block = self.fn.block(st.block)
            ins = block.instructions[st.index]
            here = site(st.function, st.block, st.index)
            st.index += 1
            match ins:
                case ir.ConstAssign(dst, value):
                    st.registers[dst] = Const(value)
                case ir.BinOp(dst, op, lhs, rhs):
                    st.registers[dst] = binop(op, self.reg(st, lhs), self.reg(st, rhs))
                case ir.Cmp(dst, cond, lhs, rhs):
                    st.registers[dst] = cmp(cond, self.reg(st, lhs), self.reg(st, rhs))
                case ir.CStr(dst, sid):
                    addr = self.strings[sid]
                    for i, b in enumerate(self.p.string_table[sid] + b"\0"):
                        st.store(addr + i, Const(b), 1)
                    st.registers[dst] = Const(addr)
                case ir.Call(dst, callee, args):
                    desc = self.stubs.descriptor(callee, len(args))
                    ret = invoke_stub(st, desc, [self.reg(st, a) for a in args], here,
                                      self.limits.return_range)
                    if dst is not None:
                        st.registers[dst] = ret
                case ir.Load(dst, addr):
                    a = self.concrete_addr(st, self.reg(st, addr))
                    if a is None:
                        return self.deadend(st, "infeasible address concretization")
                    try:
                        st.registers[dst] = st.load(a)
                    except SymbolicMemoryError as e:
                        return self.deadend(st, str(e))
                case ir.Store(addr, val):
                    a = self.concrete_addr(st, self.reg(st, addr))
                    if a is None:
                        return self.deadend(st, "infeasible address concretization")
                    st.store(a, self.reg(st, val))
                case ir.Mark(tag):
                    if tag == "evade":
                        st.status = Status.EVADED
                        st.exit_site = EVADE_SITE
                        return [st]
                    st.marks.append(tag)
                case ir.Jmp(target):
                    st.block, st.index = target, 0
                case ir.Ret(val):
                    st.status = Status.REACHED_EXIT
                    st.exit_site = here
                    st.ret_value = self.reg(st, val) if val is not None else Const(0)
                    return [st]
                case ir.Halt():
                    st.status = Status.DEADEND
                    st.exit_site = here
                    return [st]
                case ir.Br(c, if_true, if_false):
                    cond = truth(self.reg(st, c))
                    if isinstance(cond, Const):
                        st.block, st.index = (if_true if cond.value else if_false), 0
                        continue
                    return self.fork(st, cond, if_true, if_false)

    def deadend(self, st: PathState, why: str) -> list[PathState]:
        st.status = Status.DEADEND
        st.exit_site = site(*st.pc)
        st.notes.append(why)
        return [st]

    def fork(self, st: PathState, cond: Expr, if_true: str, if_false: str) -> list[PathState]:
        feasible: list[PathState] = []
        for guard, target in ((cond, if_true), (negate(cond), if_false)):
            c = make_constraint(guard)
            if c is False:
                continue
            cs = st.constraints + ([c] if isinstance(c, Constraint) else [])
            outcome = solve(cs)
            if isinstance(outcome, Unsat):
                continue
            child = st.fork()
            child.constraints = cs
            child.block, child.index = target, 0
            if not isinstance(outcome, Sat):
                child.notes.append(f"feasibility unknown at {target}: {outcome.reason}")
            feasible.append(child)
        if not feasible:
            return self.deadend(st, "both branch directions infeasible")
        if len(feasible) == 2:
            if self.created + 1 > self.limits.max_states:
                self.truncated = True
                self.dropped += 1
                feasible = feasible[:1]
            else:
                self.created += 1
        return feasible


def explore(p: ir.Program, anchors: AnalysisAnchors, stubs: StubRegistry,
            limits: Limits = Limits()) -> PathSet:
    """All terminal states of the anchors' entry function, ordered by fingerprint.

    When ``limits`` cut exploration short the returned set is partial and
    ``truncated`` is set.
    """
    if limits.max_states < 1 or limits.max_steps < 1:
        raise ValueError("limits must be positive")
    return _Explorer(p, anchors, stubs, limits).run()


def refine(p: ir.Program, cg: CallGraph, path: PathState | None, root_cause: str,
           stubs: StubRegistry, limits: Limits = Limits()) -> PathSet:
    """Re-run exploration inside an internal root-cause function, its own callees stubbed."""
    if not cg.is_internal(root_cause):
        raise NotInternal(f"{root_cause!r} is not an internal function")
    return explore(p, anchors_for(p, root_cause), stubs, limits)
