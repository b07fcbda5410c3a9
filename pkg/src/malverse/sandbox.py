"""Concrete MVIR interpreter used to check that a patch steers a run down the target path.

External calls consult the patch: a return schedule (one value per call, the
last one repeating) or a preloaded buffer. Unpatched comparators really
compare memory; every other unpatched external returns 0. Internal functions
run for real.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

from . import ir
from .callgraph import build_callgraph, detect_anchors
from .patchgen import PatchSpec
from .prototypes import StubKind, StubRegistry, default_registry

M64 = 0xFFFF_FFFF_FFFF_FFFF
EVADE_SITE = "<evade>"
PRELOAD_BASE = 0x3000_0000
PRELOAD_REGION = 0x1000
BUFFER_BASE = 0x2000_0000
BUFFER_REGION = 256
DEFAULT_STEP_LIMIT = 100_000


@dataclass(frozen=True)
class Invocation:
    callee: str
    args: tuple[int, ...]
    ret: int

    def to_json(self):
        return {"event": "invocation", "callee": self.callee, "args": list(self.args), "ret": _s(self.ret)}


@dataclass(frozen=True)
class MarkEvent:
    tag: str
    depth: int = 0

    def to_json(self):
        return {"event": "mark", "tag": self.tag, "depth": self.depth}


@dataclass(frozen=True)
class Exit:
    site: str
    value: int

    def to_json(self):
        return {"event": "exit", "site": self.site, "value": _s(self.value)}


@dataclass(frozen=True)
class StepLimit:
    def to_json(self):
        return {"event": "step_limit"}


Event = Invocation | MarkEvent | Exit | StepLimit


def _s(v: int) -> int:
    return v - (1 << 64) if v >> 63 else v


@dataclass
class ConcreteTrace:
    events: list[Event] = field(default_factory=list)

    @property
    def end(self) -> Exit | StepLimit:
        return self.events[-1]

    @property
    def exit_site(self) -> str | None:
        return self.end.site if isinstance(self.end, Exit) else None

    def marks(self, depth: int | None = 0) -> list[str]:
        """Mark tags, by default only those raised in the entry function's own frame."""
        return [e.tag for e in self.events if isinstance(e, MarkEvent) and (depth is None or e.depth == depth)]

    def invocations(self) -> list[Invocation]:
        return [e for e in self.events if isinstance(e, Invocation)]

    def jsonl(self) -> str:
        return "".join(json.dumps(e.to_json()) + "\n" for e in self.events)


def _alu(op: str, a: int, b: int) -> int:
    if op == "add":
        return (a + b) & M64
    if op == "sub":
        return (a - b) & M64
    if op == "mul":
        return (a * b) & M64
    if op == "and":
        return a & b
    if op == "or":
        return a | b
    if op == "xor":
        return a ^ b
    raise ValueError(op)


def _compare(cond: str, a: int, b: int) -> int:
    if cond in ("slt", "sle"):
        a, b = _s(a), _s(b)
    return int({"eq": a == b, "ne": a != b, "slt": a < b, "sle": a <= b,
                "ult": a < b, "ule": a <= b}[cond])


class _Frame:
    def __init__(self, fn: ir.Function, args: Sequence[int], dst: str | None = None):
        self.fn = fn
        self.block = fn.entry.label
        self.index = 0
        self.regs = dict(zip(fn.params, args))
        self.dst = dst


class Machine:
    """One concrete execution. ``call_hook``, if given, answers every call made
    from the entry frame (internal or external) and replaces the patch logic."""

    def __init__(self, p: ir.Program, patch: PatchSpec | None = None, registry: StubRegistry | None = None,
                 call_hook: Callable[[int, str, tuple[int, ...]], int] | None = None):
        self.p = p
        self.patch = patch or PatchSpec()
        self.registry = registry if registry is not None else default_registry()
        self.call_hook = call_hook
        self.mem: dict[int, int] = {}
        self.counters: dict[str, int] = {}
        self.preload_addr: dict[str, int] = {}
        self.strings = p.string_addresses()
        self.trace = ConcreteTrace()
        self.hook_seq = 0
        self.regions = 0
        for i, pre in enumerate(self.patch.preloads):
            addr = PRELOAD_BASE + i * PRELOAD_REGION
            self.preload_addr[pre.function] = addr
            self.write_bytes(addr, pre.data + b"\0")

    # -- memory: byte addressed, little-endian 64-bit words --------------

    def write_bytes(self, addr: int, data: bytes) -> None:
        for i, b in enumerate(data):
            self.mem[(addr + i) & M64] = b

    def load(self, addr: int) -> int:
        return sum(self.mem.get((addr + i) & M64, 0) << (8 * i) for i in range(8))

    def store(self, addr: int, val: int) -> None:
        for i in range(8):
            self.mem[(addr + i) & M64] = (val >> (8 * i)) & 0xFF

    def read(self, addr: int, n: int) -> bytes:
        return bytes(self.mem.get((addr + i) & M64, 0) for i in range(n))

    def cstring(self, addr: int, limit: int = 4096) -> bytes:
        out = bytearray()
        for i in range(limit):
            b = self.mem.get((addr + i) & M64, 0)
            if b == 0:
                break
            out.append(b)
        return bytes(out)

    # -- externals ---------------------------------------------------------

    def external(self, callee: str, args: tuple[int, ...]) -> int:
        n = self.counters.get(callee, 0) + 1
        self.counters[callee] = n
        sched = self.patch.schedule(callee)
        if sched is not None:
            return sched.returns[min(n, len(sched.returns)) - 1] & M64
        if callee in self.preload_addr:
            return self.preload_addr[callee]
        if self.registry.kind(callee) is StubKind.COMPARATOR and len(args) >= 2:
            if len(args) >= 3:
                size = min(args[2], 4096)
                a, b = self.read(args[0], size), self.read(args[1], size)
            else:
                a, b = self.cstring(args[0]), self.cstring(args[1])
            return ((a > b) - (a < b)) & M64
        return 0

    def stubbed(self, callee: str, args: tuple[int, ...]) -> int:
        seq = self.hook_seq
        self.hook_seq += 1
        if self.registry.kind(callee) is StubKind.BUFFER:
            addr = BUFFER_BASE + self.regions * BUFFER_REGION
            self.regions += 1
            self.call_hook(seq, callee, args)
            return addr
        return self.call_hook(seq, callee, args) & M64

    # -- execution -------------------------------------------------------

    def run(self, entry: str, step_limit: int = DEFAULT_STEP_LIMIT) -> ConcreteTrace:
        fn = self.p.function(entry)
        stack = [_Frame(fn, [0] * len(fn.params))]
        steps = 0
        ev = self.trace.events
        while True:
            if steps >= step_limit:
                ev.append(StepLimit())
                return self.trace
            steps += 1
            fr = stack[-1]
            ins = fr.fn.block(fr.block).instructions[fr.index]
            here = f"{fr.fn.name}:{fr.block}:{fr.index}"
            fr.index += 1
            r = fr.regs
            if isinstance(ins, ir.ConstAssign):
                r[ins.dst] = ins.value
            elif isinstance(ins, ir.BinOp):
                r[ins.dst] = _alu(ins.op, r[ins.lhs], r[ins.rhs])
            elif isinstance(ins, ir.Cmp):
                r[ins.dst] = _compare(ins.cond, r[ins.lhs], r[ins.rhs])
            elif isinstance(ins, ir.CStr):
                addr = self.strings[ins.string_id]
                self.write_bytes(addr, self.p.string_table[ins.string_id] + b"\0")
                r[ins.dst] = addr
            elif isinstance(ins, ir.Load):
                r[ins.dst] = self.load(r[ins.addr])
            elif isinstance(ins, ir.Store):
                self.store(r[ins.addr], r[ins.val])
            elif isinstance(ins, ir.Mark):
                if ins.tag == "evade":
                    ev.append(Exit(EVADE_SITE, 0))
                    return self.trace
                ev.append(MarkEvent(ins.tag, len(stack) - 1))
            elif isinstance(ins, ir.Call):
                args = tuple(r[a] for a in ins.args)
                if self.call_hook is not None and len(stack) == 1:
                    val = self.stubbed(ins.callee, args)
                    ev.append(Invocation(ins.callee, args, val))
                elif self.p.has_function(ins.callee):
                    stack.append(_Frame(self.p.function(ins.callee), args, ins.dst))
                    continue
                else:
                    val = self.external(ins.callee, args)
                    ev.append(Invocation(ins.callee, args, val))
                if ins.dst is not None:
                    r[ins.dst] = val
            elif isinstance(ins, ir.Br):
                fr.block, fr.index = (ins.if_true if r[ins.cond] else ins.if_false), 0
            elif isinstance(ins, ir.Jmp):
                fr.block, fr.index = ins.target, 0
            elif isinstance(ins, ir.Ret):
                val = r[ins.val] if ins.val is not None else 0
                stack.pop()
                if not stack:
                    ev.append(Exit(here, val))
                    return self.trace
                if fr.dst is not None:
                    stack[-1].regs[fr.dst] = val
            elif isinstance(ins, ir.Halt):
                ev.append(Exit(here, 0))
                return self.trace


def run(p: ir.Program, patch: PatchSpec | None = None, step_limit: int = DEFAULT_STEP_LIMIT,
        registry: StubRegistry | None = None, entry: str | None = None) -> ConcreteTrace:
    """Execute ``p`` from its detected entry with externals governed by ``patch``."""
    if entry is None:
        entry = detect_anchors(build_callgraph(p), p).entry
    return Machine(p, patch, registry).run(entry, step_limit)


def run_stubbed(p: ir.Program, entry: str, returns: Callable[[int, str, tuple[int, ...]], int],
                registry: StubRegistry | None = None, step_limit: int = DEFAULT_STEP_LIMIT) -> ConcreteTrace:
    """Execute ``entry`` with every call it makes answered by ``returns(seq, callee, args)``."""
    return Machine(p, None, registry, returns).run(entry, step_limit)


@dataclass(frozen=True)
class Verdict:
    passed: bool
    expected: tuple[str | None, tuple[str, ...]]
    observed: tuple[str | None, tuple[str, ...]]
    trace: ConcreteTrace = field(compare=False, repr=False, default=None)

    def __str__(self):
        return "PASS" if self.passed else "FAIL"


def validate_patch(p: ir.Program, patch: PatchSpec, expected: tuple[str | None, Sequence[str]],
                   step_limit: int = DEFAULT_STEP_LIMIT, registry: StubRegistry | None = None,
                   entry: str | None = None) -> Verdict:
    """PASS iff the patched run ends at the expected site with exactly the expected marks."""
    trace = run(p, patch, step_limit, registry, entry)
    exp = (expected[0], tuple(expected[1]))
    obs = (trace.exit_site, tuple(trace.marks()))
    return Verdict(exp == obs, exp, obs, trace)
