"""MVIR: a small register-based text IR standing in for lifted binaries.

A program is a list of functions plus a string table::

    str s_bomb = "BOMB"

    fn main() {
    entry:
      r0 = call getcwd(r_null, r_null)
      r1 = cstr s_bomb
      r2 = call strcmp(r0, r1)
      ...
    }

Registers are 64-bit two's-complement; immediates are stored unsigned
(``-1`` parses to ``0xFFFFFFFFFFFFFFFF``). Comments start with ``;``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterator, Union

MASK64 = (1 << 64) - 1
STRING_BASE = 0x1000_0000
STRING_REGION = 0x1000

BINOPS = ("add", "sub", "mul", "and", "or", "xor")
CONDS = ("eq", "ne", "slt", "sle", "ult", "ule")
KEYWORDS = {"fn", "str", "const", "call", "load", "store", "cstr", "br", "jmp",
            "ret", "halt", "mark", "cmp", *BINOPS}


class ParseError(Exception):
    def __init__(self, message: str, line: int = 0, col: int = 0):
        super().__init__(f"{line}:{col}: {message}")
        self.message = message
        self.line = line
        self.col = col


# -- instructions -----------------------------------------------------------

@dataclass(frozen=True)
class ConstAssign:
    dst: str
    value: int


@dataclass(frozen=True)
class BinOp:
    dst: str
    op: str
    lhs: str
    rhs: str


@dataclass(frozen=True)
class Cmp:
    dst: str
    cond: str
    lhs: str
    rhs: str


@dataclass(frozen=True)
class Call:
    dst: str | None
    callee: str
    args: tuple[str, ...] = ()


@dataclass(frozen=True)
class Load:
    dst: str
    addr: str


@dataclass(frozen=True)
class Store:
    addr: str
    val: str


@dataclass(frozen=True)
class CStr:
    dst: str
    string_id: str


@dataclass(frozen=True)
class Br:
    cond: str
    if_true: str
    if_false: str


@dataclass(frozen=True)
class Jmp:
    target: str


@dataclass(frozen=True)
class Ret:
    val: str | None = None


@dataclass(frozen=True)
class Halt:
    pass


@dataclass(frozen=True)
class Mark:
    tag: str


Instruction = Union[ConstAssign, BinOp, Cmp, Call, Load, Store, CStr,
                    Br, Jmp, Ret, Halt, Mark]
TERMINATORS = (Br, Jmp, Ret, Halt)


def reads(ins: Instruction) -> tuple[str, ...]:
    """Registers read by an instruction, in operand order."""
    if isinstance(ins, (BinOp, Cmp)):
        return (ins.lhs, ins.rhs)
    if isinstance(ins, Call):
        return ins.args
    if isinstance(ins, Load):
        return (ins.addr,)
    if isinstance(ins, Store):
        return (ins.addr, ins.val)
    if isinstance(ins, Br):
        return (ins.cond,)
    if isinstance(ins, Ret):
        return (ins.val,) if ins.val is not None else ()
    return ()


def writes(ins: Instruction) -> str | None:
    return getattr(ins, "dst", None)


# -- program structure ------------------------------------------------------

@dataclass(frozen=True)
class Block:
    label: str
    instructions: tuple[Instruction, ...]

    @property
    def terminator(self) -> Instruction | None:
        if self.instructions and isinstance(self.instructions[-1], TERMINATORS):
            return self.instructions[-1]
        return None

    def successors(self) -> tuple[str, ...]:
        t = self.terminator
        if isinstance(t, Br):
            return (t.if_true, t.if_false)
        if isinstance(t, Jmp):
            return (t.target,)
        return ()


@dataclass(frozen=True)
class Function:
    name: str
    params: tuple[str, ...]
    blocks: tuple[Block, ...]

    def block(self, label: str) -> Block:
        for b in self.blocks:
            if b.label == label:
                return b
        raise KeyError(label)

    @property
    def entry(self) -> Block:
        return self.blocks[0]

    def calls(self) -> Iterator[tuple[str, int, Call]]:
        for b in self.blocks:
            for i, ins in enumerate(b.instructions):
                if isinstance(ins, Call):
                    yield b.label, i, ins

    def ret_sites(self) -> list[tuple[str, int]]:
        return [(b.label, i) for b in self.blocks
                for i, ins in enumerate(b.instructions) if isinstance(ins, Ret)]


@dataclass(frozen=True)
class Program:
    functions: tuple[Function, ...]
    string_table: dict[str, bytes] = field(default_factory=dict)

    def __hash__(self):
        return hash((self.functions, tuple(self.string_table.items())))

    def function(self, name: str) -> Function:
        for f in self.functions:
            if f.name == name:
                return f
        raise KeyError(name)

    def has_function(self, name: str) -> bool:
        return any(f.name == name for f in self.functions)

    def is_external(self, callee: str) -> bool:
        return not self.has_function(callee)

    def string_addresses(self) -> dict[str, int]:
        """Loader-assigned literal addresses: one 4 KiB region per literal, table order."""
        return {sid: STRING_BASE + i * STRING_REGION
                for i, sid in enumerate(self.string_table)}


# -- lexer ------------------------------------------------------------------

_TOKEN_RE = re.compile(r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<comment>;[^\n]*)
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<number>-?(?:0[xX][0-9a-fA-F]+|[0-9]+))
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<punct>[(){},:=])
""", re.VERBOSE)


@dataclass
class Token:
    kind: str
    text: str
    line: int
    col: int


def tokenize(text: str) -> list[Token]:
    toks = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind not in ("ws", "comment"):
            toks.append(Token(kind, m.group(), line, m.start() - line_start + 1))
        pos = m.end()
    toks.append(Token("eof", "", line, pos - line_start + 1))
    return toks


def parse_imm(text: str) -> int:
    neg = text.startswith("-")
    body = text[1:] if neg else text
    v = int(body, 16) if body.lower().startswith("0x") else int(body)
    if neg:
        if v > 1 << 63:
            raise ValueError(f"immediate {text} below -2**63")
        return (-v) & MASK64
    if v > MASK64:
        raise ValueError(f"immediate {text} exceeds 64 bits")
    return v


_ESCAPES = {"n": b"\n", "t": b"\t", "r": b"\r", "0": b"\0", "\\": b"\\", '"': b'"'}


def _unescape(body: str, tok: Token) -> bytes:
    out = bytearray()
    i = 0
    while i < len(body):
        c = body[i]
        if c != "\\":
            out += c.encode()
            i += 1
            continue
        nxt = body[i + 1]
        if nxt == "x":
            out.append(int(body[i + 2:i + 4], 16))
            i += 4
        elif nxt in _ESCAPES:
            out += _ESCAPES[nxt]
            i += 2
        else:
            raise ParseError(f"bad escape \\{nxt}", tok.line, tok.col)
    return bytes(out)


def escape_bytes(data: bytes) -> str:
    out = []
    for b in data:
        ch = chr(b)
        if ch in '"\\':
            out.append("\\" + ch)
        elif 0x20 <= b < 0x7F:
            out.append(ch)
        else:
            out.append(f"\\x{b:02x}")
    return "".join(out)


# -- parser -----------------------------------------------------------------

class _Parser:
    def __init__(self, text: str):
        self.toks = tokenize(text)
        self.i = 0

    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def peek(self, k: int = 1) -> Token:
        return self.toks[min(self.i + k, len(self.toks) - 1)]

    def error(self, msg: str, tok: Token | None = None):
        tok = tok or self.tok
        raise ParseError(msg, tok.line, tok.col)

    def next(self) -> Token:
        t = self.tok
        self.i += 1
        return t

    def expect(self, text: str) -> Token:
        if self.tok.text != text or self.tok.kind == "string":
            self.error(f"expected {text!r}, got {self.tok.text or 'end of input'!r}")
        return self.next()

    def name(self, what: str = "name") -> str:
        if self.tok.kind != "name":
            self.error(f"expected {what}, got {self.tok.text or 'end of input'!r}")
        return self.next().text

    def reg(self) -> str:
        t = self.tok
        r = self.name("register")
        if r in KEYWORDS:
            self.error(f"keyword {r!r} used as register", t)
        return r

    def program(self) -> Program:
        functions: list[Function] = []
        strings: dict[str, bytes] = {}
        seen: set[str] = set()
        while self.tok.kind != "eof":
            t = self.tok
            if t.text == "str":
                self.next()
                sid = self.name("string id")
                if sid in strings:
                    self.error(f"duplicate string {sid!r}", t)
                self.expect("=")
                s = self.tok
                if s.kind != "string":
                    self.error("expected string literal")
                self.next()
                strings[sid] = _unescape(s.text[1:-1], s)
            elif t.text == "fn":
                f = self.function()
                if f.name in seen:
                    self.error(f"duplicate function {f.name!r}", t)
                seen.add(f.name)
                functions.append(f)
            else:
                self.error(f"expected 'fn' or 'str', got {t.text!r}")
        if not functions:
            self.error("program has no functions")
        return Program(tuple(functions), strings)

    def function(self) -> Function:
        self.expect("fn")
        name = self.name("function name")
        self.expect("(")
        params: list[str] = []
        if self.tok.text != ")":
            params.append(self.reg())
            while self.tok.text == ",":
                self.next()
                params.append(self.reg())
        self.expect(")")
        self.expect("{")
        blocks: list[Block] = []
        label_toks: dict[str, Token] = {}
        label: str | None = None
        body: list[Instruction] = []
        targets: list[tuple[str, Token]] = []
        while self.tok.text != "}":
            if self.tok.kind == "eof":
                self.error("unterminated function body")
            if self.tok.kind == "name" and self.peek().text == ":":
                t = self.next()
                self.next()
                if t.text in label_toks:
                    self.error(f"duplicate label {t.text!r} in {name}", t)
                if label is not None:
                    blocks.append(Block(label, tuple(body)))
                label_toks[t.text] = t
                label, body = t.text, []
                continue
            if label is None:
                self.error("instruction outside of a block")
            start = self.tok
            ins = self.instruction()
            if isinstance(ins, Br):
                targets += [(ins.if_true, start), (ins.if_false, start)]
            elif isinstance(ins, Jmp):
                targets.append((ins.target, start))
            body.append(ins)
        self.expect("}")
        if label is None:
            self.error(f"function {name!r} has no blocks")
        blocks.append(Block(label, tuple(body)))
        for target, tok in targets:
            if target not in label_toks:
                self.error(f"undefined label {target!r}", tok)
        return Function(name, tuple(params), tuple(blocks))

    def _same_line(self, prev: Token) -> bool:
        return self.tok.line == prev.line and self.tok.kind == "name" and self.peek().text not in (":", "=")

    def call_tail(self, dst: str | None) -> Call:
        callee = self.name("callee")
        self.expect("(")
        args: list[str] = []
        if self.tok.text != ")":
            args.append(self.reg())
            while self.tok.text == ",":
                self.next()
                args.append(self.reg())
        self.expect(")")
        return Call(dst, callee, tuple(args))

    def instruction(self) -> Instruction:
        t = self.tok
        if t.kind == "name" and self.peek().text == "=":
            dst = self.reg()
            self.expect("=")
            op = self.name("operation")
            if op == "const":
                n = self.tok
                if n.kind != "number":
                    self.error("expected immediate")
                self.next()
                try:
                    return ConstAssign(dst, parse_imm(n.text))
                except ValueError as e:
                    self.error(str(e), n)
            if op in BINOPS:
                lhs = self.reg()
                self.expect(",")
                return BinOp(dst, op, lhs, self.reg())
            if op == "cmp":
                cond = self.name("condition")
                if cond not in CONDS:
                    self.error(f"unknown condition {cond!r}")
                lhs = self.reg()
                self.expect(",")
                return Cmp(dst, cond, lhs, self.reg())
            if op == "call":
                return self.call_tail(dst)
            if op == "load":
                return Load(dst, self.reg())
            if op == "cstr":
                return CStr(dst, self.name("string id"))
            self.error(f"unknown operation {op!r}", t)
        kw = self.name("instruction")
        if kw == "store":
            addr = self.reg()
            self.expect(",")
            return Store(addr, self.reg())
        if kw == "call":
            return self.call_tail(None)
        if kw == "br":
            c = self.reg()
            self.expect(",")
            a = self.name("label")
            self.expect(",")
            return Br(c, a, self.name("label"))
        if kw == "jmp":
            return Jmp(self.name("label"))
        if kw == "ret":
            return Ret(self.reg() if self._same_line(t) else None)
        if kw == "halt":
            return Halt()
        if kw == "mark":
            return Mark(self.name("mark tag"))
        self.error(f"unknown instruction {kw!r}", t)


def parse_program(text: str) -> Program:
    """Parse MVIR source; raises :class:`ParseError` with line/column."""
    return _Parser(text).program()


# -- printer ----------------------------------------------------------------

def _signed(v: int) -> int:
    return v - (1 << 64) if v >> 63 else v


def format_instruction(ins: Instruction) -> str:
    match ins:
        case ConstAssign(dst, value):
            return f"{dst} = const {_signed(value)}"
        case BinOp(dst, op, lhs, rhs):
            return f"{dst} = {op} {lhs}, {rhs}"
        case Cmp(dst, cond, lhs, rhs):
            return f"{dst} = cmp {cond} {lhs}, {rhs}"
        case Call(dst, callee, args):
            call = f"call {callee}({', '.join(args)})"
            return call if dst is None else f"{dst} = {call}"
        case Load(dst, addr):
            return f"{dst} = load {addr}"
        case Store(addr, val):
            return f"store {addr}, {val}"
        case CStr(dst, sid):
            return f"{dst} = cstr {sid}"
        case Br(c, a, b):
            return f"br {c}, {a}, {b}"
        case Jmp(target):
            return f"jmp {target}"
        case Ret(val):
            return "ret" if val is None else f"ret {val}"
        case Halt():
            return "halt"
        case Mark(tag):
            return f"mark {tag}"
    raise TypeError(ins)


def format_program(p: Program) -> str:
    out: list[str] = []
    for sid, data in p.string_table.items():
        out.append(f'str {sid} = "{escape_bytes(data)}"')
    if p.string_table:
        out.append("")
    for f in p.functions:
        out.append(f"fn {f.name}({', '.join(f.params)}) {{")
        for b in f.blocks:
            out.append(f"{b.label}:")
            out.extend("  " + format_instruction(ins) for ins in b.instructions)
        out.append("}")
        out.append("")
    return "\n".join(out)


# -- validation -------------------------------------------------------------

@dataclass(frozen=True)
class Diagnostic:
    function: str
    block: str
    index: int
    message: str

    def __str__(self):
        return f"{self.function}:{self.block}:{self.index}: {self.message}"


def _definite_assignment(f: Function) -> list[Diagnostic]:
    """Worklist must-defined analysis; reports reads that are not defined on every path."""
    labels = [b.label for b in f.blocks]
    preds: dict[str, list[str]] = {l: [] for l in labels}
    for b in f.blocks:
        for s in b.successors():
            if s in preds:
                preds[s].append(b.label)

    # None is the lattice top ("every register"), used for not-yet-reached blocks
    out: dict[str, frozenset[str] | None] = {l: None for l in labels}
    entry = labels[0]

    def block_in(label: str) -> frozenset[str] | None:
        if label == entry:
            return frozenset(f.params)
        acc = None
        for p in preds[label]:
            if out[p] is None:
                continue
            acc = out[p] if acc is None else acc & out[p]
        return acc

    work = list(labels)
    while work:
        label = work.pop(0)
        cur = block_in(label)
        if cur is None:
            continue
        defined = set(cur)
        for ins in f.block(label).instructions:
            w = writes(ins)
            if w is not None:
                defined.add(w)
        new = frozenset(defined)
        if new != out[label]:
            out[label] = new
            for s in f.block(label).successors():
                if s in preds and s not in work:
                    work.append(s)

    diags = []
    for b in f.blocks:
        cur = block_in(b.label)
        if cur is None:
            continue  # unreachable
        defined = set(cur)
        for i, ins in enumerate(b.instructions):
            for r in dict.fromkeys(reads(ins)):
                if r not in defined:
                    diags.append(Diagnostic(f.name, b.label, i, f"register {r!r} read before write"))
            w = writes(ins)
            if w is not None:
                defined.add(w)
    return diags


def validate(p: Program) -> list[Diagnostic]:
    """All structural invariant violations; an empty list means the program is well formed."""
    diags: list[Diagnostic] = []
    if not p.functions:
        return [Diagnostic("", "", 0, "program has no functions")]
    seen: set[str] = set()
    arity = {f.name: len(f.params) for f in p.functions}
    for f in p.functions:
        if f.name in seen:
            diags.append(Diagnostic(f.name, "", 0, "duplicate function name"))
        seen.add(f.name)
        if not f.blocks:
            diags.append(Diagnostic(f.name, "", 0, "function has no blocks"))
            continue
        labels: set[str] = set()
        for b in f.blocks:
            if b.label in labels:
                diags.append(Diagnostic(f.name, b.label, 0, "duplicate label"))
            labels.add(b.label)
        for b in f.blocks:
            if not b.instructions:
                diags.append(Diagnostic(f.name, b.label, 0, "empty block"))
                continue
            for i, ins in enumerate(b.instructions):
                last = i == len(b.instructions) - 1
                if isinstance(ins, TERMINATORS) and not last:
                    diags.append(Diagnostic(f.name, b.label, i, "terminator before end of block"))
                if last and not isinstance(ins, TERMINATORS):
                    diags.append(Diagnostic(f.name, b.label, i, "block does not end in a terminator"))
                if isinstance(ins, Br):
                    for t in (ins.if_true, ins.if_false):
                        if t not in labels:
                            diags.append(Diagnostic(f.name, b.label, i, f"undefined label {t!r}"))
                elif isinstance(ins, Jmp) and ins.target not in labels:
                    diags.append(Diagnostic(f.name, b.label, i, f"undefined label {ins.target!r}"))
                elif isinstance(ins, CStr) and ins.string_id not in p.string_table:
                    diags.append(Diagnostic(f.name, b.label, i, f"undefined string {ins.string_id!r}"))
                elif isinstance(ins, Call) and ins.callee in arity and len(ins.args) != arity[ins.callee]:
                    diags.append(Diagnostic(f.name, b.label, i,
                                            f"call to {ins.callee} with {len(ins.args)} args, expects {arity[ins.callee]}"))
                elif isinstance(ins, Mark) and not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", ins.tag or ""):
                    diags.append(Diagnostic(f.name, b.label, i, "mark tag is not an identifier"))
        if not any(d.function == f.name and "label" in d.message for d in diags):
            diags.extend(_definite_assignment(f))
    for sid, data in p.string_table.items():
        if len(data) + 1 > STRING_REGION:
            diags.append(Diagnostic("", sid, 0, "string literal exceeds its 4 KiB region"))
    return diags
