"""C prototype database: parsing one-line prototypes into a stub registry."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path


class StubKind(str, enum.Enum):
    SCALAR = "scalar"
    BUFFER = "buffer"
    COMPARATOR = "comparator"


class PrototypeError(Exception):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ArityMismatch(Exception):
    pass


@dataclass(frozen=True)
class Param:
    type: str
    name: str | None = None


@dataclass(frozen=True)
class StubDescriptor:
    name: str
    arity: int
    kind: StubKind = StubKind.SCALAR
    variadic: bool = False

    def check_args(self, n: int) -> None:
        if n < self.arity or (n > self.arity and not self.variadic):
            raise ArityMismatch(f"{self.name} expects {self.arity} args, got {n}")


@dataclass(frozen=True)
class Prototype:
    name: str
    return_type: str
    params: tuple[Param, ...]
    variadic: bool = False
    kind: StubKind = StubKind.SCALAR

    @property
    def descriptor(self) -> StubDescriptor:
        return StubDescriptor(self.name, len(self.params), self.kind, self.variadic)

    def param_list(self) -> str:
        if not self.params and not self.variadic:
            return "void"
        parts = []
        for i, p in enumerate(self.params):
            name = p.name or f"arg{i}"
            sep = "" if p.type.endswith("*") else " "
            parts.append(f"{p.type}{sep}{name}")
        if self.variadic:
            parts.append("...")
        return ", ".join(parts)

    def signature(self) -> str:
        sep = "" if self.return_type.endswith("*") else " "
        return f"{self.return_type}{sep}{self.name}({self.param_list()})"


@dataclass
class StubRegistry:
    prototypes: dict[str, Prototype] = field(default_factory=dict)

    def __contains__(self, name: str) -> bool:
        return name in self.prototypes

    def __getitem__(self, name: str) -> Prototype:
        return self.prototypes[name]

    def descriptor(self, name: str, nargs: int) -> StubDescriptor:
        """Registered descriptor, or a scalar default sized to the call."""
        if name in self.prototypes:
            return self.prototypes[name].descriptor
        return StubDescriptor(name, nargs)

    def kind(self, name: str) -> StubKind:
        p = self.prototypes.get(name)
        return p.kind if p else StubKind.SCALAR


_PROTO_RE = re.compile(
    r"^(?P<ret>[A-Za-z_][\w\s\*]*?)\s*\b(?P<name>[A-Za-z_]\w*)\s*\((?P<params>[^()]*)\)\s*;?"
    r"\s*(?:@kind\s*=\s*(?P<kind>\w+))?\s*$")
_PARAM_RE = re.compile(r"^(?P<type>.*?[\w\*])\s*(?:\b(?P<name>[A-Za-z_]\w*))?$")
_TYPE_WORDS = {"int", "long", "short", "char", "void", "unsigned", "signed", "const",
               "float", "double", "struct", "volatile"}


def _parse_param(text: str, lineno: int) -> Param:
    text = " ".join(text.split())
    # arrays decay to pointers
    while text.endswith("]") and "[" in text:
        head = text[:text.rindex("[")].rstrip()
        m = re.match(r"^(.*?)\b([A-Za-z_]\w*)$", head)
        text = f"{m.group(1)}* {m.group(2)}" if m else head + " *"
    m = _PARAM_RE.match(text)
    if not m:
        raise PrototypeError(f"cannot parse parameter {text!r}", lineno)
    ptype, name = m.group("type").strip(), m.group("name")
    if name is None:
        return Param(ptype)
    # a lone type word (e.g. "size_t" or "unsigned int") has no name
    if not ptype or (name in _TYPE_WORDS or ptype.split()[-1] in ("const", "struct", "unsigned", "signed")):
        return Param(f"{ptype} {name}".strip())
    if ptype.endswith("*"):
        ptype = re.sub(r"\s*\*", " *", ptype).replace("* *", "**")
    return Param(ptype, name)


def parse_prototype(line: str, lineno: int = 0) -> Prototype:
    m = _PROTO_RE.match(line.strip())
    if not m:
        raise PrototypeError(f"not a prototype: {line.strip()!r}", lineno)
    ret = " ".join(m.group("ret").split())
    ret = re.sub(r"\s*\*", " *", ret).replace("* *", "**")
    kind_text = m.group("kind") or "scalar"
    try:
        kind = StubKind(kind_text)
    except ValueError:
        raise PrototypeError(f"unknown kind {kind_text!r}", lineno) from None
    raw = [p.strip() for p in m.group("params").split(",")] if m.group("params").strip() else []
    variadic = bool(raw) and raw[-1] == "..."
    if variadic:
        raw = raw[:-1]
    if raw == ["void"]:
        raw = []
    params = tuple(_parse_param(p, lineno) for p in raw)
    if kind is StubKind.COMPARATOR and len(params) < 2:
        raise PrototypeError("comparator prototypes need at least two parameters", lineno)
    return Prototype(m.group("name"), ret, params, variadic, kind)


def ingest_prototypes(text: str) -> StubRegistry:
    """Registry from a prototype database: one prototype per line, ``#``/``//`` comments."""
    reg = StubRegistry()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("//", 1)[0].strip()
        if not line or line.startswith("#"):
            continue
        proto = parse_prototype(line, lineno)
        reg.prototypes[proto.name] = proto
    return reg


def default_registry() -> StubRegistry:
    return ingest_prototypes(resources.files("malverse").joinpath("data/apis.proto").read_text())


def load_registry(path: str | Path | None = None) -> StubRegistry:
    """Registry from ``path``, else ``./apis.proto`` if present, else the bundled database."""
    if path is not None:
        return ingest_prototypes(Path(path).read_text())
    local = Path("apis.proto")
    if local.exists():
        return ingest_prototypes(local.read_text())
    return default_registry()
