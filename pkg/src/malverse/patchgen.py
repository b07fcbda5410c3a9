"""Patch synthesis from concretized paths, and emission of the patch as C source."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .ir import escape_bytes
from .prototypes import StubRegistry, ingest_prototypes  # noqa: F401  (re-exported)
from .solver import ConcreteInvocation, Model, concretize_history
from .symexec import PathState
from .symexpr import symbols, to_signed
from .triage import RootCause

PRELOAD_SIZE = 100


class MissingModel(Exception):
    pass


class MinimalWithoutRoot(Exception):
    pass


class MissingPrototype(Exception):
    pass


class PreloadTooLong(ValueError):
    pass


@dataclass(frozen=True)
class ReturnSchedule:
    function: str
    returns: tuple[int, ...]  # signed values, one per invocation; the last one repeats

    def __post_init__(self):
        if not self.returns:
            raise ValueError(f"empty schedule for {self.function}")


@dataclass(frozen=True)
class MemoryPreload:
    function: str
    data: bytes
    size: int = PRELOAD_SIZE

    def __post_init__(self):
        if len(self.data) + 1 > self.size:
            raise PreloadTooLong(f"{len(self.data)} bytes + terminator exceed {self.size}-byte buffer "
                                 f"for {self.function}")


@dataclass(frozen=True)
class PatchSpec:
    schedules: tuple[ReturnSchedule, ...] = ()
    preloads: tuple[MemoryPreload, ...] = ()
    provenance: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        names = [s.function for s in self.schedules]
        if len(names) != len(set(names)):
            raise ValueError("more than one schedule for a function")
        clash = set(names) & {p.function for p in self.preloads}
        if clash:
            raise ValueError(f"functions with both a preload and a schedule: {sorted(clash)}")

    def schedule(self, name: str) -> ReturnSchedule | None:
        return next((s for s in self.schedules if s.function == name), None)

    def preload(self, name: str) -> MemoryPreload | None:
        return next((p for p in self.preloads if p.function == name), None)

    def functions(self) -> list[str]:
        return [s.function for s in self.schedules] + [p.function for p in self.preloads]

    def merged(self, other: "PatchSpec") -> "PatchSpec":
        """Union of two patches; ``other`` wins where both patch a function."""
        theirs = set(other.functions())
        return PatchSpec(
            tuple(s for s in self.schedules if s.function not in theirs) + other.schedules,
            tuple(p for p in self.preloads if p.function not in theirs) + other.preloads,
            dict(self.provenance))

    def restricted(self, names: Iterable[str]) -> "PatchSpec":
        keep = set(names)
        return PatchSpec(tuple(s for s in self.schedules if s.function in keep),
                         tuple(p for p in self.preloads if p.function in keep),
                         dict(self.provenance))

    def signature(self) -> tuple:
        """Content identity ignoring provenance."""
        return (tuple((s.function, s.returns) for s in self.schedules),
                tuple((p.function, p.data, p.size) for p in self.preloads))

    def to_json(self) -> dict:
        return {
            "schedules": [{"function": s.function, "returns": list(s.returns)} for s in self.schedules],
            "preloads": [{"function": p.function, "bytes": p.data.hex(), "size": p.size,
                          "text": p.data.decode("latin-1")} for p in self.preloads],
            "provenance": dict(self.provenance),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, obj: dict) -> "PatchSpec":
        return cls(tuple(ReturnSchedule(s["function"], tuple(s["returns"])) for s in obj.get("schedules", [])),
                   tuple(MemoryPreload(p["function"], bytes.fromhex(p["bytes"]), p.get("size", PRELOAD_SIZE))
                         for p in obj.get("preloads", [])),
                   dict(obj.get("provenance", {})))

    @classmethod
    def loads(cls, text: str) -> "PatchSpec":
        return cls.from_json(json.loads(text))


def build_spec(invocations: Sequence[ConcreteInvocation], provenance: Mapping[str, str] | None = None) -> PatchSpec:
    """Schedules and preloads for a flat, ordered list of external invocations."""
    returns: dict[str, list[int]] = {}
    preloads: dict[str, bytes] = {}
    for inv in invocations:
        if inv.kind == "buffer":
            preloads.setdefault(inv.callee, (inv.buffer or b"\0").split(b"\0", 1)[0])
        elif inv.induced_by is not None:
            continue  # behaviour follows from the preloaded buffer
        else:
            returns.setdefault(inv.callee, []).append(to_signed(inv.ret))
    return PatchSpec(tuple(ReturnSchedule(f, tuple(r)) for f, r in returns.items() if f not in preloads),
                     tuple(MemoryPreload(f, d) for f, d in preloads.items()),
                     dict(provenance or {}))


def flatten(history: Sequence[ConcreteInvocation], internal: Iterable[str] = (),
            expansions: Mapping[int, Sequence[ConcreteInvocation]] | None = None) -> list[ConcreteInvocation]:
    """External invocations in order, with expanded internal invocations spliced in place."""
    internal = set(internal)
    expansions = expansions or {}
    out = []
    for inv in history:
        if inv.callee in internal:
            out.extend(expansions.get(inv.seq, ()))
        else:
            out.append(inv)
    return out


def dependencies(path: PathState, root: RootCause) -> set[str]:
    """Functions linked to the root-cause function through shared constraints or arguments."""
    owner: dict[str, str] = {}
    by_seq = {r.seq: r for r in path.history}
    for r in path.history:
        if r.ret_sym:
            owner[r.ret_sym] = r.callee
        if r.buffer_sym:
            owner[r.buffer_sym] = r.callee
    groups = [{owner[s.name] for s in symbols(c.expr) if s.name in owner} for c in path.constraints]
    selected = {root.function}
    changed = True
    while changed:
        changed = False
        for g in groups:
            if g & selected and not g <= selected:
                selected |= g
                changed = True
    # comparator roots depend on the buffers they read
    regions = {r.ret.value: r.callee for r in path.history
               if r.buffer_sym is not None and hasattr(r.ret, "value")}
    for r in by_seq.values():
        if r.callee in selected:
            for a in r.args:
                if hasattr(a, "value") and a.value in regions:
                    selected.add(regions[a.value])
    return selected


def synthesize(path: PathState, model: Model | None, root: RootCause | None = None,
               mode: str = "full", internal: Iterable[str] = (),
               expansions: Mapping[int, Sequence[ConcreteInvocation]] | None = None) -> PatchSpec:
    """PatchSpec forcing a concrete run down ``path``.

    ``internal`` names functions executed for real (never patched); entries of
    ``expansions`` replace an internal invocation by the external invocations
    that a refined exploration found inside it.
    """
    if model is None:
        raise MissingModel("a model satisfying the path is required")
    if mode not in ("full", "minimal"):
        raise ValueError(f"unknown mode {mode!r}")
    internal = set(internal)
    expansions = dict(expansions or {})
    history = concretize_history(path, model)
    flat = flatten(history, internal, expansions)
    prov = {"path": path.fingerprint(), "model": model.digest(), "mode": mode}
    full = build_spec(flat, prov)
    if mode == "full":
        return full
    if root is None:
        raise MinimalWithoutRoot("minimal mode needs a root cause")
    if root.function in internal:
        keep = {i.callee for i in expansions.get(root.seq, ())}
    else:
        keep = dependencies(path, root)
    return full.restricted(keep)


# -- C emission -------------------------------------------------------------

def c_value(v: int) -> str:
    v = to_signed(v)
    return f"{v:#x}" if v >= 0 else str(v)


_HEADERS = [
    ("windows.h", ("BOOL", "DWORD", "HANDLE", "LPCSTR", "LPVOID", "LPSECURITY_ATTRIBUTES")),
    ("sys/types.h", ("pid_t", "uid_t", "ssize_t", "size_t")),
    ("sys/socket.h", ("socklen_t", "struct sockaddr")),
    ("time.h", ("clock_t", "time_t")),
]


def _includes(types: list[str], preloads: bool) -> list[str]:
    text = " ".join(types)
    inc = [h for h, words in _HEADERS if any(w in text for w in words)]
    if preloads:
        inc += ["stdlib.h", "string.h"]
    return [f"#include <{h}>" for h in dict.fromkeys(inc)]


def _ident(name: str) -> str:
    return "".join(c if c.isalnum() or c == "_" else "_" for c in name)


def emit_c(spec: PatchSpec, registry: StubRegistry) -> str:
    """Single translation unit replacing each patched function's body."""
    protos = {}
    for name in spec.functions():
        if name not in registry:
            raise MissingPrototype(name)
        protos[name] = registry[name]
    types = []
    for pr in protos.values():
        types.append(pr.return_type)
        types += [p.type for p in pr.params]

    out = ["/* Generated patch: compile as a shared library and preload it into the sample. */"]
    if spec.provenance:
        out.append("/* provenance: " + ", ".join(f"{k}={v}" for k, v in sorted(spec.provenance.items())) + " */")
    out += _includes(types, bool(spec.preloads))
    out.append("")

    for s in spec.schedules:
        pr = protos[s.function]
        if len(s.returns) == 1:
            out += [f"{pr.signature()}{{", f"    return {c_value(s.returns[0])};", "}", ""]
            continue
        var = f"angr_global_var_{_ident(s.function)}"
        out.append(f"static int {var} = 0;")
        out.append(f"{pr.signature()}{{")
        out.append(f"    {var} = {var} + 1;")
        for i, v in enumerate(s.returns, 1):
            out += [f"    if ({var} == {i}){{", f"        return {c_value(v)};", "    }"]
        out.append(f"    /* invocations after #{len(s.returns)} repeat the last value */")
        out += [f"    return {c_value(s.returns[-1])};", "}", ""]

    for p in spec.preloads:
        pr = protos[p.function]
        name = _ident(p.function)
        copy = (f"    strcpy (addr_{name}, STR_{name});" if b"\0" not in p.data
                else f"    memcpy (addr_{name}, STR_{name}, {len(p.data) + 1});")
        out += [
            f'#define STR_{name} "{escape_bytes(p.data)}"',
            f"void *addr_{name};",
            "__attribute__((constructor))",
            f"static void init_{name} (void){{",
            f"    addr_{name} = (char *) malloc ({p.size});",
            copy,
            "}",
            f"{pr.signature()}{{",
            f"    return ({pr.return_type}) addr_{name};",
            "}",
            "",
        ]
    return "\n".join(out)
