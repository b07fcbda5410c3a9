"""Call graph construction and analysis anchor detection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .ir import Program

log = logging.getLogger(__name__)


class NoEntry(Exception):
    pass


class NoExit(Exception):
    pass


@dataclass(frozen=True)
class CallSite:
    function: str
    block: str
    index: int

    def __str__(self):
        return f"{self.function}:{self.block}:{self.index}"


@dataclass(frozen=True)
class Edge:
    caller: str
    callee: str
    site: CallSite


@dataclass
class CallGraph:
    nodes: list[str]
    edges: list[Edge]
    external: set[str] = field(default_factory=set)

    def is_external(self, name: str) -> bool:
        return name in self.external

    def is_internal(self, name: str) -> bool:
        return name in self.nodes and name not in self.external

    def callees(self, name: str) -> list[str]:
        return list(dict.fromkeys(e.callee for e in self.edges if e.caller == name))

    def external_refs(self, name: str, transitive: bool = False) -> list[str]:
        """External APIs referenced by ``name``, optionally through internal callees."""
        seen = {name}
        stack = [name]
        refs: dict[str, None] = {}
        while stack:
            cur = stack.pop()
            for c in self.callees(cur):
                if self.is_external(c):
                    refs[c] = None
                elif transitive and c not in seen:
                    seen.add(c)
                    stack.append(c)
            if not transitive:
                break
        return list(refs)

    def export(self) -> str:
        lines = []
        for e in self.edges:
            suffix = " [external]" if self.is_external(e.callee) else ""
            lines.append(f"{e.caller} -> {e.callee}{suffix}")
        return "\n".join(lines) + ("\n" if lines else "")


@dataclass(frozen=True)
class AnalysisAnchors:
    entry: str
    exits: tuple[tuple[str, int], ...]
    runners_up: tuple[str, ...] = ()


def build_callgraph(p: Program) -> CallGraph:
    nodes = [f.name for f in p.functions]
    external: dict[str, None] = {}
    edges = []
    for f in p.functions:
        for label, idx, call in f.calls():
            if p.is_external(call.callee):
                external[call.callee] = None
            edges.append(Edge(f.name, call.callee, CallSite(f.name, label, idx)))
    return CallGraph(nodes + list(external), edges, set(external))


def detect_anchors(cg: CallGraph, p: Program) -> AnalysisAnchors:
    """Entry is the first function in source order that calls anything; exits are its returns."""
    callers = [f.name for f in p.functions if any(e.caller == f.name for e in cg.edges)]
    if not callers:
        raise NoEntry("no function invokes other functions")
    entry, runners_up = callers[0], tuple(callers[1:])
    if runners_up:
        log.info("entry %s chosen; other calling functions: %s", entry, ", ".join(runners_up))
    exits = tuple(p.function(entry).ret_sites())
    if not exits:
        raise NoExit(f"entry function {entry!r} has no return site")
    return AnalysisAnchors(entry, exits, runners_up)


def anchors_for(p: Program, name: str) -> AnalysisAnchors:
    """Anchors for an explicitly chosen function (used when refining into a callee)."""
    exits = tuple(p.function(name).ret_sites())
    if not exits:
        raise NoExit(f"function {name!r} has no return site")
    return AnalysisAnchors(name, exits)
