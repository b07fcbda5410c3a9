"""Naive-Bayes suspicion scoring over API references, path filtering and path diffing."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .callgraph import CallGraph
from .solver import ConcreteInvocation, Model, concretize_history
from .symexec import PathSet, PathState, Status

log = logging.getLogger(__name__)

DEFAULT_PRIOR = 0.5
DEFAULT_THRESHOLD = 0.70


class EmptyCorpus(Exception):
    pass


class UnknownFunction(Exception):
    pass


class NoDivergence(Exception):
    pass


@dataclass(frozen=True)
class BayesModel:
    likelihoods: dict[str, tuple[float, float]]  # api -> (P(api|mal), P(api|ben))
    prior: float = DEFAULT_PRIOR
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")
        if not 0.0 < self.prior < 1.0:
            raise ValueError("prior must lie in (0, 1)")

    def posterior(self, api: str) -> float:
        """P(malicious | api referenced); APIs absent from training score the prior."""
        if api not in self.likelihoods:
            return self.prior
        pm, pb = self.likelihoods[api]
        num = pm * self.prior
        return num / (num + pb * (1.0 - self.prior))

    def flags(self, api: str) -> bool:
        return self.posterior(api) >= self.threshold

    def with_threshold(self, threshold: float) -> "BayesModel":
        return BayesModel(self.likelihoods, self.prior, threshold)

    def dumps(self) -> str:
        lines = [f"prior={self.prior!r} threshold={self.threshold!r}"]
        for api in sorted(self.likelihoods):
            pm, pb = self.likelihoods[api]
            lines.append(f"{api} {pm!r} {pb!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "BayesModel":
        lines = [l.strip() for l in text.splitlines() if l.strip() and not l.startswith("#")]
        if not lines:
            raise EmptyCorpus("model file is empty")
        header = dict(kv.split("=", 1) for kv in lines[0].split())
        table = {}
        for l in lines[1:]:
            api, pm, pb = l.split()
            table[api] = (float(pm), float(pb))
        if not table:
            raise EmptyCorpus("model file lists no APIs")
        return cls(table, float(header.get("prior", DEFAULT_PRIOR)),
                   float(header.get("threshold", DEFAULT_THRESHOLD)))

    @classmethod
    def load(cls, path: str | Path) -> "BayesModel":
        return cls.loads(Path(path).read_text())


def train(benign: Sequence[Iterable[str]], malicious: Sequence[Iterable[str]],
          prior: float = DEFAULT_PRIOR, threshold: float = DEFAULT_THRESHOLD) -> BayesModel:
    """Laplace-smoothed per-API presence likelihoods for each class."""
    if not benign or not malicious:
        raise EmptyCorpus("both benign and malicious corpora must be non-empty")
    ben = [set(s) for s in benign]
    mal = [set(s) for s in malicious]
    apis = sorted(set().union(*ben, *mal))
    table = {}
    for api in apis:
        cm = sum(api in s for s in mal)
        cb = sum(api in s for s in ben)
        table[api] = ((cm + 1) / (len(mal) + 2), (cb + 1) / (len(ben) + 2))
    return BayesModel(table, prior, threshold)


def read_import_sets(path: str | Path) -> list[list[str]]:
    """One import set per line, comma-separated API names."""
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            out.append([a.strip() for a in line.split(",") if a.strip()])
    return out


def score_function(fn: str, cg: CallGraph, m: BayesModel, transitive: bool = False) -> tuple[float, bool]:
    if not cg.is_internal(fn):
        raise UnknownFunction(fn)
    refs = cg.external_refs(fn, transitive)
    post = max((m.posterior(a) for a in refs), default=m.prior)
    return post, post >= m.threshold


@dataclass
class SuspicionReport:
    functions: dict[str, tuple[float, bool]]
    model: BayesModel
    external: set[str] = field(default_factory=set)

    def flagged_functions(self) -> list[str]:
        return [f for f, (_, flag) in self.functions.items() if flag]

    def path_reasons(self, path: PathState) -> list[str]:
        """Flagged internal functions traversed and flagged APIs invoked by ``path``."""
        reasons = []
        for r in path.history:
            if r.callee in self.functions:
                if self.functions[r.callee][1]:
                    reasons.append(r.callee)
            elif self.model.flags(r.callee):
                reasons.append(r.callee)
        return list(dict.fromkeys(reasons))

    def is_suspicious(self, path: PathState) -> bool:
        if path.status is Status.EVADED:
            return False
        return bool(self.path_reasons(path))


def build_report(cg: CallGraph, m: BayesModel, transitive: bool = False) -> SuspicionReport:
    funcs = {n: score_function(n, cg, m, transitive) for n in cg.nodes if cg.is_internal(n)}
    return SuspicionReport(funcs, m, set(cg.external))


def filter_paths(paths: PathSet, report: SuspicionReport) -> tuple[PathSet, PathSet]:
    sus = [p for p in paths if report.is_suspicious(p)]
    ben = [p for p in paths if not report.is_suspicious(p)]
    if not sus:
        log.warning("no malicious path among %d explored paths", len(paths))
    return PathSet(sus, paths.truncated), PathSet(ben, paths.truncated)


@dataclass(frozen=True)
class RootCause:
    seq: int
    function: str
    suspicious_return: int | bytes | None
    benign_return: int | bytes | None
    benign_function: str | None = None

    @property
    def unmatched(self) -> bool:
        return self.benign_function != self.function


def _concrete(inv: ConcreteInvocation) -> int | bytes:
    return inv.buffer if inv.buffer is not None else inv.signed_ret


def diff_histories(sus: Sequence[ConcreteInvocation], ben: Sequence[ConcreteInvocation]) -> RootCause:
    for a, b in zip(sus, ben):
        if a.callee != b.callee:
            return RootCause(a.seq, a.callee, _concrete(a), None, b.callee)
        if a.key() != b.key():
            return RootCause(a.seq, a.callee, _concrete(a), _concrete(b), b.callee)
    if len(sus) > len(ben):
        a = sus[len(ben)]
        return RootCause(a.seq, a.callee, _concrete(a), None, None)
    if len(ben) > len(sus):
        b = ben[len(sus)]
        return RootCause(b.seq, b.callee, None, _concrete(b), b.callee)
    raise NoDivergence("concretized histories are identical")


def diff_paths(suspicious: PathState, benign: PathState, models: tuple[Model, Model]) -> RootCause:
    """First unmatched or mismatched invocation between two concretized paths."""
    return diff_histories(concretize_history(suspicious, models[0]),
                          concretize_history(benign, models[1]))


def common_prefix(a: Sequence[ConcreteInvocation], b: Sequence[ConcreteInvocation]) -> int:
    n = 0
    for x, y in zip(a, b):
        if x.key() != y.key():
            break
        n += 1
    return n
