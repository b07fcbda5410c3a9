"""End-to-end defusing pipeline: explore, triage, diff, patch, validate."""

from __future__ import annotations

import json
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

from . import ir
from .callgraph import CallGraph, build_callgraph, detect_anchors
from .patchgen import PatchSpec, emit_c, flatten, synthesize
from .prototypes import StubRegistry
from .sandbox import Verdict, validate_patch
from .solver import ConcreteInvocation, Model, Sat, concretize_history, model_for
from .symexec import Limits, PathSet, PathState, Status, explore, refine
from .symexpr import Const, Constraint, cmp, symbols, to_signed
from .triage import (BayesModel, NoDivergence, RootCause, build_report, common_prefix,
                     diff_histories, filter_paths)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_STAGE_ERROR = 1
EXIT_NO_SUSPICIOUS = 2
EXIT_VALIDATION_FAILED = 3
MAX_REFINE_DEPTH = 8


class StageError(Exception):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def stage(name: str) -> Iterator[None]:
    try:
        yield
    except StageError:
        raise
    except Exception as e:  # noqa: BLE001 - every stage failure is reported with its tag
        raise StageError(name, e) from e


@dataclass
class PatchResult:
    name: str
    spec: PatchSpec
    source: str
    verdict: Verdict
    root_cause: RootCause | None = None
    benign_path: int | None = None


@dataclass
class AnalysisResult:
    report: dict
    patches: list[PatchResult] = field(default_factory=list)
    exit_code: int = EXIT_OK


def _value(v):
    return v.decode("latin-1") if isinstance(v, bytes) else v


def _history_json(hist: list[ConcreteInvocation], path: PathState) -> list[dict]:
    sites = {r.seq: r.callsite for r in path.history}
    out = []
    for h in hist:
        d = {"seq": h.seq, "callee": h.callee, "callsite": sites.get(h.seq, ""), "return": h.signed_ret}
        if h.buffer is not None:
            d["buffer"] = h.buffer.decode("latin-1")
        if h.induced_by is not None:
            d["induced_by_buffer_of"] = h.induced_by
        out.append(d)
    return out


class _Analysis:
    def __init__(self, p: ir.Program, cg: CallGraph, registry: StubRegistry, limits: Limits):
        self.p = p
        self.cg = cg
        self.registry = registry
        self.limits = limits
        self.internal = {n for n in cg.nodes if cg.is_internal(n)}
        self.refined: dict[str, PathSet] = {}
        self.notes: list[str] = []

    def expansions(self, path: PathState, model: Model, depth: int = 0,
                   active: tuple[str, ...] = ()) -> dict[int, list[ConcreteInvocation]]:
        """Refine every internal invocation whose return steers ``path``."""
        constrained = {s.name for c in path.constraints for s in symbols(c.expr)}
        out = {}
        for r in path.history:
            if r.callee not in self.internal or r.ret_sym not in constrained:
                continue
            if depth >= MAX_REFINE_DEPTH or r.callee in active:
                self.notes.append(f"refinement of {r.callee} stopped (depth/recursion guard)")
                continue
            inner = self.refine_for(r.callee, model.value(r.ret_sym))
            if inner is None:
                self.notes.append(f"no path inside {r.callee} returns {to_signed(model.value(r.ret_sym))}")
                continue
            ipath, imodel = inner
            sub = self.expansions(ipath, imodel, depth + 1, active + (r.callee,))
            out[r.seq] = flatten(concretize_history(ipath, imodel), self.internal, sub)
        return out

    def refine_for(self, fn: str, required: int) -> tuple[PathState, Model] | None:
        if fn not in self.refined:
            self.refined[fn] = refine(self.p, self.cg, None, fn, self.registry, self.limits)
        for ip in self.refined[fn]:
            if ip.status is not Status.REACHED_EXIT:
                continue
            want = Constraint(cmp("eq", ip.ret_value, Const(required)))
            if isinstance(ip.ret_value, Const):
                if ip.ret_value.value != required:
                    continue
                extra = []
            else:
                extra = [want]
            shadow = ip.fork()
            shadow.constraints = ip.constraints + extra
            out = model_for(shadow)
            if isinstance(out, Sat):
                return shadow, out.model
        return None


def analyze(source: str, bayes: BayesModel, registry: StubRegistry, *, sample: str = "sample",
            transitive: bool = False, threshold: float | None = None,
            limits: Limits = Limits()) -> AnalysisResult:
    """Run the whole pipeline on MVIR ``source``; raises StageError on stage failures."""
    with stage("parse"):
        p = ir.parse_program(source)
        diags = ir.validate(p)
        if diags:
            raise ValueError("; ".join(map(str, diags)))
    with stage("callgraph"):
        cg = build_callgraph(p)
        anchors = detect_anchors(cg, p)
    with stage("explore"):
        paths = explore(p, anchors, registry, limits)
    with stage("triage"):
        if threshold is not None:
            bayes = bayes.with_threshold(threshold)
        suspicion = build_report(cg, bayes, transitive)
        sus_set, _ = filter_paths(paths, suspicion)
        sus_ids = {id(x) for x in sus_set}

    an = _Analysis(p, cg, registry, limits)
    models: list[Model | None] = []
    hists: list[list[ConcreteInvocation] | None] = []
    path_entries = []
    with stage("solve"):
        for i, path in enumerate(paths):
            out = model_for(path)
            m = out.model if isinstance(out, Sat) else None
            models.append(m)
            hists.append(concretize_history(path, m) if m is not None else None)
            path_entries.append({
                "index": i,
                "fingerprint": path.fingerprint(),
                "status": path.status.value,
                "exit_site": path.exit_site,
                "marks": path.marks,
                "constraints": [str(c) for c in path.constraints],
                "solver": "sat" if m is not None else (f"unknown: {out.reason}" if hasattr(out, "reason") else "unsat"),
                "history": _history_json(hists[-1], path) if m is not None else
                           [{"seq": r.seq, "callee": r.callee, "callsite": r.callsite} for r in path.history],
                "suspicious": id(path) in sus_ids,
                "reasons": suspicion.path_reasons(path) if id(path) in sus_ids else [],
                "notes": path.notes,
            })

    results: list[PatchResult] = []
    sus_entries = []
    failed = False
    stem = sample
    for i, path in enumerate(paths):
        if id(path) not in sus_ids:
            continue
        m = models[i]
        entry = {"path": i, "root_causes": []}
        sus_entries.append(entry)
        if m is None:
            entry["error"] = "path condition could not be solved; no patch"
            failed = True
            continue
        expected = (path.exit_site, path.marks)
        with stage("synthesize"):
            exp = an.expansions(path, m)
            full = synthesize(path, m, mode="full", internal=an.internal, expansions=exp)
        with stage("emit"):
            src = emit_c(full, registry)
        with stage("validate"):
            verdict = validate_patch(p, full, expected, registry=registry, entry=anchors.entry)
        failed |= not verdict.passed
        name = f"{stem}.p{i}"
        results.append(PatchResult(name, full, src, verdict))
        entry["full_patch"] = {"name": name, "spec": full.to_json(), "verdict": str(verdict),
                               "observed": list(verdict.observed[:1]) + [list(verdict.observed[1])]}

        # benign paths ranked by how long they agree with the suspicious one
        hist = hists[i]
        ranked = sorted((j for j, q in enumerate(paths) if id(q) not in sus_ids and hists[j] is not None),
                        key=lambda j: -common_prefix(hist, hists[j]))
        cumulative = PatchSpec()
        seen: set = set()
        for j in ranked:
            try:
                rc = diff_histories(hist, hists[j])
            except NoDivergence:
                continue
            with stage("synthesize"):
                mini = synthesize(path, m, rc, "minimal", internal=an.internal, expansions=exp)
            rc_entry = {"benign_path": j, "seq": rc.seq, "function": rc.function,
                        "suspicious_return": _value(rc.suspicious_return),
                        "benign_return": _value(rc.benign_return),
                        "benign_function": rc.benign_function}
            if not mini.schedules and not mini.preloads:
                rc_entry["patch"] = None
                entry["root_causes"].append(rc_entry)
                continue
            if mini.signature() in seen:
                rc_entry["patch"] = "duplicate"
                entry["root_causes"].append(rc_entry)
                continue
            seen.add(mini.signature())
            cumulative = cumulative.merged(mini)
            with stage("emit"):
                msrc = emit_c(mini, registry)
            with stage("validate"):
                mv = validate_patch(p, cumulative, expected, registry=registry, entry=anchors.entry)
            failed |= not mv.passed
            k = len([r for r in entry["root_causes"] if isinstance(r.get("patch"), dict)])
            mname = f"{stem}.p{i}.rc{k}"
            results.append(PatchResult(mname, mini, msrc, mv, rc, j))
            rc_entry["patch"] = {"name": mname, "spec": mini.to_json(), "verdict": str(mv),
                                 "validated_with": cumulative.functions()}
            entry["root_causes"].append(rc_entry)

    if not sus_entries:
        code = EXIT_NO_SUSPICIOUS
    elif failed:
        code = EXIT_VALIDATION_FAILED
    else:
        code = EXIT_OK
    report = {
        "sample": sample,
        "entry": anchors.entry,
        "exits": [f"{anchors.entry}:{b}:{k}" for b, k in anchors.exits],
        "entry_runners_up": list(anchors.runners_up),
        "paths_total": len(paths),
        "paths_by_status": paths.by_status(),
        "truncated": paths.truncated,
        "model": {"prior": bayes.prior, "threshold": bayes.threshold, "transitive": transitive},
        "functions": {f: {"posterior": post, "flagged": flag} for f, (post, flag) in suspicion.functions.items()},
        "paths": path_entries,
        "suspicious": sus_entries,
        "conventions": ["solver models prefer minimal |value| per symbol in invocation order",
                        "scheduled functions repeat their last value past the end of the schedule"],
        "notes": an.notes + ([] if sus_entries else ["no malicious path found"]),
        "exit_code": code,
    }
    return AnalysisResult(report, results, code)


def write_outputs(result: AnalysisResult, out_dir: str | Path, sample: str) -> list[Path]:
    """Report JSON plus C source and PatchSpec JSON for every synthesized patch."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name: str, text: str):
        path = out / name
        path.write_text(text)
        written.append(path)

    for r in result.patches:
        put(f"{r.name}.patch.c", r.source)
        put(f"{r.name}.patch.json", r.spec.dumps())
    first_full = next((r for r in result.patches if r.root_cause is None), None)
    if first_full is not None:
        put(f"{sample}.patch.c", first_full.source)
        put(f"{sample}.patch.json", first_full.spec.dumps())
    result.report["files"] = [p.name for p in written] + [f"{sample}.report.json"]
    put(f"{sample}.report.json", json.dumps(result.report, indent=2, sort_keys=True) + "\n")
    return written
