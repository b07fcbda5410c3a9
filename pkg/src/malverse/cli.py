"""Command-line interface: ``malverse <subcommand>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import ir
from .callgraph import build_callgraph, detect_anchors
from .patchgen import PatchSpec, emit_c, synthesize
from .pipeline import EXIT_STAGE_ERROR, StageError, analyze, write_outputs
from .prototypes import load_registry
from .sandbox import run
from .solver import Sat, concretize_history, model_for
from .symexec import Limits, explore
from .triage import (BayesModel, DEFAULT_PRIOR, DEFAULT_THRESHOLD, build_report, diff_histories,
                     filter_paths, read_import_sets, score_function, train, common_prefix)

log = logging.getLogger("malverse")


def _program(path: str) -> ir.Program:
    return ir.parse_program(Path(path).read_text())


def _limits(args) -> Limits:
    return Limits(max_states=args.max_states, max_steps=args.max_steps)


def paths_json(paths) -> dict:
    out = []
    for p in paths:
        hist = [{"seq": r.seq, "callee": r.callee, "callsite": r.callsite,
                 "args": [str(a) for a in r.args], "ret": str(r.ret),
                 **({"buffer_sym": r.buffer_sym} if r.buffer_sym else {})} for r in p.history]
        out.append({"fingerprint": p.fingerprint(), "status": p.status.value, "exit_site": p.exit_site,
                    "constraints": [str(c) for c in p.constraints], "history": hist,
                    "marks": p.marks, "notes": p.notes})
    return {"truncated": paths.truncated, "dropped": paths.dropped, "paths": out}


def cmd_parse(args) -> int:
    p = _program(args.file)
    diags = ir.validate(p)
    for d in diags:
        print(d, file=sys.stderr)
    if not args.quiet:
        sys.stdout.write(ir.format_program(p))
    return 1 if diags else 0


def cmd_cg(args) -> int:
    sys.stdout.write(build_callgraph(_program(args.file)).export())
    return 0


def cmd_explore(args) -> int:
    p = _program(args.file)
    cg = build_callgraph(p)
    paths = explore(p, detect_anchors(cg, p), load_registry(args.protos), _limits(args))
    print(json.dumps(paths_json(paths), indent=2))
    return 0


def cmd_train(args) -> int:
    m = train(read_import_sets(args.benign), read_import_sets(args.malicious), args.prior, args.threshold)
    text = m.dumps()
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_score(args) -> int:
    m = BayesModel.load(args.model)
    if args.threshold is not None:
        m = m.with_threshold(args.threshold)
    cg = build_callgraph(_program(args.file))
    for fn in cg.nodes:
        if cg.is_internal(fn):
            post, flag = score_function(fn, cg, m, args.transitive)
            print(f"{fn} {post:.6f} {'flagged' if flag else '-'}")
    return 0


def cmd_patch(args) -> int:
    p = _program(args.file)
    cg = build_callgraph(p)
    registry = load_registry(args.protos)
    paths = explore(p, detect_anchors(cg, p), registry, _limits(args))
    report = build_report(cg, BayesModel.load(args.model), args.transitive)
    sus, ben = filter_paths(paths, report)
    if not sus.paths:
        print("no malicious path found", file=sys.stderr)
        return 2
    path = sus.paths[args.path_index]
    out = model_for(path)
    if not isinstance(out, Sat):
        print(f"path condition not solved: {out}", file=sys.stderr)
        return 1
    internal = {n for n in cg.nodes if cg.is_internal(n)}
    root = None
    if args.mode == "minimal":
        hist = concretize_history(path, out.model)
        others = [(q, model_for(q)) for q in ben]
        others = [concretize_history(q, o.model) for q, o in others if isinstance(o, Sat)]
        others.sort(key=lambda h: -common_prefix(hist, h))
        if not others:
            print("no benign path to diff against", file=sys.stderr)
            return 1
        root = diff_histories(hist, others[0])
    spec = synthesize(path, out.model, root, args.mode, internal=internal)
    src = emit_c(spec, registry)
    if args.json:
        Path(args.json).write_text(spec.dumps())
    if args.output:
        Path(args.output).write_text(src)
    else:
        sys.stdout.write(src)
    return 0


def cmd_run(args) -> int:
    p = _program(args.file)
    patch = PatchSpec.loads(Path(args.patch).read_text()) if args.patch else PatchSpec()
    trace = run(p, patch, args.step_limit, load_registry(args.protos))
    sys.stdout.write(trace.jsonl())
    return 0


def cmd_analyze(args) -> int:
    sample = Path(args.file).stem
    try:
        try:
            source = Path(args.file).read_text()
        except OSError as e:
            raise StageError("parse", e) from e
        try:
            bayes = BayesModel.load(args.model)
        except Exception as e:  # noqa: BLE001
            raise StageError("model", e) from e
        result = analyze(source, bayes, load_registry(args.protos), sample=sample,
                         transitive=args.transitive, threshold=args.threshold, limits=_limits(args))
    except StageError as e:
        print(f"error {e}", file=sys.stderr)
        return EXIT_STAGE_ERROR
    written = write_outputs(result, args.out, sample)
    for s in result.report["suspicious"]:
        full = s.get("full_patch")
        if full:
            print(f"path {s['path']}: full patch {full['name']} {full['verdict']}")
        for rc in s["root_causes"]:
            patch = rc["patch"]
            if isinstance(patch, dict):
                print(f"path {s['path']}: root cause {rc['function']}#{rc['seq']} -> {patch['name']} {patch['verdict']}")
    for note in result.report["notes"]:
        print(f"note: {note}")
    print(f"wrote {len(written)} files to {args.out} (exit {result.exit_code})")
    return result.exit_code


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="malverse", description="Defuse logic bombs in MVIR samples.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def limits(sp):
        sp.add_argument("--max-states", type=int, default=4096)
        sp.add_argument("--max-steps", type=int, default=100_000)

    def protos(sp):
        sp.add_argument("--protos", help="prototype database (default: ./apis.proto or bundled)")

    sp = sub.add_parser("parse", help="parse, validate and pretty-print a program")
    sp.add_argument("file")
    sp.add_argument("-q", "--quiet", action="store_true")
    sp.set_defaults(func=cmd_parse)

    sp = sub.add_parser("cg", help="call graph operations")
    cg_sub = sp.add_subparsers(dest="cg_command", required=True)
    ep = cg_sub.add_parser("export", help="print the call graph as an edge list")
    ep.add_argument("file")
    ep.set_defaults(func=cmd_cg)

    sp = sub.add_parser("explore", help="symbolically explore the entry function")
    sp.add_argument("file")
    limits(sp)
    protos(sp)
    sp.set_defaults(func=cmd_explore)

    sp = sub.add_parser("train", help="train the API suspicion model")
    sp.add_argument("--benign", required=True)
    sp.add_argument("--malicious", required=True)
    sp.add_argument("--prior", type=float, default=DEFAULT_PRIOR)
    sp.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    sp.add_argument("-o", "--output")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("score", help="score internal functions of a program")
    sp.add_argument("file")
    sp.add_argument("--model", required=True)
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--transitive", action="store_true")
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("patch", help="synthesize a patch for one suspicious path")
    sp.add_argument("file")
    sp.add_argument("--model", required=True)
    sp.add_argument("--mode", choices=["full", "minimal"], default="full")
    sp.add_argument("--path-index", type=int, default=0)
    sp.add_argument("--transitive", action="store_true")
    sp.add_argument("--json", help="also write the PatchSpec JSON here")
    sp.add_argument("-o", "--output")
    limits(sp)
    protos(sp)
    sp.set_defaults(func=cmd_patch)

    sp = sub.add_parser("run", help="run a program concretely under a patch")
    sp.add_argument("file")
    sp.add_argument("--patch")
    sp.add_argument("--step-limit", type=int, default=100_000)
    protos(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("analyze", help="full pipeline: explore, triage, patch, validate")
    sp.add_argument("file")
    sp.add_argument("--model", required=True)
    sp.add_argument("--transitive", action="store_true")
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--out", default="out")
    limits(sp)
    protos(sp)
    sp.set_defaults(func=cmd_analyze)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ir.ParseError, OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
