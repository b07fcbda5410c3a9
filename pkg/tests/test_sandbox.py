import random

from malverse import ir
from malverse.callgraph import build_callgraph, detect_anchors
from malverse.patchgen import MemoryPreload, PatchSpec, ReturnSchedule
from malverse.sandbox import Exit, MarkEvent, StepLimit, run, run_stubbed, validate_patch
from malverse.symexec import Limits, Status, explore
from malverse.symexpr import MASK, evaluate

from conftest import load


def test_unpatched_code2_evades(registry):
    t = run(load("code2_ptrace"), None, registry=registry)
    # an unpatched external returns 0, which is not the debugger signal
    assert t.exit_site == "main:cont:1" and t.marks() == ["payload"]


def test_schedule_repeats_last(registry):
    p = ir.parse_program("fn main() { e: a = call f() b = call f() c = call f() "
                         "x = add a, b y = add x, c ret y }")
    t = run(p, PatchSpec((ReturnSchedule("f", (1, 10)),)), registry=registry)
    assert t.end == Exit("main:e:5", 21)
    assert [i.ret for i in t.invocations()] == [1, 10, 10]


def test_stateless_patch_fails_double_ptrace(registry):
    p = load("code8_double_ptrace")
    expected = ("main:cont:1", ["payload"])
    assert not validate_patch(p, PatchSpec((ReturnSchedule("ptrace", (0,)),)), expected, registry=registry).passed
    assert validate_patch(p, PatchSpec((ReturnSchedule("ptrace", (0, -1)),)), expected, registry=registry).passed


def test_preload_drives_real_comparison(registry):
    p = load("code11_cwd")
    t = run(p, PatchSpec((), (MemoryPreload("getcwd", b"BOMB"),)), registry=registry)
    assert t.marks() == ["payload"]
    assert [i.callee for i in t.invocations()] == ["getcwd", "strcmp", "socket", "connect"]
    t = run(p, PatchSpec((), (MemoryPreload("getcwd", b"/tmp"),)), registry=registry)
    assert t.marks() == []


def test_memcmp_uses_length(registry):
    t = run(load("code4_debugme"), None, registry=registry)
    # "DEBUGME" and "DEBUGYOU" differ within the first 7 bytes
    assert t.exit_site == "<evade>"


def test_nested_marks_are_not_top_level(registry):
    p = ir.parse_program("fn main() { e: call g() mark top ret } fn g() { e: mark inner ret }")
    t = run(p, registry=registry)
    assert t.marks() == ["top"]
    assert t.marks(depth=None) == ["inner", "top"]
    assert MarkEvent("inner", 1) in t.events


def test_step_limit(registry):
    p = ir.parse_program("fn main() { e: call f() jmp e x: ret }")
    t = run(p, step_limit=100, registry=registry)
    assert isinstance(t.end, StepLimit) and t.exit_site is None


def test_trace_jsonl(registry):
    t = run(load("code2_ptrace"), PatchSpec((ReturnSchedule("ptrace", (-1,)),)), registry=registry)
    assert t.jsonl().splitlines() == [
        '{"event": "invocation", "callee": "ptrace", "args": [0, 0, 0, 0], "ret": -1}',
        '{"event": "exit", "site": "<evade>", "value": 0}',
    ]


def test_run_stubbed_answers_internal_calls(registry):
    p = load("nested_check")
    seen = []
    t = run_stubbed(p, "main", lambda seq, callee, args: seen.append(callee) or 1, registry)
    assert seen == ["check"] and t.exit_site == "<evade>"


# -- differential: concrete interpreter vs symbolic evaluation --------------------

def _random_program(rng: random.Random) -> ir.Program:
    regs = ["a", "b"]
    body = ["a = call input()", "b = call input()"]
    for i in range(rng.randint(1, 6)):
        dst = f"t{i}"
        l, r = rng.choice(regs), rng.choice(regs)
        if rng.random() < 0.25:
            body.append(f"k{i} = const {rng.choice([0, 1, -1, 7, 255, 2 ** 63, -(2 ** 63)])}")
            r = f"k{i}"
        body.append(f"{dst} = {rng.choice(ir.BINOPS)} {l}, {r}")
        regs.append(dst)
    c1, c2 = rng.choice(regs), rng.choice(regs)
    out = rng.choice(regs)
    text = ("fn main() {\nentry:\n  " + "\n  ".join(body) +
            f"\n  c = cmp {rng.choice(ir.CONDS)} {c1}, {c2}\n  br c, yes, no\n"
            f"yes:\n  mark hit\n  ret {out}\nno:\n  ret {c1}\n}}\n")
    return ir.parse_program(text)


def _inputs(rng):
    pick = rng.random()
    if pick < 0.4:
        return rng.randint(-4, 4) & MASK
    if pick < 0.6:
        return rng.choice([2 ** 63 - 1, 2 ** 63, MASK, 2 ** 32])
    return rng.getrandbits(64)


def differential(n_programs: int, per_program: int, seed: int, registry) -> int:
    rng = random.Random(seed)
    mismatches = 0
    for _ in range(n_programs):
        p = _random_program(rng)
        cg = build_callgraph(p)
        paths = [s for s in explore(p, detect_anchors(cg, p), registry, Limits())
                 if s.status is Status.REACHED_EXIT]
        for _ in range(per_program):
            vals = [_inputs(rng), _inputs(rng)]
            t = run_stubbed(p, "main", lambda seq, callee, args: vals[seq], registry)
            env = {"input_0": vals[0], "input_1": vals[1]}
            live = [s for s in paths if all(evaluate(c.expr, env) for c in s.constraints)]
            if len(live) != 1:
                mismatches += 1
                continue
            s = live[0]
            if (s.exit_site, s.marks, evaluate(s.ret_value, env)) != (t.exit_site, t.marks(), t.end.value):
                mismatches += 1
    return mismatches


def test_interpreter_matches_symbolic_evaluation(registry):
    assert differential(200, 50, seed=7, registry=registry) == 0
