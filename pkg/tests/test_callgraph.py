import pytest

from malverse.callgraph import NoEntry, NoExit, anchors_for, build_callgraph, detect_anchors
from malverse.ir import parse_program

from conftest import load


def test_nested_check_graph():
    cg = build_callgraph(load("nested_check"))
    assert cg.export() == ("main -> check\nmain -> malware\n"
                           "check -> geteuid [external]\nmalware -> socket [external]\n")
    assert cg.is_internal("check") and cg.is_external("geteuid")
    assert cg.external_refs("main") == []
    assert sorted(cg.external_refs("main", transitive=True)) == ["geteuid", "socket"]


def test_entry_and_exits():
    p = load("code11_cwd")
    a = detect_anchors(build_callgraph(p), p)
    assert a.entry == "main"
    assert a.exits == (("done", 0),)
    assert a.runners_up == ("malware", "goodware")


def test_entry_skips_leaf_functions():
    p = parse_program("fn leaf() { e: ret } fn main() { e: call leaf() ret }")
    assert detect_anchors(build_callgraph(p), p).entry == "main"


def test_no_entry():
    p = parse_program("fn a() { e: ret } fn b() { e: halt }")
    with pytest.raises(NoEntry):
        detect_anchors(build_callgraph(p), p)


def test_no_exit():
    p = parse_program("fn main() { e: call ptrace() halt }")
    with pytest.raises(NoExit):
        detect_anchors(build_callgraph(p), p)


def test_anchors_for_callee():
    p = load("nested_check")
    a = anchors_for(p, "check")
    assert a.entry == "check" and a.exits == (("sandboxed", 0), ("ok", 0))


def test_recursive_graph_terminates():
    p = parse_program("fn main() { e: call f() ret } fn f() { e: call f() call g() ret } "
                      "fn g() { e: call main() call sleep() ret }")
    cg = build_callgraph(p)
    assert cg.external_refs("main", transitive=True) == ["sleep"]
