import shutil
import subprocess

import pytest
from hypothesis import given, strategies as st

from malverse.callgraph import build_callgraph, detect_anchors
from malverse.patchgen import (MemoryPreload, MinimalWithoutRoot, MissingModel, MissingPrototype,
                               PatchSpec, PreloadTooLong, ReturnSchedule, c_value, emit_c, synthesize)
from malverse.prototypes import (ArityMismatch, PrototypeError, StubKind, ingest_prototypes,
                                 parse_prototype)
from malverse.solver import model_for
from malverse.symexec import Limits, Status, explore
from malverse.triage import RootCause

from conftest import GOLDEN, load

GOLDEN_SPECS = {
    "counter_ptrace": PatchSpec((ReturnSchedule("ptrace", (0, -1)),)),
    "stalling": PatchSpec((ReturnSchedule("clock", (0, 11)), ReturnSchedule("sleep", (0,)))),
    "preload_getcwd": PatchSpec((), (MemoryPreload("getcwd", b"BOMB"),)),
    "windows": PatchSpec((ReturnSchedule("IsDebuggerPresent", (0,)),
                          ReturnSchedule("IsProcessorFeaturePresent", (1,)))),
}


@pytest.mark.parametrize("name", sorted(GOLDEN_SPECS))
def test_golden_c(name, registry):
    assert emit_c(GOLDEN_SPECS[name], registry) == (GOLDEN / f"{name}.c").read_text()


@pytest.mark.skipif(shutil.which("gcc") is None, reason="gcc not available")
@pytest.mark.parametrize("name", ["counter_ptrace", "stalling", "preload_getcwd"])
def test_golden_compiles(name, tmp_path):
    out = subprocess.run(["gcc", "-fsyntax-only", "-Wall", "-Werror", "-x", "c", str(GOLDEN / f"{name}.c")],
                         capture_output=True, text=True, cwd=tmp_path)
    assert out.returncode == 0, out.stderr


def test_c_value():
    assert [c_value(v) for v in (0, 11, -1, 2 ** 64 - 2)] == ["0x0", "0xb", "-1", "-2"]


def test_missing_prototype(registry):
    with pytest.raises(MissingPrototype):
        emit_c(PatchSpec((ReturnSchedule("no_such_api", (0,)),)), registry)


def test_preload_too_long():
    MemoryPreload("getcwd", b"x" * 99)
    with pytest.raises(PreloadTooLong):
        MemoryPreload("getcwd", b"x" * 100)


def test_spec_invariants():
    with pytest.raises(ValueError):
        ReturnSchedule("f", ())
    with pytest.raises(ValueError):
        PatchSpec((ReturnSchedule("f", (0,)), ReturnSchedule("f", (1,))))
    with pytest.raises(ValueError):
        PatchSpec((ReturnSchedule("f", (0,)),), (MemoryPreload("f", b"a"),))


names = st.sampled_from(["ptrace", "clock", "sleep", "getcwd", "time"])


@st.composite
def specs(draw):
    fs = draw(st.lists(names, unique=True, max_size=5))
    split = draw(st.integers(0, len(fs)))
    scheds = tuple(ReturnSchedule(f, tuple(draw(st.lists(st.integers(-2 ** 63, 2 ** 63 - 1),
                                                         min_size=1, max_size=4)))) for f in fs[:split])
    pre = tuple(MemoryPreload(f, draw(st.binary(max_size=20))) for f in fs[split:])
    return PatchSpec(scheds, pre, {"mode": "full"})


@given(specs())
def test_spec_json_roundtrip(spec):
    assert PatchSpec.loads(spec.dumps()) == spec


def test_merged_and_restricted():
    a = PatchSpec((ReturnSchedule("f", (0,)), ReturnSchedule("g", (1,))))
    b = PatchSpec((ReturnSchedule("g", (5,)),))
    assert a.merged(b).signature() == ((("f", (0,)), ("g", (5,))), ())
    assert a.restricted(["g"]).functions() == ["g"]


def _paths(name, registry):
    p = load(name)
    cg = build_callgraph(p)
    return p, cg, explore(p, detect_anchors(cg, p), registry, Limits())


def test_synthesize_full_code8(registry):
    _, _, paths = _paths("code8_double_ptrace", registry)
    path = next(s for s in paths if s.status is Status.REACHED_EXIT)
    m = model_for(path).model
    spec = synthesize(path, m)
    assert spec.signature() == ((("ptrace", (0, -1)),), ())
    assert spec.provenance["mode"] == "full"


def test_synthesize_minimal_keeps_dependencies(registry):
    _, _, paths = _paths("code11_cwd", registry)
    path = next(s for s in paths if s.marks == ["payload"])
    m = model_for(path).model
    root = RootCause(1, "strcmp", 0, 1, "strcmp")
    spec = synthesize(path, m, root, "minimal", internal={"main", "malware", "goodware"})
    # the comparator is induced by the preloaded buffer, so only getcwd is patched
    assert spec.signature() == ((), (("getcwd", b"BOMB", 100),))


def test_synthesize_errors(registry):
    _, _, paths = _paths("code2_ptrace", registry)
    path = paths.paths[0]
    with pytest.raises(MissingModel):
        synthesize(path, None)
    with pytest.raises(MinimalWithoutRoot):
        synthesize(path, model_for(path).model, mode="minimal")


# -- prototype ingestion ----------------------------------------------------------

def test_parse_prototype_examples():
    p = parse_prototype("long ptrace(int request, pid_t pid, void *addr, void *data);")
    assert (p.name, p.return_type, [x.type for x in p.params]) == ("ptrace", "long", ["int", "pid_t", "void *", "void *"])
    assert p.signature() == "long ptrace(int request, pid_t pid, void *addr, void *data)"
    p = parse_prototype("char *getcwd(char *buf, size_t size); @kind=buffer")
    assert p.return_type == "char *" and p.kind is StubKind.BUFFER
    p = parse_prototype("int printf(const char *format, ...);")
    assert p.variadic and p.descriptor.arity == 1
    p = parse_prototype("int execve(const char *path, char *const argv[], char *const envp[]);")
    assert [x.type for x in p.params] == ["const char *", "char *const *", "char *const *"]
    p = parse_prototype("unsigned int sleep(unsigned int);")
    assert p.params[0].type == "unsigned int" and p.params[0].name is None


def test_prototype_errors():
    with pytest.raises(PrototypeError):
        parse_prototype("this is not C")
    with pytest.raises(PrototypeError):
        parse_prototype("int strlen(const char *s); @kind=comparator")
    with pytest.raises(PrototypeError) as e:
        ingest_prototypes("int ok(void);\nbroken(\n")
    assert e.value.line == 2


def test_registry_defaults_and_arity(registry):
    assert registry.kind("strcmp") is StubKind.COMPARATOR
    assert registry.kind("unknown_api") is StubKind.SCALAR
    with pytest.raises(ArityMismatch):
        registry.descriptor("ptrace", 2).check_args(2)
    registry.descriptor("printf", 3).check_args(3)
