import pytest
from hypothesis import given, settings, strategies as st

from malverse.solver import (IntervalSet, Model, Sat, Unknown, Unsat, as_linear, check_model,
                             magnitude_key, solve)
from malverse.symexpr import MASK, BinOp, Cmp, Const, Constraint, Sym, to_signed

from oracles import solver_soundness

x, y = Sym("x", 0), Sym("y", 1)


def C(cond, a, b):
    return Constraint(Cmp(cond, a, b))


def test_empty_is_sat():
    assert solve([]) == Sat(Model())


def test_minimal_magnitude_prefers_zero():
    out = solve([C("ne", x, Const(-1))])
    assert out.model.value("x") == 0


def test_ties_go_non_negative():
    out = solve([C("ne", x, Const(0))])
    assert out.model.value("x") == 1


def test_negative_pin():
    out = solve([C("eq", x, Const(-1))])
    assert to_signed(out.model.value("x")) == -1


def test_code10_stalling_shape():
    # t0 = clock(); t1 = clock(); 10 <s t1 - t0
    out = solve([C("slt", Const(10), BinOp("sub", y, x))])
    assert (to_signed(out.model.value("x")), to_signed(out.model.value("y"))) == (0, 11)


def test_unsat_signed_range():
    assert solve([C("slt", x, Const(3)), C("slt", Const(5), x)]) == Unsat()


def test_unsat_two_symbols():
    cs = [C("eq", BinOp("sub", x, y), Const(0)), C("ne", x, y),
          C("ule", x, Const(10)), C("ule", y, Const(10))]
    assert solve(cs) == Unsat()


def test_wraparound():
    # x + 1 == 0 forces x == -1 in 64-bit arithmetic
    out = solve([C("eq", BinOp("add", x, Const(1)), Const(0))])
    assert out.model.value("x") == MASK


def test_nonlinear_never_claims_unsat():
    cs = [C("eq", BinOp("mul", x, x), Const(2))]  # no square root of 2 mod 2**64 exists
    out = solve(cs, budget=500)
    assert isinstance(out, Unknown)


def test_nonlinear_model_checked():
    cs = [C("eq", BinOp("xor", x, Const(5)), Const(6))]
    out = solve(cs)
    assert isinstance(out, Sat) and check_model(cs, out.model)


def test_linear_shapes():
    assert as_linear(Cmp("slt", BinOp("add", x, Const(3)), Const(9))) is not None
    assert as_linear(Cmp("eq", BinOp("add", BinOp("sub", Const(0), x), y), Const(4))) is not None
    assert as_linear(Cmp("eq", BinOp("mul", x, Const(3)), Const(4))) is None
    assert as_linear(Cmp("slt", x, x)) is None


def test_budget_exhaustion_is_unknown():
    cs = [C("ne", BinOp("and", x, Const(0xFF)), BinOp("and", x, Const(0xFF)))]
    assert isinstance(solve(cs, budget=50), Unknown)


def test_model_digest_is_stable():
    m = Model({"b": 2, "a": 1}, {"buf": b"AB\0"})
    assert m.digest() == Model({"a": 1, "b": 2}, {"buf": b"AB\0"}).digest()


# -- interval sets --------------------------------------------------------------

small = st.integers(0, 63)
ivsets = st.lists(st.tuples(small, small), max_size=4).map(
    lambda ps: IntervalSet((min(a, b), max(a, b)) for a, b in ps))


def members(s):
    return {v for v in range(64) if v in s}


@given(ivsets, ivsets)
def test_interval_algebra(a, b):
    assert members(a & b) == members(a) & members(b)
    assert members(a | b) == members(a) | members(b)
    assert members(a.complement()) == set(range(64)) - members(a)


@given(ivsets, st.integers(-(1 << 64), 1 << 64))
def test_shift_and_negate(a, d):
    assert set((a.shift(d)).values()) == {(v + d) & MASK for v in a.values()}
    assert set(a.negate().values()) == {(-v) & MASK for v in a.values()}


@given(st.integers(-20, 20), st.integers(-20, 20))
def test_signed_range(lo, hi):
    s = IntervalSet.signed(lo, hi)
    assert {to_signed(v) for v in s.values()} == set(range(lo, hi + 1))


@given(st.integers(-40, 40), st.integers(0, 40))
def test_by_magnitude_order(lo, n):
    s = IntervalSet.signed(lo, lo + n)
    got = list(s.by_magnitude())
    assert got == sorted(s.values(), key=magnitude_key)


# -- soundness against exhaustive enumeration ------------------------------------

@pytest.mark.parametrize("seed", [11, 12])
def test_soundness_against_brute_force(seed):
    stats = solver_soundness(150, seed)
    assert stats["bad_models"] == 0
    assert stats["mismatches"] == 0, stats


@given(st.integers(-128, 127), st.sampled_from(["eq", "ne", "slt", "sle", "ult", "ule"]))
@settings(max_examples=200)
def test_unary_domain_exact(k, cond):
    cs = [C("sle", Const(-8), x), C("sle", x, Const(8)), C(cond, x, Const(k))]
    want = [v for v in range(-8, 9) if
            {"eq": v == k, "ne": v != k, "slt": v < k, "sle": v <= k,
             "ult": (v & MASK) < (k & MASK), "ule": (v & MASK) <= (k & MASK)}[cond]]
    out = solve(cs)
    if want:
        assert isinstance(out, Sat)
        assert to_signed(out.model.value("x")) == min(want, key=lambda v: (abs(v), v < 0))
    else:
        assert out == Unsat()
