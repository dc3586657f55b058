import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from mipnn.ir import (BINARY, CONTINUOUS, EQ, GE, LE, Assignment,
                      DuplicateNameError, ForeignVariableError,
                      FrozenModelError, InvertedBoundsError,
                      MissingVariableError, ModelIR, VarDef, _violation,
                      round_binaries)


def small_model():
    m = ModelIR("m")
    x = m.add_variable(VarDef("x", CONTINUOUS, 0.0, 10.0))
    y = m.add_variable(VarDef("y", BINARY))
    m.add_constraint([(1.0, x), (2.0, y)], LE, 5.0, "cap")
    m.add_objective_linear(1.0, x)
    return m, x, y


def test_duplicate_name_rejected():
    m = ModelIR()
    m.add_variable(VarDef("x"))
    with pytest.raises(DuplicateNameError):
        m.add_variable(VarDef("x"))


def test_inverted_bounds_rejected():
    m = ModelIR()
    with pytest.raises(InvertedBoundsError):
        m.add_variable(VarDef("x", CONTINUOUS, 1.0, 0.0))


def test_binary_bounds_forced():
    m = ModelIR()
    v = m.add_variable(VarDef("b", BINARY, -5.0, 5.0))
    stored = m.variables[v.index]
    assert (stored.lo, stored.hi) == (0.0, 1.0)


def test_foreign_ref_rejected():
    m1 = ModelIR()
    m2 = ModelIR()
    x1 = m1.add_variable(VarDef("x"))
    with pytest.raises(ForeignVariableError):
        m2.add_constraint([(1.0, x1)], LE, 0.0, "c")


def test_missing_variable_lookup():
    m = ModelIR()
    with pytest.raises(MissingVariableError):
        m.var("ghost")


def test_frozen_model_immutable():
    m, x, _ = small_model()
    m.freeze()
    with pytest.raises(FrozenModelError):
        m.add_variable(VarDef("z"))
    with pytest.raises(FrozenModelError):
        m.add_constraint([(1.0, x)], LE, 0.0, "c")
    with pytest.raises(FrozenModelError):
        m.set_bounds("x", 0.0, 1.0)


def test_term_merging():
    m = ModelIR()
    x = m.add_variable(VarDef("x"))
    y = m.add_variable(VarDef("y"))
    idx = m.add_constraint([(1.0, x), (2.0, y), (3.0, x)], EQ, 0.0, "c")
    terms = m.constraints[idx].terms
    assert [(c, r.name) for c, r in terms] == [(4.0, "x"), (2.0, "y")]


def test_quadratic_pair_canonical_order():
    m = ModelIR()
    a = m.add_variable(VarDef("a"))
    b = m.add_variable(VarDef("b"))
    m.add_objective_quadratic(1.0, b, a)
    m.add_objective_quadratic(2.0, a, b)
    m.freeze()
    assert len(m.objective.quadratic) == 1
    c, r1, r2 = m.objective.quadratic[0]
    assert (c, r1.name, r2.name) == (3.0, "a", "b")


def test_evaluate_assignment_reports_violations():
    m, x, y = small_model()
    m.freeze()
    rep = m.evaluate_assignment(Assignment({"x": 4.0, "y": 1.0}))
    assert not rep.ok
    assert rep.violations[0].label == "cap"
    assert rep.max_violation == pytest.approx(1.0)
    assert rep.objective == pytest.approx(4.0)

    rep = m.evaluate_assignment(Assignment({"x": 3.0, "y": 1.0}))
    assert rep.ok and rep.max_violation == 0.0


def test_evaluate_assignment_bounds_and_integrality():
    m, _, _ = small_model()
    m.freeze()
    rep = m.evaluate_assignment(Assignment({"x": 11.0, "y": 0.4}))
    assert any(v.label.startswith("bounds:") for v in rep.violations)
    assert rep.integrality_violations == [("y", 0.4)]


def test_evaluate_assignment_missing_value():
    m, _, _ = small_model()
    m.freeze()
    with pytest.raises(MissingVariableError):
        m.evaluate_assignment(Assignment({"x": 0.0}))


def test_bilinear_constraints_separate():
    m = ModelIR()
    x = m.add_variable(VarDef("x", CONTINUOUS, 0.0, 1.0))
    y = m.add_variable(VarDef("y", CONTINUOUS, 0.0, 1.0))
    m.add_bilinear_constraint([(1.0, x, y)], [(1.0, x)], LE, 1.0, "prod")
    assert len(m.constraints) == 0
    assert len(m.bilinear_constraints) == 1
    m.freeze()
    rep = m.evaluate_assignment(Assignment({"x": 1.0, "y": 1.0}))
    assert not rep.ok and rep.violations[0].label == "prod"


def test_round_binaries_snaps_only_near_values():
    m = ModelIR()
    m.add_variable(VarDef("b", BINARY))
    m.add_variable(VarDef("c", BINARY))
    out = round_binaries(m, {"b": 0.9999997, "c": 0.4})
    assert out["b"] == 1.0
    assert out["c"] == 0.4


@given(st.floats(-100, 100), st.floats(-100, 100))
def test_violation_semantics(lhs, rhs):
    assert _violation(lhs, LE, rhs) == max(0.0, lhs - rhs)
    assert _violation(lhs, GE, rhs) == max(0.0, rhs - lhs)
    assert math.isclose(_violation(lhs, EQ, rhs), abs(lhs - rhs))


def test_objective_quadratic_evaluation():
    m = ModelIR()
    x = m.add_variable(VarDef("x"))
    m.add_objective_quadratic(2.0, x, x)
    m.add_objective_constant(1.0)
    m.freeze()
    assert m.evaluate_objective({"x": 3.0}) == pytest.approx(19.0)
