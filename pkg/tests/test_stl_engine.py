#!/usr/bin/env python3
"""
Tests for the STL engine: exact robustness against a brute-force evaluator,
the text grammar, error paths, and the smooth (differentiable) semantics.
"""

import numpy as np
import pytest
import torch

from src.errors import InvalidInputError, StlSyntaxError, StlWindowError
from src.signal_core import Trajectory
from src.stl_engine import (
    Always,
    And,
    Eventually,
    Or,
    Predicate,
    SmoothFormula,
    boolean_unit,
    conjunction,
    disjunction,
    format_formula,
    horizon,
    misclassification_rate,
    ml_draw,
    negation,
    parse_formula,
    predicates,
    robustness,
    robustness_trace,
    satisfies,
    smooth_robustness,
    soft_max,
    time_window_weights,
)

REFERENCE_FORMULA = "G[30,31](0.4111*x - 0.3976*y + 3.8745 > 0)"


def brute_force(states, phi, k):
    """Direct recursion over the semantics, one slot at a time."""
    if isinstance(phi, Predicate):
        return float(np.dot(np.asarray(phi.a), states[k]) - phi.b)
    if isinstance(phi, And):
        return min(brute_force(states, c, k) for c in phi.children)
    if isinstance(phi, Or):
        return max(brute_force(states, c, k) for c in phi.children)
    values = [brute_force(states, phi.child, j) for j in range(k + phi.k1, k + phi.k2 + 1)]
    return min(values) if isinstance(phi, Always) else max(values)


def random_formula(rng, depth=0):
    choice = rng.integers(0, 5) if depth < 3 else 0
    if choice == 0:
        return Predicate(tuple(np.round(rng.uniform(-2, 2, size=3), 4) + 0.01), float(np.round(rng.uniform(-5, 5), 4)))
    if choice in (1, 2):
        children = tuple(random_formula(rng, depth + 1) for _ in range(int(rng.integers(2, 4))))
        return And(children) if choice == 1 else Or(children)
    k1 = int(rng.integers(0, 4))
    k2 = k1 + int(rng.integers(0, 4))
    child = random_formula(rng, depth + 1)
    return Always(k1, k2, child) if choice == 3 else Eventually(k1, k2, child)


class TestExactRobustness:
    """Quantitative semantics"""

    def test_reference_formula_on_zero_trajectory(self):
        phi = parse_formula(REFERENCE_FORMULA)
        assert robustness(np.zeros((67, 3)), phi) == pytest.approx(3.8745)
        assert satisfies(np.zeros((67, 3)), phi)

    def test_matches_brute_force_on_random_instances(self):
        rng = np.random.default_rng(11)
        checked = 0
        for _ in range(1000):
            phi = random_formula(rng)
            K = horizon(phi) + int(rng.integers(1, 5))
            states = rng.normal(0.0, 3.0, size=(K, 3))
            for k in range(K - horizon(phi)):
                assert robustness(states, phi, k) == pytest.approx(brute_force(states, phi, k), abs=1e-12)
                checked += 1
        assert checked >= 1000

    def test_trace_covers_every_defined_slot(self):
        phi = Eventually(0, 2, Predicate((1.0, 0.0, 0.0), 0.0))
        states = np.column_stack([np.arange(6.0), np.zeros(6), np.zeros(6)])
        np.testing.assert_array_equal(robustness_trace(states, phi), [2.0, 3.0, 4.0, 5.0])

    def test_negation_flips_sign(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            phi = random_formula(rng)
            states = rng.normal(size=(horizon(phi) + 2, 3))
            assert robustness(states, negation(phi)) == pytest.approx(-robustness(states, phi), abs=1e-12)

    def test_window_beyond_trajectory_names_operator_path(self):
        phi = And((Predicate((1.0, 0.0, 0.0), 0.0), Always(0, 5, Predicate((0.0, 1.0, 0.0), 0.0))))
        with pytest.raises(StlWindowError) as info:
            robustness(np.zeros((3, 3)), phi)
        assert "Always[0,5]" in info.value.path

    def test_accepts_trajectory_objects(self):
        trajectory = Trajectory(np.ones((4, 3)))
        assert robustness(trajectory, Predicate((1.0, 1.0, 1.0), 1.0), 3) == pytest.approx(2.0)

    def test_misclassification_rate(self):
        phi = Predicate((1.0, 0.0, 0.0), 0.0)
        trajectories = [np.full((2, 3), 1.0), np.full((2, 3), -1.0), np.full((2, 3), 2.0)]
        assert misclassification_rate(trajectories, [1, 0, 0], phi) == pytest.approx(1 / 3)
        with pytest.raises(InvalidInputError):
            misclassification_rate([], [], phi)


class TestConstruction:
    """AST helpers and validation"""

    def test_reversed_window_rejected(self):
        with pytest.raises(InvalidInputError):
            Always(3, 1, Predicate((1.0, 0.0, 0.0), 0.0))

    def test_single_child_collapses(self):
        p = Predicate((1.0, 0.0, 0.0), 0.0)
        assert conjunction(p) is p
        assert disjunction(p) is p
        with pytest.raises(InvalidInputError):
            And((p,))

    def test_horizon_and_predicates(self):
        phi = parse_formula("G[1,3](F[0,2](x > 0) & y - 1.0 > 0)")
        assert horizon(phi) == 5
        assert len(predicates(phi)) == 2


class TestGrammar:
    """Parser and canonical printer"""

    def test_round_trip_random_formulas(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            phi = random_formula(rng)
            assert parse_formula(format_formula(phi)) == phi

    def test_reference_formula_parses(self):
        phi = parse_formula(REFERENCE_FORMULA)
        assert phi == Always(30, 31, Predicate((0.4111, -0.3976, 0.0), -3.8745))

    @pytest.mark.parametrize("text, position", [
        ("G[2,1](x > 0)", 0),
        ("x > 1", 4),
        ("x + z > 0", 4),
        ("G[0,1](x > 0", 12),
        ("x > 0 ?", 6),
    ])
    def test_syntax_errors_report_position(self, text, position):
        with pytest.raises(StlSyntaxError) as info:
            parse_formula(text)
        assert info.value.position == position


class TestSmoothSemantics:
    """Differentiable robustness"""

    def test_time_window_weights(self):
        weights = time_window_weights(6, 2.0, 4.0, 0.1)
        np.testing.assert_allclose(weights.numpy(), [0, 0, 1, 1, 1, 0], atol=1e-12)

    def test_soft_max_approaches_max(self):
        values = torch.tensor([1.0, 3.0, 2.0], dtype=torch.float64)
        assert float(soft_max(values, 200.0)) == pytest.approx(3.0, abs=1e-9)
        weights = torch.tensor([1.0, 0.0, 1.0], dtype=torch.float64)
        assert float(soft_max(values, 200.0, weights)) == pytest.approx(2.0, abs=1e-9)

    def test_large_temperature_matches_exact(self):
        phi = parse_formula("G[0,2](x - 1.0 > 0) | F[1,3](y > 0)")
        states = np.array([[2.0, -1.0, 0.0], [3.0, -2.0, 0.0], [4.5, 1.5, 0.0], [1.5, -1.0, 0.0], [0.0, 0.0, 0.0]])
        smooth = smooth_robustness(states, phi, beta=200.0)
        assert float(smooth) == pytest.approx(robustness(states, phi), abs=1e-9)

    def test_gradient_matches_central_differences(self):
        phi = parse_formula("F[0,2](0.5*x - 0.2*v + 1.0 > 0) & G[1,2](y - 20.0 > 0)")
        model = SmoothFormula(phi)
        states = torch.tensor(np.random.default_rng(2).normal(20.0, 2.0, size=(5, 3)), dtype=torch.float64,
                              requires_grad=True)
        assert torch.autograd.gradcheck(lambda s: model(s, 2.0), (states,), eps=1e-6, atol=1e-6, rtol=1e-4)

    def test_shared_subformula_gets_distinct_parameters(self):
        shared = Predicate((1.0, 0.0, 0.0), 1.0)
        model = SmoothFormula(And((Always(0, 1, shared), Eventually(0, 2, shared))))
        assert len(model.predicate_weights) == 2 and len(model.windows) == 2
        assert model.slot((0, 0)) != model.slot((1, 0))
        assert model.slot((0,)) != model.slot((1,))

    def test_gradients_reach_a_passed_smooth_formula(self):
        shared = Predicate((1.0, 0.0, 0.0), 1.0)
        model = SmoothFormula(And((Always(0, 1, shared), Eventually(0, 2, shared))))
        states = np.array([[2.0, 0.0, 0.0], [0.5, 0.0, 0.0], [3.0, 0.0, 0.0], [1.5, 0.0, 0.0]])
        value = smooth_robustness(states, model, beta=5.0)
        value.backward()
        grads = [p.grad for p in model.predicate_weights]
        assert all(g is not None for g in grads)
        assert any(float(g.abs().sum()) > 0 for g in grads)
        assert model.windows[0].grad is not None
        assert float(value) == pytest.approx(float(smooth_robustness(states, model.structure, beta=5.0)))

    def test_ml_draw_straight_through(self):
        p = torch.tensor([0.3, 0.7], dtype=torch.float64, requires_grad=True)
        drawn = ml_draw(p)
        assert drawn.tolist() == pytest.approx([0.0, 1.0])
        drawn.sum().backward()
        assert p.grad.tolist() == [1.0, 1.0]
        with pytest.raises(InvalidInputError):
            ml_draw(p, mode="gumbel")

    def test_boolean_unit_selects_operator_and_children(self):
        values = torch.tensor([1.0, 5.0, -2.0], dtype=torch.float64)
        include = torch.tensor([0.9, 0.9, 0.1], dtype=torch.float64)
        conjunctive = boolean_unit(values, 200.0, torch.tensor(0.2, dtype=torch.float64), include)
        disjunctive = boolean_unit(values, 200.0, torch.tensor(0.8, dtype=torch.float64), include)
        assert float(conjunctive) == pytest.approx(1.0, abs=1e-9)
        assert float(disjunctive) == pytest.approx(5.0, abs=1e-9)

    def test_non_positive_temperature_rejected(self):
        model = SmoothFormula(Predicate((1.0, 0.0, 0.0), 0.0))
        with pytest.raises(InvalidInputError):
            model(torch.zeros((2, 3), dtype=torch.float64), 0.0)
