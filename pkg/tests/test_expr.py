"""Tests for closed-form expressions: parsing, evaluation, differentiation."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from app.errors import (
    ExprDomainError,
    ExprSyntaxError,
    NonDifferentiableError,
    SpecError,
    UnknownIdentifierError,
    VariableIndexError,
)
from app.geometry.expr import ExprAST, apply, parse_expr, where
from app.geometry.profiles import flat_profile, smooth_step, smooth_step_expr, smooth_step_slope


class TestParsing:
    def test_power_binds_tighter_than_unary_minus(self):
        assert parse_expr("-x1^2", 1).evaluate([3.0]) == pytest.approx(-9.0)

    def test_power_is_right_associative(self):
        assert parse_expr("2^3^2", 1).evaluate([0.0]) == pytest.approx(512.0)

    def test_double_star_is_power(self):
        assert parse_expr("x1**3", 1).evaluate([2.0]) == pytest.approx(8.0)

    def test_constants_and_functions(self):
        ast = parse_expr("exp(x1) * cos(pi * x2) + tanh(0)", 2)
        assert ast.evaluate([1.0, 1.0]) == pytest.approx(-math.e)

    def test_where_picks_first_branch_on_nonpositive(self):
        ast = parse_expr("where(x1, 10, 20)", 1)
        assert ast.evaluate([0.0]) == 10.0
        assert ast.evaluate([-1.0]) == 10.0
        assert ast.evaluate([0.5]) == 20.0

    def test_syntax_error_reports_byte_offset(self):
        with pytest.raises(ExprSyntaxError) as exc:
            parse_expr("x1 + * 2", 1)
        assert exc.value.offset == 5

    def test_unknown_identifier(self):
        with pytest.raises(UnknownIdentifierError) as exc:
            parse_expr("x1 + y", 1)
        assert exc.value.offset == 5

    def test_x0_is_not_a_variable(self):
        with pytest.raises(UnknownIdentifierError):
            parse_expr("x0", 2)

    def test_variable_beyond_dimension(self):
        with pytest.raises(VariableIndexError):
            parse_expr("x1 + x3", 2)

    @pytest.mark.parametrize("text", ["", "   ", "(x1", "pow(x1)", "x1 +", "3 4"])
    def test_malformed_input(self, text):
        with pytest.raises(ExprSyntaxError):
            parse_expr(text, 1)

    def test_syntax_errors_are_spec_errors(self):
        with pytest.raises(SpecError):
            parse_expr("sin(", 1)

    def test_printed_text_parses_back(self):
        ast = parse_expr("-(x1 - 2.5)^2 / (1 + x2^2) + where(x2, -1, sqrt(x2))", 2)
        again = parse_expr(ast.to_text(), 2)
        pts = np.array([[0.3, -0.7], [1.5, 2.0], [-2.0, 0.0]])
        np.testing.assert_allclose(again.evaluate(pts), ast.evaluate(pts))


class TestEvaluation:
    def test_batch_shape(self):
        ast = parse_expr("x1 * x2", 2)
        pts = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        np.testing.assert_allclose(ast.evaluate(pts), [2.0, 12.0, 30.0])

    def test_single_point_gives_float(self):
        assert isinstance(parse_expr("x1", 1).evaluate([1.0]), float)

    def test_dimension_mismatch(self):
        with pytest.raises(SpecError):
            parse_expr("x1", 2).evaluate([1.0, 2.0, 3.0])

    @pytest.mark.parametrize(
        "text, point",
        [("log(x1)", [0.0]), ("log(x1)", [-1.0]), ("1 / x1", [0.0]), ("sqrt(x1)", [-4.0])],
    )
    def test_domain_errors(self, text, point):
        with pytest.raises(ExprDomainError):
            parse_expr(text, 1).evaluate(point)

    def test_domain_error_names_the_node(self):
        with pytest.raises(ExprDomainError) as exc:
            parse_expr("x1 + log(x1 - 1)", 1).evaluate([0.5])
        assert "log" in exc.value.node

    def test_unselected_branch_may_be_undefined(self):
        ast = parse_expr("where(x1, 0, log(x1))", 1)
        np.testing.assert_allclose(ast.evaluate(np.array([[-1.0], [0.0], [math.e]])), [0.0, 0.0, 1.0])

    def test_selected_bad_branch_still_raises(self):
        with pytest.raises(ExprDomainError):
            parse_expr("where(x1, log(x1), 1)", 1).evaluate([0.0])

    def test_builders_and_substitution(self):
        x1, x2 = ExprAST.variable(0, 2), ExprAST.variable(1, 2)
        f = x1 * x2 + 1.0
        g = f.substitute([x2, x1 + 1.0])
        assert g.evaluate([2.0, 3.0]) == pytest.approx(3.0 * 3.0 + 1.0)
        assert (2.0 - apply("exp", x1 * 0.0)).evaluate([5.0, 5.0]) == pytest.approx(1.0)
        assert where(x1, x2, 7.0).evaluate([1.0, 0.0]) == 7.0

    def test_variable_index_checked(self):
        with pytest.raises(SpecError):
            ExprAST.variable(2, 2)


class TestDifferentiation:
    def test_polynomial(self):
        assert parse_expr("x1^3", 1).diff(0).evaluate([2.0]) == pytest.approx(12.0)

    def test_mixed_partial(self):
        ast = parse_expr("sin(x1 * x2)", 2)
        assert ast.diff(1).evaluate([1.0, 2.0]) == pytest.approx(math.cos(2.0))
        assert ast.diff(0).diff(1).evaluate([1.0, 2.0]) == pytest.approx(math.cos(2.0) - 2.0 * math.sin(2.0))

    def test_abs_derivative_off_the_kink(self):
        d = parse_expr("abs(x1)", 1).diff(0)
        assert d.evaluate([2.0]) == pytest.approx(1.0)
        assert d.evaluate([-2.0]) == pytest.approx(-1.0)

    def test_abs_derivative_at_the_kink(self):
        with pytest.raises(NonDifferentiableError):
            parse_expr("abs(x1)", 1).diff(0).evaluate([0.0])

    def test_where_derivative_follows_branch(self):
        d = parse_expr("where(x1, x1^2, 3 * x1)", 1).diff(0)
        assert d.evaluate([-1.0]) == pytest.approx(-2.0)
        assert d.evaluate([1.0]) == pytest.approx(3.0)

    def test_variable_index_checked(self):
        with pytest.raises(SpecError):
            parse_expr("x1", 1).diff(1)

    @settings(max_examples=60, deadline=None)
    @given(
        x=st.floats(min_value=-2.0, max_value=2.0),
        y=st.floats(min_value=-2.0, max_value=2.0),
    )
    def test_matches_central_differences(self, x, y):
        ast = parse_expr("exp(sin(x1)) * x2^2 + x1 / (1 + x2^2) - tanh(x1 * x2)", 2)
        step = 1e-5
        for var in range(2):
            e = np.zeros(2)
            e[var] = step
            p = np.array([x, y])
            numeric = (ast.evaluate(p + e) - ast.evaluate(p - e)) / (2 * step)
            assert ast.diff(var).evaluate(p) == pytest.approx(numeric, rel=1e-5, abs=1e-6)


class TestSmoothStep:
    def test_plateaus(self):
        t = np.array([-1.0, 0.0, 1.0, 2.0])
        np.testing.assert_allclose(smooth_step(t), [0.0, 0.0, 1.0, 1.0])
        assert smooth_step(0.5) == pytest.approx(0.5)

    def test_flat_profile_vanishes_off_positive_axis(self):
        np.testing.assert_array_equal(flat_profile(np.array([-3.0, 0.0])), [0.0, 0.0])

    def test_monotone(self):
        values = smooth_step(np.linspace(-0.5, 1.5, 401))
        assert np.all(np.diff(values) >= -1e-15)

    def test_slope_is_two(self):
        assert smooth_step_slope() == pytest.approx(2.0, abs=1e-3)

    def test_expression_matches_numeric(self):
        t = np.linspace(-0.5, 1.5, 81)
        expr = smooth_step_expr(ExprAST.variable(0, 1))
        np.testing.assert_allclose(expr.evaluate(t[:, None]), smooth_step(t), atol=1e-14)
