"""Expression DSL: parsing, printing, differentiation, evaluation, compilation."""

import math

import numpy as np
import pytest

from helpers import central_fd, random_points
from sdaekit.errors import (
    EvaluationDomainError,
    ExpressionParseError,
    MissingBindingError,
)
from sdaekit.expr import (
    Binary,
    Constant,
    Unary,
    Variable,
    compile_expr,
    differentiate,
    evaluate,
    free_variables,
    parse,
    substitute,
    to_text,
)

CONSTRAINT_TEXT = "2*x1 - x1^3 - 0.5*sin(4*x2)"


class TestParse:
    def test_paper_constraint_shape(self):
        e = parse(CONSTRAINT_TEXT)
        assert isinstance(e, Binary) and e.op == "sub"
        assert evaluate(e, {"x1": 0.0, "x2": 0.0}) == 0.0

    def test_single_variable(self):
        assert parse("x1") == Variable("x1")

    def test_unary_minus_binds_below_pow(self):
        e = parse("-(u1)^2")
        assert e == Unary("neg", Binary("pow", Variable("u1"), Constant(2.0)))
        # explicit parens around the negation flip the meaning
        e2 = parse("(-u1)^2")
        assert e2 == Binary("pow", Unary("neg", Variable("u1")), Constant(2.0))

    def test_pow_right_associative(self):
        e = parse("x1^x2^u1")
        assert e == Binary(
            "pow", Variable("x1"), Binary("pow", Variable("x2"), Variable("u1"))
        )

    def test_scientific_numbers(self):
        assert parse("1.5e-3") == Constant(1.5e-3)
        assert parse(".25") == Constant(0.25)

    def test_syntax_error_has_offset(self):
        with pytest.raises(ExpressionParseError) as ei:
            parse("x1 + $")
        assert ei.value.offset == 5

    def test_unknown_function(self):
        with pytest.raises(ExpressionParseError, match="unknown function"):
            parse("sinh(x1)")

    def test_unknown_variable_name(self):
        with pytest.raises(ExpressionParseError, match="unknown variable"):
            parse("x1 + foo")

    def test_missing_close_paren(self):
        with pytest.raises(ExpressionParseError):
            parse("sin(x1")

    def test_trailing_garbage(self):
        with pytest.raises(ExpressionParseError):
            parse("x1 x2")


class TestPrintRoundTrip:
    EXPRS = [
        CONSTRAINT_TEXT,
        "-(u1)^2",
        "(-u1)^2",
        "x1^x2^u1",
        "(x1 + u1)*(x1 - u1)",
        "x1/(x2*u1)",
        "x1 - (x2 - u1)",
        "exp(-x1) + log(x1 + 3)",
        "sqrt(x1^2 + 1)/atan(u1)",
        "tan(x1) - cos(x2)*sin(u1)",
        "2^-x1",
        "-x1^2 - -x2",
    ]

    @pytest.mark.parametrize("text", EXPRS)
    def test_ast_exact_round_trip(self, text):
        e = parse(text)
        assert parse(to_text(e)) == e

    @pytest.mark.parametrize("text", EXPRS)
    def test_value_round_trip(self, text):
        e = parse(text)
        e2 = parse(to_text(e))
        for pt in random_points(e, 100, 0.1, 2.0, seed=7):
            a, b = evaluate(e, pt), evaluate(e2, pt)
            assert a == pytest.approx(b, rel=1e-12)


class TestDifferentiate:
    def test_paper_constraint_dx1(self):
        e = parse(CONSTRAINT_TEXT)
        d = differentiate(e, "x1")
        ref = parse("2 - 3*x1^2")
        for pt in random_points({"x1", "x2"}, 50, -2, 2, seed=1):
            assert evaluate(d, pt) == pytest.approx(evaluate(ref, pt), abs=1e-12)

    def test_paper_constraint_dx2(self):
        e = parse(CONSTRAINT_TEXT)
        d = differentiate(e, "x2")
        ref = parse("-2*cos(4*x2)")
        for pt in random_points({"x1", "x2"}, 50, -2, 2, seed=2):
            assert evaluate(d, pt) == pytest.approx(evaluate(ref, pt), abs=1e-12)

    def test_derivative_wrt_absent_variable(self):
        assert differentiate(parse("x1 + x1^2"), "u1") == Constant(0.0)

    def test_derivative_of_constant(self):
        for c in (0.0, -3.5, 2.0e8):
            for v in ("x1", "u2", "t"):
                assert differentiate(Constant(c), v) == Constant(0.0)

    @pytest.mark.parametrize(
        "text,lo",
        [
            (CONSTRAINT_TEXT, -2.0),
            ("x1 + x1^2 + u1", -2.0),
            ("exp(x1)*sin(x2)", -2.0),
            ("log(x1 + 3)/sqrt(u1 + 3)", -2.0),
            ("atan(x1*x2)", -2.0),
            ("tan(x1/4)", -2.0),
            ("x1^u1", 0.1),  # general power needs a positive base
            ("u1 - x1", -2.0),
            ("(2 - 3*x1^2)*(x1 + x1^2 + u1)", -2.0),
        ],
    )
    def test_against_finite_differences(self, text, lo):
        e = parse(text)
        for name in sorted(free_variables(e)):
            d = differentiate(e, name)
            for pt in random_points(e, 100, lo, 2, seed=11):
                exact = evaluate(d, pt)
                fd = central_fd(e, name, pt)
                assert abs(exact - fd) <= 1e-6 * (1.0 + abs(exact))


class TestEvaluate:
    def test_direct_arithmetic(self):
        assert evaluate(parse("2 - 3*x1^2"), {"x1": -2.0}) == -10.0
        assert evaluate(parse("1/(2 - 3*x1^2)"), {"x1": 1.0}) == -1.0

    def test_missing_binding(self):
        with pytest.raises(MissingBindingError):
            evaluate(parse("x1 + u1"), {"x1": 1.0})

    def test_domain_errors_name_the_node(self):
        with pytest.raises(EvaluationDomainError, match="log"):
            evaluate(parse("log(x1)"), {"x1": -1.0})
        with pytest.raises(EvaluationDomainError, match="division"):
            evaluate(parse("1/x1"), {"x1": 0.0})
        with pytest.raises(EvaluationDomainError, match="sqrt"):
            evaluate(parse("sqrt(x1)"), {"x1": -4.0})
        with pytest.raises(EvaluationDomainError, match="exponent"):
            evaluate(parse("x1^0.5"), {"x1": -2.0})

    def test_integer_exponent_on_negative_base_ok(self):
        assert evaluate(parse("x1^3"), {"x1": -2.0}) == -8.0


class TestFolding:
    def test_zero_and_one_products(self):
        assert differentiate(parse("u1*x1"), "u1") == Variable("x1")
        assert parse("0*sin(x1) + x2") == Variable("x2")
        assert parse("1*x1") == Variable("x1")

    def test_constants_fold(self):
        assert parse("2*3 + 1") == Constant(7.0)
        assert parse("2^3") == Constant(8.0)

    def test_integer_exponents_preserved(self):
        e = parse("x1^3")
        assert e.right == Constant(3.0)
        assert to_text(e) == "x1^3"


class TestSubstitute:
    def test_compose(self):
        g = parse("2*x1 - x1^3")
        y = parse("-(0.02)*atan(u1)")
        comp = substitute(g, {"x1": y})
        for pt in random_points({"u1"}, 20, -3, 3, seed=3):
            y_val = evaluate(y, pt)
            assert evaluate(comp, pt) == pytest.approx(
                2 * y_val - y_val**3, rel=1e-14
            )


class TestCompile:
    @pytest.mark.parametrize(
        "text",
        [CONSTRAINT_TEXT, "exp(x1)*atan(u1)", "x1^3 - u1/x2", "sqrt(x1 + 5)"],
    )
    def test_matches_scalar_evaluate(self, text):
        e = parse(text)
        fn = compile_expr(e)
        for pt in random_points(e, 50, 0.5, 2.0, seed=5):
            env = {k: np.float64(v) for k, v in pt.items()}
            assert float(fn(env)) == pytest.approx(evaluate(e, pt), rel=1e-15)

    def test_vectorised_evaluation(self):
        e = parse(CONSTRAINT_TEXT)
        fn = compile_expr(e)
        x1 = np.linspace(-2, 2, 17)
        x2 = np.linspace(-5, 5, 17)
        got = fn({"x1": x1, "x2": x2})
        want = np.array([evaluate(e, {"x1": a, "x2": b}) for a, b in zip(x1, x2)])
        np.testing.assert_array_equal(got, want)

    def test_out_of_domain_yields_nonfinite(self):
        fn = compile_expr(parse("log(x1)"))
        with np.errstate(all="ignore"):
            val = fn({"x1": np.float64(-1.0)})
        assert not np.isfinite(val)


def test_expressions_are_immutable():
    e = parse("x1 + 1")
    with pytest.raises(Exception):
        e.left = Constant(5.0)  # frozen dataclass
    assert hash(e) == hash(parse("x1 + 1"))
