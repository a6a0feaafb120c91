import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hysopt.expr import (
    EvalError,
    ExprError,
    ExprFunction,
    ParseError,
    compile_exprs,
    parse_expr,
    to_string,
)


def central_difference_jacobian(fn, point, step=1e-6):
    """Independent derivative oracle: central finite differences."""
    point = np.asarray(point, dtype=float)
    cols = []
    for j in range(len(point)):
        hi = point.copy()
        lo = point.copy()
        hi[j] += step
        lo[j] -= step
        cols.append((fn.eval(hi) - fn.eval(lo)) / (2 * step))
    return np.column_stack(cols)


def assert_jacobian_matches_fd(fn, points, rtol=1e-6):
    jac = fn.jacobian()
    for p in points:
        sym = np.array(jac.eval(p)).reshape(fn.n_out, fn.n_in)
        fd = central_difference_jacobian(fn, p)
        scale = np.maximum(1.0, np.abs(fd))
        assert np.max(np.abs(sym - fd) / scale) <= rtol, f"mismatch at {p}"


class TestParse:
    def test_thermostat_mode_a(self):
        f = ExprFunction.parse(["x"], ["-0.2*x + 5"])
        assert f.eval([15.0])[0] == pytest.approx(2.0, abs=1e-15)

    def test_constant_zero(self):
        e = parse_expr("0", [])
        assert e.kind == "const" and e.value == 0.0

    def test_car_switching_function(self):
        f = ExprFunction.parse(["q", "v"], ["(v-10)/5"])
        assert f.eval([0.0, 12.0])[0] == pytest.approx(0.4)
        assert f.eval([3.0, 15.0])[0] == pytest.approx(1.0)

    def test_precedence_and_power(self):
        f = ExprFunction.parse(["x"], ["2*x^2 - x^3/2"])
        assert f.eval([2.0])[0] == pytest.approx(8.0 - 4.0)

    def test_unary_minus_binds_tighter_than_sub(self):
        f = ExprFunction.parse(["x"], ["--x - -x"])
        assert f.eval([3.0])[0] == pytest.approx(6.0)

    def test_functions(self):
        f = ExprFunction.parse(["x"], ["sin(x)^2 + cos(x)^2", "exp(0)", "sqrt(x^2)"])
        out = f.eval([0.7])
        assert out == pytest.approx([1.0, 1.0, 0.7])

    def test_scientific_notation(self):
        f = ExprFunction.parse([], ["1.5e-3 + 2E2"])
        assert f.eval([])[0] == pytest.approx(200.0015)

    def test_syntax_error_carries_offset(self):
        with pytest.raises(ParseError) as err:
            parse_expr("1 + * 2", ["x"])
        assert err.value.offset == 4

    def test_undeclared_identifier(self):
        with pytest.raises(ParseError, match="undeclared identifier 'y'"):
            parse_expr("x + y", ["x"])

    def test_unknown_function(self):
        with pytest.raises(ParseError, match="unknown function"):
            parse_expr("tan(x)", ["x"])

    def test_non_integer_exponent_rejected(self):
        with pytest.raises(ParseError):
            parse_expr("x^0.5", ["x"])
        with pytest.raises(ExprError):
            parse_expr("x", ["x"]) ** 1.5

    def test_unbalanced_paren(self):
        with pytest.raises(ParseError):
            parse_expr("(x + 1", ["x"])


class TestEval:
    def test_gamma_shape_at_minus_one(self):
        # a*psi^2/(1+psi^2) with a=1 evaluates to 1/2 at psi = -1.
        f = ExprFunction.parse(["p"], ["p^2/(1+p^2)"])
        assert f.eval([-1.0])[0] == pytest.approx(0.5, abs=1e-15)

    def test_identity(self):
        f = ExprFunction.parse(["a", "b"], ["a", "b"])
        assert list(f.eval([3.5, -2.0])) == [3.5, -2.0]

    def test_division_by_zero_reports_node_path(self):
        f = ExprFunction.parse(["x"], ["1/(x-1)"])
        with pytest.raises(EvalError) as err:
            f.eval([1.0])
        assert "div" in err.value.path

    def test_sqrt_of_negative_reports(self):
        f = ExprFunction.parse(["x"], ["sqrt(x)"])
        with pytest.raises(EvalError):
            f.eval([-4.0])

    def test_deterministic(self):
        f = ExprFunction.parse(["x", "y"], ["sin(x)*exp(y) - x/y"])
        a = f.eval([0.3, 1.7])[0]
        b = f.eval([0.3, 1.7])[0]
        assert a == b  # bit-identical

    def test_arity_check(self):
        f = ExprFunction.parse(["x"], ["x"])
        with pytest.raises(ExprError):
            f.eval([1.0, 2.0])

    def test_free_variable_outside_inputs_rejected(self):
        from hysopt.expr import var

        with pytest.raises(ExprError):
            ExprFunction(["x"], [var(3)])


class TestDifferentiate:
    def test_linear(self):
        f = ExprFunction.parse(["x"], ["-0.2*x + 5"])
        jac = f.jacobian()
        assert jac.eval([12.3])[0] == pytest.approx(-0.2, abs=1e-16)

    def test_gamma_derivative_zero_at_origin(self):
        # d/dp [a p^2/(1+p^2)] = 2 a p/(1+p^2)^2 which vanishes at p=0.
        f = ExprFunction.parse(["p"], ["2*p^2/(1+p^2)"])
        jac = f.jacobian()
        assert jac.eval([0.0])[0] == pytest.approx(0.0, abs=1e-16)
        assert jac.eval([1.0])[0] == pytest.approx(2 * 2 * 1 / 4)

    def test_product_gradient(self):
        f = ExprFunction.parse(["x1", "x2"], ["x1*x2"])
        jac = f.jacobian()
        assert list(jac.eval([3.0, 7.0])) == [7.0, 3.0]

    def test_hessian_by_applying_twice(self):
        f = ExprFunction.parse(["x", "y"], ["x^2*y + exp(x)"])
        hess = f.jacobian().jacobian()
        h = np.array(hess.eval([1.0, 2.0])).reshape(2, 2)
        e = math.exp(1.0)
        assert h == pytest.approx(np.array([[4.0 + e, 2.0], [2.0, 0.0]]))

    def test_against_finite_differences(self):
        fns = [
            ExprFunction.parse(["x"], ["-0.2*x + 5", "-0.2*x"]),
            ExprFunction.parse(["p"], ["p^2/(1+p^2)"]),
            ExprFunction.parse(["q", "v", "u"], ["v", "3*u", "(v-10)/5"]),
            ExprFunction.parse(["x", "y"], ["sin(x)*cos(y) + sqrt(4+x^2)/y"]),
        ]
        rng = np.random.default_rng(0)
        for fn in fns:
            points = rng.uniform(0.5, 3.0, size=(100, fn.n_in))
            assert_jacobian_matches_fd(fn, points)

    def test_subset_jacobian(self):
        f = ExprFunction.parse(["x", "y", "z"], ["x*y*z"])
        jac = f.jacobian(wrt=[2])
        assert jac.n_out == 1
        assert jac.eval([2.0, 3.0, 4.0])[0] == pytest.approx(6.0)


class TestRoundTrip:
    @given(
        st.lists(
            st.floats(min_value=-3.0, max_value=3.0, allow_nan=False),
            min_size=2,
            max_size=2,
        )
    )
    @settings(max_examples=100, deadline=None)
    def test_print_parse_identity_random_points(self, point):
        f = ExprFunction.parse(
            ["x", "y"],
            ["((x - 2*y)^3)/(4 + x^2) - sin(x)*exp(-y) + sqrt(9 + y^2)"],
        )
        text = to_string(f.outputs[0])
        g = ExprFunction.parse(["x", "y"], [text])
        assert abs(f.eval(point)[0] - g.eval(point)[0]) <= 1e-12

    def test_round_trip_tricky_structures(self):
        cases = [
            "x - (y - 1)",
            "x/(y/2)",
            "-(x + y)",
            "(-x)^2",
            "-x^2",
            "2^-2 * x",
            "x - -3",
            "(x + 1)*(y - 2)",
        ]
        rng = np.random.default_rng(1)
        for src in cases:
            f = ExprFunction.parse(["x", "y"], [src])
            g = ExprFunction.parse(["x", "y"], [to_string(f.outputs[0])])
            for p in rng.uniform(0.5, 2.0, size=(20, 2)):
                assert f.eval(p)[0] == pytest.approx(g.eval(p)[0], abs=1e-12)


class TestCompile:
    def test_compiled_matches_interpreted(self):
        f = ExprFunction.parse(
            ["x", "y"], ["sin(x)*y + x^3/(1+y^2)", "exp(x) - sqrt(1+y^2)"]
        )
        fast = f.compiled()
        rng = np.random.default_rng(2)
        for p in rng.uniform(-2.0, 2.0, size=(50, 2)):
            assert np.allclose(fast(list(p)), f.eval(p), rtol=0, atol=0)

    def test_constant_only_function(self):
        f = ExprFunction.parse([], ["3*7"])
        assert f.compiled()([]) == (21.0,)

    def test_chunked_compilation(self):
        # Force multi-chunk output and check value equality with eval().
        import hysopt.expr as ex

        x = ex.var(0, "x")
        e = x
        for i in range(5):
            e = e * e + ex.const(float(i))
        terms = [e * ex.const(float(k + 1)) for k in range(4)]
        root = ex.sum_exprs(terms)
        old = ex._CHUNK_LIMIT
        ex._CHUNK_LIMIT = 4
        try:
            fn = compile_exprs([root, e], 1)
        finally:
            ex._CHUNK_LIMIT = old
        vals = fn([1.1])
        expected = ex.evaluate([root, e], [1.1])
        assert vals[0] == expected[0] and vals[1] == expected[1]

    def test_deep_dag_no_recursion_error(self):
        import hysopt.expr as ex

        e = ex.var(0, "x")
        for _ in range(5000):
            e = e + ex.const(1.0)
        assert ex.evaluate([e], [0.0])[0] == 5000.0
        assert compile_exprs([e], 1)([0.0])[0] == 5000.0
