from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgcauchy.errors import ExpressionError
from sgcauchy.gridcore import Grid, jb, l2_norm
from sgcauchy.symbols import (
    FuncSymbol,
    SymbolFamily,
    check_involutive,
    compose_expand,
    constant,
    default_lattice,
    estimate_seminorm,
    is_elliptic,
    poisson_bracket,
    quantize,
    symbol,
    zero,
)

LAT = default_lattice(1)


def sup_on_lattice(a, b=None) -> float:
    va = a(LAT.T, LAT.X, LAT.XI)
    vb = 0 if b is None else b(LAT.T, LAT.X, LAT.XI)
    return float(np.max(np.abs(va - vb)))


# -- expressions ---------------------------------------------------------------


def test_expression_grammar():
    a = symbol("<x>^2 * <xi> + atan(x) - 3*t/2", n=1)
    x, xi, t = 2.0, -1.5, 0.4
    expected = (1 + x**2) * np.sqrt(1 + xi**2) + np.arctan(x) - 3 * t / 2
    assert float(a(t, [x], [xi])) == pytest.approx(expected, rel=1e-14)
    b = symbol("x1*xi2 - x2**2", n=2)
    assert float(b(0.0, [1.0, 3.0], [0.0, 2.0])) == pytest.approx(2.0 - 9.0)
    assert symbol("c*xi", params={"c": 2.5})(0.0, [0.0], [2.0]) == pytest.approx(5.0)


@pytest.mark.parametrize("src", ["x +", "foo(x)", "xi1", "(x", "x $ 2"])
def test_expression_errors(src):
    with pytest.raises(ExpressionError):
        symbol(src, n=1)


def test_dependencies_are_tracked():
    assert symbol("xi").depends == frozenset({"xi"})
    assert symbol("t*x").depends == frozenset({"t", "x"})
    assert constant(2.0).depends == frozenset()


# -- seminorms and ellipticity --------------------------------------------------


def test_seminorm_of_x_xi_is_one():
    est = estimate_seminorm(symbol("x*xi", order=(1, 1)), 0)
    assert est.value == pytest.approx(1.0, rel=0.02)
    assert est.consistent


def test_seminorm_of_zero():
    assert estimate_seminorm(zero(), 2).value == 0.0


def test_seminorm_flags_understated_order():
    est = estimate_seminorm(symbol("xi", order=(0, 0)), 0)
    assert est.growth >= 10 and not est.consistent


@settings(max_examples=20, deadline=None)
@given(st.floats(0.1, 5.0), st.integers(0, 2))
def test_seminorm_is_homogeneous(c, l):
    a = symbol("<x>*sin(xi)", order=(1, 0))
    base = estimate_seminorm(a, l).value
    assert estimate_seminorm(symbol(f"{c}*<x>*sin(xi)", order=(1, 0)), l).value == pytest.approx(c * base, rel=1e-9)


def test_ellipticity():
    rep = is_elliptic(symbol("<x>*<xi>", order=(1, 1)), R=1.0, C_floor=0.5)
    assert rep.elliptic and rep.margin == pytest.approx(1.0)
    assert not is_elliptic(symbol("xi", order=(0, 1)), R=1.0)
    assert not is_elliptic(symbol("x^2*xi^2 + 1", order=(2, 2)), R=1.0)


# -- quantization ----------------------------------------------------------------


def test_identity_symbol_quantizes_to_identity():
    g = Grid.uniform(10.0, 128)
    u = g.sample(lambda x: np.exp(-x**2) * (1 + 1j * x))
    assert np.max(np.abs(quantize(constant(1.0), 0.0, u).values - u.values)) <= 1e-12


def test_xi_acts_as_derivative_on_plane_wave():
    g = Grid.uniform(16.0, 512)
    k0 = g.freq_axis()[256 + 20]
    u = g.sample(lambda x: np.exp(1j * k0 * x) * np.exp(-((x / 10) ** 20)))
    v = quantize(symbol("xi", order=(0, 1)), 0.0, u)
    interior = np.abs(g.axis()) <= 2.0
    assert np.max(np.abs(v.values - k0 * u.values)[interior]) <= 1e-6


def test_x_only_symbol_is_pointwise():
    g = Grid.uniform(10.0, 128)
    u = g.sample(lambda x: np.exp(-x**2) + 0.1j * np.sin(x))
    v = quantize(symbol("<x>", order=(1, 0)), 0.0, u)
    assert np.max(np.abs(v.values - jb(g.points()) * u.values)) <= 1e-12


def test_dense_and_fast_quantization_agree():
    g = Grid.uniform(8.0, 64)
    u = g.sample(lambda x: np.exp(-(x - 1) ** 2))
    a = symbol("<x>^-1*sin(xi) + x*exp(-x^2)*xi", order=(0, 1))
    fast = quantize(a, 0.0, u)
    dense = quantize(a, 0.0, u, dense=True)
    assert np.max(np.abs(fast.values - dense.values)) <= 1e-10


# -- composition -----------------------------------------------------------------


def test_composition_first_order():
    c = compose_expand(symbol("xi"), symbol("x"), 1)
    assert sup_on_lattice(c, symbol("x*xi")) == pytest.approx(1.0)
    assert np.allclose(c(0.0, [[0.3]], [[2.0]]), 0.3 * 2.0 - 1j)


def test_composition_leading_term_is_product():
    a, b = symbol("<x>*xi^2"), symbol("sin(x)*<xi>")
    assert sup_on_lattice(compose_expand(a, b, 0), symbol("<x>*xi^2*sin(x)*<xi>")) <= 1e-9


def test_composition_against_operator_product():
    g = Grid.uniform(12.0, 256)
    u = g.sample(lambda x: np.exp(-x**2))
    a, b = symbol("xi^2", order=(0, 2)), symbol("x", order=(1, 0))
    c = compose_expand(a, b, 2)
    lhs = quantize(a, 0.0, quantize(b, 0.0, u))
    rhs = quantize(c, 0.0, u)
    assert float(l2_norm(lhs - rhs)) <= 1e-8
    # Op(xi^2) = -d^2; -(x e^{-x^2})'' = (6x - 4x^3) e^{-x^2}
    ref = g.sample(lambda x: (6 * x - 4 * x**3) * np.exp(-x**2))
    assert float(l2_norm(lhs - ref)) <= 1e-8


def test_composition_of_func_symbols_uses_differences():
    a = FuncSymbol(lambda t, x, xi: xi[..., 0] ** 2, order=(0, 2))
    b = FuncSymbol(lambda t, x, xi: x[..., 0], order=(1, 0))
    c = compose_expand(a, b, 2)
    assert np.allclose(c(0.0, [[0.5]], [[1.5]]), 0.5 * 1.5**2 - 2j * 1.5, atol=1e-5)


# -- brackets and involutiveness -------------------------------------------------------


def test_bracket_of_equal_symbols_vanishes():
    a = symbol("x*xi + t*<xi>")
    assert sup_on_lattice(poisson_bracket(a, a)) == 0.0


def test_bracket_of_constant_transport_pair_vanishes():
    assert sup_on_lattice(poisson_bracket(symbol("2*xi"), symbol("-2*xi"))) == 0.0


def test_bracket_with_time_dependent_partner():
    # d_t a - d_t b + a_xi b_x - a_x b_xi = -atan(x) + t/(1+x^2)
    pb = poisson_bracket(symbol("xi"), symbol("xi + t*atan(x)"))
    lat = default_lattice(1, times=(0.0, 0.7))
    got = pb(lat.T, lat.X, lat.XI)
    x = lat.X[..., 0]
    assert np.max(np.abs(got - (-np.arctan(x) + lat.T / (1 + x**2)))) <= 1e-14


def test_bracket_func_route_matches_expression_route():
    a, b = symbol("x*xi + t*xi"), symbol("<x>*sin(xi)")
    fa = FuncSymbol(lambda t, x, xi: x[..., 0] * xi[..., 0] + t * xi[..., 0], order=(1, 1))
    fb = FuncSymbol(lambda t, x, xi: np.sqrt(1 + x[..., 0] ** 2) * np.sin(xi[..., 0]), order=(1, 0))
    pts = np.array([[0.3], [-1.2], [2.0]]), np.array([[1.0], [0.5], [-2.0]])
    exact = poisson_bracket(a, b)(0.4, *pts)
    approx = poisson_bracket(fa, fb)(0.4, *pts)
    assert np.allclose(exact, approx, atol=1e-6)


def test_involutive_constant_pair():
    rep = check_involutive(SymbolFamily([symbol("3*xi"), symbol("-3*xi")]))
    assert rep.involutive and rep.max_residual == 0.0


def test_involutive_with_witnesses():
    fam = SymbolFamily([symbol("xi"), symbol("xi + t*atan(x)")], d={(0, 1): symbol("-atan(x) + t/(1+x^2)")})
    rep = check_involutive(fam, "witnessed")
    assert rep.involutive and rep.max_residual <= 1e-12


def test_wrong_witness_is_rejected():
    fam = SymbolFamily([symbol("xi"), symbol("xi + t*atan(x)")], d={(0, 1): symbol("-atan(x)")})
    assert not check_involutive(fam, "witnessed")


def test_fitted_mode_rejects_unbounded_coefficient():
    rep = check_involutive(SymbolFamily([symbol("0"), symbol("t*xi")]), "fitted")
    assert not rep.involutive
    worst = max(max(p.b_check.value, p.d_check.value) for p in rep.pairs)
    assert worst >= 1e2


def test_witness_symmetry():
    d = symbol("atan(x)")
    fam = SymbolFamily([symbol("xi"), symbol("-xi")], d={(0, 1): d})
    _, d10 = fam.witness(1, 0)
    assert sup_on_lattice(d10, -d) == 0.0
