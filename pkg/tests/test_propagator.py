from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp
from scipy.special import erf

from sgcauchy.errors import NotHyperbolicError, NotInvolutiveError
from sgcauchy.gridcore import Grid, GridFunction, fourier_forward, fourier_inverse, l2_norm
from sgcauchy.propagator import (
    FirstOrderSystem,
    MthOrderProblem,
    PropagatorPlan,
    build_W1,
    characteristic_roots,
    classify_hyperbolicity,
    duhamel_solve,
    fundamental_apply,
    index_words,
    lift_data,
    solve_cauchy_mth,
    system_size,
    systemize,
)
from sgcauchy.symbols import SymbolFamily, default_lattice, quantize, symbol

C = 1.0
R0 = 0.4


@pytest.fixture(scope="module")
def grid() -> Grid:
    return Grid.uniform(20.0, 256)


def vec(g: Grid, *vals) -> GridFunction:
    return GridFunction(g, np.stack([np.asarray(v, dtype=complex) for v in vals]))


def gauss(g: Grid, c: float = 0.0) -> np.ndarray:
    return np.exp(-((g.axis() - c) ** 2))


def rel(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def transport_plan(r: float | None, nu: int = 2) -> PropagatorPlan:
    R = None if r is None else [[symbol(r)]]
    return PropagatorPlan(FirstOrderSystem([symbol(f"-{C}*xi", order=(0, 1))], R), nu_max=nu)


def mode_solution(g: Grid, data: np.ndarray, rate, t: float) -> np.ndarray:
    """Per-frequency solution of u' = rate(xi) u by an adaptive RK oracle."""
    U0 = fourier_forward(g.spatial(data)).values
    xi = g.freq_axis()
    out = np.empty_like(U0)
    for k, z in enumerate(xi):
        sol = solve_ivp(lambda _, y: rate(z) * y, (0.0, t), [U0[k]], rtol=1e-12, atol=1e-15, method="DOP853")
        out[k] = sol.y[0, -1]
    return fourier_inverse(fourier_forward(g.spatial(data)).with_values(out)).values


# -- characteristic roots and hyperbolicity ----------------------------------------------


def test_roots_of_wave_operator():
    fam = characteristic_roots(["0", "-4*xi^2"])
    lat = default_lattice(1)
    vals = [m(lat.T, lat.X, lat.XI) for m in fam.members]
    assert np.allclose(vals[0], 2 * np.abs(lat.XI[:, 0])) or np.allclose(vals[0], 2 * lat.XI[:, 0])
    assert np.allclose(vals[0] + vals[1], 0.0)


def test_roots_of_pure_power():
    fam = characteristic_roots(["0", "0", "0"])
    assert len(fam) == 3 and all(m.is_zero() for m in fam.members)


def test_roots_continue_through_crossing():
    fam = characteristic_roots(["0", "-x^2*xi^2"])
    x = np.linspace(-1, 1, 201)[:, None]
    xi = np.ones_like(x)
    v = fam[0](0.0, x, xi)
    assert np.allclose(np.abs(v), np.abs(x[:, 0] * xi[:, 0]))
    assert np.max(np.abs(np.diff(v))) <= 0.011


def test_complex_roots_are_rejected():
    with pytest.raises(NotHyperbolicError):
        characteristic_roots(["0", "xi^2"])


def test_hyperbolicity_classes():
    strict = classify_hyperbolicity(SymbolFamily([symbol("<x>*<xi>"), symbol("-<x>*<xi>")]))
    assert strict.kind == "strict" and strict.C == pytest.approx(2.0, rel=1e-6)
    assert classify_hyperbolicity(SymbolFamily([symbol("2*xi"), symbol("-2*xi")])).kind == "involutive"
    assert classify_hyperbolicity(SymbolFamily([symbol("0"), symbol("t*xi")])).kind == "none"


def test_system_sizes():
    assert system_size(2) == 3 and system_size(3) == 10
    assert index_words(2) == [(), (1,), (2,)]
    assert len(index_words(3)) == 10


# -- first-order propagator ---------------------------------------------------------------------


def test_equal_times_give_identity(grid):
    g = vec(grid, gauss(grid))
    assert np.array_equal(fundamental_apply(transport_plan(R0), 0.3, 0.3, g).values, g.values)


def test_pure_transport_is_a_shift(grid):
    g = vec(grid, gauss(grid))
    E = fundamental_apply(transport_plan(None), 0.7, 0.2, g)
    assert rel(E.values[0], gauss(grid, -C * 0.5)) <= 1e-6


def test_transport_with_constant_potential_improves_with_depth(grid):
    t = 0.5
    g0 = gauss(grid)
    oracle = mode_solution(grid, g0, lambda z: -1j * (-C * z + R0), t)
    closed = np.exp(-1j * R0 * t) * gauss(grid, -C * t)
    assert rel(oracle, closed) <= 1e-10
    errs = [rel(fundamental_apply(transport_plan(R0, nu), t, 0.0, vec(grid, g0)).values[0], oracle)
            for nu in (1, 2, 3)]
    assert errs[2] <= 1e-4
    assert errs[0] > errs[1] > errs[2]


def test_semigroup_property(grid):
    plan = transport_plan(R0, 3)
    g = vec(grid, gauss(grid, 1.0))
    direct = fundamental_apply(plan, 0.5, 0.0, g)
    split = fundamental_apply(plan, 0.5, 0.2, fundamental_apply(plan, 0.2, 0.0, g))
    assert rel(split.values, direct.values) <= 1e-4
    assert rel(direct.values[0], np.exp(-0.5j * R0) * gauss(grid, 1.0 - 0.5 * C)) <= 1e-4


def test_W1_cancels_for_exact_transport(grid):
    u = vec(grid, gauss(grid))
    w = build_W1(transport_plan(None), 0.4, 0.1, u)
    assert np.max(np.abs(w.values)) <= 1e-5 * float(np.max(l2_norm(u)))
    assert np.max(np.abs(build_W1(transport_plan(R0), 0.4, 0.1, u.with_values(0 * u.values)).values)) == 0.0


@pytest.mark.parametrize("mode", ["eikonal", "difference"])
def test_W1_keeps_the_potential(grid, mode):
    u = vec(grid, gauss(grid))
    w = build_W1(transport_plan(R0), 0.4, 0.1, u, dt_mode=mode)
    assert np.max(np.abs(w.values[0] - (-1j * R0 * gauss(grid, -C * 0.3)))) <= 1e-5


def test_batched_data_match_single_applications(grid):
    plan = transport_plan(R0, 2)
    a, b = gauss(grid), gauss(grid, 2.0)
    batch = GridFunction(grid, np.stack([a, b])[None].astype(complex))
    out = fundamental_apply(plan, 0.4, 0.0, batch).values[0]
    for k, d in enumerate((a, b)):
        single = fundamental_apply(plan, 0.4, 0.0, vec(grid, d)).values[0]
        assert np.max(np.abs(out[k] - single)) <= 1e-13


def test_duhamel_without_forcing(grid):
    plan = transport_plan(R0)
    g = vec(grid, gauss(grid))
    assert np.array_equal(duhamel_solve(plan, 0.0, g, None, 0.4).values,
                          fundamental_apply(plan, 0.4, 0.0, g).values)


def test_duhamel_with_static_operator(grid):
    plan = PropagatorPlan(FirstOrderSystem([symbol("0")]))
    G, F = vec(grid, gauss(grid)), vec(grid, gauss(grid, 1.0))
    U = duhamel_solve(plan, 0.1, G, lambda s: F, 0.5)
    assert np.max(np.abs(U.values - (G.values + 0.4j * F.values))) <= 1e-12


def test_duhamel_transport_against_mode_oracle(grid):
    plan = PropagatorPlan(FirstOrderSystem([symbol("-xi", order=(0, 1))]), nu_max=1)
    G, F = vec(grid, gauss(grid)), vec(grid, gauss(grid, 1.0))
    t = 0.3
    U = duhamel_solve(plan, 0.0, G, lambda s: F, t)
    # -i u' - xi u = F
    Gh = fourier_forward(G).values[0]
    Fh = fourier_forward(F).values[0]
    xi = grid.freq_axis()
    out = np.empty_like(Gh)
    for k, z in enumerate(xi):
        sol = solve_ivp(lambda _, y: 1j * (z * y + Fh[k]), (0, t), [Gh[k]], rtol=1e-12, atol=1e-15, method="DOP853")
        out[k] = sol.y[0, -1]
    ref = fourier_inverse(fourier_forward(G).with_values(out[None])).values[0]
    assert rel(U.values[0], ref) <= 1e-5


# -- m-th order problems ---------------------------------------------------------------------------


def wave_problem(g: Grid, c: float = 1.0) -> MthOrderProblem:
    fam = characteristic_roots(["0", f"-{c * c}*xi^2"])
    return MthOrderProblem(2, fam, [g.spatial(np.exp(-g.axis() ** 2)), g.spatial(np.zeros(g.N[0]))],
                           coefficients=[symbol(0), symbol(f"-{c * c}*xi^2")])


def test_wave_data_lifting(grid):
    prob = wave_problem(grid, 1.5)
    g1 = grid.spatial(np.exp(-(grid.axis() - 1) ** 2))
    prob = MthOrderProblem(2, prob.roots, [prob.data[0], g1])
    sp_ = systemize(prob)
    assert sp_.N == 3 and sp_.words == [(), (1,), (2,)]
    assert np.array_equal(sp_.data.values[0], prob.data[0].values)
    for word, sign in (((1,), -1), ((2,), 1)):
        expected = g1.values + quantize(symbol(f"{sign * 1.5}*xi"), 0.0, prob.data[0]).values
        assert np.max(np.abs(lift_data(prob, word).values - expected)) <= 1e-12


def test_third_order_system_size(grid):
    fam = SymbolFamily([symbol("xi"), symbol("0"), symbol("-xi")])
    prob = MthOrderProblem(3, fam, [grid.spatial(gauss(grid))] * 3)
    assert systemize(prob).N == 10


def test_solution_at_initial_time(grid):
    prob = wave_problem(grid)
    assert np.array_equal(solve_cauchy_mth(prob, 0.0).values, prob.data[0].values)


def test_wave_equation_against_dalembert():
    g = Grid.uniform(20.0, 512)
    prob = wave_problem(g)
    t = 0.5
    u = solve_cauchy_mth(prob, t, nu_max=2)
    x = g.axis()
    exact = 0.5 * (np.exp(-(x - t) ** 2) + np.exp(-(x + t) ** 2))
    spectral = fourier_inverse(fourier_forward(g.spatial(np.exp(-x**2))).with_values(
        np.cos(t * g.freq_axis()) * fourier_forward(g.spatial(np.exp(-x**2))).values)).values
    assert rel(spectral, exact) <= 1e-12
    assert rel(u.values, exact) <= 1e-3


def test_factorisation_mismatch_is_rejected(grid):
    fam = characteristic_roots(["0", "-xi^2"])
    with pytest.raises(NotHyperbolicError):
        MthOrderProblem(2, fam, [grid.spatial(gauss(grid))] * 2, coefficients=[symbol(0), symbol("-2*xi^2")])


def test_non_involutive_roots_are_rejected(grid):
    prob = MthOrderProblem(2, SymbolFamily([symbol("0"), symbol("t*xi")]), [grid.spatial(gauss(grid))] * 2)
    with pytest.raises(NotInvolutiveError):
        systemize(prob)


def test_time_dependent_roots_against_mode_oracle():
    g = Grid.uniform(20.0, 128)
    x, xi = g.axis(), g.freq_axis()
    fam = SymbolFamily([symbol("xi", order=(1, 1)), symbol("(2+t)*xi", order=(1, 1))], b={(0, 1): symbol("1/(1+t)")})
    g0, g1 = np.exp(-x**2), 0.5 * np.exp(-(x - 1) ** 2)
    prob = MthOrderProblem(2, fam, [g.spatial(g0), g.spatial(g1)])
    T = 0.4
    G0 = fourier_forward(g.spatial(g0)).values
    G1 = fourier_forward(g.spatial(g1)).values
    out = np.empty_like(G0)
    for k, z in enumerate(xi):
        # (D_t - (2+t) z)... expanded: u'' = i(3+t) z u' + i z u + (2+t) z^2 u
        f = lambda t, y, z=z: [y[1], 1j * (3 + t) * z * y[1] + 1j * z * y[0] + (2 + t) * z * z * y[0]]
        out[k] = solve_ivp(f, (0, T), [G0[k], 1j * G1[k]], rtol=1e-11, atol=1e-14, method="DOP853").y[0, -1]
    ref = fourier_inverse(fourier_forward(g.spatial(g0)).with_values(out)).values
    for nu in (1, 3):
        assert rel(solve_cauchy_mth(prob, T, nu_max=nu).values, ref) <= 1e-5


@pytest.mark.slow
def test_dilation_branch():
    g = Grid.uniform(10.0, 128)
    x = g.axis()
    fam = characteristic_roots(["0", "-x^2*xi^2"])
    g0 = np.exp(-x**2)
    g1 = -quantize(symbol("x*xi"), 0.0, g.spatial(g0)).values
    prob = MthOrderProblem(2, fam, [g.spatial(g0), g.spatial(g1)])
    u = solve_cauchy_mth(prob, 0.5, nu_max=2)
    assert rel(u.values, np.exp(-((x * math.exp(-0.5)) ** 2))) <= 1e-2


def test_forced_problem_runs_through_duhamel(grid):
    zero = grid.spatial(np.zeros(grid.N[0]))
    forced = MthOrderProblem(1, characteristic_roots(["-xi"]), [zero], forcing=lambda s: grid.spatial(gauss(grid)))
    t = 0.2
    u = solve_cauchy_mth(forced, t)
    # (D_t - D_x) u = f from zero data: u = i int_0^t f(x + tau) dtau
    x = grid.axis()
    exact = 0.5j * math.sqrt(math.pi) * (erf(x + t) - erf(x))
    assert rel(u.values, exact) <= 1e-6
