"""Acceptance suite: one test per criterion, each printing a single pass/fail line."""

from __future__ import annotations

import math
import time

import numpy as np
import pytest

from sgcauchy.cli import EXIT_OK, main
from sgcauchy.fio import FioOperator, adjoint_defect, apply_fio
from sgcauchy.gridcore import Grid, GridFunction, fourier_forward, fourier_inverse, jb, l2_norm
from sgcauchy.multiphase import exchange_time, multiproduct_phase
from sgcauchy.phasecalc import (
    ExpressionPhase,
    backward_residual,
    build_eikonal_phase,
    eikonal_residual,
    invert_flow,
    solve_hamilton_flow,
)
from sgcauchy.propagator import (
    FirstOrderSystem,
    MthOrderProblem,
    PropagatorPlan,
    characteristic_roots,
    classify_hyperbolicity,
    fundamental_apply,
    solve_cauchy_mth,
    systemize,
)
from sgcauchy.stochastic import (
    NoiseSpec,
    StochasticForcing,
    check_noise_admissible,
    identity_kernel,
    isometry_norm,
    mc_solution,
    sample_noise,
    stochastic_integral,
)
from sgcauchy.symbols import SymbolFamily, check_involutive, default_lattice, order_check_values, symbol
from sgcauchy.wavefront import estimate_wavefront, propagate_wavefront

LAT = default_lattice(1)
SMALL = default_lattice(1, per_axis=9)


@pytest.fixture
def report(request, capsys):
    """Collect named checks and print one line for the criterion."""
    checks: list[tuple[str, bool]] = []

    def record(name: str, ok: bool) -> bool:
        checks.append((name, bool(ok)))
        return bool(ok)

    yield record
    ok = all(c for _, c in checks) and bool(checks)
    failed = [n for n, c in checks if not c]
    label = request.node.name.removeprefix("test_")
    with capsys.disabled():
        print(f"\n[acceptance] {label}: {'PASS' if ok else 'FAIL'}" + (f" ({', '.join(failed)})" if failed else ""))
    assert ok, f"failed checks: {failed}"


def rel(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / np.linalg.norm(np.asarray(b)))


# 1 -------------------------------------------------------------------------------------------


def test_criterion_01_eikonal_closed_forms(report):
    start = time.perf_counter()
    X, XI = LAT.X, LAT.XI
    assert LAT.X.shape[0] == 33 * 33
    c, t, s = 1.5, 0.4, 0.1
    tr_sym, dil_sym = symbol(f"{c}*xi"), symbol("x*xi")
    tr = build_eikonal_phase(tr_sym, t, s)
    dil = build_eikonal_phase(dil_sym, t, s)
    report("transport sup", np.max(np.abs(tr(X, XI) - (X[:, 0] + c * (t - s)) * XI[:, 0])) <= 1e-8)
    report("dilation sup", np.max(np.abs(dil(X, XI) - X[:, 0] * math.exp(t - s) * XI[:, 0])) <= 1e-8)
    report("transport residual", eikonal_residual(tr, tr_sym) <= 1e-6)
    report("dilation residual", eikonal_residual(dil, dil_sym) <= 1e-6)
    report("runtime", time.perf_counter() - start <= 5.0)


# 2 -------------------------------------------------------------------------------------------


@pytest.mark.parametrize("a", ["1.5*xi", "x*xi"])
def test_criterion_02_flow_phase_identities(report, a):
    sym = symbol(a)
    t, s = 0.5, 0.1
    phi = build_eikonal_phase(sym, t, s, method="flow")
    X, XI = SMALL.X, SMALL.XI
    vals = phi.evaluate(X, XI)
    qbar = invert_flow(solve_hamilton_flow(sym, t, s, X, XI), X, XI)
    report("xi-gradient", np.max(np.abs(vals.dxi - qbar) / jb(X)) <= 1e-5)
    p = solve_hamilton_flow(sym, t, s, qbar, XI).p
    report("x-gradient", np.max(np.abs(vals.dx - p) / jb(XI)) <= 1e-5)
    report("backward equation", backward_residual(phi, sym, SMALL) <= 1e-5)


# 3 -------------------------------------------------------------------------------------------


def _dilation(a: float, t: float, s: float) -> ExpressionPhase:
    return ExpressionPhase(f"x*exp({a}*(t - s))*xi", t=t, s=s)


def test_criterion_03_multiproduct_algebra(report):
    X, XI = LAT.X, LAT.XI
    c1, c2, t0, t1, t2 = 1.3, -0.4, 0.9, 0.5, 0.2
    prod = multiproduct_phase([build_eikonal_phase(symbol(f"{c1}*xi"), t0, t1),
                               build_eikonal_phase(symbol(f"{c2}*xi"), t1, t2)])
    exact = (X[:, 0] + c1 * (t0 - t1) + c2 * (t1 - t2)) * XI[:, 0]
    report("transport composition", np.max(np.abs(prod(X, XI) - exact)) <= 1e-10)
    ts, al = [0.6, 0.45, 0.3, 0.0], [0.8, -0.5, 1.2]
    p = [_dilation(al[k], ts[k], ts[k + 1]) for k in range(3)]
    left = multiproduct_phase([multiproduct_phase(p[:2]), p[2]])
    right = multiproduct_phase([p[0], multiproduct_phase(p[1:])])
    scale = jb(SMALL.X) * jb(SMALL.XI)
    report("associativity", np.max(np.abs(left(SMALL.X, SMALL.XI) - right(SMALL.X, SMALL.XI)) / scale) <= 1e-9)
    phi = _dilation(0.7, 0.6, 0.2)
    same = multiproduct_phase([phi, _dilation(-1.1, 0.2, 0.2)])
    report("coincident times", np.array_equal(same(X, XI), phi(X, XI)))


# 4 -------------------------------------------------------------------------------------------


def test_criterion_04_commutative_law(report):
    start = time.perf_counter()
    fam = SymbolFamily([symbol("1.2*xi"), symbol("-0.7*xi")])
    X, XI = LAT.X, LAT.XI
    t0, t1, t2 = 0.8, 0.5, 0.1
    res = exchange_time(fam, None, [t0, t1, t2], 1, X, XI)
    report("Z", np.max(np.abs(res.Z - (t0 - t1 + t2))) <= 1e-9)
    report("psi", np.max(np.abs(res.psi)) <= 1e-9)
    report("boundary t1=t0", np.all(exchange_time(fam, None, [t0, t0, t2], 1, X, XI).Z == t2))
    report("boundary t1=t2", np.all(exchange_time(fam, None, [t0, t2, t2], 1, X, XI).Z == t0))
    h = 1e-3
    up = exchange_time(fam, None, [t0, t1 + h, t2], 1, X, XI).Z
    dn = exchange_time(fam, None, [t0, t1 - h, t2], 1, X, XI).Z
    slope = (up - dn) / (2 * h)
    report("slope", np.all(slope >= -1.25) and np.all(slope <= -0.75))
    fam_d = SymbolFamily([symbol("xi"), symbol("xi + t*atan(x)")], d={(0, 1): symbol("-atan(x) + t/(1+x^2)")})
    res_d = exchange_time(fam_d, None, [0.6, 0.3, 0.0], 1, X, XI)
    report("d-family order test", order_check_values(res_d.psi, LAT, (0.0, 0.0)).passed)
    report("runtime", time.perf_counter() - start <= 60.0)


# 5 -------------------------------------------------------------------------------------------


def test_criterion_05_involutiveness_classifier(report):
    report("constant pair", check_involutive(SymbolFamily([symbol("2*xi"), symbol("-2*xi")])).involutive)
    fam_d = SymbolFamily([symbol("xi"), symbol("xi + t*atan(x)")], d={(0, 1): symbol("-atan(x) + t/(1+x^2)")})
    report("witnessed pair", check_involutive(fam_d, "witnessed").involutive)
    report("fitted rejection", not check_involutive(SymbolFamily([symbol("0"), symbol("t*xi")]), "fitted").involutive)
    strict = classify_hyperbolicity(SymbolFamily([symbol("<x>*<xi>"), symbol("-<x>*<xi>")]))
    report("strict", strict.kind == "strict")


# 6 -------------------------------------------------------------------------------------------


def test_criterion_06_fio_oracles(report):
    g = Grid.uniform(16.0, 512)
    beta, tau = 1.7, 0.3
    u = g.sample(lambda x: np.exp(-((x - 0.5) ** 2)))
    trans = FioOperator(ExpressionPhase(f"(x + {beta})*xi"))
    dil = FioOperator(build_eikonal_phase(symbol("x*xi"), tau, 0.0))
    shifted = g.sample(lambda x: np.exp(-((x + beta - 0.5) ** 2)))
    report("translation", float(l2_norm(apply_fio(trans, u) - shifted) / l2_norm(shifted)) <= 1e-6)
    w = g.sample(lambda x: np.exp(-((x / 1.5) ** 2)))
    scaled = g.sample(lambda x: np.exp(-((x * math.exp(tau) / 1.5) ** 2)))
    report("dilation", float(l2_norm(apply_fio(dil, w) - scaled) / l2_norm(scaled)) <= 1e-6)
    v = g.sample(lambda x: np.exp(-(((x + 0.5) / 2) ** 2)) * np.exp(1j * x))
    report("adjoint translation", adjoint_defect(trans, u, v) <= 1e-8)
    report("adjoint dilation", adjoint_defect(dil, u, v) <= 1e-8)


# 7 -------------------------------------------------------------------------------------------


def _multiplier_oracle(g: Grid, data: np.ndarray, multiplier: np.ndarray) -> np.ndarray:
    hat = fourier_forward(g.spatial(data))
    return fourier_inverse(hat.with_values(multiplier * hat.values)).values


def test_criterion_07_propagator(report):
    g = Grid.uniform(20.0, 256)
    c, r, t = 1.0, 0.4, 0.5
    g0 = np.exp(-g.axis() ** 2)

    def plan(nu: int) -> PropagatorPlan:
        return PropagatorPlan(FirstOrderSystem([symbol(f"-{c}*xi", order=(0, 1))], [[symbol(r)]]), nu_max=nu)

    data = GridFunction(g, g0[None].astype(complex), "spatial")
    oracle = _multiplier_oracle(g, g0, np.exp(-1j * (-c * g.freq_axis() + r) * t))
    errs = [rel(fundamental_apply(plan(nu), t, 0.0, data).values[0], oracle) for nu in (1, 2, 3)]
    report("nu=3 error", errs[2] <= 1e-4)
    report("monotone", errs[0] > errs[1] > errs[2])
    p3 = plan(3)
    direct = fundamental_apply(p3, t, 0.0, data)
    split = fundamental_apply(p3, t, 0.2, fundamental_apply(p3, 0.2, 0.0, data))
    report("semigroup", rel(split.values, direct.values) <= 1e-4)
    report("identity", np.array_equal(fundamental_apply(p3, 0.3, 0.3, data).values, data.values))


# 8 -------------------------------------------------------------------------------------------


def test_criterion_08_wave_equation(report):
    start = time.perf_counter()
    g = Grid.uniform(20.0, 512)
    x = g.axis()
    fam = characteristic_roots(["0", "-xi^2"])
    prob = MthOrderProblem(2, fam, [g.spatial(np.exp(-x**2)), g.spatial(np.zeros_like(x))])
    t = 0.5
    u = solve_cauchy_mth(prob, t, nu_max=2)
    exact = 0.5 * (np.exp(-((x - t) ** 2)) + np.exp(-((x + t) ** 2)))
    spectral = _multiplier_oracle(g, np.exp(-x**2), np.cos(t * g.freq_axis()))
    report("oracles agree", rel(spectral, exact) <= 1e-10)
    report("d'Alembert", rel(u.values, exact) <= 1e-3)
    report("runtime", time.perf_counter() - start <= 120.0)
    report("N(m=2)", systemize(prob).N == 3)
    fam3 = SymbolFamily([symbol("xi"), symbol("0"), symbol("-xi")])
    report("N(m=3)", systemize(MthOrderProblem(3, fam3, [g.spatial(np.exp(-x**2))] * 3)).N == 10)


# 9 -------------------------------------------------------------------------------------------


def test_criterion_09_wavefront_propagation(report):
    g = Grid.uniform(20.0, 512)
    fam = characteristic_roots(["0", "-xi^2"])
    g0 = g.sample(lambda x: (x > 0) * np.exp(-x**2))
    g1 = g.sample(lambda x: 0 * x)
    t = 2.0
    u = solve_cauchy_mth(MthOrderProblem(2, fam, [g0, g1]), t)
    orders = (0.0, 1.0)
    e0, e1 = estimate_wavefront(g0, 1, orders), estimate_wavefront(g1, 1, orders)
    rep = propagate_wavefront([e0, e1], fam.members, t, 0.0, solution=u)
    report("containment", rep.contained is True)
    geo = rep.predicted.geometry
    targets = [geo.x_cell(np.array([v]))[0] for v in (-t, t)]
    report("flags present", bool(rep.measured.cells))
    report("near x = +-ct", all(min(abs(cx[0] - k) for k in targets) <= 1 for cx, _ in rep.measured.cells))
    schwartz = g.sample(lambda x: np.exp(-x**2))
    report("Schwartz empty", all(estimate_wavefront(schwartz, k, (1.0, 1.0)).empty for k in (1, 2, 3)))


# 10 ------------------------------------------------------------------------------------------


def test_criterion_10_stochastic(report):
    start = time.perf_counter()
    big = Grid.uniform(40.0, 1024)
    mass = check_noise_admissible(NoiseSpec.from_expression(big, "1/(1+xi^2)"))
    report("pi mass accepted", mass.finite and abs(mass.mass - math.pi) / math.pi <= 0.02)
    g = Grid.uniform(10.0, 64)
    flat = NoiseSpec.from_expression(g, "1 + 0*xi", infinite_tail=True)
    report("flat rejected", not check_noise_admissible(flat).finite)

    small = Grid.uniform(4.0, 16)
    atom = NoiseSpec.atom(small, 0.0, 1.0, dt=0.1, seed=7)
    I = stochastic_integral(identity_kernel(), 1.0, atom, sample_noise(atom, 1.0, 10_000), 1.0, [0.0])
    iso = isometry_norm(identity_kernel(), 1.0, atom, 1.0, [0.0])
    report("isometry", abs(I.var(axis=0)[0] - iso[0]) / iso[0] <= 0.05)

    fam = characteristic_roots(["0", "-xi^2"])
    prob = MthOrderProblem(2, fam, [g.sample(lambda x: np.exp(-x**2)), g.sample(lambda x: 0 * x)])
    smooth = NoiseSpec.from_expression(g, "exp(-xi^2/4)", dt=0.05, seed=7)
    zero = mc_solution(prob, StochasticForcing(smooth, 0.0), 0.5, 10)
    report("sigma = 0", np.array_equal(zero.mean.values, zero.deterministic.values))
    mc = mc_solution(prob, StochasticForcing(smooth, 1.0), 0.5, 400)
    z = np.abs(mc.mean.values - mc.deterministic.values) / mc.stderr.values.real
    report("mean within 3 SE", float(np.max(z)) <= 3.0)
    report("runtime", time.perf_counter() - start <= 600.0)


# 11 ------------------------------------------------------------------------------------------


def test_criterion_11_determinism(report, tmp_path):
    out = tmp_path / "verify"
    report("first run", main(["verify", "--out", str(out), "--seed", "7"]) == EXIT_OK)
    first = {p.name: p.read_bytes() for p in sorted(out.iterdir())}
    report("second run", main(["verify", "--out", str(out), "--seed", "7"]) == EXIT_OK)
    second = {p.name: p.read_bytes() for p in sorted(out.iterdir())}
    report("manifest identical", first.get("manifest.json") == second.get("manifest.json"))
    report("outputs identical", first == second)
