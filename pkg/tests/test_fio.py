from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgcauchy.errors import IrregularPhaseError
from sgcauchy.fio import FioOperator, adjoint_defect, apply_fio, mapping_norm_probe
from sgcauchy.gridcore import Grid, l2_norm
from sgcauchy.phasecalc import ExpressionPhase, build_eikonal_phase, identity_phase
from sgcauchy.symbols import constant, symbol

TAU = 0.3
BETA = 1.7


@pytest.fixture(scope="module")
def grid() -> Grid:
    return Grid.uniform(16.0, 512)


def gauss(g: Grid, center: float = 0.0, width: float = 1.0):
    return g.sample(lambda x: np.exp(-(((x - center) / width) ** 2)))


def translation() -> FioOperator:
    return FioOperator(ExpressionPhase(f"(x + {BETA})*xi"))


def dilation() -> FioOperator:
    return FioOperator(build_eikonal_phase(symbol("x*xi"), TAU, 0.0))


def rel(a, b) -> float:
    return float(l2_norm(a - b) / l2_norm(b))


def test_identity_operator(grid):
    u = gauss(grid, 1.0) * (1 + 0.5j)
    for fast in (False, True):
        assert np.max(np.abs(apply_fio(FioOperator(identity_phase()), u, fast).values - u.values)) <= 1e-12


@pytest.mark.parametrize("fast", [False, True])
def test_translation_matches_shift(grid, fast):
    u = gauss(grid, 0.5)
    assert rel(apply_fio(translation(), u, fast), gauss(grid, 0.5 - BETA)) <= 1e-8


def test_dilation_matches_resampling(grid):
    u = gauss(grid, 0.0, 1.5)
    ref = grid.sample(lambda x: np.exp(-((x * math.exp(TAU) / 1.5) ** 2)))
    assert rel(apply_fio(dilation(), u), ref) <= 1e-6


def test_amplitude_multiplies_after_transport(grid):
    u = gauss(grid)
    op = FioOperator(ExpressionPhase(f"(x + {BETA})*xi"), symbol("<x>^-1", order=(-1, 0)))
    ref = grid.sample(lambda x: np.exp(-((x + BETA) ** 2)) / np.sqrt(1 + x**2))
    assert rel(apply_fio(op, u), ref) <= 1e-8
    assert rel(apply_fio(op, u, fast=True), ref) <= 1e-8


def test_adjoint_defects(grid):
    u, v = gauss(grid, 1.0), gauss(grid, -0.5, 2.0) * np.exp(1j * grid.axis())
    assert adjoint_defect(FioOperator(identity_phase()), u, v) <= 1e-12
    assert adjoint_defect(translation(), u, v) <= 1e-8
    assert adjoint_defect(dilation(), u, v) <= 1e-6


def test_type_two_is_the_transpose_of_type_one(grid):
    u = gauss(grid, 0.3)
    back = apply_fio(translation().adjoint(), apply_fio(translation(), u))
    assert rel(back, u) <= 1e-8


def test_dense_and_fast_routes_agree_in_2d():
    g = Grid.uniform(6.0, 32, n=2)
    u = g.spatial(np.exp(-np.sum(g.points() ** 2, axis=-1)))
    op = FioOperator(ExpressionPhase("x1*xi1 + x2*xi2 + 0.5*xi1 - 0.25*<xi>", n=2))
    dense = apply_fio(op, u)
    fast = apply_fio(op, u, fast=True)
    assert np.max(np.abs(dense.values - fast.values)) <= 1e-10


def test_batch_axes_are_kept(grid):
    u = gauss(grid)
    batch = u.with_values(np.stack([u.values, 2 * u.values]))
    out = apply_fio(translation(), batch)
    assert out.values.shape == (2, 512)
    assert np.allclose(out.values[1], 2 * apply_fio(translation(), u).values)


def test_degenerate_phase_is_rejected():
    g = Grid.uniform(4.0, 16)
    op = FioOperator(ExpressionPhase("x*xi^3/10"))
    with pytest.raises(IrregularPhaseError):
        apply_fio(op, gauss(g), check=True)


def test_norm_probe_ratios(grid):
    probes = [gauss(grid, c, w) for c, w in ((0.0, 1.0), (2.0, 0.5), (-3.0, 2.0))]
    ident = mapping_norm_probe(FioOperator(identity_phase()), 1.0, 2.0, probes)
    assert ident.ratio == pytest.approx(1.0, abs=1e-12)
    bracket = FioOperator(identity_phase(), symbol("<xi>", order=(0, 1)))
    assert mapping_norm_probe(bracket, 0.0, 1.0, probes).ratio == pytest.approx(1.0, abs=1e-12)
    assert mapping_norm_probe(translation(), 0.0, 0.0, probes).ratio == pytest.approx(1.0, abs=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.floats(-4, 4), st.floats(-3, 3))
def test_translation_is_unitary(beta, center):
    g = Grid.uniform(16.0, 256)
    u = gauss(g, center)
    op = FioOperator(ExpressionPhase(f"(x + {beta})*xi"))
    assert float(l2_norm(apply_fio(op, u, fast=True))) == pytest.approx(float(l2_norm(u)), rel=1e-12)


def test_constant_amplitude_scales(grid):
    u = gauss(grid)
    op = FioOperator(identity_phase(), constant(3.0))
    assert np.allclose(apply_fio(op, u).values, 3 * u.values, atol=1e-12)
