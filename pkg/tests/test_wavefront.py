from __future__ import annotations

import math

import numpy as np
import pytest

from sgcauchy.gridcore import Grid
from sgcauchy.phasecalc import ExpressionPhase
from sgcauchy.propagator import MthOrderProblem, characteristic_roots, solve_cauchy_mth
from sgcauchy.wavefront import (
    CellGeometry,
    canonical_transform,
    cutoff_for,
    direction_index,
    estimate_wavefront,
    propagate_wavefront,
    write_flagged_csv,
)


@pytest.fixture(scope="module")
def grid() -> Grid:
    return Grid.uniform(20.0, 512)


def step(g: Grid):
    return g.sample(lambda x: (x > 0) * np.exp(-x**2))


def test_cell_geometry(grid):
    geo = CellGeometry.for_grid(grid)
    assert geo.x_cells == (33,) and geo.xi_cells == (33,)
    assert geo.x_cell(np.array([0.0])) == (16,)
    assert geo.x_center((16,))[0] == pytest.approx(0.0, abs=1e-12)
    assert np.array_equal(direction_index(np.array([[2.0], [-1.0], [0.0]])), [0, 1, -1])


@pytest.mark.parametrize("kind", [1, 2, 3])
def test_gaussian_has_empty_wavefront(grid, kind):
    assert estimate_wavefront(grid.sample(lambda x: np.exp(-x**2)), kind, (1.0, 1.0)).empty


def test_step_is_flagged_at_the_jump_in_both_directions(grid):
    est = estimate_wavefront(step(grid), 1, (0.0, 1.0))
    assert est.sorted_cells() == [((16,), 0), ((16,), 1)]
    assert all(est.ratios[c] > 1.0 for c in est.cells)
    # H^{0,rho} with rho < 1/2 holds, so nothing is flagged
    assert estimate_wavefront(step(grid), 1, (0.0, 0.25)).empty


def test_plane_wave_is_type_two(grid):
    k0 = 2 * math.pi
    est = estimate_wavefront(grid.sample(lambda x: np.exp(1j * k0 * x)), 2, (0.0, 0.0))
    assert {d for d, _ in est.cells} == {0, 1}
    geo = est.geometry
    for _, cxi in est.cells:
        assert abs(geo.xi_center(cxi)[0] - k0) <= geo.xi_width[0]
    assert est.contains([5.0], [k0])


@pytest.mark.parametrize("sign", [1, -1])
def test_chirp_is_type_three_along_its_graph(grid, sign):
    f = grid.sample(lambda x: np.exp(1j * sign * x**2))
    expected = {(0, 0), (1, 1)} if sign > 0 else {(0, 1), (1, 0)}
    assert set(estimate_wavefront(f, 3, (0.0, 0.0)).cells) == expected
    est1 = estimate_wavefront(f, 1, (0.0, 0.0))
    assert est1.cells
    for cx, d in est1.cells:
        xc = est1.geometry.x_center(cx)[0]
        assert d == (0 if sign * xc > 0 else 1)


def test_cutoff_pair_is_supported_near_its_cell(grid):
    geo = CellGeometry.for_grid(grid)
    pair = cutoff_for(1, ((20,), 0), geo)
    xc = geo.x_center((20,))
    assert pair.x_factor(xc[None])[0] >= 0.99
    assert pair.x_factor((xc + 5.0)[None])[0] == 0.0


def test_canonical_transform_of_translation_and_dilation():
    y = np.array([[1.0], [-2.0]])
    eta = np.array([[0.5], [3.0]])
    x, xi = canonical_transform(ExpressionPhase("(x + 0.7)*xi"), y, eta)
    assert np.allclose(x, y - 0.7) and np.allclose(xi, eta)
    x, xi = canonical_transform(ExpressionPhase("x*exp(0.4)*xi"), y, eta)
    assert np.allclose(x, y * math.exp(-0.4)) and np.allclose(xi, eta * math.exp(0.4))


def test_prediction_at_equal_times_is_the_data_estimate(grid):
    est = estimate_wavefront(step(grid), 1, (0.0, 1.0))
    rep = propagate_wavefront(est, characteristic_roots(["0", "-xi^2"]).members, 0.3, 0.3)
    assert rep.predicted.cells == est.cells and rep.measured is None


def test_wave_propagation_stays_inside_the_prediction(grid, tmp_path):
    fam = characteristic_roots(["0", "-xi^2"])
    g0, g1 = step(grid), grid.sample(lambda x: 0 * x)
    u = solve_cauchy_mth(MthOrderProblem(2, fam, [g0, g1]), 2.0)
    e0, e1 = estimate_wavefront(g0, 1, (0.0, 1.0)), estimate_wavefront(g1, 1, (0.0, 1.0))
    rep = propagate_wavefront([e0, e1], fam.members, 2.0, 0.0, solution=u)
    assert rep.contained and not rep.outside
    geo = rep.predicted.geometry
    centers = {round(float(geo.x_center(c)[0]), 6) for c, _ in rep.measured.cells}
    # the jump travels to x = +-2
    assert any(abs(c - 2) <= geo.x_width[0] for c in centers)
    assert any(abs(c + 2) <= geo.x_width[0] for c in centers)
    write_flagged_csv(tmp_path / "wf.csv", [rep.predicted, rep.measured])
    rows = (tmp_path / "wf.csv").read_text().splitlines()
    assert rows[0] == "k,x_cell,xi_cell,score"
    assert len(rows) == 1 + len(rep.predicted) + len(rep.measured)


def test_invalid_kind(grid):
    with pytest.raises(ValueError):
        estimate_wavefront(step(grid), 4)
