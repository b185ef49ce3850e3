from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgcauchy.errors import DomainTagError
from sgcauchy.gridcore import (
    Grid,
    GridFunction,
    fourier_forward,
    fourier_inverse,
    inner,
    l2_norm,
    read_sgpr,
    simpson_weights,
    sk_norm,
    time_nodes,
    write_csv_slice,
    write_sgpr,
)


def test_gaussian_transform_matches_closed_form(grid512):
    f = grid512.sample(lambda x: np.exp(-x**2 / 2))
    xi = grid512.frequencies()[..., 0]
    F = fourier_forward(f)
    assert np.max(np.abs(F.values - math.sqrt(2 * math.pi) * np.exp(-xi**2 / 2))) <= 1e-10


def test_zero_transforms_to_zero(grid512):
    F = fourier_forward(grid512.spatial(np.zeros(512)))
    assert np.all(F.values == 0)


def test_plane_wave_peaks_at_nearest_frequency(grid512):
    k0 = 7.3
    f = grid512.sample(lambda x: np.exp(1j * k0 * x) * np.exp(-(x / 6) ** 2))
    xi = grid512.freq_axis()
    peak = xi[np.argmax(np.abs(fourier_forward(f).values))]
    assert peak == xi[np.argmin(np.abs(xi - k0))]


def test_roundtrip_is_exact_to_rounding(rng):
    g = Grid((5.0, 7.0), (32, 64))
    vals = rng.standard_normal(g.shape) + 1j * rng.standard_normal(g.shape)
    back = fourier_inverse(fourier_forward(g.spatial(vals)))
    assert np.max(np.abs(back.values - vals)) <= 1e-12


def test_sk_norm_of_gaussian(grid512):
    f = grid512.sample(lambda x: np.exp(-x**2 / 2))
    assert sk_norm(f, 0, 0) == pytest.approx(math.pi**0.25, abs=1e-10)
    assert sk_norm(grid512.spatial(np.zeros(512)), 2.0, 3.0) == 0.0
    # int (1 + x^2) e^{-x^2} dx = 3/2 sqrt(pi)
    assert sk_norm(f, 1, 0) ** 2 == pytest.approx(1.5 * math.sqrt(math.pi), abs=1e-8)


def test_sk_norm_frequency_weight_matches_plancherel(grid512):
    # ||<D> f||^2 = int (1 + xi^2) |f_hat|^2 dxi / 2pi = ||f||^2 + ||f'||^2; f' = -x f
    f = grid512.sample(lambda x: np.exp(-x**2 / 2))
    assert sk_norm(f, 0, 1) ** 2 == pytest.approx(math.sqrt(math.pi) * 1.5, abs=1e-8)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=2), st.floats(-2, 2), st.floats(-2, 2))
def test_parseval(coefs, r, rho):
    g = Grid.uniform(12.0, 128)
    a, b = coefs
    f = g.sample(lambda x: a * np.exp(-(x - 1) ** 2) + 1j * b * np.exp(-2 * (x + 2) ** 2))
    F = fourier_forward(f)
    assert float(l2_norm(F)) == pytest.approx(float(l2_norm(f)), rel=1e-12, abs=1e-14)
    assert sk_norm(f, r, rho) >= 0.0


def test_domain_tags_are_enforced(grid256):
    f = grid256.spatial(np.ones(256))
    with pytest.raises(DomainTagError):
        fourier_inverse(f)
    with pytest.raises(DomainTagError):
        fourier_forward(fourier_forward(f))


def test_grid_validation():
    with pytest.raises(ValueError):
        Grid((1.0,), (100,))
    with pytest.raises(ValueError):
        Grid((1.0, 1.0, 1.0), (8, 8, 8))
    with pytest.raises(ValueError):
        GridFunction(Grid.uniform(1.0, 8), np.zeros(4))


def test_grid_nodes():
    g = Grid.uniform(4.0, 8)
    assert g.axis()[0] == -4.0 and g.h == (1.0,)
    assert g.freq_axis()[0] == pytest.approx(-4 * math.pi / 4)
    assert g.points().shape == (8, 1)
    assert Grid.uniform(2.0, 4, n=2).frequencies().shape == (4, 4, 2)


def test_inner_product_is_hermitian(grid256, rng):
    u = grid256.spatial(rng.standard_normal(256) + 1j * rng.standard_normal(256))
    v = grid256.spatial(rng.standard_normal(256))
    assert inner(u, v) == pytest.approx(np.conj(inner(v, u)))


def test_sgpr_roundtrip(tmp_path, rng):
    g = Grid((3.0, 2.0), (16, 8))
    f = g.spatial(rng.standard_normal(g.shape) + 1j * rng.standard_normal(g.shape))
    write_sgpr(tmp_path / "f.sgpr", f)
    back = read_sgpr(tmp_path / "f.sgpr")
    assert back.grid == g
    assert np.array_equal(back.values, f.values)
    assert (tmp_path / "f.sgpr").read_bytes()[:4] == b"SGPR"


def test_sgpr_rejects_batches(tmp_path):
    g = Grid.uniform(1.0, 8)
    with pytest.raises(ValueError):
        write_sgpr(tmp_path / "b.sgpr", GridFunction(g, np.zeros((2, 8), dtype=complex)))


def test_csv_slice(tmp_path):
    g = Grid.uniform(1.0, 4)
    write_csv_slice(tmp_path / "s.csv", g.sample(lambda x: x + 0j))
    rows = (tmp_path / "s.csv").read_text().splitlines()
    assert rows[0] == "x,re,im,abs" and len(rows) == 5
    assert rows[1].startswith("-1,-1,0,1")


def test_simpson_weights_integrate_cubics():
    w = simpson_weights(6, 0.5)
    t = np.arange(7) * 0.5
    assert w @ t**3 == pytest.approx(3.0**4 / 4, rel=1e-13)


def test_time_nodes_cover_interval():
    nodes = time_nodes(0.0, 0.35, panel=0.1)
    assert nodes[0] == 0.0 and nodes[-1] == pytest.approx(0.35)
    assert np.all(np.diff(nodes) <= 0.1 / 2 + 1e-15)
