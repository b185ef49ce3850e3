"""Cell-resolution estimates of the type 1, 2 and 3 global wave-front sets and their propagation.

Phase space is cut into cone cells: bounded x-cells or x-directions times bounded xi-cells or
xi-directions. Singular behaviour "at infinity" in a variable is read off two dyadic shells,
[R, 2R) and [2R, 4R), kept inside the lower half of the box (x) or spectrum (xi) so that
periodic wrap-around and the Nyquist band never enter. A center is flagged when the localized
energy carries real signal (relative to the median over centers and an absolute floor) and
its weighted energy fails to decay from the inner to the outer shell.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import IrregularPhaseError
from .gridcore import SPATIAL, Grid, GridFunction, _require, fourier_forward, fourier_inverse, jb, l2_norm
from .phasecalc import EikonalPhase, PhaseFunction
from .symbols import FuncSymbol, Symbol, quantize

KINDS = (1, 2, 3)
DECAY_RATIO = 0.75
MEDIAN_FACTOR = 10.0
ABS_FLOOR = 1e-8
PEAK_FRACTION = 1e-3
WINDOW_SOFTNESS = 0.5
CELL_SCALE = 48.0
SECTORS_2D = 8


# ---------------------------------------------------------------------------
# windows


def plateau(u: np.ndarray, a: float, sigma: float) -> np.ndarray:
    """Smooth window equal to 1 - O(exp(-(a/sigma)^2)) on |u| < a and decaying like a Gaussian outside."""
    return 0.5 * (erf((u + a) / sigma) - erf((u - a) / sigma))


def _angle(v: np.ndarray) -> np.ndarray:
    return np.arctan2(v[..., 1], v[..., 0])


def direction_index(v: np.ndarray) -> np.ndarray:
    """Direction cell of vectors (..., n); -1 for the zero vector."""
    v = np.asarray(v, dtype=float)
    if v.shape[-1] == 1:
        return np.where(v[..., 0] > 0, 0, np.where(v[..., 0] < 0, 1, -1))
    k = np.round(_angle(v) / (2 * math.pi / SECTORS_2D)).astype(int) % SECTORS_2D
    return np.where(np.sum(v * v, axis=-1) > 0, k, -1)


def direction_count(n: int) -> int:
    return 2 if n == 1 else SECTORS_2D


def direction_vectors(n: int, d: int, spread: bool = False) -> np.ndarray:
    """Unit vectors inside direction cell d; with ``spread`` also near its edges."""
    if n == 1:
        return np.array([[1.0 if d == 0 else -1.0]])
    width = 2 * math.pi / SECTORS_2D
    offs = [0.0] if not spread else [-0.45 * width, 0.0, 0.45 * width]
    return np.array([[math.cos(d * width + o), math.sin(d * width + o)] for o in offs])


def _sector_weight(v: np.ndarray, d: int) -> np.ndarray:
    """Smooth angular partition of unity (raised cosine) for n = 2; a sign indicator for n = 1."""
    if v.shape[-1] == 1:
        return (v[..., 0] > 0) if d == 0 else (v[..., 0] < 0)
    width = 2 * math.pi / SECTORS_2D
    delta = np.angle(np.exp(1j * (_angle(v) - d * width)))
    return np.where(np.abs(delta) < width, np.cos(0.5 * math.pi * delta / width) ** 2, 0.0)


def _sector_mask(v: np.ndarray, d: int) -> np.ndarray:
    return direction_index(v) == d


# ---------------------------------------------------------------------------
# cell geometry


@dataclass(frozen=True)
class CellGeometry:
    """Cell sizes and shell radii tied to one grid."""

    L: tuple[float, ...]
    xi_max: tuple[float, ...]
    x_cells: tuple[int, ...]
    xi_cells: tuple[int, ...]

    @classmethod
    def for_grid(cls, grid: Grid, cells: int | None = None) -> "CellGeometry":
        xi_max = tuple(float(np.max(np.abs(grid.freq_axis(d)))) for d in range(grid.n))
        if cells is None:
            counts = tuple(max(2, int(2 * L * xm / CELL_SCALE)) for L, xm in zip(grid.L, xi_max))
        else:
            counts = (int(cells),) * grid.n
        return cls(tuple(grid.L), xi_max, counts, counts)

    @property
    def n(self) -> int:
        return len(self.L)

    @property
    def x_width(self) -> tuple[float, ...]:
        return tuple(2 * L / c for L, c in zip(self.L, self.x_cells))

    @property
    def xi_width(self) -> tuple[float, ...]:
        return tuple(2 * xm / c for xm, c in zip(self.xi_max, self.xi_cells))

    @property
    def R_x(self) -> float:
        return min(self.L) / 8

    @property
    def R_xi(self) -> float:
        return min(self.xi_max) / 8

    def x_center(self, cell: tuple[int, ...]) -> np.ndarray:
        return np.array([-L + w * (i + 0.5) for L, w, i in zip(self.L, self.x_width, cell)])

    def xi_center(self, cell: tuple[int, ...]) -> np.ndarray:
        return np.array([-xm + w * (i + 0.5) for xm, w, i in zip(self.xi_max, self.xi_width, cell)])

    def x_cell(self, x: np.ndarray) -> tuple[int, ...] | None:
        out = []
        for L, w, c, v in zip(self.L, self.x_width, self.x_cells, x):
            i = int(math.floor((v + L) / w))
            if not 0 <= i < c:
                return None
            out.append(i)
        return tuple(out)

    def xi_cell(self, xi: np.ndarray) -> tuple[int, ...] | None:
        out = []
        for xm, w, c, v in zip(self.xi_max, self.xi_width, self.xi_cells, xi):
            i = int(math.floor((v + xm) / w))
            if not 0 <= i < c:
                return None
            out.append(i)
        return tuple(out)

    def all_x_cells(self) -> list[tuple[int, ...]]:
        return list(itertools.product(*[range(c) for c in self.x_cells]))

    def all_xi_cells(self) -> list[tuple[int, ...]]:
        return list(itertools.product(*[range(c) for c in self.xi_cells]))


# ---------------------------------------------------------------------------
# cutoffs


@dataclass(frozen=True)
class CutoffPair:
    """Product cutoff c_k = A(x) B(xi) attached to one cone cell.

    Type 1: A is a plateau bump around ``x0`` and B a directional window toward ``xi0`` for
    |xi| >= R. Type 2 swaps the roles. Type 3 uses directional windows in both variables.
    ``support`` records the half-widths (bounded variables) or inner radii (directions).
    """

    kind: int
    x0: np.ndarray
    xi0: np.ndarray
    x_scale: float
    xi_scale: float
    support: tuple[float, float] = field(default=(0.0, 0.0))

    def _bump(self, v: np.ndarray, center: np.ndarray, half: float) -> np.ndarray:
        out = np.ones(v.shape[:-1])
        for d in range(v.shape[-1]):
            out = out * plateau(v[..., d] - center[d], half, WINDOW_SOFTNESS * half)
        return out

    def _directional(self, v: np.ndarray, direction: np.ndarray, R: float) -> np.ndarray:
        d = int(direction_index(direction[None])[0])
        r = np.sqrt(np.sum(v * v, axis=-1))
        radial = 0.5 * (1 + erf((r - R) / (R / 4)))
        return _sector_weight(v, d) * radial

    def x_factor(self, x: np.ndarray) -> np.ndarray:
        if self.kind == 1:
            return self._bump(x, self.x0, self.x_scale)
        return self._directional(x, self.x0, self.x_scale)

    def xi_factor(self, xi: np.ndarray) -> np.ndarray:
        if self.kind == 2:
            return self._bump(xi, self.xi0, self.xi_scale)
        return self._directional(xi, self.xi0, self.xi_scale)

    def symbol(self) -> Symbol:
        n = len(self.x0)
        return FuncSymbol(lambda t, x, xi: self.x_factor(x) * self.xi_factor(xi), n=n, order=(0.0, 0.0),
                          depends=("x", "xi"))

    def apply(self, f: GridFunction) -> GridFunction:
        """Op(c_k) f by left quantization."""
        return quantize(self.symbol(), 0.0, f)


# ---------------------------------------------------------------------------
# estimates


@dataclass(frozen=True)
class WaveFrontEstimate:
    """Flagged cone cells of one kind.

    Keys: type 1 (x-cell, xi-direction), type 2 (x-direction, xi-cell), type 3
    (x-direction, xi-direction). Directions are ints, cells tuples of ints.
    """

    kind: int
    orders: tuple[float, float]
    geometry: CellGeometry
    cells: frozenset
    scores: dict = field(default_factory=dict, compare=False)
    ratios: dict = field(default_factory=dict, compare=False)

    def __len__(self) -> int:
        return len(self.cells)

    @property
    def empty(self) -> bool:
        return not self.cells

    def sorted_cells(self) -> list:
        return sorted(self.cells, key=repr)

    def cell_of(self, x, xi):
        """Cone cell containing the phase-space point (x, xi), or None outside the sampled region."""
        g = self.geometry
        x = np.atleast_1d(np.asarray(x, dtype=float))
        xi = np.atleast_1d(np.asarray(xi, dtype=float))
        if self.kind == 1:
            cx = g.x_cell(x)
            d = int(direction_index(xi[None])[0])
            return None if cx is None or d < 0 else (cx, d)
        if self.kind == 2:
            d = int(direction_index(x[None])[0])
            cxi = g.xi_cell(xi)
            return None if cxi is None or d < 0 else (d, cxi)
        dx = int(direction_index(x[None])[0])
        dxi = int(direction_index(xi[None])[0])
        return None if dx < 0 or dxi < 0 else (dx, dxi)

    def contains(self, x, xi) -> bool:
        return self.cell_of(x, xi) in self.cells

    def dilate(self, cells: int = 1) -> frozenset:
        """Cells within ``cells`` index steps of a flagged cell (directions step cyclically in 2D)."""
        out = set()
        for key in self.cells:
            out.update(_neighbours(self.kind, key, cells, self.geometry))
        return frozenset(out)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "x_cell", "xi_cell", "score"])
            for key in self.sorted_cells():
                w.writerow([self.kind, _fmt(key[0]), _fmt(key[1]), f"{self.scores.get(key, float('nan')):.6e}"])


def _fmt(c) -> str:
    if isinstance(c, tuple):
        return ";".join(str(v) for v in c)
    return str(c)


def _dir_neighbours(d: int, n: int, k: int) -> list[int]:
    if n == 1:
        return [d]
    return [(d + s) % SECTORS_2D for s in range(-k, k + 1)]


def _cell_neighbours(c: tuple[int, ...], counts: tuple[int, ...], k: int) -> list[tuple[int, ...]]:
    ranges = [range(max(0, i - k), min(n, i + k + 1)) for i, n in zip(c, counts)]
    return list(itertools.product(*ranges))


def _neighbours(kind: int, key, k: int, g: CellGeometry) -> list:
    a, b = key
    if kind == 1:
        return [(c, d) for c in _cell_neighbours(a, g.x_cells, k) for d in _dir_neighbours(b, g.n, k)]
    if kind == 2:
        return [(d, c) for d in _dir_neighbours(a, g.n, k) for c in _cell_neighbours(b, g.xi_cells, k)]
    return [(d, e) for d in _dir_neighbours(a, g.n, k) for e in _dir_neighbours(b, g.n, k)]


def _shell_masks(v: np.ndarray, R: float) -> tuple[np.ndarray, np.ndarray]:
    r = np.sqrt(np.sum(v * v, axis=-1))
    return (r >= R) & (r < 2 * R), (r >= 2 * R) & (r < 4 * R)


def _energies(values: np.ndarray, weight: np.ndarray, inner: np.ndarray, outer: np.ndarray, dirmask: np.ndarray,
              measure: float):
    """Weighted and plain energies of a batch (..., *grid) over the inner and outer shell of one direction."""
    axes = tuple(range(values.ndim - inner.ndim, values.ndim))
    p = np.abs(values) ** 2 * measure
    mi = inner & dirmask
    mo = outer & dirmask
    return (np.sum(p * weight * mi, axis=axes), np.sum(p * weight * mo, axis=axes),
            np.sum(p * mi, axis=axes), np.sum(p * mo, axis=axes))


def _annulus(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    r = np.sqrt(np.sum(x * x, axis=-1))
    return 0.5 * (erf((r - lo) / (lo / 4)) - erf((r - hi) / (lo / 4)))


def estimate_wavefront(f: GridFunction, kind: int, orders: tuple[float, float] = (0.0, 0.0),
                       cells: int | None = None, geometry: CellGeometry | None = None, decay_ratio: float = DECAY_RATIO,
                       median_factor: float = MEDIAN_FACTOR, floor: float = ABS_FLOOR,
                       peak_fraction: float = PEAK_FRACTION) -> WaveFrontEstimate:
    """Cell-resolution estimate of WF^k_{H^{r,rho}}(f) with (r, rho) = ``orders``."""
    _require(f, SPATIAL)
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    if f.values.shape != f.grid.shape:
        raise ValueError("estimate_wavefront expects a scalar grid function")
    grid = f.grid
    n = grid.n
    geo = geometry or CellGeometry.for_grid(grid, cells)
    if geo.L != tuple(grid.L) or geo.n != n:
        raise ValueError("cell geometry does not match the grid")
    r, rho = orders
    X = grid.points()
    XI = grid.frequencies()
    dx_meas = grid.cell_volume
    dxi_meas = grid.dual_cell_volume / (2 * math.pi) ** n
    keys: list = []
    rows: list = []
    if kind == 1:
        xin, xout = _shell_masks(XI, geo.R_xi)
        wxi = jb(XI) ** (2 * rho)
        xcells = geo.all_x_cells()
        half = np.array(geo.x_width) / 2
        for cell in xcells:
            c = geo.x_center(cell)
            A = np.ones(grid.shape)
            for d in range(n):
                A = A * plateau(X[..., d] - c[d], half[d], WINDOW_SOFTNESS * half[d])
            h = fourier_forward(f.with_values(f.values * A)).values
            wx = float(jb(c)) ** (2 * r)
            for dirn in range(direction_count(n)):
                keys.append((cell, dirn))
                rows.append(_energies(h, wxi * wx, xin, xout, _sector_mask(XI, dirn), dxi_meas))
    elif kind == 2:
        xin, xout = _shell_masks(X, geo.R_x)
        wx = jb(X) ** (2 * r)
        F = fourier_forward(f).values
        half = np.array(geo.xi_width) / 2
        for cell in geo.all_xi_cells():
            c = geo.xi_center(cell)
            B = np.ones(grid.shape)
            for d in range(n):
                B = B * plateau(XI[..., d] - c[d], half[d], WINDOW_SOFTNESS * half[d])
            h = fourier_inverse(fourier_forward(f).with_values(F * B)).values
            wxi = float(jb(c)) ** (2 * rho)
            for dirn in range(direction_count(n)):
                keys.append((dirn, cell))
                rows.append(_energies(h, wx * wxi, xin, xout, _sector_mask(X, dirn), dx_meas))
    else:
        xin, xout = _shell_masks(XI, geo.R_xi)
        wxi = jb(XI) ** (2 * rho)
        Rx = geo.R_x
        A_in = _annulus(X, Rx, 2 * Rx)
        A_out = _annulus(X, 2 * Rx, 4 * Rx)
        w_in = (1 + (1.5 * Rx) ** 2) ** r
        w_out = (1 + (3 * Rx) ** 2) ** r
        for dx in range(direction_count(n)):
            S = _sector_weight(X, dx)
            h_in = fourier_forward(f.with_values(f.values * A_in * S)).values
            h_out = fourier_forward(f.with_values(f.values * A_out * S)).values
            for dxi in range(direction_count(n)):
                m = _sector_mask(XI, dxi)
                ei = _energies(h_in, wxi * w_in, xin, xout, m, dxi_meas)
                eo = _energies(h_out, wxi * w_out, xin, xout, m, dxi_meas)
                keys.append((dx, dxi))
                rows.append((ei[0], eo[1], ei[2], eo[3]))
    arr = np.array([[float(v) for v in row] for row in rows])
    Ew_in, Ew_out, E_in, E_out = arr.T
    signal = np.sqrt(E_in + E_out)
    total = float(l2_norm(f))
    thresh = max(floor * total, peak_fraction * float(np.max(signal)))
    if kind != 3:
        # types 1 and 2 have many cells; most of them only see background leakage
        thresh = max(thresh, median_factor * float(np.median(signal)))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(Ew_in > 0, Ew_out / Ew_in, np.where(Ew_out > 0, np.inf, 0.0))
    flagged = (signal > thresh) & (ratio >= decay_ratio)
    scores = {k: float(math.sqrt(a + b)) for k, a, b in zip(keys, Ew_in, Ew_out)}
    ratios = {k: float(q) for k, q in zip(keys, ratio)}
    cells_set = frozenset(k for k, flag in zip(keys, flagged) if flag)
    return WaveFrontEstimate(kind, (float(r), float(rho)), geo, cells_set, scores, ratios)


def cutoff_for(est_kind: int, key, geo: CellGeometry) -> CutoffPair:
    """The cutoff pair used for a cone cell."""
    n = geo.n
    a, b = key
    if est_kind == 1:
        return CutoffPair(1, geo.x_center(a), direction_vectors(n, b)[0], geo.x_width[0] / 2, geo.R_xi,
                          (geo.x_width[0] / 2, geo.R_xi))
    if est_kind == 2:
        return CutoffPair(2, direction_vectors(n, a)[0], geo.xi_center(b), geo.R_x, geo.xi_width[0] / 2,
                          (geo.R_x, geo.xi_width[0] / 2))
    return CutoffPair(3, direction_vectors(n, a)[0], direction_vectors(n, b)[0], geo.R_x, geo.R_xi,
                      (geo.R_x, geo.R_xi))


# ---------------------------------------------------------------------------
# canonical transformations and propagation


NEWTON_TOL = 1e-10
NEWTON_MAXITER = 50


def canonical_transform(phase: PhaseFunction, y, eta, tol: float = NEWTON_TOL,
                        maxiter: int = NEWTON_MAXITER) -> tuple[np.ndarray, np.ndarray]:
    """(x, xi) with y = phi'_xi(x, eta) and xi = phi'_x(x, eta), by Newton from x = y."""
    n = phase.n
    y = np.asarray(y, dtype=float).reshape(-1, n)
    eta = np.broadcast_to(np.asarray(eta, dtype=float).reshape(-1, n), y.shape)
    x = y.copy()
    for _ in range(maxiter):
        vals = phase.evaluate(x, eta, hessian=True, value=False)
        res = vals.dxi - y
        scale = jb(y)
        if np.all(np.sqrt(np.sum(res * res, axis=-1)) <= tol * scale):
            return x, np.array(vals.dx)
        J = np.swapaxes(vals.hxxi, -1, -2)
        try:
            step = np.linalg.solve(J, res[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise IrregularPhaseError("singular mixed Hessian in canonical_transform") from exc
        x = x - step
        if not np.all(np.isfinite(x)):
            break
    raise IrregularPhaseError("Newton iteration for the canonical transformation did not converge")


def _hamiltonians(source) -> list[Symbol]:
    from .propagator import MthOrderProblem, PropagatorPlan

    if isinstance(source, MthOrderProblem):
        return list(source.roots.members)
    if isinstance(source, PropagatorPlan):
        return [g.a for g in source.groups]
    return list(source)


def _sample_points(est: WaveFrontEstimate, key) -> tuple[np.ndarray, np.ndarray]:
    g = est.geometry
    n = g.n
    a, b = key
    radii_xi = [g.R_xi, 2 * g.R_xi, 4 * g.R_xi * 0.999]
    radii_x = [g.R_x, 2 * g.R_x, 4 * g.R_x * 0.999]
    if est.kind == 1:
        c = g.x_center(a)
        offs = [np.array(o) * np.array(g.x_width) * 0.49 for o in itertools.product((-1, 0, 1), repeat=n)]
        xs = [c + o for o in offs]
        xis = [v * rr for v in direction_vectors(n, b, spread=True) for rr in radii_xi]
    elif est.kind == 2:
        c = g.xi_center(b)
        offs = [np.array(o) * np.array(g.xi_width) * 0.49 for o in itertools.product((-1, 0, 1), repeat=n)]
        xis = [c + o for o in offs]
        xs = [v * rr for v in direction_vectors(n, a, spread=True) for rr in radii_x]
    else:
        xs = [v * rr for v in direction_vectors(n, a, spread=True) for rr in radii_x]
        xis = [v * rr for v in direction_vectors(n, b, spread=True) for rr in radii_xi]
    P = np.array([(x, xi) for x in xs for xi in xis])
    return P[:, 0, :], P[:, 1, :]


def _chains(t: float, s: float, length: int, samples: int) -> list[list[float]]:
    """Time vectors t = t_0 >= t_1 >= ... >= t_length = s on a uniform sample set."""
    if length == 1:
        return [[t, s]]
    grid = np.linspace(t, s, samples)
    out = []
    for mid in itertools.combinations_with_replacement(range(samples), length - 1):
        out.append([t] + [float(grid[i]) for i in mid] + [s])
    return out


def _push(hams: Sequence[Symbol], alpha: tuple[int, ...], chain: list[float], y: np.ndarray, eta: np.ndarray):
    x, xi = y, eta
    for pos in range(len(alpha) - 1, -1, -1):
        t_hi, t_lo = chain[pos], chain[pos + 1]
        if t_hi == t_lo:
            continue
        phase = EikonalPhase(hams[alpha[pos] - 1], t_hi, t_lo)
        x, xi = canonical_transform(phase, x, xi)
    return x, xi


@dataclass(frozen=True)
class PropagationReport:
    predicted: WaveFrontEstimate
    measured: WaveFrontEstimate | None
    contained: bool | None
    outside: frozenset


def propagate_wavefront(data: WaveFrontEstimate | Sequence[WaveFrontEstimate], source, t: float, s: float = 0.0,
                        solution: GridFunction | None = None, samples: int = 9, arcs: str = "all",
                        dilation: int = 1) -> PropagationReport:
    """Predict WF^k(u(t)) from data estimates by pushing flagged cells along the phase arcs.

    ``source`` is an MthOrderProblem (roots tau_j as Hamiltonians), a PropagatorPlan or a list
    of Hamiltonians. ``arcs="all"`` composes the transformations of every increasing index
    tuple with sampled intermediate times; ``"single"`` keeps only one-factor arcs.
    With ``solution`` the measured estimate is compared against the prediction dilated by
    ``dilation`` cells.
    """
    ests = [data] if isinstance(data, WaveFrontEstimate) else list(data)
    if not ests:
        raise ValueError("no data estimates")
    kind, geo, orders = ests[0].kind, ests[0].geometry, ests[0].orders
    if any(e.kind != kind or e.geometry != geo for e in ests):
        raise ValueError("data estimates must share kind and cell geometry")
    if arcs not in ("all", "single"):
        raise ValueError(f"unknown arcs mode {arcs!r}")
    hams = _hamiltonians(source)
    m = len(hams)
    flagged = set().union(*(e.cells for e in ests))
    template = WaveFrontEstimate(kind, orders, geo, frozenset())
    predicted: set = set()
    if t == s:
        predicted = set(flagged)
    else:
        lengths = range(1, m + 1) if arcs == "all" else [1]
        subsets = [a for k in lengths for a in itertools.combinations(range(1, m + 1), k)]
        for key in sorted(flagged, key=repr):
            y, eta = _sample_points(template, key)
            for alpha in subsets:
                prev = None
                for chain in _chains(t, s, len(alpha), samples):
                    x, xi = _push(hams, alpha, chain, y, eta)
                    for xp, xip in zip(x, xi):
                        c = template.cell_of(xp, xip)
                        if c is not None:
                            predicted.add(c)
                    if prev is not None:
                        # fill the cells swept between consecutive sampled arcs
                        for lam in np.linspace(0.0, 1.0, 9)[1:-1]:
                            for xp, xip in zip((1 - lam) * prev[0] + lam * x, (1 - lam) * prev[1] + lam * xi):
                                c = template.cell_of(xp, xip)
                                if c is not None:
                                    predicted.add(c)
                    prev = (x, xi)
    pred = WaveFrontEstimate(kind, orders, geo, frozenset(predicted))
    if solution is None:
        return PropagationReport(pred, None, None, frozenset())
    measured = estimate_wavefront(solution, kind, orders, geometry=geo)
    allowed = pred.dilate(dilation)
    outside = frozenset(c for c in measured.cells if c not in allowed)
    return PropagationReport(pred, measured, not outside, outside)


def write_flagged_csv(path: str | Path, estimates: Iterable[WaveFrontEstimate]) -> None:
    """One CSV with the rows of several estimates (k, x-cell, xi-cell, score)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "x_cell", "xi_cell", "score"])
        for est in estimates:
            for key in est.sorted_cells():
                w.writerow([est.kind, _fmt(key[0]), _fmt(key[1]), f"{est.scores.get(key, float('nan')):.6e}"])
