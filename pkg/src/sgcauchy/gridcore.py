"""Uniform grids, the discrete Fourier transform contract, quadrature and Sobolev-Kato norms.

Conventions used throughout the package::

    <v>         = (1 + |v|^2)^(1/2)
    u_hat(xi)   = int exp(-i x.xi) u(x) dx
    Op(a) u(x)  = (2 pi)^(-n) int exp(i x.xi) a(x, xi) u_hat(xi) dxi

On a grid with x_j = -L + j h, h = 2L/N and xi_k = pi k / L (k = -N/2 .. N/2-1) the
trapezoidal discretisations of the two integrals are exact inverses of each other.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DomainTagError

log = logging.getLogger(__name__)

SPATIAL = "spatial"
FREQUENCY = "frequency"

SGPR_MAGIC = b"SGPR"
SGPR_VERSION = 1


def jb(v: np.ndarray) -> np.ndarray:
    """Japanese bracket of points stored with the vector index on the last axis."""
    v = np.asarray(v, dtype=float)
    return np.sqrt(1.0 + np.sum(v * v, axis=-1))


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid on the box [-L, L)^n together with its dual frequency grid."""

    L: tuple[float, ...]
    N: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.L) != len(self.N):
            raise ValueError("L and N must have one entry per axis")
        if self.n not in (1, 2):
            raise ValueError("only dimensions 1 and 2 are supported")
        for count, extent in zip(self.N, self.L):
            if count < 2 or count & (count - 1):
                raise ValueError(f"point count {count} is not a power of two")
            if extent <= 0:
                raise ValueError("extent must be positive")

    @classmethod
    def uniform(cls, L: float, N: int, n: int = 1) -> "Grid":
        return cls(tuple([float(L)] * n), tuple([int(N)] * n))

    @property
    def n(self) -> int:
        return len(self.N)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.N)

    @property
    def size(self) -> int:
        return int(np.prod(self.N))

    @property
    def h(self) -> tuple[float, ...]:
        return tuple(2.0 * L / N for L, N in zip(self.L, self.N))

    @property
    def dxi(self) -> tuple[float, ...]:
        return tuple(math.pi / L for L in self.L)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    @property
    def dual_cell_volume(self) -> float:
        return float(np.prod(self.dxi))

    def axis(self, d: int = 0) -> np.ndarray:
        return -self.L[d] + self.h[d] * np.arange(self.N[d])

    def freq_axis(self, d: int = 0) -> np.ndarray:
        k = np.arange(-self.N[d] // 2, self.N[d] // 2)
        return k * (math.pi / self.L[d])

    def points(self) -> np.ndarray:
        """Spatial nodes, shape N^n + (n,)."""
        mesh = np.meshgrid(*[self.axis(d) for d in range(self.n)], indexing="ij")
        return np.stack(mesh, axis=-1)

    def frequencies(self) -> np.ndarray:
        """Dual nodes, shape N^n + (n,)."""
        mesh = np.meshgrid(*[self.freq_axis(d) for d in range(self.n)], indexing="ij")
        return np.stack(mesh, axis=-1)

    def _sign(self) -> np.ndarray:
        # (-1)^k per axis, aligning the DFT origin with x = -L
        parts = []
        for d in range(self.n):
            k = np.arange(-self.N[d] // 2, self.N[d] // 2)
            parts.append(np.where(k % 2 == 0, 1.0, -1.0))
        out = parts[0]
        for p in parts[1:]:
            out = np.multiply.outer(out, p)
        return out

    def spatial(self, values) -> "GridFunction":
        return GridFunction(self, np.asarray(values, dtype=complex), SPATIAL)

    def sample(self, func) -> "GridFunction":
        """Sample ``func(x)`` where x has shape N^n + (n,); for n = 1 the last axis is dropped."""
        x = self.points()
        vals = func(x[..., 0]) if self.n == 1 else func(x)
        return self.spatial(np.broadcast_to(np.asarray(vals, dtype=complex), self.shape).copy())


@dataclass(frozen=True)
class GridFunction:
    """Complex samples on a grid. Leading axes beyond the grid shape are batch axes."""

    grid: Grid
    values: np.ndarray
    domain: str = SPATIAL

    def __post_init__(self) -> None:
        if self.domain not in (SPATIAL, FREQUENCY):
            raise ValueError(f"unknown domain tag {self.domain!r}")
        if tuple(self.values.shape[-self.grid.n:]) != self.grid.shape:
            raise ValueError(
                f"sample array shape {self.values.shape} does not end with grid shape {self.grid.shape}"
            )

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return tuple(self.values.shape[: self.values.ndim - self.grid.n])

    def with_values(self, values: np.ndarray) -> "GridFunction":
        return GridFunction(self.grid, np.asarray(values, dtype=complex), self.domain)

    def __add__(self, other: "GridFunction") -> "GridFunction":
        _same_domain(self, other)
        return self.with_values(self.values + other.values)

    def __sub__(self, other: "GridFunction") -> "GridFunction":
        _same_domain(self, other)
        return self.with_values(self.values - other.values)

    def __mul__(self, c) -> "GridFunction":
        return self.with_values(self.values * c)

    __rmul__ = __mul__

    def __neg__(self) -> "GridFunction":
        return self.with_values(-self.values)


def _same_domain(f: GridFunction, g: GridFunction) -> None:
    if f.domain != g.domain:
        raise DomainTagError(f"cannot combine {f.domain} and {g.domain} functions")


def _require(f: GridFunction, domain: str) -> None:
    if f.domain != domain:
        raise DomainTagError(f"expected a {domain} grid function, got {f.domain}")


def _grid_axes(grid: Grid) -> tuple[int, ...]:
    return tuple(range(-grid.n, 0))


def fourier_forward(f: GridFunction) -> GridFunction:
    """Trapezoidal approximation of u_hat(xi_k) = int exp(-i x xi_k) u(x) dx."""
    _require(f, SPATIAL)
    g = f.grid
    axes = _grid_axes(g)
    raw = np.fft.fftshift(np.fft.fftn(f.values, axes=axes), axes=axes)
    return GridFunction(g, raw * (g._sign() * g.cell_volume), FREQUENCY)


def fourier_inverse(F: GridFunction) -> GridFunction:
    """Inverse of :func:`fourier_forward`: (2 pi)^(-n) sum_k exp(i x xi_k) u_hat_k dxi."""
    _require(F, FREQUENCY)
    g = F.grid
    axes = _grid_axes(g)
    shifted = np.fft.ifftshift(F.values * g._sign(), axes=axes)
    vals = np.fft.ifftn(shifted, axes=axes) / g.cell_volume
    return GridFunction(g, vals, SPATIAL)


def apply_multiplier(f: GridFunction, m: np.ndarray) -> GridFunction:
    """Fourier multiplier m(xi) (sampled on the dual grid, centred ordering)."""
    return fourier_inverse(_scale(fourier_forward(f), m))


def _scale(F: GridFunction, m: np.ndarray) -> GridFunction:
    return F.with_values(F.values * m)


def l2_norm(f: GridFunction) -> np.ndarray:
    """Discrete L2 norm over the grid axes (one value per batch entry)."""
    if f.domain == SPATIAL:
        w = f.grid.cell_volume
    else:
        w = f.grid.dual_cell_volume / (2 * math.pi) ** f.grid.n
    return np.sqrt(w * np.sum(np.abs(f.values) ** 2, axis=_grid_axes(f.grid)))


def inner(f: GridFunction, g: GridFunction) -> complex:
    """L2 inner product <f, g> = int f conj(g) dx of two spatial functions."""
    _require(f, SPATIAL)
    _require(g, SPATIAL)
    return complex(f.grid.cell_volume * np.sum(f.values * np.conj(g.values)))


def sk_norm(f: GridFunction, r: float, rho: float) -> np.ndarray | float:
    """Sobolev-Kato norm || <x>^r <D>^rho f ||_{L2} computed spectrally."""
    _require(f, SPATIAL)
    g = f.grid
    v = f
    if rho != 0:
        v = fourier_inverse(_scale(fourier_forward(f), jb(g.frequencies()) ** rho))
    if r != 0:
        v = v.with_values(v.values * jb(g.points()) ** r)
    out = l2_norm(v)
    return float(out) if np.ndim(out) == 0 else out


def boundary_mass_fraction(f: GridFunction, shell: float = 0.1) -> float:
    """Fraction of the L2 mass located in the outer shell of relative width ``shell``."""
    _require(f, SPATIAL)
    g = f.grid
    x = g.points()
    outer = np.zeros(g.shape, dtype=bool)
    for d in range(g.n):
        outer |= np.abs(x[..., d]) > (1.0 - shell) * g.L[d]
    total = np.sum(np.abs(f.values) ** 2)
    if total == 0:
        return 0.0
    return float(np.sum(np.abs(f.values) ** 2 * outer) / total)


def check_boundary_mass(f: GridFunction, limit: float = 1e-8, label: str = "field") -> float:
    frac = boundary_mass_fraction(f)
    if frac > limit:
        log.warning("%s: %.3e of the L2 mass lies in the outer 10%% shell", label, frac)
    return frac


# ---------------------------------------------------------------------------
# quadrature


def simpson_weights(n_intervals: int, h: float) -> np.ndarray:
    """Weights for integrating over n_intervals + 1 equispaced nodes.

    Composite Simpson for an even interval count; for an odd count >= 3 the last three
    intervals use the 3/8 rule; a single interval falls back to the trapezoid.
    """
    if n_intervals < 0:
        raise ValueError("negative interval count")
    w = np.zeros(n_intervals + 1)
    if n_intervals == 0:
        return w
    if n_intervals == 1:
        w[:] = h / 2
        return w
    k = n_intervals if n_intervals % 2 == 0 else n_intervals - 3
    if k > 0:
        w[0:k + 1:2] += 2 * h / 3
        w[1:k:2] += 4 * h / 3
        w[0] -= h / 3
        w[k] -= h / 3
    if k != n_intervals:
        w[k:k + 4] += np.array([3, 9, 9, 3]) * h / 8
    return w


def time_nodes(s: float, t: float, panel: float = 0.01, min_panels: int = 1) -> np.ndarray:
    """Equispaced Simpson nodes on [s, t] with ceil(|t-s|/panel) panels (two intervals each)."""
    if t == s:
        return np.array([s])
    panels = max(min_panels, int(math.ceil(abs(t - s) / panel - 1e-12)))
    return np.linspace(s, t, 2 * panels + 1)


def gauss_legendre(order: int, a, b):
    """Gauss-Legendre nodes and weights mapped to [a, b] (a, b may be arrays)."""
    x, w = np.polynomial.legendre.leggauss(order)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    half = 0.5 * (b - a)
    mid = 0.5 * (b + a)
    nodes = mid[..., None] + half[..., None] * x
    weights = half[..., None] * w
    return nodes, weights


# ---------------------------------------------------------------------------
# export


def write_sgpr(path: str | Path, f: GridFunction) -> None:
    """Little-endian dump: magic, u32 version, u32 n, per axis (u64 N, f64 L), complex samples."""
    _require(f, SPATIAL)
    g = f.grid
    if f.batch_shape:
        raise ValueError("only unbatched grid functions can be written")
    with open(path, "wb") as fh:
        fh.write(SGPR_MAGIC)
        fh.write(struct.pack("<II", SGPR_VERSION, g.n))
        for N, L in zip(g.N, g.L):
            fh.write(struct.pack("<Qd", N, L))
        data = np.ascontiguousarray(f.values, dtype="<c16")
        fh.write(data.tobytes(order="C"))


def read_sgpr(path: str | Path) -> GridFunction:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != SGPR_MAGIC:
        raise ValueError("not an SGPR file")
    version, n = struct.unpack_from("<II", blob, 4)
    if version != SGPR_VERSION:
        raise ValueError(f"unsupported SGPR version {version}")
    off = 12
    Ns, Ls = [], []
    for _ in range(n):
        N, L = struct.unpack_from("<Qd", blob, off)
        off += 16
        Ns.append(int(N))
        Ls.append(float(L))
    grid = Grid(tuple(Ls), tuple(Ns))
    vals = np.frombuffer(blob, dtype="<c16", offset=off, count=grid.size).reshape(grid.shape)
    return grid.spatial(vals.astype(complex))


def write_csv_slice(path: str | Path, f: GridFunction, axis: int = 0, index: Sequence[int] | None = None) -> None:
    """CSV of a 1-D slice along ``axis``; other axes are fixed at ``index`` (default: centre)."""
    _require(f, SPATIAL)
    g = f.grid
    idx = list(index) if index is not None else [N // 2 for N in g.N]
    sl = tuple(slice(None) if d == axis else idx[d] for d in range(g.n))
    vals = f.values[sl]
    x = g.axis(axis)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("x,re,im,abs\n")
        for xv, v in zip(x, vals):
            fh.write(f"{xv:.17g},{v.real:.17g},{v.imag:.17g},{abs(v):.17g}\n")
