"""Fourier integral operators of type I and II on uniform grids.

Type I:  (Op_phi(a) u)(x) = (2 pi)^(-n) sum_xi exp(i phi(x, xi)) a(x, xi) u_hat(xi) dxi
Type II: the conjugate transpose of the type I quadrature,
         (Op*_phi(a) v)(x) = (2 pi)^(-n) sum_xi exp(i x.xi) w(xi) dxi with
         w(xi) = h^n sum_y exp(-i phi(y, xi)) conj(a(y, xi)) v(y).

The dense O(N^2n) sum is the reference; ``fast=True`` enables the multiplier path for phases
x.xi + J(xi) with amplitudes that split into x- and xi-factors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import IrregularPhaseError
from .gridcore import (
    FREQUENCY,
    SPATIAL,
    GridFunction,
    _require,
    fourier_forward,
    fourier_inverse,
    inner,
    l2_norm,
    sk_norm,
)
from .phasecalc import PhaseFunction
from .symbols import Symbol, constant

TYPE_I = "typeI"
TYPE_II = "typeII"
CHUNK = 1 << 20


@dataclass(frozen=True)
class FioOperator:
    """Phase, amplitude (evaluated at ``time``) and kind."""

    phase: PhaseFunction
    amplitude: Symbol | None = None
    kind: str = TYPE_I
    time: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in (TYPE_I, TYPE_II):
            raise ValueError(f"unknown operator kind {self.kind!r}")
        if self.amplitude is None:
            object.__setattr__(self, "amplitude", constant(1.0, self.phase.n))

    @property
    def order(self) -> tuple[float, float]:
        return self.amplitude.order

    def adjoint(self) -> "FioOperator":
        kind = TYPE_II if self.kind == TYPE_I else TYPE_I
        return FioOperator(self.phase, self.amplitude, kind, self.time)


def _kernel_rows(op: FioOperator, x: np.ndarray, xi: np.ndarray, check: bool) -> np.ndarray:
    """exp(i phi) a on the block x (P, n) by all frequencies xi (Q, n); returns (P, Q)."""
    X = x[:, None, :]
    XI = xi[None, :, :]
    vals = op.phase.evaluate(X, XI, hessian=check)
    if check:
        det = np.linalg.det(vals.hxxi)
        if np.any(np.abs(det) <= 0) or not np.all(np.isfinite(det)):
            raise IrregularPhaseError("phase has a degenerate mixed Hessian at a quadrature node")
    amp = op.amplitude(op.time, X, XI)
    return np.exp(1j * vals.phi) * amp


def _blocks(P: int, Q: int) -> Iterable[slice]:
    step = max(1, CHUNK // max(Q, 1))
    for start in range(0, P, step):
        yield slice(start, min(P, start + step))


def _dense_type1(op: FioOperator, u: GridFunction, check: bool) -> GridFunction:
    g = u.grid
    n = g.n
    U = fourier_forward(u).values
    batch = U.shape[: U.ndim - n]
    Uf = U.reshape(batch + (g.size,))
    x = g.points().reshape(-1, n)
    xi = g.frequencies().reshape(-1, n)
    out = np.empty(batch + (g.size,), dtype=complex)
    scale = g.dual_cell_volume / (2 * math.pi) ** n
    for sl in _blocks(x.shape[0], xi.shape[0]):
        Kr = _kernel_rows(op, x[sl], xi, check)
        out[..., sl] = scale * (Uf @ Kr.T)
    return GridFunction(g, out.reshape(batch + g.shape), SPATIAL)


def _dense_type2(op: FioOperator, v: GridFunction, check: bool) -> GridFunction:
    g = v.grid
    n = g.n
    V = v.values
    batch = V.shape[: V.ndim - n]
    Vf = V.reshape(batch + (g.size,))
    x = g.points().reshape(-1, n)
    xi = g.frequencies().reshape(-1, n)
    W = np.zeros(batch + (g.size,), dtype=complex)
    for sl in _blocks(x.shape[0], xi.shape[0]):
        Kr = _kernel_rows(op, x[sl], xi, check)
        W += g.cell_volume * (Vf[..., sl] @ np.conj(Kr))
    return fourier_inverse(GridFunction(g, W.reshape(batch + g.shape), FREQUENCY))


def _separable(a: Symbol):
    terms = a.separable_terms()
    if terms is None:
        return None
    return terms


def _fast(op: FioOperator, u: GridFunction) -> GridFunction | None:
    J = op.phase.multiplier()
    terms = _separable(op.amplitude)
    if J is None or terms is None:
        return None
    g = u.grid
    x = g.points()
    xi = g.frequencies()
    e = np.exp(1j * J(xi))
    out = None
    for f, h in terms:
        fx = 1.0 if f is None else f(op.time, x, np.zeros_like(x))
        hx = 1.0 if h is None else h(op.time, np.zeros_like(xi), xi)
        if op.kind == TYPE_I:
            part = fourier_inverse(fourier_forward(u).with_values(fourier_forward(u).values * e * hx))
            part = part.with_values(part.values * fx)
        else:
            w = u.with_values(u.values * np.conj(fx))
            W = fourier_forward(w)
            part = fourier_inverse(W.with_values(W.values * np.conj(e * hx)))
        out = part if out is None else out + part
    return out


def apply_fio(op: FioOperator, u: GridFunction, fast: bool = False, check: bool = False) -> GridFunction:
    """Apply a type I or type II operator to a spatial grid function (batch axes allowed).

    ``check`` evaluates the mixed Hessian at every node and raises on degeneracy.
    """
    _require(u, SPATIAL)
    if op.phase.n != u.grid.n:
        raise ValueError("phase and grid dimensions differ")
    if fast:
        out = _fast(op, u)
        if out is not None:
            return out
    if op.kind == TYPE_I:
        return _dense_type1(op, u, check)
    return _dense_type2(op, u, check)


def adjoint_defect(op: FioOperator, u: GridFunction, v: GridFunction, fast: bool = False) -> float:
    """|<Op u, v> - <u, Op* v>| / (||u|| ||v||)."""
    _require(u, SPATIAL)
    _require(v, SPATIAL)
    lhs = inner(apply_fio(op, u, fast), v)
    rhs = inner(u, apply_fio(op.adjoint(), v, fast))
    denom = float(l2_norm(u)) * float(l2_norm(v))
    return abs(lhs - rhs) / denom if denom else 0.0


@dataclass(frozen=True)
class NormProbeReport:
    ratio: float
    ratios: tuple[float, ...]
    r: float
    rho: float
    m: float
    mu: float


def mapping_norm_probe(op: FioOperator, r: float, rho: float, probes: Sequence[GridFunction],
                       fast: bool = False) -> NormProbeReport:
    """max over probes of ||Op u||_{r-m, rho-mu} / ||u||_{r, rho} with (m, mu) the amplitude order."""
    m, mu = op.order
    ratios = []
    for u in probes:
        den = sk_norm(u, r, rho)
        ratios.append(float(sk_norm(apply_fio(op, u, fast), r - m, rho - mu) / den))
    return NormProbeReport(max(ratios), tuple(ratios), r, rho, m, mu)
