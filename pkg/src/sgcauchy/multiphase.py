"""Multi-products of phase functions and the exchange (commutation) machinery.

Time vectors are ordered t_0 >= t_1 >= ... >= t_{M+1}; factor k (1-based) of a product is
evaluated on the pair (t_{k-1}, t_k). Indices j in this module are 1-based like the factors.

The multi-product is the critical value of

    sum_k [phi_k(t_{k-1}, t_k; Y_{k-1}, N_k) - Y_k.N_k] + phi_{M+1}(t_M, t_{M+1}; Y_M, xi)

with Y_0 = x and N_{M+1} = xi, where (Y, N) solves Y_k = d_xi phi_k(Y_{k-1}, N_k) and
N_k = d_x phi_{k+1}(Y_k, N_{k+1}).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import cumulative_simpson

from .errors import ContractionError, NotInvolutiveError, PicardError
from .gridcore import gauss_legendre, jb, simpson_weights
from .phasecalc import DT_MAX, EikonalPhase, PhaseFunction, PhaseValues, _integrate, build_eikonal_phase
from .symbols import (
    FIT_EPS,
    FuncSymbol,
    InvolutivenessReport,
    Lattice,
    Symbol,
    SymbolFamily,
    as_points,
    check_involutive,
    default_lattice,
    poisson_bracket,
    zero,
)

DAMPING = 0.5
FIXED_POINT_TOL = 1e-12
FIXED_POINT_MAXITER = 400
PICARD_TOL = 1e-11
PICARD_MAXITER = 200
EXCHANGE_NODES = 64


# ---------------------------------------------------------------------------
# critical points


@dataclass(frozen=True)
class CriticalPoints:
    """Solution (Y_1..Y_M, N_1..N_M) of the critical-point system on a flat set of query points.

    ``Y`` and ``N`` have shape (P, M, n); ``times`` is (M+2,) or per point (P, M+2).
    ``residual`` is the largest scaled residual of the system (|.|/<x> for Y rows,
    |.|/<xi> for N rows) at the returned solution.
    """

    times: np.ndarray
    x: np.ndarray
    xi: np.ndarray
    Y: np.ndarray
    N: np.ndarray
    iterations: int
    update: float
    residual: float

    @property
    def M(self) -> int:
        return self.Y.shape[-2]

    def position(self, k: int) -> np.ndarray:
        """Y_k with Y_0 = x."""
        return self.x if k == 0 else self.Y[:, k - 1]

    def momentum(self, k: int) -> np.ndarray:
        """N_k for k = 1..M+1 with N_{M+1} = xi."""
        return self.xi if k == self.M + 1 else self.N[:, k - 1]

    def consecutive_ratio(self) -> float:
        """max |Y_k - Y_{k-1}| / ((t_{k-1} - t_k) <x>) over k and points with t_{k-1} > t_k."""
        times = np.broadcast_to(self.times, (self.x.shape[0], self.M + 2))
        wx = jb(self.x)
        worst = 0.0
        for k in range(1, self.M + 1):
            gap = times[:, k - 1] - times[:, k]
            mask = gap > 1e-12
            if not mask.any():
                continue
            diff = np.linalg.norm(self.position(k) - self.position(k - 1), axis=-1)
            worst = max(worst, float(np.max(diff[mask] / (gap[mask] * wx[mask]))))
        return worst


def _times_array(times, P: int | None = None) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    if times.ndim == 0 or times.shape[-1] < 2:
        raise ValueError("a time vector needs at least two entries")
    if np.any(np.diff(times, axis=-1) > 1e-14):
        raise ValueError("time vectors must be non-increasing")
    if times.ndim > 1 and P is not None:
        times = np.broadcast_to(times, times.shape[:-1] + (times.shape[-1],)).reshape(P, times.shape[-1])
    return times


def _pair(times: np.ndarray, k: int, idx=None):
    """(t_{k-1}, t_k) as floats for a shared vector or per-point arrays (optionally subset)."""
    if times.ndim == 1:
        return float(times[k - 1]), float(times[k])
    sel = times if idx is None else times[idx]
    return sel[:, k - 1], sel[:, k]


def _eval(phase: PhaseFunction, left, right, times, k, idx=None, hessian=False, value=False) -> PhaseValues:
    t, s = _pair(times, k, idx)
    return phase.evaluate(left, right, hessian, t=t, s=s, value=value)


def _sweep(phases, times, x, xi, Y, N, idx, hessian=False, value=False):
    """One application of the critical-point map on the points ``idx``; also returns the factor values."""
    M = len(phases) - 1
    Ynew = np.empty_like(Y[idx])
    Nnew = np.empty_like(N[idx])
    vals = []
    for k in range(1, M + 2):
        left = x[idx] if k == 1 else Y[idx][:, k - 2]
        right = xi[idx] if k == M + 1 else N[idx][:, k - 1]
        v = _eval(phases[k - 1], left, right, times, k, idx if times.ndim > 1 else None, hessian, value)
        vals.append(v)
        if k <= M:
            Ynew[:, k - 1] = v.dxi
        if k >= 2:
            Nnew[:, k - 2] = v.dx
    return Ynew, Nnew, vals


def _scaled_update(dY, dN, wx, wxi) -> np.ndarray:
    a = np.max(np.linalg.norm(dY, axis=-1), axis=-1) / wx
    b = np.max(np.linalg.norm(dN, axis=-1), axis=-1) / wxi
    return np.maximum(a, b)


def _system_matrix(vals: list[PhaseValues], M: int, n: int):
    """Jacobian of w - map(w) in w = (Y_1..Y_M, N_1..N_M) and the sources for dx, dxi."""
    P = vals[0].dx.shape[0]
    D = 2 * M * n
    J = np.zeros((P, D, D))
    J[:] = np.eye(D)
    Bx = np.zeros((P, D, n))
    Bxi = np.zeros((P, D, n))

    def yb(k):
        return slice((k - 1) * n, k * n)

    def nb(k):
        return slice((M + k - 1) * n, (M + k) * n)

    for k in range(1, M + 2):
        v = vals[k - 1]
        hxix = np.swapaxes(v.hxxi, -1, -2)
        if k <= M:
            # Y_k = d_xi phi_k(Y_{k-1}, N_k)
            if k == 1:
                Bx[:, yb(1)] += hxix
            else:
                J[:, yb(k), yb(k - 1)] -= hxix
            J[:, yb(k), nb(k)] -= v.hxixi
        if k >= 2:
            # N_{k-1} = d_x phi_k(Y_{k-1}, N_k)
            J[:, nb(k - 1), yb(k - 1)] -= v.hxx
            if k == M + 1:
                Bxi[:, nb(M)] += v.hxxi
            else:
                J[:, nb(k - 1), nb(k)] -= v.hxxi
    return J, Bx, Bxi


def _phase_tau(phases, times, n: int) -> float:
    """Sum of the measured regularity tau of the factors at a shared time vector (for error reports)."""
    lat = default_lattice(n, per_axis=9 if n == 1 else 5)
    total = 0.0
    for k, ph in enumerate(phases, start=1):
        try:
            t, s = (float(times[k - 1]), float(times[k])) if times.ndim == 1 else (
                float(np.max(times[:, k - 1])), float(np.min(times[:, k])))
            total += ph.at(t, s).regularity(lat).tau
        except Exception:  # noqa: BLE001 - diagnostics only
            return float("nan")
    return total


def critical_points(phases: Sequence[PhaseFunction], times, x, xi, method: str = "damped",
                    damping: float = DAMPING, tol: float = FIXED_POINT_TOL,
                    maxiter: int = FIXED_POINT_MAXITER) -> CriticalPoints:
    """Solve the critical-point system for the factors ``phases`` on the time vector ``times``.

    ``damped`` is the Jacobi fixed-point iteration Y <- Y + damping (map(Y) - Y) seeded at
    Y_k = x, N_k = xi; ``newton`` uses the factor Hessians and converges in a few sweeps.
    Both stop per point once the scaled update drops below ``tol``.
    """
    M = len(phases) - 1
    if M < 1:
        raise ValueError("a multi-product needs at least two factors")
    n = phases[0].n
    x = as_points(x, n)
    xi = as_points(xi, n)
    times = np.asarray(times, dtype=float)
    shape = np.broadcast_shapes(x.shape[:-1], xi.shape[:-1], times.shape[:-1])
    P = int(np.prod(shape))
    x = np.broadcast_to(x, shape + (n,)).reshape(P, n)
    xi = np.broadcast_to(xi, shape + (n,)).reshape(P, n)
    if times.ndim > 1:
        times = np.broadcast_to(times, shape + (M + 2,)).reshape(P, M + 2)
    times = _times_array(times)
    if times.shape[-1] != M + 2:
        raise ValueError(f"{M + 1} factors need a time vector of length {M + 2}")
    wx, wxi = jb(x), jb(xi)
    Y = np.repeat(x[:, None, :], M, axis=1)
    N = np.repeat(xi[:, None, :], M, axis=1)
    active = np.arange(P)
    it = 0
    upd_max = 0.0
    while active.size and it < maxiter:
        it += 1
        if method == "damped":
            Yn, Nn, _ = _sweep(phases, times, x, xi, Y, N, active)
            dY = damping * (Yn - Y[active])
            dN = damping * (Nn - N[active])
        elif method == "newton":
            Yn, Nn, vals = _sweep(phases, times, x, xi, Y, N, active, hessian=True)
            J, _, _ = _system_matrix(vals, M, n)
            F = np.concatenate([(Y[active] - Yn).reshape(-1, M * n), (N[active] - Nn).reshape(-1, M * n)], axis=-1)
            step = -np.linalg.solve(J, F[..., None])[..., 0]
            dY = step[:, :M * n].reshape(-1, M, n)
            dN = step[:, M * n:].reshape(-1, M, n)
        else:
            raise ValueError(f"unknown method {method!r}")
        Y[active] += dY
        N[active] += dN
        upd = _scaled_update(dY, dN, wx[active], wxi[active])
        if not np.all(np.isfinite(upd)) or np.max(upd) > 1e8:
            tau = _phase_tau(phases, times, n)
            raise ContractionError(
                f"critical-point iteration diverged (measured sum of tau = {tau:.3g}; the product needs < 1/4)"
            )
        upd_max = float(np.max(upd))
        active = active[upd > tol]
    if active.size:
        tau = _phase_tau(phases, times, n)
        raise ContractionError(
            f"critical-point iteration did not converge in {maxiter} sweeps (update {upd_max:.3e}, "
            f"measured sum of tau = {tau:.3g}; the product needs < 1/4)"
        )
    Yn, Nn, _ = _sweep(phases, times, x, xi, Y, N, np.arange(P))
    res = float(np.max(_scaled_update(Yn - Y, Nn - N, wx, wxi))) if P else 0.0
    return CriticalPoints(times, x, xi, Y, N, it, upd_max, res)


# ---------------------------------------------------------------------------
# multi-product phase


def _product_values(phases, times, x, xi, hessian: bool, value: bool, method: str):
    n = phases[0].n
    x = as_points(x, n)
    xi = as_points(xi, n)
    times = np.asarray(times, dtype=float)
    shape = np.broadcast_shapes(x.shape[:-1], xi.shape[:-1], times.shape[:-1])
    M = len(phases) - 1
    cp = critical_points(phases, times, x, xi, method)
    P = cp.x.shape[0]
    _, _, vals = _sweep(phases, cp.times, cp.x, cp.xi, cp.Y, cp.N, np.arange(P), hessian=hessian, value=value)
    phi = None
    if value:
        phi = vals[-1].phi.copy()
        for k in range(1, M + 1):
            phi += vals[k - 1].phi - np.sum(cp.Y[:, k - 1] * cp.N[:, k - 1], axis=-1)
        phi = phi.reshape(shape)
    dx = vals[0].dx.reshape(shape + (n,))
    dxi = vals[-1].dxi.reshape(shape + (n,))
    if not hessian:
        return PhaseValues(phi, dx, dxi), cp
    J, Bx, Bxi = _system_matrix(vals, M, n)
    dw_dx = np.linalg.solve(J, Bx)
    dw_dxi = np.linalg.solve(J, Bxi)
    n1 = slice(M * n, (M + 1) * n)
    yM = slice((M - 1) * n, M * n)
    v1, vl = vals[0], vals[-1]
    hxx = v1.hxx + v1.hxxi @ dw_dx[:, n1]
    hxxi = v1.hxxi @ dw_dxi[:, n1]
    hxixi = vl.hxixi + np.swapaxes(vl.hxxi, -1, -2) @ dw_dxi[:, yM]
    mats = [m.reshape(shape + (n, n)) for m in (hxx, hxxi, hxixi)]
    return PhaseValues(phi, dx, dxi, *mats), cp


class MultiProductPhase(PhaseFunction):
    """phi_1 # phi_2 # ... # phi_{M+1} on a time vector t_0 >= ... >= t_{M+1}.

    The factors are used as phase families: factor k is evaluated on (t_{k-1}, t_k) whatever
    time pair it was built for. Hessians come from implicit differentiation of the
    critical-point system.
    """

    def __init__(self, phases: Sequence[PhaseFunction], times=None, method: str = "damped"):
        self.phases = list(phases)
        if len(self.phases) < 2:
            raise ValueError("a multi-product needs at least two factors")
        self.n = self.phases[0].n
        if times is None:
            times = [self.phases[0].t] + [ph.s for ph in self.phases]
            for a, b in zip(self.phases[:-1], self.phases[1:]):
                if abs(a.s - b.t) > 1e-14:
                    raise ValueError("consecutive factors must share their time endpoints")
        self.times = _times_array(times)
        if self.times.ndim != 1 or self.times.size != len(self.phases) + 1:
            raise ValueError(f"{len(self.phases)} factors need a time vector of length {len(self.phases) + 1}")
        self.t = float(self.times[0])
        self.s = float(self.times[-1])
        self.method = method

    @property
    def M(self) -> int:
        return len(self.phases) - 1

    def at(self, t: float, s: float) -> "MultiProductPhase":
        times = self.times.copy()
        times[0], times[-1] = t, s
        return MultiProductPhase(self.phases, times, self.method)

    def evaluate(self, x, xi, hessian: bool = False, t=None, s=None, value: bool = True) -> PhaseValues:
        times = self.times
        if t is not None or s is not None:
            t = self.t if t is None else np.asarray(t, dtype=float)
            s = self.s if s is None else np.asarray(s, dtype=float)
            shape = np.broadcast_shapes(np.shape(t), np.shape(s))
            times = np.broadcast_to(self.times, shape + times.shape).copy()
            times[..., 0] = t
            times[..., -1] = s
        return self.evaluate_at(times, x, xi, hessian, value)

    def evaluate_at(self, times, x, xi, hessian: bool = False, value: bool = True) -> PhaseValues:
        """Evaluate on another (possibly per-point) time vector of the same length."""
        vals, _ = _product_values(self.phases, times, x, xi, hessian, value, self.method)
        return vals

    def critical_points(self, x, xi) -> CriticalPoints:
        return critical_points(self.phases, self.times, x, xi, self.method)

    def multiplier(self):
        """Sum of the factor multipliers when every factor has one (then the product is exact)."""
        Js = []
        for k, ph in enumerate(self.phases, start=1):
            J = ph.at(float(self.times[k - 1]), float(self.times[k])).multiplier()
            if J is None:
                return None
            Js.append(J)
        return lambda xi: sum(J(xi) for J in Js)


def multiproduct_phase(phases: Sequence[PhaseFunction], query=None, times=None,
                       method: str = "damped") -> MultiProductPhase:
    """Multi-product of phases built at consecutive time pairs.

    When ``query`` (a pair (x, xi)) is given, the critical points are solved there once so a
    contraction failure surfaces immediately.
    """
    prod = MultiProductPhase(phases, times, method)
    if query is not None:
        prod.critical_points(*query)
    return prod


def swap_factors(phases: Sequence[PhaseFunction], j: int) -> list[PhaseFunction]:
    """Factors with positions j and j+1 (1-based) exchanged."""
    if not 1 <= j < len(phases):
        raise ValueError(f"cannot swap factors {j} and {j + 1} of {len(phases)}")
    out = list(phases)
    out[j - 1], out[j] = out[j], out[j - 1]
    return out


def replace_time(times, j: int, value) -> np.ndarray:
    """The time vector with t_j replaced by ``value`` (scalar or per point)."""
    times = np.asarray(times, dtype=float)
    value = np.asarray(value, dtype=float)
    shape = np.broadcast_shapes(times.shape[:-1], value.shape)
    out = np.broadcast_to(times, shape + times.shape[-1:]).copy()
    out[..., j] = value
    return out


# ---------------------------------------------------------------------------
# exchange ODE


Coefficient = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass
class ExchangeSolution:
    """(R, K) on the sigma grid t_j = sigma_0 < ... < sigma_S = t_{j-1} for each point.

    sigma stands for t_{j-1}; ``R`` has shape (P, S+1, n) and ``K`` shape (P, S+1). When the
    solution was inverted, ``y`` holds Rbar (R(t_{j-1}; Rbar) = x) and ``Z`` = K(t_{j-1}; Rbar).
    """

    times: np.ndarray
    j: int
    sigma: np.ndarray
    y: np.ndarray
    xi: np.ndarray
    R: np.ndarray
    K: np.ndarray
    iterations: int
    update: float
    x: np.ndarray | None = None
    Z: np.ndarray | None = None
    inversion_iterations: int = 0
    K_bounds_ok: bool = True

    @property
    def R_end(self) -> np.ndarray:
        return self.R[:, -1]

    @property
    def K_end(self) -> np.ndarray:
        return self.K[:, -1]


def _picard(H: Coefficient, G: Coefficient, times, j: int, y, xi, nodes: int, tol: float, maxiter: int):
    tj1, tj, tjn = float(times[j - 1]), float(times[j]), float(times[j + 1])
    P, n = y.shape
    if tj1 == tj:
        sigma = np.array([tj])
        return sigma, y[:, None, :].copy(), np.full((P, 1), tjn), 0, 0.0
    sigma = np.linspace(tj, tj1, nodes + 1)
    h = sigma[1] - sigma[0]
    S = sigma.size
    sig = np.broadcast_to(sigma, (P, S))
    xib = np.broadcast_to(xi[:, None, :], (P, S, n))
    y0 = np.broadcast_to(y[:, None, :], (P, S, n))
    R = y0.copy()
    K = np.broadcast_to(sigma - tj + tjn, (P, S)).copy()
    wy = jb(y)[:, None]
    for it in range(1, maxiter + 1):
        Hv = np.broadcast_to(H(sig, K, R, xib), (P, S, n))
        Gv = np.broadcast_to(G(sig, K, R, xib), (P, S))
        Rn = y0 - cumulative_simpson(Hv, dx=h, axis=1, initial=0.0)
        Kn = tjn + cumulative_simpson(Gv, dx=h, axis=1, initial=0.0)
        upd = max(float(np.max(np.linalg.norm(Rn - R, axis=-1) / wy)), float(np.max(np.abs(Kn - K))))
        R, K = Rn, Kn
        if not np.isfinite(upd):
            break
        if upd <= tol:
            return sigma, R, K, it, upd
    raise PicardError(
        f"Picard iteration for the exchange system did not contract in {maxiter} iterations "
        f"(last update {upd:.3e}); time horizon too large"
    )


def solve_exchange_ode(H: Coefficient, G: Coefficient, times, j: int, y, xi, nodes: int = EXCHANGE_NODES,
                       tol: float = PICARD_TOL, maxiter: int = PICARD_MAXITER,
                       invert: bool = False, n: int = 1) -> ExchangeSolution:
    """Picard solution of dR/dsigma = -H(sigma, K, R, xi), dK/dsigma = G(sigma, K, R, xi).

    sigma runs over [t_j, t_{j-1}] with R = y, K = t_{j+1} at sigma = t_j; integrals use
    cumulative Simpson sums on ``nodes`` intervals. The coefficient callables receive arrays
    of shape (P, S), (P, S), (P, S, n), (P, S, n) with K standing for t_j.

    With ``invert=True`` the points ``y`` are read as targets x: Rbar is found by the
    simplified Newton iteration y <- y - (R(t_{j-1}; y) - x) (dR/dy is I up to
    O(t_{j-1} - t_{j+1})) and Z = K(t_{j-1}; Rbar) is stored on the solution.
    """
    times = _times_array(times)
    if times.ndim != 1:
        raise ValueError("the exchange ODE takes one shared time vector")
    M = times.size - 2
    if not 1 <= j <= M:
        raise ValueError(f"exchange index j = {j} outside 1..{M}")
    y = as_points(y, n)
    xi = as_points(xi, n)
    shape = np.broadcast_shapes(y.shape[:-1], xi.shape[:-1])
    P = int(np.prod(shape))
    y = np.broadcast_to(y, shape + (n,)).reshape(P, n).copy()
    xi = np.broadcast_to(xi, shape + (n,)).reshape(P, n).copy()
    lo, hi = float(times[j + 1]), float(times[j - 1])

    def finish(sol: ExchangeSolution) -> ExchangeSolution:
        sol.K_bounds_ok = bool(np.all(sol.K >= lo - 1e-10) and np.all(sol.K <= hi + 1e-10))
        if not sol.K_bounds_ok:
            raise PicardError(f"exchange solution left [t_(j+1), t_(j-1)] = [{lo}, {hi}]; time horizon too large")
        return sol

    if not invert:
        sigma, R, K, it, upd = _picard(H, G, times, j, y, xi, nodes, tol, maxiter)
        return finish(ExchangeSolution(times, j, sigma, y, xi, R, K, it, upd))

    x = y.copy()
    wx = jb(x)
    ybar = x.copy()
    for k in range(1, 101):
        sigma, R, K, it, upd = _picard(H, G, times, j, ybar, xi, nodes, tol, maxiter)
        res = R[:, -1] - x
        if np.max(np.linalg.norm(res, axis=-1) / wx) <= 10 * tol:
            sol = ExchangeSolution(times, j, sigma, ybar, xi, R, K, it, upd, x=x, Z=K[:, -1].reshape(shape),
                                   inversion_iterations=k)
            return finish(sol)
        ybar = ybar - res
    raise PicardError("inversion of y -> R(t_(j-1); y) did not converge in 100 iterations")


def exchange_jacobian(H: Coefficient, G: Coefficient, times, j: int, y, xi, step: float = 1e-6,
                      nodes: int = EXCHANGE_NODES, n: int = 1) -> np.ndarray:
    """Centred-difference dR/dy at sigma = t_{j-1}, shape (P, n, n)."""
    y = as_points(y, n).reshape(-1, n)
    xi = as_points(xi, n).reshape(-1, n)
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = step * 1.0
        hi = solve_exchange_ode(H, G, times, j, y + e * jb(y)[:, None], xi, nodes, n=n).R_end
        lo = solve_exchange_ode(H, G, times, j, y - e * jb(y)[:, None], xi, nodes, n=n).R_end
        cols.append((hi - lo) / (2 * step * jb(y)[:, None]))
    return np.stack(cols, axis=-1)


# ---------------------------------------------------------------------------
# exchange time Z_j and the commutation residual


RHO_NODES = 8
G_INTERVALS = 8


@dataclass
class ExchangeResult:
    """Z_j and the residual Psi_j = phi_j(t) - phi(t with t_j = Z_j) on the query points."""

    Z: np.ndarray
    psi: np.ndarray
    swapped: np.ndarray
    shifted: np.ndarray
    shortcut: bool
    report: InvolutivenessReport
    solution: ExchangeSolution | None = None


def fitted_coefficient(a: Symbol, b: Symbol, eps: float = FIT_EPS) -> Symbol:
    """Regularised least-squares b with {tau - a, tau - b} = b (a - b) + d, pointwise."""
    pb = poisson_bracket(a, b)

    def f(t, x, xi):
        diff = a(t, x, xi) - b(t, x, xi)
        P = pb(t, x, xi)
        return P * diff / (diff ** 2 + eps ** 2 * jb(x) ** 2 * jb(xi) ** 2)

    return FuncSymbol(f, n=a.n, order=(0.0, 0.0), real=True)


@dataclass
class _Exchange:
    """Coefficient maps H (= the rho-averaged d_zeta alpha_j) and G (= exp of the integrated b_j)."""

    members: list[Symbol]
    phases: list[PhaseFunction]
    times: np.ndarray
    j: int
    b: Symbol
    method: str = "damped"
    dt: float = DT_MAX
    swapped: list[PhaseFunction] = field(init=False)

    def __post_init__(self) -> None:
        self.swapped = swap_factors(self.phases, self.j)

    @property
    def n(self) -> int:
        return self.members[0].n

    def _flat_times(self, sigma, K=None) -> np.ndarray:
        tv = replace_time(self.times, self.j - 1, sigma.reshape(-1))
        if K is not None:
            tv[:, self.j] = K.reshape(-1)
        return tv

    def _alpha_xi(self, tv: np.ndarray, z: np.ndarray, zeta: np.ndarray) -> np.ndarray:
        """d_zeta alpha_j(t_0..t_{j-1}; z, zeta) through the composed backward trajectory."""
        j, n = self.j, self.n
        sigma = tv[:, j - 1]
        upper = self.members[j]
        lower = self.members[j - 2] if j >= 2 else None
        q, p = z, zeta
        jac = np.broadcast_to(np.eye(2 * n), (z.shape[0], 2 * n, 2 * n))
        for k in range(1, j):
            st = _integrate(self.members[k - 1], tv[:, k], tv[:, k - 1], q, p, True, False, self.dt)
            q, p = st.q, st.p
            jac = st.jac @ jac
        gx = np.stack([upper.derivative(sigma, q, p, dx=_e(n, i)) for i in range(n)], axis=-1)
        gxi = np.stack([upper.derivative(sigma, q, p, dxi=_e(n, i)) for i in range(n)], axis=-1)
        if lower is not None:
            gx -= np.stack([lower.derivative(sigma, q, p, dx=_e(n, i)) for i in range(n)], axis=-1)
            gxi -= np.stack([lower.derivative(sigma, q, p, dxi=_e(n, i)) for i in range(n)], axis=-1)
        if j == 1:
            return gxi
        g = np.concatenate([gx, gxi], axis=-1)
        return np.einsum("pkc,pk->pc", jac[:, :, n:], g)

    def H(self, sigma, K, R, xi) -> np.ndarray:
        shape = K.shape
        n = self.n
        Rf = R.reshape(-1, n)
        xif = xi.reshape(-1, n)
        tv = self._flat_times(sigma)
        g_swapped = _product_values(self.swapped, tv, Rf, xif, False, False, self.method)[0].dx
        tvK = self._flat_times(sigma, K)
        g_orig = _product_values(self.phases, tvK, Rf, xif, False, False, self.method)[0].dx
        rho, w = gauss_legendre(RHO_NODES, 0.0, 1.0)
        out = np.zeros_like(Rf)
        for r, wr in zip(rho, w):
            out += wr * self._alpha_xi(tv, Rf, r * g_swapped + (1 - r) * g_orig)
        return out.reshape(shape + (n,))

    def G(self, sigma, K, R, xi) -> np.ndarray:
        if self.b.is_zero():
            return np.ones(K.shape)
        n = self.n
        shape = K.shape
        sig = np.asarray(sigma, dtype=float).reshape(-1)
        Kf = K.reshape(-1)
        span = sig - Kf
        u = np.linspace(0.0, 1.0, G_INTERVALS + 1)
        w = simpson_weights(G_INTERVALS, 1.0 / G_INTERVALS)
        tau = sig[:, None] - span[:, None] * u
        if "x" not in self.b.depends and "xi" not in self.b.depends:
            bv = self.b(tau, np.zeros((1, 1, n)), np.zeros((1, 1, n)))
        else:
            Rf = R.reshape(-1, n)
            xif = xi.reshape(-1, n)
            tv = self._flat_times(sigma, K)
            j = self.j
            if j == 1:
                Y0 = Rf
                N0 = _product_values(self.phases, tv, Rf, xif, False, False, self.method)[0].dx
            else:
                cp = critical_points(self.phases, tv, Rf, xif, self.method)
                Y0, N0 = cp.position(j - 1), cp.momentum(j - 1)
            P = Kf.size
            st = _integrate(self.members[j - 1], tau, np.broadcast_to(sig[:, None], tau.shape),
                            np.broadcast_to(Y0[:, None, :], (P, u.size, n)),
                            np.broadcast_to(N0[:, None, :], (P, u.size, n)), False, False, self.dt)
            bv = self.b(tau, st.q, st.p)
        integral = np.sum(bv * w, axis=-1) * span
        return np.exp(integral).reshape(shape)


def _e(n: int, i: int) -> tuple[int, ...]:
    return tuple(1 if k == i else 0 for k in range(n))


def exchange_time(fam: SymbolFamily, phases: Sequence[PhaseFunction] | None, times, j: int, x, xi,
                  nodes: int = EXCHANGE_NODES, method: str = "damped", mode: str | None = None,
                  lattice: Lattice | None = None) -> ExchangeResult:
    """Z_j(t; x, xi) and the residual Psi_j for swapping factors j and j+1.

    The family must pass :func:`check_involutive` (``witnessed`` when witnesses are given,
    ``fitted`` otherwise). If b_j = b_{j,j+1} vanishes then G_j = 1 and K does not depend on
    R, so Z_j = t_{j-1} - t_j + t_{j+1} without solving the ODE.
    """
    times = _times_array(times)
    M = times.size - 2
    if not 1 <= j <= M:
        raise ValueError(f"exchange index j = {j} outside 1..{M}")
    if len(fam) < M + 1:
        raise ValueError(f"time vector of length {M + 2} needs {M + 1} family members")
    members = list(fam.members[:M + 1])
    sub = SymbolFamily(members, {k: v for k, v in fam.b.items() if max(k) <= M},
                       {k: v for k, v in fam.d.items() if max(k) <= M}, fam.T)
    mode = mode or ("witnessed" if fam.has_witnesses() else "fitted")
    report = check_involutive(sub, mode, lattice)
    if not report:
        raise NotInvolutiveError(f"family is not involutive ({mode} check failed)")
    if phases is None:
        phases = [build_eikonal_phase(a, fam.T, 0.0) for a in members]
    phases = list(phases[:M + 1])
    n = members[0].n
    x = as_points(x, n)
    xi = as_points(xi, n)
    shape = np.broadcast_shapes(x.shape[:-1], xi.shape[:-1])
    xf = np.broadcast_to(x, shape + (n,)).reshape(-1, n)
    xif = np.broadcast_to(xi, shape + (n,)).reshape(-1, n)

    if mode == "witnessed":
        b = fam.witness(j - 1, j)[0]
    elif poisson_bracket(members[j - 1], members[j]).is_zero():
        b = zero(n)
    else:
        b = fitted_coefficient(members[j - 1], members[j])
    ex = _Exchange(members, phases, times, j, b, method)

    solution = None
    shortcut = b.is_zero()
    if shortcut:
        Z = np.full(xf.shape[0], times[j - 1] - times[j] + times[j + 1])
    else:
        solution = solve_exchange_ode(ex.H, ex.G, times, j, xf, xif, nodes, invert=True, n=n)
        Z = solution.Z.reshape(-1)

    swapped = _product_values(ex.swapped, times, xf, xif, False, True, method)[0].phi
    if shortcut:
        shifted_times = replace_time(times, j, float(Z[0]))
    else:
        shifted_times = replace_time(times, j, Z)
    shifted = _product_values(phases, shifted_times, xf, xif, False, True, method)[0].phi
    psi = swapped - shifted
    return ExchangeResult(Z.reshape(shape), psi.reshape(shape), swapped.reshape(shape), shifted.reshape(shape),
                          shortcut, report, solution)
