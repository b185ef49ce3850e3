"""Hamilton flows, their spatial inverse and eikonal phase functions.

For a real Hamiltonian a of order (1, 1) the characteristics solve

    d/dt q = -a'_xi(t; q, p),   d/dt p = a'_x(t; q, p),   (q, p)(s) = (y, eta),

and the phase is phi(t, s; x, xi) = u(t, s; qbar, xi) with the action
u = y.eta + int_s^t (a - a'_xi . p) along the flow and qbar the inverse of y -> q(t, s; y, xi).
It satisfies d_t phi = a(t; x, phi'_x) with phi(s, s) = x.xi.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import sympy as sp

from .errors import ContractionError, EquivalenceError
from .expr import S as S_SYM, T as T_SYM, parse_expression, space_symbols
from .gridcore import gauss_legendre, jb
from .symbols import ExprSymbol, Lattice, Symbol, as_points, default_lattice

DT_MAX = 1e-3
NEWTON_TOL = 1e-10
NEWTON_MAXITER = 50
TIME_STEP = 1e-4


def _unit(n: int, i: int) -> tuple[int, ...]:
    return tuple(int(k == i) for k in range(n))


def _gradients(a: Symbol, t, q, p):
    n = a.n
    ax = np.stack([a.derivative(t, q, p, dx=_unit(n, i)) for i in range(n)], axis=-1)
    axi = np.stack([a.derivative(t, q, p, dxi=_unit(n, i)) for i in range(n)], axis=-1)
    return ax, axi


def _hessian_blocks(a: Symbol, t, q, p):
    """Blocks H[..., i, j] of second derivatives: (xx, xi_x, xi_xi) with xi_x[i, j] = d_xi_i d_x_j a."""
    n = a.n
    shape = np.broadcast_shapes(np.shape(t), q.shape[:-1], p.shape[:-1])
    hxx = np.empty(shape + (n, n))
    hxix = np.empty(shape + (n, n))
    hxixi = np.empty(shape + (n, n))
    for i in range(n):
        for j in range(n):
            if j >= i:
                hxx[..., i, j] = hxx[..., j, i] = a.derivative(t, q, p, dx=np.add(_unit(n, i), _unit(n, j)))
                hxixi[..., i, j] = hxixi[..., j, i] = a.derivative(t, q, p, dxi=np.add(_unit(n, i), _unit(n, j)))
            hxix[..., i, j] = a.derivative(t, q, p, dx=_unit(n, j), dxi=_unit(n, i))
    return hxx, hxix, hxixi


def lipschitz_constant(a: Symbol, times=(0.0,), lattice: Lattice | None = None) -> float:
    """Sampled C = max(sup |a'_xi| / <x>, sup |a'_x| / <xi>) over the lattice at the given times."""
    base = lattice or default_lattice(a.n)
    C = 0.0
    for t in np.unique(np.asarray(times, dtype=float)):
        ax, axi = _gradients(a, np.full(base.size, t), base.X, base.XI)
        C = max(C, float(np.max(np.linalg.norm(axi, axis=-1) / jb(base.X))),
                float(np.max(np.linalg.norm(ax, axis=-1) / jb(base.XI))))
    return C


def equivalence_kappa(C: float, span: float) -> float:
    return math.exp(1.05 * C * abs(span)) * (1.0 + 1e-9)


@dataclass
class _FlowState:
    q: np.ndarray
    p: np.ndarray
    jac: np.ndarray | None
    action: np.ndarray | None


class _Kernel:
    """Fused evaluation of a, its gradients and (optionally) Hessian entries at (tau, q, p).

    Returns a flat list: a, a_x (n), a_xi (n) and, with ``hessian``, the row-major entries of
    a_xx, a_{xi x} (entry [i, j] = d_xi_i d_x_j a) and a_{xi xi}. Entries may be scalars.
    """

    def __init__(self, a: Symbol, hessian: bool):
        n = a.n
        self.a = a
        self.n = n
        self.hessian = hessian
        z = (0,) * n
        keys = [(0, z, z)]
        keys += [(0, _unit(n, i), z) for i in range(n)]
        keys += [(0, z, _unit(n, i)) for i in range(n)]
        if hessian:
            keys += [(0, tuple(np.add(_unit(n, i), _unit(n, j))), z) for i in range(n) for j in range(n)]
            keys += [(0, _unit(n, j), _unit(n, i)) for i in range(n) for j in range(n)]
            keys += [(0, z, tuple(np.add(_unit(n, i), _unit(n, j)))) for i in range(n) for j in range(n)]
        self.keys = keys
        self.fused = None
        if isinstance(a, ExprSymbol):
            exprs = [a.derivative_expr(k) for k in keys]
            self.fused = sp.lambdify([T_SYM, *a.xs, *a.xis], exprs, "numpy", cse=True)

    def __call__(self, tau, q, p) -> list:
        """q, p have the component index first: shape (n, P)."""
        if self.fused is not None:
            return self.fused(tau, *q, *p)
        qq = np.moveaxis(q, 0, -1)
        pp = np.moveaxis(p, 0, -1)
        return [self.a.derivative(tau, qq, pp, k[0], k[1], k[2]) for k in self.keys]


def _kernel(a: Symbol, hessian: bool) -> _Kernel:
    cache = a.__dict__.setdefault("_hamilton_kernels", {})
    if hessian not in cache:
        cache[hessian] = _Kernel(a, hessian)
    return cache[hessian]


class _Compensated:
    """Kahan-compensated running sum; keeps long fixed-step integrations free of drift."""

    def __init__(self, value: np.ndarray):
        self.value = value
        self.comp = np.zeros_like(value)

    def add(self, inc: np.ndarray) -> None:
        y = inc - self.comp
        t = self.value + y
        self.comp = (t - self.value) - y
        self.value = t


def _integrate(a: Symbol, t, s, y, eta, variational: bool, action: bool, dt_max: float = DT_MAX) -> _FlowState:
    """Fixed-step RK4 in normalised time, vectorised over points with individual (t, s).

    The state is stored row-wise (q, p, the 2n x 2n variational matrix, the action) over a
    flat point axis, so each stage costs one fused symbol evaluation plus row arithmetic.
    """
    n = a.n
    d = 2 * n
    shape = np.broadcast_shapes(np.shape(t), np.shape(s), y.shape[:-1], eta.shape[:-1])
    P = int(np.prod(shape))
    t = np.broadcast_to(np.asarray(t, dtype=float), shape).reshape(P)
    s = np.broadcast_to(np.asarray(s, dtype=float), shape).reshape(P)
    q0 = np.broadcast_to(y, shape + (n,)).reshape(P, n).T
    p0 = np.broadcast_to(eta, shape + (n,)).reshape(P, n).T
    span = t - s
    smax = float(np.max(np.abs(span))) if P else 0.0
    steps = int(math.ceil(smax / dt_max - 1e-9)) if smax > 0 else 0

    rows = d + (d * d if variational else 0) + (1 if action else 0)
    Z = np.zeros((rows, P))
    Z[:n] = q0
    Z[n:d] = p0
    mo = d
    if variational:
        for i in range(d):
            Z[mo + i * d + i] = 1.0
    uo = mo + (d * d if variational else 0)
    if action:
        Z[uo] = np.sum(q0 * p0, axis=0)

    if steps:
        kern = _kernel(a, variational)
        h = 1.0 / steps

        def rhs(sig, Z):
            tau = s + sig * span
            vals = kern(tau, Z[:n], Z[n:d])
            out = np.empty_like(Z)
            ax = vals[1:1 + n]
            axi = vals[1 + n:1 + d]
            for i in range(n):
                out[i] = -axi[i] * span
                out[n + i] = ax[i] * span
            if variational:
                o = 1 + d
                hxx = vals[o:o + n * n]
                hxix = vals[o + n * n:o + 2 * n * n]
                hxixi = vals[o + 2 * n * n:o + 3 * n * n]
                # Jacobian rows of the Hamilton vector field
                J = [[None] * d for _ in range(d)]
                for i in range(n):
                    for k in range(n):
                        J[i][k] = -hxix[i * n + k]
                        J[i][n + k] = -hxixi[i * n + k]
                        J[n + i][k] = hxx[i * n + k]
                        J[n + i][n + k] = hxix[k * n + i]
                for r in range(d):
                    for c in range(d):
                        acc = 0.0
                        for k in range(d):
                            acc = acc + J[r][k] * Z[mo + k * d + c]
                        out[mo + r * d + c] = acc * span
            if action:
                acc = vals[0]
                for i in range(n):
                    acc = acc - axi[i] * Z[n + i]
                out[uo] = acc * span
            return out

        acc = _Compensated(Z)
        for i in range(steps):
            sig = i * h
            Zv = acc.value
            k1 = rhs(sig, Zv)
            k2 = rhs(sig + h / 2, Zv + (h / 2) * k1)
            k3 = rhs(sig + h / 2, Zv + (h / 2) * k2)
            k4 = rhs(sig + h, Zv + h * k3)
            acc.add((h / 6) * (k1 + 2 * k2 + 2 * k3 + k4))
        Z = acc.value

    q = Z[:n].T.reshape(shape + (n,))
    p = Z[n:d].T.reshape(shape + (n,))
    jac = None
    if variational:
        jac = Z[mo:mo + d * d].T.reshape(shape + (d, d))
    u = Z[uo].reshape(shape) if action else None
    return _FlowState(q, p, jac, u)


@dataclass(frozen=True)
class FlowField:
    """Flow (q, p)(t, s; y, eta) at a set of initial points, with its equivalence diagnostics."""

    a: Symbol
    t: float
    s: float
    y: np.ndarray
    eta: np.ndarray
    q: np.ndarray
    p: np.ndarray
    jac: np.ndarray | None
    action: np.ndarray | None
    C: float
    kappa: float
    max_ratio: float
    dt: float = DT_MAX

    def at(self, y, eta) -> "FlowField":
        """Re-solve the same flow at other initial points."""
        return solve_hamilton_flow(self.a, self.t, self.s, y, eta, dt=self.dt, variational=self.jac is not None,
                                   action=self.action is not None, C=self.C)

    @property
    def dq_dy(self) -> np.ndarray:
        n = self.a.n
        return self.jac[..., :n, :n]


def _ratio_excess(y, q, eta, p) -> float:
    r1 = jb(q) / jb(y)
    r2 = jb(p) / jb(eta)
    return float(max(np.max(np.maximum(r1, 1 / r1)), np.max(np.maximum(r2, 1 / r2)))) if r1.size else 1.0


def solve_hamilton_flow(a: Symbol, t: float, s: float, y, eta, dt: float = DT_MAX, variational: bool = False,
                        action: bool = False, C: float | None = None, check: bool = True) -> FlowField:
    """RK4 solution of the Hamilton system from s to t; raises EquivalenceError outside [1/kappa, kappa]."""
    if not a.real:
        raise ValueError("Hamiltonian must be real-valued")
    y = as_points(y, a.n)
    eta = as_points(eta, a.n)
    if C is None:
        C = lipschitz_constant(a, (s, 0.5 * (s + t), t))
    kappa = equivalence_kappa(C, t - s)
    st = _integrate(a, t, s, y, eta, variational, action, dt)
    ratio = _ratio_excess(np.broadcast_to(y, st.q.shape), st.q, np.broadcast_to(eta, st.p.shape), st.p)
    if check and ratio > kappa:
        raise EquivalenceError(
            f"flow ratio {ratio:.4g} exceeds kappa = {kappa:.4g} on [{s}, {t}]; time horizon too large"
        )
    return FlowField(a, t, s, y, eta, st.q, st.p, st.jac, st.action, C, kappa, ratio, dt)


def _newton_inverse(a: Symbol, t, s, x, xi, dt: float, want_action: bool):
    """Solve q(t, s; y, xi) = x for y by Newton from y = x; returns y and the final flow state."""
    n = a.n
    shape = np.broadcast_shapes(np.shape(t), np.shape(s), x.shape[:-1], xi.shape[:-1])
    x = np.broadcast_to(x, shape + (n,))
    xi = np.broadcast_to(xi, shape + (n,))
    t = np.broadcast_to(np.asarray(t, dtype=float), shape)
    s = np.broadcast_to(np.asarray(s, dtype=float), shape)
    y = x.astype(float).copy()
    q = np.empty(shape + (n,))
    p = np.empty(shape + (n,))
    jac = np.empty(shape + (2 * n, 2 * n))
    u = np.empty(shape) if want_action else None
    active = np.ones(shape, dtype=bool)
    tol = NEWTON_TOL * jb(x)
    for _ in range(NEWTON_MAXITER):
        idx = np.nonzero(active)
        st = _integrate(a, t[idx], s[idx], y[idx], xi[idx], True, want_action, dt)
        q[idx], p[idx], jac[idx] = st.q, st.p, st.jac
        if want_action:
            u[idx] = st.action
        res = st.q - x[idx]
        done = np.linalg.norm(res, axis=-1) <= tol[idx]
        step = np.linalg.solve(st.jac[..., :n, :n], res[..., None])[..., 0]
        y_act = y[idx]
        y_act[~done] -= step[~done]
        y[idx] = y_act
        still = np.zeros(shape, dtype=bool)
        still[tuple(ix[~done] for ix in idx)] = True
        active = still
        if not active.any():
            return y, q, p, jac, u
    worst = float(np.max(np.linalg.norm(q - x, axis=-1)[active] / jb(x)[active]))
    raise ContractionError(
        f"Newton inversion of the flow did not converge in {NEWTON_MAXITER} iterations "
        f"(scaled residual {worst:.3e}); contraction violated, time horizon too large"
    )


def invert_flow(flow: FlowField, x, xi) -> np.ndarray:
    """qbar(t, s; x, xi): the initial position y with q(t, s; y, xi) = x."""
    a = flow.a
    x = as_points(x, a.n)
    xi = as_points(xi, a.n)
    if flow.t == flow.s:
        return np.broadcast_to(x, np.broadcast_shapes(x.shape, xi.shape)).copy()
    y, *_ = _newton_inverse(a, flow.t, flow.s, x, xi, flow.dt, False)
    return y


# ---------------------------------------------------------------------------
# phase functions


@dataclass(frozen=True)
class PhaseValues:
    phi: np.ndarray
    dx: np.ndarray
    dxi: np.ndarray
    hxx: np.ndarray | None = None
    hxxi: np.ndarray | None = None
    hxixi: np.ndarray | None = None


@dataclass(frozen=True)
class RegularityRecord:
    """r: lattice infimum of |det phi''_{x xi}|; tau: sum of weighted sups of the derivatives of J = phi - x.xi
    of orders 1 and 2; kappa: largest of the equivalence ratios <phi'_x>/<xi>, <phi'_xi>/<x> and inverses."""

    r: float
    tau: float
    kappa: float
    order: int = 2


class PhaseFunction:
    """Phase phi(t, s; x, xi) at a time pair. Subclasses implement :meth:`evaluate` and :meth:`at`.

    ``evaluate`` accepts optional per-point times ``t``, ``s`` (broadcast against the points),
    which lets multi-products and the exchange machinery query the whole phase family at once.
    With ``value=False`` only the gradients are guaranteed to be computed.
    """

    n: int = 1
    t: float = 0.0
    s: float = 0.0

    def evaluate(self, x, xi, hessian: bool = False, t=None, s=None, value: bool = True) -> PhaseValues:
        raise NotImplementedError

    def at(self, t: float, s: float) -> "PhaseFunction":
        raise NotImplementedError

    def __call__(self, x, xi) -> np.ndarray:
        return self.evaluate(x, xi).phi

    def multiplier(self) -> Callable | None:
        """J with phi = x.xi + J(xi) when the perturbation depends on xi only, else None."""
        return None

    def perturbation(self, x, xi) -> np.ndarray:
        x = as_points(x, self.n)
        xi = as_points(xi, self.n)
        return self(x, xi) - np.sum(x * xi, axis=-1)

    def time_derivative(self, x, xi, wrt: str = "t", step: float = TIME_STEP) -> np.ndarray:
        """Centred difference of phi in t or s with step ``step * (1 + |time|)``."""
        if wrt == "t":
            h = step * (1 + abs(self.t))
            return (self.at(self.t + h, self.s)(x, xi) - self.at(self.t - h, self.s)(x, xi)) / (2 * h)
        if wrt == "s":
            h = step * (1 + abs(self.s))
            return (self.at(self.t, self.s + h)(x, xi) - self.at(self.t, self.s - h)(x, xi)) / (2 * h)
        raise ValueError("wrt must be 't' or 's'")

    def regularity(self, lattice: Lattice | None = None) -> RegularityRecord:
        lat = lattice or default_lattice(self.n)
        X, XI = lat.X, lat.XI
        v = self.evaluate(X, XI, hessian=True)
        det = np.abs(np.linalg.det(v.hxxi))
        wx, wxi = jb(X), jb(XI)
        eye = np.eye(self.n)
        tau = (
            float(np.max(np.linalg.norm(v.dx - XI, axis=-1) / wxi))
            + float(np.max(np.linalg.norm(v.dxi - X, axis=-1) / wx))
            + float(np.max(np.abs(v.hxx).max(axis=(-1, -2)) * wx / wxi))
            + float(np.max(np.abs(v.hxxi - eye).max(axis=(-1, -2))))
            + float(np.max(np.abs(v.hxixi).max(axis=(-1, -2)) * wxi / wx))
        )
        r1 = jb(v.dx) / wxi
        r2 = jb(v.dxi) / wx
        kappa = float(max(np.max(np.maximum(r1, 1 / r1)), np.max(np.maximum(r2, 1 / r2))))
        return RegularityRecord(float(np.min(det)), tau, kappa)


class ExpressionPhase(PhaseFunction):
    """Closed-form phase given as an expression in t, s, x, xi (and parameters)."""

    def __init__(self, expr, n: int = 1, t: float = 0.0, s: float = 0.0, params=None):
        if isinstance(expr, str):
            expr = parse_expression(expr, n, params)
        self.expr = sp.sympify(expr)
        self.n = n
        self.t = float(t)
        self.s = float(s)
        self.xs, self.xis = space_symbols(n)
        args = [T_SYM, S_SYM, *self.xs, *self.xis]
        e = self.expr
        self._f = sp.lambdify(args, e, "numpy")
        self._dx = [sp.lambdify(args, sp.diff(e, v), "numpy") for v in self.xs]
        self._dxi = [sp.lambdify(args, sp.diff(e, v), "numpy") for v in self.xis]
        self._h = {
            "xx": [[sp.lambdify(args, sp.diff(e, a, b), "numpy") for b in self.xs] for a in self.xs],
            "xxi": [[sp.lambdify(args, sp.diff(e, a, b), "numpy") for b in self.xis] for a in self.xs],
            "xixi": [[sp.lambdify(args, sp.diff(e, a, b), "numpy") for b in self.xis] for a in self.xis],
        }
        self._dt = sp.lambdify(args, sp.diff(e, T_SYM), "numpy")
        self._ds = sp.lambdify(args, sp.diff(e, S_SYM), "numpy")
        J = sp.simplify(e - sum(a * b for a, b in zip(self.xs, self.xis)))
        self._J = None
        if not (J.free_symbols & set(self.xs)):
            self._J = sp.lambdify(args, J, "numpy")

    def at(self, t: float, s: float) -> "ExpressionPhase":
        out = object.__new__(ExpressionPhase)
        out.__dict__.update(self.__dict__)
        out.t = float(t)
        out.s = float(s)
        return out

    def _args(self, x, xi, t=None, s=None):
        t = self.t if t is None else np.asarray(t, dtype=float)
        s = self.s if s is None else np.asarray(s, dtype=float)
        return [t, s] + [x[..., i] for i in range(self.n)] + [xi[..., i] for i in range(self.n)]

    def evaluate(self, x, xi, hessian: bool = False, t=None, s=None, value: bool = True) -> PhaseValues:
        x = as_points(x, self.n)
        xi = as_points(xi, self.n)
        shape = np.broadcast_shapes(x.shape[:-1], xi.shape[:-1], np.shape(t) if t is not None else (),
                                    np.shape(s) if s is not None else ())
        args = self._args(x, xi, t, s)

        def ev(f):
            return np.broadcast_to(np.asarray(f(*args), dtype=float), shape)

        phi = ev(self._f)
        dx = np.stack([ev(f) for f in self._dx], axis=-1)
        dxi = np.stack([ev(f) for f in self._dxi], axis=-1)
        if not hessian:
            return PhaseValues(phi, dx, dxi)
        H = {k: np.stack([np.stack([ev(f) for f in row], axis=-1) for row in rows], axis=-2)
             for k, rows in self._h.items()}
        return PhaseValues(phi, dx, dxi, H["xx"], H["xxi"], H["xixi"])

    def time_derivative(self, x, xi, wrt: str = "t", step: float = TIME_STEP) -> np.ndarray:
        x = as_points(x, self.n)
        xi = as_points(xi, self.n)
        f = self._dt if wrt == "t" else self._ds
        shape = np.broadcast_shapes(x.shape[:-1], xi.shape[:-1])
        return np.broadcast_to(np.asarray(f(*self._args(x, xi)), dtype=float), shape)

    def multiplier(self):
        if self._J is None:
            return None
        zero = np.zeros(self.n)

        def J(xi):
            xi = as_points(xi, self.n)
            return np.broadcast_to(np.asarray(self._J(*self._args(zero, xi)), dtype=float), xi.shape[:-1])

        return J


def identity_phase(n: int = 1, t: float = 0.0, s: float = 0.0) -> ExpressionPhase:
    return ExpressionPhase("x*xi" if n == 1 else "x1*xi1 + x2*xi2", n, t, s)


def _identity_values(x, xi, n: int, hessian: bool) -> PhaseValues:
    shape = np.broadcast_shapes(x.shape[:-1], xi.shape[:-1])
    x = np.broadcast_to(x, shape + (n,))
    xi = np.broadcast_to(xi, shape + (n,))
    phi = np.sum(x * xi, axis=-1)
    if not hessian:
        return PhaseValues(phi, xi.copy(), x.copy())
    z = np.zeros(shape + (n, n))
    return PhaseValues(phi, xi.copy(), x.copy(), z, z + np.eye(n), z.copy())


def _quadratic_terms(a: Symbol) -> bool:
    if not isinstance(a, ExprSymbol):
        return False
    poly = a.expr.as_poly(*a.xs, *a.xis)
    return poly is not None and poly.total_degree() <= 2


def classify_method(a: Symbol) -> str:
    if "x" not in a.depends:
        return "multiplier"
    if _quadratic_terms(a):
        return "linear"
    return "flow"


class EikonalPhase(PhaseFunction):
    """Solution of d_t phi = a(t; x, phi'_x), phi(s, s) = x.xi, built from the Hamilton flow of a.

    ``method``:
      * ``flow`` - per-point Newton inversion of the RK4 flow and the action integral;
      * ``linear`` - for a quadratic polynomial in (x, xi): the flow is affine and the phase a
        quadratic form, both recovered from RK4 runs on a small stencil;
      * ``multiplier`` - for x-independent a: phi = x.xi + int_s^t a(r, xi) dr by Gauss-Legendre;
      * ``auto`` - the cheapest applicable one.
    """

    def __init__(self, a: Symbol, t: float, s: float, method: str = "auto", dt: float = DT_MAX,
                 _cache: dict | None = None):
        if not a.real:
            raise ValueError("Hamiltonian must be real-valued")
        self.a = a
        self.n = a.n
        self.t = float(t)
        self.s = float(s)
        self.dt = dt
        self.requested = method
        self.method = classify_method(a) if method == "auto" else method
        if self.method not in ("flow", "linear", "multiplier"):
            raise ValueError(f"unknown method {method!r}")
        if self.method == "multiplier" and "x" in a.depends:
            raise ValueError("multiplier method needs an x-independent Hamiltonian")
        if self.method == "linear" and not _quadratic_terms(a):
            raise ValueError("linear method needs a polynomial Hamiltonian of degree <= 2")
        self._cache = {} if _cache is None else _cache
        self._C = None
        self._quad = None
        if self.method == "linear" and self.t != self.s:
            self._quad = self._linear_data()

    def at(self, t: float, s: float) -> "EikonalPhase":
        return EikonalPhase(self.a, t, s, self.requested, self.dt, self._cache)

    # -- shared helpers ----------------------------------------------------
    @property
    def autonomous(self) -> bool:
        return "t" not in self.a.depends

    def lipschitz(self) -> float:
        if self._C is None:
            key = ("C", self.s, self.t) if not self.autonomous else ("C",)
            if key not in self._cache:
                self._cache[key] = lipschitz_constant(self.a, (self.s, 0.5 * (self.s + self.t), self.t))
            self._C = self._cache[key]
        return self._C

    def flow(self, y, eta, variational: bool = False, action: bool = False) -> FlowField:
        return solve_hamilton_flow(self.a, self.t, self.s, y, eta, self.dt, variational, action, self.lipschitz())

    # -- linear method -------------------------------------------------------
    def _linear_data(self):
        key = ("lin", self.t - self.s) if self.autonomous else ("lin", self.t, self.s)
        if key in self._cache:
            return self._cache[key]
        n = self.n
        d = 2 * n
        pts = [np.zeros(d)]
        for i in range(d):
            e = np.zeros(d)
            e[i] = 1.0
            pts += [e, -e]
        pairs = [(i, j) for i in range(d) for j in range(i + 1, d)]
        for i, j in pairs:
            e = np.zeros(d)
            e[i] = e[j] = 1.0
            pts.append(e)
        Z = np.array(pts)
        st = _integrate(self.a, self.t, self.s, Z[:, :n], Z[:, n:], False, True, self.dt)
        zf = np.concatenate([st.q, st.p], axis=-1)
        u = st.action
        c = zf[0]
        Phi = np.empty((d, d))
        g = np.empty(d)
        H = np.empty((d, d))
        for i in range(d):
            Phi[:, i] = 0.5 * (zf[1 + 2 * i] - zf[2 + 2 * i])
            g[i] = 0.5 * (u[1 + 2 * i] - u[2 + 2 * i])
            H[i, i] = u[1 + 2 * i] + u[2 + 2 * i] - 2 * u[0]
        base = 1 + 2 * d
        for k, (i, j) in enumerate(pairs):
            uii = u[0] + g[i] + 0.5 * H[i, i]
            ujj = u[0] + g[j] + 0.5 * H[j, j]
            H[i, j] = H[j, i] = u[base + k] - uii - ujj + u[0]
        A, B = Phi[:n, :n], Phi[:n, n:]
        Cm, D = Phi[n:, :n], Phi[n:, n:]
        Ainv = np.linalg.inv(A)
        # phase as a quadratic form in w = (x, xi): y = Ainv (x - B xi - c_q)
        Y = np.concatenate([Ainv, -Ainv @ B], axis=1)  # y = Y w + y0
        y0 = -Ainv @ c[:n]
        Mz = np.concatenate([Y, np.concatenate([np.zeros((n, n)), np.eye(n)], axis=1)], axis=0)  # z = Mz w + z0
        z0 = np.concatenate([y0, np.zeros(n)])
        Q = Mz.T @ H @ Mz
        k = Mz.T @ (g + H @ z0)
        c0 = float(u[0] + g @ z0 + 0.5 * z0 @ H @ z0)
        data = {"Q": Q, "k": k, "c0": c0, "Phi": Phi, "shift": c}
        self._cache[key] = data
        return data

    def _linear_values(self, x, xi, hessian: bool) -> PhaseValues:
        n = self.n
        Q, k, c0 = self._quad["Q"], self._quad["k"], self._quad["c0"]
        shape = np.broadcast_shapes(x.shape[:-1], xi.shape[:-1])
        w = np.concatenate([np.broadcast_to(x, shape + (n,)), np.broadcast_to(xi, shape + (n,))], axis=-1)
        Qw = w @ Q.T
        phi = 0.5 * np.sum(w * Qw, axis=-1) + w @ k + c0
        grad = Qw + k
        if not hessian:
            return PhaseValues(phi, grad[..., :n], grad[..., n:])
        z = np.zeros(shape + (n, n))
        return PhaseValues(phi, grad[..., :n], grad[..., n:], z + Q[:n, :n], z + Q[:n, n:], z + Q[n:, n:])

    # -- multiplier method -----------------------------------------------------
    def _integral_in_time(self, xi, dxi=None, t=None, s=None) -> np.ndarray:
        """int_s^t d_xi^dxi a(r, xi) dr (Gauss-Legendre, exact for polynomials in r up to degree 31)."""
        t = self.t if t is None else t
        s = self.s if s is None else s
        zero = np.zeros_like(xi)
        if self.autonomous:
            return (np.asarray(t) - np.asarray(s)) * self.a.derivative(0.0, zero, xi, dxi=dxi)
        shape = np.broadcast_shapes(np.shape(t), np.shape(s), xi.shape[:-1])
        nodes, weights = gauss_legendre(16, np.broadcast_to(s, shape), np.broadcast_to(t, shape))
        vals = self.a.derivative(nodes, zero[..., None, :], xi[..., None, :], dxi=dxi)
        return np.sum(vals * weights, axis=-1)

    def _multiplier_values(self, x, xi, hessian: bool, t, s) -> PhaseValues:
        n = self.n
        shape = np.broadcast_shapes(x.shape[:-1], xi.shape[:-1], np.shape(t), np.shape(s))
        x = np.broadcast_to(x, shape + (n,))
        xi_b = np.broadcast_to(xi, shape + (n,))
        J = np.broadcast_to(self._integral_in_time(xi, None, t, s), shape)
        dJ = np.stack([np.broadcast_to(self._integral_in_time(xi, _unit(n, i), t, s), shape) for i in range(n)],
                      axis=-1)
        phi = np.sum(x * xi_b, axis=-1) + J
        if not hessian:
            return PhaseValues(phi, xi_b.copy(), x + dJ)
        hxixi = np.empty(shape + (n, n))
        for i in range(n):
            for j in range(n):
                hxixi[..., i, j] = np.broadcast_to(
                    self._integral_in_time(xi, np.add(_unit(n, i), _unit(n, j)), t, s), shape)
        z = np.zeros(shape + (n, n))
        return PhaseValues(phi, xi_b.copy(), x + dJ, z, z + np.eye(n), hxixi)

    def multiplier(self):
        if self.t == self.s:
            return lambda xi: np.zeros(as_points(xi, self.n).shape[:-1])
        if self.method == "multiplier":
            return lambda xi: self._integral_in_time(as_points(xi, self.n))
        if self.method == "linear" and self._quad is not None:
            n = self.n
            Q, k, c0 = self._quad["Q"], self._quad["k"], self._quad["c0"]
            if np.allclose(Q[:n, :n], 0, atol=1e-13) and np.allclose(Q[:n, n:], np.eye(n), atol=1e-13) \
                    and np.allclose(k[:n], 0, atol=1e-13):
                Qxi, kxi = Q[n:, n:], k[n:]

                def J(xi):
                    xi = as_points(xi, n)
                    return 0.5 * np.sum(xi * (xi @ Qxi.T), axis=-1) + xi @ kxi + c0

                return J
        return None

    # -- flow method ------------------------------------------------------------
    def _lipschitz_range(self, t, s) -> float:
        if self.autonomous:
            return self.lipschitz()
        lo = float(min(np.min(t), np.min(s)))
        hi = float(max(np.max(t), np.max(s)))
        key = ("C", lo, hi)
        if key not in self._cache:
            self._cache[key] = lipschitz_constant(self.a, (lo, 0.5 * (lo + hi), hi))
        return self._cache[key]

    def _flow_values(self, x, xi, hessian: bool, t, s, value: bool) -> PhaseValues:
        n = self.n
        shape = np.broadcast_shapes(x.shape[:-1], xi.shape[:-1], np.shape(t), np.shape(s))
        flat_x = np.broadcast_to(x, shape + (n,)).reshape(-1, n)
        flat_xi = np.broadcast_to(xi, shape + (n,)).reshape(-1, n)
        tt = np.broadcast_to(np.asarray(t, dtype=float), shape).reshape(-1)
        ss = np.broadcast_to(np.asarray(s, dtype=float), shape).reshape(-1)
        y, q, p, jac, u = _newton_inverse(self.a, tt, ss, flat_x, flat_xi, self.dt, value)
        kappa = equivalence_kappa(self._lipschitz_range(tt, ss), float(np.max(np.abs(tt - ss))))
        ratio = _ratio_excess(y, q, flat_xi, p)
        if ratio > kappa:
            raise EquivalenceError(f"flow ratio {ratio:.4g} exceeds kappa = {kappa:.4g}; time horizon too large")
        phi = u.reshape(shape) if value else None
        dx = p.reshape(shape + (n,))
        dxi = y.reshape(shape + (n,))
        if not hessian:
            return PhaseValues(phi, dx, dxi)
        A = jac[:, :n, :n]
        B = jac[:, :n, n:]
        Cm = jac[:, n:, :n]
        Ainv = np.linalg.inv(A)
        hxx = Cm @ Ainv
        hxxi = np.swapaxes(Ainv, -1, -2)
        hxixi = -Ainv @ B
        return PhaseValues(phi, dx, dxi, hxx.reshape(shape + (n, n)), hxxi.reshape(shape + (n, n)),
                           hxixi.reshape(shape + (n, n)))

    def evaluate(self, x, xi, hessian: bool = False, t=None, s=None, value: bool = True) -> PhaseValues:
        x = as_points(x, self.n)
        xi = as_points(xi, self.n)
        per_point = t is not None or s is not None
        t = self.t if t is None else np.asarray(t, dtype=float)
        s = self.s if s is None else np.asarray(s, dtype=float)
        if per_point and np.ndim(t) == 0 and np.ndim(s) == 0:
            per_point = False
            if (float(t), float(s)) != (self.t, self.s):
                return self.at(float(t), float(s)).evaluate(x, xi, hessian, value=value)
        if not per_point:
            if self.t == self.s:
                return _identity_values(x, xi, self.n, hessian)
            if self.method == "linear":
                return self._linear_values(x, xi, hessian)
        if self.method == "multiplier":
            return self._multiplier_values(x, xi, hessian, t, s)
        return self._flow_values(x, xi, hessian, t, s, value)


def build_eikonal_phase(a: Symbol, t: float, s: float, method: str = "auto", dt: float = DT_MAX) -> EikonalPhase:
    return EikonalPhase(a, t, s, method, dt)


def eikonal_residual(phi: PhaseFunction, a: Symbol, lattice: Lattice | None = None,
                     step: float = TIME_STEP) -> float:
    """sup |d_t phi - a(t; x, phi'_x)| / (<x><xi>) over the lattice, d_t phi by centred difference."""
    lat = lattice or default_lattice(phi.n)
    X, XI = lat.X, lat.XI
    h = step
    dt_phi = (phi.at(phi.t + h, phi.s)(X, XI) - phi.at(phi.t - h, phi.s)(X, XI)) / (2 * h)
    grad = phi.evaluate(X, XI).dx
    res = np.abs(dt_phi - a(phi.t, X, grad)) / (jb(X) * jb(XI))
    return float(np.max(res))


def backward_residual(phi: PhaseFunction, a: Symbol, lattice: Lattice | None = None,
                      step: float = TIME_STEP) -> float:
    """sup |d_s phi + a(s; phi'_xi, xi)| / (<x><xi>) over the lattice."""
    lat = lattice or default_lattice(phi.n)
    X, XI = lat.X, lat.XI
    ds_phi = (phi.at(phi.t, phi.s + step)(X, XI) - phi.at(phi.t, phi.s - step)(X, XI)) / (2 * step)
    grad = phi.evaluate(X, XI).dxi
    return float(np.max(np.abs(ds_phi + a(phi.s, grad, XI)) / (jb(X) * jb(XI))))
