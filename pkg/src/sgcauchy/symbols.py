"""SG symbols and the operator-level calculus built on them.

A symbol is a function a(t; x, xi) with a declared order pair (m, mu). Points are arrays
whose last axis holds the n components; in one dimension plain arrays are accepted too.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import sympy as sp

from .errors import DerivativeUnavailable, NotInvolutiveError
from .expr import T as T_SYM, parse_expression, space_symbols
from .gridcore import GridFunction, SPATIAL, fourier_forward, fourier_inverse, jb, _require

Order = tuple[float, float]
Key = tuple[int, tuple[int, ...], tuple[int, ...]]


def as_points(v, n: int) -> np.ndarray:
    """Return ``v`` as a float array with the vector index on the last axis."""
    v = np.asarray(v, dtype=float)
    if n == 1 and (v.ndim == 0 or v.shape[-1] != 1):
        v = v[..., None]
    if v.shape[-1] != n:
        raise ValueError(f"expected points with last axis {n}, got shape {v.shape}")
    return v


def _zero_index(n: int) -> tuple[int, ...]:
    return (0,) * n


def _norm_index(idx, n: int) -> tuple[int, ...]:
    if idx is None:
        return _zero_index(n)
    if isinstance(idx, (int, np.integer)):
        if n != 1:
            raise ValueError("integer multi-index only allowed in one dimension")
        return (int(idx),)
    idx = tuple(int(i) for i in idx)
    if len(idx) != n:
        raise ValueError(f"multi-index {idx} does not have length {n}")
    return idx


def multi_indices(n: int, max_order: int) -> list[tuple[int, ...]]:
    """All multi-indices of length n with total order <= max_order."""
    return [a for a in itertools.product(range(max_order + 1), repeat=n) if sum(a) <= max_order]


class Symbol:
    """Base class. Subclasses implement :meth:`_eval` and may override :meth:`_derivative`."""

    n: int = 1
    order: Order = (0.0, 0.0)
    real: bool = True
    smooth_in_t: bool = True
    depends: frozenset = frozenset({"t", "x", "xi"})

    # -- evaluation -----------------------------------------------------
    def __call__(self, t, x, xi) -> np.ndarray:
        return self.derivative(t, x, xi)

    def derivative(self, t, x, xi, dt: int = 0, dx=None, dxi=None) -> np.ndarray:
        x = as_points(x, self.n)
        xi = as_points(xi, self.n)
        t = np.asarray(t, dtype=float)
        key = (int(dt), _norm_index(dx, self.n), _norm_index(dxi, self.n))
        out = self._derivative(t, x, xi, key)
        shape = np.broadcast_shapes(t.shape, x.shape[:-1], xi.shape[:-1])
        out = np.broadcast_to(out, shape)
        if self.real:
            return np.array(np.real(out), dtype=float)
        return np.array(out, dtype=complex)

    def _derivative(self, t, x, xi, key: Key) -> np.ndarray:
        raise NotImplementedError

    # -- structure -------------------------------------------------------
    def is_zero(self) -> bool:
        return False

    def separable_terms(self):
        """List of (f(t, x), g(t, xi)) symbols with a = sum f g, or None if unknown."""
        if "x" not in self.depends or "xi" not in self.depends:
            return [(self, None)] if "xi" not in self.depends else [(None, self)]
        return None

    def diff(self, dt: int = 0, dx=None, dxi=None) -> "Symbol":
        dx = _norm_index(dx, self.n)
        dxi = _norm_index(dxi, self.n)
        parent = self
        m, mu = self.order
        return FuncSymbol(
            lambda t, x, xi, _dt=dt, _dx=dx, _dxi=dxi: parent.derivative(t, x, xi, _dt, _dx, _dxi),
            n=self.n,
            order=(m - sum(dx), mu - sum(dxi)),
            real=self.real,
            depends=self.depends,
        )

    # -- algebra ---------------------------------------------------------
    def _combine(self, other, op: str) -> "Symbol":
        if isinstance(other, (int, float, complex, np.number)):
            other = constant(other, self.n)
        if isinstance(self, ExprSymbol) and isinstance(other, ExprSymbol):
            if op == "+":
                return ExprSymbol(self.expr + other.expr, self.n, _max_order(self, other))
            if op == "-":
                return ExprSymbol(self.expr - other.expr, self.n, _max_order(self, other))
            return ExprSymbol(self.expr * other.expr, self.n, _sum_order(self, other))
        a, b = self, other
        if op == "+":
            f = lambda t, x, xi: a(t, x, xi) + b(t, x, xi)
            order = _max_order(a, b)
        elif op == "-":
            f = lambda t, x, xi: a(t, x, xi) - b(t, x, xi)
            order = _max_order(a, b)
        else:
            f = lambda t, x, xi: a(t, x, xi) * b(t, x, xi)
            order = _sum_order(a, b)
        return FuncSymbol(f, n=self.n, order=order, real=a.real and b.real, depends=a.depends | b.depends)

    def __add__(self, other):
        return self._combine(other, "+")

    def __radd__(self, other):
        return self._combine(other, "+")

    def __sub__(self, other):
        return self._combine(other, "-")

    def __rsub__(self, other):
        return (-self)._combine(other, "+")

    def __mul__(self, other):
        return self._combine(other, "*")

    def __rmul__(self, other):
        return self._combine(other, "*")

    def __neg__(self):
        return self._combine(-1, "*")

    def with_order(self, order: Order) -> "Symbol":
        raise NotImplementedError


def _max_order(a: Symbol, b: Symbol) -> Order:
    if a.is_zero():
        return b.order
    if b.is_zero():
        return a.order
    return (max(a.order[0], b.order[0]), max(a.order[1], b.order[1]))


def _sum_order(a: Symbol, b: Symbol) -> Order:
    return (a.order[0] + b.order[0], a.order[1] + b.order[1])


class ExprSymbol(Symbol):
    """Symbol given by a closed-form expression; derivatives are exact."""

    def __init__(self, expr, n: int = 1, order: Order = (0.0, 0.0), real: bool | None = None,
                 params: Mapping[str, float] | None = None):
        if isinstance(expr, str):
            expr = parse_expression(expr, n, params)
        self.expr = sp.sympify(expr)
        self.n = n
        self.order = (float(order[0]), float(order[1]))
        self.xs, self.xis = space_symbols(n)
        self.real = (not self.expr.has(sp.I)) if real is None else bool(real)
        free = self.expr.free_symbols
        dep = set()
        if T_SYM in free:
            dep.add("t")
        if free & set(self.xs):
            dep.add("x")
        if free & set(self.xis):
            dep.add("xi")
        self.depends = frozenset(dep)
        self._funcs: dict[Key, Callable] = {}
        self._exprs: dict[Key, sp.Expr] = {}

    def __repr__(self) -> str:
        return f"ExprSymbol({self.expr}, order={self.order})"

    def with_order(self, order: Order) -> "ExprSymbol":
        return ExprSymbol(self.expr, self.n, order, self.real)

    def is_zero(self) -> bool:
        return self.expr == 0

    def derivative_expr(self, key: Key) -> sp.Expr:
        if key not in self._exprs:
            dt, dx, dxi = key
            e = self.expr
            if dt:
                e = sp.diff(e, T_SYM, dt)
            for sym, k in zip(self.xs, dx):
                if k:
                    e = sp.diff(e, sym, k)
            for sym, k in zip(self.xis, dxi):
                if k:
                    e = sp.diff(e, sym, k)
            self._exprs[key] = e
        return self._exprs[key]

    def _func(self, key: Key) -> Callable:
        if key not in self._funcs:
            e = self.derivative_expr(key)
            self._funcs[key] = sp.lambdify([T_SYM, *self.xs, *self.xis], e, modules="numpy")
        return self._funcs[key]

    def _derivative(self, t, x, xi, key):
        f = self._func(key)
        args = [t] + [x[..., i] for i in range(self.n)] + [xi[..., i] for i in range(self.n)]
        return np.asarray(f(*args))

    def diff(self, dt: int = 0, dx=None, dxi=None) -> "ExprSymbol":
        key = (int(dt), _norm_index(dx, self.n), _norm_index(dxi, self.n))
        m, mu = self.order
        return ExprSymbol(self.derivative_expr(key), self.n, (m - sum(key[1]), mu - sum(key[2])), self.real)

    def is_affine_in_xi(self) -> bool:
        for i in range(self.n):
            for j in range(self.n):
                if sp.simplify(sp.diff(self.expr, self.xis[i], self.xis[j])) != 0:
                    return False
        return True

    def separable_terms(self):
        expanded = sp.expand(self.expr, deep=False, mul=True, multinomial=True,
                             power_exp=False, power_base=False, log=False)
        out = []
        xs, xis = set(self.xs), set(self.xis)
        for term in sp.Add.make_args(expanded):
            xpart, rest = term.as_independent(*self.xis, as_Add=False)
            if rest.free_symbols & xs:
                return None
            fx = ExprSymbol(xpart, self.n, (0.0, 0.0), real=None)
            fxi = ExprSymbol(rest, self.n, (0.0, 0.0), real=None)
            out.append((fx, fxi))
        return out


class FuncSymbol(Symbol):
    """Symbol given by a callable ``f(t, x, xi)``; missing derivatives use central differences.

    Steps scale as 1e-4 <x> and 1e-4 <xi>, and 1e-4 (1 + |t|) in time.
    """

    def __init__(self, func: Callable, n: int = 1, order: Order = (0.0, 0.0), real: bool = True,
                 derivatives: Mapping[Key, Callable] | None = None, depends=None, max_fd_order: int = 4):
        self.func = func
        self.n = n
        self.order = (float(order[0]), float(order[1]))
        self.real = real
        self.derivs = dict(derivatives or {})
        self.depends = frozenset(depends) if depends is not None else frozenset({"t", "x", "xi"})
        self.max_fd_order = max_fd_order

    def with_order(self, order: Order) -> "FuncSymbol":
        return FuncSymbol(self.func, self.n, order, self.real, self.derivs, self.depends, self.max_fd_order)

    def _derivative(self, t, x, xi, key):
        dt, dx, dxi = key
        if dt == 0 and not any(dx) and not any(dxi):
            return np.asarray(self.func(t, x, xi))
        if key in self.derivs:
            return np.asarray(self.derivs[key](t, x, xi))
        if dt + sum(dx) + sum(dxi) > self.max_fd_order:
            raise DerivativeUnavailable(f"derivative {key} exceeds finite-difference order {self.max_fd_order}")
        # peel one derivative off and difference the rest
        if any(dxi):
            i = next(k for k, v in enumerate(dxi) if v)
            h = 1e-4 * jb(xi)
            e = np.zeros(self.n)
            e[i] = 1.0
            sub = (dt, dx, tuple(v - (k == i) for k, v in enumerate(dxi)))
            xp = xi + h[..., None] * e
            xm = xi - h[..., None] * e
            return (self._derivative(t, x, xp, sub) - self._derivative(t, x, xm, sub)) / (2 * h)
        if any(dx):
            i = next(k for k, v in enumerate(dx) if v)
            h = 1e-4 * jb(x)
            e = np.zeros(self.n)
            e[i] = 1.0
            sub = (dt, tuple(v - (k == i) for k, v in enumerate(dx)), dxi)
            xp = x + h[..., None] * e
            xm = x - h[..., None] * e
            return (self._derivative(t, xp, xi, sub) - self._derivative(t, xm, xi, sub)) / (2 * h)
        h = 1e-4 * (1.0 + np.abs(t))
        sub = (dt - 1, dx, dxi)
        return (self._derivative(t + h, x, xi, sub) - self._derivative(t - h, x, xi, sub)) / (2 * h)


def constant(c, n: int = 1) -> ExprSymbol:
    c = sp.nsimplify(c, rational=True) if isinstance(c, (int, float)) else sp.sympify(c)
    return ExprSymbol(c, n, (0.0, 0.0))


def zero(n: int = 1) -> ExprSymbol:
    return constant(0, n)


def symbol(src, n: int = 1, order: Order = (0.0, 0.0), params=None) -> Symbol:
    """Convenience constructor: strings and numbers become expression symbols."""
    if isinstance(src, Symbol):
        return src
    if isinstance(src, (int, float)):
        return constant(src, n).with_order(order)
    return ExprSymbol(src, n, order, params=params)


# ---------------------------------------------------------------------------
# lattices and seminorms


def axis_values(per_axis: int = 33, min_abs: float = 1e-2, max_abs: float = 1e3) -> np.ndarray:
    """Symmetric log-spaced sample values: 0 and +-k magnitudes, per_axis = 2k + 1 points."""
    k = (per_axis - 1) // 2
    mags = np.logspace(math.log10(min_abs), math.log10(max_abs), k)
    return np.concatenate([-mags[::-1], [0.0], mags])


@dataclass(frozen=True)
class Lattice:
    """Finite sample set of (t, x, xi) points used for sup-type estimates."""

    T: np.ndarray
    X: np.ndarray
    XI: np.ndarray
    inner_radius: float = 10.0

    @property
    def n(self) -> int:
        return self.X.shape[-1]

    @property
    def size(self) -> int:
        return self.X.shape[0]

    @cached_property
    def inner(self) -> np.ndarray:
        r = self.inner_radius
        return np.all(np.abs(self.X) <= r, axis=-1) & np.all(np.abs(self.XI) <= r, axis=-1)


def default_lattice(n: int = 1, per_axis: int | None = None, min_abs: float = 1e-2, max_abs: float = 1e3,
                    times: Sequence[float] = (0.0,)) -> Lattice:
    if per_axis is None:
        per_axis = 33 if n == 1 else 11
    vals = axis_values(per_axis, min_abs if n == 1 else max(min_abs, 0.1), max_abs)
    grids = np.meshgrid(*([vals] * (2 * n)), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=-1)
    X = pts[:, :n]
    XI = pts[:, n:]
    times = np.asarray(times, dtype=float)
    P = X.shape[0]
    return Lattice(np.repeat(times, P), np.tile(X, (len(times), 1)), np.tile(XI, (len(times), 1)))


def family_lattice(n: int = 1, T: float = 1.0, **kw) -> Lattice:
    """Lattice sampling the times 0, T/2, T, used for time-dependent families."""
    return default_lattice(n, times=(0.0, 0.5 * T, T), **kw)


@dataclass(frozen=True)
class SeminormEstimate:
    value: float
    inner_value: float
    growth: float
    consistent: bool

    def __float__(self) -> float:
        return self.value


def _growth(full: float, inner: float) -> float:
    if full <= 1e-300:
        return 1.0
    if inner <= 1e-300:
        return math.inf
    return full / inner


GROWTH_LIMIT = 10.0


def weighted_values(values: np.ndarray, lattice: Lattice, order: Order, dx=0, dxi=0) -> np.ndarray:
    m, mu = order
    return np.abs(values) * jb(lattice.X) ** (-m + dx) * jb(lattice.XI) ** (-mu + dxi)


def estimate_seminorm(a: Symbol, l: int = 0, lattice: Lattice | None = None,
                      order: Order | None = None) -> SeminormEstimate:
    """Sampled seminorm max_{|alpha+beta|<=l} sup |D_xi^alpha D_x^beta a| <x>^(-m+|beta|) <xi>^(-mu+|alpha|).

    ``growth`` compares the full-lattice sup with the sup over the inner box |x|, |xi| <= 10;
    a ratio of 10 or more marks the declared order as inconsistent.
    """
    lat = lattice or default_lattice(a.n)
    order = order or a.order
    full = 0.0
    inner = 0.0
    for total in range(l + 1):
        for beta in multi_indices(a.n, total):
            for alpha in multi_indices(a.n, total - sum(beta)):
                if sum(alpha) + sum(beta) != total:
                    continue
                vals = a.derivative(lat.T, lat.X, lat.XI, dx=beta, dxi=alpha)
                w = weighted_values(vals, lat, order, sum(beta), sum(alpha))
                full = max(full, float(np.max(w)))
                if np.any(lat.inner):
                    inner = max(inner, float(np.max(w[lat.inner])))
    g = _growth(full, inner)
    return SeminormEstimate(full, inner, g, g < GROWTH_LIMIT)


@dataclass(frozen=True)
class OrderCheck:
    value: float
    growth: float
    bound: float
    passed: bool

    def __bool__(self) -> bool:
        return self.passed


def order_check_values(values: np.ndarray, lattice: Lattice, order: Order = (0.0, 0.0),
                       bound: float = 1e3) -> OrderCheck:
    """Order test on sampled values: weighted sup <= bound and consistent growth."""
    w = weighted_values(values, lattice, order)
    full = float(np.max(w)) if w.size else 0.0
    inner = float(np.max(w[lattice.inner])) if np.any(lattice.inner) else 0.0
    g = _growth(full, inner)
    return OrderCheck(full, g, bound, bool(full <= bound and g < GROWTH_LIMIT))


def order_check(a: Symbol, order: Order = (0.0, 0.0), bound: float = 1e3,
                lattice: Lattice | None = None) -> OrderCheck:
    lat = lattice or default_lattice(a.n)
    return order_check_values(a(lat.T, lat.X, lat.XI), lat, order, bound)


# ---------------------------------------------------------------------------
# quantization


def quantize(a: Symbol, t: float, u: GridFunction, dense: bool = False) -> GridFunction:
    """Left quantization Op(a(t)) u on the grid.

    Symbols that split into a sum of products f(t, x) g(t, xi) use FFTs; anything else
    falls back to the dense oscillatory sum over the dual grid.
    """
    _require(u, SPATIAL)
    if isinstance(a, Symbol) and a.is_zero():
        return u.with_values(np.zeros_like(u.values))
    terms = None if dense else a.separable_terms()
    if terms is None:
        return _dense_quantize(a, t, u)
    g = u.grid
    X = g.points()
    XI = g.frequencies()
    zero_pts = np.zeros_like(X)
    U = None
    out = np.zeros(u.values.shape, dtype=complex)
    for fx, fxi in terms:
        if fxi is None:
            out += fx(t, X, zero_pts) * u.values
            continue
        if fx is None:
            fx_vals = 1.0
        else:
            fx_vals = fx(t, X, zero_pts)
        mult = fxi(t, zero_pts, XI)
        if "xi" not in fxi.depends:
            out += fx_vals * mult * u.values
            continue
        if U is None:
            U = fourier_forward(u)
        out += fx_vals * fourier_inverse(U.with_values(U.values * mult)).values
    return u.with_values(out)


def _dense_quantize(a: Symbol, t: float, u: GridFunction) -> GridFunction:
    g = u.grid
    P = g.size
    X = g.points().reshape(P, g.n)
    XI = g.frequencies().reshape(P, g.n)
    U = fourier_forward(u).values
    batch = U.shape[: U.ndim - g.n]
    Ub = U.reshape(-1, P)
    out = np.zeros((Ub.shape[0], P), dtype=complex)
    chunk = max(1, (1 << 21) // P)
    for i0 in range(0, P, chunk):
        xs = X[i0:i0 + chunk]
        A = a(t, xs[:, None, :], XI[None, :, :])
        K = A * np.exp(1j * (xs @ XI.T))
        out[:, i0:i0 + chunk] = Ub @ K.T
    out *= g.dual_cell_volume / (2 * math.pi) ** g.n
    return u.with_values(out.reshape(batch + g.shape))


# ---------------------------------------------------------------------------
# calculus


def compose_expand(a: Symbol, b: Symbol, K: int) -> Symbol:
    """Truncated composition c_K = sum_{|alpha|<=K} ((-i)^|alpha| / alpha!) d_xi^alpha a d_x^alpha b."""
    if K < 0:
        raise ValueError("K must be non-negative")
    order = _sum_order(a, b)
    idx = multi_indices(a.n, K)
    if isinstance(a, ExprSymbol) and isinstance(b, ExprSymbol):
        total = 0
        for al in idx:
            coef = (-sp.I) ** sum(al) / sp.prod([sp.factorial(k) for k in al])
            da = a.derivative_expr((0, _zero_index(a.n), al))
            db = b.derivative_expr((0, al, _zero_index(a.n)))
            total += coef * da * db
        return ExprSymbol(sp.expand(total), a.n, order)

    def c(t, x, xi):
        acc = 0
        for al in idx:
            coef = (-1j) ** sum(al) / math.prod(math.factorial(k) for k in al)
            acc = acc + coef * a.derivative(t, x, xi, dxi=al) * b.derivative(t, x, xi, dx=al)
        return acc

    return FuncSymbol(c, n=a.n, order=order, real=False, depends=a.depends | b.depends)


def poisson_bracket(a: Symbol, b: Symbol) -> Symbol:
    """The bracket {tau - a, tau - b} = d_t a - d_t b + a'_xi . b'_x - a'_x . b'_xi."""
    n = a.n
    if isinstance(a, ExprSymbol) and isinstance(b, ExprSymbol):
        e = sp.diff(a.expr, T_SYM) - sp.diff(b.expr, T_SYM)
        for xs, xis in zip(a.xs, a.xis):
            e += sp.diff(a.expr, xis) * sp.diff(b.expr, xs) - sp.diff(a.expr, xs) * sp.diff(b.expr, xis)
        return ExprSymbol(sp.simplify(e), n, (1.0, 1.0))

    unit = [tuple(int(k == i) for k in range(n)) for i in range(n)]

    def pb(t, x, xi):
        acc = a.derivative(t, x, xi, dt=1) - b.derivative(t, x, xi, dt=1)
        for e in unit:
            acc = acc + a.derivative(t, x, xi, dxi=e) * b.derivative(t, x, xi, dx=e)
            acc = acc - a.derivative(t, x, xi, dx=e) * b.derivative(t, x, xi, dxi=e)
        return acc

    return FuncSymbol(pb, n=n, order=(1.0, 1.0), real=a.real and b.real)


@dataclass(frozen=True)
class EllipticityReport:
    elliptic: bool
    margin: float

    def __bool__(self) -> bool:
        return self.elliptic


def is_elliptic(a: Symbol, R: float = 1.0, C_floor: float = 1e-3, lattice: Lattice | None = None,
                order: Order | None = None) -> EllipticityReport:
    """Sampled infimum of |a| <x>^-m <xi>^-mu over lattice points with |x| + |xi| >= R."""
    lat = lattice or default_lattice(a.n)
    m, mu = order or a.order
    mask = np.linalg.norm(lat.X, axis=-1) + np.linalg.norm(lat.XI, axis=-1) >= R
    vals = np.abs(a(lat.T[mask], lat.X[mask], lat.XI[mask])) * jb(lat.X[mask]) ** (-m) * jb(lat.XI[mask]) ** (-mu)
    margin = float(np.min(vals)) if vals.size else math.inf
    return EllipticityReport(bool(margin >= C_floor), margin)


# ---------------------------------------------------------------------------
# families and involutiveness


@dataclass
class SymbolFamily:
    """Ordered real symbols on [0, T] with optional involutiveness witnesses b_jk, d_jk.

    Witness keys are 0-based index pairs. A pair given as (k, j) is read through the
    symmetry b_jk = b_kj, d_jk = -d_kj; missing witnesses are zero.
    """

    members: list[Symbol]
    b: dict[tuple[int, int], Symbol] = field(default_factory=dict)
    d: dict[tuple[int, int], Symbol] = field(default_factory=dict)
    T: float = 1.0

    def __post_init__(self) -> None:
        self.members = list(self.members)
        if not self.members:
            raise ValueError("empty family")

    @property
    def n(self) -> int:
        return self.members[0].n

    def __len__(self) -> int:
        return len(self.members)

    def __getitem__(self, j: int) -> Symbol:
        return self.members[j]

    def has_witnesses(self) -> bool:
        return bool(self.b or self.d)

    def witness(self, j: int, k: int) -> tuple[Symbol, Symbol]:
        n = self.n
        if (j, k) in self.b or (j, k) in self.d:
            return self.b.get((j, k), zero(n)), self.d.get((j, k), zero(n))
        if (k, j) in self.b or (k, j) in self.d:
            return self.b.get((k, j), zero(n)), -self.d.get((k, j), zero(n))
        return zero(n), zero(n)


@dataclass(frozen=True)
class PairReport:
    j: int
    k: int
    residual: float
    b_check: OrderCheck
    d_check: OrderCheck
    passed: bool


@dataclass(frozen=True)
class InvolutivenessReport:
    involutive: bool
    mode: str
    pairs: list[PairReport]

    def __bool__(self) -> bool:
        return self.involutive

    @property
    def max_residual(self) -> float:
        return max((p.residual for p in self.pairs), default=0.0)


WITNESS_TOL = 1e-8
FIT_EPS = 1e-3
ORDER_BOUND = 1e3


def check_involutive(fam: SymbolFamily, mode: str = "witnessed", lattice: Lattice | None = None,
                     tol: float = WITNESS_TOL, eps: float = FIT_EPS, bound: float = ORDER_BOUND) -> InvolutivenessReport:
    """Check that every bracket {tau - a_j, tau - a_k} equals b_jk (a_j - a_k) + d_jk.

    ``witnessed`` verifies supplied b, d; ``fitted`` builds the regularised pointwise
    least-squares coefficients and subjects both to the order-(0,0) lattice test.
    """
    if mode not in ("witnessed", "fitted"):
        raise ValueError(f"unknown mode {mode!r}")
    if not all(a.real for a in fam.members):
        raise NotInvolutiveError("family members must be real-valued")
    lat = lattice or family_lattice(fam.n, fam.T)
    pairs = []
    for j, k in itertools.combinations(range(len(fam)), 2):
        aj, ak = fam[j], fam[k]
        P = poisson_bracket(aj, ak)(lat.T, lat.X, lat.XI)
        diff = aj(lat.T, lat.X, lat.XI) - ak(lat.T, lat.X, lat.XI)
        if mode == "witnessed":
            b, d = fam.witness(j, k)
            bv = b(lat.T, lat.X, lat.XI)
            dv = d(lat.T, lat.X, lat.XI)
            residual = float(np.max(np.abs(P - bv * diff - dv)))
        else:
            denom = diff ** 2 + eps ** 2 * jb(lat.X) ** 2 * jb(lat.XI) ** 2
            bv = P * diff / denom
            dv = P - bv * diff
            residual = 0.0
        bc = order_check_values(bv, lat, (0.0, 0.0), bound)
        dc = order_check_values(dv, lat, (0.0, 0.0), bound)
        ok = bc.passed and dc.passed and (mode == "fitted" or residual <= tol)
        pairs.append(PairReport(j, k, residual, bc, dc, ok))
    return InvolutivenessReport(all(p.passed for p in pairs), mode, pairs)
