"""Fundamental solutions of diagonal first-order hyperbolic systems and m-th order Cauchy problems.

The system operator is L = D_t + Lambda + R with Lambda = diag(Op(lambda_j)) and R of order (0, 0).
With I_phi = diag(Op_{phi_j}(1)), phi_j the eikonal phase of the Hamiltonian -lambda_j, the
fundamental solution is the truncated series

    E(t, s) g = I_phi(t, s) g + int_s^t I_phi(t, th) sum_{nu <= nu_max} W_nu(th, s) g dth,
    W_1 = -i L I_phi,   W_{nu+1}(t, s) = int_s^t W_1(t, th) W_nu(th, s) dth,

realised matrix-free: only operator actions on grid functions are ever formed.
"""

from __future__ import annotations

import itertools
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import sympy as sp

from .errors import NotHyperbolicError, NotInvolutiveError
from .gridcore import (
    FREQUENCY,
    SPATIAL,
    GridFunction,
    _require,
    fourier_forward,
    fourier_inverse,
    jb,
    simpson_weights,
    time_nodes,
)
from .multiphase import fitted_coefficient
from .phasecalc import EikonalPhase
from .symbols import (
    ExprSymbol,
    FuncSymbol,
    InvolutivenessReport,
    Lattice,
    Symbol,
    SymbolFamily,
    check_involutive,
    compose_expand,
    constant,
    family_lattice,
    poisson_bracket,
    quantize,
    symbol,
    zero,
)

PANEL = 0.01
FD_STEP = 1e-4
CACHE_BYTES = 1 << 29
MATMUL_BYTES = 1 << 25
STRICT_FLOOR = 1e-6
COINCIDE_TOL = 1e-9
IMAG_TOL = 1e-9

STRICT = "strict"
CONSTANT_MULTIPLICITY = "constant-multiplicity"
INVOLUTIVE = "involutive"
NONE = "none"


# ---------------------------------------------------------------------------
# characteristic roots and hyperbolicity


_TAU = sp.Symbol("tau")


def _companion_roots(coeffs: np.ndarray) -> np.ndarray:
    """Roots of tau^m + c_1 tau^(m-1) + ... + c_m for stacked coefficients (..., m)."""
    m = coeffs.shape[-1]
    C = np.zeros(coeffs.shape[:-1] + (m, m), dtype=complex)
    C[..., 0, :] = -coeffs
    if m > 1:
        C[..., np.arange(1, m), np.arange(m - 1)] = 1.0
    return np.linalg.eigvals(C)


def _numeric_branch(coeffs: Sequence[Symbol], k: int) -> Symbol:
    n = coeffs[0].n

    def f(t, x, xi):
        vals = np.stack([np.broadcast_to(np.real(c(t, x, xi)), np.broadcast_shapes(
            np.shape(t), x.shape[:-1], xi.shape[:-1])) for c in coeffs], axis=-1)
        roots = np.sort(np.real(_companion_roots(vals)), axis=-1)[..., ::-1]
        return roots[..., k]

    depends = frozenset().union(*(c.depends for c in coeffs))
    return FuncSymbol(f, n=n, order=(1.0, 1.0), real=True, depends=depends)


def characteristic_roots(coeffs: Sequence[Symbol | str], lattice: Lattice | None = None, n: int = 1,
                         T: float = 1.0) -> SymbolFamily:
    """Real roots tau_1, ..., tau_m of L_m(tau) = tau^m + sum_j c_j tau^(m-j).

    Closed-form coefficients are factored symbolically, which keeps branches smooth through
    crossings; otherwise the companion-matrix roots are ordered by decreasing value.
    """
    cs = [symbol(c, n, (j + 1.0, j + 1.0)) for j, c in enumerate(coeffs)]
    m = len(cs)
    if not 1 <= m <= 4:
        raise ValueError("characteristic_roots supports 1 <= m <= 4")
    lat = lattice or family_lattice(n, T)
    vals = np.stack([np.broadcast_to(c(lat.T, lat.X, lat.XI), lat.T.shape) for c in cs], axis=-1)
    roots = _companion_roots(vals.astype(complex))
    w = jb(lat.X) * jb(lat.XI)
    imag = float(np.max(np.abs(roots.imag) / w[:, None]))
    # multiple roots split as sqrt(eps) under rounding; compare against that scale
    scale = np.max(np.abs(roots), axis=-1) + 1.0
    if np.any(np.abs(roots.imag) > IMAG_TOL * w[:, None] + 1e-6 * scale[:, None]):
        raise NotHyperbolicError(f"complex characteristic roots: max |Im tau| / <x><xi> = {imag:.3g}")
    members: list[Symbol] | None = None
    if all(isinstance(c, ExprSymbol) for c in cs):
        poly = _TAU ** m + sum(c.expr * _TAU ** (m - j - 1) for j, c in enumerate(cs))
        found = sp.roots(sp.Poly(sp.expand(poly), _TAU))
        if sum(found.values()) == m:
            exprs = [r for r, k in found.items() for _ in range(k)]
            cand = [ExprSymbol(e, n, (1.0, 1.0), real=True) for e in exprs]
            try:
                sample = np.stack([np.real_if_close(np.asarray(c(lat.T, lat.X, lat.XI), dtype=complex))
                                   for c in cand])
                ok = np.all(np.isfinite(sample)) and np.isrealobj(sample)
            except (TypeError, ValueError):
                ok = False
            if ok:
                ref = [float(np.real(c(0.0, np.ones(n), np.ones(n)))) for c in cand]
                order = sorted(range(m), key=lambda k: (-ref[k], str(exprs[k])))
                members = [cand[k] for k in order]
    if members is None:
        members = [_numeric_branch(cs, k) for k in range(m)]
    return SymbolFamily(members, T=T)


@dataclass(frozen=True)
class HyperbolicityReport:
    kind: str
    C: float
    groups: tuple[tuple[int, ...], ...]
    involutive: InvolutivenessReport | None = None


def classify_hyperbolicity(fam: SymbolFamily, lattice: Lattice | None = None) -> HyperbolicityReport:
    """Strongest of strict, constant multiplicity and involutive that holds on the lattice."""
    lat = lattice or family_lattice(fam.n, fam.T)
    m = len(fam)
    w = jb(lat.X) * jb(lat.XI)
    vals = np.stack([np.broadcast_to(a(lat.T, lat.X, lat.XI), w.shape) for a in fam.members])
    if m == 1:
        return HyperbolicityReport(STRICT, math.inf, ((0,),))
    sep = {(j, k): np.abs(vals[j] - vals[k]) / w for j, k in itertools.combinations(range(m), 2)}
    C = min(float(np.min(v)) for v in sep.values())
    if C > STRICT_FLOOR:
        return HyperbolicityReport(STRICT, C, tuple((j,) for j in range(m)))
    # group roots that coincide everywhere, then test separation between the groups
    parent = list(range(m))

    def find(j):
        while parent[j] != j:
            j = parent[j]
        return j

    for (j, k), v in sep.items():
        if float(np.max(v)) <= COINCIDE_TOL:
            parent[find(k)] = find(j)
    groups: dict[int, list[int]] = {}
    for j in range(m):
        groups.setdefault(find(j), []).append(j)
    glist = tuple(tuple(g) for g in groups.values())
    if len(glist) < m:
        reps = [g[0] for g in glist]
        Cg = min((float(np.min(sep[min(a, b), max(a, b)])) for a, b in itertools.combinations(reps, 2)),
                 default=math.inf)
        if Cg > STRICT_FLOOR:
            return HyperbolicityReport(CONSTANT_MULTIPLICITY, Cg, glist)
    mode = "witnessed" if fam.has_witnesses() else "fitted"
    rep = check_involutive(fam, mode, lattice)
    if rep.involutive:
        return HyperbolicityReport(INVOLUTIVE, C, glist, rep)
    return HyperbolicityReport(NONE, C, glist, rep)


# ---------------------------------------------------------------------------
# first-order systems


def _is_constant(a: Symbol) -> bool:
    return not ({"x", "xi"} & set(a.depends))


@dataclass
class FirstOrderSystem:
    """L = D_t + diag(Op(lambda_j)) + (Op(R_jk)); ``None`` entries of R are zero."""

    lambdas: list[Symbol]
    R: list[list[Symbol | None]] | None = None
    T: float = 1.0

    def __post_init__(self) -> None:
        self.lambdas = list(self.lambdas)
        N = len(self.lambdas)
        if N == 0:
            raise ValueError("empty system")
        if not all(lam.real for lam in self.lambdas):
            raise NotHyperbolicError("diagonal symbols must be real-valued")
        if self.R is None:
            self.R = [[None] * N for _ in range(N)]
        if len(self.R) != N or any(len(row) != N for row in self.R):
            raise ValueError("R must be an N x N matrix")
        self.R = [[None if (e is None or (isinstance(e, Symbol) and e.is_zero())) else symbol(e, self.n)
                   for e in row] for row in self.R]

    @property
    def N(self) -> int:
        return len(self.lambdas)

    @property
    def n(self) -> int:
        return self.lambdas[0].n


def _group_key(lam: Symbol):
    if isinstance(lam, ExprSymbol):
        return ("expr", sp.srepr(sp.expand(lam.expr)))
    return ("id", id(lam))


class _Group:
    """Components sharing one diagonal symbol, hence one phase family."""

    def __init__(self, lam: Symbol, comps: list[int]):
        self.lam = lam
        self.comps = comps
        self.a = -lam
        self.base = EikonalPhase(self.a, 0.0, 0.0)
        self.multiplier = self.base.method == "multiplier"
        self.autonomous = "t" not in lam.depends
        # I_phi commutes with Op(lambda) exactly when phi = x.xi + J(xi)
        self.needs_b0 = not self.multiplier


@dataclass
class PropagatorPlan:
    """A system together with its phases, truncation depth and quadrature panel."""

    system: FirstOrderSystem
    nu_max: int = 2
    panel: float = PANEL
    reduce: bool = True
    fd_step: float = FD_STEP
    cache_bytes: int = CACHE_BYTES
    groups: list[_Group] = field(init=False)

    def __post_init__(self) -> None:
        if self.nu_max < 1:
            raise ValueError("truncation depth must be >= 1")
        if self.panel <= 0:
            raise ValueError("panel must be positive")
        byk: dict = {}
        for j, lam in enumerate(self.system.lambdas):
            key = _group_key(lam) if self.reduce else ("comp", j)
            byk.setdefault(key, []).append(j)
        self.groups = [_Group(self.system.lambdas[c[0]], c) for c in byk.values()]
        self._cache: OrderedDict = OrderedDict()
        self._cached_bytes = 0

    @property
    def N(self) -> int:
        return self.system.N

    @property
    def decoupled(self) -> bool:
        """True when W_1 vanishes identically: no R and only multiplier phases."""
        no_r = all(e is None for row in self.system.R for e in row)
        return no_r and not any(g.needs_b0 for g in self.groups)

    def phase(self, j: int, t: float, s: float) -> EikonalPhase:
        for g in self.groups:
            if j in g.comps:
                return g.base.at(t, s)
        raise IndexError(j)

    # -- operator blocks -----------------------------------------------------
    def _key(self, gi: int, t: float, s: float):
        g = self.groups[gi]
        if g.autonomous:
            return (gi, round(t - s, 12))
        return (gi, round(t, 12), round(s, 12))

    def _store(self, key, value, nbytes: int) -> None:
        self._cache[key] = value
        self._cached_bytes += nbytes
        while self._cached_bytes > self.cache_bytes and len(self._cache) > 1:
            _, (_, nb) = self._cache.popitem(last=False)
            self._cached_bytes -= nb

    def _block(self, gi: int, t: float, s: float, grid):
        """Multiplier exp(iJ) on the frequency grid, or dense (K, K*A) kernel matrices."""
        key = self._key(gi, t, s) + (grid,)
        hit = self._cache.get(key)
        if hit is not None:
            self._cache.move_to_end(key)
            return hit[0]
        g = self.groups[gi]
        ph = g.base.at(t, s)
        if g.multiplier:
            XI = grid.frequencies()
            value = ("mult", np.exp(1j * ph.multiplier()(XI)))
            nbytes = value[1].nbytes
        else:
            n = grid.n
            X = grid.points().reshape(-1, n)
            XI = grid.frequencies().reshape(-1, n)
            vals = ph.evaluate(X[:, None, :], XI[None, :, :])
            K = np.exp(1j * vals.phi) * (grid.dual_cell_volume / (2 * math.pi) ** n)
            A = g.a(t, X[:, None, :], vals.dx)
            value = ("dense", K, K * A)
            nbytes = 2 * K.nbytes
        self._store(key, (value, nbytes), nbytes)
        return value

    def _apply_block(self, gi: int, t: float, s: float, Vhat: np.ndarray, grid, want_a: bool):
        """I(t, s) V and, for dense blocks, Op_phi(a) V from Fourier values (batch, *grid)."""
        blk = self._block(gi, t, s, grid)
        if blk[0] == "mult":
            out = fourier_inverse(GridFunction(grid, Vhat * blk[1], FREQUENCY)).values
            return out, None
        batch = Vhat.shape[: Vhat.ndim - grid.n]
        flat = Vhat.reshape(-1, grid.size)
        out = (flat @ blk[1].T).reshape(batch + grid.shape)
        outa = (flat @ blk[2].T).reshape(batch + grid.shape) if want_a else None
        return out, outa

    def clear_cache(self) -> None:
        self._cache.clear()
        self._cached_bytes = 0


def _fourier_values(U: np.ndarray, grid) -> np.ndarray:
    return fourier_forward(GridFunction(grid, U, SPATIAL)).values


def _buckets(g: _Group, t_out: np.ndarray, t_in: np.ndarray, I_idx: np.ndarray,
             L_idx: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Index pairs grouped by operator block: one time offset for autonomous symbols, else one pair."""
    if not g.autonomous:
        return [(I_idx[k: k + 1], L_idx[k: k + 1]) for k in range(len(I_idx))]
    offs = np.round(t_out[I_idx] - t_in[L_idx], 12)
    _, inv = np.unique(offs, return_inverse=True)
    order = np.argsort(inv, kind="stable")
    cuts = np.flatnonzero(np.diff(inv[order])) + 1
    return [(I_idx[part], L_idx[part]) for part in np.split(order, cuts)]


def _weighted_arcs(plan: PropagatorPlan, t_out: np.ndarray, t_in: np.ndarray, W: np.ndarray,
                   Vhat: np.ndarray, grid):
    """S0[i] = sum_l W[i, l] I(t_out[i], t_in[l]) V_l, and SA likewise with amplitude a = -lambda.

    Vhat has shape (len(t_in), N, *batch, *grid) in the frequency domain. Pairs sharing an
    operator block (same time offset for autonomous symbols) are applied in one batch; for
    multiplier phases the weighted sums stay in the frequency domain until one final inverse
    transform per output time.
    """
    N = plan.N
    shape = (len(t_out), N) + Vhat.shape[2:]
    S0 = np.zeros(shape, dtype=complex)
    SA = np.zeros(shape, dtype=complex)
    I_idx, L_idx = np.nonzero(W)
    for gi, g in enumerate(plan.groups):
        comps = np.array(g.comps)
        buckets = _buckets(g, t_out, t_in, I_idx, L_idx)
        if g.multiplier:
            S0[:, comps] += _multiplier_arcs(plan, gi, buckets, t_out, t_in, W, Vhat[:, comps], grid)
            continue
        acc0 = np.zeros((len(t_out), len(comps)) + Vhat.shape[2:], dtype=complex)
        accA = np.zeros_like(acc0) if g.needs_b0 else None
        for ii, ll in buckets:
            src = Vhat[np.ix_(ll, comps)]
            w = W[ii, ll].reshape((-1,) + (1,) * (src.ndim - 1))
            out, outa = plan._apply_block(gi, float(t_out[ii[0]]), float(t_in[ll[0]]), src, grid, g.needs_b0)
            # a bucket shares one time offset (or one pair), so each output row occurs once
            acc0[ii] += w * out
            if accA is not None:
                accA[ii] += w * outa
        S0[:, comps] += acc0
        if accA is not None:
            SA[:, comps] += accA
    return S0, SA


def _multiplier_arcs(plan: PropagatorPlan, gi: int, buckets: list, t_out: np.ndarray, t_in: np.ndarray,
                     W: np.ndarray, src: np.ndarray, grid) -> np.ndarray:
    """sum_l W[i, l] exp(i J(t_i, t_l; xi)) V_l as one matrix product per frequency, then one inverse FFT."""
    K, L = len(t_out), len(t_in)
    tail = src.shape[1:]
    Q = grid.size
    V = src.reshape(L, -1, Q)
    R = V.shape[1]
    factors = []
    for ii, ll in buckets:
        e = plan._block(gi, float(t_out[ii[0]]), float(t_in[ll[0]]), grid)[1].reshape(-1)
        factors.append((ii, ll, W[ii, ll], e))
    out = np.empty((K, R, Q), dtype=complex)
    chunk = max(1, MATMUL_BYTES // (16 * K * L))
    for q0 in range(0, Q, chunk):
        qs = slice(q0, min(Q, q0 + chunk))
        M = np.zeros((qs.stop - q0, K, L), dtype=complex)
        for ii, ll, w, e in factors:
            M[:, ii, ll] = e[qs, None] * w[None, :]
        out[:, :, qs] = np.matmul(M, np.ascontiguousarray(V[:, :, qs].transpose(2, 0, 1))).transpose(1, 2, 0)
    hat = out.reshape((K,) + tail)
    return fourier_inverse(GridFunction(grid, hat, FREQUENCY)).values


def _apply_R(plan: PropagatorPlan, t: float, S: np.ndarray, grid) -> np.ndarray:
    """sum_k Op(R_jk(t)) S_k for one time; S has shape (N, *grid)."""
    out = np.zeros_like(S)
    for j, row in enumerate(plan.system.R):
        for k, e in enumerate(row):
            if e is None:
                continue
            if _is_constant(e):
                out[j] += complex(np.asarray(e(t, np.zeros(grid.n), np.zeros(grid.n)))) * S[k]
            else:
                out[j] += quantize(e, t, GridFunction(grid, S[k], SPATIAL)).values
    return out


def _combine_W1(plan: PropagatorPlan, times: np.ndarray, S0: np.ndarray, SA: np.ndarray, grid) -> np.ndarray:
    """-i (D_t I + Lambda I + R I) from the block sums S0 = I V and SA = Op_phi(-lambda) V."""
    out = np.empty_like(S0)
    for i, t in enumerate(times):
        acc = _apply_R(plan, float(t), S0[i], grid)
        for g in plan.groups:
            if not g.needs_b0:
                continue
            for j in g.comps:
                lam_part = quantize(g.lam, float(t), GridFunction(grid, S0[i, j], SPATIAL)).values
                acc[j] += SA[i, j] + lam_part
        out[i] = -1j * acc
    return out


def _check_vector(plan: PropagatorPlan, u: GridFunction) -> None:
    _require(u, SPATIAL)
    n = u.grid.n
    if u.values.ndim < n + 1 or u.values.shape[0] != plan.N or u.values.shape[-n:] != u.grid.shape:
        raise ValueError(f"expected a vector grid function with {plan.N} components")


def build_W1(plan: PropagatorPlan, t: float, s: float, u: GridFunction, dt_mode: str = "eikonal") -> GridFunction:
    """W_1(t, s) u = -i L I_phi(t, s) u as an operator action.

    ``dt_mode="eikonal"`` uses D_t exp(i phi) = (d_t phi) exp(i phi) with d_t phi = -lambda(x, phi'_x);
    ``"difference"`` differentiates I_phi(t, s) u in t by centred differences.
    """
    _check_vector(plan, u)
    grid = u.grid
    U = fourier_forward(u).values[None]
    tt = np.array([float(t)])
    ss = np.array([float(s)])
    S0, SA = _weighted_arcs(plan, tt, ss, np.ones((1, 1)), U, grid)
    if dt_mode == "eikonal":
        return u.with_values(_combine_W1(plan, tt, S0, SA, grid)[0])
    if dt_mode != "difference":
        raise ValueError(f"unknown dt_mode {dt_mode!r}")
    h = plan.fd_step * (1.0 + abs(t))
    Sp, _ = _weighted_arcs(plan, tt + h, ss, np.ones((1, 1)), U, grid)
    Sm, _ = _weighted_arcs(plan, tt - h, ss, np.ones((1, 1)), U, grid)
    acc = -1j * (Sp[0] - Sm[0]) / (2 * h)
    acc += _apply_R(plan, float(t), S0[0], grid)
    for j, lam in enumerate(plan.system.lambdas):
        acc[j] += quantize(lam, float(t), GridFunction(grid, S0[0, j], SPATIAL)).values
    return u.with_values(-1j * acc)


def _simpson_table(K: int, h: float) -> np.ndarray:
    W = np.zeros((K, K))
    for i in range(1, K):
        W[i, : i + 1] = simpson_weights(i, h)
    return W


def fundamental_apply(plan: PropagatorPlan, t: float, s: float, g: GridFunction) -> GridFunction:
    """E(t, s) g with the W_nu recursion truncated at plan.nu_max; g has shape (N, *batch, *grid)."""
    _check_vector(plan, g)
    if t == s:
        return g.with_values(np.array(g.values, dtype=complex))
    grid = g.grid
    theta = time_nodes(s, t, plan.panel)
    K = len(theta)
    h = float(theta[1] - theta[0])
    G = fourier_forward(g).values
    src = np.array([float(s)])
    if plan.decoupled:
        head, _ = _weighted_arcs(plan, np.array([float(t)]), src, np.ones((1, 1)), G[None], grid)
        return g.with_values(head[0])
    S0, SA = _weighted_arcs(plan, theta, src, np.ones((K, 1)), G[None], grid)
    V = _combine_W1(plan, theta, S0, SA, grid)
    total = V.copy()
    table = _simpson_table(K, h)
    for _ in range(2, plan.nu_max + 1):
        S0, SA = _weighted_arcs(plan, theta, theta, table, _fourier_values(V, grid), grid)
        V = _combine_W1(plan, theta, S0, SA, grid)
        total += V
    tt = np.array([float(t)])
    head, _ = _weighted_arcs(plan, tt, src, np.ones((1, 1)), G[None], grid)
    tail, _ = _weighted_arcs(plan, tt, theta, simpson_weights(K - 1, h)[None], _fourier_values(total, grid), grid)
    return g.with_values(head[0] + tail[0])


Forcing = Callable[[float], GridFunction]


def duhamel_solve(plan: PropagatorPlan, s: float, G: GridFunction, F: Forcing | None, t: float) -> GridFunction:
    """U(t) = E(t, s) G + i int_s^t E(t, sigma) F(sigma) dsigma (Simpson in sigma)."""
    U = fundamental_apply(plan, t, s, G)
    if F is None or t == s:
        return U
    sig = time_nodes(s, t, plan.panel)
    w = simpson_weights(len(sig) - 1, float(sig[1] - sig[0]))
    acc = np.zeros_like(U.values)
    for sk, wk in zip(sig, w):
        Fk = F(float(sk))
        _check_vector(plan, Fk)
        acc += wk * fundamental_apply(plan, t, float(sk), Fk).values
    return U.with_values(U.values + 1j * acc)


# ---------------------------------------------------------------------------
# m-th order operators


Word = tuple[int, ...]


def system_size(m: int) -> int:
    """N = sum_{j<m} m! / (m - j)!."""
    return sum(math.factorial(m) // math.factorial(m - j) for j in range(m))


def index_words(m: int) -> list[Word]:
    """Ordered tuples of distinct indices in 1..m of length < m, shortest first."""
    words: list[Word] = [()]
    for k in range(1, m):
        words += list(itertools.permutations(range(1, m + 1), k))
    return words


@dataclass
class MthOrderProblem:
    """L u = f with L = Gamma_1 ... Gamma_m + sum_beta Op(p_beta) Gamma_beta, Gamma_j = D_t - Op(tau_j).

    ``levi`` maps increasing index tuples (1-based, length < m) to the order-(0, 0) coefficients
    p_beta; the empty tuple adds a zeroth-order term. ``coefficients`` (c_1, ..., c_m), when
    given, are the principal coefficients of L_m(tau) = tau^m + sum c_j tau^(m-j) and are
    checked against the roots. Data are g_k = D_t^k u(s) with D_t = -i d_t.
    """

    m: int
    roots: SymbolFamily
    data: list[GridFunction]
    s: float = 0.0
    forcing: Callable[[float], GridFunction] | None = None
    levi: Mapping[Word, Symbol] = field(default_factory=dict)
    coefficients: list[Symbol] | None = None

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ValueError("order must be positive")
        if len(self.roots) != self.m:
            raise ValueError(f"expected {self.m} characteristic roots, got {len(self.roots)}")
        if len(self.data) != self.m:
            raise ValueError(f"expected {self.m} Cauchy data, got {len(self.data)}")
        for key in self.levi:
            if tuple(sorted(key)) != tuple(key) or len(set(key)) != len(key) or len(key) >= self.m \
                    or any(not 1 <= k <= self.m for k in key):
                raise ValueError(f"Levi coefficient index {key!r} is not an increasing tuple of length < m")
        if not all(a.real for a in self.roots.members):
            raise NotHyperbolicError("characteristic roots must be real-valued")
        if self.coefficients is not None:
            self._check_factorisation()

    @property
    def N(self) -> int:
        return system_size(self.m)

    @property
    def n(self) -> int:
        return self.roots.n

    def _check_factorisation(self, tol: float = 1e-8) -> None:
        lat = family_lattice(self.n, self.roots.T)
        taus = np.stack([np.broadcast_to(a(lat.T, lat.X, lat.XI), lat.T.shape) for a in self.roots.members])
        w = jb(lat.X) * jb(lat.XI)
        for j, c in enumerate(self.coefficients, start=1):
            e = sum(np.prod(taus[list(idx)], axis=0) for idx in itertools.combinations(range(self.m), j))
            cj = symbol(c, self.n)(lat.T, lat.X, lat.XI)
            err = float(np.max(np.abs(cj - (-1) ** j * e) / w ** j))
            if err > tol:
                raise NotHyperbolicError(f"coefficient c_{j} does not match the roots (error {err:.3g})")


def _gamma_index(alpha: Word, m: int) -> int:
    rest = [j for j in range(1, m + 1) if j not in alpha]
    return max(rest)


class _WordAlgebra:
    """First-order symbol calculus for words in Gamma_j = D_t - Op(tau_j)."""

    def __init__(self, fam: SymbolFamily):
        self.fam = fam
        self.n = fam.n
        self.m = len(fam)
        fitted = not fam.has_witnesses()
        self.swap: dict[tuple[int, int], tuple[Symbol, Symbol]] = {}
        for a, b in itertools.combinations(range(1, self.m + 1), 2):
            ta, tb = fam[a - 1], fam[b - 1]
            bab = fitted_coefficient(ta, tb) if fitted else fam.witness(a - 1, b - 1)[0]
            bracket = poisson_bracket(ta, tb)
            if isinstance(bracket, ExprSymbol) and bracket.is_zero() and fitted:
                bab = zero(self.n)
            qb = constant(sp.I, self.n) * bab
            if isinstance(bracket, ExprSymbol) and bracket.is_zero() and qb.is_zero():
                r = zero(self.n)
            else:
                r = constant(sp.I, self.n) * bracket - compose_expand(qb, ta - tb, 1)
            self.swap[(b, a)] = (qb, r)

    def commutator(self, c: int, q: Symbol) -> Symbol:
        """Symbol of [Gamma_c, Op(q)] = Op(D_t q) - [Op(tau_c), Op(q)] to first order."""
        if isinstance(q, ExprSymbol) and not q.depends:
            return zero(self.n)
        tau = self.fam[c - 1]
        out = constant(-sp.I, self.n) * q.diff(dt=1)
        for i in range(self.n):
            e = tuple(int(k == i) for k in range(self.n))
            out = out + constant(sp.I, self.n) * (tau.diff(dxi=e) * q.diff(dx=e) - q.diff(dxi=e) * tau.diff(dx=e))
        return out

    def left_mult(self, prefix: Word, q: Symbol, word: Word) -> list[tuple[Symbol, Word]]:
        """Gamma_prefix Op(q) Gamma_word as a sum of Op(coefficient) Gamma_word'."""
        if not prefix:
            return [] if q.is_zero() else [(q, word)]
        c = prefix[-1]
        out = self.left_mult(prefix[:-1], q, (c,) + word)
        comm = self.commutator(c, q)
        if not comm.is_zero():
            out += self.left_mult(prefix[:-1], comm, word)
        return out

    def expand(self, word: Word) -> list[tuple[Symbol, Word]]:
        """Reorder a full-length word to 1..m; shorter words are left as they are."""
        if len(word) < self.m or list(word) == sorted(word):
            return [(constant(1, self.n), word)]
        i = next(k for k in range(len(word) - 1) if word[k] > word[k + 1])
        b, a = word[i], word[i + 1]
        pre, suf = word[:i], word[i + 2:]
        qb, r = self.swap[(b, a)]
        out = self.expand(pre + (a, b) + suf)
        out += self.left_mult(pre, qb, (b,) + suf)
        out += self.left_mult(pre, -qb, (a,) + suf)
        out += self.left_mult(pre, r, suf)
        return out

    def coupling(self, word: Word) -> dict[Word, Symbol]:
        """q^word_beta with Gamma_word = Gamma_1 ... Gamma_m + sum_beta Op(q_beta) Gamma_beta."""
        full = tuple(range(1, self.m + 1))
        out: dict[Word, Symbol] = {}
        for coef, w in self.expand(word):
            if w == full:
                continue
            out[w] = out[w] + coef if w in out else coef
        clean = {}
        for w, c in out.items():
            if isinstance(c, ExprSymbol):
                c = ExprSymbol(sp.simplify(c.expr), self.n, (0.0, 0.0))
            else:
                c = c.with_order((0.0, 0.0))
            if not c.is_zero():
                clean[w] = c
        return clean


@dataclass
class SystemizedProblem:
    system: FirstOrderSystem
    words: list[Word]
    data: GridFunction
    forcing: Callable[[float], GridFunction] | None
    s: float
    couplings: dict[Word, dict[Word, Symbol]]

    @property
    def N(self) -> int:
        return self.system.N


def lift_data(prob: MthOrderProblem, word: Word) -> GridFunction:
    """G_alpha = (Gamma_alpha u)(s) from the jet g_k = D_t^k u(s)."""
    jet = [GridFunction(g.grid, np.asarray(g.values, dtype=complex), SPATIAL) for g in prob.data]
    for c in reversed(word):
        tau = prob.roots[c - 1]
        new = []
        for k in range(len(jet) - 1):
            acc = jet[k + 1].values.copy()
            for l in range(k + 1):
                if l and "t" not in tau.depends:
                    break
                sym = tau if l == 0 else tau.diff(dt=l)
                acc -= math.comb(k, l) * (-1j) ** l * quantize(sym, prob.s, jet[k - l]).values
            new.append(jet[0].with_values(acc))
        jet = new
    return jet[0]


def systemize(prob: MthOrderProblem, third_order: bool = True, lattice: Lattice | None = None) -> SystemizedProblem:
    """Reduce L u = f to a diagonal first-order system for U = (Gamma_alpha u)_alpha."""
    m = prob.m
    if m > 3 or (m == 3 and not third_order):
        raise ValueError(f"systemization for m = {m} is not supported")
    fam = prob.roots
    if m > 1:
        mode = "witnessed" if fam.has_witnesses() else "fitted"
        rep = check_involutive(fam, mode, lattice)
        if not rep.involutive:
            raise NotInvolutiveError("characteristic roots are not involutive")
    words = index_words(m)
    pos = {w: i for i, w in enumerate(words)}
    N = len(words)
    n = prob.n
    alg = _WordAlgebra(fam)
    lambdas: list[Symbol] = []
    R: list[list[Symbol | None]] = [[None] * N for _ in range(N)]
    couplings: dict[Word, dict[Word, Symbol]] = {}
    for i, alpha in enumerate(words):
        j = _gamma_index(alpha, m)
        lambdas.append(-fam[j - 1])
        if len(alpha) <= m - 2:
            R[i][pos[(j,) + alpha]] = constant(-1, n)
            continue
        q = alg.coupling((j,) + alpha)
        couplings[alpha] = q
        for beta, p in prob.levi.items():
            R[i][pos[beta]] = p if R[i][pos[beta]] is None else R[i][pos[beta]] + p
        for beta, coef in q.items():
            R[i][pos[beta]] = -coef if R[i][pos[beta]] is None else R[i][pos[beta]] - coef
    system = FirstOrderSystem(lambdas, R, fam.T)
    G = np.stack([lift_data(prob, w).values for w in words])
    grid = prob.data[0].grid
    top = [i for i, w in enumerate(words) if len(w) == m - 1]

    forcing = None
    if prob.forcing is not None:
        def forcing(sigma: float) -> GridFunction:
            f = prob.forcing(sigma)
            out = np.zeros((N,) + grid.shape, dtype=complex)
            out[top] = f.values
            return GridFunction(grid, out, SPATIAL)

    return SystemizedProblem(system, words, GridFunction(grid, G, SPATIAL), forcing, prob.s, couplings)


def solve_cauchy_mth(prob: MthOrderProblem, t: float, nu_max: int = 2, panel: float = PANEL,
                     full: bool = False):
    """u(t) for L u = f with the Cauchy data of ``prob``; ``full=True`` also returns U and the system."""
    sysprob = systemize(prob)
    plan = PropagatorPlan(sysprob.system, nu_max=nu_max, panel=panel)
    U = duhamel_solve(plan, prob.s, sysprob.data, sysprob.forcing, t)
    u = U.with_values(U.values[0])
    if full:
        return u, U, sysprob
    return u
