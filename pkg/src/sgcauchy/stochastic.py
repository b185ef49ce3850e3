"""Gaussian noise white in time with a spectral measure in space, stochastic integrals and random-field solutions.

The spatial increment field over one time step is w(x) = sum_k W_k exp(i x.xi_k) plus atom modes
a cos(xi0.x) + b sin(xi0.x). The spectral increments W_k are centred Gaussians with
E|W_k|^2 = m_k dt, where m_k is the symmetrized density mass of the dual cell, and
W_{-k} = conj(W_k) holds exactly so every field is real. Each sample draws from its own
counter-based Philox stream keyed by (seed, stream + sample index).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .errors import InadmissibleNoiseError
from .fio import FioOperator, apply_fio
from .gridcore import FREQUENCY, SPATIAL, Grid, GridFunction, fourier_forward, fourier_inverse
from .phasecalc import EikonalPhase, PhaseFunction
from .symbols import Symbol, constant, symbol

A2_STEPS = (1e-2, 1e-3, 1e-4)

Sigma = float | Callable[[float, np.ndarray], np.ndarray]


# ---------------------------------------------------------------------------
# noise model


@dataclass(frozen=True)
class NoiseSpec:
    """Spectral measure on the dual grid (density per unit xi, centred ordering) plus atoms.

    An atom (xi0, mass) with xi0 != 0 is read as mass / 2 at each of +-xi0, which keeps the
    field real. ``infinite_tail`` declares that the analytic density is not integrable beyond
    the grid, forcing an infinite-mass verdict.
    """

    grid: Grid
    density: np.ndarray | None = None
    atoms: tuple[tuple[tuple[float, ...], float], ...] = ()
    dt: float = 0.01
    seed: int = 0
    stream: int = 0
    infinite_tail: bool = False

    def __post_init__(self) -> None:
        if self.density is not None:
            d = np.asarray(self.density, dtype=float)
            if d.shape != self.grid.shape:
                raise ValueError("density must live on the dual grid")
            object.__setattr__(self, "density", d)
        atoms = tuple((tuple(float(v) for v in np.atleast_1d(xi)), float(m)) for xi, m in self.atoms)
        for xi, _ in atoms:
            if len(xi) != self.grid.n:
                raise ValueError("atom location has the wrong dimension")
        object.__setattr__(self, "atoms", atoms)
        if self.dt <= 0:
            raise ValueError("time step must be positive")

    @classmethod
    def from_expression(cls, grid: Grid, expr: str, **kw) -> "NoiseSpec":
        """Density given as an expression in xi (xi1, xi2 for n = 2)."""
        sym = symbol(expr, n=grid.n)
        XI = grid.frequencies()
        vals = np.broadcast_to(np.real(sym(0.0, np.zeros_like(XI), XI)), grid.shape)
        return cls(grid, np.array(vals, dtype=float), **kw)

    @classmethod
    def atom(cls, grid: Grid, xi0, mass: float, **kw) -> "NoiseSpec":
        return cls(grid, None, ((tuple(np.atleast_1d(xi0)), mass),), **kw)

    def symmetric_masses(self) -> np.ndarray:
        """m_k = (mu_k + mu_{-k}) / 2 times the dual cell volume (zero without a density)."""
        if self.density is None:
            return np.zeros(self.grid.shape)
        d = self.density
        return 0.5 * (d + _negate(d)) * self.grid.dual_cell_volume

    def atom_points(self) -> list[tuple[np.ndarray, float]]:
        """Atoms as symmetric point masses."""
        out = []
        for xi, m in self.atoms:
            v = np.array(xi)
            if np.any(v != 0):
                out += [(v, m / 2), (-v, m / 2)]
            else:
                out.append((v, m))
        return out


def _negate(a: np.ndarray, axes: Sequence[int] | None = None) -> np.ndarray:
    """a(-xi) on the centred dual grid; the unpaired Nyquist index maps to itself."""
    n = a.ndim if axes is None else len(axes)
    axes = tuple(range(a.ndim - n, a.ndim)) if axes is None else tuple(axes)
    out = a
    for ax in axes:
        out = np.roll(np.flip(out, axis=ax), 1, axis=ax)
    return out


@dataclass(frozen=True)
class AdmissibilityReport:
    finite: bool
    mass: float


def check_noise_admissible(spec: NoiseSpec) -> AdmissibilityReport:
    """Total mass of the spectral measure on the grid and the finite-mass verdict."""
    mass = 0.0
    if spec.density is not None:
        if np.any(spec.density < 0) or not np.all(np.isfinite(spec.density)):
            raise InadmissibleNoiseError("spectral density must be finite and nonnegative")
        mass += float(np.sum(spec.density) * spec.grid.dual_cell_volume)
    for _, m in spec.atoms:
        if m < 0:
            raise InadmissibleNoiseError("atom masses must be nonnegative")
        mass += m
    finite = (not spec.infinite_tail) and math.isfinite(mass)
    return AdmissibilityReport(finite, mass if finite else math.inf)


# ---------------------------------------------------------------------------
# sampling


def stream_rng(seed: int, stream_id: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array([seed, stream_id], dtype=np.uint64)))


@dataclass(frozen=True)
class NoiseSample:
    """Increments over [times[i], times[i+1]): spectral coefficients and atom coefficients (a, b)."""

    spec: NoiseSpec
    times: np.ndarray
    increments: np.ndarray
    atom_coeffs: np.ndarray
    sample_id: int

    @property
    def steps(self) -> int:
        return len(self.times) - 1

    def fields(self) -> np.ndarray:
        """Real spatial increment fields, shape (steps, *grid)."""
        g = self.spec.grid
        scale = (2 * math.pi) ** g.n / g.dual_cell_volume
        w = fourier_inverse(GridFunction(g, self.increments * scale, FREQUENCY)).values.real
        if self.spec.atoms:
            X = g.points()
            for j, (xi, _) in enumerate(self.spec.atoms):
                arg = X @ np.array(xi)
                w = w + self.atom_coeffs[:, j, 0, None] * np.cos(arg) + self.atom_coeffs[:, j, 1, None] * np.sin(arg)
        return w

    def pair(self, phi: GridFunction | Callable[[float, np.ndarray], np.ndarray]) -> float:
        """Xi(phi) = sum_i int phi(t_i, x) w_i(x) dx for a test function (time-independent or callable)."""
        g = self.spec.grid
        w = self.fields()
        total = 0.0
        for i in range(self.steps):
            vals = phi.values if isinstance(phi, GridFunction) else phi(float(self.times[i]), g.points())
            total += float(np.real(np.sum(vals * w[i]))) * g.cell_volume
        return total


def _draw(spec: NoiseSpec, dts: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    g = spec.grid
    M = len(dts)
    z = rng.standard_normal((M,) + g.shape)
    zhat = fourier_forward(GridFunction(g, z, SPATIAL)).values / g.cell_volume
    zhat = 0.5 * (zhat + np.conj(_negate(zhat, axes=range(1, 1 + g.n))))
    m = spec.symmetric_masses()
    W = np.sqrt(m[None] * dts.reshape((M,) + (1,) * g.n) / g.size) * zhat
    ab = rng.standard_normal((M, len(spec.atoms), 2))
    if spec.atoms:
        masses = np.array([mm for _, mm in spec.atoms])
        ab = ab * np.sqrt(masses[None, :, None] * dts[:, None, None])
    return W, ab


def time_grid(spec: NoiseSpec, start: float, horizon: float) -> np.ndarray:
    steps = max(1, int(math.ceil(horizon / spec.dt - 1e-9)))
    return start + np.linspace(0.0, horizon, steps + 1)


def sample_noise(spec: NoiseSpec, horizon: float, count: int, start: float = 0.0,
                 first_id: int = 0) -> list[NoiseSample]:
    """Independent samples on [start, start + horizon]; the step is horizon / ceil(horizon / dt)."""
    report = check_noise_admissible(spec)
    if not report.finite:
        raise InadmissibleNoiseError("spectral measure has infinite mass")
    times = time_grid(spec, start, horizon)
    dts = np.diff(times)
    out = []
    for k in range(first_id, first_id + count):
        W, ab = _draw(spec, dts, stream_rng(spec.seed, spec.stream + k))
        out.append(NoiseSample(spec, times, W, ab, k))
    return out


# ---------------------------------------------------------------------------
# kernels


class KernelFamily(Protocol):
    """Lambda(t, s, x, y) known through its Fourier transform in y and its operator action."""

    def spectral_trace(self, t: float, s: float, x: np.ndarray, eta: np.ndarray) -> np.ndarray: ...

    def apply(self, t: float, s: float, g: GridFunction) -> GridFunction: ...


@dataclass(frozen=True)
class FioKernel:
    """Kernel of Op_phi(a) with phi = phase(t, s); its y-transform is exp(i phi(x, -eta)) a(x, -eta)."""

    phase: Callable[[float, float], PhaseFunction]
    amplitude: Symbol | None = None

    def _amp(self, n: int) -> Symbol:
        return self.amplitude if self.amplitude is not None else constant(1.0, n)

    def spectral_trace(self, t: float, s: float, x: np.ndarray, eta: np.ndarray) -> np.ndarray:
        ph = self.phase(t, s)
        X = np.asarray(x, dtype=float)[:, None, :]
        E = -np.asarray(eta, dtype=float)[None, :, :]
        vals = ph.evaluate(X, E)
        return np.exp(1j * vals.phi) * self._amp(ph.n)(s, X, E)

    def apply(self, t: float, s: float, g: GridFunction) -> GridFunction:
        ph = self.phase(t, s)
        return apply_fio(FioOperator(ph, self._amp(ph.n), time=s), g, fast=True)


def hamiltonian_kernel(a: Symbol | str, n: int = 1, amplitude: Symbol | None = None) -> FioKernel:
    """Kernel of the FIO whose phase solves the eikonal equation of ``a``."""
    sym = symbol(a, n=n)
    return FioKernel(lambda t, s: EikonalPhase(sym, t, s), amplitude)


def identity_kernel(n: int = 1, amplitude: Symbol | None = None) -> FioKernel:
    return hamiltonian_kernel(constant(0.0, n), n, amplitude)


def translation_kernel(c: float, n: int = 1) -> FioKernel:
    """phi = (x + c (t - s)) xi in one dimension (first axis in two)."""
    return hamiltonian_kernel(f"{float(c)!r}*{'xi' if n == 1 else 'xi1'}", n)


# ---------------------------------------------------------------------------
# stochastic integrals


def _sigma_values(sigma: Sigma, s: float, grid: Grid) -> np.ndarray:
    if callable(sigma):
        X = grid.points()
        return np.broadcast_to(np.asarray(sigma(s, X[..., 0] if grid.n == 1 else X)), grid.shape)
    return np.full(grid.shape, complex(sigma))


def total_variation(sigma: Sigma, s: float, grid: Grid) -> float:
    """|nu_s|_tv as the l1 mass of the normalized DFT of sigma(s, .) (sigma = 1 gives 1)."""
    vals = _sigma_values(sigma, s, grid)
    return float(np.sum(np.abs(np.fft.fftn(vals))) / grid.size)


def _as_points(x, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x.reshape(-1, 1) if n == 1 and x.ndim <= 1 else x.reshape(-1, n)


def _steps_until(times: np.ndarray, t: float) -> int:
    """Number of increments that end at or before t."""
    return int(np.searchsorted(times[1:], t + 1e-12 * max(1.0, abs(t)), side="right"))


def stochastic_integral(kernel: KernelFamily, sigma: Sigma, spec: NoiseSpec, samples: NoiseSample | Sequence[NoiseSample],
                        t: float, x) -> np.ndarray:
    """sum over steps and modes of F[Lambda(t, s_i, x, .) sigma(s_i, .)] against the increments.

    Returns shape (count, P) for P evaluation points. Only increments ending by ``t`` count.
    """
    single = isinstance(samples, NoiseSample)
    batch = [samples] if single else list(samples)
    if not batch:
        return np.zeros((0, 0), dtype=complex)
    if not check_noise_admissible(spec).finite:
        raise InadmissibleNoiseError("spectral measure has infinite mass")
    g = spec.grid
    n = g.n
    pts = _as_points(x, n)
    XI = g.frequencies().reshape(-1, n)
    times = batch[0].times
    steps = _steps_until(times, t)
    fields = np.stack([smp.fields()[:steps] for smp in batch])
    c = g.dual_cell_volume / (2 * math.pi) ** n
    out = np.zeros((len(batch), len(pts)), dtype=complex)
    for i in range(steps):
        s = float(times[i])
        sig = _sigma_values(sigma, s, g)
        if not np.any(sig):
            continue
        ghat = fourier_forward(GridFunction(g, fields[:, i] * sig, SPATIAL)).values
        gneg = _negate(ghat, axes=range(1, 1 + n)).reshape(len(batch), -1)
        K = kernel.spectral_trace(t, s, pts, XI)
        out += c * gneg @ K.T
    return out[0] if single else out


def isometry_norm(kernel: KernelFamily, sigma: Sigma, spec: NoiseSpec, t: float, x, start: float = 0.0) -> np.ndarray:
    """||Lambda(t, ., x, *) sigma||_0^2 per point: the exact variance of the discrete integral."""
    g = spec.grid
    n = g.n
    pts = _as_points(x, n)
    times = time_grid(spec, start, t - start)
    steps = _steps_until(times, t)
    XI = g.frequencies()
    X = g.points()
    m = spec.symmetric_masses().reshape(-1)
    c = g.dual_cell_volume / (2 * math.pi) ** n
    modes = np.exp(1j * np.einsum("...d,kd->k...", X, XI.reshape(-1, n)))
    atoms = []
    for xi, mass in spec.atoms:
        arg = X @ np.array(xi)
        atoms.append((mass, np.cos(arg), np.sin(arg)))
    total = np.zeros(len(pts))
    for i in range(steps):
        s = float(times[i])
        dt = float(times[i + 1] - times[i])
        sig = _sigma_values(sigma, s, g)
        if not np.any(sig):
            continue
        K = kernel.spectral_trace(t, s, pts, XI.reshape(-1, n))

        def respond(vals: np.ndarray) -> np.ndarray:
            ghat = fourier_forward(GridFunction(g, vals * sig, SPATIAL)).values
            gneg = _negate(ghat, axes=range(ghat.ndim - n, ghat.ndim)).reshape(ghat.shape[: ghat.ndim - n] + (-1,))
            return c * gneg @ K.T

        if np.any(m):
            r = respond(modes)
            total += dt * np.sum(m[:, None] * np.abs(r) ** 2, axis=0)
        for mass, cs, sn in atoms:
            total += dt * mass * (np.abs(respond(cs)) ** 2 + np.abs(respond(sn)) ** 2)
    return total


@dataclass(frozen=True)
class A1Report:
    finite: bool
    bound: float
    integrand: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))


def _probe_shifts(grid: Grid, probes: int) -> np.ndarray:
    n = grid.n
    dxi = [math.pi / L for L in grid.L]
    fracs = np.linspace(-0.5, 0.5, probes)
    per_axis = [fracs * d for d in dxi]
    mesh = np.meshgrid(*per_axis, indexing="ij")
    return np.stack(mesh, axis=-1).reshape(-1, n)


def _sup_trace(kernel: KernelFamily, spec: NoiseSpec, t: float, s: float, pts: np.ndarray, shifts: np.ndarray,
               diff_s: float | None = None) -> float:
    g = spec.grid
    n = g.n
    XI = g.frequencies().reshape(-1, n)
    m = spec.symmetric_masses().reshape(-1)
    apts = spec.atom_points()
    best = 0.0
    for eta in shifts:
        def trace(nodes):
            K = kernel.spectral_trace(t, s, pts, nodes + eta)
            if diff_s is not None:
                K = K - kernel.spectral_trace(t, diff_s, pts, nodes + eta)
            return np.abs(K) ** 2

        val = trace(XI) @ m if np.any(m) else np.zeros(len(pts))
        if apts:
            A = np.array([p for p, _ in apts])
            w = np.array([mm for _, mm in apts])
            val = val + trace(A) @ w
        best = max(best, float(np.max(val)))
    return best


def check_A1(kernel: KernelFamily, sigma: Sigma, spec: NoiseSpec, t: float, x, start: float = 0.0,
             probes: int = 5) -> A1Report:
    """int_0^t sup_eta int |F Lambda(t, s, x)(xi + eta)|^2 mu(dxi) |nu_s|_tv^2 ds on the noise time grid.

    The supremum runs over a probe set of sub-cell shifts of the dual grid; x may be a point set
    (the maximum is taken).
    """
    adm = check_noise_admissible(spec)
    g = spec.grid
    pts = _as_points(x, g.n)
    times = time_grid(spec, start, t - start)
    steps = _steps_until(times, t)
    shifts = _probe_shifts(g, probes)
    integrand = np.zeros(steps)
    for i in range(steps):
        s = float(times[i])
        tv = total_variation(sigma, s, g)
        if tv == 0:
            continue
        integrand[i] = _sup_trace(kernel, spec, t, s, pts, shifts) * tv ** 2
    bound = float(np.sum(integrand * np.diff(times)[:steps])) if adm.finite else math.inf
    return A1Report(adm.finite and math.isfinite(bound), bound, integrand)


@dataclass(frozen=True)
class A2Probe:
    steps: tuple[float, ...]
    omega: tuple[float, ...]
    decreasing: bool


def probe_A2(kernel: KernelFamily, sigma: Sigma, spec: NoiseSpec, t: float, x, start: float = 0.0,
             steps: Sequence[float] = A2_STEPS, probes: int = 3) -> A2Probe:
    """Modulus of continuity in s of the kernel transform, weighted as in the A1 integrand."""
    g = spec.grid
    pts = _as_points(x, g.n)
    times = time_grid(spec, start, t - start)
    nodes = times[: _steps_until(times, t)]
    shifts = _probe_shifts(g, probes)
    omegas = []
    for h in steps:
        acc = 0.0
        for i, s in enumerate(nodes):
            r = min(float(s) + h, t)
            tv = total_variation(sigma, float(s), g)
            if tv == 0 or r == s:
                continue
            acc += _sup_trace(kernel, spec, t, float(s), pts, shifts, diff_s=r) * tv ** 2 * float(times[i + 1] - times[i])
        omegas.append(acc)
    decreasing = all(b < a or a == 0 for a, b in zip(omegas, omegas[1:]))
    return A2Probe(tuple(float(h) for h in steps), tuple(omegas), decreasing)


# ---------------------------------------------------------------------------
# random-field solutions


@dataclass(frozen=True)
class StochasticForcing:
    """f = gamma + sigma * dXi with deterministic gamma(s) -> GridFunction and coefficient sigma."""

    spec: NoiseSpec
    sigma: Sigma = 1.0
    gamma: Callable[[float], GridFunction] | None = None


@dataclass(frozen=True)
class MCResult:
    mean: GridFunction
    variance: GridFunction
    deterministic: GridFunction
    stderr: GridFunction
    count: int
    samples: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))


def _is_zero_sigma(sigma: Sigma) -> bool:
    return not callable(sigma) and complex(sigma) == 0


def mc_solution(prob, forcing: StochasticForcing, t: float, count: int, nu_max: int = 2, panel: float | None = None,
                chunk: int = 256, keep_samples: bool = False) -> MCResult:
    """Monte Carlo random-field solution u = v0 + v1 + v2 of L u = gamma + sigma dXi.

    v0 + v1 is the deterministic solve with forcing gamma. The stochastic part is the Ito sum
    v2 = i sum_i [E(t, s_i) F(sigma(s_i) w_i)]_0 over the noise increments on [s, t].
    """
    from .propagator import PANEL, PropagatorPlan, solve_cauchy_mth, systemize

    spec = forcing.spec
    if not check_noise_admissible(spec).finite:
        raise InadmissibleNoiseError("spectral measure has infinite mass")
    grid = prob.data[0].grid
    if grid != spec.grid:
        raise ValueError("noise and problem grids differ")
    panel = PANEL if panel is None else panel
    det_prob = dataclasses.replace(prob, forcing=forcing.gamma)
    det = solve_cauchy_mth(det_prob, t, nu_max=nu_max, panel=panel)
    if _is_zero_sigma(forcing.sigma) or t == prob.s:
        zero = det.with_values(np.zeros(grid.shape))
        return MCResult(det, zero, det, zero, count, np.zeros((count if keep_samples else 0,) + grid.shape))
    for s in np.linspace(prob.s, t, 5):
        if not math.isfinite(total_variation(forcing.sigma, float(s), grid)):
            raise InadmissibleNoiseError("coefficient has infinite total variation")
    sysprob = systemize(dataclasses.replace(prob, forcing=None))
    plan = PropagatorPlan(sysprob.system, nu_max=nu_max, panel=panel)
    top = [i for i, w in enumerate(sysprob.words) if len(w) == prob.m - 1]
    v2 = np.empty((count,) + grid.shape, dtype=complex)
    for first in range(0, count, chunk):
        batch = sample_noise(spec, t - prob.s, min(chunk, count - first), start=prob.s, first_id=first)
        times = batch[0].times
        steps = _steps_until(times, t)
        fields = np.stack([smp.fields()[:steps] for smp in batch], axis=1)
        acc = np.zeros((len(batch),) + grid.shape, dtype=complex)
        for i in range(steps):
            s = float(times[i])
            sig = _sigma_values(forcing.sigma, s, grid)
            F = np.zeros((plan.N, len(batch)) + grid.shape, dtype=complex)
            F[top] = sig * fields[i]
            acc += fundamental_apply_batch(plan, t, s, GridFunction(grid, F, SPATIAL))
        v2[first: first + len(batch)] = 1j * acc
    mean_v2 = np.mean(v2, axis=0)
    var = np.var(v2, axis=0, ddof=1) if count > 1 else np.zeros(grid.shape)
    mean = det.with_values(det.values + mean_v2)
    return MCResult(mean, det.with_values(var), det, det.with_values(np.sqrt(var / max(count, 1))), count,
                    v2 if keep_samples else np.zeros(0))


def fundamental_apply_batch(plan, t: float, s: float, F: GridFunction) -> np.ndarray:
    """First component of E(t, s) F for F of shape (N, batch, *grid)."""
    from .propagator import fundamental_apply

    return fundamental_apply(plan, t, s, F).values[0]
