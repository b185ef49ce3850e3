"""Command line runs: ``sgcauchy {solve,wavefront,stochastic,verify} --config run.toml``.

Exit codes: 0 success, 1 verification failure, 2 configuration error, 3 numerical failure.
Every run writes ``manifest.json`` with the resolved configuration and output checksums; the
manifest carries no timestamps so identical inputs give identical bytes.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

from . import __version__
from .errors import ConfigError, NumericalError, SGError
from .gridcore import (
    FREQUENCY,
    Grid,
    GridFunction,
    fourier_forward,
    fourier_inverse,
    l2_norm,
    read_sgpr,
    write_csv_slice,
    write_sgpr,
)

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
SUBCOMMANDS = ("solve", "wavefront", "stochastic", "verify")
SHIPPED_CONFIG = "transport.toml"
ISOMETRY_SAMPLES = 10_000

DEFAULT_TOLERANCES = {
    "eikonal_transport": 1e-8,
    "eikonal_dilation": 1e-8,
    "fio_translation": 1e-6,
    "fio_adjoint": 1e-8,
    "identity_at_equal_times": 0.0,
    "problem_oracle": 1e-6,
    "noise_mass": 0.02,
    "stochastic_isometry": 0.05,
    "wavefront_schwartz": 0.0,
}


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ProblemConfig:
    order: int
    coefficients: list[str] | None
    roots: list[str] | None
    data: list[str]
    levi: dict[tuple[int, ...], str]
    forcing: str | None
    s: float


@dataclass(frozen=True)
class SolverConfig:
    t: float
    nu_max: int = 2
    panel: float = 0.01


@dataclass(frozen=True)
class AnalysisConfig:
    wavefront: bool = False
    kinds: tuple[int, ...] = (1,)
    orders: tuple[float, float] = (0.0, 1.0)
    arcs: str = "all"
    samples: int = 9


@dataclass(frozen=True)
class StochasticConfig:
    density: str | None
    atoms: list[tuple[tuple[float, ...], float]]
    dt: float
    sigma: str
    gamma: str | None
    count: int
    chunk: int


@dataclass(frozen=True)
class RunConfig:
    raw: dict
    grid: Grid | None
    problem: ProblemConfig | None
    solver: SolverConfig | None
    analysis: AnalysisConfig
    stochastic: StochasticConfig | None
    out: Path
    seed: int
    threads: int | None
    tolerances: dict[str, float] = field(default_factory=dict)


def _get(table: dict, key: str, where: str, kind=None, default: Any = ConfigError):
    if key not in table:
        if default is ConfigError:
            raise ConfigError(f"missing key '{where}.{key}'")
        return default
    val = table[key]
    if kind is not None and not isinstance(val, kind):
        raise ConfigError(f"key '{where}.{key}' has the wrong type")
    return val


def _section(raw: dict, name: str, required: bool) -> dict | None:
    if name not in raw:
        if required:
            raise ConfigError(f"missing section [{name}]")
        return None
    sec = raw[name]
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    return sec


def _per_axis(val, n: int | None, key: str, cast) -> tuple:
    vals = list(val) if isinstance(val, (list, tuple)) else [val]
    if n is not None and len(vals) == 1:
        vals = vals * n
    try:
        return tuple(cast(v) for v in vals)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"key '{key}' is malformed") from exc


def _parse_grid(sec: dict) -> Grid:
    n = int(_get(sec, "n", "grid", default=1))
    L = _per_axis(_get(sec, "L", "grid"), n, "grid.L", float)
    N = _per_axis(_get(sec, "N", "grid"), n, "grid.N", int)
    try:
        return Grid(L, N)
    except ValueError as exc:
        raise ConfigError(f"invalid [grid]: {exc}") from exc


def _parse_levi(table: dict) -> dict[tuple[int, ...], str]:
    out = {}
    for k, v in table.items():
        key = tuple(int(p) for p in str(k).split(",") if p.strip())
        out[key] = str(v)
    return out


def _parse_problem(sec: dict) -> ProblemConfig:
    order = int(_get(sec, "order", "problem"))
    coeffs = sec.get("coefficients")
    roots = sec.get("roots")
    if coeffs is None and roots is None:
        raise ConfigError("missing key 'problem.coefficients' (or 'problem.roots')")
    data = [str(d) for d in _get(sec, "data", "problem", list)]
    if len(data) != order:
        raise ConfigError(f"key 'problem.data' needs {order} entries")
    for d in data:
        if d.startswith("file:") and not Path(d[5:]).is_file():
            raise ConfigError(f"key 'problem.data' references a missing file {d[5:]}")
    return ProblemConfig(order, [str(c) for c in coeffs] if coeffs is not None else None,
                         [str(r) for r in roots] if roots is not None else None, data,
                         _parse_levi(sec.get("levi", {})), sec.get("forcing"), float(sec.get("s", 0.0)))


def _parse_stochastic(sec: dict) -> StochasticConfig:
    atoms = []
    for a in sec.get("atoms", []):
        if not isinstance(a, list) or len(a) != 2:
            raise ConfigError("key 'stochastic.atoms' entries must be [xi, mass]")
        atoms.append((tuple(np.atleast_1d(np.asarray(a[0], dtype=float)).tolist()), float(a[1])))
    density = sec.get("density")
    if density is None and not atoms:
        raise ConfigError("missing key 'stochastic.density' (or 'stochastic.atoms')")
    return StochasticConfig(density, atoms, float(sec.get("dt", 0.05)), str(sec.get("sigma", "1")),
                            sec.get("gamma"), int(sec.get("count", 200)), int(sec.get("chunk", 256)))


def resolve_config(raw: dict, subcommand: str, out: str | None = None, seed: int | None = None,
                   threads: int | None = None) -> RunConfig:
    """Validate the sections a subcommand needs and fill defaults."""
    if subcommand not in SUBCOMMANDS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    needs_problem = subcommand in ("solve", "wavefront", "stochastic")
    grid_sec = _section(raw, "grid", required=True)
    grid = _parse_grid(grid_sec)
    prob_sec = _section(raw, "problem", required=needs_problem)
    problem = _parse_problem(prob_sec) if prob_sec is not None else None
    solver_sec = _section(raw, "solver", required=needs_problem)
    solver = None
    if solver_sec is not None:
        t = float(_get(solver_sec, "t", "solver"))
        panel = float(solver_sec.get("panel", 0.01))
        if "steps" in solver_sec:
            s0 = problem.s if problem is not None else 0.0
            panel = abs(t - s0) / max(int(solver_sec["steps"]), 1)
        solver = SolverConfig(t, int(solver_sec.get("nu_max", 2)), panel)
    an = _section(raw, "analysis", required=False) or {}
    analysis = AnalysisConfig(bool(an.get("wavefront", subcommand == "wavefront")),
                              tuple(int(k) for k in an.get("kinds", [1])),
                              _per_axis(an.get("orders", [0.0, 1.0]), None, "analysis.orders", float),
                              str(an.get("arcs", "all")), int(an.get("samples", 9)))
    if len(analysis.orders) != 2:
        raise ConfigError("key 'analysis.orders' needs two entries")
    st_sec = _section(raw, "stochastic", required=subcommand == "stochastic")
    stochastic = _parse_stochastic(st_sec) if st_sec is not None else None
    ver = _section(raw, "verify", required=False) or {}
    tol = dict(DEFAULT_TOLERANCES)
    for k, v in ver.get("tolerances", {}).items():
        if k not in tol:
            raise ConfigError(f"unknown key 'verify.tolerances.{k}'")
        tol[k] = float(v)
    env_threads = os.environ.get("SGPR_THREADS")
    thr = threads if threads is not None else raw.get("threads", int(env_threads) if env_threads else None)
    return RunConfig(raw, grid, problem, solver, analysis, stochastic,
                     Path(out if out is not None else raw.get("out", "sgcauchy-out")),
                     int(seed if seed is not None else raw.get("seed", 0)), thr, tol)


def load_config(path: str | Path | None) -> dict:
    if path is None:
        text = resources.files("sgcauchy").joinpath("configs", SHIPPED_CONFIG).read_text(encoding="utf-8")
    else:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from exc


# ---------------------------------------------------------------------------
# builders


def _spatial(grid: Grid, expr: str, t: float = 0.0) -> GridFunction:
    """Sample an expression in x (x1, x2), or load ``file:path.sgpr``."""
    from .symbols import symbol

    if expr.startswith("file:"):
        f = read_sgpr(expr[5:])
        if f.grid != grid:
            raise ConfigError(f"data file {expr[5:]} was written on a different grid")
        return f

    try:
        sym = symbol(expr, n=grid.n)
    except SGError as exc:
        raise ConfigError(f"cannot parse expression {expr!r}: {exc}") from exc
    X = grid.points()
    vals = sym(t, X, np.zeros_like(X))
    return grid.spatial(np.broadcast_to(np.asarray(vals, dtype=complex), grid.shape).copy())


def build_problem(cfg: RunConfig):
    from .propagator import MthOrderProblem, characteristic_roots
    from .symbols import SymbolFamily, symbol

    p = cfg.problem
    grid = cfg.grid
    try:
        if p.roots is not None:
            fam = SymbolFamily([symbol(r, n=grid.n) for r in p.roots])
        else:
            fam = characteristic_roots(p.coefficients, n=grid.n)
        coeffs = [symbol(c, n=grid.n) for c in p.coefficients] if p.coefficients is not None else None
        levi = {k: symbol(v, n=grid.n) for k, v in p.levi.items()}
    except SGError as exc:
        raise ConfigError(f"invalid [problem]: {exc}") from exc
    data = [_spatial(grid, d) for d in p.data]
    forcing = None
    if p.forcing is not None:
        expr = str(p.forcing)
        forcing = lambda s: _spatial(grid, expr, s)  # noqa: E731
    try:
        return MthOrderProblem(p.order, fam, data, p.s, forcing, levi, coeffs)
    except ValueError as exc:
        raise ConfigError(f"invalid [problem]: {exc}") from exc


# ---------------------------------------------------------------------------
# outputs


class Outputs:
    def __init__(self, root: Path):
        self.root = root
        self.files: dict[str, str] = {}
        root.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.root / name

    def sgpr(self, name: str, f: GridFunction) -> None:
        write_sgpr(self.path(name), f)
        self._record(name)

    def csv_slice(self, name: str, f: GridFunction) -> None:
        write_csv_slice(self.path(name), f)
        self._record(name)

    def json(self, name: str, obj) -> None:
        self.path(name).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")
        self._record(name)

    def table(self, name: str, header: list[str], rows: list[list]) -> None:
        with open(self.path(name), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
        self._record(name)

    def _record(self, name: str) -> None:
        self.files[name] = hashlib.sha256(self.path(name).read_bytes()).hexdigest()


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def resolved_dict(cfg: RunConfig) -> dict:
    """Every setting the run used, defaults included."""
    out = {
        "grid": {"L": list(cfg.grid.L), "N": list(cfg.grid.N)},
        "analysis": dataclasses.asdict(cfg.analysis),
        "out": str(cfg.out),
        "seed": cfg.seed,
        "threads": cfg.threads,
        "tolerances": cfg.tolerances,
    }
    if cfg.problem is not None:
        prob = dataclasses.asdict(cfg.problem)
        prob["levi"] = {",".join(map(str, k)): v for k, v in cfg.problem.levi.items()}
        out["problem"] = prob
    if cfg.solver is not None:
        out["solver"] = dataclasses.asdict(cfg.solver)
    if cfg.stochastic is not None:
        out["stochastic"] = dataclasses.asdict(cfg.stochastic)
    return out


def _manifest(out: Outputs, cfg: RunConfig, subcommand: str, status: str) -> None:
    manifest = {
        "subcommand": subcommand,
        "status": status,
        "version": __version__,
        "seed": cfg.seed,
        "threads": cfg.threads,
        "config": cfg.raw,
        "resolved": resolved_dict(cfg),
        "outputs": dict(sorted(out.files.items())),
    }
    out.path("manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable) + "\n",
                                         encoding="utf-8")


# ---------------------------------------------------------------------------
# pipelines


def run_solve(cfg: RunConfig, out: Outputs) -> int:
    from .propagator import solve_cauchy_mth

    prob = build_problem(cfg)
    u = solve_cauchy_mth(prob, cfg.solver.t, nu_max=cfg.solver.nu_max, panel=cfg.solver.panel)
    out.sgpr("solution.sgpr", u)
    if cfg.grid.n == 1:
        out.csv_slice("solution.csv", u)
    if cfg.analysis.wavefront:
        _wavefront_outputs(cfg, prob, u, out)
    return EXIT_OK


def _wavefront_outputs(cfg: RunConfig, prob, u: GridFunction, out: Outputs) -> dict:
    from .wavefront import estimate_wavefront, propagate_wavefront, write_flagged_csv

    report = {}
    rows = []
    for k in cfg.analysis.kinds:
        data_est = [estimate_wavefront(g, k, cfg.analysis.orders) for g in prob.data]
        rep = propagate_wavefront(data_est, prob, cfg.solver.t, prob.s, solution=u, samples=cfg.analysis.samples,
                                  arcs=cfg.analysis.arcs)
        report[f"type{k}"] = {
            "data_cells": sorted(repr(c) for e in data_est for c in e.cells),
            "predicted_cells": [repr(c) for c in rep.predicted.sorted_cells()],
            "measured_cells": [repr(c) for c in rep.measured.sorted_cells()],
            "outside": sorted(repr(c) for c in rep.outside),
            "contained": rep.contained,
        }
        rows.append(rep.measured)
    write_flagged_csv(out.path("wavefront.csv"), rows)
    out._record("wavefront.csv")
    out.json("wavefront.json", report)
    return report


def run_wavefront(cfg: RunConfig, out: Outputs) -> int:
    from .propagator import solve_cauchy_mth

    prob = build_problem(cfg)
    u = solve_cauchy_mth(prob, cfg.solver.t, nu_max=cfg.solver.nu_max, panel=cfg.solver.panel)
    out.sgpr("solution.sgpr", u)
    _wavefront_outputs(cfg, prob, u, out)
    return EXIT_OK


def _noise_spec(cfg: RunConfig):
    from .stochastic import NoiseSpec

    st = cfg.stochastic
    kw = dict(dt=st.dt, seed=cfg.seed)
    if st.density is not None:
        spec = NoiseSpec.from_expression(cfg.grid, st.density, atoms=tuple(st.atoms), **kw)
    else:
        spec = NoiseSpec(cfg.grid, None, tuple(st.atoms), **kw)
    return spec


def _sigma_callable(grid: Grid, expr: str):
    from .symbols import symbol

    sym = symbol(expr, n=grid.n)
    if not sym.depends & {"t", "x"}:
        return complex(np.asarray(sym(0.0, np.zeros(grid.n), np.zeros(grid.n))))

    def sigma(s, x):
        X = x[..., None] if grid.n == 1 else x
        return sym(s, X, np.zeros_like(X))

    return sigma


def run_stochastic(cfg: RunConfig, out: Outputs) -> int:
    from .errors import InadmissibleNoiseError
    from .stochastic import StochasticForcing, check_noise_admissible, mc_solution

    prob = build_problem(cfg)
    spec = _noise_spec(cfg)
    st = cfg.stochastic
    try:
        adm = check_noise_admissible(spec)
    except InadmissibleNoiseError as exc:
        raise ConfigError(str(exc)) from exc
    report = {"finite_mass": adm.finite, "mass": adm.mass}
    if not adm.finite:
        out.json("admissibility.json", report)
        raise ConfigError("noise spectral measure has infinite mass")
    gamma = None
    if st.gamma is not None:
        expr = str(st.gamma)
        gamma = lambda s: _spatial(cfg.grid, expr, s)  # noqa: E731
    forcing = StochasticForcing(spec, _sigma_callable(cfg.grid, st.sigma), gamma)
    res = mc_solution(prob, forcing, cfg.solver.t, st.count, nu_max=cfg.solver.nu_max, panel=cfg.solver.panel,
                      chunk=st.chunk)
    report["count"] = res.count
    report["max_stderr"] = float(np.max(res.stderr.values.real))
    out.json("admissibility.json", report)
    out.sgpr("mean.sgpr", res.mean)
    out.sgpr("variance.sgpr", res.variance)
    out.sgpr("deterministic.sgpr", res.deterministic)
    return EXIT_OK


# -- verify ------------------------------------------------------------------


@dataclass
class Check:
    name: str
    value: float
    tolerance: float
    passed: bool | None  # None: not applicable to this configuration

    @property
    def status(self) -> str:
        return "skip" if self.passed is None else ("pass" if self.passed else "fail")


def _check_eikonal(tol: dict) -> list[Check]:
    from .phasecalc import build_eikonal_phase
    from .symbols import default_lattice, symbol

    lat = default_lattice(1)
    X, XI = lat.X, lat.XI
    c, t, s = 1.5, 0.4, 0.1
    err_t = float(np.max(np.abs(build_eikonal_phase(symbol(f"{c}*xi"), t, s)(X, XI) - (X[..., 0] + c * (t - s)) * XI[..., 0])))
    err_d = float(np.max(np.abs(build_eikonal_phase(symbol("x*xi"), t, s)(X, XI) - X[..., 0] * math.exp(t - s) * XI[..., 0])))
    return [Check("eikonal_transport", err_t, tol["eikonal_transport"], err_t <= tol["eikonal_transport"]),
            Check("eikonal_dilation", err_d, tol["eikonal_dilation"], err_d <= tol["eikonal_dilation"])]


def _check_fio(grid: Grid, tol: dict) -> list[Check]:
    from .fio import FioOperator, adjoint_defect, apply_fio
    from .phasecalc import build_eikonal_phase
    from .symbols import symbol

    if grid.n != 1:
        return [Check("fio_translation", math.nan, tol["fio_translation"], None),
                Check("fio_adjoint", math.nan, tol["fio_adjoint"], None)]
    shift = 0.5
    op = FioOperator(build_eikonal_phase(symbol("xi"), shift, 0.0))
    L = grid.L[0]
    width = L / 8
    u = grid.sample(lambda x: np.exp(-(x / width) ** 2))
    exact = grid.sample(lambda x: np.exp(-((x + shift) / width) ** 2))
    got = apply_fio(op, u)
    err = float(l2_norm(got - exact) / l2_norm(exact))
    v = grid.sample(lambda x: np.exp(-((x - 1.0) / width) ** 2) * np.cos(x))
    adj = adjoint_defect(op, u, v)
    return [Check("fio_translation", err, tol["fio_translation"], err <= tol["fio_translation"]),
            Check("fio_adjoint", adj, tol["fio_adjoint"], adj <= tol["fio_adjoint"])]


def _constant_roots(prob) -> bool:
    return all(not (m.depends & {"t", "x"}) for m in prob.roots.members) and not prob.levi and prob.forcing is None


def mode_oracle(prob, t: float) -> GridFunction:
    """Per-frequency solution of prod_j (D_t - tau_j(xi)) u = 0 through the companion matrix exponential."""
    from scipy.linalg import expm

    grid = prob.data[0].grid
    XI = grid.frequencies().reshape(-1, grid.n)
    roots = np.stack([np.asarray(np.broadcast_to(m(0.0, np.zeros_like(XI), XI), (XI.shape[0],)), dtype=complex)
                      for m in prob.roots.members], axis=-1)
    m = prob.m
    V0 = np.stack([fourier_forward(g).values.reshape(-1) for g in prob.data], axis=-1)
    out = np.empty(XI.shape[0], dtype=complex)
    for q in range(XI.shape[0]):
        # coefficients of prod (tau - r_j) = tau^m + c_1 tau^(m-1) + ... + c_m
        poly = np.poly(roots[q])
        A = np.zeros((m, m), dtype=complex)
        A[:-1, 1:] = np.eye(m - 1)
        A[-1] = -poly[1:][::-1]
        out[q] = (expm(1j * (t - prob.s) * A) @ V0[q])[0]
    return fourier_inverse(GridFunction(grid, out.reshape(grid.shape), FREQUENCY))


def _check_problem(cfg: RunConfig, tol: dict, out: Outputs) -> list[Check]:
    from .propagator import solve_cauchy_mth

    if cfg.problem is None or cfg.solver is None:
        return [Check("problem_oracle", math.nan, tol["problem_oracle"], None)]
    prob = build_problem(cfg)
    u = solve_cauchy_mth(prob, cfg.solver.t, nu_max=cfg.solver.nu_max, panel=cfg.solver.panel)
    out.sgpr("solution.sgpr", u)
    if not _constant_roots(prob):
        return [Check("problem_oracle", math.nan, tol["problem_oracle"], None)]
    ref = mode_oracle(prob, cfg.solver.t)
    out.sgpr("oracle.sgpr", ref)
    err = float(l2_norm(u - ref) / max(float(l2_norm(ref)), 1e-300))
    return [Check("problem_oracle", err, tol["problem_oracle"], err <= tol["problem_oracle"])]


def _check_identity(cfg: RunConfig, tol: dict) -> list[Check]:
    from .propagator import FirstOrderSystem, PropagatorPlan, fundamental_apply
    from .symbols import symbol

    grid = cfg.grid
    lam = "-xi" if grid.n == 1 else "-xi1"
    plan = PropagatorPlan(FirstOrderSystem([symbol(lam, n=grid.n)], [[0.3]]))
    g = GridFunction(grid, np.exp(-np.sum(grid.points() ** 2, axis=-1))[None].astype(complex))
    same = fundamental_apply(plan, 0.2, 0.2, g)
    err = float(np.max(np.abs(same.values - g.values)))
    return [Check("identity_at_equal_times", err, tol["identity_at_equal_times"], err <= tol["identity_at_equal_times"])]


def _check_noise(cfg: RunConfig, tol: dict, out: Outputs) -> list[Check]:
    from .stochastic import NoiseSpec, check_noise_admissible, identity_kernel, sample_noise, stochastic_integral

    wide = Grid((40.0,), (1024,))
    mass = check_noise_admissible(NoiseSpec.from_expression(wide, "1/(1+xi**2)")).mass
    rel = abs(mass - math.pi) / math.pi
    checks = [Check("noise_mass", rel, tol["noise_mass"], rel <= tol["noise_mass"])]
    small = Grid((4.0,), (16,))
    spec = NoiseSpec.atom(small, 0.0, 1.0, dt=0.1, seed=cfg.seed)
    samples = sample_noise(spec, 1.0, ISOMETRY_SAMPLES)
    vals = stochastic_integral(identity_kernel(), 1.0, spec, samples, 1.0, [0.0])[:, 0].real
    np.save(out.path("isometry_samples.npy"), vals)
    out._record("isometry_samples.npy")
    var = float(np.var(vals, ddof=1))
    rel = abs(var - 1.0)
    checks.append(Check("stochastic_isometry", rel, tol["stochastic_isometry"], rel <= tol["stochastic_isometry"]))
    return checks


def _check_wavefront(cfg: RunConfig, tol: dict) -> list[Check]:
    from .wavefront import estimate_wavefront

    grid = cfg.grid
    width = min(grid.L) / 8
    f = grid.spatial(np.exp(-np.sum((grid.points() / width) ** 2, axis=-1)))
    count = sum(len(estimate_wavefront(f, k, (1.0, 1.0))) for k in (1, 2, 3))
    return [Check("wavefront_schwartz", float(count), tol["wavefront_schwartz"], count <= tol["wavefront_schwartz"])]


def run_verify(cfg: RunConfig, out: Outputs) -> int:
    tol = cfg.tolerances
    checks: list[Check] = []
    checks += _check_eikonal(tol)
    checks += _check_fio(cfg.grid, tol)
    checks += _check_identity(cfg, tol)
    checks += _check_problem(cfg, tol, out)
    checks += _check_noise(cfg, tol, out)
    checks += _check_wavefront(cfg, tol)
    rows = [[c.name, f"{c.value:.6e}", f"{c.tolerance:.3e}", c.status] for c in checks]
    out.table("verify.csv", ["check", "value", "tolerance", "status"], rows)
    width = max(len(c.name) for c in checks)
    for c in checks:
        print(f"{c.name:<{width}}  {c.value:.3e}  <= {c.tolerance:.1e}  {c.status}")
    return EXIT_OK if all(c.passed is not False for c in checks) else EXIT_VERIFY


PIPELINES: dict[str, Callable[[RunConfig, Outputs], int]] = {
    "solve": run_solve,
    "wavefront": run_wavefront,
    "stochastic": run_stochastic,
    "verify": run_verify,
}


# ---------------------------------------------------------------------------
# entry point


def _limit_threads(n: int | None):
    if n is None:
        return None
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return None
    return threadpool_limits(limits=int(n))


def run(config: str | Path | None, subcommand: str, out: str | None = None, seed: int | None = None,
        threads: int | None = None) -> int:
    """Execute one pipeline; returns the exit code."""
    try:
        cfg = resolve_config(load_config(config), subcommand, out, seed, threads)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    outputs = Outputs(cfg.out)
    limiter = _limit_threads(cfg.threads)
    started = time.perf_counter()
    try:
        code = PIPELINES[subcommand](cfg, outputs)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        code = EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure ({type(exc).__name__}): {exc}", file=sys.stderr)
        code = EXIT_NUMERIC
    except SGError as exc:
        # structural defects of the configured problem (not hyperbolic, not involutive, bad noise)
        print(f"configuration error ({type(exc).__name__}): {exc}", file=sys.stderr)
        code = EXIT_CONFIG
    finally:
        if limiter is not None:
            limiter.unregister() if hasattr(limiter, "unregister") else limiter.__exit__(None, None, None)
    status = {EXIT_OK: "ok", EXIT_VERIFY: "verification-failed", EXIT_CONFIG: "config-error",
              EXIT_NUMERIC: "numerical-failure"}[code]
    _manifest(outputs, cfg, subcommand, status)
    print(f"{subcommand}: {status} in {time.perf_counter() - started:.1f} s, outputs in {cfg.out}", file=sys.stderr)
    return code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgcauchy", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML run configuration" + (" (default: shipped transport config)"
                                                                     if name == "verify" else ""),
                       required=name != "verify")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="random seed")
        p.add_argument("--threads", type=int, help="BLAS thread limit (also SGPR_THREADS)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return run(args.config, args.subcommand, args.out, args.seed, args.threads)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
