"""Measurement harnesses: convergence order, path equivalence, NFE sweeps.

Everything here consumes the library's own solvers and fields and produces
plain-data report objects that the command line serializes.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bespoke_loss import local_errors, rms_norm, rmse_global
from .bespoke_scheme import SchemeGrids, SmoothScheme
from .errors import ConfigError
from .flow_fields import VelocityField, gmm_marginal_field
from .ode_solvers import (
    EVALS_PER_STEP,
    STEP_FUNCTIONS,
    solve_adaptive_batch,
    solve_fixed,
)
from .schedulers import Scheduler, snr_inverse

__all__ = [
    "EvalCounter",
    "counting_field",
    "psnr",
    "OrderFit",
    "fit_order",
    "base_solver_order",
    "bespoke_local_order",
    "bespoke_global_order",
    "map_scale_time",
    "EquivalenceReport",
    "scheduler_equivalence",
    "SweepSolver",
    "EvalRow",
    "EvalReport",
    "reference_endpoints",
    "sweep",
]

# local errors below this are dominated by reference/interpolation noise
# and are dropped from log-log fits
ERROR_FLOOR = 1e-13


class EvalCounter:
    """Mutable velocity-evaluation counter shared with a counting field."""

    def __init__(self):
        self.calls = 0


def counting_field(f: VelocityField):
    """Wrap a field so sampler evaluations are counted; returns (field, counter).

    Only eval is counted: Jacobian and time-derivative queries are training
    machinery, not sampler work.
    """
    counter = EvalCounter()

    def counted(t, x):
        counter.calls += 1
        return f.eval(t, x)

    wrapped = VelocityField(
        name=f.name,
        dim=f.dim,
        eval=counted,
        jac_x=f.jac_x,
        dt=f.dt,
        lipschitz_hint=f.lipschitz_hint,
        t_max=f.t_max,
    )
    return wrapped, counter


def psnr(reference, candidate, peak: Optional[float] = None) -> float:
    """Peak signal-to-noise ratio in dB; peak defaults to max |reference|."""
    reference = np.asarray(reference, dtype=float)
    candidate = np.asarray(candidate, dtype=float)
    if peak is None:
        peak = float(np.abs(reference).max())
    mse = float(np.mean((reference - candidate) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


@dataclass
class OrderFit:
    """Log-log convergence fit: err ~ C h^slope."""

    label: str
    slope: float
    half_width: float
    h: np.ndarray
    errors: np.ndarray
    per_anchor_slopes: np.ndarray
    dropped_points: int = 0

    def to_json_dict(self) -> dict:
        return {
            "label": self.label,
            "slope": float(self.slope),
            "half_width": float(self.half_width),
            "h": self.h.tolist(),
            "errors": self.errors.tolist(),
            "per_anchor_slopes": self.per_anchor_slopes.tolist(),
            "dropped_points": int(self.dropped_points),
        }


def fit_order(h_values, errors):
    """Slope of log err vs log h, ignoring error values at the noise floor.

    Returns (slope, dropped_count); needs at least two clean points.
    """
    h_values = np.asarray(h_values, dtype=float)
    errors = np.asarray(errors, dtype=float)
    keep = errors > ERROR_FLOOR
    dropped = int((~keep).sum())
    if dropped:
        warnings.warn(
            f"dropped {dropped} error samples at the precision floor from an order fit",
            stacklevel=2,
        )
    if keep.sum() < 2:
        raise ValueError("not enough points above the precision floor to fit a slope")
    slope = float(np.polyfit(np.log(h_values[keep]), np.log(errors[keep]), 1)[0])
    return slope, dropped


def _aggregate_fit(label, h_values, err_matrix):
    """Fit the anchor-pooled error curve; keep per-anchor slopes as spread.

    The headline slope comes from the row-mean errors: pooling suppresses
    superconvergent anchors where the leading error coefficient happens to
    vanish, which would otherwise bias a slope-of-fits average.
    """
    err_matrix = np.asarray(err_matrix, dtype=float)
    pooled = err_matrix.mean(axis=0)
    slope, dropped = fit_order(h_values, pooled)
    slopes = []
    for row in err_matrix:
        s, _ = fit_order(h_values, row)
        slopes.append(s)
    slopes = np.asarray(slopes)
    return OrderFit(
        label=label,
        slope=slope,
        half_width=float(0.5 * (slopes.max() - slopes.min())),
        h=np.asarray(h_values, dtype=float),
        errors=pooled,
        per_anchor_slopes=slopes,
        dropped_points=dropped,
    )


def base_solver_order(
    f: VelocityField,
    kind: str,
    paths,
    anchor_times=(0.1, 0.3, 0.5, 0.7),
    h_values=(0.1, 0.05, 0.025, 0.0125),
) -> OrderFit:
    """Local-error convergence of a plain RK method on reference paths.

    One step of size h from the reference state at each anchor time; the
    error against the reference at t+h should scale like h^(order+1).
    """
    step = STEP_FUNCTIONS[kind]
    err = np.empty((len(anchor_times), len(h_values)))
    for a, t0 in enumerate(anchor_times):
        launch = np.stack([p.at(t0) for p in paths])
        for j, h in enumerate(h_values):
            target = np.stack([p.at(t0 + h) for p in paths])
            pred = step(t0, launch, h, f)
            err[a, j] = float(np.mean(rms_norm(target - pred)))
    return _aggregate_fit(f"{kind}-local", h_values, err)


def bespoke_local_order(
    scheme: SmoothScheme, base_kind: str, f: VelocityField, paths, n_values=(10, 20, 40, 80)
) -> OrderFit:
    """Local-error convergence of one smooth scheme discretized at several n.

    The mean local error over steps and paths scales like h^(order+1) for
    any member of the smooth scheme family.
    """
    errs = np.empty(len(n_values))
    for j, n in enumerate(n_values):
        grids = scheme.grids(base_kind, n)
        errs[j] = float(local_errors(grids, f, paths=list(paths)).mean())
    h_values = 1.0 / np.asarray(n_values, dtype=float)
    return _aggregate_fit(f"bespoke-{base_kind}-local", h_values, errs[None, :])


def bespoke_global_order(
    scheme: SmoothScheme,
    base_kind: str,
    f: VelocityField,
    x0_batch,
    endpoints,
    n_values=(5, 10, 20, 40),
) -> OrderFit:
    """Endpoint-RMSE convergence of one smooth scheme as n grows."""
    errs = np.empty(len(n_values))
    for j, n in enumerate(n_values):
        grids = scheme.grids(base_kind, n)
        errs[j] = rmse_global(grids, f, x0_batch, endpoints)
    h_values = 1.0 / np.asarray(n_values, dtype=float)
    return _aggregate_fit(f"bespoke-{base_kind}-global", h_values, errs[None, :])


# --- scheduler equivalence ---


def map_scale_time(sched_a: Scheduler, sched_b: Scheduler, r: float):
    """Scale-time change taking paths of scheduler A onto paths of B.

    Matching noise levels forces t_r = snr_a^-1(snr_b(r)) and
    s_r = sigma_b(r) / sigma_a(t_r); speeds follow by differentiating.
    Returns (t, s, tdot, sdot).
    """
    t = snr_inverse(sched_a, sched_b.snr(r))
    sig_a = float(sched_a.sigma(t))
    s = float(sched_b.sigma(r)) / sig_a
    tdot = float(sched_b.dsnr(r)) / float(sched_a.dsnr(t))
    sdot = (float(sched_b.dsigma(r)) - s * float(sched_a.dsigma(t)) * tdot) / sig_a
    return t, s, tdot, sdot


@dataclass
class EquivalenceReport:
    """How closely transformed A-paths reproduce B-paths for one pair."""

    pair: tuple
    max_field_rel_err: float
    max_path_residual: float
    r_grid: np.ndarray
    path_residuals: np.ndarray
    clipped_points: int
    t_at_half: float
    s_at_half: float

    def to_json_dict(self) -> dict:
        return {
            "pair": list(self.pair),
            "max_field_rel_err": float(self.max_field_rel_err),
            "max_path_residual": float(self.max_path_residual),
            "r_grid": self.r_grid.tolist(),
            "path_residuals": self.path_residuals.tolist(),
            "clipped_points": int(self.clipped_points),
            "t_at_half": float(self.t_at_half),
            "s_at_half": float(self.s_at_half),
        }


def scheduler_equivalence(
    sched_a: Scheduler,
    sched_b: Scheduler,
    mixture,
    batch: int = 16,
    r_lo: float = 0.02,
    r_hi: float = 0.98,
    r_points: int = 97,
    field_probes: int = 200,
    rtol: float = 1e-9,
    atol: float = 1e-9,
    seed: int = 0,
) -> EquivalenceReport:
    """Check that scale-time-transformed A-dynamics reproduce B-dynamics.

    Two tests on the same mixture target: (a) the transformed A-field
    equals the B-field pointwise at random (r, x); (b) trajectories of the
    two marginal fields satisfy s_r x_a(t_r) = x_b(r) along an r grid.
    The B-paths launch at r_lo from the transformed A-states, because the
    correspondence fixes the initial condition; schedulers that share
    snr(0) make this the common noise draw.  Grid points whose noise level
    leaves A's snr range are dropped and counted.
    """
    field_a = gmm_marginal_field(sched_a, mixture)
    field_b = gmm_marginal_field(sched_b, mixture)
    rng = np.random.default_rng(seed)

    snr_a0 = sched_a.snr(0.0)
    max_field_err = 0.0
    clipped = 0
    for _ in range(field_probes):
        r = rng.uniform(r_lo, r_hi)
        if not sched_b.snr(r) > snr_a0:
            clipped += 1
            continue
        x1 = mixture.sample(rng, 1)[0]
        x = float(sched_b.alpha(r)) * x1 + float(sched_b.sigma(r)) * rng.standard_normal(
            mixture.dim
        )
        t, s, tdot, sdot = map_scale_time(sched_a, sched_b, r)
        lhs = (sdot / s) * x + tdot * s * field_a(t, x / s)
        rhs = field_b(r, x)
        rel = rms_norm(lhs - rhs) / (rms_norm(rhs) + 1e-300)
        max_field_err = max(max_field_err, float(rel))

    x0 = rng.standard_normal((batch, mixture.dim))
    paths_a = solve_adaptive_batch(field_a, x0, rtol=rtol, atol=atol)
    t_lo, s_lo, _, _ = map_scale_time(sched_a, sched_b, r_lo)
    xb0 = s_lo * np.stack([p.at(t_lo) for p in paths_a])
    paths_b = solve_adaptive_batch(field_b, xb0, rtol=rtol, atol=atol, t0=r_lo)
    r_grid = np.linspace(r_lo, r_hi, r_points)
    residuals = np.zeros(len(r_grid))
    for j, r in enumerate(r_grid):
        if not sched_b.snr(r) > snr_a0:
            clipped += 1
            residuals[j] = np.nan
            continue
        t, s, _, _ = map_scale_time(sched_a, sched_b, r)
        xa = np.stack([p.at(t) for p in paths_a])
        xb = np.stack([p.at(r) for p in paths_b])
        residuals[j] = float(np.max(rms_norm(s * xa - xb)))
    max_path_residual = float(np.nanmax(residuals))

    t_half, s_half, _, _ = map_scale_time(sched_a, sched_b, 0.5)
    return EquivalenceReport(
        pair=(sched_a.name, sched_b.name),
        max_field_rel_err=max_field_err,
        max_path_residual=max_path_residual,
        r_grid=r_grid,
        path_residuals=residuals,
        clipped_points=clipped,
        t_at_half=t_half,
        s_at_half=s_half,
    )


# --- NFE sweep ---


@dataclass(frozen=True)
class SweepSolver:
    """One sweep entry: a plain RK kind, or a family of bespoke schemes by n."""

    label: str
    kind: str  # rk1 | rk2 | rk4 | bespoke
    schemes: Optional[dict] = None  # n -> SchemeGrids, bespoke only
    base_kind: Optional[str] = None  # bespoke only

    def evals_per_step(self) -> int:
        if self.kind == "bespoke":
            return EVALS_PER_STEP[self.base_kind]
        return EVALS_PER_STEP[self.kind]


@dataclass
class EvalRow:
    solver: str
    nfe: int
    steps: int
    nfe_actual: int
    rmse: float
    psnr_db: float
    wall_seconds: float

    def to_json_dict(self) -> dict:
        return {
            "solver": self.solver,
            "nfe": int(self.nfe),
            "steps": int(self.steps),
            "nfe_actual": int(self.nfe_actual),
            "rmse": float(self.rmse),
            "psnr_db": float(self.psnr_db),
            "wall_seconds": float(self.wall_seconds),
        }


@dataclass
class EvalReport:
    """Container the CLI serializes; sections filled per harness."""

    rows: list = field(default_factory=list)
    order_fits: list = field(default_factory=list)
    equivalence: list = field(default_factory=list)
    peak: Optional[float] = None

    def to_json_dict(self) -> dict:
        return {
            "rows": [r.to_json_dict() for r in self.rows],
            "order_fits": [o.to_json_dict() for o in self.order_fits],
            "equivalence": [e.to_json_dict() for e in self.equivalence],
            "peak": self.peak,
        }


def reference_endpoints(f: VelocityField, x0_batch, rtol: float = 1e-9, atol: float = 1e-9):
    """Adaptive endpoints, linearly extended from f.t_max to t = 1.

    The extension matches the convention used for training targets; its
    error is quadratic in the end gap, far below solver tolerance.
    """
    paths = solve_adaptive_batch(f, np.asarray(x0_batch, dtype=float), rtol=rtol, atol=atol)
    ends = np.stack([p.end_state for p in paths])
    t_end = paths[0].end_time
    if t_end < 1.0:
        ends = ends + f(t_end, ends) * (1.0 - t_end)
    return ends


def _run_sweep_entry(solver: SweepSolver, f, steps: int, x0_batch):
    counted, counter = counting_field(f)
    t_start = time.perf_counter()
    if solver.kind == "bespoke":
        if solver.schemes is None or steps not in solver.schemes:
            raise ConfigError(
                f"sweep solver '{solver.label}' has no scheme for n={steps} steps"
            )
        grids = solver.schemes[steps]
        if grids.n != steps:
            raise ConfigError(
                f"scheme registered under n={steps} actually has n={grids.n}"
            )
        from .bespoke_scheme import bespoke_sample

        finals = bespoke_sample(grids, counted, x0_batch)
    else:
        # rk4 probes t + h, so its end time must stay clear of the field's
        # singular endpoint; rk1/rk2 never evaluate at the end time.
        t_end = f.t_max if solver.kind == "rk4" else 1.0
        finals = solve_fixed(counted, solver.kind, steps, x0_batch, t_end=t_end).states[-1]
    wall = time.perf_counter() - t_start
    return finals, counter.calls, wall


def sweep(
    f: VelocityField,
    solvers,
    nfe_grid,
    x0_batch,
    endpoints=None,
    rtol: float = 1e-9,
    atol: float = 1e-9,
) -> EvalReport:
    """RMSE/PSNR/wall-clock for each (solver, NFE) pair against references.

    Every NFE must be divisible by each solver's evaluations per step.  The
    realized evaluation count is recorded and must equal the target.
    """
    x0_batch = np.asarray(x0_batch, dtype=float)
    if endpoints is None:
        endpoints = reference_endpoints(f, x0_batch, rtol=rtol, atol=atol)
    peak = float(np.abs(endpoints).max())
    report = EvalReport(peak=peak)
    for nfe in nfe_grid:
        for solver in solvers:
            per_step = solver.evals_per_step()
            if nfe % per_step != 0:
                raise ConfigError(
                    f"NFE {nfe} not divisible by {per_step} evals/step of '{solver.label}'"
                )
            steps = nfe // per_step
            finals, calls, wall = _run_sweep_entry(solver, f, steps, x0_batch)
            if calls != nfe:
                raise ConfigError(
                    f"solver '{solver.label}' used {calls} evaluations, expected {nfe}"
                )
            report.rows.append(
                EvalRow(
                    solver=solver.label,
                    nfe=nfe,
                    steps=steps,
                    nfe_actual=calls,
                    rmse=float(np.mean(rms_norm(endpoints - finals))),
                    psnr_db=psnr(endpoints, finals, peak=peak),
                    wall_seconds=wall,
                )
            )
    return report
