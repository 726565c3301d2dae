"""Gaussian-path schedulers.

A scheduler is a pair of smooth functions alpha, sigma : [0, 1] -> [0, 1]
describing interpolation between pure noise at time 0 and clean data at
time 1:

    x_t = alpha(t) * x_1 + sigma(t) * x_0,   x_0 ~ N(0, I).

The signal-to-noise ratio snr(t) = alpha(t) / sigma(t) must be strictly
increasing so that time is recoverable from noise level.  All built-in
schedulers carry analytic derivatives; downstream code never needs to
differentiate them numerically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import OutOfDomainError

__all__ = [
    "Scheduler",
    "SchedulerReport",
    "make_ot_scheduler",
    "make_cosine_scheduler",
    "make_vp_scheduler",
    "snr_inverse",
    "validate_scheduler",
]


@dataclass(frozen=True)
class Scheduler:
    """Signal/noise pair with analytic time derivatives.

    alpha, sigma and their derivatives accept scalars or numpy arrays.
    """

    name: str
    alpha: Callable
    sigma: Callable
    dalpha: Callable
    dsigma: Callable

    def snr(self, t):
        a = np.asarray(self.alpha(t), dtype=float)
        s = np.asarray(self.sigma(t), dtype=float)
        with np.errstate(divide="ignore"):
            out = np.where(s == 0.0, np.inf, a / np.where(s == 0.0, 1.0, s))
        return float(out) if out.ndim == 0 else out

    def log_snr(self, t):
        a = np.asarray(self.alpha(t), dtype=float)
        s = np.asarray(self.sigma(t), dtype=float)
        with np.errstate(divide="ignore"):
            out = np.log(a) - np.log(s)
        return float(out) if out.ndim == 0 else out

    def dsnr(self, t):
        """d/dt of alpha/sigma via the quotient rule."""
        a = np.asarray(self.alpha(t), dtype=float)
        s = np.asarray(self.sigma(t), dtype=float)
        da = np.asarray(self.dalpha(t), dtype=float)
        ds = np.asarray(self.dsigma(t), dtype=float)
        out = (da * s - a * ds) / (s * s)
        return float(out) if out.ndim == 0 else out

    def dlog_snr(self, t):
        a = np.asarray(self.alpha(t), dtype=float)
        s = np.asarray(self.sigma(t), dtype=float)
        da = np.asarray(self.dalpha(t), dtype=float)
        ds = np.asarray(self.dsigma(t), dtype=float)
        out = da / a - ds / s
        return float(out) if out.ndim == 0 else out


def make_ot_scheduler() -> Scheduler:
    """Linear interpolation path: alpha = t, sigma = 1 - t."""
    return Scheduler(
        name="ot",
        alpha=lambda t: np.asarray(t, dtype=float) + 0.0,
        sigma=lambda t: 1.0 - np.asarray(t, dtype=float),
        dalpha=lambda t: np.ones_like(np.asarray(t, dtype=float)),
        dsigma=lambda t: -np.ones_like(np.asarray(t, dtype=float)),
    )


def make_cosine_scheduler() -> Scheduler:
    """Trigonometric path: alpha = sin(pi t / 2), sigma = cos(pi t / 2)."""
    half_pi = 0.5 * math.pi
    return Scheduler(
        name="cosine",
        alpha=lambda t: np.sin(half_pi * np.asarray(t, dtype=float)),
        sigma=lambda t: np.cos(half_pi * np.asarray(t, dtype=float)),
        dalpha=lambda t: half_pi * np.cos(half_pi * np.asarray(t, dtype=float)),
        dsigma=lambda t: -half_pi * np.sin(half_pi * np.asarray(t, dtype=float)),
    )


def make_vp_scheduler(beta_max: float = 20.0, beta_min: float = 0.1) -> Scheduler:
    """Variance-preserving diffusion path with a linear noise ramp.

    With xi(s) = exp(-s^2 (beta_max - beta_min) / 4 - s beta_min / 2):

        alpha(t) = xi(1 - t),       sigma(t) = sqrt(1 - xi(1 - t)^2).

    Note alpha(0) = xi(1) = exp(-(beta_max - beta_min)/4 - beta_min/2) is
    small but not zero; the noise end of this path is only approximately
    standard normal.  Boundary residuals are reported, not hidden, by
    validate_scheduler.
    """
    if not (beta_max > beta_min > 0.0):
        raise ValueError(
            f"require beta_max > beta_min > 0, got beta_max={beta_max}, beta_min={beta_min}"
        )
    quad = 0.25 * (beta_max - beta_min)
    lin = 0.5 * beta_min

    def xi(s):
        return np.exp(-quad * s * s - lin * s)

    def dxi(s):
        return xi(s) * (-2.0 * quad * s - lin)

    def alpha(t):
        return xi(1.0 - np.asarray(t, dtype=float))

    def dalpha(t):
        return -dxi(1.0 - np.asarray(t, dtype=float))

    def sigma(t):
        x = xi(1.0 - np.asarray(t, dtype=float))
        return np.sqrt(np.maximum(1.0 - x * x, 0.0))

    def dsigma(t):
        s = 1.0 - np.asarray(t, dtype=float)
        x = xi(s)
        sig = np.sqrt(np.maximum(1.0 - x * x, 0.0))
        # d sigma/dt = -d sigma/ds = x * xi'(s) / sigma
        return x * dxi(s) / sig

    return Scheduler(name="vp", alpha=alpha, sigma=sigma, dalpha=dalpha, dsigma=dsigma)


def snr_inverse(scheduler: Scheduler, y: float) -> float:
    """Solve snr(t) = y for t in (0, 1).

    Bisection on log snr down to a bracket of width 1e-14, then two Newton
    polish steps.  Raises OutOfDomainError when y is not strictly inside
    the range of snr on (0, 1).
    """
    if not math.isfinite(y) or y <= 0.0:
        raise OutOfDomainError(f"snr target must be finite and positive, got {y}")
    lo, hi = 0.0, 1.0
    snr_lo = scheduler.snr(lo)
    # snr(1) = +inf for every built-in scheduler (sigma(1) = 0); a custom
    # scheduler with finite snr(1) still bounds the search from above.
    snr_hi = scheduler.snr(hi)
    if not (snr_lo < y < snr_hi):
        raise OutOfDomainError(
            f"snr target {y} outside the open range ({snr_lo}, {snr_hi}) of {scheduler.name}"
        )
    target = math.log(y)
    for _ in range(64):
        if hi - lo <= 1e-14:
            break
        mid = 0.5 * (lo + hi)
        if scheduler.log_snr(mid) < target:
            lo = mid
        else:
            hi = mid
    t = 0.5 * (lo + hi)
    for _ in range(2):
        g = scheduler.log_snr(t) - target
        dg = scheduler.dlog_snr(t)
        if not math.isfinite(g) or not math.isfinite(dg) or dg == 0.0:
            break
        t = min(max(t - g / dg, lo), hi)
    return float(t)


@dataclass
class SchedulerReport:
    """Outcome of validate_scheduler, with the residuals that drove it."""

    name: str
    boundary_residuals: dict = field(default_factory=dict)
    max_boundary_residual: float = 0.0
    snr_monotone: bool = True
    monotone_violations: int = 0
    max_derivative_rel_err: float = 0.0
    boundary_tol: float = 1e-12
    derivative_tol: float = 1e-6
    passed: bool = False


def validate_scheduler(
    scheduler: Scheduler,
    grid_size: int = 1001,
    boundary_tol: float = 1e-12,
    derivative_tol: float = 1e-6,
    fd_step: float = 1e-6,
) -> SchedulerReport:
    """Check boundary values, snr monotonicity, and derivative consistency.

    Monotonicity is tested on a uniform grid of `grid_size` points; analytic
    derivatives are compared against central differences at the interior
    grid points.
    """
    rep = SchedulerReport(
        name=scheduler.name, boundary_tol=boundary_tol, derivative_tol=derivative_tol
    )
    rep.boundary_residuals = {
        "alpha(0)": abs(float(scheduler.alpha(0.0))),
        "sigma(0)-1": abs(float(scheduler.sigma(0.0)) - 1.0),
        "alpha(1)-1": abs(float(scheduler.alpha(1.0)) - 1.0),
        "sigma(1)": abs(float(scheduler.sigma(1.0))),
    }
    rep.max_boundary_residual = max(rep.boundary_residuals.values())

    ts = np.linspace(0.0, 1.0, grid_size)
    snr_vals = scheduler.snr(ts)
    diffs = np.diff(snr_vals)
    rep.monotone_violations = int(np.sum(~(diffs > 0.0)))
    rep.snr_monotone = rep.monotone_violations == 0

    interior = ts[1:-1]
    h = fd_step
    max_rel = 0.0
    for fn, dfn in ((scheduler.alpha, scheduler.dalpha), (scheduler.sigma, scheduler.dsigma)):
        fd = (np.asarray(fn(interior + h)) - np.asarray(fn(interior - h))) / (2.0 * h)
        exact = np.asarray(dfn(interior))
        rel = np.abs(fd - exact) / (np.abs(exact) + 1e-12)
        max_rel = max(max_rel, float(rel.max()))
    rep.max_derivative_rel_err = max_rel

    rep.passed = (
        rep.max_boundary_residual <= boundary_tol
        and rep.snr_monotone
        and rep.max_derivative_rel_err <= derivative_tol
    )
    return rep
