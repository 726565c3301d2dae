"""Fixed-step Runge-Kutta solvers and an adaptive reference solver.

The adaptive solver is Dormand-Prince 5(4) with FSAL, PI step control, and
cubic Hermite dense output over the accepted nodes.  It is the ground-truth
engine: everything else in the package is measured against its trajectories.

Solvers integrate dx/dt = f(t, x) forward from t0.  States have shape
(..., dim); a batch of initial states is advanced under a shared step
sequence whose error norm is the max over batch elements, so each element
still satisfies the local tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import MaxStepsExceededError, OutOfDomainError, StepUnderflowError

__all__ = [
    "Trajectory",
    "ExactPath",
    "rk1_step",
    "rk2_step",
    "rk4_step",
    "solve_fixed",
    "FixedResult",
    "solve_adaptive",
    "solve_adaptive_batch",
    "interpolate",
    "save_trajectory",
    "load_trajectory",
]

EVALS_PER_STEP = {"rk1": 1, "rk2": 2, "rk4": 4}


def rk1_step(t, x, h, f):
    """Forward Euler."""
    return x + h * f(t, x)


def rk2_step(t, x, h, f):
    """Explicit midpoint."""
    z = x + 0.5 * h * f(t, x)
    return x + h * f(t + 0.5 * h, z)


def rk4_step(t, x, h, f):
    """Classical fourth-order Runge-Kutta."""
    k1 = f(t, x)
    k2 = f(t + 0.5 * h, x + 0.5 * h * k1)
    k3 = f(t + 0.5 * h, x + 0.5 * h * k2)
    k4 = f(t + h, x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


STEP_FUNCTIONS = {"rk1": rk1_step, "rk2": rk2_step, "rk4": rk4_step}


@dataclass(frozen=True)
class FixedResult:
    """Uniform-grid trajectory from solve_fixed."""

    times: np.ndarray
    states: np.ndarray

    @property
    def end_time(self) -> float:
        return float(self.times[-1])

    @property
    def end_state(self) -> np.ndarray:
        return self.states[-1]


def solve_fixed(f, kind: str, n: int, x0, t_end: Optional[float] = None) -> FixedResult:
    """Integrate with n uniform steps of the named RK method on [0, t_end]."""
    if kind not in STEP_FUNCTIONS:
        raise ValueError(f"unknown solver kind '{kind}', expected one of {sorted(STEP_FUNCTIONS)}")
    if n < 1:
        raise ValueError("need at least one step")
    if t_end is None:
        t_end = getattr(f, "t_max", 1.0)
    step = STEP_FUNCTIONS[kind]
    x = np.asarray(x0, dtype=float)
    times = np.linspace(0.0, t_end, n + 1)
    states = np.empty((n + 1,) + x.shape)
    states[0] = x
    h = t_end / n
    for i in range(n):
        x = step(times[i], x, h, f)
        states[i + 1] = x
    return FixedResult(times=times, states=states)


# --- adaptive Dormand-Prince 5(4) ---

_DP_C = np.array([0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0])
_DP_A = [
    np.array([]),
    np.array([1.0 / 5.0]),
    np.array([3.0 / 40.0, 9.0 / 40.0]),
    np.array([44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0]),
    np.array([19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0]),
    np.array([9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0]),
    np.array([35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0]),
]
# weights of the embedded 4th-order solution
_DP_B4 = np.array(
    [
        5179.0 / 57600.0,
        0.0,
        7571.0 / 16695.0,
        393.0 / 640.0,
        -92097.0 / 339200.0,
        187.0 / 2100.0,
        1.0 / 40.0,
    ]
)
_DP_B5 = np.array(list(_DP_A[6]) + [0.0])
_DP_ERR = _DP_B5 - _DP_B4
# continuous extension (quartic in the step fraction), used to plant
# extra interpolation nodes inside long accepted steps
_DP_P = np.array(
    [
        [1.0, -8048581381.0 / 2820520608.0, 8663915743.0 / 2820520608.0, -12715105075.0 / 11282082432.0],
        [0.0, 0.0, 0.0, 0.0],
        [0.0, 131558114200.0 / 32700410799.0, -68118460800.0 / 10900136933.0, 87487479700.0 / 32700410799.0],
        [0.0, -1754552775.0 / 470086768.0, 14199869525.0 / 1410260304.0, -10690763975.0 / 1880347072.0],
        [0.0, 127303824393.0 / 49829197408.0, -318862633887.0 / 49829197408.0, 701980252875.0 / 199316789632.0],
        [0.0, -282668133.0 / 205662961.0, 2019193451.0 / 616988883.0, -1453857185.0 / 822651844.0],
        [0.0, 40617522.0 / 29380423.0, -110615467.0 / 29380423.0, 69997945.0 / 29380423.0],
    ]
)


def _dense_state_deriv(x_old, h, ks, theta):
    """State and derivative of the continuous extension at step fraction theta."""
    powers = theta ** np.arange(1, 5)
    dpowers = np.arange(1, 5) * theta ** np.arange(4)
    coeff = _DP_P @ powers
    dcoeff = _DP_P @ dpowers
    state = x_old + h * np.tensordot(coeff, ks, axes=(0, 0))
    deriv = np.tensordot(dcoeff, ks, axes=(0, 0))
    return state, deriv


@dataclass(frozen=True)
class Trajectory:
    """Adaptive-solver output with dense evaluation between accepted nodes.

    states[k] is the solution at times[k]; derivs[k] = f(times[k], states[k])
    comes free from the FSAL structure and feeds the Hermite interpolant.
    """

    times: np.ndarray
    states: np.ndarray
    derivs: np.ndarray
    solver_tolerance: float
    accepted_steps: int = 0
    rejected_steps: int = 0

    @property
    def end_time(self) -> float:
        return float(self.times[-1])

    @property
    def end_state(self) -> np.ndarray:
        return self.states[-1]

    def at(self, t, kind: str = "hermite"):
        return interpolate(self, t, kind=kind)


@dataclass(frozen=True)
class ExactPath:
    """Closed-form solution exposed with the Trajectory query interface."""

    fn: Callable
    end_time: float = 1.0

    def at(self, t, kind: str = "hermite"):
        return self.fn(t)

    @property
    def end_state(self):
        return self.fn(self.end_time)


def _error_norm(err, x_old, x_new, rtol, atol):
    """Scaled rms over dim, max over any leading batch axes."""
    scale = atol + rtol * np.maximum(np.abs(x_old), np.abs(x_new))
    ratio = err / scale
    per_sample = np.sqrt(np.mean(ratio * ratio, axis=-1))
    return float(np.max(per_sample))


def solve_adaptive(
    f,
    x0,
    rtol: float = 1e-9,
    atol: float = 1e-9,
    t_end: Optional[float] = None,
    t0: float = 0.0,
    h0: float = 1e-3,
    h_min: float = 1e-10,
    h_max: float = 0.5,
    safety: float = 0.9,
    max_steps: int = 100_000,
) -> Trajectory:
    """Integrate to t_end (default f.t_max) with local error control.

    Raises StepUnderflowError if the controller needs a step below h_min,
    MaxStepsExceededError past the attempt budget.
    """
    if t_end is None:
        t_end = getattr(f, "t_max", 1.0)
    if not t_end > t0:
        raise ValueError(f"t_end={t_end} must exceed t0={t0}")
    x = np.asarray(x0, dtype=float)
    t = t0
    h = min(h0, h_max, t_end - t0)

    times = [t0]
    states = [x.copy()]
    k1 = np.asarray(f(t, x), dtype=float)
    derivs = [k1.copy()]
    ks = np.empty((7,) + x.shape)

    accepted = 0
    rejected = 0
    attempts = 0
    err_prev = 1e-4

    while t < t_end:
        if attempts >= max_steps:
            raise MaxStepsExceededError(
                f"no convergence to t={t_end} within {max_steps} step attempts (reached t={t})"
            )
        attempts += 1
        last = t + h >= t_end - 1e-14
        if last:
            h = t_end - t

        ks[0] = k1
        for s in range(1, 7):
            xs = x + h * np.tensordot(_DP_A[s], ks[:s], axes=(0, 0))
            ks[s] = f(t + _DP_C[s] * h, xs)
        x_new = x + h * np.tensordot(_DP_B5, ks, axes=(0, 0))
        err_vec = h * np.tensordot(_DP_ERR, ks, axes=(0, 0))

        if np.all(np.isfinite(x_new)) and np.all(np.isfinite(err_vec)):
            err = _error_norm(err_vec, x, x_new, rtol, atol)
        else:
            err = np.inf

        if err <= 1.0:
            accepted += 1
            t_new = t_end if last else t + h
            # plant interior nodes from the continuous extension so cubic
            # interpolation between stored nodes tracks the solver's accuracy
            for theta in (0.25, 0.5, 0.75):
                t_in = t + theta * h
                if t < t_in < t_new:
                    x_in, u_in = _dense_state_deriv(x, h, ks, theta)
                    times.append(t_in)
                    states.append(x_in)
                    derivs.append(u_in)
            t = t_new
            x = x_new
            # copy: ks is reused, and a later rejected attempt would
            # otherwise overwrite the FSAL stage through this alias
            k1 = ks[6].copy()
            times.append(t)
            states.append(x.copy())
            derivs.append(k1.copy())
            if err == 0.0:
                h = h_max
            else:
                fac = safety * err ** -0.17 * err_prev ** 0.04
                h = h * min(10.0, max(0.2, fac))
                err_prev = max(err, 1e-4)
            h = min(h, h_max)
            h = max(h, h_min)
        else:
            rejected += 1
            shrink = max(0.2, safety * err ** -0.2) if np.isfinite(err) else 0.2
            h = h * shrink
            if h < h_min:
                raise StepUnderflowError(
                    f"step size {h:.3e} fell below h_min={h_min:.1e} at t={t}"
                )

    return Trajectory(
        times=np.asarray(times),
        states=np.asarray(states),
        derivs=np.asarray(derivs),
        solver_tolerance=rtol,
        accepted_steps=accepted,
        rejected_steps=rejected,
    )


def solve_adaptive_batch(f, x0_batch, **kwargs) -> list:
    """Solve a batch under one shared step sequence.

    The shared error norm is the max over batch elements, so every element
    meets the local tolerance.  Returns one Trajectory per element, all on
    the same time grid.
    """
    x0_batch = np.asarray(x0_batch, dtype=float)
    if x0_batch.ndim != 2:
        raise ValueError("x0_batch must have shape (batch, dim)")
    joint = solve_adaptive(f, x0_batch, **kwargs)
    out = []
    for b in range(x0_batch.shape[0]):
        out.append(
            Trajectory(
                times=joint.times,
                states=joint.states[:, b, :],
                derivs=joint.derivs[:, b, :],
                solver_tolerance=joint.solver_tolerance,
                accepted_steps=joint.accepted_steps,
                rejected_steps=joint.rejected_steps,
            )
        )
    return out


def interpolate(traj: Trajectory, t, kind: str = "hermite"):
    """Evaluate a trajectory between nodes.

    Cubic Hermite uses the stored derivatives and keeps interpolation error
    near the solver's own; "linear" is available for diagnostics only.
    Queries outside [times[0], end_time] raise OutOfDomainError.
    """
    times = traj.times
    t = float(t)
    slack = 1e-12
    if t < times[0] - slack or t > times[-1] + slack:
        raise OutOfDomainError(
            f"query t={t} outside trajectory range [{times[0]}, {times[-1]}]"
        )
    t = min(max(t, float(times[0])), float(times[-1]))
    idx = int(np.searchsorted(times, t, side="right")) - 1
    idx = min(max(idx, 0), len(times) - 2)
    t0, t1 = times[idx], times[idx + 1]
    h = t1 - t0
    s = (t - t0) / h
    y0, y1 = traj.states[idx], traj.states[idx + 1]
    if kind == "linear":
        return (1.0 - s) * y0 + s * y1
    if kind != "hermite":
        raise ValueError(f"unknown interpolation kind '{kind}'")
    f0, f1 = traj.derivs[idx], traj.derivs[idx + 1]
    s2 = s * s
    s3 = s2 * s
    return (
        (2.0 * s3 - 3.0 * s2 + 1.0) * y0
        + (s3 - 2.0 * s2 + s) * h * f0
        + (-2.0 * s3 + 3.0 * s2) * y1
        + (s3 - s2) * h * f1
    )


def save_trajectory(path, traj: Trajectory):
    np.savez(
        path,
        times=traj.times,
        states=traj.states,
        derivs=traj.derivs,
        solver_tolerance=np.asarray(traj.solver_tolerance),
        accepted_steps=np.asarray(traj.accepted_steps),
        rejected_steps=np.asarray(traj.rejected_steps),
    )


def load_trajectory(path) -> Trajectory:
    with np.load(path) as data:
        return Trajectory(
            times=data["times"],
            states=data["states"],
            derivs=data["derivs"],
            solver_tolerance=float(data["solver_tolerance"]),
            accepted_steps=int(data["accepted_steps"]),
            rejected_steps=int(data["rejected_steps"]),
        )
