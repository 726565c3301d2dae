"""Parameterized scale-time schemes and the solver steps they induce.

A scheme transforms the sampling interval r in [0, 1] by a strictly
increasing time map t_r (t_0 = 0, t_1 = 1) and a positive scaling s_r
(s_0 = 1), turning a trajectory x(t) into x_bar(r) = s_r x(t_r).  The
transformed velocity is

    u_bar_r(x) = (sdot_r / s_r) x + tdot_r s_r u(t_r, x / s_r),

and one plain RK step on u_bar, conjugated back to original coordinates,
yields the bespoke update.  With n steps of size h = 1/n the updates are

  rk1:  x_{i+1} = [(s_i + h sdot_i) x_i + h tdot_i s_i u(t_i, x_i)] / s_{i+1}

  rk2:  z_i     = (s_i + (h/2) sdot_i) x_i + (h/2) s_i tdot_i u(t_i, x_i)
        x_{i+1} = (s_i/s_{i+1}) x_i
                  + (h/s_{i+1}) [ (sdot_{i+1/2}/s_{i+1/2}) z_i
                                  + tdot_{i+1/2} s_{i+1/2} u(t_{i+1/2}, z_i/s_{i+1/2}) ].

Free parameters are one value per grid node: time increments (through
absolute value and normalization), time speeds tdot > 0 (absolute value),
log scales (s = exp), and scale speeds sdot (unconstrained).  The first
node is pinned (t=0, s=1) and the final time increment is fixed at 1, so
an n-step scheme has 4n-1 (rk1) or 8n-1 (rk2) parameters.  Setting every
free time parameter to 1 and every scale parameter to 0 reproduces the
plain solver on the uniform grid exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import CubicSpline, PchipInterpolator

from .errors import DegenerateGridError, DivergenceError, SchemeFormatError

__all__ = [
    "BASE_KINDS",
    "MIN_NODE_GAP",
    "SchemeParams",
    "SchemeGrids",
    "GridJacobian",
    "identity_params",
    "random_scheme_params",
    "materialize",
    "materialize_with_jacobian",
    "transformed_field_at_node",
    "bespoke_rk1_step",
    "bespoke_rk2_step",
    "step_theta",
    "bespoke_rollout",
    "bespoke_sample",
    "SmoothScheme",
    "random_smooth_scheme",
    "save_scheme",
    "load_scheme",
]

BASE_KINDS = ("rk1", "rk2")
# nodes per unit step: rk2 carries midpoint nodes
_NODES_PER_STEP = {"rk1": 1, "rk2": 2}
MIN_NODE_GAP = 1e-6
SCHEME_FORMAT_VERSION = 1
DIVERGENCE_FACTOR = 1e6


def _segments(base_kind: str, n: int) -> int:
    if base_kind not in BASE_KINDS:
        raise ValueError(f"base_kind must be one of {BASE_KINDS}, got '{base_kind}'")
    if n < 1:
        raise ValueError("step count n must be >= 1")
    return n * _NODES_PER_STEP[base_kind]


@dataclass(frozen=True)
class SchemeParams:
    """Raw parameters theta for an n-step scheme of the given base kind.

    Shapes (K = n segments for rk1, 2n for rk2): theta_t (K-1,),
    theta_dt (K,), theta_s (K,), theta_ds (K,).
    """

    base_kind: str
    n: int
    theta_t: np.ndarray
    theta_dt: np.ndarray
    theta_s: np.ndarray
    theta_ds: np.ndarray

    def __post_init__(self):
        k = _segments(self.base_kind, self.n)
        for attr, size in (
            ("theta_t", k - 1),
            ("theta_dt", k),
            ("theta_s", k),
            ("theta_ds", k),
        ):
            arr = np.asarray(getattr(self, attr), dtype=float)
            if arr.shape != (size,):
                raise ValueError(f"{attr} must have shape ({size},), got {arr.shape}")
            object.__setattr__(self, attr, arr)

    @property
    def segments(self) -> int:
        return _segments(self.base_kind, self.n)

    @property
    def n_params(self) -> int:
        return 4 * self.segments - 1

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.theta_t, self.theta_dt, self.theta_s, self.theta_ds])

    @classmethod
    def from_vector(cls, base_kind: str, n: int, vec) -> "SchemeParams":
        k = _segments(base_kind, n)
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (4 * k - 1,):
            raise ValueError(f"parameter vector must have shape ({4 * k - 1},)")
        return cls(
            base_kind=base_kind,
            n=n,
            theta_t=vec[: k - 1],
            theta_dt=vec[k - 1 : 2 * k - 1],
            theta_s=vec[2 * k - 1 : 3 * k - 1],
            theta_ds=vec[3 * k - 1 :],
        )


def identity_params(base_kind: str, n: int) -> SchemeParams:
    """Parameters materializing to the plain solver on the uniform grid."""
    k = _segments(base_kind, n)
    return SchemeParams(
        base_kind=base_kind,
        n=n,
        theta_t=np.ones(k - 1),
        theta_dt=np.ones(k),
        theta_s=np.zeros(k),
        theta_ds=np.zeros(k),
    )


def random_scheme_params(
    rng: np.random.Generator, base_kind: str, n: int, spread: float = 0.5
) -> SchemeParams:
    """Random valid parameters near identity; spread controls deviation."""
    k = _segments(base_kind, n)
    return SchemeParams(
        base_kind=base_kind,
        n=n,
        theta_t=np.exp(rng.uniform(-spread, spread, k - 1)),
        theta_dt=np.exp(rng.uniform(-spread, spread, k)),
        theta_s=rng.uniform(-spread, spread, k),
        theta_ds=rng.uniform(-2.0 * spread, 2.0 * spread, k),
    )


@dataclass(frozen=True)
class SchemeGrids:
    """Materialized node values.

    t and s live on the K+1 grid nodes (including both endpoints); dt and
    ds on the K nodes where steps launch (final node excluded).  For rk2,
    array position 2i is step node i and position 2i+1 is its midpoint.
    """

    base_kind: str
    n: int
    t: np.ndarray
    dt: np.ndarray
    s: np.ndarray
    ds: np.ndarray

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def segments(self) -> int:
        return _segments(self.base_kind, self.n)

    @property
    def nodes(self) -> np.ndarray:
        """Node positions in r-space: 0, 1, ..., n (rk1) or 0, 1/2, 1, ... (rk2)."""
        return np.arange(self.segments + 1) / _NODES_PER_STEP[self.base_kind]

    def step_times(self) -> np.ndarray:
        """t at the integer nodes t_0, ..., t_n."""
        stride = _NODES_PER_STEP[self.base_kind]
        return self.t[::stride]


def _validate_grids(base_kind, n, t, dt, s, ds):
    k = _segments(base_kind, n)
    for name, arr, size in (("t", t, k + 1), ("dt", dt, k), ("s", s, k + 1), ("ds", ds, k)):
        if arr.shape != (size,):
            raise DegenerateGridError(f"grid {name} must have shape ({size},), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DegenerateGridError(f"grid {name} contains non-finite values")
    gaps = np.diff(t)
    if gaps.min() < MIN_NODE_GAP:
        raise DegenerateGridError(
            f"time grid nearly collapsed: min node gap {gaps.min():.3e} < {MIN_NODE_GAP:.1e}"
        )
    if np.any(dt <= 0.0):
        raise DegenerateGridError("time speed grid must be strictly positive")
    if np.any(s <= 0.0):
        raise DegenerateGridError("scale grid must be strictly positive")


def materialize(params: SchemeParams) -> SchemeGrids:
    """Map raw parameters to node grids.

    Increments |theta_t| (plus a fixed final increment of 1) are normalized
    to a strictly increasing time grid with t_0 = 0 and t_K = 1;
    tdot = |theta_dt|, s = exp(theta_s) with s_0 = 1, sdot = theta_ds.
    Raises DegenerateGridError for collapsed grids or zero time speeds.
    """
    inc = np.concatenate([np.abs(params.theta_t), [1.0]])
    if not np.all(np.isfinite(inc)):
        raise DegenerateGridError("time increments contain non-finite values")
    total = inc.sum()
    t = np.concatenate([[0.0], np.cumsum(inc) / total])
    t[-1] = 1.0
    dt = np.abs(params.theta_dt)
    # overflow to inf is fine here, the grid validation below rejects it
    with np.errstate(over="ignore"):
        s = np.concatenate([[1.0], np.exp(params.theta_s)])
    ds = params.theta_ds.copy()
    _validate_grids(params.base_kind, params.n, t, dt, s, ds)
    return SchemeGrids(base_kind=params.base_kind, n=params.n, t=t, dt=dt, s=s, ds=ds)


@dataclass(frozen=True)
class GridJacobian:
    """Derivatives of the materialized grids w.r.t. the flat parameter vector.

    Shapes: t (K+1, p), dt (K, p), s (K+1, p), ds (K, p) for p = 4K - 1.
    """

    t: np.ndarray
    dt: np.ndarray
    s: np.ndarray
    ds: np.ndarray


def materialize_with_jacobian(params: SchemeParams):
    """materialize plus exact grid derivatives for forward sensitivities.

    The absolute values in the parameterization use sign(0) = 0 at their
    kink, matching what a symmetric difference computes there.
    """
    grids = materialize(params)
    k = params.segments
    p = 4 * k - 1

    t_jac = np.zeros((k + 1, p))
    inc = np.concatenate([np.abs(params.theta_t), [1.0]])
    total = inc.sum()
    sign_t = np.sign(params.theta_t)
    # t_pos = cum_pos / total; d t_pos / d inc_m = (1{m < pos} - t_pos) / total
    for m in range(k - 1):
        contrib = (np.arange(k + 1) > m).astype(float)
        t_jac[:, m] = sign_t[m] * (contrib - grids.t) / total

    dt_jac = np.zeros((k, p))
    dt_jac[:, k - 1 : 2 * k - 1] = np.diag(np.sign(params.theta_dt))

    s_jac = np.zeros((k + 1, p))
    s_jac[1:, 2 * k - 1 : 3 * k - 1] = np.diag(grids.s[1:])

    ds_jac = np.zeros((k, p))
    ds_jac[:, 3 * k - 1 :] = np.eye(k)

    return grids, GridJacobian(t=t_jac, dt=dt_jac, s=s_jac, ds=ds_jac)


def transformed_field_at_node(grids: SchemeGrids, pos: int, f, x):
    """Evaluate u_bar at grid node pos on transformed-space state x.

    Defined for pos < K only: the final node carries no speed values.
    """
    if not 0 <= pos < grids.segments:
        raise IndexError(f"node position {pos} outside [0, {grids.segments})")
    s = grids.s[pos]
    return (grids.ds[pos] / s) * x + grids.dt[pos] * s * f(grids.t[pos], x / s)


def bespoke_rk1_step(grids: SchemeGrids, i: int, x, f):
    """One learned Euler step from step node i, in original coordinates."""
    if grids.base_kind != "rk1":
        raise ValueError(f"rk1 step on a '{grids.base_kind}' scheme")
    h = grids.h
    s0, s1 = grids.s[i], grids.s[i + 1]
    a = (s0 + h * grids.ds[i]) / s1
    b = h * grids.dt[i] * s0 / s1
    return a * x + b * f(grids.t[i], x)


def bespoke_rk2_step(grids: SchemeGrids, i: int, x, f):
    """One learned midpoint step from step node i, in original coordinates."""
    if grids.base_kind != "rk2":
        raise ValueError(f"rk2 step on a '{grids.base_kind}' scheme")
    h = grids.h
    i0, im, i1 = 2 * i, 2 * i + 1, 2 * i + 2
    s0, sm, s1 = grids.s[i0], grids.s[im], grids.s[i1]
    z = (s0 + 0.5 * h * grids.ds[i0]) * x + 0.5 * h * s0 * grids.dt[i0] * f(grids.t[i0], x)
    w = (grids.ds[im] / sm) * z + grids.dt[im] * sm * f(grids.t[im], z / sm)
    return (s0 / s1) * x + (h / s1) * w


def step_theta(grids: SchemeGrids, i: int, x, f):
    """One bespoke step of the scheme's base kind from step node i."""
    if not 0 <= i < grids.n:
        raise IndexError(f"step index {i} outside [0, {grids.n})")
    if grids.base_kind == "rk1":
        return bespoke_rk1_step(grids, i, x, f)
    return bespoke_rk2_step(grids, i, x, f)


def _check_divergence(x, bound, step):
    norms = np.linalg.norm(np.asarray(x, dtype=float), axis=-1)
    if not np.all(np.isfinite(norms)) or norms.max() > bound:
        raise DivergenceError(
            f"rollout state norm {norms.max():.3e} exceeded guard {bound:.3e} at step {step}",
            step=step,
        )


def bespoke_rollout(grids: SchemeGrids, f, x0) -> np.ndarray:
    """All n+1 step-node states from iterating step_theta in x-space."""
    x = np.asarray(x0, dtype=float)
    bound = DIVERGENCE_FACTOR * (1.0 + float(np.linalg.norm(x, axis=-1).max()))
    states = np.empty((grids.n + 1,) + x.shape)
    states[0] = x
    for i in range(grids.n):
        x = step_theta(grids, i, x, f)
        _check_divergence(x, bound, i + 1)
        states[i + 1] = x
    return states


def bespoke_sample(grids: SchemeGrids, f, x0) -> np.ndarray:
    """Endpoint sample via plain RK steps on u_bar in transformed space.

    Equivalent to bespoke_rollout's endpoint up to roundoff; kept separate
    because it is the form a sampler actually runs.
    """
    xb = np.asarray(x0, dtype=float).copy()
    bound = DIVERGENCE_FACTOR * (1.0 + float(np.linalg.norm(xb, axis=-1).max()))
    h = grids.h
    stride = _NODES_PER_STEP[grids.base_kind]
    for i in range(grids.n):
        if grids.base_kind == "rk1":
            xb = xb + h * transformed_field_at_node(grids, i, f, xb)
        else:
            mid = xb + 0.5 * h * transformed_field_at_node(grids, stride * i, f, xb)
            xb = xb + h * transformed_field_at_node(grids, stride * i + 1, f, mid)
        _check_divergence(xb, bound * grids.s[stride * (i + 1)], i + 1)
    return xb / grids.s[-1]


# --- smooth scheme family for order measurements ---


@dataclass(frozen=True)
class SmoothScheme:
    """Continuous scale-time maps; discretized at any step count.

    t_fn must be a strictly increasing C^1 bijection of [0, 1] and s_fn a
    positive C^1 function with s_fn(0) = 1, so every discretization lies in
    the valid scheme family.
    """

    t_fn: Callable
    dt_fn: Callable
    s_fn: Callable
    ds_fn: Callable

    def grids(self, base_kind: str, n: int) -> SchemeGrids:
        k = _segments(base_kind, n)
        r = np.arange(k + 1) / k
        t = np.asarray(self.t_fn(r), dtype=float)
        t[0] = 0.0
        t[-1] = 1.0
        dt = np.asarray(self.dt_fn(r[:k]), dtype=float)
        s = np.asarray(self.s_fn(r), dtype=float)
        s[0] = 1.0
        ds = np.asarray(self.ds_fn(r[:k]), dtype=float)
        _validate_grids(base_kind, n, t, dt, s, ds)
        return SchemeGrids(base_kind=base_kind, n=n, t=t, dt=dt, s=s, ds=ds)


def random_smooth_scheme(
    rng: np.random.Generator,
    knots: int = 4,
    scale_amp: float = 0.3,
    inc_lo: float = 0.55,
    blend: float = 0.25,
) -> SmoothScheme:
    """Random member of the smooth family.

    The time map mixes a shape-preserving monotone cubic through random
    knot values with the identity (fraction `blend`), which keeps the
    speed bounded away from zero; the log scale is a natural cubic spline
    pinned to 0 at r = 0.  Few knots keep the warp features wide enough
    for coarse grids (n = 5) to resolve, which convergence studies over a
    fixed step-count window need.
    """
    r_knots = np.linspace(0.0, 1.0, knots)
    inc = inc_lo + rng.uniform(0.0, 1.0, knots - 1)
    t_vals = np.concatenate([[0.0], np.cumsum(inc)]) / inc.sum()
    t_spline = PchipInterpolator(r_knots, t_vals)
    dt_spline = t_spline.derivative()

    g_vals = rng.uniform(-scale_amp, scale_amp, knots)
    g_vals[0] = 0.0
    g_spline = CubicSpline(r_knots, g_vals, bc_type="natural")
    dg_spline = g_spline.derivative()

    def t_fn(r):
        return (1.0 - blend) * t_spline(r) + blend * np.asarray(r, dtype=float)

    def dt_fn(r):
        return (1.0 - blend) * dt_spline(r) + blend

    def s_fn(r):
        return np.exp(g_spline(r))

    def ds_fn(r):
        return np.exp(g_spline(r)) * dg_spline(r)

    return SmoothScheme(t_fn=t_fn, dt_fn=dt_fn, s_fn=s_fn, ds_fn=ds_fn)


# --- scheme files ---


def save_scheme(path, params: SchemeParams, metadata: Optional[dict] = None):
    """Write a scheme to JSON; stable key order, exact float round trip."""
    grids = materialize(params)
    doc = {
        "format_version": SCHEME_FORMAT_VERSION,
        "base_kind": params.base_kind,
        "n": params.n,
        "theta": {
            "t": params.theta_t.tolist(),
            "dt": params.theta_dt.tolist(),
            "s": params.theta_s.tolist(),
            "ds": params.theta_ds.tolist(),
        },
        "grids": {
            "t": grids.t.tolist(),
            "dt": grids.dt.tolist(),
            "s": grids.s.tolist(),
            "ds": grids.ds.tolist(),
        },
        "metadata": metadata or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_scheme(path):
    """Read a scheme file; returns (SchemeParams, metadata dict).

    Raises SchemeFormatError on parse failures, missing keys, or an
    unsupported format version.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemeFormatError(f"scheme file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemeFormatError(f"scheme file {path} must hold a JSON object")
    version = doc.get("format_version")
    if version != SCHEME_FORMAT_VERSION:
        raise SchemeFormatError(
            f"scheme file {path} has format_version {version!r}, "
            f"this build reads only {SCHEME_FORMAT_VERSION}"
        )
    try:
        theta = doc["theta"]
        params = SchemeParams(
            base_kind=doc["base_kind"],
            n=int(doc["n"]),
            theta_t=np.asarray(theta["t"], dtype=float),
            theta_dt=np.asarray(theta["dt"], dtype=float),
            theta_s=np.asarray(theta["s"], dtype=float),
            theta_ds=np.asarray(theta["ds"], dtype=float),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemeFormatError(f"scheme file {path} is malformed: {exc}") from exc
    return params, doc.get("metadata", {})
