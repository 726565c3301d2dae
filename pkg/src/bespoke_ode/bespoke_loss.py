"""Upper-bound training loss for bespoke schemes.

Global endpoint error of an n-step rollout obeys the recursion
e_{i+1} <= d_{i+1} + L_i e_i, where d_i is the local error of step i
launched from the reference trajectory and L_i a Lipschitz bound on the
step map.  Unrolling gives

    e_n <= sum_i M_i d_i,   M_i = prod_{j > i} L_j,

and the right-hand side, averaged over a batch of reference trajectories,
is the training loss: a differentiable upper bound on RMSE.

Reference points enter through frozen linearizations ("anchors"): once per
batch the reference state x(t_i) and velocity u(t_i, x(t_i)) are captured
at the current step times and treated as constants, so gradient probes see
the reference move linearly as the time grid shifts instead of re-solving
the ODE.  Anchor times are clamped to the field's last regular time; the
linearization extends the final target to t = 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .bespoke_scheme import (
    GridJacobian,
    SchemeGrids,
    SchemeParams,
    bespoke_sample,
    materialize_with_jacobian,
    step_theta,
)

__all__ = [
    "rms_norm",
    "AnchorSet",
    "capture_anchors",
    "aux_target",
    "local_errors",
    "node_lipschitz",
    "step_lipschitz",
    "suffix_products",
    "LossBreakdown",
    "bespoke_loss",
    "bespoke_loss_gradient",
    "rmse_global",
]


def rms_norm(x, axis: int = -1):
    """Per-dimension root mean square along `axis`."""
    x = np.asarray(x, dtype=float)
    out = np.sqrt(np.mean(x * x, axis=axis))
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class AnchorSet:
    """Frozen reference linearizations at the scheme's step times.

    times[i] is the (possibly end-clamped) capture time, states[b, i] the
    reference state of trajectory b there, derivs[b, i] the field value.
    """

    times: np.ndarray
    states: np.ndarray
    derivs: np.ndarray

    @property
    def batch(self) -> int:
        return self.states.shape[0]


def capture_anchors(paths, f, step_times) -> AnchorSet:
    """Capture anchor states and velocities for a batch of reference paths.

    Capture times are min(t_i, path end, field t_max); a query beyond the
    capture time (only the data endpoint t_n = 1 in practice) is served by
    the linearization.
    """
    if not isinstance(paths, (list, tuple)):
        paths = [paths]
    step_times = np.asarray(step_times, dtype=float)
    t_cap = min(min(p.end_time for p in paths), f.t_max)
    times = np.minimum(step_times, t_cap)
    states = np.stack([[p.at(t) for t in times] for p in paths])
    derivs = np.empty_like(states)
    for i, t in enumerate(times):
        derivs[:, i] = f(t, states[:, i])
    return AnchorSet(times=times, states=states, derivs=derivs)


def aux_target(anchors: AnchorSet, i: int, t: float) -> np.ndarray:
    """Linearized reference at query time t around anchor i, shape (B, d)."""
    return anchors.states[:, i] + anchors.derivs[:, i] * (t - anchors.times[i])


def local_errors(
    grids: SchemeGrids, f, paths=None, anchors: Optional[AnchorSet] = None, use_aux: bool = True
) -> np.ndarray:
    """Per-step local errors d, shape (batch, n).

    Step i launches from the reference at t_i and is scored against the
    reference at t_{i+1}.  With use_aux both points come from the anchor
    linearizations (the differentiable convention); without it they are raw
    path queries clamped to the path end, for diagnostics.
    """
    step_times = grids.step_times()
    if use_aux:
        if anchors is None:
            anchors = capture_anchors(paths, f, step_times)
        launches = [aux_target(anchors, i, step_times[i]) for i in range(grids.n + 1)]
        targets = launches
    else:
        if paths is None:
            raise ValueError("raw-path mode needs the reference paths")
        if not isinstance(paths, (list, tuple)):
            paths = [paths]
        t_cap = min(min(p.end_time for p in paths), f.t_max)
        launches = [
            np.stack([p.at(min(t, t_cap)) for p in paths]) for t in step_times
        ]
        targets = launches
    d = np.empty((launches[0].shape[0], grids.n))
    for i in range(grids.n):
        pred = step_theta(grids, i, launches[i], f)
        d[:, i] = rms_norm(targets[i + 1] - pred)
    return d


def node_lipschitz(grids: SchemeGrids, pos: int, l_tau: float) -> float:
    """Lipschitz bound |sdot|/s + tdot * l_tau of u_bar at grid node pos."""
    return abs(grids.ds[pos]) / grids.s[pos] + grids.dt[pos] * l_tau


def step_lipschitz(grids: SchemeGrids, i: int, l_tau: float) -> float:
    """Lipschitz bound L_i of the step map from node i.

    rk1: (s_i/s_{i+1}) (1 + h lip_i)
    rk2: (s_i/s_{i+1}) (1 + h lip_{i+1/2} (1 + (h/2) lip_i))
    """
    h = grids.h
    if grids.base_kind == "rk1":
        return (grids.s[i] / grids.s[i + 1]) * (1.0 + h * node_lipschitz(grids, i, l_tau))
    i0, im, i1 = 2 * i, 2 * i + 1, 2 * i + 2
    lip0 = node_lipschitz(grids, i0, l_tau)
    lipm = node_lipschitz(grids, im, l_tau)
    return (grids.s[i0] / grids.s[i1]) * (1.0 + h * lipm * (1.0 + 0.5 * h * lip0))


def suffix_products(step_l: np.ndarray) -> np.ndarray:
    """Weights M with M[i] = prod of step_l after index i (empty product 1).

    step_l[0] never enters: errors made entering node 1 are amplified only
    by the steps that follow.
    """
    n = len(step_l)
    m = np.ones(n)
    for i in range(n - 2, -1, -1):
        m[i] = m[i + 1] * step_l[i + 1]
    return m


@dataclass
class LossBreakdown:
    """Loss value with the pieces that built it (batch means)."""

    total: float
    d: np.ndarray
    step_l: np.ndarray
    weights: np.ndarray
    global_rmse: Optional[float] = None

    def to_json_dict(self) -> dict:
        return {
            "total": self.total,
            "local_errors": self.d.tolist(),
            "step_lipschitz": self.step_l.tolist(),
            "weights": self.weights.tolist(),
            "global_rmse": self.global_rmse,
        }


def bespoke_loss(
    grids: SchemeGrids,
    f,
    paths=None,
    l_tau: float = 1.0,
    anchors: Optional[AnchorSet] = None,
    use_aux: bool = True,
    compute_global: bool = False,
) -> LossBreakdown:
    """Batch-mean upper bound sum_i M_i d_i with its breakdown.

    compute_global additionally rolls the scheme out from each reference
    start point and records the realized endpoint RMSE (the quantity the
    loss bounds, against the same end-linearized targets).
    """
    step_times = grids.step_times()
    if use_aux and anchors is None:
        anchors = capture_anchors(paths, f, step_times)
    d = local_errors(grids, f, paths=paths, anchors=anchors, use_aux=use_aux)
    step_l = np.array([step_lipschitz(grids, i, l_tau) for i in range(grids.n)])
    weights = suffix_products(step_l)
    d_mean = d.mean(axis=0)
    total = float(np.dot(weights, d_mean))
    global_rmse = None
    if compute_global:
        if anchors is not None:
            starts = anchors.states[:, 0]
            ends = aux_target(anchors, grids.n, step_times[-1])
        else:
            if not isinstance(paths, (list, tuple)):
                paths = [paths]
            t_cap = min(min(p.end_time for p in paths), f.t_max)
            starts = np.stack([p.at(0.0) for p in paths])
            ends = np.stack([p.at(min(step_times[-1], t_cap)) for p in paths])
        finals = bespoke_sample(grids, f, starts)
        global_rmse = float(np.mean(rms_norm(ends - finals)))
    return LossBreakdown(
        total=total, d=d_mean, step_l=step_l, weights=weights, global_rmse=global_rmse
    )


def rmse_global(grids: SchemeGrids, f, x0_batch, reference_endpoints) -> float:
    """Batch-mean RMSE of scheme endpoints against reference endpoints."""
    finals = bespoke_sample(grids, f, np.asarray(x0_batch, dtype=float))
    return float(np.mean(rms_norm(np.asarray(reference_endpoints, dtype=float) - finals)))


# --- forward-mode gradient ---
#
# Tangents T have shape (batch, p, dim): T[b, q] = d state[b] / d theta_q.
# Scalar grid coefficients carry (p,) gradients from GridJacobian; anchors
# are constants except through the query times of the linearizations.


def _outer(vec, grad):
    """(B, d) state times (p,) coefficient gradient -> (B, p, d) tangent."""
    return vec[:, None, :] * grad[None, :, None]


def _field_tangent(f, t, x, tx, t_grad):
    """Tangent of u(t(theta), x(theta)) given state tangent tx and dt/dtheta."""
    jac = f.jac_x(t, x)
    out = np.einsum("bij,bpj->bpi", jac, tx)
    if np.any(t_grad != 0.0):
        out = out + _outer(f.dt(t, x), t_grad)
    return out


def _step_tangent_rk1(grids, gj: GridJacobian, i, x, tx, f):
    h = grids.h
    s0, s1 = grids.s[i], grids.s[i + 1]
    gs0, gs1 = gj.s[i], gj.s[i + 1]
    a = (s0 + h * grids.ds[i]) / s1
    b = h * grids.dt[i] * s0 / s1
    ga = (gs0 + h * gj.ds[i]) / s1 - a * gs1 / s1
    gb = h * (gj.dt[i] * s0 + grids.dt[i] * gs0) / s1 - b * gs1 / s1
    u = f(grids.t[i], x)
    tu = _field_tangent(f, grids.t[i], x, tx, gj.t[i])
    y = a * x + b * u
    ty = a * tx + _outer(x, ga) + b * tu + _outer(u, gb)
    return y, ty


def _step_tangent_rk2(grids, gj: GridJacobian, i, x, tx, f):
    h = grids.h
    i0, im, i1 = 2 * i, 2 * i + 1, 2 * i + 2
    s0, sm, s1 = grids.s[i0], grids.s[im], grids.s[i1]
    gs0, gsm, gs1 = gj.s[i0], gj.s[im], gj.s[i1]
    dt0, dtm = grids.dt[i0], grids.dt[im]
    ds0, dsm = grids.ds[i0], grids.ds[im]

    u0 = f(grids.t[i0], x)
    tu0 = _field_tangent(f, grids.t[i0], x, tx, gj.t[i0])

    c1 = s0 + 0.5 * h * ds0
    gc1 = gs0 + 0.5 * h * gj.ds[i0]
    c2 = 0.5 * h * s0 * dt0
    gc2 = 0.5 * h * (gs0 * dt0 + s0 * gj.dt[i0])
    z = c1 * x + c2 * u0
    tz = c1 * tx + _outer(x, gc1) + c2 * tu0 + _outer(u0, gc2)

    arg = z / sm
    targ = tz / sm - _outer(z, gsm / (sm * sm))
    um = f(grids.t[im], arg)
    tum = _field_tangent(f, grids.t[im], arg, targ, gj.t[im])

    a1 = dsm / sm
    ga1 = gj.ds[im] / sm - dsm * gsm / (sm * sm)
    a2 = dtm * sm
    ga2 = gj.dt[im] * sm + dtm * gsm
    w = a1 * z + a2 * um
    tw = a1 * tz + _outer(z, ga1) + a2 * tum + _outer(um, ga2)

    b1 = s0 / s1
    gb1 = gs0 / s1 - s0 * gs1 / (s1 * s1)
    b2 = h / s1
    gb2 = -h * gs1 / (s1 * s1)
    y = b1 * x + b2 * w
    ty = b1 * tx + _outer(x, gb1) + b2 * tw + _outer(w, gb2)
    return y, ty


def _lipschitz_with_grad(grids, gj: GridJacobian, l_tau):
    """Step Lipschitz bounds (n,) and their parameter gradients (n, p)."""
    h = grids.h
    p = gj.t.shape[1]
    n = grids.n
    lips = np.empty(n)
    grads = np.empty((n, p))

    def node(pos):
        s, ds, dt = grids.s[pos], grids.ds[pos], grids.dt[pos]
        val = abs(ds) / s + dt * l_tau
        grad = np.sign(ds) * gj.ds[pos] / s - abs(ds) * gj.s[pos] / (s * s) + gj.dt[pos] * l_tau
        return val, grad

    for i in range(n):
        if grids.base_kind == "rk1":
            i0, i1 = i, i + 1
            lip, glip = node(i)
            bracket = 1.0 + h * lip
            gbracket = h * glip
        else:
            i0, i1 = 2 * i, 2 * i + 2
            lip0, glip0 = node(2 * i)
            lipm, glipm = node(2 * i + 1)
            inner = 1.0 + 0.5 * h * lip0
            bracket = 1.0 + h * lipm * inner
            gbracket = h * (glipm * inner + lipm * 0.5 * h * glip0)
        s0, s1 = grids.s[i0], grids.s[i1]
        ratio = s0 / s1
        gratio = gj.s[i0] / s1 - ratio * gj.s[i1] / s1
        lips[i] = ratio * bracket
        grads[i] = gratio * bracket + ratio * gbracket
    return lips, grads


def bespoke_loss_gradient(params: SchemeParams, f, anchors: AnchorSet, l_tau: float = 1.0):
    """Loss and its exact gradient w.r.t. the flat parameter vector.

    Forward-mode: tangents of every state are propagated through the step
    recursion using the field's analytic Jacobian and time derivative.
    Anchors must be pre-captured and are held fixed, exactly as in the
    finite-difference engine.
    """
    grids, gj = materialize_with_jacobian(params)
    n = grids.n
    p = params.n_params
    stride = 2 if grids.base_kind == "rk2" else 1
    t_int = grids.step_times()
    t_int_jac = gj.t[::stride]
    batch, _, dim = anchors.states.shape

    step_l, step_l_grad = _lipschitz_with_grad(grids, gj, l_tau)
    weights = suffix_products(step_l)
    # d M_i = M_i * sum_{j>i} dL_j / L_j
    ratio_grads = step_l_grad / step_l[:, None]
    weight_grads = np.zeros((n, p))
    acc = np.zeros(p)
    for i in range(n - 2, -1, -1):
        acc = acc + ratio_grads[i + 1]
        weight_grads[i] = weights[i] * acc

    total = 0.0
    grad = np.zeros(p)
    d_means = np.empty(n)
    for i in range(n):
        x = anchors.states[:, i] + anchors.derivs[:, i] * (t_int[i] - anchors.times[i])
        tx = _outer(anchors.derivs[:, i], t_int_jac[i])
        if grids.base_kind == "rk1":
            y, ty = _step_tangent_rk1(grids, gj, i, x, tx, f)
        else:
            y, ty = _step_tangent_rk2(grids, gj, i, x, tx, f)
        target = anchors.states[:, i + 1] + anchors.derivs[:, i + 1] * (
            t_int[i + 1] - anchors.times[i + 1]
        )
        ttarget = _outer(anchors.derivs[:, i + 1], t_int_jac[i + 1])
        v = target - y
        tv = ttarget - ty
        d_b = rms_norm(v)
        safe = np.where(d_b > 0.0, d_b, 1.0)
        d_grad_b = np.einsum("bpj,bj->bp", tv, v) / (dim * safe[:, None])
        d_grad_b[d_b == 0.0] = 0.0
        d_mean = float(d_b.mean())
        d_grad = d_grad_b.mean(axis=0)
        d_means[i] = d_mean
        total += weights[i] * d_mean
        grad += weight_grads[i] * d_mean + weights[i] * d_grad

    breakdown = LossBreakdown(total=total, d=d_means, step_l=step_l, weights=weights)
    return total, grad, breakdown
