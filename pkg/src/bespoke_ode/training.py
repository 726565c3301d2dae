"""Gradient-based scheme training against adaptive-solver references.

Each iteration solves (or reuses) a batch of reference trajectories from
standard-normal starts, freezes their anchor linearizations at the current
step times, and takes one Adam step on the upper-bound loss.  Validation
RMSE on a fixed held-out batch selects the parameters that are returned.

Randomness is split into named streams derived from the run seed, so the
reference batches, the validation set, and therefore the whole run are
reproducible regardless of thread count.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .bespoke_loss import (
    bespoke_loss,
    bespoke_loss_gradient,
    capture_anchors,
    rmse_global,
)
from .bespoke_scheme import SchemeParams, identity_params, materialize
from .errors import DegenerateGridError, NumericalAbortError, ProbeFailureError
from .ode_solvers import solve_adaptive_batch

__all__ = [
    "TrainConfig",
    "TrainHistory",
    "AdamState",
    "adam_update",
    "central_fd_gradient",
    "gradient",
    "prepare_gt_batch",
    "train",
]

GRAD_ENGINES = ("forward-sens", "central-fd")
# consecutive invalid Adam proposals tolerated before aborting
MAX_CONSECUTIVE_REJECTS = 3


@dataclass(frozen=True)
class TrainConfig:
    n: int = 5
    base_kind: str = "rk2"
    iterations: int = 2000
    batch_size: int = 64
    learning_rate: float = 2e-3
    l_tau: float = 1.0
    seed: int = 0
    grad_engine: str = "forward-sens"
    fd_epsilon: float = 1e-5
    # 0 keeps one fixed batch for the whole run
    fresh_batch_every: int = 1
    validation_every: int = 50
    validation_size: int = 256
    gt_rtol: float = 1e-9
    gt_atol: float = 1e-9

    def __post_init__(self):
        if self.grad_engine not in GRAD_ENGINES:
            raise ValueError(f"grad_engine must be one of {GRAD_ENGINES}")
        if self.iterations < 0 or self.batch_size < 1 or self.validation_size < 1:
            raise ValueError("iterations must be >= 0 and batch sizes >= 1")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    validations: list = field(default_factory=list)  # (iteration, rmse) pairs
    init_val_rmse: float = float("nan")
    best_val_rmse: float = float("inf")
    best_iteration: int = 0
    rejected_updates: int = 0
    wall_seconds: float = 0.0

    def to_json_dict(self) -> dict:
        return {
            "train_loss": [float(v) for v in self.train_loss],
            "validations": [[int(i), float(r)] for i, r in self.validations],
            "init_val_rmse": float(self.init_val_rmse),
            "best_val_rmse": float(self.best_val_rmse),
            "best_iteration": int(self.best_iteration),
            "rejected_updates": int(self.rejected_updates),
            "wall_seconds": float(self.wall_seconds),
        }


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, dim: int) -> "AdamState":
        return cls(m=np.zeros(dim), v=np.zeros(dim), step=0)


def adam_update(state: AdamState, theta: np.ndarray, grad: np.ndarray, lr: float):
    """One bias-corrected Adam step; returns (theta_new, state_new)."""
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**step)
    v_hat = v / (1.0 - state.beta2**step)
    theta_new = theta - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return theta_new, AdamState(
        m=m, v=v, step=step, beta1=state.beta1, beta2=state.beta2, eps=state.eps
    )


def central_fd_gradient(loss_fn: Callable, theta: np.ndarray, fd_epsilon: float = 1e-5):
    """Symmetric differences with per-coordinate step eps (1 + |theta_k|)."""
    theta = np.asarray(theta, dtype=float)
    grad = np.empty_like(theta)
    for k in range(len(theta)):
        eps = fd_epsilon * (1.0 + abs(theta[k]))
        probe = theta.copy()
        try:
            probe[k] = theta[k] + eps
            hi = loss_fn(probe)
            probe[k] = theta[k] - eps
            lo = loss_fn(probe)
        except DegenerateGridError as exc:
            raise ProbeFailureError(
                f"gradient probe at coordinate {k} left the valid scheme family: {exc}",
                coordinate=k,
            ) from exc
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise ProbeFailureError(
                f"non-finite loss at gradient probe for coordinate {k}", coordinate=k
            )
        grad[k] = (hi - lo) / (2.0 * eps)
    return grad


def gradient(
    params: SchemeParams,
    f,
    anchors,
    l_tau: float = 1.0,
    engine: str = "forward-sens",
    fd_epsilon: float = 1e-5,
):
    """Loss and gradient at params under frozen anchors, via either engine."""
    if engine == "forward-sens":
        loss, grad, _ = bespoke_loss_gradient(params, f, anchors, l_tau)
        bad = ~np.isfinite(grad)
        if bad.any():
            raise ProbeFailureError(
                f"non-finite forward sensitivity at coordinate {int(np.argmax(bad))}",
                coordinate=int(np.argmax(bad)),
            )
        return loss, grad
    if engine != "central-fd":
        raise ValueError(f"unknown gradient engine '{engine}'")

    def loss_at(vec):
        cand = SchemeParams.from_vector(params.base_kind, params.n, vec)
        return bespoke_loss(materialize(cand), f, anchors=anchors, l_tau=l_tau).total

    theta = params.to_vector()
    return loss_at(theta), central_fd_gradient(loss_at, theta, fd_epsilon)


def prepare_gt_batch(f, batch_size: int, seed, rtol: float = 1e-9, atol: Optional[float] = None):
    """Reference trajectories from standard-normal starts; shared time grid."""
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((batch_size, f.dim))
    return solve_adaptive_batch(f, x0, rtol=rtol, atol=atol if atol is not None else rtol)


def train(cfg: TrainConfig, f, gt_provider: Optional[Callable] = None, progress: Optional[Callable] = None):
    """Optimize a scheme for field f; returns (best_params, history).

    Starts at identity, so iterations=0 returns the plain solver.  Invalid
    Adam proposals (outside the scheme family) are rejected without
    advancing the optimizer; MAX_CONSECUTIVE_REJECTS in a row aborts.
    gt_provider(batch_size, seed) may replace the direct adaptive solve,
    e.g. with a disk cache; it must honor the seed exactly.
    """
    t_start = time.perf_counter()
    history = TrainHistory()

    if gt_provider is None:
        def gt_provider(batch_size, seed):
            return prepare_gt_batch(f, batch_size, seed, cfg.gt_rtol, cfg.gt_atol)

    params = identity_params(cfg.base_kind, cfg.n)
    theta = params.to_vector()
    adam = AdamState.init(len(theta))

    val_seed = np.random.SeedSequence(entropy=cfg.seed, spawn_key=(2,))
    val_paths = gt_provider(cfg.validation_size, val_seed)
    x0_val = np.stack([p.states[0] for p in val_paths])
    val_endpoints = np.stack([p.end_state for p in val_paths])

    best_params = params
    history.init_val_rmse = rmse_global(materialize(params), f, x0_val, val_endpoints)
    history.best_val_rmse = history.init_val_rmse
    history.best_iteration = 0
    history.validations.append((0, history.init_val_rmse))

    paths = None
    refresh = 0
    consecutive_rejects = 0
    for it in range(1, cfg.iterations + 1):
        if paths is None or (cfg.fresh_batch_every > 0 and (it - 1) % cfg.fresh_batch_every == 0):
            batch_seed = np.random.SeedSequence(entropy=cfg.seed, spawn_key=(1, refresh))
            paths = gt_provider(cfg.batch_size, batch_seed)
            refresh += 1
        grids = materialize(params)
        anchors = capture_anchors(paths, f, grids.step_times())
        loss, grad = gradient(
            params, f, anchors, cfg.l_tau, engine=cfg.grad_engine, fd_epsilon=cfg.fd_epsilon
        )
        history.train_loss.append(float(loss))

        proposal, adam_next = adam_update(adam, theta, grad, cfg.learning_rate)
        try:
            cand = SchemeParams.from_vector(cfg.base_kind, cfg.n, proposal)
            materialize(cand)
        except DegenerateGridError:
            history.rejected_updates += 1
            consecutive_rejects += 1
            if consecutive_rejects >= MAX_CONSECUTIVE_REJECTS:
                raise NumericalAbortError(
                    f"{consecutive_rejects} consecutive invalid updates at iteration {it}"
                )
            continue
        consecutive_rejects = 0
        theta, adam, params = proposal, adam_next, cand

        if it % cfg.validation_every == 0 or it == cfg.iterations:
            val_rmse = rmse_global(materialize(params), f, x0_val, val_endpoints)
            history.validations.append((it, val_rmse))
            if val_rmse < history.best_val_rmse:
                history.best_val_rmse = val_rmse
                history.best_iteration = it
                best_params = params
        if progress is not None:
            progress(it, float(loss))

    history.wall_seconds = time.perf_counter() - t_start
    return best_params, history
