"""Analytic velocity fields for Gaussian-mixture targets.

For a scheduler (alpha, sigma) and target distribution q, the marginal
probability path p_t = N(alpha_t x_1, sigma_t^2 I) * q admits a velocity
field whose flow transports N(0, I) at t = 0 to q at t = 1:

    u_t(x) = dalpha_t * E[x_1 | x_t = x] + (dsigma_t / sigma_t) * (x - alpha_t * E[x_1 | x_t = x]).

When q is a finite isotropic Gaussian mixture the posterior mean
E[x_1 | x_t = x] is available in closed form, so u_t and its spatial
Jacobian can be evaluated exactly.  These fields stand in for a trained
network: every sampler and training routine in this package sees only the
callable, never the mixture.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

from .errors import SingularTimeError, UnsupportedFieldError
from .schedulers import Scheduler

__all__ = [
    "GaussianMixture",
    "VelocityField",
    "circle_mixture",
    "random_mixture",
    "conditional_field",
    "gmm_marginal_field",
    "affine_standard_field",
    "affine_oracle_solution",
    "lipschitz_estimate",
    "numeric_jacobian",
    "numeric_time_derivative",
]

# Marginal fields blow up like 1/sigma as t -> 1; evaluation stops this far
# from the data endpoint.
END_GAP = 1e-5


@dataclass(frozen=True)
class GaussianMixture:
    """Isotropic Gaussian mixture sum_k w_k N(mu_k, eta_k^2 I)."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        mu = np.asarray(self.means, dtype=float)
        var = np.asarray(self.variances, dtype=float)
        if mu.ndim != 2:
            raise ValueError("means must have shape (components, dim)")
        k = mu.shape[0]
        if w.shape != (k,) or var.shape != (k,):
            raise ValueError("weights and variances must have shape (components,)")
        if np.any(w < 0.0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")
        if np.any(var <= 0.0):
            raise ValueError("component variances must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def components(self) -> int:
        return self.means.shape[0]

    def log_density(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        d = self.dim
        diff = x[..., None, :] - self.means
        sq = np.sum(diff * diff, axis=-1)
        logp = (
            np.log(self.weights)
            - 0.5 * sq / self.variances
            - 0.5 * d * np.log(2.0 * math.pi * self.variances)
        )
        return logsumexp(logp, axis=-1)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        comps = rng.choice(self.components, size=size, p=self.weights)
        eps = rng.standard_normal((size, self.dim))
        return self.means[comps] + np.sqrt(self.variances[comps])[:, None] * eps


def circle_mixture(
    components: int = 5, radius: float = 3.0, variance: float = 0.09, dim: int = 2
) -> GaussianMixture:
    """Equal-weight mixture with means equally spaced on a circle.

    For dim > 2 the circle lives in the first two coordinates.
    """
    if dim < 2:
        raise ValueError("circle mixture needs dim >= 2")
    angles = 2.0 * math.pi * np.arange(components) / components
    means = np.zeros((components, dim))
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    return GaussianMixture(
        weights=np.full(components, 1.0 / components),
        means=means,
        variances=np.full(components, variance),
    )


def random_mixture(
    rng: np.random.Generator,
    components: int,
    dim: int,
    mean_scale: float = 3.0,
    variance_range: tuple = (0.05, 0.5),
) -> GaussianMixture:
    """Random mixture with Dirichlet weights and Gaussian mean placement."""
    w = rng.dirichlet(np.full(components, 2.0))
    means = mean_scale * rng.standard_normal((components, dim))
    var = rng.uniform(*variance_range, size=components)
    return GaussianMixture(weights=w, means=means, variances=var)


@dataclass(frozen=True)
class VelocityField:
    """A time-dependent velocity u(t, x) with optional analytic extras.

    eval accepts x of shape (..., dim) and broadcasts over leading axes.
    jac_x returns the spatial Jacobian with shape (..., dim, dim); dt the
    partial time derivative with shape (..., dim).  t_max marks the largest
    time at which eval is defined (fields built from marginal paths are
    singular at t = 1).
    """

    name: str
    dim: int
    eval: Callable
    jac_x: Optional[Callable] = None
    dt: Optional[Callable] = None
    lipschitz_hint: Optional[float] = None
    t_max: float = 1.0

    def __call__(self, t, x):
        return self.eval(t, x)


def conditional_field(scheduler: Scheduler, x1) -> VelocityField:
    """Velocity of the path conditioned on a single data point x1.

    u(t, x) = (dsigma/sigma) x + (dalpha - dsigma alpha / sigma) x1.
    Linear in x, so the Jacobian is a scalar multiple of the identity.
    """
    x1 = np.atleast_1d(np.asarray(x1, dtype=float))
    d = x1.shape[-1]

    def coeffs(t):
        sig = float(scheduler.sigma(t))
        if sig == 0.0:
            raise SingularTimeError(
                f"conditional field on '{scheduler.name}' undefined at t={t}"
            )
        a = float(scheduler.dsigma(t)) / sig
        b = float(scheduler.dalpha(t)) - a * float(scheduler.alpha(t))
        return a, b

    def u(t, x):
        a, b = coeffs(t)
        return a * np.asarray(x, dtype=float) + b * x1

    def jac(t, x):
        a, _ = coeffs(t)
        x = np.asarray(x, dtype=float)
        eye = a * np.eye(d)
        return np.broadcast_to(eye, x.shape + (d,)).copy()

    def dt(t, x, h=1e-6):
        return (u(t + h, x) - u(t - h, x)) / (2.0 * h)

    return VelocityField(
        name=f"conditional-{scheduler.name}",
        dim=d,
        eval=u,
        jac_x=jac,
        dt=dt,
        t_max=1.0 - END_GAP,
    )


def gmm_marginal_field(scheduler: Scheduler, mixture: GaussianMixture) -> VelocityField:
    """Exact marginal velocity field for a Gaussian-mixture target.

    Component responsibilities are evaluated in log space; the posterior
    mean and its Jacobian come from differentiating the responsibilities.
    """
    w_prior = mixture.weights
    means = mixture.means
    var = mixture.variances
    d = mixture.dim
    log_w = np.log(w_prior)

    def _posterior(t, x):
        """Responsibilities (..., k), posterior component means (..., k, d)."""
        a = float(scheduler.alpha(t))
        sig = float(scheduler.sigma(t))
        c = sig * sig + a * a * var
        diff = x[..., None, :] - a * means
        sq = np.sum(diff * diff, axis=-1)
        logits = log_w - 0.5 * sq / c - 0.5 * d * np.log(c)
        logits = logits - logsumexp(logits, axis=-1, keepdims=True)
        resp = np.exp(logits)
        beta = a * var / c
        comp_means = means + beta[:, None] * diff
        return resp, comp_means, diff, c, beta, a, sig

    def posterior_mean(t, x):
        x = np.asarray(x, dtype=float)
        resp, comp_means, *_ = _posterior(t, x)
        return np.sum(resp[..., None] * comp_means, axis=-2)

    def u(t, x):
        x = np.asarray(x, dtype=float)
        sig = float(scheduler.sigma(t))
        if sig == 0.0:
            raise SingularTimeError(
                f"marginal field on '{scheduler.name}' undefined at t={t}"
            )
        a_coef = float(scheduler.dsigma(t)) / sig
        e1 = posterior_mean(t, x)
        # dalpha*E + (dsigma/sigma)(x - alpha*E); avoids the cancellation in
        # the equivalent (dsigma/sigma) x + (dalpha - dsigma alpha/sigma) E
        # as sigma -> 0.
        return float(scheduler.dalpha(t)) * e1 + a_coef * (x - float(scheduler.alpha(t)) * e1)

    def jac(t, x):
        x = np.asarray(x, dtype=float)
        sig = float(scheduler.sigma(t))
        if sig == 0.0:
            raise SingularTimeError(
                f"marginal field on '{scheduler.name}' undefined at t={t}"
            )
        resp, comp_means, diff, c, beta, a, _ = _posterior(t, x)
        a_coef = float(scheduler.dsigma(t)) / sig
        b_coef = float(scheduler.dalpha(t)) - a_coef * a
        # grad_x log responsibility_k = g_k - sum_j resp_j g_j, g_k = -diff_k / c_k
        g = -diff / c[:, None]
        g_bar = np.sum(resp[..., None] * g, axis=-2)
        smooth = np.sum(resp * beta, axis=-1)
        de = np.einsum("...k,...ki,...kj->...ij", resp, comp_means, g - g_bar[..., None, :])
        de = de + smooth[..., None, None] * np.eye(d)
        return a_coef * np.eye(d) + b_coef * de

    def dt(t, x, h=1e-6):
        return (u(t + h, x) - u(t - h, x)) / (2.0 * h)

    f = VelocityField(
        name=f"gmm-{scheduler.name}",
        dim=d,
        eval=u,
        jac_x=jac,
        dt=dt,
        t_max=1.0 - END_GAP,
    )
    object.__setattr__(f, "posterior_mean", posterior_mean)
    return f


_AFFINE_NAME = "affine-ot-standard"


def affine_standard_field() -> VelocityField:
    """Marginal field for a standard-normal target on the linear path.

    With alpha = t, sigma = 1 - t and q = N(0, I) the posterior mean is
    t x / (t^2 + (1-t)^2), giving the purely radial field

        u(t, x) = a(t) x,   a(t) = (2t - 1) / (t^2 + (1-t)^2),

    regular on all of [0, 1] with exact solution
    x(t) = x(0) sqrt(t^2 + (1-t)^2) and sup_t |a(t)| = 1.
    """

    def c_of(t):
        return t * t + (1.0 - t) * (1.0 - t)

    def a_of(t):
        return (2.0 * t - 1.0) / c_of(t)

    def u(t, x):
        return a_of(t) * np.asarray(x, dtype=float)

    def jac(t, x):
        x = np.asarray(x, dtype=float)
        eye = a_of(t) * np.eye(x.shape[-1])
        return np.broadcast_to(eye, x.shape + (x.shape[-1],)).copy()

    def dt(t, x):
        c = c_of(t)
        da = (2.0 * c - (2.0 * t - 1.0) * (4.0 * t - 2.0)) / (c * c)
        return da * np.asarray(x, dtype=float)

    return VelocityField(
        name=_AFFINE_NAME,
        dim=2,
        eval=u,
        jac_x=jac,
        dt=dt,
        lipschitz_hint=1.0,
        t_max=1.0,
    )


def affine_oracle_solution(f: VelocityField, x0, t):
    """Closed-form flow of the standard affine field: x0 sqrt(t^2 + (1-t)^2).

    Only valid for fields built by affine_standard_field; anything else
    raises UnsupportedFieldError.
    """
    if f.name != _AFFINE_NAME:
        raise UnsupportedFieldError(
            f"closed-form solution known only for '{_AFFINE_NAME}', got '{f.name}'"
        )
    t = np.asarray(t, dtype=float)
    scale = np.sqrt(t * t + (1.0 - t) * (1.0 - t))
    x0 = np.asarray(x0, dtype=float)
    if t.ndim == 0:
        return scale * x0
    return scale[..., None] * x0


def numeric_jacobian(f: VelocityField, t: float, x, h: float = 1e-6) -> np.ndarray:
    """Central-difference spatial Jacobian, shape (..., dim, dim)."""
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    cols = []
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        cols.append((f(t, x + e) - f(t, x - e)) / (2.0 * h))
    return np.stack(cols, axis=-1)


def numeric_time_derivative(f: VelocityField, t: float, x, h: float = 1e-6) -> np.ndarray:
    return (f(t + h, x) - f(t - h, x)) / (2.0 * h)


def lipschitz_estimate(
    f: VelocityField,
    t_range: Optional[tuple] = None,
    sample_count: int = 256,
    x_scale: float = 4.0,
    seed: int = 0,
    time_points: int = 64,
) -> float:
    """Empirical spatial Lipschitz bound: max spectral norm of the Jacobian.

    Samples `sample_count` points x ~ N(0, x_scale^2 I) plus the origin on a
    uniform time grid over t_range (default [0, f.t_max]).  A sampled
    estimate, so a lower bound on the true constant.
    """
    if t_range is None:
        t_range = (0.0, f.t_max)
    lo, hi = float(t_range[0]), min(float(t_range[1]), f.t_max)
    rng = np.random.default_rng(seed)
    xs = np.concatenate(
        [np.zeros((1, f.dim)), x_scale * rng.standard_normal((sample_count, f.dim))]
    )
    ts = np.linspace(lo, hi, time_points)
    worst = 0.0
    for t in ts:
        jac = f.jac_x(t, xs) if f.jac_x is not None else numeric_jacobian(f, t, xs)
        svals = np.linalg.svd(jac, compute_uv=False)
        worst = max(worst, float(svals[..., 0].max()))
    return worst
