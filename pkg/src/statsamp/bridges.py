"""Noise-to-data bridges, their exact velocity fields, and flow integration.

A bridge is ``x_t = kappa(t) x + sigma_b(t) z`` with ``x ~ p`` and ``z`` standard
normal; ``t = 0`` is noise and ``t = 1`` is data.  Learned or analytic models
plug in as plain callables:

* velocity field ``v(x, t)``, batch ``x`` of shape ``(n, d)``;
* solution map ``f(x, t, s)`` approximating the flow from time ``t`` to ``s``;
* denoiser ``D(y)`` wrapped in :class:`DenoiserField` with its noise level.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.optimize import bisect

from .errors import NumericalError
from .targets import (
    IsotropicGaussianMixture,
    as_batch,
    component_terms,
    responsibilities,
    tweedie_denoiser,
)

VelocityField = Callable[[np.ndarray, float], np.ndarray]
SolutionMap = Callable[[np.ndarray, float, float], np.ndarray]


@dataclass(frozen=True)
class BridgeSchedule:
    """Coefficients of ``x_t = kappa(t) x + sigma_b(t) z`` and their derivatives.

    ``inverse`` optionally maps a noise level ``eta = sigma_b / kappa`` back to
    ``t`` in closed form; otherwise :meth:`eta_to_time` bisects.
    """

    name: str
    kappa: Callable
    sigma_b: Callable
    kappa_dot: Callable
    sigma_b_dot: Callable
    inverse: Optional[Callable] = None

    def __post_init__(self):
        if abs(self.kappa(1.0) - 1.0) > 1e-12 or abs(self.sigma_b(1.0)) > 1e-12:
            raise ValueError(f"schedule {self.name!r} must satisfy kappa(1)=1, sigma_b(1)=0")

    def eta_to_time(self, eta):
        """Bridge time whose equivalent noise level ``sigma_b(t)/kappa(t)`` is ``eta``."""
        eta = float(eta)
        if not eta > 0:
            raise ValueError(f"eta must be > 0, got {eta}")
        if self.inverse is not None:
            return float(self.inverse(eta))
        lo, hi = 1e-12, 1.0

        def gap(t):
            return self.sigma_b(t) / self.kappa(t) - eta

        if not gap(lo) > 0:
            raise ValueError(f"eta={eta} exceeds the noise range of schedule {self.name!r}")
        return float(bisect(gap, lo, hi, xtol=1e-12, rtol=4 * np.finfo(float).eps))


def linear_schedule():
    return BridgeSchedule(
        name="linear",
        kappa=lambda t: t,
        sigma_b=lambda t: 1.0 - t,
        kappa_dot=lambda t: np.ones_like(t),
        sigma_b_dot=lambda t: -np.ones_like(t),
        inverse=lambda eta: 1.0 / (1.0 + eta),
    )


def cosine_schedule():
    # Data at t = 1; the Flowers interpolant runs the other way (data at t = 0).
    half_pi = 0.5 * np.pi
    return BridgeSchedule(
        name="cosine",
        kappa=lambda t: np.sin(half_pi * t),
        sigma_b=lambda t: np.cos(half_pi * t),
        kappa_dot=lambda t: half_pi * np.cos(half_pi * t),
        sigma_b_dot=lambda t: -half_pi * np.sin(half_pi * t),
    )


SCHEDULES = {"linear": linear_schedule, "cosine": cosine_schedule}


def get_schedule(name):
    try:
        return SCHEDULES[name]()
    except KeyError:
        raise ValueError(f"unknown schedule {name!r}; expected one of {sorted(SCHEDULES)}") from None


@dataclass(frozen=True)
class DenoiserField:
    """A denoiser ``D(y) ~ E[x | x + eta * eps = y]`` at fixed noise level ``eta``."""

    fn: Callable[[np.ndarray], np.ndarray]
    eta: float

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError(f"denoiser noise level must be > 0, got {self.eta}")

    def __call__(self, y):
        return self.fn(y)


def exact_denoiser(gm, sigma):
    """Tweedie posterior-mean denoiser of ``gm`` as a :class:`DenoiserField`."""
    return DenoiserField(lambda y: tweedie_denoiser(gm, sigma, y), float(sigma))


def _check_time(t):
    ta = np.asarray(t, dtype=float)
    if np.any(ta < 0) or np.any(ta > 1) or not np.all(np.isfinite(ta)):
        raise ValueError(f"bridge time must lie in [0, 1], got {t!r}")
    return ta


def bridge_marginal(gm, sched, t):
    """Law of ``kappa(t) x + sigma_b(t) z`` for ``x ~ gm`` (still an isotropic mixture)."""
    t = float(_check_time(t))
    k, s = float(sched.kappa(t)), float(sched.sigma_b(t))
    var = k * k * gm.variances + s * s
    if not np.all(var > 0):
        raise ValueError(f"bridge marginal is degenerate at t={t}")
    return IsotropicGaussianMixture(gm.weights, k * gm.means, var)


def exact_velocity(gm, sched, x, t):
    """Conditional bridge velocity ``E[kappa' x0 + sigma_b' z | x_t = x]``.

    Per component the pair ``(x0, x_t)`` is jointly Gaussian, so

        E[x0 | x_t, k] = mu_k + kappa s_k^2 / V_k (x_t - kappa mu_k)
        E[z  | x_t, k] = sigma_b / V_k (x_t - kappa mu_k),   V_k = kappa^2 s_k^2 + sigma_b^2,

    combined with responsibilities under the bridge marginal.  ``t`` may be a
    scalar or one time per row.
    """
    xb, single = as_batch(x, gm.dim)
    ta = _check_time(t)
    if ta.ndim == 0 and np.all(gm.variances == gm.variances[0]):
        out = _velocity_shared_variance(gm, sched, xb, float(ta))
        return out[0] if single else out
    if ta.ndim:
        ta = ta.reshape(-1, 1)
    k, s = sched.kappa(ta), sched.sigma_b(ta)
    kd, sd = sched.kappa_dot(ta), sched.sigma_b_dot(ta)
    logc, var = component_terms(gm, xb, scale=k.reshape(-1) if ta.ndim else k,
                                extra_var=(s * s).reshape(-1) if ta.ndim else s * s)
    if not np.all(var > 0):
        raise NumericalError(f"singular bridge posterior at t={t!r}")
    r = responsibilities(logc)
    # v = kd * sum r mu + sum W (x - k mu), W_k = r_k (kd k s_k^2 + sd s) / V_k
    w = r * (kd * k * gm.variances[None, :] + sd * s) / var
    out = kd * (r @ gm.means) + w.sum(axis=1, keepdims=True) * xb - k * (w @ gm.means)
    return out[0] if single else out


def _velocity_shared_variance(gm, sched, xb, t):
    # Equal variances: |x|^2 cancels in the softmax, leaving one matmul for the logits.
    k, s = float(sched.kappa(t)), float(sched.sigma_b(t))
    kd, sd = float(sched.kappa_dot(t)), float(sched.sigma_b_dot(t))
    s2 = float(gm.variances[0])
    var = k * k * s2 + s * s
    if not var > 0:
        raise NumericalError(f"singular bridge posterior at t={t!r}")
    mu = gm.means
    logits = xb @ (mu.T * (k / var))
    logits += np.log(gm.weights) - (0.5 * k * k / var) * (mu * mu).sum(axis=1)
    logits -= logits.max(axis=1, keepdims=True)
    np.exp(logits, out=logits)
    mbar = (logits @ mu) / logits.sum(axis=1, keepdims=True)
    c = (kd * k * s2 + sd * s) / var
    return (kd - k * c) * mbar + c * xb


def exact_velocity_field(gm, sched):
    """Bind :func:`exact_velocity` into a ``v(x, t)`` callable."""
    return lambda x, t: exact_velocity(gm, sched, x, t)


def gaussian_flow_map(gm, sched):
    """Closed-form flow ``Phi_{t->s}`` of the exact field for a one-component target.

    The exact field is affine, so ``x - kappa(t) mu`` scales with the bridge
    standard deviation ``sqrt(kappa^2 s^2 + sigma_b^2)``.
    """
    if gm.n_components != 1:
        raise ValueError("closed-form flow map exists only for a single Gaussian")
    mu, s2 = gm.means[0], float(gm.variances[0])

    def std(t):
        return np.sqrt(sched.kappa(t) ** 2 * s2 + sched.sigma_b(t) ** 2)

    def f(x, t, s):
        return sched.kappa(s) * mu + std(s) / std(t) * (np.asarray(x, float) - sched.kappa(t) * mu)

    return f


def clean_prediction(gm, sched, x, t):
    """Posterior mean ``E[x0 | x_t = x]`` under the bridge (the x-prediction map).

    This is what a solution map regressed onto clean data converges to.  It is
    not the flow map ``Phi_{t->1}``: the flow transports ``p_t`` onto ``p``,
    while the posterior mean contracts toward the data mean.
    """
    xb, single = as_batch(x, gm.dim)
    t = float(_check_time(t))
    k, s = float(sched.kappa(t)), float(sched.sigma_b(t))
    logc, var = component_terms(gm, xb, scale=k, extra_var=s * s)
    if not np.all(var > 0):
        raise NumericalError(f"singular bridge posterior at t={t!r}")
    r = responsibilities(logc)
    # sum_k r_k [mu_k + k s_k^2 / V_k (x - k mu_k)]
    g = r * (k * gm.variances[None, :] / var)
    out = r @ gm.means + g.sum(axis=1, keepdims=True) * xb - k * (g @ gm.means)
    return out[0] if single else out


def clean_prediction_map(gm, sched):
    """:func:`clean_prediction` as a solution-map callable ``f(x, t, 1)``."""

    def f(x, t, s):
        if s != 1.0:
            raise ValueError("the clean-prediction map only targets s = 1")
        return clean_prediction(gm, sched, x, t)

    return f


def _conversion_time(sched, eta):
    t = sched.eta_to_time(eta)
    if not 0 < t <= 1:
        raise ValueError(f"eta={eta} maps outside the schedule's valid interval (t={t})")
    return t


def denoiser_from_velocity(v, sched, eta, y):
    """Denoiser at noise level ``eta`` recovered from a bridge velocity field.

    Solves the bridge equations for the clean point, evaluating the model at the
    scaled input ``kappa(t) y`` with ``eta = sigma_b(t) / kappa(t)``.
    """
    t = _conversion_time(sched, eta)
    k, s = float(sched.kappa(t)), float(sched.sigma_b(t))
    kd, sd = float(sched.kappa_dot(t)), float(sched.sigma_b_dot(t))
    den = k * sd - kd * s
    if abs(den) < 1e-12:
        raise NumericalError(f"velocity-to-denoiser conversion is singular at t={t}")
    y = np.asarray(y, dtype=float)
    return (sd * k * y - s * np.asarray(v(k * y, t))) / den


def denoiser_from_solution_map(f, sched, eta, y):
    """Denoiser at noise level ``eta`` from a direct map: ``f(kappa(t) y, t, 1)``."""
    t = _conversion_time(sched, eta)
    y = np.asarray(y, dtype=float)
    return np.asarray(f(float(sched.kappa(t)) * y, t, 1.0))


def velocity_denoiser(v, sched, eta):
    return DenoiserField(lambda y: denoiser_from_velocity(v, sched, eta, y), float(eta))


def solution_map_denoiser(f, sched, eta):
    return DenoiserField(lambda y: denoiser_from_solution_map(f, sched, eta, y), float(eta))


@dataclass(frozen=True)
class Integrator:
    """Fixed-step ODE integrator settings. ``rk2`` is the explicit midpoint rule."""

    method: str = "rk2"
    n_steps: int = 200

    def __post_init__(self):
        if self.method not in ("euler", "rk2"):
            raise ValueError(f"integrator method must be 'euler' or 'rk2', got {self.method!r}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps!r}")

    @property
    def evaluations(self):
        """Velocity evaluations per integration."""
        return self.n_steps * (2 if self.method == "rk2" else 1)


def integrate_flow(v, x, t0, t1, n_steps, method="rk2"):
    """Integrate ``dx/dt = v(x, t)`` from ``t0`` to ``t1`` with fixed steps.

    Raises:
        NumericalError: the state became non-finite; ``err.step`` is the index
            of the offending step.
    """
    Integrator(method, n_steps)
    if not 0.0 <= t0 <= t1 <= 1.0:
        raise ValueError(f"need 0 <= t0 <= t1 <= 1, got t0={t0}, t1={t1}")
    x = np.array(x, dtype=float)
    h = (t1 - t0) / n_steps
    for i in range(n_steps):
        t = t0 + i * h
        k1 = v(x, t)
        if method == "euler":
            x = x + h * k1
        else:
            x = x + h * v(x + 0.5 * h * k1, t + 0.5 * h)
        if not np.all(np.isfinite(x)):
            raise NumericalError("non-finite state during flow integration", step=i)
    return x


def solution_map_from_velocity(v, integrator):
    """Wrap numerical integration of ``v`` as a solution map ``f(x, t, s)``."""
    return lambda x, t, s: integrate_flow(v, x, t, s, integrator.n_steps, integrator.method)
