"""Analytic isotropic Gaussian-mixture targets.

All densities, scores, smoothed laws and posterior-mean denoisers used by the
samplers are exact closed forms over :class:`IsotropicGaussianMixture`.
Functions accept either a single point of shape ``(dim,)`` or a batch of
shape ``(n, dim)`` and return results of the matching rank.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

LOG_2PI = float(np.log(2.0 * np.pi))


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class IsotropicGaussianMixture:
    """Mixture ``sum_k w_k N(mu_k, s_k^2 I)``.

    Attributes:
        weights: Mixing weights, shape ``(K,)``, summing to one.
        means: Component means, shape ``(K, dim)``.
        variances: Scalar per-component variances ``s_k^2``, shape ``(K,)``.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = _frozen(self.weights).reshape(-1)
        mu = _frozen(self.means)
        var = _frozen(self.variances).reshape(-1)
        if mu.ndim == 1:
            mu = _frozen(mu.reshape(len(w), -1))
        if mu.ndim != 2 or mu.shape[0] != w.shape[0] or var.shape[0] != w.shape[0]:
            raise ValueError(
                f"inconsistent component shapes: weights {w.shape}, means {mu.shape}, "
                f"variances {var.shape}"
            )
        if w.shape[0] == 0 or mu.shape[1] == 0:
            raise ValueError("mixture needs at least one component and dim >= 1")
        if np.any(w <= 0) or np.any(w > 1) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must lie in (0, 1] and sum to 1, got sum {w.sum()!r}")
        if not np.all(var > 0) or not np.all(np.isfinite(var)):
            raise ValueError("all variances must be finite and strictly positive")
        if not np.all(np.isfinite(mu)):
            raise ValueError("means must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def n_components(self):
        return self.weights.shape[0]

    @classmethod
    def gaussian(cls, mean, variance=1.0):
        """Single isotropic Gaussian ``N(mean, variance I)``."""
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        return cls(np.ones(1), mean[None, :], np.array([variance]))

    @classmethod
    def standard_normal(cls, dim=1):
        return cls.gaussian(np.zeros(dim), 1.0)

    @classmethod
    def from_components(cls, components):
        """Build from dicts with keys ``weight``, ``mean`` and ``variance``."""
        comps = list(components)
        return cls(
            np.array([c["weight"] for c in comps], dtype=float),
            np.array([np.atleast_1d(c["mean"]) for c in comps], dtype=float),
            np.array([c["variance"] for c in comps], dtype=float),
        )

    def components(self):
        return [
            {"weight": float(w), "mean": m.tolist(), "variance": float(v)}
            for w, m, v in zip(self.weights, self.means, self.variances)
        ]


def as_batch(x, dim):
    """Coerce ``x`` to shape ``(n, dim)``; also report whether it was a single point."""
    arr = np.asarray(x, dtype=float)
    single = arr.ndim <= 1
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ValueError(f"expected points of dimension {dim}, got array of shape {np.shape(x)}")
    return arr, single


def _per_row(value, n):
    """Scalar stays scalar; a length-n array becomes a column for broadcasting."""
    v = np.asarray(value, dtype=float)
    if v.ndim == 0:
        return float(v)
    v = v.reshape(-1)
    if v.shape[0] != n:
        raise ValueError(f"per-row parameter has length {v.shape[0]}, expected {n}")
    return v[:, None]


def component_terms(gm, x, scale=1.0, extra_var=0.0):
    """Log joint terms of the scaled-and-noised mixture at a batch of points.

    Evaluates, for the law of ``scale * X + sqrt(extra_var) * Z`` with
    ``X ~ gm``, the per-component quantities

        log w_k + log N(x; scale * mu_k, (scale^2 s_k^2 + extra_var) I).

    ``scale`` and ``extra_var`` may be scalars or per-row arrays.

    Returns:
        ``(logc, var)`` with ``logc`` of shape ``(n, K)`` and the component
        variances broadcastable to it.
    """
    n, d = x.shape
    a = _per_row(scale, n)
    e = _per_row(extra_var, n)
    var = (a * a) * gm.variances[None, :] + e
    am = a * gm.means if np.ndim(a) == 0 else None
    sq = None
    for j in range(d):
        mj = am[None, :, j] if am is not None else a * gm.means[None, :, j]
        diff = x[:, j, None] - mj
        diff *= diff
        if sq is None:
            sq = diff
        else:
            sq += diff
    sq *= -0.5 / var
    sq += np.log(gm.weights)[None, :] - 0.5 * d * (LOG_2PI + np.log(var))
    return sq, var


def responsibilities(logc):
    """Posterior component probabilities from log joint terms (row-wise softmax).

    Overwrites and returns ``logc``.
    """
    logc -= logc.max(axis=1, keepdims=True)
    np.exp(logc, out=logc)
    logc /= logc.sum(axis=1, keepdims=True)
    return logc


def log_density(gm, x):
    """Log density of the mixture, via log-sum-exp over components."""
    xb, single = as_batch(x, gm.dim)
    logc, _ = component_terms(gm, xb)
    out = logsumexp(logc, axis=1)
    return float(out[0]) if single else out


def _score_batch(gm, xb, extra_var=0.0):
    logc, var = component_terms(gm, xb, extra_var=extra_var)
    w = responsibilities(logc) / var
    return w @ gm.means - w.sum(axis=1, keepdims=True) * xb


def score(gm, x):
    """Gradient of the log density: ``sum_k r_k(x) (mu_k - x) / s_k^2``."""
    xb, single = as_batch(x, gm.dim)
    out = _score_batch(gm, xb)
    return out[0] if single else out


def _check_sigma(sigma):
    s = np.asarray(sigma, dtype=float)
    if not np.all(s > 0) or not np.all(np.isfinite(s)):
        raise ValueError(f"sigma must be finite and > 0, got {sigma!r}")
    return s


def smooth(gm, sigma):
    """Exact convolution ``gm * N(0, sigma^2 I)``: variances grow by ``sigma^2``."""
    sigma = float(_check_sigma(sigma))
    return IsotropicGaussianMixture(gm.weights, gm.means, gm.variances + sigma * sigma)


def tweedie_denoiser(gm, sigma, y):
    """Posterior mean ``E[x | x + sigma * eps = y]`` for ``x ~ gm``.

    Equals ``y + sigma^2 * grad log (gm * N(0, sigma^2 I))(y)``.  ``sigma`` may
    also be a per-row array when ``y`` is a batch.
    """
    s = _check_sigma(sigma)
    yb, single = as_batch(y, gm.dim)
    s2 = s * s
    out = yb + _per_row(s2, yb.shape[0]) * _score_batch(gm, yb, extra_var=s2)
    return out[0] if single else out


def sample(gm, rng, n):
    """Draw ``n`` points: component index first, then Gaussian noise.

    Returns an array of shape ``(n, dim)``.
    """
    n = int(n)
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    k = rng.choice(gm.n_components, size=n, p=gm.weights)
    z = rng.standard_normal((n, gm.dim))
    return gm.means[k] + np.sqrt(gm.variances[k])[:, None] * z


@dataclass(frozen=True)
class SwissRollSpec:
    """Equal-weight Gaussian beads along the spiral ``r = radius_scale * theta``."""

    n_components: int = 64
    theta_min: float = 1.5 * np.pi
    theta_max: float = 4.5 * np.pi
    radius_scale: float = 0.1
    component_std: float = 0.15

    def __post_init__(self):
        if int(self.n_components) != self.n_components or self.n_components < 2:
            raise ValueError("n_components must be an integer >= 2")
        if not self.theta_max > self.theta_min:
            raise ValueError("theta_max must exceed theta_min")
        if not (self.radius_scale > 0 and self.component_std > 0):
            raise ValueError("radius_scale and component_std must be > 0")


def swiss_roll_target(spec=None):
    """Mixture whose means sit at ``radius_scale * theta * (cos theta, sin theta)``."""
    spec = spec or SwissRollSpec()
    theta = np.linspace(spec.theta_min, spec.theta_max, int(spec.n_components))
    means = spec.radius_scale * theta[:, None] * np.stack([np.cos(theta), np.sin(theta)], axis=1)
    k = len(theta)
    return IsotropicGaussianMixture(
        np.full(k, 1.0 / k), means, np.full(k, spec.component_std**2)
    )
