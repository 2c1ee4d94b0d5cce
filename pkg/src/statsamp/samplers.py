"""Langevin, Metropolis and predictor-corrector kernels, and a chain runner.

Kernels act on a :class:`ChainState` holding a *group* of chains stepped in
lockstep: ``position`` has shape ``(n, d)`` and all chains of the group share
one random stream.  Within a step the draws are taken in a fixed order
(proposal noise first, then acceptance uniforms), so a group is reproducible
from its seed alone.
"""

import dataclasses
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import rng as rngmod
from .bridges import Integrator, integrate_flow, linear_schedule
from .errors import NumericalError


@dataclass(frozen=True)
class ChainState:
    position: np.ndarray
    step_index: int
    rng: np.random.Generator

    def advance(self, position):
        return dataclasses.replace(self, position=position, step_index=self.step_index + 1)


def _finite_or_raise(x, state, what):
    if not np.all(np.isfinite(x)):
        bad = np.flatnonzero(~np.all(np.isfinite(np.atleast_2d(x)), axis=1))
        raise NumericalError(f"non-finite {what}", step=state.step_index,
                             chain=int(bad[0]) if bad.size else None)


class CallCounter:
    """Wrap a model callable and count its invocations."""

    def __init__(self, fn):
        self.fn = fn
        self.calls = 0

    def __call__(self, *args, **kwargs):
        self.calls += 1
        return self.fn(*args, **kwargs)


def ula_step(score_fn, h, state):
    """Unadjusted Langevin: ``x + h s(x) + sqrt(2h) z``."""
    if not h > 0:
        raise ValueError(f"step size must be > 0, got {h}")
    x = state.position
    z = state.rng.standard_normal(x.shape)
    y = x + h * score_fn(x) + np.sqrt(2.0 * h) * z
    _finite_or_raise(y, state, "ULA update")
    return state.advance(y)


def langevin_log_q(y, x, drift_x, h):
    """``log q_h(y | x)`` up to the shared constant: ``-|y - x - h s(x)|^2 / 4h``."""
    r = y - (x + h * drift_x)
    return -np.sum(r * r, axis=-1) / (4.0 * h)


def mala_log_ratio(log_density_fn, score_fn, h, x, y):
    """Metropolis-Hastings log ratio of a Langevin proposal from ``x`` to ``y``."""
    return (
        log_density_fn(y) - log_density_fn(x)
        + langevin_log_q(x, y, score_fn(y), h)
        - langevin_log_q(y, x, score_fn(x), h)
    )


def _metropolis(state, x, y, log_ratio):
    u = state.rng.random(x.shape[0])
    alpha = np.exp(np.minimum(0.0, log_ratio))
    accepted = u <= alpha
    new = np.where(accepted[:, None], y, x)
    return state.advance(new), accepted


def mala_step(log_density_fn, score_fn, h, state):
    """Metropolis-adjusted Langevin step; rejected chains keep their position."""
    if not h > 0:
        raise ValueError(f"step size must be > 0, got {h}")
    x = state.position
    z = state.rng.standard_normal(x.shape)
    sx = score_fn(x)
    y = x + h * sx + np.sqrt(2.0 * h) * z
    _finite_or_raise(y, state, "MALA proposal")
    sy = score_fn(y)
    log_r = (
        log_density_fn(y) - log_density_fn(x)
        + langevin_log_q(x, y, sy, h) - langevin_log_q(y, x, sx, h)
    )
    return _metropolis(state, x, y, log_r)


def line_integral_delta(D, h, x, y, n_nodes):
    """Trapezoidal estimate of ``(1/h) int_0^1 <D(p) - p, y - x> dt``, ``p = x + t(y - x)``.

    ``x`` and ``y`` may be single points or matched batches; all nodes are
    evaluated with one call to ``D``.
    """
    if n_nodes < 2:
        raise ValueError(f"need at least 2 quadrature nodes, got {n_nodes}")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    single = x.ndim == 1
    xb, yb = np.atleast_2d(x), np.atleast_2d(y)
    n, d = xb.shape
    ts = np.linspace(0.0, 1.0, n_nodes)
    wts = np.full(n_nodes, 1.0 / (n_nodes - 1))
    wts[[0, -1]] *= 0.5
    step = yb - xb
    pts = xb[None] + ts[:, None, None] * step[None]
    res = np.asarray(D(pts.reshape(-1, d))).reshape(n_nodes, n, d) - pts
    inner = np.einsum("knd,nd->kn", res, step)
    out = wts @ inner / h
    return float(out[0]) if single else out


def acceptance_log_ratio_full(D, sigma, x, y, n_nodes=2):
    """Line-integral acceptance: ``Delta + log q(x|y) - log q(y|x)`` with ``h = sigma^2``."""
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    h = sigma * sigma
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    a = y - D(x)
    b = x - D(y)
    q = (np.sum(a * a, axis=-1) - np.sum(b * b, axis=-1)) / (4.0 * h)
    return line_integral_delta(D, h, x, y, n_nodes) + q


def acceptance_log_ratio_trapezoid(D, sigma, x, y, dx=None, dy=None):
    """Two-evaluation acceptance ``(|D(x) - x|^2 - |D(y) - y|^2) / (4 sigma^2)``.

    Precomputed ``dx = D(x)`` / ``dy = D(y)`` skip the corresponding call.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    rx = (D(x) if dx is None else dx) - x
    ry = (D(y) if dy is None else dy) - y
    return (np.sum(rx * rx, axis=-1) - np.sum(ry * ry, axis=-1)) / (4.0 * sigma * sigma)


def dmala_step(D, sigma, state, n_nodes=2):
    """Denoiser-Metropolis step: propose ``D(x) + sqrt(2) sigma z``, then accept/reject.

    With ``n_nodes == 2`` the denoiser is called exactly twice (at ``x`` and at
    the proposal); larger ``n_nodes`` switches to the line-integral ratio.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    x = state.position
    z = state.rng.standard_normal(x.shape)
    dx = D(x)
    y = dx + np.sqrt(2.0) * sigma * z
    _finite_or_raise(y, state, "dMALA proposal")
    if n_nodes == 2:
        log_r = acceptance_log_ratio_trapezoid(D, sigma, x, y, dx=dx)
    else:
        log_r = acceptance_log_ratio_full(D, sigma, x, y, n_nodes)
    return _metropolis(state, x, y, log_r)


def pc_step(flow, tau, state, integrator=None, schedule=None):
    """Predictor-corrector step: noise to bridge time ``tau``, then flow back to 1.

    ``flow`` is a solution map ``f(x, t, s)`` (one call) when ``integrator`` is
    None, otherwise a velocity field integrated with ``integrator``.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    sched = schedule or linear_schedule()
    x = state.position
    z = state.rng.standard_normal(x.shape)
    x_hat = float(sched.sigma_b(tau)) * z + float(sched.kappa(tau)) * x
    if integrator is None:
        x_new = np.asarray(flow(x_hat, tau, 1.0))
    else:
        try:
            x_new = integrate_flow(flow, x_hat, tau, 1.0, integrator.n_steps, integrator.method)
        except NumericalError as err:
            raise NumericalError(f"corrector flow failed at sub-step {err.step}",
                                 step=state.step_index) from err
    _finite_or_raise(x_new, state, "predictor-corrector update")
    return state.advance(x_new)


KERNEL_KINDS = ("ula", "mala", "dmala", "pc")


@dataclass(frozen=True)
class KernelConfig:
    """Kernel selection and parameters; only the fields ``kind`` needs may be set.

    dMALA has no separate step size: its Langevin step is ``sigma ** 2``.
    """

    kind: str
    h: Optional[float] = None
    sigma: Optional[float] = None
    tau: Optional[float] = None
    quadrature_nodes: int = 2
    pc_integrator: object = None  # Integrator, or "solution_map"

    def __post_init__(self):
        required = {"ula": {"h"}, "mala": {"h"}, "dmala": {"sigma"}, "pc": {"tau"}}
        if self.kind not in required:
            raise ValueError(f"kernel kind must be one of {KERNEL_KINDS}, got {self.kind!r}")
        given = {k for k in ("h", "sigma", "tau") if getattr(self, k) is not None}
        if given != required[self.kind]:
            raise ValueError(
                f"kernel {self.kind!r} takes exactly {sorted(required[self.kind])}, got {sorted(given)}"
            )
        if self.h is not None and not self.h > 0:
            raise ValueError("h must be > 0")
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if self.tau is not None and not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if self.quadrature_nodes < 2:
            raise ValueError("quadrature_nodes must be >= 2")
        if self.kind == "pc":
            pi = self.pc_integrator
            if pi is None:
                object.__setattr__(self, "pc_integrator", Integrator())
            elif pi != "solution_map" and not isinstance(pi, Integrator):
                raise ValueError("pc_integrator must be an Integrator or 'solution_map'")

    @property
    def step_size(self):
        return self.sigma**2 if self.kind == "dmala" else self.h


class Kernel:
    """A configured kernel: ``step(state) -> (state, accepted or None)``."""

    def __init__(self, config, *, score=None, log_density=None, denoiser=None,
                 velocity=None, solution_map=None, schedule=None):
        self.config = config
        self.schedule = schedule or linear_schedule()
        kind = config.kind
        if kind in ("ula", "mala") and score is None:
            raise ValueError(f"{kind} kernel needs a score function")
        if kind == "mala" and log_density is None:
            raise ValueError("mala kernel needs a log-density function")
        if kind == "dmala" and denoiser is None:
            raise ValueError("dmala kernel needs a denoiser")
        if kind == "pc":
            if config.pc_integrator == "solution_map" and solution_map is None:
                raise ValueError("pc kernel configured for a solution map but none given")
            if config.pc_integrator != "solution_map" and velocity is None:
                raise ValueError("pc kernel needs a velocity field")
        self.score = score
        self.log_density = log_density
        self.denoiser = denoiser
        self.velocity = velocity
        self.solution_map = solution_map

    @property
    def is_metropolis(self):
        return self.config.kind in ("mala", "dmala")

    def step(self, state):
        c = self.config
        if c.kind == "ula":
            return ula_step(self.score, c.h, state), None
        if c.kind == "mala":
            return mala_step(self.log_density, self.score, c.h, state)
        if c.kind == "dmala":
            return dmala_step(self.denoiser, c.sigma, state, c.quadrature_nodes)
        if c.pc_integrator == "solution_map":
            return pc_step(self.solution_map, c.tau, state, schedule=self.schedule), None
        return pc_step(self.velocity, c.tau, state, c.pc_integrator, self.schedule), None


@dataclass
class ChainStats:
    """Per-chain record. ``trajectory`` rows are positions at ``trajectory_steps``."""

    n_accepted: int = 0
    n_proposed: int = 0
    displacement_from_start: float = 0.0
    trajectory: Optional[np.ndarray] = None
    trajectory_steps: Optional[np.ndarray] = None
    accepted_flags: Optional[np.ndarray] = None
    thin: int = 0

    @property
    def acceptance_running_mean(self):
        return self.n_accepted / self.n_proposed if self.n_proposed else float("nan")


@dataclass
class PooledStats:
    n_chains: int
    n_steps: int
    acceptance_rate: Optional[float]
    mean_move: float


@dataclass
class RunResult:
    initial: np.ndarray
    final: np.ndarray
    chains: list = field(repr=False)
    pooled: PooledStats
    trajectory: Optional[np.ndarray] = field(default=None, repr=False)
    trajectory_steps: Optional[np.ndarray] = None
    accepted: Optional[np.ndarray] = field(default=None, repr=False)
    thin: int = 0


DEFAULT_GROUP_SIZE = 2048


def resolve_threads(threads=None):
    """Explicit value, else ``STATSAMP_THREADS``, else 1."""
    if threads is None:
        threads = os.environ.get("STATSAMP_THREADS", "1")
    threads = int(threads)
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    return threads


def _run_group(kernel, init, K, seed, group, thin, chain_offset):
    state = ChainState(np.array(init, dtype=float), 0, rngmod.substream(seed, rngmod.STREAM_CHAINS, group))
    n = init.shape[0]
    n_acc = np.zeros(n, dtype=np.int64)
    frames, flags = ([init.copy()], [np.ones(n, dtype=bool)]) if thin else (None, None)
    for k in range(K):
        try:
            state, acc = kernel.step(state)
        except NumericalError as err:
            chain = None if err.chain is None else chain_offset + err.chain
            raise NumericalError(str(err).split("] ", 1)[-1], step=k, chain=chain) from err
        if acc is not None:
            n_acc += acc
        if thin and (k + 1) % thin == 0:
            frames.append(state.position.copy())
            flags.append(np.ones(n, dtype=bool) if acc is None else acc.copy())
    return state.position, n_acc, frames, flags


def run_chains(kernel, init, K, seed=0, thin=0, group_size=DEFAULT_GROUP_SIZE, threads=None):
    """Apply ``kernel`` ``K`` times to every chain.

    Chains are split into consecutive groups of ``group_size``; group ``g``
    draws from ``rng.substream(seed, STREAM_CHAINS, g)``.  Output is identical
    for any thread count.  With ``thin > 0`` the initial state and every
    ``thin``-th state are recorded.
    """
    K = int(K)
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    init = np.atleast_2d(np.asarray(init, dtype=float))
    if init.shape[0] == 0:
        raise ValueError("init must contain at least one chain")
    thin = int(thin)
    n = init.shape[0]
    starts = list(range(0, n, group_size))
    jobs = [(init[s:s + group_size], g, s) for g, s in enumerate(starts)]
    threads = resolve_threads(threads)
    if threads == 1 or len(jobs) == 1:
        parts = [_run_group(kernel, x0, K, seed, g, thin, s) for x0, g, s in jobs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            futs = [ex.submit(_run_group, kernel, x0, K, seed, g, thin, s) for x0, g, s in jobs]
            parts = [f.result() for f in futs]
    final = np.concatenate([p[0] for p in parts])
    n_acc = np.concatenate([p[1] for p in parts])
    disp = np.linalg.norm(final - init, axis=1)
    traj = steps = acc_flags = None
    if thin:
        traj = np.concatenate([np.stack(p[2]) for p in parts], axis=1)
        acc_flags = np.concatenate([np.stack(p[3]) for p in parts], axis=1)
        steps = np.concatenate([[0], np.arange(thin, K + 1, thin)])
    metropolis = getattr(kernel, "is_metropolis", False)
    chains = [
        ChainStats(
            n_accepted=int(n_acc[i]) if metropolis else 0,
            n_proposed=K if metropolis else 0,
            displacement_from_start=float(disp[i]),
            trajectory=None if traj is None else traj[:, i],
            trajectory_steps=steps,
            accepted_flags=None if acc_flags is None else acc_flags[:, i],
            thin=thin,
        )
        for i in range(n)
    ]
    pooled = PooledStats(
        n_chains=n,
        n_steps=K,
        acceptance_rate=float(n_acc.sum() / (n * K)) if metropolis else None,
        mean_move=float(disp.mean()),
    )
    return RunResult(init, final, chains, pooled, traj, steps, acc_flags, thin)
