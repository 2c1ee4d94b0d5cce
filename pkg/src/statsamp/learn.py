"""Small tanh MLP with hand-written derivatives, and its training objectives.

The network maps ``(x, c)`` to a vector of the data dimension, where ``c`` is a
conditioning scalar (noise level for a denoiser, bridge time for a velocity
field) fed as a raw feature plus sin/cos features at ``n_freq`` frequencies.
Derivatives are all explicit:

* reverse mode through the forward pass for parameter gradients;
* forward mode (JVP) and reverse mode (VJP) with respect to the input ``x``;
* reverse mode through the JVP/VJP pair for the Jacobian-symmetry penalty.
"""

import struct
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from . import rng as rngmod
from .bridges import DenoiserField
from .errors import NumericalError
from .targets import IsotropicGaussianMixture, sample

MAGIC = b"STSAMLP\x00"
FORMAT_VERSION = 1


@dataclass
class Mlp:
    """Fully connected network; ``weights[l]`` has shape ``(out, in)``.

    Hidden layers use ``tanh``; the last layer is affine.  With ``skip`` the
    input ``x`` is added to the output, so zero parameters give the identity.
    """

    weights: list
    biases: list
    data_dim: int
    conditioned: bool = True
    n_freq: int = 4
    skip: bool = False

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        width = self.in_dim
        for W, b in zip(self.weights, self.biases):
            if W.ndim != 2 or W.shape[1] != width or b.shape != (W.shape[0],):
                raise ValueError(f"layer shapes inconsistent: W {W.shape}, b {b.shape}, expected in={width}")
            width = W.shape[0]
        if width != self.data_dim:
            raise ValueError(f"output width {width} != data_dim {self.data_dim}")

    @classmethod
    def init(cls, data_dim, hidden=(64, 64), rng=None, conditioned=True, n_freq=4, skip=False):
        """Gaussian init with variance ``1/fan_in`` and zero biases."""
        rng = rng if rng is not None else np.random.default_rng(0)
        in_dim = data_dim + (1 + 2 * n_freq if conditioned else 0)
        widths = [in_dim, *hidden, data_dim]
        weights = [rng.standard_normal((o, i)) / np.sqrt(i) for i, o in zip(widths[:-1], widths[1:])]
        biases = [np.zeros(o) for o in widths[1:]]
        return cls(weights, biases, data_dim, conditioned, n_freq, skip)

    @property
    def in_dim(self):
        return self.data_dim + (1 + 2 * self.n_freq if self.conditioned else 0)

    @property
    def widths(self):
        return [self.in_dim] + [W.shape[0] for W in self.weights]

    @property
    def n_layers(self):
        return len(self.weights)

    # parameters as one flat vector: W0, b0, W1, b1, ...
    def flat(self):
        return np.concatenate([p.ravel() for pair in zip(self.weights, self.biases) for p in pair])

    @property
    def n_params(self):
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def with_flat(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        ws, bs, i = [], [], 0
        for W, b in zip(self.weights, self.biases):
            ws.append(theta[i:i + W.size].reshape(W.shape))
            i += W.size
            bs.append(theta[i:i + b.size].copy())
            i += b.size
        return Mlp(ws, bs, self.data_dim, self.conditioned, self.n_freq, self.skip)

    @staticmethod
    def _flatten_grads(gw, gb):
        return np.concatenate([p.ravel() for pair in zip(gw, gb) for p in pair])

    def features(self, x, c=None):
        if not self.conditioned:
            return x
        if c is None:
            raise ValueError("conditioned network needs a noise level / time input")
        n = x.shape[0]
        c = np.asarray(c, dtype=float)
        c = np.full((n, 1), float(c)) if c.ndim == 0 else c.reshape(n, 1)
        freqs = np.pi * 2.0 ** np.arange(self.n_freq)
        return np.concatenate([x, c, np.sin(c * freqs), np.cos(c * freqs)], axis=1)

    def _prepare(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        xb = x.reshape(1, -1) if single else x
        if xb.ndim != 2 or xb.shape[1] != self.data_dim:
            raise ValueError(f"expected inputs of dimension {self.data_dim}, got shape {x.shape}")
        return xb, single

    def _forward(self, xb, c):
        acts = [self.features(xb, c)]
        a = acts[0]
        last = self.n_layers - 1
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ W.T + b
            if l < last:
                a = np.tanh(z)
                acts.append(a)
            else:
                out = z
        if self.skip:
            out = out + xb
        return acts, out

    def forward(self, x, c=None):
        xb, single = self._prepare(x)
        out = self._forward(xb, c)[1]
        return out[0] if single else out

    __call__ = forward

    def _backward(self, acts, g_out):
        gw = [None] * self.n_layers
        gb = [None] * self.n_layers
        g = g_out
        for l in range(self.n_layers - 1, -1, -1):
            gw[l] = g.T @ acts[l]
            gb[l] = g.sum(axis=0)
            ga = g @ self.weights[l]
            if l > 0:
                g = ga * (1.0 - acts[l] ** 2)
        g_x = ga[:, : self.data_dim]
        if self.skip:
            g_x = g_x + g_out
        return gw, gb, g_x

    def value_and_grad(self, x, c, g_out_fn):
        """Forward pass, then backprop ``g_out_fn(out)`` (the loss gradient w.r.t. the output)."""
        xb, _ = self._prepare(x)
        acts, out = self._forward(xb, c)
        loss, g_out = g_out_fn(out)
        gw, gb, _ = self._backward(acts, g_out)
        return loss, self._flatten_grads(gw, gb)

    def _derivs(self, acts):
        return [1.0 - a * a for a in acts[1:]]

    def jvp_input(self, x, c, v):
        """``J v`` with ``J`` the Jacobian of the output with respect to ``x``."""
        xb, single = self._prepare(x)
        vb = np.asarray(v, dtype=float).reshape(xb.shape)
        acts, _ = self._forward(xb, c)
        jv = self._jvp(acts, self._derivs(acts), vb)[0]
        return jv[0] if single else jv

    def vjp_input(self, x, c, u):
        """``J^T u`` with ``J`` the Jacobian of the output with respect to ``x``."""
        xb, single = self._prepare(x)
        ub = np.asarray(u, dtype=float).reshape(xb.shape)
        acts, _ = self._forward(xb, c)
        jtu = self._vjp(acts, self._derivs(acts), ub)[0]
        return jtu[0] if single else jtu

    def _jvp(self, acts, ds, v):
        e = np.zeros_like(acts[0])
        e[:, : self.data_dim] = v
        es, ps = [], []
        for l, W in enumerate(self.weights):
            es.append(e)
            p = e @ W.T
            ps.append(p)
            if l < self.n_layers - 1:
                e = p * ds[l]
        jv = ps[-1] + v if self.skip else ps[-1]
        return jv, es, ps

    def _vjp(self, acts, ds, u):
        gs = [None] * self.n_layers
        hs = [None] * self.n_layers
        g = u
        for l in range(self.n_layers - 1, -1, -1):
            gs[l] = g
            hs[l] = g @ self.weights[l]
            if l > 0:
                g = hs[l] * ds[l - 1]
        jtu = hs[0][:, : self.data_dim]
        if self.skip:
            jtu = jtu + u
        return jtu, gs, hs

    def symmetry_value_and_grad(self, x, c, v, need_grad=True):
        """Mean over rows of ``|J v - J^T v|^2`` and its parameter gradient.

        Each row of ``v`` is the probe for the matching row of ``x``.  The
        gradient is reverse mode applied to the probe-contracted scalar, so no
        Jacobian is ever formed.
        """
        xb, _ = self._prepare(x)
        vb = np.asarray(v, dtype=float).reshape(xb.shape)
        acts, _ = self._forward(xb, c)
        ds = self._derivs(acts)
        jv, es, ps = self._jvp(acts, ds, vb)
        jtv, gs, hs = self._vjp(acts, ds, vb)
        w = jv - jtv
        scale = 1.0 / xb.shape[0]
        value = float(np.sum(w * w) * scale)
        if not need_grad:
            return value, None
        L = self.n_layers
        gw = [np.zeros_like(W) for W in self.weights]
        gb = [np.zeros_like(b) for b in self.biases]
        dbar = [np.zeros_like(d) for d in ds]
        gwv = 2.0 * scale * w

        # adjoint of the JVP chain
        pbar = gwv
        for l in range(L - 1, -1, -1):
            gw[l] += pbar.T @ es[l]
            if l == 0:
                break
            ebar = pbar @ self.weights[l]
            dbar[l - 1] += ebar * ps[l - 1]
            pbar = ebar * ds[l - 1]

        # adjoint of the VJP chain
        hbar = np.zeros_like(acts[0])
        hbar[:, : self.data_dim] = -gwv
        for l in range(L):
            gw[l] += gs[l].T @ hbar
            if l == L - 1:
                break
            gbar = hbar @ self.weights[l].T
            dbar[l] += gbar * hs[l + 1]
            hbar = gbar * ds[l]

        # d_l = 1 - a_{l+1}^2, then back through the forward pass
        carry = None
        for l in range(L - 2, -1, -1):
            a_out = acts[l + 1]
            abar = -2.0 * a_out * dbar[l]
            if carry is not None:
                abar += carry
            zbar = abar * ds[l]
            gw[l] += zbar.T @ acts[l]
            gb[l] += zbar.sum(axis=0)
            carry = zbar @ self.weights[l]
        return value, self._flatten_grads(gw, gb)


def mlp_to_bytes(net):
    """Serialize as: magic, header of little-endian uint32s, then ``<f8`` blocks.

    Header: version, data_dim, conditioned, n_freq, skip, n_layers, widths...
    Each layer contributes its weight matrix (row-major) followed by its bias.
    """
    widths = net.widths
    parts = [MAGIC, struct.pack(
        f"<6I{len(widths)}I", FORMAT_VERSION, net.data_dim, int(net.conditioned),
        net.n_freq, int(net.skip), net.n_layers, *widths,
    )]
    for W, b in zip(net.weights, net.biases):
        parts.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def mlp_from_bytes(blob, name="model"):
    if blob[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{name}: not a model file (bad magic)")
    off = len(MAGIC)
    if len(blob) < off + 24:
        raise ValueError(f"{name}: truncated header")
    version, data_dim, cond, n_freq, skip, n_layers = struct.unpack_from("<6I", blob, off)
    if version != FORMAT_VERSION:
        raise ValueError(f"{name}: unsupported model format version {version}")
    off += 24
    try:
        widths = struct.unpack_from(f"<{n_layers + 1}I", blob, off)
    except struct.error:
        raise ValueError(f"{name}: truncated header") from None
    off += 4 * (n_layers + 1)
    expected = off + 8 * sum(o * i + o for i, o in zip(widths[:-1], widths[1:]))
    if expected != len(blob):
        raise ValueError(f"{name}: trailing or missing bytes in model file")
    weights, biases = [], []
    for i, o in zip(widths[:-1], widths[1:]):
        W = np.frombuffer(blob, dtype="<f8", count=o * i, offset=off).reshape(o, i).astype(float)
        off += 8 * o * i
        b = np.frombuffer(blob, dtype="<f8", count=o, offset=off).astype(float)
        off += 8 * o
        weights.append(W)
        biases.append(b)
    return Mlp(weights, biases, data_dim, bool(cond), n_freq, bool(skip))


def save_mlp(net, path):
    with open(path, "wb") as fh:
        fh.write(mlp_to_bytes(net))


def load_mlp(path):
    with open(path, "rb") as fh:
        return mlp_from_bytes(fh.read(), str(path))


def mlp_denoiser(net, sigma):
    """Use a noise-conditioned network as the denoiser at level ``sigma``."""
    return DenoiserField(lambda y: net.forward(y, sigma), float(sigma))


def mlp_velocity(net):
    """Use a time-conditioned network as a velocity field ``v(x, t)``."""
    return lambda x, t: net.forward(x, t)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 256
    n_steps: int = 5000
    sigma_range: Tuple[float, float] = (0.02, 0.3)
    lambda_sym: float = 0.0
    tau_min: float = 0.5
    n_sym_probes: int = 4
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.sigma_range
        if not 0 < lo <= hi:
            raise ValueError(f"sigma_range must satisfy 0 < lo <= hi, got {self.sigma_range}")
        if not 0 < self.tau_min < 1:
            raise ValueError(f"tau_min must lie in (0, 1), got {self.tau_min}")
        if self.lambda_sym < 0:
            raise ValueError("lambda_sym must be >= 0")
        if self.lr <= 0 or self.batch_size < 1 or self.n_steps < 1 or self.n_sym_probes < 1:
            raise ValueError("lr, batch_size, n_steps and n_sym_probes must be positive")


def draw_data(source, rng, n):
    """Clean training points from a mixture or from a fixed ``(N, d)`` dataset."""
    if isinstance(source, IsotropicGaussianMixture):
        return sample(source, rng, n)
    data = np.asarray(source, dtype=float)
    return data[rng.integers(0, len(data), size=n)]


@dataclass
class DenoiseBatch:
    x: np.ndarray
    sigma: np.ndarray
    eps: np.ndarray

    @property
    def noisy(self):
        return self.x + self.sigma[:, None] * self.eps


@dataclass
class FlowBatch:
    x: np.ndarray
    z: np.ndarray
    t: np.ndarray


@dataclass
class SymBatch:
    """Rows already repeated once per probe."""

    y: np.ndarray
    c: np.ndarray
    probes: np.ndarray = field(repr=False)


def draw_denoise_batch(source, cfg, rng, n=None):
    n = n or cfg.batch_size
    x = draw_data(source, rng, n)
    lo, hi = cfg.sigma_range
    sigma = rng.uniform(lo, hi, size=n) if hi > lo else np.full(n, lo)
    eps = rng.standard_normal(x.shape)
    return DenoiseBatch(x, sigma, eps)


def draw_flow_batch(source, cfg, rng, n=None):
    n = n or cfg.batch_size
    x = draw_data(source, rng, n)
    z = rng.standard_normal(x.shape)
    t = rng.uniform(cfg.tau_min, 1.0, size=n)
    return FlowBatch(x, z, t)


def sym_batch(y, c, n_probes, rng):
    y = np.atleast_2d(np.asarray(y, dtype=float))
    c = np.broadcast_to(np.asarray(c, dtype=float), (y.shape[0],))
    probes = rng.standard_normal((y.shape[0], n_probes, y.shape[1]))
    return SymBatch(
        np.repeat(y, n_probes, axis=0),
        np.repeat(c, n_probes),
        probes.reshape(-1, y.shape[1]),
    )


def _squared_error(target):
    n = target.shape[0]

    def fn(out):
        r = out - target
        return float(np.sum(r * r) / n), 2.0 * r / n

    return fn


def denoise_objective(model, batch):
    """``mean |D(x + sigma eps; sigma) - x|^2``; gradient is None for non-Mlp models."""
    y = batch.noisy
    if isinstance(model, Mlp):
        return model.value_and_grad(y, batch.sigma, _squared_error(batch.x))
    return _squared_error(batch.x)(np.asarray(model(y, batch.sigma)))[0], None


def flow_objective(model, batch, sched):
    """``mean |v(x_t, t) - (kappa' x + sigma_b' z)|^2`` on the bridge."""
    t = batch.t[:, None]
    xt = sched.kappa(t) * batch.x + sched.sigma_b(t) * batch.z
    target = sched.kappa_dot(t) * batch.x + sched.sigma_b_dot(t) * batch.z
    if isinstance(model, Mlp):
        return model.value_and_grad(xt, batch.t, _squared_error(target))
    return _squared_error(target)(np.asarray(model(xt, batch.t)))[0], None


def symmetry_objective(model, batch, need_grad=True):
    if not isinstance(model, Mlp):
        raise TypeError("the symmetry penalty needs an Mlp (input JVP/VJP)")
    c = batch.c if model.conditioned else None
    return model.symmetry_value_and_grad(batch.y, c, batch.probes, need_grad)


def denoise_loss(model, source, cfg, rng):
    """Draw a batch and return ``(loss, gradient)`` of the denoising objective."""
    return denoise_objective(model, draw_denoise_batch(source, cfg, rng))


def symmetry_penalty(model, x, n_probes, rng, c=None):
    """Hutchinson estimate of ``E_v |J v - J^T v|^2`` at the points ``x``."""
    if n_probes < 1:
        raise ValueError("need at least one probe")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    c = 0.0 if c is None else c
    return symmetry_objective(model, sym_batch(x, c, n_probes, rng))


def flow_matching_loss(model, source, sched, cfg, rng):
    """Draw a batch and return ``(loss, gradient)`` of bridge flow matching."""
    return flow_objective(model, draw_flow_batch(source, cfg, rng), sched)


def grad_params(net, objective, batch, **kwargs):
    """Flat parameter gradient of ``objective(net, batch)``."""
    return objective(net, batch, **kwargs)[1]


OBJECTIVES = ("denoise", "denoise+sym", "flow_match")


def _step_loss(net, objective, source, cfg, rng, sched):
    if objective == "flow_match":
        return flow_matching_loss(net, source, sched, cfg, rng)
    batch = draw_denoise_batch(source, cfg, rng)
    loss, grad = denoise_objective(net, batch)
    if objective == "denoise+sym" and cfg.lambda_sym > 0:
        sb = sym_batch(batch.noisy, batch.sigma, cfg.n_sym_probes, rng)
        s_val, s_grad = symmetry_objective(net, sb)
        loss += cfg.lambda_sym * s_val
        grad = grad + cfg.lambda_sym * s_grad
    return loss, grad


def train(net, objective, source, cfg, sched=None, callback=None):
    """Adam (beta = 0.9, 0.999; eps = 1e-8) on the chosen objective.

    Returns the trained network and the per-step loss trace.  Randomness comes
    only from ``cfg.seed``.

    Raises:
        NumericalError: the loss became non-finite (``err.step`` is the step).
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}, got {objective!r}")
    if objective == "flow_match" and sched is None:
        raise ValueError("flow matching needs a bridge schedule")
    rng = rngmod.substream(cfg.seed, rngmod.STREAM_TRAIN)
    theta = net.flat()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2, eps = 0.9, 0.999, 1e-8
    trace = np.empty(cfg.n_steps)
    for i in range(cfg.n_steps):
        loss, grad = _step_loss(net, objective, source, cfg, rng, sched)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise NumericalError("training diverged (non-finite loss)", step=i)
        trace[i] = loss
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        mhat = m / (1 - b1 ** (i + 1))
        vhat = v / (1 - b2 ** (i + 1))
        theta = theta - cfg.lr * mhat / (np.sqrt(vhat) + eps)
        net = net.with_flat(theta)
        if callback is not None:
            callback(i, loss)
    return net, trace
