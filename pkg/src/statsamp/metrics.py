"""Sample-quality metrics and ablation tables.

Reductions over large pairwise kernel matrices are done in fixed row blocks;
block partial sums are collected in order and combined with ``np.sum``
(pairwise summation), so results do not depend on any parallel schedule.
"""

import csv
import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .targets import as_batch, log_density

MEDIAN_POOL_MAX = 2000
_BLOCK = 64


def nll(gm, samples):
    """Average negative log-likelihood of ``samples`` under ``gm``."""
    x, _ = as_batch(samples, gm.dim)
    if x.shape[0] == 0:
        raise ValueError("nll needs at least one sample")
    return float(-np.mean(log_density(gm, x)))


def nll_with_stderr(gm, samples):
    """``(mean, standard error)`` of the per-sample negative log-likelihood."""
    x, _ = as_batch(samples, gm.dim)
    if x.shape[0] < 2:
        raise ValueError("standard error needs at least two samples")
    v = -log_density(gm, x)
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(len(v)))


def _canonical(x):
    return x[np.lexsort(x.T[::-1])]


def median_bandwidth(x, y):
    """Median pairwise Euclidean distance over the pooled set.

    Pools above ``MEDIAN_POOL_MAX`` points are first put in lexicographic order
    and thinned with an even stride, which keeps the value independent of the
    order of the inputs and of which argument is which.
    """
    pool = _canonical(np.concatenate([x, y]))
    if len(pool) > MEDIAN_POOL_MAX:
        idx = np.linspace(0, len(pool) - 1, MEDIAN_POOL_MAX).round().astype(int)
        pool = pool[idx]
    diff = pool[:, None, :] - pool[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    iu = np.triu_indices(len(pool), k=1)
    med = float(np.median(dist[iu])) if len(iu[0]) else 0.0
    return med if med > 0 else 1.0


def _kernel_mean(a, b, gamma):
    """Mean of ``exp(-gamma |a_i - b_j|^2)`` over all pairs, in row blocks."""
    na = gamma * (a * a).sum(1)
    nb = gamma * (b * b).sum(1)
    parts = []
    for i in range(0, len(a), _BLOCK):
        g = a[i:i + _BLOCK] @ b.T
        g *= 2.0 * gamma
        g -= na[i:i + _BLOCK, None]
        g -= nb[None, :]
        np.minimum(g, 0.0, out=g)
        np.exp(g, out=g)
        parts.append(g.sum())
    return float(np.sum(parts)) / (len(a) * len(b))


def mmd_rbf(x, y, bandwidth="median"):
    """Biased (V-statistic) MMD with kernel ``exp(-|a - b|^2 / (2 l^2))``.

    Returns ``sqrt(max(0, MMD^2))``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if x.size == 0 or y.size == 0:
        raise ValueError("mmd needs two nonempty sample sets")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    ell = median_bandwidth(x, y) if bandwidth == "median" else float(bandwidth)
    if not ell > 0:
        raise ValueError(f"bandwidth must be > 0, got {bandwidth!r}")
    gamma = 0.5 / (ell * ell)
    kxx = _kernel_mean(x, x, gamma)
    kyy = _kernel_mean(y, y, gamma)
    kxy = _kernel_mean(x, y, gamma) if len(x) <= len(y) else _kernel_mean(y, x, gamma)
    return float(np.sqrt(max(0.0, kxx + kyy - 2.0 * kxy)))


def mean_move(initial, final):
    """Average Euclidean distance between matched initial and final positions."""
    a = np.atleast_2d(np.asarray(initial, dtype=float))
    b = np.atleast_2d(np.asarray(final, dtype=float))
    if a.shape != b.shape:
        raise ValueError(f"initial and final shapes differ: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(b - a, axis=1).mean())


@dataclass
class MetricReport:
    """One ablation row. ``params`` echoes the swept setting (``sigma``/``t_noise`` or ``tau``)."""

    label: str
    kind: str
    nll: float
    mmd: float
    mean_move: float
    n_samples: int
    n_steps: int
    acceptance_rate: Optional[float] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TABLE_COLUMNS:
            raise ValueError(f"report kind must be one of {sorted(TABLE_COLUMNS)}")
        if self.n_samples < 1 or self.n_steps < 1:
            raise ValueError("sample and step counts must be positive")
        self.mmd = max(0.0, float(self.mmd))
        values = [self.nll, self.mmd, self.mean_move]
        if self.acceptance_rate is not None:
            values.append(self.acceptance_rate)
            if not 0.0 <= self.acceptance_rate <= 1.0:
                raise ValueError("acceptance rate must lie in [0, 1]")
        if not all(np.isfinite(values)):
            raise ValueError(f"non-finite metric in report {self.label!r}")


TABLE_COLUMNS = {
    "dmala": ["t_noise", "sigma", "steps", "acc_rate", "nll_p_sigma", "mmd_p_sigma", "mean_move"],
    "pc": ["tau", "steps", "nll_p", "mmd_p", "mean_move"],
}
SORT_KEY = {"dmala": "t_noise", "pc": "tau"}


def fmt(v):
    """Six significant digits, the CSV number format."""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.6g}"


def _row(r):
    if r.kind == "dmala":
        sigma = r.params["sigma"]
        t_noise = r.params.get("t_noise", 1.0 / (1.0 + sigma))
        return [t_noise, sigma, r.n_steps, r.acceptance_rate, r.nll, r.mmd, r.mean_move]
    return [r.params["tau"], r.n_steps, r.nll, r.mmd, r.mean_move]


def ablation_table(reports):
    """CSV text for Table-1 (dMALA) or Table-2 (predictor-corrector) style rows.

    Rows are sorted by the swept parameter, ascending.
    """
    reports = list(reports)
    if not reports:
        raise ValueError("ablation_table needs at least one report")
    kinds = {r.kind for r in reports}
    if len(kinds) != 1:
        raise ValueError(f"cannot mix report kinds in one table: {sorted(kinds)}")
    kind = kinds.pop()
    rows = sorted((_row(r) for r in reports), key=lambda row: row[0])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS[kind])
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()
