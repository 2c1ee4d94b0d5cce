"""Trajectory CSV reading and self-contained SVG scatter/trajectory plots.

The SVG is written by hand so that the same input always yields the same
bytes: fixed number formatting, fixed element order, no timestamps.
"""

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .metrics import fmt

WIDTH, HEIGHT, MARGIN = 480, 480, 40
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2")
TRAJ_COLUMNS = ("chain", "step", "accepted")


class CsvFormatError(ValueError):
    """Malformed trajectory CSV; ``line`` is the 1-based line number."""

    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class Trajectory:
    """Rows of a trajectory CSV, as arrays."""

    chain: np.ndarray
    step: np.ndarray
    accepted: np.ndarray
    positions: np.ndarray
    thin: int = 0
    header: list = field(default_factory=list)

    @property
    def dim(self):
        return self.positions.shape[1]


def trajectory_csv(result, thin):
    """CSV text for a :class:`~statsamp.samplers.RunResult` recorded with ``thin > 0``.

    Columns are ``chain, step, accepted, x0, x1, ...``, chain-major, preceded
    by a ``# thin=N`` comment line.
    """
    traj = result.trajectory
    steps = result.trajectory_steps
    flags = result.accepted
    n_frames, n_chains, dim = traj.shape
    buf = io.StringIO()
    buf.write(f"# thin={int(thin)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(TRAJ_COLUMNS) + [f"x{j}" for j in range(dim)])
    for c in range(n_chains):
        for f in range(n_frames):
            w.writerow([c, int(steps[f]), int(flags[f, c])] + [fmt(v) for v in traj[f, c]])
    return buf.getvalue()


def read_trajectory(text):
    """Parse trajectory CSV text, reporting the line number of any defect."""
    thin = 0
    header = None
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("thin="):
                try:
                    thin = int(body[5:])
                except ValueError:
                    raise CsvFormatError(f"bad thinning comment {line!r}", lineno) from None
            continue
        cells = next(csv.reader([line]))
        if header is None:
            header = [c.strip() for c in cells]
            if tuple(header[:3]) != TRAJ_COLUMNS or len(header) < 4:
                raise CsvFormatError(
                    f"header must start with {','.join(TRAJ_COLUMNS)} and have coordinates", lineno
                )
            continue
        if len(cells) != len(header):
            raise CsvFormatError(f"expected {len(header)} fields, got {len(cells)}", lineno)
        try:
            vals = [float(c) for c in cells]
        except ValueError:
            raise CsvFormatError(f"non-numeric field in {line!r}", lineno) from None
        if not np.all(np.isfinite(vals)):
            raise CsvFormatError("non-finite value", lineno)
        rows.append(vals)
    if header is None:
        raise CsvFormatError("missing header row", 1)
    arr = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return Trajectory(
        chain=arr[:, 0].astype(int),
        step=arr[:, 1].astype(int),
        accepted=arr[:, 2].astype(int),
        positions=arr[:, 3:],
        thin=thin,
        header=header,
    )


def _tracks(traj):
    """Per-chain 2D point sequences in step order. 1D data is drawn against step."""
    if traj.dim >= 2:
        pts = traj.positions[:, :2]
    else:
        pts = np.column_stack([traj.step.astype(float), traj.positions[:, 0]])
    out = []
    for c in np.unique(traj.chain):
        sel = np.flatnonzero(traj.chain == c)
        sel = sel[np.argsort(traj.step[sel], kind="stable")]
        out.append(pts[sel])
    return out


def data_bounds(tracks):
    """``(xmin, xmax, ymin, ymax)`` padded so neither span is zero."""
    pts = [t for t in tracks if len(t)]
    if not pts:
        return (-1.0, 1.0, -1.0, 1.0)
    allp = np.concatenate(pts)
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    span = hi - lo
    pad = np.where(span > 0, 0.05 * span, 1.0)
    return (lo[0] - pad[0], hi[0] + pad[0], lo[1] - pad[1], hi[1] + pad[1])


def scale_points(points, bounds, frame):
    """Map data coordinates into a pixel ``frame = (left, top, width, height)``; y points up."""
    x0, x1, y0, y1 = bounds
    left, top, w, h = frame
    p = np.atleast_2d(np.asarray(points, dtype=float))
    px = left + (p[:, 0] - x0) / (x1 - x0) * w
    py = top + h - (p[:, 1] - y0) / (y1 - y0) * h
    return np.column_stack([px, py])


def _n(v):
    return f"{v:.2f}"


def _panel(title, tracks, offset_x, color=None):
    frame = (offset_x + MARGIN, MARGIN, WIDTH - 2 * MARGIN, HEIGHT - 2 * MARGIN)
    bounds = data_bounds(tracks)
    left, top, w, h = frame
    parts = [
        '<g class="panel">',
        f'<rect x="{_n(left)}" y="{_n(top)}" width="{_n(w)}" height="{_n(h)}" '
        f'fill="none" stroke="#000" stroke-width="1"/>',
        f'<text x="{_n(left + w / 2)}" y="{_n(top - 12)}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{_escape(title)}</text>',
        f'<text x="{_n(left)}" y="{_n(top + h + 16)}" font-family="sans-serif" '
        f'font-size="10">{fmt(bounds[0])}</text>',
        f'<text x="{_n(left + w)}" y="{_n(top + h + 16)}" text-anchor="end" '
        f'font-family="sans-serif" font-size="10">{fmt(bounds[1])}</text>',
        f'<text x="{_n(left - 4)}" y="{_n(top + h)}" text-anchor="end" '
        f'font-family="sans-serif" font-size="10">{fmt(bounds[2])}</text>',
        f'<text x="{_n(left - 4)}" y="{_n(top + 10)}" text-anchor="end" '
        f'font-family="sans-serif" font-size="10">{fmt(bounds[3])}</text>',
    ]
    for i, t in enumerate(tracks):
        if not len(t):
            continue
        c = color or PALETTE[i % len(PALETTE)]
        px = scale_points(t, bounds, frame)
        if len(px) > 1:
            pts = " ".join(f"{_n(a)},{_n(b)}" for a, b in px)
            parts.append(f'<polyline points="{pts}" fill="none" stroke="{c}" '
                         f'stroke-width="0.6" stroke-opacity="0.6"/>')
        a, b = px[-1]
        parts.append(f'<circle cx="{_n(a)}" cy="{_n(b)}" r="2.5" fill="{c}"/>')
    parts.append("</g>")
    return parts


def _escape(s):
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def render_svg(panels):
    """SVG text for side-by-side panels, each ``(title, tracks)`` or ``(title, tracks, color)``.

    ``tracks`` is a list of ``(n_i, 2)`` arrays; each is drawn as a polyline
    with a marker at its last point.
    """
    panels = list(panels)
    total_w = WIDTH * max(1, len(panels))
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{total_w}" height="{HEIGHT}" '
        f'viewBox="0 0 {total_w} {HEIGHT}">',
        f'<rect width="{total_w}" height="{HEIGHT}" fill="#fff"/>',
    ]
    for i, (title, tracks, *color) in enumerate(panels):
        lines.extend(_panel(title, tracks, i * WIDTH, *color))
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def trajectory_svg(traj, title="trajectory"):
    return render_svg([(title, _tracks(traj))])


def scatter_svg(panels):
    """Final-state scatter panels: ``[(title, points (n, d))]``, one marker per point."""
    out = []
    for i, (title, pts) in enumerate(panels):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if pts.shape[1] == 1:
            pts = np.column_stack([np.arange(len(pts), dtype=float), pts[:, 0]])
        out.append((title, [p[None, :2] for p in pts], PALETTE[i % len(PALETTE)]))
    return render_svg(out)
