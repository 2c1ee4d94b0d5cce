"""Command-line driver: ``statsamp <command> [options]``.

Commands:
    compare-ula   ULA against dMALA from the same seeds (drift vs. invariance).
    ablate-dmala  dMALA sweep over t_noise; sigma = (1 - t_noise) / t_noise.
    ablate-pc     Predictor-corrector sweep over the bridge time tau.
    train         Fit the small network; writes the model file and loss trace.
    sample        Run one configured kernel and dump the trajectory.
    plot          Render a trajectory CSV as an SVG file.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

import argparse
import csv
import io
import os
import sys
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .bridges import (
    Integrator,
    exact_denoiser,
    exact_velocity_field,
    gaussian_flow_map,
    get_schedule,
    velocity_denoiser,
)
from .config import TrainSection, apply_override, parse_config, read_toml, t_noise_to_sigma
from .errors import ConfigError, NumericalError
from .learn import Mlp, load_mlp, mlp_denoiser, mlp_to_bytes, mlp_velocity, train
from .metrics import MetricReport, ablation_table, fmt, mean_move, mmd_rbf, nll
from .plot import CsvFormatError, read_trajectory, scatter_svg, trajectory_csv, trajectory_svg
from .samplers import Kernel, KernelConfig, resolve_threads, run_chains
from .targets import log_density, sample, score, smooth

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

DEFAULTS = {
    "compare-ula": {"n_chains": 32, "steps": 2500},
    "ablate-dmala": {"n_chains": 2048, "steps": 200},
    "ablate-pc": {"n_chains": 2048, "steps": 200},
    "sample": {"n_chains": 1024, "steps": 200},
}


# ---------------------------------------------------------------- helpers

class Context:
    """Validated config plus the objects every command needs."""

    def __init__(self, cfg, threads, command):
        self.cfg = cfg
        self.threads = threads
        self.command = command
        self.gm = cfg.target.build()
        self.schedule = get_schedule(cfg.kernel.schedule)
        d = DEFAULTS.get(command, {})
        self.n_chains = cfg.run.n_chains or d.get("n_chains", 1)
        self.steps = cfg.run.steps or d.get("steps", 1)
        self.seed = cfg.run.seed
        self.out = Path(cfg.output.dir)
        self._model = None
        self._files = {}

    def clean_and_noise(self):
        """Clean seeds ``x0 ~ p`` and standard-normal noise for p_sigma-consistent starts."""
        g = rngmod.substream(self.seed, rngmod.STREAM_INIT)
        x0 = sample(self.gm, g, self.n_chains)
        eps = g.standard_normal(x0.shape)
        return x0, eps

    def reference(self, law):
        return sample(law, rngmod.substream(self.seed, rngmod.STREAM_REFERENCE), self.cfg.run.n_reference)

    def run(self, kernel, init, thin=None):
        thin = self.cfg.run.thin if thin is None else thin
        return run_chains(kernel, init, self.steps, seed=self.seed, thin=thin, threads=self.threads)

    def model(self):
        """The learned network: loaded from ``train.model_path`` if present, else trained."""
        if self._model is None:
            tr = self.cfg.train
            if tr.model_path and os.path.exists(tr.model_path):
                try:
                    net = load_mlp(tr.model_path)
                except ValueError as err:
                    raise ConfigError(str(err), "train.model_path") from None
                if net.data_dim != self.gm.dim:
                    raise ConfigError(f"model dimension {net.data_dim} != target dimension {self.gm.dim}",
                                      "train.model_path")
                self._model = net
            else:
                self._model = fit_model(self.cfg, self.gm, self.schedule)[0]
        return self._model

    def denoiser(self, sigma):
        if self.cfg.oracle_mode == "analytic":
            return exact_denoiser(self.gm, sigma)
        net = self.model()
        if self.cfg.train.objective == "flow_match":
            return velocity_denoiser(mlp_velocity(net), self.schedule, sigma)
        return mlp_denoiser(net, sigma)

    def pc_kernel(self, tau):
        k = self.cfg.kernel
        if k.flow == "solution_map":
            cfg = KernelConfig("pc", tau=tau, pc_integrator="solution_map")
            return Kernel(cfg, solution_map=gaussian_flow_map(self.gm, self.schedule), schedule=self.schedule)
        cfg = KernelConfig("pc", tau=tau, pc_integrator=Integrator(k.integrator, k.integrator_steps))
        if self.cfg.oracle_mode == "analytic":
            velocity = exact_velocity_field(self.gm, self.schedule)
        else:
            velocity = mlp_velocity(self.model())
        return Kernel(cfg, velocity=velocity, schedule=self.schedule)

    def stage(self, name, text):
        """Queue a file; nothing is written until the command has finished computing."""
        self._files[name] = text

    def flush(self):
        self.out.mkdir(parents=True, exist_ok=True)
        for name, text in self._files.items():
            data = text if isinstance(text, bytes) else text.encode("utf-8")
            path = self.out / name  # absolute names ignore the output dir
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(data)
        return sorted(self._files)


def fit_model(cfg, gm, schedule):
    tr = cfg.train or TrainSection()
    flow = tr.objective == "flow_match"
    net = Mlp.init(gm.dim, tr.hidden, rng=rngmod.substream(cfg.run.seed, rngmod.STREAM_TRAIN, 1),
                   skip=not flow)
    return train(net, tr.objective, gm, tr.train_config(cfg.run.seed), sched=schedule if flow else None)


def law_variance(gm):
    """Per-coordinate variance of the mixture, averaged over coordinates."""
    m = gm.weights @ gm.means
    second = gm.weights @ (gm.means ** 2 + gm.variances[:, None])
    return float(np.mean(second - m * m))


def _csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(["" if v is None else (v if isinstance(v, str) else fmt(v)) for v in row])
    return buf.getvalue()


def _validate_sweep(values, path):
    for v in values:
        if not 0.0 < v < 1.0:
            raise ConfigError(f"values must lie in (0, 1), got {v}", path)
    return sorted(values)


# ---------------------------------------------------------------- commands

def _check_learned(ctx, need_flow):
    cfg = ctx.cfg
    if cfg.oracle_mode != "learned":
        return
    if need_flow and cfg.train.objective != "flow_match":
        raise ConfigError("predictor-corrector in learned mode needs a flow_match model", "train.objective")
    if cfg.kernel.flow == "solution_map":
        raise ConfigError("learned mode provides a velocity field, not a solution map", "kernel.flow")


def _check_flow(ctx):
    if ctx.cfg.kernel.flow == "solution_map" and ctx.gm.n_components != 1:
        raise ConfigError("closed-form solution map needs a single-Gaussian target", "kernel.flow")


def cmd_compare_ula(ctx):
    k = ctx.cfg.kernel
    sigma = k.resolved_sigma()
    h = k.h if k.h is not None else sigma * sigma
    _check_learned(ctx, need_flow=False)
    thin = ctx.cfg.run.thin or max(1, ctx.steps // 100)

    x0, eps = ctx.clean_and_noise()
    gm, p_sigma = ctx.gm, smooth(ctx.gm, sigma)
    ula = Kernel(KernelConfig("ula", h=h), score=lambda x: score(gm, x))
    dmala = Kernel(KernelConfig("dmala", sigma=sigma, quadrature_nodes=k.quadrature_nodes),
                   denoiser=ctx.denoiser(sigma))
    r_ula = ctx.run(ula, x0, thin)
    r_dm = ctx.run(dmala, x0 + sigma * eps, thin)

    rows = []
    for name, law, law_name, r in (("ula", gm, "p", r_ula), ("dmala", p_sigma, "p_sigma", r_dm)):
        rows.append([name, law_name, ctx.steps, r.pooled.acceptance_rate, nll(law, r.final),
                     mmd_rbf(r.final, ctx.reference(law)), r.pooled.mean_move,
                     float(np.mean(np.var(r.final, axis=0))), law_variance(law)])
    header = ["sampler", "law", "steps", "acc_rate", "nll", "mmd", "mean_move", "variance", "law_variance"]
    ctx.stage("compare_ula.csv", _csv(header, rows))
    ctx.stage("ula_trajectory.csv", trajectory_csv(r_ula, thin))
    ctx.stage("dmala_trajectory.csv", trajectory_csv(r_dm, thin))
    if ctx.cfg.output.emit_plots:
        ctx.stage("compare_ula.svg", scatter_svg([(f"ULA h={fmt(h)}", r_ula.final),
                                                  (f"dMALA sigma={fmt(sigma)}", r_dm.final)]))


def cmd_ablate_dmala(ctx, t_list):
    t_list = _validate_sweep(t_list, "kernel.t_noise_list")
    _check_learned(ctx, need_flow=False)
    x0, eps = ctx.clean_and_noise()
    reports, finals = [], []
    for t in t_list:
        sigma = t_noise_to_sigma(t)
        law = smooth(ctx.gm, sigma)
        kernel = Kernel(KernelConfig("dmala", sigma=sigma, quadrature_nodes=ctx.cfg.kernel.quadrature_nodes),
                        denoiser=ctx.denoiser(sigma))
        r = ctx.run(kernel, x0 + sigma * eps)
        reports.append(MetricReport(
            label=f"t_noise={fmt(t)}", kind="dmala", nll=nll(law, r.final),
            mmd=mmd_rbf(r.final, ctx.reference(law)), mean_move=r.pooled.mean_move,
            n_samples=len(r.final), n_steps=ctx.steps, acceptance_rate=r.pooled.acceptance_rate,
            params={"sigma": sigma, "t_noise": t}))
        finals.append((f"t_noise={fmt(t)}", r.final))
        if ctx.cfg.run.thin:
            ctx.stage(f"dmala_t{fmt(t)}_trajectory.csv", trajectory_csv(r, ctx.cfg.run.thin))
    ctx.stage("ablation_dmala.csv", ablation_table(reports))
    if ctx.cfg.output.emit_plots:
        ctx.stage("ablation_dmala.svg", scatter_svg(finals))
    return reports


def cmd_ablate_pc(ctx, tau_list):
    tau_list = _validate_sweep(tau_list, "kernel.tau_list")
    _check_learned(ctx, need_flow=True)
    _check_flow(ctx)
    x0, _ = ctx.clean_and_noise()
    ref = ctx.reference(ctx.gm)
    reports, finals = [], []
    for tau in tau_list:
        r = ctx.run(ctx.pc_kernel(tau), x0)
        reports.append(MetricReport(
            label=f"tau={fmt(tau)}", kind="pc", nll=nll(ctx.gm, r.final), mmd=mmd_rbf(r.final, ref),
            mean_move=r.pooled.mean_move, n_samples=len(r.final), n_steps=ctx.steps,
            params={"tau": tau}))
        finals.append((f"tau={fmt(tau)}", r.final))
        if ctx.cfg.run.thin:
            ctx.stage(f"pc_tau{fmt(tau)}_trajectory.csv", trajectory_csv(r, ctx.cfg.run.thin))
    ctx.stage("ablation_pc.csv", ablation_table(reports))
    if ctx.cfg.output.emit_plots:
        ctx.stage("ablation_pc.svg", scatter_svg(finals))
    return reports


def cmd_train(ctx):
    tr = ctx.cfg.train or TrainSection()
    net, trace = fit_model(ctx.cfg, ctx.gm, ctx.schedule)
    ctx.stage("train_loss.csv", _csv(["step", "loss"], ([i, v] for i, v in enumerate(trace))))
    ctx.stage(tr.model_path or "model.bin", mlp_to_bytes(net))


def cmd_sample(ctx):
    k = ctx.cfg.kernel
    x0, eps = ctx.clean_and_noise()
    gm = ctx.gm
    if k.kind in ("ula", "mala"):
        if k.h is None:
            raise ConfigError(f"required for kernel kind {k.kind!r}", "kernel.h")
        kernel = Kernel(KernelConfig(k.kind, h=k.h), score=lambda x: score(gm, x),
                        log_density=lambda x: log_density(gm, x))
        law, init = gm, x0
    elif k.kind == "dmala":
        _check_learned(ctx, need_flow=False)
        sigma = k.resolved_sigma()
        kernel = Kernel(KernelConfig("dmala", sigma=sigma, quadrature_nodes=k.quadrature_nodes),
                        denoiser=ctx.denoiser(sigma))
        law, init = smooth(gm, sigma), x0 + sigma * eps
    else:
        _check_learned(ctx, need_flow=True)
        _check_flow(ctx)
        kernel = ctx.pc_kernel(k.tau if k.tau is not None else 0.95)
        law, init = gm, x0
    thin = ctx.cfg.run.thin or ctx.steps
    r = ctx.run(kernel, init, thin)
    header = ["kernel", "steps", "acc_rate", "nll", "mmd", "mean_move"]
    row = [k.kind, ctx.steps, r.pooled.acceptance_rate, nll(law, r.final),
           mmd_rbf(r.final, ctx.reference(law)), mean_move(r.initial, r.final)]
    ctx.stage("sample_report.csv", _csv(header, [row]))
    ctx.stage("samples_trajectory.csv", trajectory_csv(r, thin))
    if ctx.cfg.output.emit_plots:
        ctx.stage("samples.svg", scatter_svg([(k.kind, r.final)]))


def cmd_plot(args):
    src = Path(args.input)
    try:
        text = src.read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"cannot read trajectory: {err.strerror}", str(src)) from None
    svg = trajectory_svg(read_trajectory(text), title=src.stem)
    dst = Path(args.output) if args.output else Path(args.out or src.parent) / (src.stem + ".svg")
    dst.parent.mkdir(parents=True, exist_ok=True)
    dst.write_bytes(svg.encode("utf-8"))
    return [str(dst)]


# ---------------------------------------------------------------- argument parsing

def _common():
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--config", metavar="PATH", help="TOML experiment config")
    g.add_argument("--seed", type=int, metavar="U64", help="master seed (overrides run.seed)")
    g.add_argument("--out", metavar="DIR", help="output directory (overrides output.dir)")
    g.add_argument("--threads", type=int, metavar="N",
                   help="worker threads for chain groups (default: $STATSAMP_THREADS or 1)")
    g.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config field; repeatable")
    g.add_argument("--chains", type=int, metavar="N", help="overrides run.n_chains")
    g.add_argument("--steps", type=int, metavar="K", help="overrides run.steps")
    g.add_argument("--thin", type=int, metavar="N", help="overrides run.thin")
    g.add_argument("--emit-plots", action="store_true", default=None, help="write SVG plots")
    return p


def build_parser():
    common = _common()
    parser = argparse.ArgumentParser(prog="statsamp", description=__doc__.split("\n")[0],
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    sub.add_parser("compare-ula", parents=[common], help="ULA drift vs. dMALA invariance")
    p = sub.add_parser("ablate-dmala", parents=[common], help="dMALA sweep over t_noise")
    p.add_argument("--t-noise", type=float, nargs="+", metavar="T", help="overrides kernel.t_noise_list")
    p = sub.add_parser("ablate-pc", parents=[common], help="predictor-corrector sweep over tau")
    p.add_argument("--tau", type=float, nargs="+", metavar="TAU", help="overrides kernel.tau_list")
    sub.add_parser("train", parents=[common], help="train the network")
    sub.add_parser("sample", parents=[common], help="run one configured kernel")
    p = sub.add_parser("plot", parents=[common], help="render a trajectory CSV as SVG")
    p.add_argument("input", metavar="TRAJECTORY_CSV")
    p.add_argument("-o", "--output", metavar="SVG", help="output file (default: <out>/<input stem>.svg)")
    return parser


def load_config(args):
    """Merge the config file, ``--set`` overrides and dedicated flags, then validate."""
    raw = read_toml(args.config) if args.config else {}
    for assignment in args.set:
        apply_override(raw, assignment)
    flags = {
        ("run", "seed"): args.seed,
        ("run", "n_chains"): args.chains,
        ("run", "steps"): args.steps,
        ("run", "thin"): args.thin,
        ("output", "dir"): args.out,
        ("output", "emit_plots"): args.emit_plots,
        ("kernel", "t_noise_list"): getattr(args, "t_noise", None),
        ("kernel", "tau_list"): getattr(args, "tau", None),
    }
    for (section, key), value in flags.items():
        if value is not None:
            node = raw.setdefault(section, {})
            if not isinstance(node, dict):
                raise ConfigError("expected a table", section)
            node[key] = value
    return parse_config(raw)


def _threads(value):
    try:
        return resolve_threads(value)
    except ValueError as err:
        raise ConfigError(str(err), "--threads") from None


def run_command(args):
    if args.command == "plot":
        return cmd_plot(args)
    cfg = load_config(args)
    ctx = Context(cfg, _threads(args.threads), args.command)
    if args.command == "compare-ula":
        cmd_compare_ula(ctx)
    elif args.command == "ablate-dmala":
        cmd_ablate_dmala(ctx, cfg.kernel.t_noise_list)
    elif args.command == "ablate-pc":
        cmd_ablate_pc(ctx, cfg.kernel.tau_list)
    elif args.command == "train":
        cmd_train(ctx)
    else:
        cmd_sample(ctx)
    return [str(ctx.out / f) for f in ctx.flush()]


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        written = run_command(args)
    except (ConfigError, CsvFormatError) as err:
        print(f"statsamp: error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as err:
        print(f"statsamp: numerical error: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    for path in written:
        print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
