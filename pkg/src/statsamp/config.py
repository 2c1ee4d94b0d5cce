"""Experiment configuration: TOML file plus command-line overrides.

Every field is validated when the config is built, so a command never starts
computing (or writing files) with a bad setting.  Errors carry the dotted
path of the offending field, e.g. ``kernel.sigma``.
"""

from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from .bridges import SCHEDULES
from .errors import ConfigError
from .learn import OBJECTIVES, TrainConfig
from .samplers import KERNEL_KINDS
from .targets import IsotropicGaussianMixture, SwissRollSpec, swiss_roll_target

ORACLE_MODES = ("analytic", "learned")


@dataclass(frozen=True)
class TargetSection:
    kind: str = "swiss_roll"
    swiss_roll: SwissRollSpec = field(default_factory=SwissRollSpec)
    mixture: Optional[IsotropicGaussianMixture] = None

    def build(self):
        if self.kind == "swiss_roll":
            return swiss_roll_target(self.swiss_roll)
        return self.mixture


@dataclass(frozen=True)
class KernelSection:
    """Kernel settings shared by the commands.

    ``sigma`` and ``t_noise`` are two spellings of the dMALA noise level,
    linked by ``sigma = (1 - t_noise) / t_noise``; at most one may be given.
    """

    kind: str = "dmala"
    h: Optional[float] = None
    sigma: Optional[float] = None
    t_noise: Optional[float] = None
    tau: Optional[float] = None
    quadrature_nodes: int = 2
    integrator: str = "rk2"
    integrator_steps: int = 200
    flow: str = "velocity"
    schedule: str = "linear"
    t_noise_list: Tuple[float, ...] = (0.90, 0.95, 0.98)
    tau_list: Tuple[float, ...] = (0.70, 0.85, 0.95)

    def resolved_sigma(self, default_t_noise=0.95):
        if self.sigma is not None:
            return self.sigma
        return t_noise_to_sigma(self.t_noise if self.t_noise is not None else default_t_noise)


@dataclass(frozen=True)
class TrainSection:
    objective: str = "denoise"
    hidden: Tuple[int, ...] = (64, 64)
    model_path: Optional[str] = None
    lr: float = 1e-3
    batch_size: int = 256
    n_steps: int = 5000
    sigma_range: Tuple[float, float] = (0.02, 0.3)
    lambda_sym: float = 0.0
    tau_min: float = 0.5
    n_sym_probes: int = 4

    def train_config(self, seed):
        return TrainConfig(self.lr, self.batch_size, self.n_steps, tuple(self.sigma_range),
                           self.lambda_sym, self.tau_min, self.n_sym_probes, seed)


@dataclass(frozen=True)
class RunSection:
    """``None`` for ``n_chains``/``steps`` means "use the command's default"."""

    n_chains: Optional[int] = None
    steps: Optional[int] = None
    thin: int = 0
    seed: int = 0
    n_reference: int = 10000


@dataclass(frozen=True)
class OutputSection:
    dir: str = "."
    emit_plots: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    target: TargetSection = field(default_factory=TargetSection)
    kernel: KernelSection = field(default_factory=KernelSection)
    train: Optional[TrainSection] = None
    run: RunSection = field(default_factory=RunSection)
    output: OutputSection = field(default_factory=OutputSection)
    oracle_mode: str = "analytic"

    def with_run(self, **kw):
        return replace(self, run=replace(self.run, **kw))


def t_noise_to_sigma(t_noise):
    """Smoothing level ``(1 - t) / t`` for a denoising time ``t`` in (0, 1)."""
    t = float(t_noise)
    if not 0.0 < t < 1.0:
        raise ValueError(f"t_noise must lie in (0, 1), got {t_noise}")
    return (1.0 - t) / t


# ---------------------------------------------------------------- field checks

def _real(v, path, lo=None, hi=None, lo_open=True, hi_open=True):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"expected a number, got {v!r}", path)
    v = float(v)
    if not np.isfinite(v):
        raise ConfigError(f"must be finite, got {v!r}", path)
    if lo is not None and (v < lo or (lo_open and v == lo)):
        raise ConfigError(f"must be {'>' if lo_open else '>='} {lo}, got {v}", path)
    if hi is not None and (v > hi or (hi_open and v == hi)):
        raise ConfigError(f"must be {'<' if hi_open else '<='} {hi}, got {v}", path)
    return v


def _int(v, path, lo=None):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"expected an integer, got {v!r}", path)
    if lo is not None and v < lo:
        raise ConfigError(f"must be >= {lo}, got {v}", path)
    return int(v)


def _str(v, path, choices=None):
    if not isinstance(v, str):
        raise ConfigError(f"expected a string, got {v!r}", path)
    if choices is not None and v not in choices:
        raise ConfigError(f"must be one of {list(choices)}, got {v!r}", path)
    return v


def _bool(v, path):
    if not isinstance(v, bool):
        raise ConfigError(f"expected true or false, got {v!r}", path)
    return v


def _list(v, path, item, min_len=1):
    if not isinstance(v, (list, tuple)) or len(v) < min_len:
        raise ConfigError(f"expected a list of at least {min_len} values, got {v!r}", path)
    return tuple(item(x, f"{path}[{i}]") for i, x in enumerate(v))


def _table(raw, path):
    if not isinstance(raw, dict):
        raise ConfigError("expected a table", path)
    return raw


def _reject_unknown(raw, allowed, path):
    extra = sorted(set(raw) - set(allowed))
    if extra:
        where = f"{path}.{extra[0]}" if path else extra[0]
        raise ConfigError(f"unknown key (allowed: {', '.join(sorted(allowed))})", where)


# ---------------------------------------------------------------- sections

_SWISS_KEYS = {"n_components", "theta_min", "theta_max", "radius_scale", "component_std"}


def _target(raw):
    raw = _table(raw, "target")
    kind = _str(raw.get("kind", "swiss_roll"), "target.kind", ("swiss_roll", "gaussian", "mixture"))
    if kind == "swiss_roll":
        _reject_unknown(raw, _SWISS_KEYS | {"kind"}, "target")
        d = SwissRollSpec()
        kw = {
            "n_components": _int(raw.get("n_components", d.n_components), "target.n_components", 2),
            "theta_min": _real(raw.get("theta_min", d.theta_min), "target.theta_min"),
            "theta_max": _real(raw.get("theta_max", d.theta_max), "target.theta_max"),
            "radius_scale": _real(raw.get("radius_scale", d.radius_scale), "target.radius_scale", lo=0),
            "component_std": _real(raw.get("component_std", d.component_std), "target.component_std", lo=0),
        }
        if not kw["theta_max"] > kw["theta_min"]:
            raise ConfigError("must exceed target.theta_min", "target.theta_max")
        return TargetSection(kind, SwissRollSpec(**kw))
    if kind == "gaussian":
        _reject_unknown(raw, {"kind", "mean", "variance"}, "target")
        if "mean" not in raw:
            raise ConfigError("required for a gaussian target", "target.mean")
        mean = _list(raw["mean"], "target.mean", _real)
        var = _real(raw.get("variance", 1.0), "target.variance", lo=0)
        return TargetSection(kind, mixture=IsotropicGaussianMixture.gaussian(mean, var))
    _reject_unknown(raw, {"kind", "weights", "means", "variances"}, "target")
    for key in ("weights", "means", "variances"):
        if key not in raw:
            raise ConfigError("required for a mixture target", f"target.{key}")
    weights = _list(raw["weights"], "target.weights", lambda v, p: _real(v, p, lo=0, hi=1, hi_open=False))
    means = _list(raw["means"], "target.means", lambda v, p: _list(v, p, _real))
    variances = _list(raw["variances"], "target.variances", lambda v, p: _real(v, p, lo=0))
    try:
        gm = IsotropicGaussianMixture(np.array(weights), np.array(means), np.array(variances))
    except ValueError as err:
        raise ConfigError(str(err), "target") from None
    return TargetSection(kind, mixture=gm)


def _kernel(raw):
    raw = _table(raw, "kernel")
    d = KernelSection()
    _reject_unknown(raw, set(d.__dataclass_fields__), "kernel")
    kw = {}
    if "kind" in raw:
        kw["kind"] = _str(raw["kind"], "kernel.kind", KERNEL_KINDS)
    if "h" in raw:
        kw["h"] = _real(raw["h"], "kernel.h", lo=0)
    if "sigma" in raw:
        kw["sigma"] = _real(raw["sigma"], "kernel.sigma", lo=0)
    if "t_noise" in raw:
        kw["t_noise"] = _real(raw["t_noise"], "kernel.t_noise", lo=0, hi=1)
    if "sigma" in raw and "t_noise" in raw:
        raise ConfigError("give either kernel.sigma or kernel.t_noise, not both", "kernel.t_noise")
    if "tau" in raw:
        kw["tau"] = _real(raw["tau"], "kernel.tau", lo=0, hi=1)
    if "quadrature_nodes" in raw:
        kw["quadrature_nodes"] = _int(raw["quadrature_nodes"], "kernel.quadrature_nodes", 2)
    if "integrator" in raw:
        kw["integrator"] = _str(raw["integrator"], "kernel.integrator", ("euler", "rk2"))
    if "integrator_steps" in raw:
        kw["integrator_steps"] = _int(raw["integrator_steps"], "kernel.integrator_steps", 1)
    if "flow" in raw:
        kw["flow"] = _str(raw["flow"], "kernel.flow", ("velocity", "solution_map"))
    if "schedule" in raw:
        kw["schedule"] = _str(raw["schedule"], "kernel.schedule", tuple(SCHEDULES))
    if "t_noise_list" in raw:
        kw["t_noise_list"] = _list(raw["t_noise_list"], "kernel.t_noise_list",
                                   lambda v, p: _real(v, p, lo=0, hi=1))
    if "tau_list" in raw:
        kw["tau_list"] = _list(raw["tau_list"], "kernel.tau_list", lambda v, p: _real(v, p, lo=0, hi=1))
    return replace(d, **kw)


def _train(raw):
    raw = _table(raw, "train")
    d = TrainSection()
    _reject_unknown(raw, set(d.__dataclass_fields__), "train")
    kw = {}
    if "objective" in raw:
        kw["objective"] = _str(raw["objective"], "train.objective", OBJECTIVES)
    if "hidden" in raw:
        kw["hidden"] = _list(raw["hidden"], "train.hidden", lambda v, p: _int(v, p, 1))
    if "model_path" in raw:
        kw["model_path"] = _str(raw["model_path"], "train.model_path")
    if "lr" in raw:
        kw["lr"] = _real(raw["lr"], "train.lr", lo=0)
    if "batch_size" in raw:
        kw["batch_size"] = _int(raw["batch_size"], "train.batch_size", 1)
    if "n_steps" in raw:
        kw["n_steps"] = _int(raw["n_steps"], "train.n_steps", 1)
    if "sigma_range" in raw:
        rng = _list(raw["sigma_range"], "train.sigma_range", lambda v, p: _real(v, p, lo=0), 2)
        if len(rng) != 2 or rng[0] > rng[1]:
            raise ConfigError("expected [lo, hi] with 0 < lo <= hi", "train.sigma_range")
        kw["sigma_range"] = rng
    if "lambda_sym" in raw:
        kw["lambda_sym"] = _real(raw["lambda_sym"], "train.lambda_sym", lo=0, lo_open=False)
    if "tau_min" in raw:
        kw["tau_min"] = _real(raw["tau_min"], "train.tau_min", lo=0, hi=1)
    if "n_sym_probes" in raw:
        kw["n_sym_probes"] = _int(raw["n_sym_probes"], "train.n_sym_probes", 1)
    return replace(d, **kw)


def _run(raw):
    raw = _table(raw, "run")
    d = RunSection()
    _reject_unknown(raw, set(d.__dataclass_fields__), "run")
    kw = {}
    if "n_chains" in raw:
        kw["n_chains"] = _int(raw["n_chains"], "run.n_chains", 1)
    if "steps" in raw:
        kw["steps"] = _int(raw["steps"], "run.steps", 1)
    if "thin" in raw:
        kw["thin"] = _int(raw["thin"], "run.thin", 0)
    if "seed" in raw:
        kw["seed"] = _int(raw["seed"], "run.seed", 0)
    if "n_reference" in raw:
        kw["n_reference"] = _int(raw["n_reference"], "run.n_reference", 2)
    return replace(d, **kw)


def _output(raw):
    raw = _table(raw, "output")
    _reject_unknown(raw, {"dir", "emit_plots"}, "output")
    d = OutputSection()
    return OutputSection(
        _str(raw.get("dir", d.dir), "output.dir"),
        _bool(raw.get("emit_plots", d.emit_plots), "output.emit_plots"),
    )


SECTIONS = ("target", "kernel", "train", "run", "output")


def parse_config(raw):
    """Validate a raw mapping (as parsed from TOML) into an :class:`ExperimentConfig`."""
    raw = _table(raw, "")
    _reject_unknown(raw, set(SECTIONS) | {"oracle_mode"}, "")
    mode = _str(raw.get("oracle_mode", "analytic"), "oracle_mode", ORACLE_MODES)
    train = _train(raw["train"]) if "train" in raw else None
    if mode == "learned" and train is None:
        raise ConfigError("learned oracle mode needs a [train] section or train.model_path", "train")
    return ExperimentConfig(
        target=_target(raw.get("target", {})),
        kernel=_kernel(raw.get("kernel", {})),
        train=train,
        run=_run(raw.get("run", {})),
        output=_output(raw.get("output", {})),
        oracle_mode=mode,
    )


def read_toml(path):
    """Parse a TOML file. An empty file is an error: it is almost always a mistake."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as err:
        raise ConfigError(f"cannot read config file: {err.strerror}", str(path)) from None
    try:
        raw = tomllib.loads(data.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as err:
        raise ConfigError(f"invalid TOML: {err}", str(path)) from None
    if not raw:
        raise ConfigError("config file is empty", str(path))
    return raw


def parse_value(text):
    """A TOML scalar or array literal; bare words fall back to strings."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_override(raw, assignment):
    """Apply ``section.key=value`` (or ``key=value`` at top level) to ``raw`` in place."""
    if "=" not in assignment:
        raise ConfigError(f"override must look like section.key=value, got {assignment!r}", "--set")
    key, _, value = assignment.partition("=")
    parts = key.strip().split(".")
    if not all(parts) or len(parts) > 2:
        raise ConfigError(f"bad override key {key!r}", "--set")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError("not a table", p)
    node[parts[-1]] = parse_value(value.strip())
    return raw
