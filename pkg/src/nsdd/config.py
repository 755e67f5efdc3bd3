"""Experiment configuration: typed dataclasses loaded from one YAML (or JSON) file."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .diffusion import GaussianPrior, NoiseSchedule, load_denoiser, make_schedule
from .errors import ConfigError
from .forward_model import ConvolutionOperator, Psf, PseudoInverse, make_operator, make_pinv, synth_mask_psf
from .tensor_io import SeededRng, check_dims, read_tensor

SOLVER_PARAMS = {
    "wiener": {"lambda_w": 1e-2},
    "admm": {"tau": 1e-2, "rho": 1.0, "iters": 100},
    "dps": {"zeta": 0.5, "stop_gradient": False},
    "ddnm": {},
    "ddnm+": {"sigma_y": 0.6, "sigma_y_scale": "raw"},
    "student": {"path": None},
}


@dataclass(frozen=True)
class SceneSpec:
    kind: str = "mixed"
    n: int = 8
    density: float = 0.05


@dataclass(frozen=True)
class PsfSpec:
    kind: str = "random_binary"
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PinvSpec:
    mode: str = "wiener"
    lambda_w: float = 1e-2
    eps: float | None = None


@dataclass(frozen=True)
class PriorSpec:
    """``gaussian`` (closed form, ``mean``/``variance``) or ``learned`` (checkpoint ``path``)."""

    kind: str = "gaussian"
    mean: float = 0.5
    variance: float = 0.1
    path: str | None = None


@dataclass(frozen=True)
class SolverSpec:
    name: str
    params: dict = field(default_factory=dict)

    def resolved(self) -> dict:
        out = dict(SOLVER_PARAMS[self.name])
        out.update(self.params)
        return out


@dataclass(frozen=True)
class SweepSpec:
    solver: str = "ddnm+"
    param: str = "sigma_y"
    grid: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class DistillSpec:
    n_scenes: int = 500
    sigma_n: float | None = None  # capture noise of the distillation set; None -> top-level sigma_n
    sigma_y: float = 0.6
    cache_root: str = "cache"
    student_dir: str = "student"
    t_fix: str = "high"
    epochs: int = 50
    lr: float = 1e-4
    batch_size: int = 8
    widths: tuple = (16, 32)
    project_null: bool = False


@dataclass(frozen=True)
class PriorTrainSpec:
    n_scenes: int = 500
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 16
    widths: tuple = (16, 32)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    dims: tuple = (16, 16, 1)
    scenes: SceneSpec = SceneSpec()
    psf: PsfSpec = PsfSpec()
    sigma_n: float = 0.0
    pinv: PinvSpec = PinvSpec()
    T: int = 100
    prior: PriorSpec = PriorSpec()
    solvers: tuple = (SolverSpec("wiener"),)
    metrics: tuple = ("mse", "psnr", "ssim", "residual")
    sweep: SweepSpec = SweepSpec()
    distill: DistillSpec = DistillSpec()
    train_prior: PriorTrainSpec = PriorTrainSpec()
    output_dir: str = "out"
    base_dir: str = field(default=".", compare=False)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return _plain(d)

    def resolve(self, path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


_NESTED = {"scenes": SceneSpec, "psf": PsfSpec, "pinv": PinvSpec, "prior": PriorSpec, "sweep": SweepSpec,
           "distill": DistillSpec, "train_prior": PriorTrainSpec}
_TUPLES = {"dims", "metrics", "grid", "widths"}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kw = {}
    for k, v in data.items():
        if k in _NESTED and cls is ExperimentConfig:
            v = _build(_NESTED[k], v, f"{where}.{k}")
        elif k == "solvers":
            v = tuple(_solver(s, f"{where}.solvers[{i}]") for i, s in enumerate(v))
        elif k in _TUPLES and isinstance(v, list):
            v = tuple(v)
        kw[k] = v
    return cls(**kw)


def _solver(data, where) -> SolverSpec:
    if isinstance(data, str):
        data = {"name": data}
    spec = _build(SolverSpec, data, where)
    if spec.name not in SOLVER_PARAMS:
        raise ConfigError(f"{where}: unknown solver {spec.name!r}; choose from {', '.join(SOLVER_PARAMS)}")
    bad = sorted(set(spec.params) - set(SOLVER_PARAMS[spec.name]))
    if bad:
        raise ConfigError(f"{where}: solver {spec.name} has no parameter(s) {', '.join(bad)}")
    return spec


def config_from_dict(data: dict, base_dir=".") -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data or {}, "config")
    cfg = dataclasses.replace(cfg, base_dir=str(base_dir))
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return config_from_dict(data, base_dir=path.parent)


def validate(cfg: ExperimentConfig) -> None:
    try:
        check_dims(cfg.dims)
    except Exception as exc:
        raise ConfigError(f"config.dims: {exc}") from exc
    if cfg.sigma_n < 0 or (cfg.distill.sigma_n is not None and cfg.distill.sigma_n < 0):
        raise ConfigError("config.sigma_n and config.distill.sigma_n must be >= 0")
    if cfg.scenes.n < 1:
        raise ConfigError("config.scenes.n must be >= 1")
    if cfg.T < 1:
        raise ConfigError("config.T must be >= 1")
    if cfg.prior.kind not in ("gaussian", "learned"):
        raise ConfigError(f"config.prior.kind must be gaussian or learned, got {cfg.prior.kind!r}")
    if cfg.prior.kind == "learned" and not cfg.prior.path:
        raise ConfigError("config.prior.path is required for a learned prior")
    bad = sorted(set(cfg.metrics) - {"mse", "psnr", "ssim", "residual"})
    if bad:
        raise ConfigError(f"config.metrics: unknown metric(s) {', '.join(bad)}")


# builders -----------------------------------------------------------------------


def build_psf(cfg: ExperimentConfig) -> Psf:
    spec = cfg.psf
    if spec.kind == "file":
        return Psf(read_tensor(cfg.resolve(spec.params["path"])))
    if spec.kind == "box":
        size = int(spec.params.get("size", 2))
        return Psf(np.ones((size, size, 1)))
    return synth_mask_psf(spec.kind, SeededRng(cfg.seed).child("psf"), cfg.dims, spec.params)


def build_operator(cfg: ExperimentConfig) -> ConvolutionOperator:
    return make_operator(build_psf(cfg), cfg.dims)


def build_pinv(cfg: ExperimentConfig, op: ConvolutionOperator) -> PseudoInverse:
    return make_pinv(op, cfg.pinv.mode, eps=cfg.pinv.eps, lambda_w=cfg.pinv.lambda_w)


def build_schedule(cfg: ExperimentConfig) -> NoiseSchedule:
    return make_schedule("linear_beta", cfg.T)


def build_prior(cfg: ExperimentConfig):
    if cfg.prior.kind == "gaussian":
        return GaussianPrior(cfg.prior.mean, cfg.prior.variance)
    path = cfg.resolve(cfg.prior.path)
    if not path.exists():
        raise ConfigError(f"prior checkpoint {path} does not exist (run train-prior first)")
    return load_denoiser(path)
