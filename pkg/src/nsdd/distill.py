"""Null-space diffusion distillation.

A fixed-seed DDNM+ teacher is run offline over a set of measurements and
its reconstructions are cached.  A single-pass student is then fit to the
cache with an MSE loss.  The student sees z = concat(y, A^+ y), reduces it
to C channels with a small network, maps that through a UNet backbone to a
residual, and adds the residual back onto the anchor A^+ y.

Cache layout::

    <root>/<config-hash>/manifest.json
    <root>/<config-hash>/<id>_y.tensor
    <root>/<config-hash>/<id>_target.tensor
"""

from __future__ import annotations

import csv
import hashlib
import json
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import DenoiserPrior, NoiseSchedule
from .errors import ConfigError, NumericError, ParameterError, ShapeError, StaleCacheError
from .forward_model import ConvolutionOperator, PseudoInverse, pinv_apply
from .guidance import DdnmConfig, ddnm_reconstruct
from .micro_net import AdamState, Network, adam_step, mse_loss, reducer_net, unet_backbone
from .micro_net import load_network, save_network
from .tensor_io import SeededRng, as_image, derive_seed, read_tensor, write_tensor

TEACHER_SIGMA_Y = 0.6
TIMESTEP_VALUES = {"high": 999 / 1000, "low": 59 / 1000}


def array_hash(arr) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype=np.float64).tobytes()).hexdigest()[:16]


def operator_fingerprint(op: ConvolutionOperator, pinv: PseudoInverse) -> dict:
    return {"kernel": array_hash(op.kernel), "dims": list(op.dims), "pinv": pinv.params()}


@dataclass(frozen=True)
class TeacherConfig:
    sched: NoiseSchedule
    pinv: PseudoInverse
    sigma_y: float = TEACHER_SIGMA_Y
    sigma_y_scale: str = "raw"
    shared_seed: bool = True

    def ddnm(self) -> DdnmConfig:
        return DdnmConfig(pinv=self.pinv, sigma_y=self.sigma_y, mode="relaxed", sigma_y_scale=self.sigma_y_scale)


def teacher_record(cfg: TeacherConfig, op: ConvolutionOperator, prior: DenoiserPrior, base_seed: int) -> dict:
    return {
        "schedule": cfg.sched.params(),
        "sigma_y": cfg.sigma_y,
        "sigma_y_scale": cfg.sigma_y_scale,
        "operator": operator_fingerprint(op, cfg.pinv),
        "prior": prior.fingerprint(),
        "base_seed": int(base_seed),
        "shared_seed": cfg.shared_seed,
    }


def config_hash(record: dict) -> str:
    return hashlib.sha256(json.dumps(record, sort_keys=True).encode()).hexdigest()[:16]


def measurement_digest(measurements: dict) -> str:
    """sha256 over sorted ids and float64 bytes, so a changed dataset gets a new cache hash."""
    h = hashlib.sha256()
    for item_id in sorted(measurements):
        h.update(item_id.encode() + b"\0")
        h.update(np.ascontiguousarray(as_image(measurements[item_id]), dtype="<f8").tobytes())
    return h.hexdigest()


def item_seed(base_seed: int, item_id: str, shared: bool) -> int:
    return derive_seed(base_seed, "teacher" if shared else f"teacher/{item_id}")


def teacher_target(op, prior, cfg: TeacherConfig, y, seed: int) -> np.ndarray:
    x, _ = ddnm_reconstruct(op, y, prior, cfg.sched, cfg.ddnm(), SeededRng(seed))
    return x


def build_teacher_cache(measurements: dict, op: ConvolutionOperator, prior: DenoiserPrior,
                        cfg: TeacherConfig, base_seed: int, root, overwrite: bool = False) -> Path:
    """Run the teacher on every measurement and cache (y, T(y)) pairs.

    ``measurements`` maps item ids to y arrays.  Refuses to write next to a
    cache built from a different configuration unless ``overwrite``.
    """
    if not measurements:
        raise ParameterError("teacher cache needs at least one measurement")
    root = Path(root)
    record = teacher_record(cfg, op, prior, base_seed)
    record["measurements"] = measurement_digest(measurements)
    h = config_hash(record)
    root.mkdir(parents=True, exist_ok=True)
    others = [p for p in root.iterdir() if p.is_dir() and p.name != h and (p / "manifest.json").exists()]
    if others:
        if not overwrite:
            raise StaleCacheError(f"cache root {root} holds caches for other configs "
                                  f"({', '.join(p.name for p in others)}); refusing to mix")
        for p in others:
            shutil.rmtree(p)
    out = root / h
    out.mkdir(exist_ok=True)
    items = []
    for item_id in sorted(measurements):
        y = as_image(measurements[item_id])
        seed = item_seed(base_seed, item_id, cfg.shared_seed)
        target = teacher_target(op, prior, cfg, y, seed)
        write_tensor(out / f"{item_id}_y.tensor", y)
        write_tensor(out / f"{item_id}_target.tensor", target)
        items.append({"id": item_id, "seed": seed})
    manifest = {"config_hash": h, "config": record, "T": cfg.sched.T, "items": items}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


@dataclass
class TeacherCache:
    path: Path
    manifest: dict
    ids: list
    y: np.ndarray
    target: np.ndarray

    @property
    def config_hash(self) -> str:
        return self.manifest["config_hash"]


def load_cache(path) -> TeacherCache:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"no readable teacher cache manifest in {path}: {exc}") from exc
    ids = [it["id"] for it in manifest["items"]]
    y = np.stack([read_tensor(path / f"{i}_y.tensor") for i in ids]).astype(np.float64)
    target = np.stack([read_tensor(path / f"{i}_target.tensor") for i in ids]).astype(np.float64)
    return TeacherCache(path, manifest, ids, y, target)


def is_test_item(item_id: str) -> bool:
    """Deterministic 90/10 split by id hash."""
    return int(hashlib.sha256(item_id.encode()).hexdigest(), 16) % 10 == 0


# student ------------------------------------------------------------------------


@dataclass
class StudentModel:
    reducer: Network
    backbone: Network
    t_fix: str = "high"
    project_null: bool = False

    @property
    def num_params(self) -> int:
        return self.reducer.num_params + self.backbone.num_params

    def get_params(self) -> np.ndarray:
        return np.concatenate([self.reducer.get_params(), self.backbone.get_params()])

    def set_params(self, vec) -> None:
        k = self.reducer.num_params
        self.reducer.set_params(vec[:k])
        self.backbone.set_params(vec[k:])


def make_student(channels: int, rng: SeededRng, t_fix: str = "high", widths=(16, 32),
                 project_null: bool = False) -> StudentModel:
    """Student with a zero-initialized output conv, so it starts at A^+ y."""
    if t_fix not in TIMESTEP_VALUES:
        raise ParameterError(f"t_fix must be one of {sorted(TIMESTEP_VALUES)}, got {t_fix!r}")
    reducer = reducer_net(2 * channels, channels, rng.child("reducer"), width=widths[0])
    backbone = unet_backbone(channels, channels, rng.child("backbone"), widths=widths,
                             time_value=TIMESTEP_VALUES[t_fix], zero_output=True)
    return StudentModel(reducer, backbone, t_fix, project_null)


def student_input(pinv: PseudoInverse, y) -> np.ndarray:
    """z = concat(y, A^+ y) along channels."""
    y = as_image(y, "y")
    return np.concatenate([y, pinv_apply(pinv, y)], axis=2)


def _project(op, pinv, r):
    # (I - A^+ A) applied per image; symmetric, so it is also its own adjoint
    return np.stack([ri - pinv_apply(pinv, op.apply(ri)) for ri in r])


def _student_batch(model: StudentModel, op, pinv, z, train: bool):
    c = z.shape[-1] // 2
    if model.reducer.in_channels != 2 * c:
        raise ShapeError(f"student expects {model.reducer.in_channels} input channels, got {2 * c}")
    anchor = z[..., c:]
    if train:
        resid = model.backbone.forward(model.reducer.forward(z))
    else:
        resid = model.backbone(model.reducer(z))
    if model.project_null:
        resid = _project(op, pinv, resid)
    return anchor + resid, resid


def student_forward(model: StudentModel, op: ConvolutionOperator, pinv: PseudoInverse, y):
    """Return (x_s, x_null) with x_s = A^+ y + x_null."""
    z = student_input(pinv, y)
    if tuple(z.shape[:2]) != tuple(op.dims[:2]):
        raise ShapeError(f"measurement {z.shape[:2]} does not match operator {op.dims[:2]}")
    x_s, resid = _student_batch(model, op, pinv, z[None], train=False)
    return x_s[0], resid[0]


def _backward(model, op, pinv, dout):
    if model.project_null:
        dout = _project(op, pinv, dout)
    gb, dred = model.backbone.backward(dout)
    gr, _ = model.reducer.backward(dred)
    return np.concatenate([gr, gb])


@dataclass
class TrainResult:
    model: StudentModel
    curves: list = field(default_factory=list)  # (epoch, train_mse, test_mse)
    initial_train_mse: float = float("nan")
    initial_test_mse: float = float("nan")
    train_ids: list = field(default_factory=list)
    test_ids: list = field(default_factory=list)


def _eval_mse(model, op, pinv, z, target, batch=64) -> float:
    if len(z) == 0:
        return float("nan")
    err = 0.0
    for s in range(0, len(z), batch):
        pred, _ = _student_batch(model, op, pinv, z[s:s + batch], train=False)
        err += float(np.sum((pred - target[s:s + batch]) ** 2))
    return err / target.size


def check_cache_operator(cache: TeacherCache, op: ConvolutionOperator, pinv: PseudoInverse) -> None:
    expected = cache.manifest["config"]["operator"]
    got = operator_fingerprint(op, pinv)
    if json.dumps(expected, sort_keys=True) != json.dumps(got, sort_keys=True):
        raise ConfigError("teacher cache was built with a different operator / pseudo-inverse "
                          f"({expected} vs {got})")


def train_student(model: StudentModel, cache: TeacherCache, op: ConvolutionOperator, pinv: PseudoInverse,
                  adam: AdamState, epochs: int, rng: SeededRng, batch_size: int = 8,
                  curves_path=None) -> TrainResult:
    """Minibatch Adam on mean squared error to the cached teacher targets.

    Per-epoch train/test MSE (per pixel) are logged; the model is updated
    in place and also returned inside the result.
    """
    check_cache_operator(cache, op, pinv)
    test_mask = np.array([is_test_item(i) for i in cache.ids])
    z_all = np.stack([student_input(pinv, y) for y in cache.y])
    z_tr, t_tr = z_all[~test_mask], cache.target[~test_mask]
    z_te, t_te = z_all[test_mask], cache.target[test_mask]
    if len(z_tr) == 0:
        raise ParameterError("teacher cache has no training items")

    res = TrainResult(model, train_ids=[i for i, m in zip(cache.ids, test_mask) if not m],
                      test_ids=[i for i, m in zip(cache.ids, test_mask) if m])
    res.initial_train_mse = _eval_mse(model, op, pinv, z_tr, t_tr)
    res.initial_test_mse = _eval_mse(model, op, pinv, z_te, t_te)
    params = model.get_params()
    n = len(z_tr)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = order[s:s + batch_size]
            pred, _ = _student_batch(model, op, pinv, z_tr[idx], train=True)
            loss, dpred = mse_loss(pred, t_tr[idx])
            if not np.isfinite(loss):
                raise NumericError(f"student loss diverged in epoch {epoch}")
            params = adam_step(adam, params, _backward(model, op, pinv, dpred))
            model.set_params(params)
        res.curves.append((epoch, _eval_mse(model, op, pinv, z_tr, t_tr), _eval_mse(model, op, pinv, z_te, t_te)))
    if curves_path is not None:
        write_curves(res.curves, curves_path)
    return res


def write_curves(curves, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_mse", "test_mse"])
        for e, a, b in curves:
            w.writerow([e, repr(a), repr(b)])


def student_infer_batch(model: StudentModel, op: ConvolutionOperator, pinv: PseudoInverse, measurements,
                        clock=time.perf_counter) -> tuple[np.ndarray, list]:
    """One forward pass per image; the timed region covers compute only."""
    outs, seconds = [], []
    for y in measurements:
        y = as_image(y)
        t0 = clock()
        x_s, _ = student_forward(model, op, pinv, y)
        seconds.append(clock() - t0)
        outs.append(x_s)
    return np.stack(outs), seconds


def save_student(model: StudentModel, directory) -> None:
    directory = Path(directory)
    save_network(model.reducer, directory / "reducer")
    save_network(model.backbone, directory / "backbone")
    meta = {"t_fix": model.t_fix, "project_null": model.project_null}
    (directory / "student.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_student(directory) -> StudentModel:
    directory = Path(directory)
    meta = json.loads((directory / "student.json").read_text())
    return StudentModel(load_network(directory / "reducer"), load_network(directory / "backbone"),
                        meta["t_fix"], meta["project_null"])
