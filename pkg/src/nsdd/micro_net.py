"""A small convolutional network toolkit with hand-written backprop.

Activations are batched ``(N, H, W, C)`` float64 arrays.  Convolutions are
3x3 with circular padding so learned filters share boundary semantics with
the circulant forward model.

A :class:`Network` is an ordered list of layers; skip connections are
expressed with a :class:`SkipSave` / :class:`SkipAdd` pair sharing a tag.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericError, ShapeError, StateError
from .tensor_io import SeededRng, read_tensor, write_tensor

_OFFSETS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]


def _batched(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeError(f"expected (H, W, C) or (N, H, W, C) input, got shape {x.shape}")
    return x, False


class Layer:
    params: dict = {}

    def spec(self) -> dict:
        return {"type": type(self).__name__}

    def out_channels(self, c: int) -> int:
        return c


class Conv3x3(Layer):
    """out[n,i,j,o] = b[o] + sum_{dy,dx,c} w[dy+1,dx+1,c,o] x[n,i+dy,j+dx,c] (circular)."""

    def __init__(self, in_channels: int, out_channels: int, rng: SeededRng | None = None,
                 init: str = "he"):
        self.in_channels, self.out_ch = int(in_channels), int(out_channels)
        w = np.zeros((3, 3, self.in_channels, self.out_ch))
        if init == "he":
            if rng is None:
                raise ValueError("he init needs an rng")
            w = rng.normal(w.shape) * np.sqrt(2.0 / (9 * self.in_channels))
        elif init == "identity":
            if self.in_channels != self.out_ch:
                raise ValueError("identity init needs in_channels == out_channels")
            w[1, 1] = np.eye(self.in_channels)
        elif init != "zeros":
            raise ValueError(f"unknown init {init!r}")
        self.params = {"weight": w, "bias": np.zeros(self.out_ch)}

    def spec(self):
        return {"type": "Conv3x3", "in_channels": self.in_channels, "out_channels": self.out_ch}

    def out_channels(self, c):
        return self.out_ch

    def forward(self, x):
        if x.shape[-1] != self.in_channels:
            raise ShapeError(f"expects {self.in_channels} channels, got {x.shape[-1]}")
        n, h, w, c = x.shape
        cols = np.stack([np.roll(x, (-dy, -dx), axis=(1, 2)) for dy, dx in _OFFSETS], axis=3)
        cols = cols.reshape(n * h * w, 9 * c)
        out = cols @ self.params["weight"].reshape(9 * c, self.out_ch) + self.params["bias"]
        return out.reshape(n, h, w, self.out_ch), (cols, x.shape)

    def backward(self, dout, cache):
        cols, (n, h, w, c) = cache
        d2 = dout.reshape(n * h * w, self.out_ch)
        grads = {"weight": (cols.T @ d2).reshape(self.params["weight"].shape), "bias": d2.sum(axis=0)}
        dcols = (d2 @ self.params["weight"].reshape(9 * c, self.out_ch).T).reshape(n, h, w, 9, c)
        dx = np.zeros((n, h, w, c))
        for k, (dy, dx_) in enumerate(_OFFSETS):
            dx += np.roll(dcols[:, :, :, k], (dy, dx_), axis=(1, 2))
        return dx, grads


class ReLU(Layer):
    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, dout, mask):
        return dout * mask, {}


class Downsample(Layer):
    """2x2 average pooling."""

    def forward(self, x):
        n, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"spatial dims {(h, w)} not divisible by 2")
        return x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4)), None

    def backward(self, dout, cache):
        return 0.25 * np.repeat(np.repeat(dout, 2, axis=1), 2, axis=2), {}


class Upsample(Layer):
    """Nearest-neighbour 2x upsampling."""

    def forward(self, x):
        return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2), None

    def backward(self, dout, cache):
        n, h, w, c = dout.shape
        return dout.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4)), {}


class SkipSave(Layer):
    def __init__(self, tag: str):
        self.tag = tag

    def spec(self):
        return {"type": "SkipSave", "tag": self.tag}


class SkipAdd(Layer):
    def __init__(self, tag: str):
        self.tag = tag

    def spec(self):
        return {"type": "SkipAdd", "tag": self.tag}


class TimeBias(Layer):
    """Adds one learned scalar to every activation.

    Stands in for the timestep embedding of a diffusion backbone: the
    scalar starts at the normalized fixed timestep and is trained with the
    rest of the network.
    """

    def __init__(self, value: float = 0.0):
        self.params = {"value": np.array([float(value)])}

    def forward(self, x):
        return x + self.params["value"][0], None

    def backward(self, dout, cache):
        return dout, {"value": np.array([dout.sum()])}


_LAYER_TYPES = {cls.__name__: cls for cls in (Conv3x3, ReLU, Downsample, Upsample, SkipSave, SkipAdd, TimeBias)}


class Network:
    def __init__(self, layers: list[Layer], in_channels: int):
        self.layers = list(layers)
        self.in_channels = int(in_channels)
        self._cache = None
        c = self.in_channels
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv3x3) and layer.in_channels != c:
                raise ShapeError(f"layer {i}: expects {layer.in_channels} channels, receives {c}")
            c = layer.out_channels(c)
        self.out_channels = c

    # parameters -----------------------------------------------------------

    def param_slots(self):
        for i, layer in enumerate(self.layers):
            for name in sorted(layer.params):
                yield i, name, layer.params[name]

    @property
    def num_params(self) -> int:
        return sum(p.size for _, _, p in self.param_slots())

    def get_params(self) -> np.ndarray:
        slots = [p.ravel() for _, _, p in self.param_slots()]
        return np.concatenate(slots) if slots else np.zeros(0)

    def set_params(self, vec) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.num_params:
            raise ShapeError(f"parameter vector has {vec.size} entries, network has {self.num_params}")
        k = 0
        for i, name, p in list(self.param_slots()):
            self.layers[i].params[name] = vec[k:k + p.size].reshape(p.shape).copy()
            k += p.size

    def copy(self) -> "Network":
        net = Network.__new__(Network)
        net.layers = []
        for layer in self.layers:
            clone = object.__new__(type(layer))
            clone.__dict__.update(layer.__dict__)
            clone.params = {k: v.copy() for k, v in layer.params.items()}
            net.layers.append(clone)
        net.in_channels, net.out_channels, net._cache = self.in_channels, self.out_channels, None
        return net

    # passes ---------------------------------------------------------------

    def forward(self, x, keep_cache: bool = True) -> np.ndarray:
        x, single = _batched(x)
        if x.shape[-1] != self.in_channels:
            raise ShapeError(f"layer 0: expects {self.in_channels} channels, got {x.shape[-1]}")
        saved, caches = {}, []
        for i, layer in enumerate(self.layers):
            try:
                if isinstance(layer, SkipSave):
                    saved[layer.tag] = x
                    cache = None
                elif isinstance(layer, SkipAdd):
                    if layer.tag not in saved:
                        raise ShapeError(f"no saved activation for skip tag {layer.tag!r}")
                    if saved[layer.tag].shape != x.shape:
                        raise ShapeError(f"skip {layer.tag!r} shape {saved[layer.tag].shape} != {x.shape}")
                    x = x + saved[layer.tag]
                    cache = None
                else:
                    x, cache = layer.forward(x)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({type(layer).__name__}): {exc}") from None
            caches.append(cache)
        self._cache = caches if keep_cache else None
        return x[0] if single else x

    def backward(self, dout) -> tuple[np.ndarray, np.ndarray]:
        """Back-propagate ``dLoss/dOut``; returns (parameter gradient vector, dLoss/dInput)."""
        if self._cache is None:
            raise StateError("backward called without a cached forward pass")
        d, single = _batched(dout)
        skip_grads = {}
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if isinstance(layer, SkipAdd):
                skip_grads[layer.tag] = d
                grads[i] = {}
            elif isinstance(layer, SkipSave):
                d = d + skip_grads.pop(layer.tag)
                grads[i] = {}
            else:
                d, grads[i] = layer.backward(d, self._cache[i])
        parts = [grads[i][name].ravel() for i, name, _ in self.param_slots()]
        gvec = np.concatenate(parts) if parts else np.zeros(0)
        return gvec, (d[0] if single else d)

    def __call__(self, x):
        return self.forward(x, keep_cache=False)

    # persistence ----------------------------------------------------------

    def manifest(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "layers": [layer.spec() for layer in self.layers],
            "params": [{"layer": i, "name": name, "shape": list(p.shape)} for i, name, p in self.param_slots()],
        }


def forward(net: Network, x) -> np.ndarray:
    return net.forward(x)


def backward(net: Network, dout) -> np.ndarray:
    return net.backward(dout)[0]


def save_network(net: Network, directory) -> None:
    """Checkpoint: ``manifest.json`` plus one TensorFile per parameter array."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    man = net.manifest()
    for entry, (i, name, p) in zip(man["params"], net.param_slots()):
        fname = f"layer{i:02d}_{name}.tensor"
        entry["file"] = fname
        write_tensor(directory / fname, p.reshape(-1, 1, 1))
    (directory / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")


def load_network(directory) -> Network:
    directory = Path(directory)
    try:
        man = json.loads((directory / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read network manifest in {directory}: {exc}") from exc
    layers = []
    for spec in man["layers"]:
        kind = spec["type"]
        if kind not in _LAYER_TYPES:
            raise FormatError(f"unknown layer type {kind!r}")
        if kind == "Conv3x3":
            layers.append(Conv3x3(spec["in_channels"], spec["out_channels"], init="zeros"))
        elif kind in ("SkipSave", "SkipAdd"):
            layers.append(_LAYER_TYPES[kind](spec["tag"]))
        else:
            layers.append(_LAYER_TYPES[kind]())
    net = Network(layers, man["in_channels"])
    for entry in man["params"]:
        arr = read_tensor(directory / entry["file"])
        layer = net.layers[entry["layer"]]
        if arr.size != int(np.prod(entry["shape"])):
            raise FormatError(f"{entry['file']}: size does not match manifest shape {entry['shape']}")
        layer.params[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    return net


def reducer_net(in_channels: int, out_channels: int, rng: SeededRng, width: int = 16) -> Network:
    """conv(in->16)-ReLU-conv(16->16)-ReLU-conv(16->out)."""
    return Network([
        Conv3x3(in_channels, width, rng), ReLU(),
        Conv3x3(width, width, rng), ReLU(),
        Conv3x3(width, out_channels, rng),
    ], in_channels)


def unet_backbone(in_channels: int, out_channels: int, rng: SeededRng, widths=(16, 32),
                  time_value: float | None = None, zero_output: bool = False) -> Network:
    """Two-level UNet with one skip connection.

    conv(in->w0) [+time] ReLU, save, down, conv(w0->w1) ReLU conv(w1->w0),
    up, add skip, ReLU, conv(w0->out).
    """
    w0, w1 = widths
    layers: list[Layer] = [Conv3x3(in_channels, w0, rng)]
    if time_value is not None:
        layers.append(TimeBias(time_value))
    layers += [
        ReLU(), SkipSave("s0"), Downsample(),
        Conv3x3(w0, w1, rng), ReLU(), Conv3x3(w1, w0, rng), Upsample(),
        SkipAdd("s0"), ReLU(),
        Conv3x3(w0, out_channels, rng, init="zeros" if zero_output else "he"),
    ]
    return Network(layers, in_channels)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)
    step: int = 0


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """One bias-corrected Adam update; mutates ``state`` and returns new params."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ShapeError(f"params {params.shape} and grads {grads.shape} differ")
    if not np.all(np.isfinite(grads)):
        raise NumericError(f"non-finite gradient at Adam step {state.step + 1}")
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    if state.m.shape != params.shape:
        raise ShapeError("Adam moments do not match parameter length")
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    m_hat = state.m / (1 - state.beta1 ** state.step)
    v_hat = state.v / (1 - state.beta2 ** state.step)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def mse_loss(pred, target) -> tuple[float, np.ndarray]:
    """Mean over batch of per-image squared L2 error, and its gradient."""
    pred, _ = _batched(pred)
    target, _ = _batched(target)
    n = pred.shape[0]
    r = pred - target
    return float(np.sum(r * r) / n), 2.0 * r / n
