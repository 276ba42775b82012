"""Small deterministic CNN engine: layers, backprop, SGD with momentum, checkpoints.

Images enter the model as standardized CHW arrays; batches are NCHW.  Parameters
are stored in an ordered dict keyed ``"<layer index>.weight"`` / ``"<layer index>.bias"``.
"""

from __future__ import annotations

import functools
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import ConfigError, FormatError, InputError, NumericError

LAYER_KINDS = ("conv", "relu", "maxpool", "dense", "softmax-output")
STD_EPS = 1e-6

CHECKPOINT_MAGIC = b"ILMC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: int | None = None
    kernel: int | None = None
    stride: int | None = None
    padding: int | None = None
    units: int | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}; expected one of {LAYER_KINDS}")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        for key in ("out_channels", "kernel", "stride", "padding", "units"):
            value = getattr(self, key)
            if value is not None:
                d[key] = value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        unknown = set(d) - {"kind", "out_channels", "kernel", "stride", "padding", "units"}
        if unknown:
            raise ConfigError(f"unknown layer field(s) {sorted(unknown)}")
        if "kind" not in d:
            raise ConfigError("layer requires 'kind'")
        return cls(**d)


def default_layers() -> list[LayerSpec]:
    """Desk-scale convnet: two conv/pool stages, one hidden dense layer."""
    return [
        LayerSpec("conv", out_channels=8, kernel=3, stride=1, padding=1),
        LayerSpec("relu"),
        LayerSpec("maxpool", kernel=2, stride=2),
        LayerSpec("conv", out_channels=16, kernel=3, stride=1, padding=1),
        LayerSpec("relu"),
        LayerSpec("maxpool", kernel=2, stride=2),
        LayerSpec("dense", units=64),
        LayerSpec("relu"),
        LayerSpec("softmax-output"),
    ]


@dataclass
class Model:
    layers: list[LayerSpec]
    input_shape: tuple[int, int, int]
    category_count: int
    params: dict[str, np.ndarray]
    rng_seed: int
    shapes: list[tuple[int, ...]] = field(default_factory=list)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def config_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "category_count": self.category_count,
            "layers": [layer.to_dict() for layer in self.layers],
            "rng_seed": self.rng_seed,
        }

    def hidden_layer_names(self) -> list[str]:
        return [name for name, _ in _hidden_layers(self.layers)]

    def forward(self, x: np.ndarray, hook=None) -> np.ndarray:
        logits, _ = _forward(self, x, hook=hook)
        return logits

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        preds = [np.argmax(self.forward(x[i:i + batch_size]), axis=1)
                 for i in range(0, len(x), batch_size)]
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)

    def copy(self) -> "Model":
        return Model(list(self.layers), self.input_shape, self.category_count,
                     {k: v.copy() for k, v in self.params.items()}, self.rng_seed,
                     list(self.shapes))


@dataclass
class ActivationTrace:
    """Post-ReLU activations of every hidden layer, plus the logits."""
    hidden: dict[str, np.ndarray]
    logits: np.ndarray


def _hidden_layers(layers):
    """Yield (name, layer index) for every relu, named after the layer feeding it."""
    counts = {"conv": 0, "dense": 0}
    last = None
    for i, layer in enumerate(layers):
        if layer.kind in counts:
            counts[layer.kind] += 1
            last = ("conv" if layer.kind == "conv" else "fc") + str(counts[layer.kind])
        elif layer.kind == "relu":
            yield (last or "input") + ("" if last else str(i)), i


def build_model(layers: Iterable[LayerSpec], input_shape, category_count: int, seed: int,
                dtype=np.float32) -> Model:
    """Check layer compatibility and draw initial parameters.

    Weights are uniform in +-1/sqrt(fan_in); biases start at zero.
    """
    layers = list(layers)
    if not layers or layers[-1].kind != "softmax-output":
        raise ConfigError("the last layer must be 'softmax-output'")
    if any(layer.kind == "softmax-output" for layer in layers[:-1]):
        raise ConfigError("'softmax-output' may only appear as the last layer")
    c, h, w = (int(v) for v in input_shape)
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    shapes = []
    shape: tuple[int, ...] = (c, h, w)
    for i, layer in enumerate(layers):
        if layer.kind == "conv":
            if len(shape) != 3:
                raise ConfigError(f"layer {i} (conv) needs a CHW input, got shape {shape}")
            if not layer.out_channels or not layer.kernel:
                raise ConfigError(f"layer {i} (conv) requires out_channels and kernel")
            k, s, p = layer.kernel, layer.stride or 1, layer.padding or 0
            oh, ow = (shape[1] + 2 * p - k) // s + 1, (shape[2] + 2 * p - k) // s + 1
            if oh < 1 or ow < 1:
                raise ConfigError(f"layer {i} (conv) kernel {k} does not fit input {shape[1]}x{shape[2]}")
            fan_in = shape[0] * k * k
            bound = 1.0 / np.sqrt(fan_in)
            params[f"{i}.weight"] = rng.uniform(-bound, bound, (layer.out_channels, shape[0], k, k)).astype(dtype)
            params[f"{i}.bias"] = np.zeros(layer.out_channels, dtype=dtype)
            shape = (layer.out_channels, oh, ow)
        elif layer.kind == "maxpool":
            if len(shape) != 3:
                raise ConfigError(f"layer {i} (maxpool) needs a CHW input, got shape {shape}")
            k = layer.kernel or 2
            s = layer.stride or k
            oh, ow = (shape[1] - k) // s + 1, (shape[2] - k) // s + 1
            if oh < 1 or ow < 1:
                raise ConfigError(f"layer {i} (maxpool) window {k} does not fit input {shape[1]}x{shape[2]}")
            shape = (shape[0], oh, ow)
        elif layer.kind in ("dense", "softmax-output"):
            units = layer.units
            if layer.kind == "softmax-output":
                if units is not None and units != category_count:
                    raise ConfigError(f"output layer has {units} units but there are {category_count} categories")
                units = category_count
            if not units:
                raise ConfigError(f"layer {i} (dense) requires units")
            fan_in = int(np.prod(shape))
            bound = 1.0 / np.sqrt(fan_in)
            params[f"{i}.weight"] = rng.uniform(-bound, bound, (units, fan_in)).astype(dtype)
            params[f"{i}.bias"] = np.zeros(units, dtype=dtype)
            shape = (units,)
        shapes.append(shape)
    return Model(layers, (c, h, w), int(category_count), params, int(seed), shapes)


# --- primitive ops -------------------------------------------------------------------


def _out_extent(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def _im2col(x, k, s, p):
    """Columns laid out (C, K, K, N, OH, OW) so one GEMM covers the whole batch."""
    n, c, h, w = x.shape
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    oh, ow = _out_extent(h, k, s, p), _out_extent(w, k, s, p)
    cols = np.empty((c, k, k, n, oh, ow), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = x[:, :, i:i + s * oh:s, j:j + s * ow:s].transpose(1, 0, 2, 3)
    return cols, oh, ow


def _conv_batch(x, weight, bias, stride, padding):
    oc, ic, k, _ = weight.shape
    if x.shape[1] != ic:
        raise ConfigError(f"conv expects {ic} input channels, got {x.shape[1]}")
    cols, oh, ow = _im2col(x, k, stride, padding)
    out = weight.reshape(oc, -1) @ cols.reshape(ic * k * k, -1)
    out = out.reshape(oc, x.shape[0], oh, ow).transpose(1, 0, 2, 3) + bias[None, :, None, None]
    return np.ascontiguousarray(out), cols


def _conv_backward(dout, x_shape, cols, weight, stride, padding):
    n, c, h, w = x_shape
    oc, _, k, _ = weight.shape
    oh, ow = dout.shape[2], dout.shape[3]
    d2 = dout.transpose(1, 0, 2, 3).reshape(oc, -1)
    dweight = (d2 @ cols.reshape(c * k * k, -1).T).reshape(weight.shape)
    dbias = dout.sum(axis=(0, 2, 3))
    dcols = (weight.reshape(oc, -1).T @ d2).reshape(c, k, k, n, oh, ow)
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, i, j].transpose(1, 0, 2, 3)
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return dxp, dweight, dbias


def _maxpool_batch(x, k, s):
    n, c, h, w = x.shape
    oh, ow = (h - k) // s + 1, (w - k) // s + 1
    best = None
    arg = np.zeros((n, c, oh, ow), dtype=np.int16)
    for idx in range(k * k):
        i, j = divmod(idx, k)
        v = x[:, :, i:i + s * oh:s, j:j + s * ow:s]
        if best is None:
            best = v.copy()
        else:
            # strict > keeps the first maximum, so ties route gradient to one input
            m = v > best
            best[m] = v[m]
            arg[m] = idx
    return best, arg


def _maxpool_backward(dout, x_shape, arg, k, s):
    dx = np.zeros(x_shape, dtype=dout.dtype)
    oh, ow = dout.shape[2], dout.shape[3]
    for idx in range(k * k):
        i, j = divmod(idx, k)
        dx[:, :, i:i + s * oh:s, j:j + s * ow:s] += np.where(arg == idx, dout, 0)
    return dx


def conv2d_forward(input, kernel, bias, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Zero-padded cross-correlation of one CHW image with an OC x IC x K x K kernel."""
    input, kernel, bias = np.asarray(input), np.asarray(kernel), np.asarray(bias)
    if input.ndim != 3 or kernel.ndim != 4:
        raise ConfigError(f"conv2d_forward expects CHW input and 4-d kernel, got {input.shape} and {kernel.shape}")
    if kernel.shape[1] != input.shape[0]:
        raise ConfigError(f"kernel has {kernel.shape[1]} input channels but input has {input.shape[0]}")
    if kernel.shape[2] != kernel.shape[3]:
        raise ConfigError(f"kernel must be square, got {kernel.shape[2]}x{kernel.shape[3]}")
    if bias.shape != (kernel.shape[0],):
        raise ConfigError(f"bias has shape {bias.shape}, expected ({kernel.shape[0]},)")
    if stride < 1 or padding < 0:
        raise ConfigError(f"invalid stride {stride} / padding {padding}")
    k = kernel.shape[2]
    if input.shape[1] + 2 * padding < k or input.shape[2] + 2 * padding < k:
        raise ConfigError(f"kernel {k}x{k} larger than padded input {input.shape[1:]}")
    dtype = np.result_type(input, kernel, bias)
    out, _ = _conv_batch(input[None].astype(dtype), kernel.astype(dtype), bias.astype(dtype), stride, padding)
    return out[0]


def dense_forward(input, weights, bias) -> np.ndarray:
    input, weights, bias = np.asarray(input), np.asarray(weights), np.asarray(bias)
    if weights.ndim != 2 or weights.shape[1] != input.shape[-1]:
        raise ConfigError(f"weights {weights.shape} do not match input length {input.shape[-1]}")
    if bias.shape != (weights.shape[0],):
        raise ConfigError(f"bias has shape {bias.shape}, expected ({weights.shape[0]},)")
    return weights @ input + bias


def _log_softmax(logits):
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_xent_loss(logits, label: int) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[-1]:
        raise InputError(f"label {label} out of range for {logits.shape[-1]} categories")
    logp = _log_softmax(logits)
    return float(-logp[label]), np.exp(logp)


def standardize(image) -> np.ndarray:
    """Zero-mean, unit-variance over all pixels and channels (float64 result)."""
    x = np.asarray(image, dtype=np.float64)
    return (x - x.mean()) / max(float(x.std()), STD_EPS)


def prepare_image(image_hwc) -> np.ndarray:
    """HWC pixel array (any real range) -> standardized CHW model input."""
    x = standardize(image_hwc)
    if x.ndim == 2:
        x = x[:, :, None]
    return np.ascontiguousarray(x.transpose(2, 0, 1))


# --- whole-model passes ----------------------------------------------------------


def _finite_checked(fn):
    """Overflow shows up as a NumericError from the explicit finiteness checks, not as warnings."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        with np.errstate(over="ignore", invalid="ignore"):
            return fn(*args, **kwargs)
    return wrapper


@_finite_checked
def _forward(model: Model, x, hook: Callable | None = None, keep_cache: bool = False, trace: bool = False):
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if tuple(x.shape[1:]) != tuple(model.input_shape):
        raise ConfigError(f"input shape {tuple(x.shape[1:])} does not match model input {model.input_shape}")
    x = x.astype(model.dtype, copy=False)
    names = dict((idx, name) for name, idx in _hidden_layers(model.layers))
    caches = []
    hidden = {}
    for i, layer in enumerate(model.layers):
        cache = None
        if layer.kind == "conv":
            s, p = layer.stride or 1, layer.padding or 0
            out, cols = _conv_batch(x, model.params[f"{i}.weight"], model.params[f"{i}.bias"], s, p)
            cache = (x.shape, cols)
        elif layer.kind == "relu":
            out = np.maximum(x, 0)
            if hook is not None:
                out = hook(names[i], out)
            if trace:
                hidden[names[i]] = out
            cache = out
        elif layer.kind == "maxpool":
            k = layer.kernel or 2
            out, arg = _maxpool_batch(x, k, layer.stride or k)
            cache = (x.shape, arg)
        else:
            flat = x.reshape(x.shape[0], -1)
            out = flat @ model.params[f"{i}.weight"].T + model.params[f"{i}.bias"]
            cache = (x.shape, flat)
        if keep_cache:
            caches.append(cache)
        x = out
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite logits in forward pass")
    return x, (caches if keep_cache else hidden)


def forward_collect(model: Model, image) -> ActivationTrace:
    """Forward one standardized CHW image (or a batch) recording every post-ReLU output."""
    logits, hidden = _forward(model, image, trace=True)
    return ActivationTrace(hidden=hidden, logits=logits)


@_finite_checked
def model_backward(model: Model, images, labels) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over the batch and its gradient for every parameter."""
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.int64)
    if images.ndim == 3:
        images = images[None]
    if len(images) == 0 or len(images) != len(labels):
        raise InputError(f"batch needs matching nonempty images/labels, got {len(images)} and {len(labels)}")
    if labels.min() < 0 or labels.max() >= model.category_count:
        raise InputError(f"labels must lie in [0, {model.category_count})")
    logits, caches = _forward(model, images, keep_cache=True)
    n = len(labels)
    logp = _log_softmax(logits)
    loss = float(-logp[np.arange(n), labels].mean())
    dx = np.exp(logp)
    dx[np.arange(n), labels] -= 1.0
    dx = (dx / n).astype(model.dtype)
    grads: dict[str, np.ndarray] = {}
    for i in range(len(model.layers) - 1, -1, -1):
        layer, cache = model.layers[i], caches[i]
        if layer.kind == "conv":
            x_shape, cols = cache
            w = model.params[f"{i}.weight"]
            dx, grads[f"{i}.weight"], grads[f"{i}.bias"] = _conv_backward(
                dx, x_shape, cols, w, layer.stride or 1, layer.padding or 0)
        elif layer.kind == "relu":
            dx = dx * (cache > 0)
        elif layer.kind == "maxpool":
            x_shape, arg = cache
            k = layer.kernel or 2
            dx = _maxpool_backward(dx, x_shape, arg, k, layer.stride or k)
        else:
            x_shape, flat = cache
            grads[f"{i}.weight"] = dx.T @ flat
            grads[f"{i}.bias"] = dx.sum(axis=0)
            dx = (dx @ model.params[f"{i}.weight"]).reshape(x_shape)
        if not np.all(np.isfinite(dx)):
            raise NumericError(f"non-finite gradient at layer {i} ({layer.kind})")
    return loss, {k: grads[k] for k in model.params}


# --- optimizer ------------------------------------------------------------------


@dataclass
class TrainState:
    velocity: dict[str, np.ndarray]
    lr: float
    weight_decay: float = 0.0
    momentum: float = 0.9
    epoch: int = 0

    @classmethod
    def for_model(cls, model: Model, lr: float, weight_decay: float = 0.0, momentum: float = 0.9):
        if lr <= 0 or weight_decay < 0 or not 0 <= momentum < 1:
            raise ConfigError(f"invalid optimizer settings lr={lr} wd={weight_decay} momentum={momentum}")
        return cls({k: np.zeros_like(v) for k, v in model.params.items()}, lr, weight_decay, momentum)


@_finite_checked
def sgd_momentum_step(state: TrainState, params: dict, grads: dict):
    """In-place classical momentum with weight decay folded into the velocity.

    v <- m*v + g + wd*w;  w <- w - lr*v
    """
    m, wd, lr = state.momentum, state.weight_decay, state.lr
    for key, w in params.items():
        g = grads[key]
        if g.shape != w.shape:
            raise InputError(f"gradient {key} has shape {g.shape}, parameter has {w.shape}")
        v = state.velocity[key]
        v *= m
        v += g
        if wd:
            v += wd * w
        w -= lr * v
        if not np.all(np.isfinite(w)):
            raise NumericError(f"non-finite update for parameter {key}")
    return params, state.velocity


# --- checkpoints ---------------------------------------------------------------


def save_checkpoint(model: Model, path) -> None:
    config = json.dumps(model.config_dict(), sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(config)), config]
    for arr in model.params.values():
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    # write-then-rename so a failed save never leaves a truncated checkpoint behind
    tmp = f"{os.fspath(path)}.tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(b"".join(parts))
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:4]!r} at byte 0")
    if len(blob) < 10:
        raise FormatError(f"truncated checkpoint header: expected 10 bytes, got {len(blob)}")
    version, n = struct.unpack_from("<HI", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at byte 4")
    offset = 10
    if len(blob) < offset + n:
        raise FormatError(f"truncated config at byte {offset}: expected {n} bytes, got {len(blob) - offset}")
    cfg = json.loads(blob[offset:offset + n].decode("utf-8"))
    offset += n
    model = build_model([LayerSpec.from_dict(d) for d in cfg["layers"]], cfg["input_shape"],
                        cfg["category_count"], cfg["rng_seed"])
    for key, ref in model.params.items():
        if len(blob) < offset + 4:
            raise FormatError(f"truncated checkpoint at byte {offset} reading {key}")
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        if tuple(shape) != ref.shape:
            raise FormatError(f"parameter {key} has shape {shape}, config implies {ref.shape}")
        nbytes = 4 * ref.size
        if len(blob) < offset + nbytes:
            raise FormatError(f"truncated parameter {key} at byte {offset}: expected {nbytes} bytes, "
                              f"got {len(blob) - offset}")
        model.params[key] = np.frombuffer(blob, dtype="<f4", count=ref.size, offset=offset).reshape(shape).astype(np.float32)
        offset += nbytes
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes after byte {offset}")
    return model
