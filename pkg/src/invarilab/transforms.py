"""The twelve image transformations, their spec-string grammar, and parameter calibration.

All transforms take HWC pixel arrays in [0, 255] and return float64 arrays.  Linear
filters (high-pass, horizontal, vertical) return raw unclipped responses; the model
standardizes every input anyway.
"""

from __future__ import annotations

import csv
import enum
import math
import re
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import CalibrationError, ConfigError, InputError, ParseError


class TransformKind(str, enum.Enum):
    IDENTITY = "identity"
    GRAYSCALE = "grayscale"
    HUE_ROTATE_180 = "hue-rotate-180"
    GAUSSIAN_BLUR = "gaussian-blur"
    HIGH_PASS = "high-pass"
    HORIZONTAL_FILTER = "horizontal-filter"
    VERTICAL_FILTER = "vertical-filter"
    CONTRAST_INVERSION = "contrast-inversion"
    WHITE_NOISE = "white-noise"
    SALT_PEPPER = "salt-pepper"
    ROTATE_90 = "rotate-90"
    ROTATE_180 = "rotate-180"
    THINNING = "thinning"


FAMILIES = {
    "color": (TransformKind.GRAYSCALE, TransformKind.HUE_ROTATE_180),
    "convolutional": (TransformKind.GAUSSIAN_BLUR, TransformKind.HIGH_PASS, TransformKind.HORIZONTAL_FILTER,
                      TransformKind.VERTICAL_FILTER, TransformKind.CONTRAST_INVERSION),
    "noise": (TransformKind.WHITE_NOISE, TransformKind.SALT_PEPPER),
    "geometric": (TransformKind.ROTATE_90, TransformKind.ROTATE_180, TransformKind.THINNING),
}

PARAMETERIZED = frozenset({TransformKind.GAUSSIAN_BLUR, TransformKind.WHITE_NOISE})
STOCHASTIC = frozenset({TransformKind.WHITE_NOISE, TransformKind.SALT_PEPPER})
COLOR = frozenset(FAMILIES["color"])

HIGH_PASS_TAPS = np.array([-1.0, 2.0, 4.0, 2.0, -1.0])
EDGE_KERNEL = np.array([[-1.0, 0.0, 1.0]] * 3)

# default sweep steps for calibration
CALIBRATION_STEPS = {TransformKind.GAUSSIAN_BLUR: 0.5, TransformKind.WHITE_NOISE: 25.0}
MAX_CALIBRATION_STEPS = 100


@dataclass(frozen=True)
class TransformSpec:
    kind: TransformKind
    param: float | None = None
    rng_seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", TransformKind(self.kind))
        if self.kind in PARAMETERIZED and not (self.param is not None and self.param > 0):
            raise ConfigError(f"{self.kind.value} requires param > 0")

    def __str__(self):
        parts = [self.kind.value]
        if self.param is not None:
            parts.append(_fmt_num(self.param))
        if self.rng_seed is not None:
            if self.param is None:
                parts.append("")
            parts.append(str(self.rng_seed))
        return ":".join(parts)

    def with_seed(self, seed: int) -> "TransformSpec":
        return TransformSpec(self.kind, self.param, seed)


def _fmt_num(x: float) -> str:
    return repr(float(x)) if x != int(x) else str(int(x))


_NUM = re.compile(r"[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?\Z")


def parse_transform_spec(text: str) -> TransformSpec:
    """Parse ``kind[:param][:seed]``.

    Parameter-free kinds carry a seed through an empty param field: ``salt-pepper::3``.
    """
    fields = text.strip().split(":")
    if len(fields) > 3:
        raise ParseError(f"too many fields in {text!r} at position {len(':'.join(fields[:3]))}")
    try:
        kind = TransformKind(fields[0])
    except ValueError:
        raise ParseError(f"unknown transform kind {fields[0]!r} at position 0") from None
    param = seed = None
    pos = len(fields[0]) + 1
    rest = fields[1:]
    if rest:
        if rest[0] != "":
            if kind not in PARAMETERIZED:
                raise ParseError(f"{kind.value} takes no param (position {pos})")
            if not _NUM.match(rest[0]):
                raise ParseError(f"malformed number {rest[0]!r} at position {pos}")
            param = float(rest[0])
        pos += len(rest[0]) + 1
        if len(rest) == 2:
            if not re.fullmatch(r"[+-]?\d+", rest[1]):
                raise ParseError(f"malformed seed {rest[1]!r} at position {pos}")
            seed = int(rest[1])
    if kind in PARAMETERIZED and param is None:
        raise ParseError(f"{kind.value} requires param")
    if kind in PARAMETERIZED and param <= 0:
        raise ParseError(f"{kind.value} requires param > 0 (position {len(fields[0]) + 1})")
    return TransformSpec(kind, param, seed)


def image_rng(seed: int, index: int) -> np.random.Generator:
    """Per-image stream so parallel and serial application agree."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, int(index)])


# --- individual transforms ---------------------------------------------------------


def _grayscale(x):
    y = 0.299 * x[..., 0] + 0.587 * x[..., 1] + 0.114 * x[..., 2]
    return np.repeat(y[..., None], 3, axis=-1)


def rgb_to_hsv(rgb):
    """Vectorized RGB -> HSV, all components on [0, 1] scales except V which keeps the input scale."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    delta = v - mn
    s = np.where(v > 0, delta / np.where(v > 0, v, 1), 0.0)
    safe = np.where(delta > 0, delta, 1)
    h = np.where(v == r, (g - b) / safe,
                 np.where(v == g, 2.0 + (b - r) / safe, 4.0 + (r - g) / safe))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv):
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    h6 = (h % 1.0) * 6.0
    sector = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    choices = [np.stack(c, axis=-1) for c in
               ((v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q))]
    out = np.zeros(hsv.shape)
    for k, c in enumerate(choices):
        out = np.where((sector == k)[..., None], c, out)
    return out


def _hue_rotate_180(x):
    hsv = rgb_to_hsv(x)
    hsv[..., 0] = (hsv[..., 0] + 0.5) % 1.0
    return hsv_to_rgb(hsv)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def _correlate_axis(x, taps, axis, mode):
    """1-D correlation along a spatial axis with 'edge' or 'constant' (zero) padding."""
    r = len(taps) // 2
    pad = [(0, 0)] * x.ndim
    pad[axis] = (r, r)
    xp = np.pad(x, pad, mode=mode)
    n = x.shape[axis]
    out = np.zeros(x.shape, dtype=np.float64)
    for i, w in enumerate(taps):
        if w:
            out += w * np.take(xp, np.arange(i, i + n), axis=axis)
    return out


def correlate2d(x, kernel, mode="constant"):
    """Direct 2-D correlation of every channel of an HWC image with a small kernel."""
    kh, kw = kernel.shape
    rh, rw = kh // 2, kw // 2
    xp = np.pad(x, ((rh, rh), (rw, rw), (0, 0)), mode=mode)
    h, w = x.shape[:2]
    out = np.zeros(x.shape, dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            if kernel[i, j]:
                out += kernel[i, j] * xp[i:i + h, j:j + w]
    return out


def _thinning(x):
    h, w, c = x.shape
    half = w // 2
    squeezed = 0.5 * (x[:, 0:2 * half:2] + x[:, 1:2 * half:2])
    left = (w - half) // 2
    out = np.zeros(x.shape, dtype=np.float64)
    out[:, left:left + half] = squeezed
    return out


def _salt_pepper(x, rng):
    h, w = x.shape[:2]
    n = (h * w) // 2
    chosen = rng.choice(h * w, size=n, replace=False)
    values = np.where(rng.random(n) < 0.5, 0.0, 255.0)
    out = x.reshape(h * w, -1).copy()
    out[chosen] = values[:, None]
    return out.reshape(x.shape)


def apply_transform(image, spec: TransformSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Apply one transformation to an HWC image.

    Stochastic kinds draw from ``rng`` if given, else from ``spec.rng_seed``.
    """
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3:
        raise InputError(f"expected an HWC image, got shape {np.shape(image)}")
    kind = spec.kind
    if kind in COLOR and x.shape[2] != 3:
        raise InputError(f"{kind.value} needs a 3-channel image, got {x.shape[2]} channels")
    if kind in STOCHASTIC and rng is None:
        if spec.rng_seed is None:
            raise ConfigError(f"{kind.value} is stochastic and needs a seed")
        rng = np.random.default_rng(spec.rng_seed)

    if kind is TransformKind.IDENTITY:
        out = x.copy()
    elif kind is TransformKind.GRAYSCALE:
        out = _grayscale(x)
    elif kind is TransformKind.HUE_ROTATE_180:
        out = _hue_rotate_180(x)
    elif kind is TransformKind.GAUSSIAN_BLUR:
        taps = gaussian_kernel(spec.param)
        out = _correlate_axis(_correlate_axis(x, taps, 0, "edge"), taps, 1, "edge")
    elif kind is TransformKind.HIGH_PASS:
        out = _correlate_axis(_correlate_axis(x, HIGH_PASS_TAPS, 0, "constant"), HIGH_PASS_TAPS, 1, "constant")
    elif kind is TransformKind.HORIZONTAL_FILTER:
        out = correlate2d(x, EDGE_KERNEL)
    elif kind is TransformKind.VERTICAL_FILTER:
        out = correlate2d(x, EDGE_KERNEL.T)
    elif kind is TransformKind.CONTRAST_INVERSION:
        out = 255.0 - x
    elif kind is TransformKind.WHITE_NOISE:
        out = np.clip(x + rng.normal(0.0, spec.param, size=x.shape), 0.0, 255.0)
    elif kind is TransformKind.SALT_PEPPER:
        out = _salt_pepper(x, rng)
    elif kind is TransformKind.ROTATE_90:
        out = np.rot90(x, 1, axes=(0, 1)).copy()
    elif kind is TransformKind.ROTATE_180:
        out = np.rot90(x, 2, axes=(0, 1)).copy()
    elif kind is TransformKind.THINNING:
        out = _thinning(x)
    else:  # pragma: no cover
        raise ConfigError(f"unhandled transform {kind}")
    if np.ndim(image) == 2:
        out = out[:, :, 0]
    return out


def transform_batch(images, spec: TransformSpec, seed: int = 0, offset: int = 0) -> list[np.ndarray]:
    """Transform a sequence with per-image streams derived from (seed, index)."""
    return [apply_transform(img, spec, image_rng(seed, offset + i) if spec.kind in STOCHASTIC else None)
            for i, img in enumerate(images)]


# --- calibration --------------------------------------------------------------------


@dataclass
class CalibrationResult:
    kind: TransformKind
    chosen_param: float
    threshold_acc: float
    trace: list[tuple[float, float]] = field(default_factory=list)


def sweep_parameter(accuracy_at: Callable[[float], float], param_step: float, threshold_acc: float,
                    max_steps: int = MAX_CALIBRATION_STEPS) -> tuple[float, list[tuple[float, float]]]:
    """Increase the parameter by ``param_step`` until accuracy drops strictly below the threshold."""
    if param_step <= 0:
        raise ConfigError(f"param_step must be positive, got {param_step}")
    trace = []
    for step in range(1, max_steps + 1):
        param = step * param_step
        acc = float(accuracy_at(param))
        trace.append((param, acc))
        if acc < threshold_acc:
            return param, trace
    raise CalibrationError(f"accuracy never fell below {threshold_acc} within {max_steps} steps", trace)


def calibrate_transform(kind, param_step: float | None, baseline_model, eval_set, threshold_acc: float = 0.10,
                        seed: int = 0, accuracy_fn: Callable[[float], float] | None = None,
                        max_steps: int = MAX_CALIBRATION_STEPS) -> CalibrationResult:
    """Find the first swept parameter at which ``baseline_model`` falls below ``threshold_acc``.

    ``threshold_acc`` and reported accuracies are fractions in [0, 1].  ``accuracy_fn``
    replaces the model evaluation entirely (used for scripted sweeps).
    """
    kind = TransformKind(kind)
    if kind not in PARAMETERIZED:
        raise ConfigError(f"{kind.value} has no parameter to calibrate")
    if param_step is None:
        param_step = CALIBRATION_STEPS[kind]
    if accuracy_fn is None:
        from .paradigm import transformed_accuracy

        def accuracy_fn(param):
            return transformed_accuracy(baseline_model, eval_set, TransformSpec(kind, param, seed), seed) / 100.0

    param, trace = sweep_parameter(accuracy_fn, param_step, threshold_acc, max_steps)
    return CalibrationResult(kind, param, threshold_acc, trace)


def write_calibration_csv(result: CalibrationResult, fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["kind", "param", "top1"])
    for param, acc in result.trace:
        writer.writerow([result.kind.value, _fmt_num(param), f"{100.0 * acc:.6f}"])

