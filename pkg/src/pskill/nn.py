"""Small differentiable-layer core on numpy arrays.

Every layer works on a leading batch axis and exposes

    y, cache = layer.forward(x)
    dx, grads = layer.backward(cache, dy)

Image activations are channels-last (N, H, W, C) because im2col is cheapest
in that order; convolution weights are stored channel-major (O, C, kh, kw).
Layers compute in the dtype of their input, so float64 inputs give a
float64 pass for finite-difference checks while training runs in float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

Tensor = np.ndarray


def _shape_error(what: str, got, expected) -> ShapeError:
    return ShapeError(f"{what}: got shape {tuple(got)}, expected {expected}")


@dataclass
class Dense:
    weight: Tensor  # (in, out)
    bias: Tensor  # (out,)

    @property
    def params(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x: Tensor):
        if x.ndim != 2 or x.shape[1] != self.weight.shape[0]:
            raise _shape_error("dense input", x.shape, f"(N, {self.weight.shape[0]})")
        w = self.weight.astype(x.dtype, copy=False)
        return x @ w + self.bias.astype(x.dtype, copy=False), x

    def backward(self, cache: Tensor, dy: Tensor, need_input_grad: bool = True):
        x = cache
        if dy.shape != (x.shape[0], self.weight.shape[1]):
            raise _shape_error("dense upstream gradient", dy.shape, (x.shape[0], self.weight.shape[1]))
        grads = {"weight": x.T @ dy, "bias": dy.sum(axis=0)}
        dx = dy @ self.weight.astype(dy.dtype, copy=False).T if need_input_grad else None
        return dx, grads


@dataclass
class ReLU:
    params: dict = field(default_factory=dict)

    def forward(self, x: Tensor):
        mask = x > 0
        return np.where(mask, x, 0).astype(x.dtype, copy=False), mask

    def backward(self, cache: Tensor, dy: Tensor, need_input_grad: bool = True):
        if dy.shape != cache.shape:
            raise _shape_error("relu upstream gradient", dy.shape, cache.shape)
        return np.where(cache, dy, 0).astype(dy.dtype, copy=False), {}


@dataclass
class Conv2D:
    """Valid (unpadded) strided cross-correlation on (N, H, W, C) input."""

    weight: Tensor  # (O, C, kh, kw)
    bias: Tensor  # (O,)
    stride: int = 1

    @property
    def params(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.weight.shape[2:]
        return (h - kh) // self.stride + 1, (w - kw) // self.stride + 1

    def _matrix(self, dtype) -> Tensor:
        o = self.weight.shape[0]
        return self.weight.transpose(0, 2, 3, 1).reshape(o, -1).astype(dtype, copy=False)

    def forward(self, x: Tensor):
        o, c, kh, kw = self.weight.shape
        if x.ndim != 4 or x.shape[3] != c or x.shape[1] < kh or x.shape[2] < kw:
            raise _shape_error("conv input", x.shape, f"(N, H>={kh}, W>={kw}, {c})")
        n, h, w, _ = x.shape
        ho, wo = self.output_hw(h, w)
        s = self.stride
        windows = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::s, ::s][:, :ho, :wo]
        cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
        y = cols @ self._matrix(x.dtype).T + self.bias.astype(x.dtype, copy=False)
        return y.reshape(n, ho, wo, o), (cols, x.shape)

    def backward(self, cache, dy: Tensor, need_input_grad: bool = True):
        cols, x_shape = cache
        o, c, kh, kw = self.weight.shape
        n, h, w, _ = x_shape
        ho, wo = self.output_hw(h, w)
        if dy.shape != (n, ho, wo, o):
            raise _shape_error("conv upstream gradient", dy.shape, (n, ho, wo, o))
        dy2 = dy.reshape(-1, o)
        dw = (dy2.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        grads = {"weight": np.ascontiguousarray(dw), "bias": dy2.sum(axis=0)}
        if not need_input_grad:
            return None, grads
        s = self.stride
        if s == 1:
            # full correlation of the zero-padded upstream gradient with the flipped kernel
            dyp = np.pad(dy, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
            win = sliding_window_view(dyp, (kh, kw), axis=(1, 2))[:, :, :, :, ::-1, ::-1]
            cols_t = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, kh * kw * o)
            wt = self.weight.transpose(2, 3, 0, 1).reshape(kh * kw * o, c).astype(dy.dtype, copy=False)
            return (cols_t @ wt).reshape(x_shape), grads
        dcols = (dy2 @ self._matrix(dy.dtype)).reshape(n, ho, wo, kh, kw, c)
        dx = np.zeros(x_shape, dy.dtype)
        for i in range(kh):
            for j in range(kw):
                dx[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += dcols[:, :, :, i, j, :]
        return dx, grads


@dataclass
class SpatialSoftmax:
    """Per-channel softmax over pixels followed by the expected (x, y) position.

    Pixel centres map linearly onto [-1, 1] (corner pixel centres sit exactly
    on -1 and +1). Output is (N, 2C) ordered x0, y0, x1, y1, ...
    """

    temperature: float = 1.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")

    @staticmethod
    def grid(h: int, w: int, dtype=np.float64) -> tuple[Tensor, Tensor]:
        xs = np.linspace(-1.0, 1.0, w) if w > 1 else np.zeros(1)
        ys = np.linspace(-1.0, 1.0, h) if h > 1 else np.zeros(1)
        px = np.tile(xs, h).astype(dtype)
        py = np.repeat(ys, w).astype(dtype)
        return px, py

    def attention(self, x: Tensor) -> Tensor:
        n, h, w, c = x.shape
        z = x.reshape(n, h * w, c) / x.dtype.type(self.temperature)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def forward(self, x: Tensor):
        if x.ndim != 4:
            raise _shape_error("spatial softmax input", x.shape, "(N, H, W, C)")
        n, h, w, c = x.shape
        alpha = self.attention(x)
        px, py = self.grid(h, w, x.dtype)
        fx = np.einsum("npc,p->nc", alpha, px)
        fy = np.einsum("npc,p->nc", alpha, py)
        out = np.stack([fx, fy], axis=-1).reshape(n, 2 * c)
        return out, (alpha, x.shape)

    def backward(self, cache, dy: Tensor, need_input_grad: bool = True):
        alpha, (n, h, w, c) = cache
        if dy.shape != (n, 2 * c):
            raise _shape_error("spatial softmax upstream gradient", dy.shape, (n, 2 * c))
        d = dy.reshape(n, c, 2)
        px, py = self.grid(h, w, dy.dtype)
        dalpha = px[None, :, None] * d[:, None, :, 0] + py[None, :, None] * d[:, None, :, 1]
        dz = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
        return (dz / dy.dtype.type(self.temperature)).reshape(n, h, w, c), {}


Layer = Dense | ReLU | Conv2D | SpatialSoftmax


def layer_forward(layer, x: Tensor) -> Tensor:
    return layer.forward(x)[0]


def layer_backward(layer, x: Tensor, upstream_grad: Tensor):
    """Input gradient and parameter gradients of ``layer`` at ``x``."""
    _, cache = layer.forward(x)
    return layer.backward(cache, upstream_grad)


def spatial_softmax(feature_maps: Tensor, temperature: float = 1.0) -> Tensor:
    """Feature points of channel-major maps: (C, H, W) -> (2C,) or (N, C, H, W) -> (N, 2C)."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    single = feature_maps.ndim == 3
    x = feature_maps[None] if single else feature_maps
    out = SpatialSoftmax(temperature).forward(np.moveaxis(x, 1, -1))[0]
    return out[0] if single else out


# --------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    probes: dict[str, int]
    threshold: float
    skipped_kinks: int = 0

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.threshold

    def __str__(self) -> str:
        lines = [f"{'tensor':<32} {'probes':>7} {'max rel err':>12}"]
        for name, err in self.max_rel_error.items():
            flag = "" if err < self.threshold else "  FAIL"
            lines.append(f"{name:<32} {self.probes[name]:>7} {err:>12.3e}{flag}")
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"{verdict} (threshold {self.threshold:g}, kink probes skipped: {self.skipped_kinks})")
        return "\n".join(lines)


def relative_error(a, n) -> np.ndarray:
    a = np.asarray(a, np.float64)
    n = np.asarray(n, np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def grad_check(
    fn: Callable,
    arrays: Mapping[str, Tensor],
    eps: float = 1e-3,
    threshold: float = 1e-3,
    max_coords: int = 10_000,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``fn(arrays)`` returns ``(loss, grads)`` or ``(loss, grads, signature)``
    where ``grads`` maps the same names to gradient arrays. When a signature
    (e.g. the relu activation pattern) is returned, probes that change it are
    treated as kink crossings and skipped. Above ``max_coords`` total
    coordinates a random subsample is probed.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    arrays = {k: np.array(v, copy=True) for k, v in arrays.items()}

    def call(arrs):
        out = fn(arrs)
        return (out[0], out[1], out[2]) if len(out) == 3 else (out[0], out[1], None)

    _, analytic, base_sig = call(arrays)
    total = sum(a.size for a in arrays.values())
    per_array = max(1, max_coords // max(len(arrays), 1))
    errors, probes, skipped = {}, {}, 0
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        if total <= max_coords or flat.size <= per_array:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.choice(flat.size, per_array, replace=False))
        grad = np.asarray(analytic[name], np.float64).reshape(-1)
        worst, count = 0.0, 0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            lp, _, sp = call(arrays)
            flat[i] = orig - eps
            lm, _, sm = call(arrays)
            flat[i] = orig
            if base_sig is not None and (sp != base_sig or sm != base_sig):
                skipped += 1
                continue
            numeric = (np.float64(lp) - np.float64(lm)) / (2.0 * eps)
            worst = max(worst, float(relative_error(grad[i], numeric)))
            count += 1
        errors[name] = worst
        probes[name] = count
    return GradCheckReport(errors, probes, threshold, skipped)


def layer_unit(layer, rng: np.random.Generator, out_shape) -> Callable:
    """Wrap a layer as a scalar function of its input and params for grad_check.

    The scalar is a fixed random projection of the output, so the upstream
    gradient is that projection.
    """
    proj = rng.standard_normal(out_shape)
    names = list(layer.params)

    def fn(arrays):
        for k in names:
            setattr(layer, k, arrays[k])
        y, cache = layer.forward(arrays["input"])
        loss = float(np.sum(proj * y, dtype=np.float64))
        dx, grads = layer.backward(cache, proj.astype(y.dtype))
        sig = cache.tobytes() if isinstance(layer, ReLU) else None
        return loss, {"input": dx, **grads}, sig

    return fn


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> Tensor:
    """Uniform with variance 2 / fan_in."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
