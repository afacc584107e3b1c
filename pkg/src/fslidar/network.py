"""Range-image segmentation network with explicit forward and backward passes.

Tensors are channels-last: ``(batch, height, width, channels)``.  Convolution
kernels are stored as ``(out_channels, in_channels * kh * kw)`` matrices, which
is also the ``d x k`` view low-rank adapters attach to.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import HeadAlreadyAttached, NoForwardState, ShapeMismatch
from .pointcloud import DEFAULT_FOV_DOWN, DEFAULT_FOV_UP, LidarScan, back_project, spherical_project

LEAK = 0.1


@dataclass
class Parameter:
    value: np.ndarray
    frozen: bool = False
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)

    @property
    def size(self) -> int:
        return int(self.value.size)

    def accumulate(self, g: np.ndarray) -> None:
        if not self.frozen:
            self.grad += g


# --------------------------------------------------------------------------
# layers

def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> tuple[np.ndarray, tuple]:
    b, h, w, c = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if k == 1 and stride == 1:
        return x.reshape(b * h * w, c), (b, ho, wo)
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    return win.reshape(b * ho * wo, c * k * k), (b, ho, wo)


def col2im(dcols: np.ndarray, x_shape: tuple, k: int, stride: int, pad: int, out_hw: tuple) -> np.ndarray:
    b, h, w, c = x_shape
    ho, wo = out_hw
    if k == 1 and stride == 1:
        return dcols.reshape(b, h, w, c)
    d = dcols.reshape(b, ho, wo, c, k, k)
    dx = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += d[..., i, j]
    return dx[:, pad:pad + h, pad:pad + w, :]


class Conv2d:
    def __init__(self, name: str, c_in: int, c_out: int, kernel: int = 3, stride: int = 1,
                 rng: np.random.Generator | None = None, dtype=np.float64):
        self.name, self.c_in, self.c_out = name, c_in, c_out
        self.kernel, self.stride, self.pad = kernel, stride, (kernel - 1) // 2
        fan_in = c_in * kernel * kernel
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = Parameter(rng.uniform(-bound, bound, (c_out, fan_in)).astype(dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype))
        self.adapter = None
        self._cache = None

    def parameters(self):
        out = {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}
        if self.adapter is not None:
            out.update(self.adapter.parameters())
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.c_in:
            raise ShapeMismatch(f"{self.name}: expected {self.c_in} input channels, got {x.shape[-1]}")
        cols, (b, ho, wo) = im2col(x, self.kernel, self.stride, self.pad)
        out = cols @ self.weight.value.T
        ax = None
        if self.adapter is not None:
            ax = cols @ self.adapter.A.value.T
            out += ax @ self.adapter.B.value.T
        out += self.bias.value
        self._cache = (cols, ax, x.shape, (ho, wo))
        return out.reshape(b, ho, wo, self.c_out)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise NoForwardState(f"{self.name}: backward called before forward")
        cols, ax, x_shape, hw = self._cache
        g = grad.reshape(-1, self.c_out)
        self.weight.accumulate(g.T @ cols)
        self.bias.accumulate(g.sum(axis=0))
        dcols = g @ self.weight.value
        if self.adapter is not None:
            ad = self.adapter
            gb = g @ ad.B.value
            ad.B.accumulate(g.T @ ax)
            ad.A.accumulate(gb.T @ cols)
            dcols += gb @ ad.A.value
        return col2im(dcols, x_shape, self.kernel, self.stride, self.pad, hw)


def leaky_relu(x):
    return np.where(x > 0, x, LEAK * x)


def leaky_relu_backward(x, grad):
    return np.where(x > 0, grad, LEAK * grad)


def upsample2x(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample2x_backward(grad):
    b, h, w, c = grad.shape
    return grad.reshape(b, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


# --------------------------------------------------------------------------
# model

BACKBONE = ("enc1", "down1", "down2", "up1", "up2")
ENCODER = ("enc1", "down1", "down2")
DECODER = ("up1", "up2")


class SegmentationModel:
    """enc1 -> down1 -> down2 -> up1 (+down1) -> up2 (+enc1) -> heads."""

    def __init__(self, in_channels: int = 5, widths=(16, 32, 64), n_base: int = 2,
                 seed: int = 0, dtype=np.float64, projection: dict | None = None):
        c1, c2, c3 = widths
        self.in_channels, self.widths, self.n_base = in_channels, tuple(widths), n_base
        self.n_novel = 0
        self.dtype = np.dtype(dtype)
        self.seed = seed
        self.projection = dict(projection or {"height": 64, "width": 2048,
                                              "fov_up": DEFAULT_FOV_UP, "fov_down": DEFAULT_FOV_DOWN})
        self.input_scale = np.ones(in_channels, dtype=self.dtype)
        rng = np.random.default_rng(seed)
        self.layers = {
            "enc1": Conv2d("enc1", in_channels, c1, 3, 1, rng, dtype),
            "down1": Conv2d("down1", c1, c2, 3, 2, rng, dtype),
            "down2": Conv2d("down2", c2, c3, 3, 2, rng, dtype),
            "up1": Conv2d("up1", c3, c2, 3, 1, rng, dtype),
            "up2": Conv2d("up2", c2, c1, 3, 1, rng, dtype),
            "head_base": Conv2d("head_base", c1, n_base, 1, 1, rng, dtype),
        }
        self._cache = None

    # -- parameters --
    @property
    def head_names(self) -> tuple[str, ...]:
        return ("head_base", "head_novel") if "head_novel" in self.layers else ("head_base",)

    @property
    def n_out(self) -> int:
        return self.n_base + self.n_novel

    def parameters(self) -> dict[str, Parameter]:
        out = {}
        for layer in self.layers.values():
            out.update(layer.parameters())
        return out

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad[...] = 0

    def set_frozen(self, names, frozen: bool = True) -> None:
        params = self.parameters()
        for n in names:
            params[n].frozen = frozen

    def copy(self) -> "SegmentationModel":
        m = copy.deepcopy(self)
        m._cache = None
        for layer in m.layers.values():
            layer._cache = None
        return m

    # -- forward / backward --
    def _prepare(self, features) -> tuple[np.ndarray, bool]:
        x = np.asarray(features)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.ndim != 4 or x.shape[-1] != self.in_channels:
            raise ShapeMismatch(f"expected (..., H, W, {self.in_channels}) features, got {np.shape(features)}")
        if x.shape[1] % 4 or x.shape[2] % 4:
            raise ShapeMismatch(f"range image {x.shape[1:3]} must be divisible by 4")
        return (x * self.input_scale).astype(self.dtype, copy=False), single

    def forward(self, features) -> np.ndarray:
        x, single = self._prepare(features)
        L = self.layers
        a1 = L["enc1"].forward(x)
        e1 = leaky_relu(a1)
        a2 = L["down1"].forward(e1)
        e2 = leaky_relu(a2)
        a3 = L["down2"].forward(e2)
        e3 = leaky_relu(a3)
        a4 = L["up1"].forward(upsample2x(e3))
        d1 = leaky_relu(a4) + e2
        a5 = L["up2"].forward(upsample2x(d1))
        d2 = leaky_relu(a5) + e1
        logits = L["head_base"].forward(d2)
        if "head_novel" in L:
            logits = np.concatenate([logits, L["head_novel"].forward(d2)], axis=-1)
        self._cache = (a1, a2, a3, a4, a5, single)
        return logits[0] if single else logits

    def backward(self, grad_logits) -> None:
        if self._cache is None:
            raise NoForwardState("backward called before forward")
        a1, a2, a3, a4, a5, single = self._cache
        g = np.asarray(grad_logits, dtype=self.dtype)
        if single:
            g = g[None]
        if g.shape[-1] != self.n_out:
            raise ShapeMismatch(f"gradient has {g.shape[-1]} channels, model emits {self.n_out}")
        L = self.layers
        g_d2 = L["head_base"].backward(np.ascontiguousarray(g[..., :self.n_base]))
        if "head_novel" in L:
            g_d2 = g_d2 + L["head_novel"].backward(np.ascontiguousarray(g[..., self.n_base:]))
        g_e1 = g_d2.copy()
        g_d1 = upsample2x_backward(L["up2"].backward(leaky_relu_backward(a5, g_d2)))
        g_e2 = g_d1.copy()
        g_e3 = upsample2x_backward(L["up1"].backward(leaky_relu_backward(a4, g_d1)))
        g_e2 += L["down2"].backward(leaky_relu_backward(a3, g_e3))
        g_e1 += L["down1"].backward(leaky_relu_backward(a2, g_e2))
        L["enc1"].backward(leaky_relu_backward(a1, g_e1))

    # -- heads --
    def attach_novel_head(self, n_novel: int, init_scale: float = 0.01, seed: int | None = None) -> "SegmentationModel":
        if "head_novel" in self.layers:
            raise HeadAlreadyAttached("a novel head is already attached")
        if n_novel < 1:
            raise ValueError("n_novel must be >= 1")
        rng = np.random.default_rng(self.seed + 1 if seed is None else seed)
        head = Conv2d("head_novel", self.widths[0], n_novel, 1, 1, rng, self.dtype)
        head.weight.value[...] = rng.uniform(-init_scale, init_scale, head.weight.value.shape)
        self.layers["head_novel"] = head
        self.n_novel = n_novel
        return self

    # -- inference --
    def predict_pixels(self, features) -> np.ndarray:
        """Per-pixel argmax; ties resolve to the lowest class id."""
        return np.argmax(self.forward(features), axis=-1)

    def project(self, scan: LidarScan):
        p = self.projection
        return spherical_project(scan, p["height"], p["width"], p["fov_up"], p["fov_down"])

    def predict(self, scan: LidarScan) -> np.ndarray:
        ri = self.project(scan)
        return back_project(self.predict_pixels(ri.features), ri)


def forward(model: SegmentationModel, features) -> np.ndarray:
    return model.forward(features)


def backward(model: SegmentationModel, grad_logits) -> None:
    model.backward(grad_logits)


def attach_novel_head(model: SegmentationModel, n_novel: int, init_scale: float = 0.01) -> SegmentationModel:
    return model.attach_novel_head(n_novel, init_scale)


def predict(model: SegmentationModel, scan: LidarScan) -> np.ndarray:
    return model.predict(scan)
