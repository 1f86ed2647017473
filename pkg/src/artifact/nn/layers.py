"""Numpy layers with explicit reverse-mode rules.

Tensors are ``(batch, channel, height, width)`` arrays; height is the
frequency axis and width is time. Each layer caches what its backward pass
needs during ``forward`` so an instance must not be shared between threads
that run forward passes concurrently.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from ..errors import ShapeError


class Module:
    """Minimal parameter container: ``params``/``grads``/``buffers`` plus child modules."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}

    def add(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        for k, v in self.params.items():
            yield prefix + k, v
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_grads(self, prefix=""):
        for k in self.params:
            yield prefix + k, self.grads.setdefault(k, np.zeros_like(self.params[k]))
        for name, child in self._children.items():
            yield from child.named_grads(f"{prefix}{name}.")

    def named_buffers(self, prefix=""):
        for k, v in self.buffers.items():
            yield prefix + k, v
        for name, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def zero_grad(self):
        for _, g in self.named_grads():
            g[...] = 0.0

    def state_dict(self, prefix="") -> dict[str, np.ndarray]:
        out = dict(self.named_parameters(prefix))
        out.update(self.named_buffers(prefix))
        return out

    def _accumulate(self, name, value):
        if name in self.grads:
            self.grads[name] += value
        else:
            self.grads[name] = np.array(value, dtype=np.float64)

    def name(self) -> str:
        return type(self).__name__


def _check_rank4(layer, x, channels=None):
    if x.ndim != 4:
        raise ShapeError(f"{layer}: expected (batch, channel, height, width), got shape {x.shape}")
    if channels is not None and x.shape[1] != channels:
        raise ShapeError(f"{layer}: expected {channels} input channels, got {x.shape[1]}")


class Conv2d(Module):
    """Stride-1 convolution with zero 'same' padding (odd kernel)."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, rng=None):
        super().__init__()
        if kernel % 2 == 0:
            raise ShapeError(f"Conv2d: kernel must be odd, got {kernel}")
        rng = rng or np.random.default_rng(0)
        fan_in = in_ch * kernel * kernel
        self.params["weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_ch, in_ch, kernel, kernel))
        self.params["bias"] = np.zeros(out_ch)
        self.in_ch, self.out_ch, self.k = in_ch, out_ch, kernel

    def _slices(self, xp, h, w):
        for dy in range(self.k):
            for dx in range(self.k):
                yield dy, dx, xp[:, :, dy:dy + h, dx:dx + w]

    # im2col on the narrower side (input when in_ch <= out_ch, output
    # otherwise) keeps the stacked copy small.

    def forward(self, x, train=False):
        _check_rank4("Conv2d", x, self.in_ch)
        b, _, h, w = x.shape
        p = self.k // 2
        xt = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))).transpose(1, 0, 2, 3)
        W = self.params["weight"].astype(x.dtype, copy=False)
        if self.in_ch <= self.out_ch:
            cols = np.stack([s for _, _, s in self._slices(xt, h, w)]).reshape(-1, b * h * w)
            y = (W.transpose(0, 2, 3, 1).reshape(self.out_ch, -1) @ cols).reshape(self.out_ch, b, h, w)
            xt = cols
        else:
            xt = np.ascontiguousarray(xt)
            z = W.transpose(2, 3, 0, 1).reshape(-1, self.in_ch) @ xt.reshape(self.in_ch, -1)
            z = z.reshape(self.k, self.k, self.out_ch, *xt.shape[1:])
            y = np.zeros((self.out_ch, b, h, w), dtype=x.dtype)
            for dy in range(self.k):
                for dx in range(self.k):
                    y += z[dy, dx, :, :, dy:dy + h, dx:dx + w]
        self._x = xt
        self._shape = x.shape
        return y.transpose(1, 0, 2, 3) + self.params["bias"].astype(x.dtype, copy=False)[None, :, None, None]

    def backward(self, gy):
        b, _, h, w = self._shape
        p = self.k // 2
        xt = self._x
        W = self.params["weight"]
        if self.in_ch <= self.out_ch:
            # xt holds the stacked input columns here
            gyt = gy.transpose(1, 0, 2, 3).reshape(self.out_ch, -1)
            gW = (gyt @ xt.T).reshape(self.out_ch, self.k, self.k, self.in_ch).transpose(0, 3, 1, 2)
            gcols = (W.transpose(0, 2, 3, 1).reshape(self.out_ch, -1).T @ gyt).reshape(
                self.k, self.k, self.in_ch, b, h, w)
            gxt = np.zeros((self.in_ch, b, h + 2 * p, w + 2 * p), dtype=gy.dtype)
            for dy in range(self.k):
                for dx in range(self.k):
                    gxt[:, :, dy:dy + h, dx:dx + w] += gcols[dy, dx]
        else:
            # gy shifted by every offset, stacked (im2col on the narrow side): one matmul
            # each gives all weight gradients and the full input gradient
            hp, wp = h + 2 * p, w + 2 * p
            canvas = np.zeros((self.out_ch, b, hp + 2 * p, wp + 2 * p), dtype=gy.dtype)
            canvas[:, :, 2 * p:2 * p + h, 2 * p:2 * p + w] = gy.transpose(1, 0, 2, 3)
            cols = np.stack([canvas[:, :, 2 * p - dy:2 * p - dy + hp, 2 * p - dx:2 * p - dx + wp]
                             for dy in range(self.k) for dx in range(self.k)])
            cols = cols.reshape(self.k * self.k * self.out_ch, -1)
            xf = xt.reshape(self.in_ch, -1)
            gW = (cols @ xf.T).reshape(self.k, self.k, self.out_ch, self.in_ch).transpose(2, 3, 0, 1)
            Wm = W.transpose(1, 2, 3, 0).reshape(self.in_ch, -1)
            gxt = (Wm @ cols).reshape(xt.shape)
        self._accumulate("weight", gW)
        self._accumulate("bias", gy.sum(axis=(0, 2, 3)))
        return gxt.transpose(1, 0, 2, 3)[:, :, p:p + h, p:p + w]


class BatchNorm2d(Module):
    """Per-channel batch normalisation; batch statistics in train mode, running ones in eval."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)
        self.channels, self.momentum, self.eps = channels, momentum, eps

    def forward(self, x, train=False, update_stats=True):
        _check_rank4("BatchNorm2d", x, self.channels)
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            if update_stats:
                n = x.size // self.channels
                m = self.momentum
                self.buffers["running_mean"][...] = (1 - m) * self.buffers["running_mean"] + m * mean
                unbiased = var * n / max(n - 1, 1)
                self.buffers["running_var"][...] = (1 - m) * self.buffers["running_var"] + m * unbiased
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
        self._cache = (xhat, inv, train)
        g, b = self.params["gamma"], self.params["beta"]
        return (xhat * g[None, :, None, None] + b[None, :, None, None]).astype(x.dtype, copy=False)

    def backward(self, gy):
        xhat, inv, train = self._cache
        g = self.params["gamma"]
        self._accumulate("gamma", np.sum(gy * xhat, axis=(0, 2, 3)))
        self._accumulate("beta", gy.sum(axis=(0, 2, 3)))
        gxhat = gy * g[None, :, None, None]
        if not train:
            return gxhat * inv[None, :, None, None]
        m = gy.size // self.channels
        s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = np.sum(gxhat * xhat, axis=(0, 2, 3), keepdims=True)
        return inv[None, :, None, None] * (gxhat - s1 / m - xhat * s2 / m)


class ReLU(Module):
    def forward(self, x, train=False):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0).astype(x.dtype, copy=False)

    def backward(self, gy):
        return gy * self._mask


class Sigmoid(Module):
    def forward(self, x, train=False):
        self._y = expit(x)
        return self._y

    def backward(self, gy):
        return gy * self._y * (1.0 - self._y)


class MaxPool2d(Module):
    """2x2 max pooling, stride 2; a trailing odd row/column is dropped."""

    def forward(self, x, train=False):
        _check_rank4("MaxPool2d", x)
        b, c, h, w = x.shape
        if h < 2 or w < 2:
            raise ShapeError(f"MaxPool2d: input {h}x{w} too small for 2x2 pooling")
        h2, w2 = h // 2, w // 2
        blocks = x[:, :, :2 * h2, :2 * w2].reshape(b, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h2, w2, 4)
        self._arg = np.argmax(blocks, axis=-1)
        self._shape = x.shape
        return np.take_along_axis(blocks, self._arg[..., None], axis=-1)[..., 0]

    def backward(self, gy):
        b, c, h, w = self._shape
        h2, w2 = h // 2, w // 2
        g = np.zeros((b, c, h2, w2, 4), dtype=gy.dtype)
        np.put_along_axis(g, self._arg[..., None], gy[..., None], axis=-1)
        gx = np.zeros(self._shape, dtype=gy.dtype)
        gx[:, :, :2 * h2, :2 * w2] = g.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * h2, 2 * w2)
        return gx


def _adaptive_bins(n_in, n_out):
    return [(int(np.floor(i * n_in / n_out)), int(np.ceil((i + 1) * n_in / n_out))) for i in range(n_out)]


class AdaptiveAvgPool2d(Module):
    def __init__(self, output_size=(1, 1)):
        super().__init__()
        self.output_size = output_size

    def forward(self, x, train=False):
        _check_rank4("AdaptiveAvgPool2d", x)
        oh, ow = self.output_size
        self._shape = x.shape
        self._bins = (_adaptive_bins(x.shape[2], oh), _adaptive_bins(x.shape[3], ow))
        y = np.empty(x.shape[:2] + (oh, ow), dtype=x.dtype)
        for i, (h0, h1) in enumerate(self._bins[0]):
            for j, (w0, w1) in enumerate(self._bins[1]):
                y[:, :, i, j] = x[:, :, h0:h1, w0:w1].mean(axis=(2, 3))
        return y

    def backward(self, gy):
        gx = np.zeros(self._shape, dtype=gy.dtype)
        for i, (h0, h1) in enumerate(self._bins[0]):
            for j, (w0, w1) in enumerate(self._bins[1]):
                area = (h1 - h0) * (w1 - w0)
                gx[:, :, h0:h1, w0:w1] += (gy[:, :, i, j] / area)[:, :, None, None]
        return gx


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.params["weight"] = rng.normal(0.0, np.sqrt(2.0 / in_features), (out_features, in_features))
        self.params["bias"] = np.zeros(out_features)
        self.in_features = in_features

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"Linear: expected (batch, {self.in_features}), got {x.shape}")
        self._x = x
        return x @ self.params["weight"].T.astype(x.dtype, copy=False) + self.params["bias"].astype(x.dtype, copy=False)

    def backward(self, gy):
        self._accumulate("weight", gy.T @ self._x)
        self._accumulate("bias", gy.sum(axis=0))
        return gy @ self.params["weight"]


class Upsample2x(Module):
    """Nearest-neighbour 2x upsampling on both spatial axes."""

    def forward(self, x, train=False):
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, gy):
        b, c, h, w = gy.shape
        return gy.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


# Logits are clipped here so the mask stays strictly inside (0, bound) even in
# float32, where sigmoid(z) rounds to exactly 1 beyond z ~ 17.
MASK_LOGIT_LIMIT = 15.0


def bounded_mask(z, bound: float = 0.5):
    """``bound * sigmoid(clip(z))``: a multiplicative mask strictly inside ``(0, bound)``."""
    return bound * expit(np.clip(z, -MASK_LOGIT_LIMIT, MASK_LOGIT_LIMIT))


def bounded_mask_grad(z, bound: float = 0.5):
    """d mask / d z; zero where the logit is clipped."""
    s = expit(np.clip(z, -MASK_LOGIT_LIMIT, MASK_LOGIT_LIMIT))
    return np.where(np.abs(z) < MASK_LOGIT_LIMIT, bound * s * (1.0 - s), 0.0)


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy on logits and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    loss = np.maximum(logits, 0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    grad = (expit(logits) - targets) / logits.size
    return float(loss.mean()), grad
