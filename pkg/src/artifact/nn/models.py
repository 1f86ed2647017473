"""Bounded-mask residual UNet and the compact 7-channel segment classifier."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit

from ..errors import ConfigError, ShapeError, WeightError
from .layers import (
    AdaptiveAvgPool2d,
    BatchNorm2d,
    Conv2d,
    Linear,
    MaxPool2d,
    Module,
    ReLU,
    Sigmoid,
    Upsample2x,
    bounded_mask,
    bounded_mask_grad,
)


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 3
    base_channels: int = 8
    gated_bottleneck: bool = True
    mask_bound: float = 0.5  # 1.0 gives the unbounded ablation variant

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1:
            raise ConfigError(f"UNet depth and base_channels must be >= 1, got {self.depth}/{self.base_channels}")
        if not 0 < self.mask_bound <= 1:
            raise ConfigError(f"mask_bound must be in (0, 1], got {self.mask_bound}")


@dataclass(frozen=True)
class CnnConfig:
    widths: tuple = (16, 32, 64)
    hidden: int = 32
    in_channels: int = 7

    def __post_init__(self):
        if len(self.widths) != 3:
            raise ConfigError(f"classifier needs exactly 3 conv blocks, got widths {self.widths}")


class GatedResidualBlock(Module):
    """``x + h * sigmoid(conv_b(h))`` with ``h = relu(conv_a(x))``."""

    def __init__(self, channels, rng):
        super().__init__()
        self.conv_a = self.add("conv_a", Conv2d(channels, channels, 3, rng))
        self.relu = ReLU()
        self.conv_b = self.add("conv_b", Conv2d(channels, channels, 3, rng))
        self.gate = Sigmoid()

    def forward(self, x, train=False):
        self._h = self.relu.forward(self.conv_a.forward(x))
        self._g = self.gate.forward(self.conv_b.forward(self._h))
        return x + self._h * self._g

    def backward(self, gy):
        g_h = gy * self._g + self.conv_b.backward(self.gate.backward(gy * self._h))
        return gy + self.conv_a.backward(self.relu.backward(g_h))


class ConvReLU(Module):
    def __init__(self, in_ch, out_ch, rng, kernel=3):
        super().__init__()
        self.conv = self.add("conv", Conv2d(in_ch, out_ch, kernel, rng))
        self.act = ReLU()

    def forward(self, x, train=False):
        return self.act.forward(self.conv.forward(x))

    def backward(self, gy):
        return self.conv.backward(self.act.backward(gy))


def _pad_spec(n, multiple):
    extra = (-n) % multiple
    return extra // 2, extra - extra // 2


def _pad_axis(x, axis, before, after):
    if before == 0 and after == 0:
        return x
    widths = [(0, 0)] * x.ndim
    widths[axis] = (before, after)
    mode = "reflect" if x.shape[axis] > 1 else "edge"
    return np.pad(x, widths, mode=mode)


class ArtifactUNet(Module):
    """Encoder-decoder producing a bounded multiplicative mask on a magnitude spectrogram.

    ``forward`` takes ``X`` as ``(batch, 1, bins, frames)`` linear magnitudes
    and returns the residual ``mask * X``. The mask network sees ``X``
    scaled by its per-example maximum; spatial dims are reflect-padded up to
    a multiple of ``2**depth`` and the mask is cropped back.
    """

    def __init__(self, cfg: UNetConfig = UNetConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        chans = [cfg.base_channels * 2 ** i for i in range(cfg.depth + 1)]
        self.enc = []
        in_ch = 1
        for i in range(cfg.depth):
            self.enc.append(self.add(f"enc{i}", ConvReLU(in_ch, chans[i], rng)))
            in_ch = chans[i]
        self.pools = [MaxPool2d() for _ in range(cfg.depth)]
        self.bottleneck = self.add("bottleneck", ConvReLU(chans[cfg.depth - 1], chans[cfg.depth], rng))
        self.gated = self.add("gated", GatedResidualBlock(chans[cfg.depth], rng)) if cfg.gated_bottleneck else None
        self.ups = [Upsample2x() for _ in range(cfg.depth)]
        self.dec = [None] * cfg.depth
        for i in reversed(range(cfg.depth)):
            self.dec[i] = self.add(f"dec{i}", ConvReLU(chans[i + 1] + chans[i], chans[i], rng))
        self.head = self.add("head", Conv2d(chans[0], 1, 1, rng))
        # small head init keeps the initial mask near bound/2 everywhere
        self.head.params["weight"] *= 0.1

    def mask_logits(self, Xn, train=False):
        d = self.cfg.depth
        skips = []
        h = Xn
        for i in range(d):
            h = self.enc[i].forward(h, train)
            skips.append(h)
            h = self.pools[i].forward(h)
        h = self.bottleneck.forward(h, train)
        if self.gated is not None:
            h = self.gated.forward(h, train)
        self._split = []
        for i in reversed(range(d)):
            h = self.ups[i].forward(h)
            self._split.append(h.shape[1])
            h = self.dec[i].forward(np.concatenate([h, skips[i]], axis=1), train)
        return self.head.forward(h)

    def mask_logits_backward(self, gz):
        d = self.cfg.depth
        g = self.head.backward(gz)
        g_skips = [None] * d
        for n_up, i in zip(reversed(self._split), range(d)):
            gc = self.dec[i].backward(g)
            g, g_skips[i] = gc[:, :n_up], gc[:, n_up:]
            g = self.ups[i].backward(g)
        if self.gated is not None:
            g = self.gated.backward(g)
        g = self.bottleneck.backward(g)
        for i in reversed(range(d)):
            g = self.pools[i].backward(g) + g_skips[i]
            g = self.enc[i].backward(g)
        return g

    def forward(self, X, train=False):
        if X.ndim != 4 or X.shape[1] != 1:
            raise ShapeError(f"ArtifactUNet: expected (batch, 1, bins, frames), got {X.shape}")
        peak = X.reshape(X.shape[0], -1).max(axis=1)
        scale = np.where(peak > 0, peak, 1.0)[:, None, None, None]
        mult = 2 ** self.cfg.depth
        ph, pw = _pad_spec(X.shape[2], mult), _pad_spec(X.shape[3], mult)
        Xn = _pad_axis(_pad_axis(X / scale, 2, *ph), 3, *pw)
        z = self.mask_logits(Xn.astype(X.dtype, copy=False), train)
        z = z[:, :, ph[0]:ph[0] + X.shape[2], pw[0]:pw[0] + X.shape[3]]
        m = bounded_mask(z, self.cfg.mask_bound)
        self._cache = (X, z, ph, pw)
        self.last_mask = m
        return m * X

    def backward(self, g_r):
        """Accumulate parameter gradients from dL/d(residual)."""
        X, z, ph, pw = self._cache
        gz = g_r * X * bounded_mask_grad(z, self.cfg.mask_bound)
        full = np.zeros((gz.shape[0], 1, X.shape[2] + sum(ph), X.shape[3] + sum(pw)))
        full[:, :, ph[0]:ph[0] + X.shape[2], pw[0]:pw[0] + X.shape[3]] = gz
        self.mask_logits_backward(full)


class SegmentCNN(Module):
    """3 x (Conv-BN-ReLU-MaxPool) -> global average pool -> FC-ReLU-FC -> logit."""

    def __init__(self, cfg: CnnConfig = CnnConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.blocks = []
        in_ch = cfg.in_channels
        for i, w in enumerate(cfg.widths):
            conv = self.add(f"block{i}.conv", Conv2d(in_ch, w, 3, rng))
            bn = self.add(f"block{i}.bn", BatchNorm2d(w))
            self.blocks.append((conv, bn, ReLU(), MaxPool2d()))
            in_ch = w
        self.gap = AdaptiveAvgPool2d((1, 1))
        self.fc1 = self.add("fc1", Linear(in_ch, cfg.hidden, rng))
        self.act = ReLU()
        self.fc2 = self.add("fc2", Linear(cfg.hidden, 1, rng))

    def forward(self, x, train=False):
        """Return logits of shape ``(batch,)``."""
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"SegmentCNN: expected {self.cfg.in_channels}-channel input, got shape {x.shape}")
        if min(x.shape[2:]) < 8:
            raise ShapeError(f"SegmentCNN: spatial dims {x.shape[2:]} too small for 3 pooling stages")
        h = x
        for conv, bn, relu, pool in self.blocks:
            h = pool.forward(relu.forward(bn.forward(conv.forward(h), train)))
        h = self.gap.forward(h)
        self._flat_shape = h.shape
        h = self.fc2.forward(self.act.forward(self.fc1.forward(h.reshape(h.shape[0], -1))))
        return h[:, 0]

    def backward(self, g_logit):
        g = self.fc1.backward(self.act.backward(self.fc2.backward(g_logit[:, None])))
        g = self.gap.backward(g.reshape(self._flat_shape))
        for conv, bn, relu, pool in reversed(self.blocks):
            g = conv.backward(bn.backward(relu.backward(pool.backward(g))))
        return g

    def predict_proba(self, x) -> np.ndarray:
        return expit(self.forward(x, train=False))


# -- weights <-> modules -----------------------------------------------------

def load_state(module: Module, params: dict, prefix: str) -> None:
    """Copy ``prefix``-ed entries of ``params`` into ``module``; every slot must be filled exactly."""
    own = module.state_dict(prefix)
    supplied = {k for k in params if k.startswith(prefix)}
    missing = sorted(set(own) - supplied)
    extra = sorted(supplied - set(own))
    if missing or extra:
        raise WeightError(f"weights do not match model under {prefix!r}: missing {missing[:5]}, unexpected {extra[:5]}")
    for k, slot in own.items():
        if params[k].shape != slot.shape:
            raise WeightError(f"{k}: weight shape {params[k].shape} != model shape {slot.shape}")
        slot[...] = params[k]


def unet_config_from_params(params: dict, prefix: str = "unet.", mask_bound: float = 0.5) -> UNetConfig:
    depth = sum(1 for k in params if k.startswith(prefix + "enc") and k.endswith(".conv.weight"))
    if depth == 0:
        raise WeightError(f"no UNet encoder weights under {prefix!r}")
    base = params[f"{prefix}enc0.conv.weight"].shape[0]
    gated = f"{prefix}gated.conv_a.weight" in params
    return UNetConfig(depth=depth, base_channels=base, gated_bottleneck=gated, mask_bound=mask_bound)


def cnn_config_from_params(params: dict, prefix: str = "cnn.") -> CnnConfig:
    try:
        widths = tuple(params[f"{prefix}block{i}.conv.weight"].shape[0] for i in range(3))
        in_ch = params[f"{prefix}block0.conv.weight"].shape[1]
        hidden = params[f"{prefix}fc1.weight"].shape[0]
    except KeyError as exc:
        raise WeightError(f"classifier weights incomplete: {exc}") from None
    return CnnConfig(widths=widths, hidden=hidden, in_channels=in_ch)


def config_dict(cfg) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
