"""Finite-difference audit of every layer and both models in double precision."""

from __future__ import annotations

import numpy as np

from .gradcheck import GradCheckReport, grad_check
from .layers import (
    AdaptiveAvgPool2d,
    BatchNorm2d,
    Conv2d,
    Linear,
    MaxPool2d,
    ReLU,
    Sigmoid,
    Upsample2x,
    bce_with_logits,
    bounded_mask,
    bounded_mask_grad,
)
from .models import ArtifactUNet, CnnConfig, SegmentCNN, UNetConfig


def _check_module(module, x, rng, tolerance, samples, seed, train=False, forward=None):
    """Check parameter and input gradients of ``sum(G * module(x))``."""
    forward = forward or (lambda inp: module.forward(inp, train=train))
    y = forward(x)
    G = rng.standard_normal(y.shape)
    module.zero_grad()
    gx = module.backward(G)
    params = dict(module.named_parameters())
    grads = {k: np.array(v) for k, v in module.named_grads()}
    if gx is not None:
        params["input"], grads["input"] = x, gx
    loss = lambda: float(np.sum(G * forward(x)))
    return grad_check(loss, params, grads, tolerance, samples, seed=seed)


def _check_function(fn, grad_fn, x, tolerance, samples, seed):
    return grad_check(lambda: float(fn(x)), {"input": x}, {"input": grad_fn(x)}, tolerance, samples, seed=seed)


def audit(tolerance: float = 1e-4, samples: int = 6, seed: int = 0) -> dict[str, GradCheckReport]:
    rng = np.random.default_rng(seed)
    x4 = lambda c, h=6, w=8, b=2: rng.standard_normal((b, c, h, w))
    out = {
        "Conv2d 3x3 (widening)": _check_module(Conv2d(2, 4, 3, rng), x4(2), rng, tolerance, samples, seed),
        "Conv2d 3x3 (narrowing)": _check_module(Conv2d(4, 2, 3, rng), x4(4), rng, tolerance, samples, seed),
        "Conv2d 1x1": _check_module(Conv2d(3, 2, 1, rng), x4(3), rng, tolerance, samples, seed),
        "BatchNorm2d train": _check_module(BatchNorm2d(3), x4(3), rng, tolerance, samples, seed, train=True),
        "ReLU": _check_module(ReLU(), x4(2), rng, tolerance, samples, seed),
        "Sigmoid": _check_module(Sigmoid(), x4(2), rng, tolerance, samples, seed),
        "MaxPool2d": _check_module(MaxPool2d(), x4(2), rng, tolerance, samples, seed),
        "AdaptiveAvgPool2d": _check_module(AdaptiveAvgPool2d((2, 3)), x4(2, 5, 7), rng, tolerance, samples, seed),
        "Linear": _check_module(Linear(5, 3, rng), rng.standard_normal((4, 5)), rng, tolerance, samples, seed),
        "Upsample2x": _check_module(Upsample2x(), x4(2, 3, 4), rng, tolerance, samples, seed),
    }
    bn = BatchNorm2d(3)
    bn.buffers["running_mean"][:] = rng.standard_normal(3)
    bn.buffers["running_var"][:] = rng.uniform(0.5, 2.0, 3)
    out["BatchNorm2d eval"] = _check_module(bn, x4(3), rng, tolerance, samples, seed,
                                            forward=lambda inp: bn.forward(inp, train=False))

    z = rng.standard_normal(20)
    gm = rng.standard_normal(20)
    out["bounded_mask"] = _check_function(
        lambda v: np.sum(gm * bounded_mask(v)), lambda v: gm * bounded_mask_grad(v),
        z, tolerance, samples, seed)
    t = (rng.uniform(size=20) > 0.5).astype(float)
    out["bce_with_logits"] = _check_function(lambda v: bce_with_logits(v, t)[0], lambda v: bce_with_logits(v, t)[1],
                                             z.copy(), tolerance, samples, seed)

    unet = ArtifactUNet(UNetConfig(depth=2, base_channels=4), seed=seed)
    X = np.abs(rng.standard_normal((2, 1, 12, 10))) + 0.1
    out["ArtifactUNet"] = _check_module(unet, X, rng, tolerance, samples, seed)
    cnn = SegmentCNN(CnnConfig(widths=(4, 6, 8), hidden=5), seed=seed)
    # update_stats=False: central differences must not drift the running statistics
    F = rng.standard_normal((3, 7, 16, 16))

    def cnn_forward(inp):
        h = inp
        for conv, bn_, relu, pool in cnn.blocks:
            h = pool.forward(relu.forward(bn_.forward(conv.forward(h), train=True, update_stats=False)))
        h = cnn.gap.forward(h)
        cnn._flat_shape = h.shape
        return cnn.fc2.forward(cnn.act.forward(cnn.fc1.forward(h.reshape(h.shape[0], -1))))[:, 0]

    out["SegmentCNN train"] = _check_module(cnn, F, rng, tolerance, samples, seed, forward=cnn_forward)
    out["SegmentCNN eval"] = _check_module(cnn, F, rng, tolerance, samples, seed)
    return out
