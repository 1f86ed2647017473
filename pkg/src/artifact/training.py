"""Staged training at desk scale: distillation, frozen-classifier steering, codec-aware steering.

Every phase updates exactly one network. The classifier-only ``train_classifier``
stage fits the CNN on residuals from a fixed UNet and is what phase 2 later
freezes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .bench import MetricsBlock
from .codecs import TRAINING_VARIANTS, cross_codec_delta, require_variants
from .errors import ConfigError, DivergenceError, FrozenViolationError
from .features import N_CHANNELS, ChannelTransform
from .nn.layers import Module, bce_with_logits
from .nn.models import ArtifactUNet, SegmentCNN, UNetConfig
from .nn.weights import ModelWeights, to_bytes
from .pipeline import TOY_FRONTEND, FrontendConfig
from .spectral import istft, istft_backward, multires_stft_loss, stft_complex

logger = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 20


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    steps: int = 200
    batch_size: int = 4
    seed: int = 0
    phase: int = 1
    optimizer: str = "momentum"
    momentum: float = 0.9
    clip_norm: float | None = 1.0

    def __post_init__(self):
        # lr == 0 is accepted so the no-op optimizer can be exercised
        if not np.isfinite(self.learning_rate) or self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.phase not in (1, 2, 3):
            raise ConfigError(f"phase must be 1, 2 or 3, got {self.phase}")
        if self.optimizer not in ("sgd", "momentum"):
            raise ConfigError(f"optimizer must be 'sgd' or 'momentum', got {self.optimizer!r}")


class SGD:
    """Plain or heavy-ball SGD over a module's parameters, with optional global-norm clipping."""

    def __init__(self, module: Module, lr: float, momentum: float = 0.9, clip_norm: float | None = None):
        self.module, self.lr, self.momentum, self.clip_norm = module, lr, momentum, clip_norm
        self.velocity = {k: np.zeros_like(v) for k, v in module.named_parameters()}

    def step(self) -> float:
        params = dict(self.module.named_parameters())
        grads = dict(self.module.named_grads())
        norm = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        if self.lr == 0.0:
            return norm
        for k in sorted(params):
            v = self.velocity[k]
            v *= self.momentum
            v += scale * grads[k]
            params[k] -= self.lr * v
        return norm


def make_optimizer(module: Module, cfg: TrainConfig) -> SGD:
    return SGD(module, cfg.learning_rate, cfg.momentum if cfg.optimizer == "momentum" else 0.0, cfg.clip_norm)


class DivergenceMonitor:
    def __init__(self, factor: float = DIVERGENCE_FACTOR, patience: int = DIVERGENCE_PATIENCE):
        self.factor, self.patience = factor, patience
        self.initial = None
        self.run = 0

    def update(self, step: int, loss: float) -> None:
        if self.initial is None:
            self.initial = loss
            return
        if not np.isfinite(loss) or loss > self.factor * self.initial:
            self.run += 1
            if self.run >= self.patience:
                raise DivergenceError(
                    f"loss {loss:.4g} above {self.factor:g}x initial {self.initial:.4g} "
                    f"for {self.patience} consecutive steps", step=step)
        else:
            self.run = 0


@dataclass
class PhaseResult:
    losses: list[float]
    info: dict = field(default_factory=dict)


def write_curve(path, losses, phase) -> None:
    """One JSON record per step: ``{"phase", "step", "loss"}``."""
    with open(path, "w", encoding="utf-8") as fh:
        for i, v in enumerate(losses):
            fh.write(json.dumps({"phase": str(phase), "step": i, "loss": float(v)}) + "\n")


def _spectrogram_batch(waves, frontend: FrontendConfig):
    specs = [stft_complex(np.asarray(w, dtype=np.float64), frontend.stft) for w in waves]
    X = np.stack([np.abs(s).T for s in specs])[:, None]
    return X, specs


# -- phase 1 -----------------------------------------------------------------

def distill_loss(r, target, phase, frontend: FrontendConfig, n_samples: int, ffts=(512, 1024, 2048)):
    """L1 on magnitudes plus multi-resolution STFT loss on mixture-phase reconstructions.

    ``r`` and ``target`` are ``bins x frames``; returns ``(loss, dL/dr)``.
    """
    l1 = float(np.mean(np.abs(r - target)))
    g = np.sign(r - target) / r.size
    unit = np.exp(1j * np.angle(phase))
    rec = istft((r * unit).T, frontend.stft, n_samples)
    ref = istft((target * unit).T, frontend.stft, n_samples)
    mr, g_rec = multires_stft_loss(rec, ref, ffts, return_grad=True)
    g_spec = istft_backward(g_rec, frontend.stft, r.shape[1]).T
    g = g + np.real(np.conj(unit) * g_spec)
    return l1 + mr, g


def phase1_distill(unet: ArtifactUNet, oracle, cfg: TrainConfig, frontend: FrontendConfig = TOY_FRONTEND) -> PhaseResult:
    """Fit the UNet residual to the oracle's ground-truth residuals."""
    pairs = oracle.pairs()
    if not pairs:
        raise ConfigError("oracle produced no pairs")
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(unet, cfg)
    monitor = DivergenceMonitor()
    n_samples = len(pairs[0].mixture)
    losses = []
    for step in range(cfg.steps):
        idx = rng.choice(len(pairs), size=min(cfg.batch_size, len(pairs)), replace=False)
        X, specs = _spectrogram_batch([pairs[i].mixture for i in idx], frontend)
        unet.zero_grad()
        r = unet.forward(X, train=True)
        total = 0.0
        g_r = np.zeros_like(r)
        for b, i in enumerate(idx):
            loss, g = distill_loss(r[b, 0], pairs[i].residual_mag.T, specs[b].T, frontend, n_samples)
            total += loss / len(idx)
            g_r[b, 0] = g / len(idx)
        unet.backward(g_r)
        opt.step()
        losses.append(total)
        monitor.update(step, total)
        logger.debug("phase1 step %d loss %.5f", step, total)
    return PhaseResult(losses, {"mean_mask": float(np.mean(unet.last_mask))})


# -- classifier-side helpers --------------------------------------------------

def _labels_of(examples):
    return np.array([float(e.label) for e in examples])


def residual_features(unet: ArtifactUNet, waves, transform: ChannelTransform, frontend: FrontendConfig, train: bool = False):
    """UNet residual -> 7-channel features for a batch; caches allow the backward pass."""
    X, _ = _spectrogram_batch(waves, frontend)
    r = unet.forward(X, train=train)
    feats, caches = [], []
    for b in range(r.shape[0]):
        f, c = transform.forward(r[b, 0].T)
        feats.append(f)
        caches.append(c)
    return np.stack(feats), caches, r


def feature_bank(unet: ArtifactUNet, examples, frontend: FrontendConfig = TOY_FRONTEND, batch: int = 8) -> np.ndarray:
    transform = frontend.channel_transform()
    out = []
    for i in range(0, len(examples), batch):
        out.append(residual_features(unet, [e.samples for e in examples[i:i + batch]], transform, frontend)[0])
    return np.concatenate(out)


def predict_proba(unet, cnn, waves, frontend: FrontendConfig = TOY_FRONTEND, batch: int = 8) -> np.ndarray:
    transform = frontend.channel_transform()
    probs = []
    for i in range(0, len(waves), batch):
        f = residual_features(unet, waves[i:i + batch], transform, frontend)[0]
        probs.append(expit(cnn.forward(f, train=False)))
    return np.concatenate(probs)


def train_classifier(cnn: SegmentCNN, features: np.ndarray, labels, cfg: TrainConfig, ignore_channels=()) -> PhaseResult:
    """Fit the CNN on fixed features (UNet frozen). ``ignore_channels`` are zeroed in the
    input and in the first conv, so the trained network provably does not read them."""
    labels = np.asarray(labels, dtype=np.float64)
    if len(features) == 0:
        raise ConfigError("empty training set")
    features = np.array(features, dtype=np.float64)
    conv0 = cnn.blocks[0][0]
    for c in ignore_channels:
        features[:, c] = 0.0
        conv0.params["weight"][:, c] = 0.0
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(cnn, cfg)
    monitor = DivergenceMonitor()
    losses = []
    for step in range(cfg.steps):
        idx = rng.choice(len(features), size=min(cfg.batch_size, len(features)), replace=False)
        cnn.zero_grad()
        loss, g = bce_with_logits(cnn.forward(features[idx], train=True), labels[idx])
        cnn.backward(g)
        opt.step()
        losses.append(loss)
        monitor.update(step, loss)
    return PhaseResult(losses)


def _frozen_snapshot(cnn: SegmentCNN) -> bytes:
    return to_bytes(ModelWeights({k: np.array(v) for k, v in cnn.state_dict().items()}, {}))


def _steer(unet, cnn, batches, cfg: TrainConfig, frontend: FrontendConfig, phase: int) -> PhaseResult:
    """BCE through the frozen CNN and the differentiable feature transform into the UNet."""
    transform = frontend.channel_transform()
    before = _frozen_snapshot(cnn)
    opt = make_optimizer(unet, cfg)
    monitor = DivergenceMonitor()
    losses = []
    for step in range(cfg.steps):
        waves, labels = batches(step)
        unet.zero_grad()
        feats, caches, r = residual_features(unet, waves, transform, frontend, train=True)
        loss, g = bce_with_logits(cnn.forward(feats, train=False), labels)
        g_feats = cnn.backward(g)
        g_r = np.zeros_like(r)
        for b in range(len(waves)):
            g_r[b, 0] = transform.backward(g_feats[b], caches[b]).T
        unet.backward(g_r)
        opt.step()
        losses.append(loss)
        monitor.update(step, loss)
        logger.debug("phase%d step %d bce %.5f", phase, step, loss)
    cnn.zero_grad()
    if _frozen_snapshot(cnn) != before:
        raise FrozenViolationError(f"phase {phase} modified classifier parameters")
    return PhaseResult(losses, {"mean_mask": float(np.mean(unet.last_mask))})


# -- phase 2 -------------------------------------------------------------------

def phase2_steer(unet: ArtifactUNet, cnn: SegmentCNN, labeled_set, cfg: TrainConfig,
                 frontend: FrontendConfig = TOY_FRONTEND) -> PhaseResult:
    """Steer the UNet with BCE through the frozen classifier; the CNN must stay bit-identical."""
    if not labeled_set:
        raise ConfigError("phase 2 needs a non-empty labeled set")
    rng = np.random.default_rng(cfg.seed)
    labels = _labels_of(labeled_set)

    def batches(step):
        idx = rng.choice(len(labeled_set), size=min(cfg.batch_size, len(labeled_set)), replace=False)
        return [labeled_set[i].samples for i in idx], labels[idx]

    return _steer(unet, cnn, batches, cfg, frontend, phase=2)


# -- phase 3 -------------------------------------------------------------------

def codec_batch(labeled_set, codec_bank, idx, variants=TRAINING_VARIANTS):
    """All ``variants`` of each selected track, track-major: ``len(idx) * len(variants)`` items."""
    waves, labels = [], []
    for i in idx:
        ex = labeled_set[i]
        entry = require_variants(codec_bank, ex.track_id, variants)
        for v in variants:
            waves.append(entry[v])
            labels.append(float(ex.label))
    return waves, np.array(labels)


def codec_deltas(unet, cnn, examples, codec_bank, variants=TRAINING_VARIANTS,
                 frontend: FrontendConfig = TOY_FRONTEND) -> dict:
    """Cross-codec delta per class (``"ai"``, ``"real"``) on ``examples``."""
    out = {}
    for label, name in ((1, "ai"), (0, "real")):
        group = [e for e in examples if e.label == label]
        if not group:
            continue
        probs = {}
        for v in variants:
            waves = [require_variants(codec_bank, e.track_id, variants)[v] for e in group]
            probs[v] = list(predict_proba(unet, cnn, waves, frontend))
        out[name] = cross_codec_delta(probs, name)
    return out


def phase3_codec_aware(unet: ArtifactUNet, cnn: SegmentCNN, labeled_set, codec_bank, cfg: TrainConfig,
                       heldout=None, heldout_bank=None, frontend: FrontendConfig = TOY_FRONTEND,
                       variants=TRAINING_VARIANTS) -> PhaseResult:
    """Phase-2 objective on batches holding every codec variant of each sampled track."""
    if not labeled_set:
        raise ConfigError("phase 3 needs a non-empty labeled set")
    for ex in labeled_set:
        require_variants(codec_bank, ex.track_id, variants)
    if heldout is not None:
        for ex in heldout:
            require_variants(heldout_bank, ex.track_id, variants)
    rng = np.random.default_rng(cfg.seed)
    before = codec_deltas(unet, cnn, heldout, heldout_bank, variants, frontend) if heldout else {}

    def batches(step):
        idx = rng.choice(len(labeled_set), size=min(cfg.batch_size, len(labeled_set)), replace=False)
        return codec_batch(labeled_set, codec_bank, idx, variants)

    result = _steer(unet, cnn, batches, cfg, frontend, phase=3)
    result.info["items_per_step"] = min(cfg.batch_size, len(labeled_set)) * len(variants)
    if heldout:
        result.info["delta_before"] = before
        result.info["delta_after"] = codec_deltas(unet, cnn, heldout, heldout_bank, variants, frontend)
    return result


# -- channel ablation ----------------------------------------------------------

@dataclass
class AblationRow:
    run: str
    channel: int | None
    f1: float
    delta_f1: float


def channel_mean_maps(features: np.ndarray) -> np.ndarray:
    """Per-channel mean map over a training feature set: ``7 x mels x frames``."""
    features = np.asarray(features)
    if features.ndim != 4 or features.shape[1] != N_CHANNELS or len(features) == 0:
        raise ConfigError(f"expected a non-empty (n, {N_CHANNELS}, mels, frames) feature set, got {features.shape}")
    return features.mean(axis=0)


def ablate_channels(features: np.ndarray, channels, means: np.ndarray) -> np.ndarray:
    out = np.array(features, dtype=np.float64)
    for c in channels:
        if not 0 <= c < N_CHANNELS:
            raise ConfigError(f"channel index must be in 0..{N_CHANNELS - 1}, got {c}")
        out[:, c] = means[c]
    return out


def _f1(cnn, features, labels, tau):
    pred = expit(cnn.forward(features, train=False)) >= tau
    y = np.asarray(labels) > 0.5
    tp, fp = int(np.sum(pred & y)), int(np.sum(pred & ~y))
    fn, tn = int(np.sum(~pred & y)), int(np.sum(~pred & ~y))
    return MetricsBlock.from_counts(tp, fp, tn, fn, threshold=tau).f1


def ablate_channel(cnn: SegmentCNN, features, labels, channel_index: int, means, tau: float = 0.5) -> AblationRow:
    """Replace one channel with its training-set mean map; ΔF1 is ablated minus baseline."""
    if not 0 <= channel_index < N_CHANNELS:
        raise ConfigError(f"channel index must be in 0..{N_CHANNELS - 1}, got {channel_index}")
    base = _f1(cnn, features, labels, tau)
    f1 = _f1(cnn, ablate_channels(features, [channel_index], means), labels, tau)
    return AblationRow(f"ablate:{channel_index}", channel_index, f1, f1 - base)


def ablation_table(cnn: SegmentCNN, features, labels, means, tau: float = 0.5) -> list[AblationRow]:
    """Baseline row plus one row per channel."""
    base = _f1(cnn, features, labels, tau)
    rows = [AblationRow("baseline", None, base, 0.0)]
    rows += [ablate_channel(cnn, features, labels, c, means, tau) for c in range(N_CHANNELS)]
    return rows


def write_records(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")


# -- bounded vs unbounded mask -------------------------------------------------

@dataclass
class MaskVariantStats:
    mask_bound: float
    mean_mask: float
    energy_fraction: float


def mask_statistics(unet: ArtifactUNet, examples, frontend: FrontendConfig = TOY_FRONTEND) -> MaskVariantStats:
    """Mean mask value and residual-to-input energy fraction over ``examples``."""
    X, _ = _spectrogram_batch([e.samples for e in examples], frontend)
    r = unet.forward(X)
    return MaskVariantStats(unet.cfg.mask_bound, float(np.mean(unet.last_mask)),
                            float(np.sum(r ** 2) / np.sum(X ** 2)))


def unbounded_mask_ablation(oracle, labeled_set, phase1_cfg: TrainConfig, head_cfg: TrainConfig,
                            phase2_cfg: TrainConfig, frontend: FrontendConfig = TOY_FRONTEND,
                            seed: int = 0, base_channels: int = 8) -> dict:
    """Train bounded (0.5) and unbounded (1.0) UNets through phases 1-2 and compare their masks."""
    report = {}
    for name, bound in (("bounded", 0.5), ("unbounded", 1.0)):
        unet = ArtifactUNet(UNetConfig(base_channels=base_channels, mask_bound=bound), seed=seed)
        phase1_distill(unet, oracle, phase1_cfg, frontend)
        cnn = SegmentCNN(seed=seed)
        train_classifier(cnn, feature_bank(unet, labeled_set, frontend), _labels_of(labeled_set), head_cfg)
        phase2_steer(unet, cnn, labeled_set, phase2_cfg, frontend)
        report[name] = mask_statistics(unet, labeled_set, frontend)
    return report
