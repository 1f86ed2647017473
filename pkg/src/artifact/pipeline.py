"""End-to-end scoring: waveform segment -> residual -> features -> P(AI)."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit

from . import audio_io
from .errors import ConfigError, NoSegmentsError
from .features import ChannelTransform, FeatureTensor
from .nn.models import (
    ArtifactUNet,
    SegmentCNN,
    cnn_config_from_params,
    config_dict,
    load_state,
    unet_config_from_params,
)
from .nn.weights import ModelWeights
from .spectral import MagnitudeSpectrogram, StftConfig, stft

logger = logging.getLogger(__name__)

THRESHOLD = 0.5


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = 44100
    n_fft: int = 2048
    hop: int = 512
    n_mels: int = 128
    kernel_t: int = 17
    kernel_f: int = 17
    seg_seconds: float = 4.0

    @property
    def stft(self) -> StftConfig:
        return StftConfig(self.n_fft, self.hop)

    def channel_transform(self) -> ChannelTransform:
        return ChannelTransform(self.sample_rate, self.n_fft, self.n_mels, self.kernel_t, self.kernel_f)

    @classmethod
    def from_dict(cls, d: dict) -> "FrontendConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


# desk-scale front-end used by the synthetic training tasks
TOY_FRONTEND = FrontendConfig(sample_rate=44100, n_fft=512, hop=256, n_mels=32, kernel_t=9, kernel_f=9, seg_seconds=8192 / 44100)


def bundle_weights(unet: ArtifactUNet | None, cnn: SegmentCNN | None, frontend: FrontendConfig) -> ModelWeights:
    params = {}
    meta = {"frontend": asdict(frontend)}
    if unet is not None:
        params.update({k: np.array(v) for k, v in unet.state_dict("unet.").items()})
        meta["unet"] = config_dict(unet.cfg)
    if cnn is not None:
        params.update({k: np.array(v) for k, v in cnn.state_dict("cnn.").items()})
        meta["cnn"] = config_dict(cnn.cfg)
    w = ModelWeights(params=params, metadata=meta)
    w.metadata["config_hash"] = w.config_hash()
    return w


def build_unet(w: ModelWeights) -> ArtifactUNet:
    bound = w.metadata.get("unet", {}).get("mask_bound", 0.5)
    net = ArtifactUNet(unet_config_from_params(w.params, mask_bound=bound))
    load_state(net, w.params, "unet.")
    return net


def build_cnn(w: ModelWeights) -> SegmentCNN:
    net = SegmentCNN(cnn_config_from_params(w.params))
    load_state(net, w.params, "cnn.")
    return net


def frontend_of(w: ModelWeights) -> FrontendConfig:
    return FrontendConfig.from_dict(w.metadata.get("frontend", {}))


class Detector:
    """Inference wrapper over a UNet + classifier weight bundle.

    Holds per-layer forward caches, so use one instance per worker.
    """

    def __init__(self, unet: ArtifactUNet, cnn: SegmentCNN, frontend: FrontendConfig = FrontendConfig(), dtype=np.float32):
        self.unet, self.cnn, self.frontend, self.dtype = unet, cnn, frontend, dtype
        self.transform = frontend.channel_transform()

    @classmethod
    def from_weights(cls, w: ModelWeights, dtype=np.float32) -> "Detector":
        if not w.subset("unet.") or not w.subset("cnn."):
            raise ConfigError("weight bundle needs both unet.* and cnn.* entries for inference")
        return cls(build_unet(w), build_cnn(w), frontend_of(w), dtype)

    def residual(self, samples: np.ndarray) -> MagnitudeSpectrogram:
        spec = stft(samples, self.frontend.stft, self.frontend.sample_rate)
        X = spec.values.T[None, None].astype(self.dtype)
        r = self.unet.forward(X)[0, 0].T.astype(np.float64)
        return MagnitudeSpectrogram(values=r, config=spec.config, sample_rate=spec.sample_rate, phase=spec.phase)

    def features(self, samples: np.ndarray, segment_id: str = "") -> FeatureTensor:
        out, _ = self.transform.forward(self.residual(samples).values)
        return FeatureTensor(out, segment_id)

    def segment_probs(self, segments) -> list[float]:
        probs = []
        for seg in segments:
            f = self.features(seg).channels[None].astype(self.dtype)
            probs.append(float(expit(np.float64(self.cnn.forward(f)[0]))))
        return probs

    def score_waveform(self, w: audio_io.Waveform, track_id: str = "") -> list[float]:
        w = audio_io.normalize(w, self.frontend.sample_rate)
        segs = audio_io.segment(w, self.frontend.seg_seconds, track_id)
        if not len(segs):
            raise NoSegmentsError(f"{track_id}: no segments")
        return self.segment_probs(segs.segments)

    def score_file(self, path, track_id: str = "") -> list[float]:
        return self.score_waveform(audio_io.decode_wav(path), track_id)

