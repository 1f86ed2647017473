"""STFT / mel front-end with explicit adjoints for the training losses.

Every transform that sits inside a training objective has a matching
``*_backward`` (vector-Jacobian product) so gradients can be chained by hand.
Spectrogram arrays are laid out ``frames x bins``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError, ShapeError, TooShortError

LOG_EPS = 1e-6
LOSS_LOG_EPS = 1e-5
MULTIRES_FFTS = (512, 1024, 2048)


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 2048
    hop: int = 512

    def __post_init__(self):
        if self.n_fft < 2 or self.n_fft & (self.n_fft - 1):
            raise ConfigError(f"n_fft must be a power of two, got {self.n_fft}")
        if not 0 < self.hop <= self.n_fft:
            raise ConfigError(f"hop must be in (0, n_fft], got {self.hop}")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1


@dataclass
class MagnitudeSpectrogram:
    values: np.ndarray  # frames x bins, non-negative
    config: StftConfig
    sample_rate: int
    phase: np.ndarray | None = None  # unit-modulus complex, same shape as values

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    def bin_frequencies(self) -> np.ndarray:
        return np.arange(self.config.n_bins) * self.sample_rate / self.config.n_fft


@dataclass
class MelSpectrogram:
    values: np.ndarray  # frames x n_mels, log-compressed
    n_mels: int


@lru_cache(maxsize=32)
def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    w.setflags(write=False)
    return w


@lru_cache(maxsize=64)
def frame_index(n_samples: int, n_fft: int, hop: int) -> np.ndarray:
    """Source-sample index of every (frame, tap) of a centered, reflect-padded STFT.

    Padding is folded into the index map so the same array serves the
    forward gather and the adjoint scatter-add.
    """
    pad = n_fft // 2
    if n_samples <= pad:
        raise TooShortError(f"{n_samples} samples cannot be reflect-padded by {pad}", duration=n_samples)
    src = np.pad(np.arange(n_samples), pad, mode="reflect")
    n_frames = 1 + (len(src) - n_fft) // hop
    idx = src[np.arange(n_frames)[:, None] * hop + np.arange(n_fft)[None, :]]
    idx.setflags(write=False)
    return idx


def stft_complex(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Complex STFT, ``frames x bins``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < cfg.n_fft:
        raise TooShortError(f"need at least n_fft={cfg.n_fft} samples, got {x.shape[-1]}", duration=x.shape[-1])
    idx = frame_index(x.shape[-1], cfg.n_fft, cfg.hop)
    return np.fft.rfft(x[..., idx] * hann(cfg.n_fft), axis=-1)


def stft_complex_backward(grad: np.ndarray, cfg: StftConfig, n_samples: int) -> np.ndarray:
    """Adjoint of :func:`stft_complex`.

    ``grad`` packs dL/dRe + 1j*dL/dIm per cell; returns dL/dx.
    """
    n = cfg.n_fft
    y = np.array(grad, dtype=np.complex128)
    y[..., 1:n // 2] *= 0.5
    frames_grad = n * np.fft.irfft(y, n=n, axis=-1) * hann(n)
    idx = frame_index(n_samples, n, cfg.hop)
    return np.bincount(idx.ravel(), weights=frames_grad.ravel(), minlength=n_samples)


def stft(samples, cfg: StftConfig | None = None, sample_rate: int = 44100) -> MagnitudeSpectrogram:
    cfg = cfg or StftConfig()
    spec = stft_complex(samples, cfg)
    mag = np.abs(spec)
    phase = np.where(mag > 0, spec / np.where(mag > 0, mag, 1.0), 1.0 + 0j)
    return MagnitudeSpectrogram(values=mag, config=cfg, sample_rate=sample_rate, phase=phase)


@lru_cache(maxsize=64)
def _ola_envelope(n_frames: int, n_fft: int, hop: int) -> np.ndarray:
    w2 = hann(n_fft) ** 2
    env = np.zeros((n_frames - 1) * hop + n_fft)
    for f in range(n_frames):
        env[f * hop:f * hop + n_fft] += w2
    env.setflags(write=False)
    return env


def _inv_envelope(n_frames: int, cfg: StftConfig) -> np.ndarray:
    env = _ola_envelope(n_frames, cfg.n_fft, cfg.hop)
    return np.where(env > 1e-10, 1.0 / np.where(env > 1e-10, env, 1.0), 0.0)


def istft(spec: np.ndarray, cfg: StftConfig, length: int) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft_complex` (``frames x bins`` input)."""
    n, hop = cfg.n_fft, cfg.hop
    n_frames = spec.shape[0]
    frames = np.fft.irfft(spec, n=n, axis=-1) * hann(n)
    buf = np.zeros((n_frames - 1) * hop + n)
    for f in range(n_frames):
        buf[f * hop:f * hop + n] += frames[f]
    buf *= _inv_envelope(n_frames, cfg)
    return buf[n // 2:n // 2 + length]


def istft_backward(grad: np.ndarray, cfg: StftConfig, n_frames: int) -> np.ndarray:
    """Adjoint of :func:`istft`: returns dL/dRe + 1j*dL/dIm for each spectrum cell."""
    n, hop = cfg.n_fft, cfg.hop
    buf = np.zeros((n_frames - 1) * hop + n)
    buf[n // 2:n // 2 + len(grad)] = grad
    buf *= _inv_envelope(n_frames, cfg)
    idx = np.arange(n_frames)[:, None] * hop + np.arange(n)[None, :]
    g = np.fft.rfft(buf[idx] * hann(n), axis=-1) * (2.0 / n)
    g[:, 0] = g[:, 0].real * 0.5
    if n % 2 == 0:
        g[:, -1] = g[:, -1].real * 0.5
    return g


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=32)
def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int = 128, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-mel filterbank, ``n_mels x bins``, peak weight 1."""
    n_bins = n_fft // 2 + 1
    if n_mels < 1 or n_mels > n_bins:
        raise ConfigError(f"n_mels={n_mels} must be in [1, {n_bins}] for n_fft={n_fft}")
    fmax = sample_rate / 2.0 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_bins) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


def log_mel(mag: np.ndarray, fb: np.ndarray, eps: float = LOG_EPS):
    """``log(mag @ fb.T + eps)``; also returns the linear mel energies for the backward pass."""
    linear = mag @ fb.T
    return np.log(linear + eps), linear


def log_mel_backward(grad: np.ndarray, linear: np.ndarray, fb: np.ndarray, eps: float = LOG_EPS) -> np.ndarray:
    return (grad / (linear + eps)) @ fb


def mel_project(mag: MagnitudeSpectrogram, n_mels: int = 128, eps: float = LOG_EPS) -> MelSpectrogram:
    fb = mel_filterbank(mag.sample_rate, mag.config.n_fft, n_mels)
    out, _ = log_mel(mag.values, fb, eps)
    return MelSpectrogram(values=out, n_mels=n_mels)


def _spectral_terms(a: np.ndarray, b: np.ndarray, cfg: StftConfig, need_grad: bool):
    A = stft_complex(a, cfg)
    B = stft_complex(b, cfg)
    ma, mb = np.abs(A), np.abs(B)
    d = ma - mb
    nd = np.sqrt(np.sum(d * d))
    den = np.sqrt(0.5 * (np.sum(ma * ma) + np.sum(mb * mb)) + 1e-20)
    sc = nd / den
    la, lb = np.log(ma + LOSS_LOG_EPS), np.log(mb + LOSS_LOG_EPS)
    lm = np.mean(np.abs(la - lb))
    if not need_grad:
        return sc + lm, None
    g_mag = -nd * ma / (2.0 * den ** 3)
    if nd > 0:
        g_mag = g_mag + d / (nd * den)
    g_mag = g_mag + np.sign(la - lb) / (ma + LOSS_LOG_EPS) / ma.size
    unit = np.where(ma > 0, A / np.where(ma > 0, ma, 1.0), 0.0)
    return sc + lm, stft_complex_backward(g_mag * unit, cfg, len(a))


def multires_stft_loss(a, b, ffts=MULTIRES_FFTS, return_grad: bool = False):
    """Multi-resolution STFT loss plus time-domain L1.

    For each ``n_fft`` (hop ``n_fft/4``): spectral convergence, normalised by
    the RMS of both magnitude norms so it is symmetric in ``(a, b)``, plus
    the mean absolute log-magnitude difference. With ``return_grad`` the
    gradient with respect to ``a`` is returned as well.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    total = float(np.mean(np.abs(diff)))
    grad = np.sign(diff) / diff.size if return_grad else None
    for n_fft in ffts:
        term, g = _spectral_terms(a, b, StftConfig(n_fft, n_fft // 4), return_grad)
        total += float(term)
        if return_grad:
            grad = grad + g
    return (total, grad) if return_grad else total
