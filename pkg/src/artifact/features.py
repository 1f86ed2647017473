"""Median-filter HPSS and the seven-channel forensic feature tensor.

Channel order is fixed by :data:`CHANNELS`. The transform has a hand-written
backward pass so classifier gradients can reach the residual extractor.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, ShapeError, TooShortError
from .spectral import LOG_EPS, MagnitudeSpectrogram, log_mel, log_mel_backward, mel_filterbank

CHANNELS = ("mel_res", "mel_H", "mel_P", "delta", "delta2", "hp_ratio", "spectral_flux")
N_CHANNELS = len(CHANNELS)
DESCRIPTOR_VERSION = "d103-v1"
DESCRIPTOR_SIZE = 103
N_BANDS = 8


@dataclass
class HpssResult:
    H: MagnitudeSpectrogram
    P: MagnitudeSpectrogram


@dataclass
class FeatureTensor:
    channels: np.ndarray  # 7 x n_mels x frames
    segment_id: str = ""

    def __post_init__(self):
        if self.channels.ndim != 3 or self.channels.shape[0] != N_CHANNELS:
            raise ShapeError(f"feature tensor must be 7 x mels x frames, got {self.channels.shape}")

    @classmethod
    def concatenate(cls, tensors, segment_id=""):
        return cls(np.concatenate([t.channels for t in tensors], axis=2), segment_id)


@dataclass
class Descriptor103:
    values: np.ndarray
    version: str = DESCRIPTOR_VERSION


def median_filter_axis(x: np.ndarray, size: int, axis: int):
    """Running median along ``axis`` with symmetric (edge-repeating) padding.

    Returns ``(filtered, source)`` where ``source`` holds, for every output
    cell, the index along ``axis`` of the input element that was selected.
    """
    if size < 3 or size % 2 == 0:
        raise ConfigError(f"median kernel must be odd and >= 3, got {size}")
    x = np.moveaxis(np.asarray(x, dtype=np.float64), axis, 0)
    n = x.shape[0]
    half = size // 2
    padded = np.pad(np.arange(n), half, mode="symmetric")
    win = padded[np.arange(n)[:, None] + np.arange(size)[None, :]]  # n x size
    vals = x[win]  # n x size x rest
    pos = np.argpartition(vals, half, axis=1)[:, half:half + 1]
    out = np.take_along_axis(vals, pos, axis=1)[:, 0]
    source = np.take_along_axis(np.broadcast_to(win.reshape(n, size, *([1] * (x.ndim - 1))), vals.shape), pos, axis=1)[:, 0]
    return np.moveaxis(out, 0, axis), np.moveaxis(source, 0, axis)


def _route_back(grad: np.ndarray, source: np.ndarray, axis: int) -> np.ndarray:
    """Adjoint of the median gather: scatter ``grad`` onto the selected inputs."""
    g = np.moveaxis(grad, axis, 0)
    s = np.moveaxis(source, axis, 0)
    n = g.shape[0]
    rest = int(np.prod(g.shape[1:]))
    flat = s.reshape(n, rest) * rest + np.arange(rest)[None, :]
    out = np.bincount(flat.ravel(), weights=g.reshape(n, rest).ravel(), minlength=n * rest)
    return np.moveaxis(out.reshape(g.shape), 0, axis)


def _hpss_arrays(mag: np.ndarray, kernel_t: int, kernel_f: int):
    h_med, h_src = median_filter_axis(mag, kernel_t, axis=0)
    p_med, p_src = median_filter_axis(mag, kernel_f, axis=1)
    # ratios are formed after dividing by max(h, p) so tiny magnitudes cannot underflow
    scale = np.maximum(h_med, p_med)
    live = scale > 0
    scale = np.where(live, scale, 1.0)
    hn, pn = h_med / scale, p_med / scale
    den = hn ** 2 + pn ** 2
    mask = np.where(live, hn ** 2 / np.where(live, den, 1.0), 0.5)
    H = mask * mag
    return H, mag - H, (h_src, p_src, hn, pn, den, scale, live, mask)


def _hpss_backward(gH, gP, mag, cache):
    h_src, p_src, hn, pn, den, scale, live, mask = cache
    g = mask * gH + (1.0 - mask) * gP
    g_mask = mag * (gH - gP)
    k = np.where(live, 2.0 * g_mask / (np.where(live, den, 1.0) ** 2 * scale), 0.0)
    g_h = k * hn * pn ** 2
    g_p = -k * pn * hn ** 2
    return g + _route_back(g_h, h_src, 0) + _route_back(g_p, p_src, 1)


def hpss_decompose(mag: MagnitudeSpectrogram, kernel_t: int = 17, kernel_f: int = 17) -> HpssResult:
    """Split a magnitude spectrogram into harmonic and percussive parts.

    Median filtering along time enhances harmonics, along frequency enhances
    transients; a power-2 Wiener mask then partitions ``mag`` so that
    ``H + P == mag`` cell for cell.
    """
    H, P, _ = _hpss_arrays(mag.values, kernel_t, kernel_f)
    wrap = lambda v: MagnitudeSpectrogram(values=v, config=mag.config, sample_rate=mag.sample_rate)
    return HpssResult(H=wrap(H), P=wrap(P))


class ChannelTransform:
    """Residual magnitude (frames x bins) -> 7 x n_mels x frames, with a VJP."""

    def __init__(self, sample_rate: int, n_fft: int, n_mels: int = 128, kernel_t: int = 17, kernel_f: int = 17, eps: float = LOG_EPS):
        if kernel_t % 2 == 0 or kernel_f % 2 == 0 or min(kernel_t, kernel_f) < 3:
            raise ConfigError(f"HPSS kernels must be odd and >= 3, got {kernel_t}x{kernel_f}")
        self.fb = mel_filterbank(sample_rate, n_fft, n_mels)
        self.n_mels = n_mels
        self.kernel_t = kernel_t
        self.kernel_f = kernel_f
        self.eps = eps

    def forward(self, mag: np.ndarray):
        mag = np.asarray(mag, dtype=np.float64)
        n_frames = mag.shape[0]
        if n_frames < 3:
            raise TooShortError(f"need at least 3 frames for second differences, got {n_frames}", duration=n_frames)
        if mag.shape[1] != self.fb.shape[1]:
            raise ShapeError(f"magnitude has {mag.shape[1]} bins, filterbank expects {self.fb.shape[1]}")
        eps = self.eps
        H, P, hcache = _hpss_arrays(mag, self.kernel_t, self.kernel_f)
        mel_res, lin_res = log_mel(mag, self.fb, eps)
        mel_h, lin_h = log_mel(H, self.fb, eps)
        mel_p, lin_p = log_mel(P, self.fb, eps)

        delta = np.zeros_like(mel_res)
        delta[1:] = mel_res[1:] - mel_res[:-1]
        delta2 = np.zeros_like(mel_res)
        delta2[2:] = mel_res[2:] - 2.0 * mel_res[1:-1] + mel_res[:-2]

        sum_h, sum_p = H.sum(axis=1), P.sum(axis=1)
        hp = np.log((sum_h + eps) / (sum_p + eps))

        rise = np.maximum(delta, 0.0)
        rise[0] = 0.0
        flux = np.sqrt(np.sum(rise * rise, axis=1))

        out = np.empty((N_CHANNELS, self.n_mels, n_frames))
        out[0], out[1], out[2] = mel_res.T, mel_h.T, mel_p.T
        out[3], out[4] = delta.T, delta2.T
        out[5] = hp[None, :]
        out[6] = flux[None, :]
        cache = (mag, hcache, lin_res, lin_h, lin_p, sum_h, sum_p, rise, flux)
        return out, cache

    def backward(self, grad: np.ndarray, cache) -> np.ndarray:
        mag, hcache, lin_res, lin_h, lin_p, sum_h, sum_p, rise, flux = cache
        eps = self.eps
        g_res = grad[0].T.copy()
        g_d, g_d2 = grad[3].T, grad[4].T
        g_res[1:] += g_d[1:]
        g_res[:-1] -= g_d[1:]
        g_res[2:] += g_d2[2:]
        g_res[1:-1] -= 2.0 * g_d2[2:]
        g_res[:-2] += g_d2[2:]

        g_flux = grad[6].sum(axis=0)
        safe = np.where(flux > 0, flux, 1.0)
        g_rise = np.where(flux[:, None] > 0, rise / safe[:, None], 0.0) * g_flux[:, None]
        g_res[1:] += g_rise[1:]
        g_res[:-1] -= g_rise[1:]

        g_hp = grad[5].sum(axis=0)
        gH = log_mel_backward(grad[1].T, lin_h, self.fb, eps) + (g_hp / (sum_h + eps))[:, None]
        gP = log_mel_backward(grad[2].T, lin_p, self.fb, eps) - (g_hp / (sum_p + eps))[:, None]
        g_mag = log_mel_backward(g_res, lin_res, self.fb, eps)
        return g_mag + _hpss_backward(gH, gP, mag, hcache)


def compute_channels(residual: MagnitudeSpectrogram, n_mels: int = 128, kernel_t: int = 17, kernel_f: int = 17, segment_id: str = "") -> FeatureTensor:
    tf = ChannelTransform(residual.sample_rate, residual.config.n_fft, n_mels, kernel_t, kernel_f)
    out, _ = tf.forward(residual.values)
    return FeatureTensor(out, segment_id)


def _moments(x: np.ndarray):
    """mean, std, max, skew, excess kurtosis; shape statistics are 0 for constant input."""
    mean = float(np.mean(x))
    std = float(np.std(x))
    if std > 1e-12:
        z = (x - mean) / std
        skew, kurt = float(np.mean(z ** 3)), float(np.mean(z ** 4) - 3.0)
    else:
        skew = kurt = 0.0
    return mean, std, float(np.max(x)), skew, kurt


def _lag1(x: np.ndarray) -> float:
    if len(x) < 2:
        return 0.0
    a, b = x[:-1] - x.mean(), x[1:] - x.mean()
    den = float(np.sum((x - x.mean()) ** 2))
    return float(np.sum(a * b) / den) if den > 1e-12 else 0.0


def band_edges(sample_rate: int, n_bands: int = N_BANDS, f_lo: float = 20.0) -> np.ndarray:
    return np.geomspace(f_lo, sample_rate / 2.0, n_bands + 1)


def descriptor_103(track_channels: FeatureTensor, residual: MagnitudeSpectrogram, kernel_t: int = 17, kernel_f: int = 17, eps: float = LOG_EPS) -> Descriptor103:
    """Fixed-layout 103-entry track descriptor.

    Layout: 7 channel means, 7 channel stds, then for each of 8 log-spaced
    bands (20 Hz .. Nyquist) the log band energy's mean, std, max, skew,
    kurtosis, |frame flux| mean and std, and the fraction of frames where
    the band is the loudest; then 25 HPSS summaries (8 global H/P balance
    stats, 8 per-band harmonic shares, 7 per-channel lag-1 autocorrelations,
    flux mean and std).
    """
    ch = track_channels.channels
    mag = residual.values
    freqs = residual.bin_frequencies()
    edges = band_edges(residual.sample_rate)
    power = mag ** 2

    out = [ch.mean(axis=(1, 2)), ch.std(axis=(1, 2))]

    band_ids = np.clip(np.searchsorted(edges, freqs, side="right") - 1, -1, N_BANDS - 1)
    band_ids[freqs < edges[0]] = -1
    band_energy = np.stack([power[:, band_ids == b].sum(axis=1) for b in range(N_BANDS)], axis=1)
    log_energy = np.log(band_energy + eps)
    loudest = np.argmax(band_energy, axis=1)
    band_stats = []
    for b in range(N_BANDS):
        e = log_energy[:, b]
        d = np.abs(np.diff(e)) if len(e) > 1 else np.zeros(1)
        band_stats.extend(_moments(e))
        band_stats.extend([float(d.mean()), float(d.std()), float(np.mean(loudest == b))])
    out.append(np.asarray(band_stats))

    H, P, _ = _hpss_arrays(mag, kernel_t, kernel_f)
    eh, ep = H ** 2, P ** 2
    hp = ch[5, 0, :]
    hpss = [
        float(np.log((H.sum() + eps) / (P.sum() + eps))),
        float(hp.mean()), float(hp.std()), float(hp.min()), float(hp.max()), float(np.median(hp)),
        float(np.mean(hp > 0)),
        float((eh.sum() + eps) / (eh.sum() + ep.sum() + 2 * eps)),
    ]
    for b in range(N_BANDS):
        sel = band_ids == b
        hb, pb = eh[:, sel].sum(), ep[:, sel].sum()
        hpss.append(float((hb + eps) / (hb + pb + 2 * eps)))
    frame_means = ch.mean(axis=1)
    hpss.extend(_lag1(frame_means[c]) for c in range(N_CHANNELS))
    flux = ch[6, 0, :]
    hpss.extend([float(flux.mean()), float(flux.std())])
    out.append(np.asarray(hpss))

    values = np.concatenate(out)
    assert values.size == DESCRIPTOR_SIZE, values.size
    return Descriptor103(values=values)


# one record per segment: u32 id length, id (utf-8), u32 x3 shape, float32 payload (little-endian)

def write_feature_records(stream: io.BufferedIOBase, tensors) -> int:
    n = 0
    for t in tensors:
        name = t.segment_id.encode("utf-8")
        stream.write(struct.pack("<I", len(name)) + name)
        stream.write(struct.pack("<III", *t.channels.shape))
        stream.write(np.ascontiguousarray(t.channels, dtype="<f4").tobytes())
        n += 1
    return n


def read_feature_records(stream: io.BufferedIOBase) -> list[FeatureTensor]:
    out = []
    while True:
        head = stream.read(4)
        if not head:
            return out
        if len(head) < 4:
            raise FormatError("truncated feature record header")
        (n,) = struct.unpack("<I", head)
        name = stream.read(n)
        shape = struct.unpack("<III", stream.read(12))
        count = int(np.prod(shape))
        buf = stream.read(4 * count)
        if len(name) < n or len(buf) < 4 * count:
            raise FormatError("truncated feature record payload")
        data = np.frombuffer(buf, dtype="<f4").astype(np.float64).reshape(shape)
        out.append(FeatureTensor(data, name.decode("utf-8")))
