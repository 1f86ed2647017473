"""WAV decoding, mono/rate normalization and fixed-length segmentation."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from math import gcd
from pathlib import Path

import numpy as np
from scipy.signal import firwin, resample_poly

from .errors import EmptyInputError, FormatError, TooShortError, UnsupportedCodecError

logger = logging.getLogger(__name__)

TARGET_RATE = 44100
SEGMENT_SECONDS = 4.0

_WAVE_FORMAT_PCM = 0x0001
_WAVE_FORMAT_IEEE_FLOAT = 0x0003
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE

# half-width of the resampling kernel per unit of max(up, down)
_RESAMPLE_HALF_TAPS = 32


@dataclass
class Waveform:
    """Decoded audio.

    ``samples`` is ``(n,)`` for mono or ``(n, channels)`` for interleaved
    multichannel audio straight out of the decoder.
    """

    samples: np.ndarray
    sample_rate: int
    source_path: str = ""

    @property
    def n_channels(self) -> int:
        return 1 if self.samples.ndim == 1 else self.samples.shape[1]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate


@dataclass
class SegmentSet:
    segments: list[np.ndarray] = field(default_factory=list)
    track_id: str = ""

    def __len__(self):
        return len(self.segments)

    def as_array(self) -> np.ndarray:
        return np.stack(self.segments) if self.segments else np.zeros((0, 0))


def _read_chunks(data: bytes):
    if len(data) < 12:
        raise FormatError(f"file too short for a RIFF header ({len(data)} bytes)")
    riff, _size, wave = struct.unpack("<4sI4s", data[:12])
    if riff != b"RIFF" or wave != b"WAVE":
        raise FormatError("not a RIFF/WAVE file")
    pos = 12
    chunks = {}
    while pos + 8 <= len(data):
        cid, csize = struct.unpack("<4sI", data[pos:pos + 8])
        body = data[pos + 8:pos + 8 + csize]
        chunks.setdefault(cid, (body, csize))
        pos += 8 + csize + (csize & 1)
    return chunks


def _parse_fmt(body: bytes):
    if len(body) < 16:
        raise FormatError("fmt chunk truncated")
    tag, channels, rate, _byte_rate, block_align, bits = struct.unpack("<HHIIHH", body[:16])
    if tag == _WAVE_FORMAT_EXTENSIBLE:
        if len(body) < 26:
            raise FormatError("extensible fmt chunk truncated")
        tag = struct.unpack("<H", body[24:26])[0]
    if channels == 0 or rate == 0:
        raise FormatError("fmt chunk declares zero channels or zero sample rate")
    return tag, channels, rate, block_align, bits


def decode_wav(path) -> Waveform:
    """Decode a RIFF/WAVE file (PCM 16/24/32-bit or 32-bit float).

    Integer PCM is scaled by ``2**(bits-1)`` so full-scale positive 16-bit
    32767 maps to 32767/32768. No clipping happens here.
    """
    path = Path(path)
    data = path.read_bytes()
    chunks = _read_chunks(data)
    if b"fmt " not in chunks:
        raise FormatError(f"{path}: missing fmt chunk")
    if b"data" not in chunks:
        raise FormatError(f"{path}: missing data chunk")
    tag, channels, rate, block_align, bits = _parse_fmt(chunks[b"fmt "][0])
    payload, declared = chunks[b"data"]

    if tag == _WAVE_FORMAT_PCM and bits in (16, 24, 32):
        width = bits // 8
    elif tag == _WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        width = 4
    else:
        raise UnsupportedCodecError(f"{path}: unsupported encoding (format tag {tag:#06x}, {bits} bits)")
    if block_align != width * channels:
        raise FormatError(f"{path}: block_align {block_align} inconsistent with {channels}x{bits}-bit")

    if len(payload) < declared:
        logger.warning("%s: data chunk truncated (%d of %d bytes)", path, len(payload), declared)
    n_frames = len(payload) // block_align
    raw = payload[:n_frames * block_align]

    if tag == _WAVE_FORMAT_IEEE_FLOAT:
        x = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    elif width == 2:
        x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif width == 4:
        x = np.frombuffer(raw, dtype="<i4").astype(np.float64) / 2147483648.0
    else:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        v = np.where(v >= 1 << 23, v - (1 << 24), v)
        x = v.astype(np.float64) / 8388608.0

    if channels > 1:
        x = x.reshape(n_frames, channels)
    return Waveform(samples=x, sample_rate=int(rate), source_path=str(path))


def write_wav(path, samples, sample_rate: int, bits: int = 16) -> None:
    """Write mono or ``(n, channels)`` audio as PCM (16/24/32) or float (``bits=-32``)."""
    x = np.asarray(samples, dtype=np.float64)
    channels = 1 if x.ndim == 1 else x.shape[1]
    if bits == -32:
        tag, width = _WAVE_FORMAT_IEEE_FLOAT, 4
        payload = x.astype("<f4").tobytes()
    elif bits in (16, 24, 32):
        tag, width = _WAVE_FORMAT_PCM, bits // 8
        scale = float(1 << (bits - 1))
        q = np.clip(np.round(x * scale), -scale, scale - 1).astype(np.int64).ravel()
        if bits == 16:
            payload = q.astype("<i2").tobytes()
        elif bits == 32:
            payload = q.astype("<i4").tobytes()
        else:
            u = (q & 0xFFFFFF).astype(np.uint32)
            payload = np.stack([u & 0xFF, (u >> 8) & 0xFF, (u >> 16) & 0xFF], axis=1).astype(np.uint8).tobytes()
    else:
        raise UnsupportedCodecError(f"cannot write {bits}-bit WAV")
    block_align = width * channels
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(payload), b"WAVE",
        b"fmt ", 16, tag, channels, sample_rate, sample_rate * block_align, block_align, width * 8,
        b"data", len(payload),
    )
    Path(path).write_bytes(header + payload)


def resample(x: np.ndarray, src_rate: int, dst_rate: int) -> np.ndarray:
    """Kaiser-windowed sinc polyphase resampling; output has ``ceil(n*up/down)`` samples."""
    if src_rate == dst_rate:
        return np.array(x, dtype=np.float64)
    g = gcd(src_rate, dst_rate)
    up, down = dst_rate // g, src_rate // g
    half = _RESAMPLE_HALF_TAPS * max(up, down)
    h = firwin(2 * half + 1, 1.0 / max(up, down), window=("kaiser", 8.0))
    return resample_poly(np.asarray(x, dtype=np.float64), up, down, window=h)


def normalize(w: Waveform, target_rate: int = TARGET_RATE) -> Waveform:
    """Downmix to mono (channel mean), resample to ``target_rate``, clip to [-1, 1]."""
    if w.n_samples == 0:
        raise EmptyInputError(f"{w.source_path or 'waveform'}: zero-length input")
    x = w.samples if w.samples.ndim == 1 else w.samples.mean(axis=1)
    x = resample(x, w.sample_rate, target_rate)
    return Waveform(samples=np.clip(x, -1.0, 1.0), sample_rate=target_rate, source_path=w.source_path)


def segment(w: Waveform, seg_seconds: float = SEGMENT_SECONDS, track_id: str | None = None) -> SegmentSet:
    """Split into consecutive non-overlapping windows; the incomplete tail is dropped."""
    if w.samples.ndim != 1:
        raise FormatError("segment() expects a normalized mono waveform")
    seg_len = int(round(seg_seconds * w.sample_rate))
    if w.n_samples < seg_len:
        raise TooShortError(
            f"{w.duration:.3f} s is shorter than one {seg_seconds} s segment", duration=w.duration
        )
    n = w.n_samples // seg_len
    segs = [w.samples[i * seg_len:(i + 1) * seg_len].copy() for i in range(n)]
    return SegmentSet(segments=segs, track_id=track_id if track_id is not None else Path(w.source_path).stem)


def load_segments(path, seg_seconds: float = SEGMENT_SECONDS, track_id: str | None = None,
                  target_rate: int = TARGET_RATE) -> SegmentSet:
    return segment(normalize(decode_wav(path), target_rate), seg_seconds, track_id)
