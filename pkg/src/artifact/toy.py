"""Seeded synthetic audio for the desk-scale training tasks.

A "clean" clip is an amplitude-modulated harmonic tone below ~4 kHz. The
stand-in for generator artifacts is band-limited noise in a high band; its
energy share of the mix is known exactly, which lets the distillation
teacher hand out ground-truth residuals.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .spectral import StftConfig, stft

ARTIFACT_BAND = (9000.0, 13500.0)
MAX_ARTIFACT_FRACTION = 0.25


def band_noise(rng, n, sample_rate, lo, hi):
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / sample_rate)
    spec[(f < lo) | (f > hi)] = 0.0
    x = np.fft.irfft(spec, n=n)
    return x / (np.sqrt(np.mean(x ** 2)) + 1e-12)


def clean_clip(rng, n, sample_rate):
    t = np.arange(n) / sample_rate
    f0 = rng.uniform(110.0, 440.0)
    x = np.zeros(n)
    for k in range(1, 9):
        if f0 * k > 4000:
            break
        x += np.sin(2 * np.pi * f0 * k * t + rng.uniform(0, 2 * np.pi)) / k
    env = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(1.0, 4.0) * t + rng.uniform(0, 2 * np.pi))
    x = x * env
    return 0.4 * x / np.max(np.abs(x))


def artifact_component(rng, n, sample_rate, band=ARTIFACT_BAND):
    return band_noise(rng, n, sample_rate, *band)


def mix_with_artifact(rng, base, sample_rate, fraction):
    """Add an artifact holding ``fraction`` of the mixture energy; returns (mix, artifact)."""
    art = artifact_component(rng, len(base), sample_rate)
    e_base = np.sum(base ** 2)
    art *= np.sqrt(fraction / (1.0 - fraction) * e_base / np.sum(art ** 2))
    mix = base + art
    # cross terms can push the share slightly over; rescale until it holds
    while np.sum(art ** 2) > fraction * np.sum(mix ** 2) and fraction > 0:
        art *= 0.98
        mix = base + art
    return mix, art


@dataclass
class TeacherPair:
    mixture: np.ndarray
    residual_mag: np.ndarray  # frames x bins
    artifact: np.ndarray


@dataclass
class TeacherOracle:
    """Stand-in distillation teacher producing (mixture, ground-truth residual) pairs."""

    n_pairs: int = 64
    seed: int = 7
    n_samples: int = 8192
    sample_rate: int = 44100
    stft_config: StftConfig = field(default_factory=lambda: StftConfig(512, 256))
    fraction_range: tuple = (0.03, 0.2)
    zero_residual: bool = False

    def pairs(self) -> list[TeacherPair]:
        rng = np.random.default_rng(self.seed)
        out = []
        for _ in range(self.n_pairs):
            base = clean_clip(rng, self.n_samples, self.sample_rate)
            frac = min(rng.uniform(*self.fraction_range), MAX_ARTIFACT_FRACTION)
            mix, art = mix_with_artifact(rng, base, self.sample_rate, frac)
            if self.zero_residual:
                art = np.zeros_like(art)
            res = stft(art, self.stft_config, self.sample_rate).values
            out.append(TeacherPair(mixture=mix, residual_mag=res, artifact=art))
        return out


@dataclass
class LabeledExample:
    track_id: str
    samples: np.ndarray
    label: int  # 1 = ai, 0 = real


def toy_labeled_set(n: int, seed: int, n_samples: int = 8192, sample_rate: int = 44100, fraction=(0.05, 0.15)):
    """Balanced set: AI clips carry a high-band artifact, real clips are clean."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        label = i % 2
        base = clean_clip(rng, n_samples, sample_rate)
        x = mix_with_artifact(rng, base, sample_rate, rng.uniform(*fraction))[0] if label else base
        out.append(LabeledExample(track_id=f"toy{seed}-{i:04d}", samples=x, label=label))
    return out
