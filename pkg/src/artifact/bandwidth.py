"""Effective bandwidth of a residual: the frequency below which 95% of its energy lies."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import UndefinedBandwidthError
from .spectral import MagnitudeSpectrogram, StftConfig, stft

logger = logging.getLogger(__name__)

BANDWIDTH_STFT = StftConfig(n_fft=2048, hop=512)
ENERGY_FRACTION = 0.95
# f* is reported at millihertz resolution so rescaling the input (which
# perturbs the spectrum in the last ulp) cannot change the result
F_STAR_DECIMALS = 3
HUMAN = "human"
HUMAN_WARN_HZ = 800.0


@dataclass
class BandwidthResult:
    f_star: float
    cumulative_fraction_at_f_star: float
    track_id: str = ""
    group: str = HUMAN


def energy_spectrum(residual, sample_rate: int = 44100, cfg: StftConfig = BANDWIDTH_STFT):
    """Frame-averaged |X|^2 per bin and the bin spacing in Hz."""
    if isinstance(residual, MagnitudeSpectrogram):
        mag, sr, n_fft = residual.values, residual.sample_rate, residual.config.n_fft
    else:
        x = np.asarray(residual, dtype=np.float64)
        mag, sr, n_fft = stft(x, cfg, sample_rate).values, sample_rate, cfg.n_fft
    return np.mean(mag.astype(np.float64) ** 2, axis=0), sr / n_fft


def effective_bandwidth(residual, sample_rate: int = 44100, track_id: str = "", group: str = HUMAN,
                        fraction: float = ENERGY_FRACTION, cfg: StftConfig = BANDWIDTH_STFT) -> BandwidthResult:
    """Smallest f with cumulative energy over [0, f] reaching ``fraction`` of the total.

    Bin k covers [(k - 1/2) df, (k + 1/2) df], clipped to [0, Nyquist]; energy
    is taken as uniform inside a bin so the crossing is interpolated linearly.
    """
    e, df = energy_spectrum(residual, sample_rate, cfg)
    total = float(e.sum())
    if not np.isfinite(total) or total <= 0.0:
        raise UndefinedBandwidthError(f"{track_id or 'residual'}: zero total energy")
    k = np.arange(e.size)
    lo = np.maximum((k - 0.5) * df, 0.0)
    hi = np.minimum((k + 0.5) * df, (e.size - 1) * df)
    cum = np.cumsum(e)
    target = fraction * total
    j = int(np.searchsorted(cum, target, side="left"))
    j = min(j, e.size - 1)
    before = cum[j - 1] if j > 0 else 0.0
    share = (target - before) / e[j] if e[j] > 0 else 1.0
    f_star = float(lo[j] + np.clip(share, 0.0, 1.0) * (hi[j] - lo[j]))
    got = (before + e[j] * np.clip(share, 0.0, 1.0)) / total
    return BandwidthResult(round(f_star, F_STAR_DECIMALS), float(max(got, fraction)), track_id, group)


@dataclass
class BandwidthRow:
    label: str
    n: int
    mean_f_star: float


@dataclass
class BandwidthReport:
    rows: list[BandwidthRow]
    results: list[BandwidthResult]
    warnings: list[str] = field(default_factory=list)

    def format_table(self) -> str:
        width = max([len("Generator")] + [len(r.label) for r in self.rows])
        lines = [f"{'Generator':<{width}}  {'Effective BW (Hz)':>17}  {'n':>4}"]
        for r in self.rows:
            lines.append(f"{r.label:<{width}}  {r.mean_f_star:>17,.0f}  {r.n:>4}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "rows": [asdict(r) for r in self.rows],
            "tracks": [asdict(r) for r in self.results],
            "warnings": list(self.warnings),
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["track_id", "group", "f_star", "cumulative_fraction_at_f_star"])
            for r in self.results:
                w.writerow([r.track_id, r.group, repr(r.f_star), repr(r.cumulative_fraction_at_f_star)])


def bandwidth_report(results, groups=None) -> BandwidthReport:
    """Per-group mean f*, ascending, then an AI-average row over all AI tracks and the human row."""
    results = list(results)
    warnings = []
    by_group: dict[str, list[float]] = {}
    for r in results:
        by_group.setdefault(r.group, []).append(r.f_star)
        if r.group == HUMAN and r.f_star < HUMAN_WARN_HZ:
            warnings.append(f"human track {r.track_id or '?'} has f* {r.f_star:.0f} Hz < {HUMAN_WARN_HZ:.0f} Hz; "
                            "check for low-pass or mastering confounders")
    for g in groups or ():
        if g not in by_group:
            warnings.append(f"group {g!r} has no results; omitted")
    for w in warnings:
        logger.warning(w)
    ai_groups = {g: v for g, v in by_group.items() if g != HUMAN}
    rows = sorted((BandwidthRow(g, len(v), float(np.mean(v))) for g, v in ai_groups.items()),
                  key=lambda r: (r.mean_f_star, r.label))
    ai_all = [f for v in ai_groups.values() for f in v]
    if ai_all:
        rows.append(BandwidthRow(f"AI avg (n={len(ai_all)}, {len(ai_groups)} gen.)", len(ai_all), float(np.mean(ai_all))))
    if HUMAN in by_group:
        rows.append(BandwidthRow("Human music", len(by_group[HUMAN]), float(np.mean(by_group[HUMAN]))))
    return BandwidthReport(rows, results, warnings)
