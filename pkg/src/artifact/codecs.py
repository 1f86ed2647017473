"""Codec variants through external encoders, simulated codecs, and cross-codec drift.

External tools are driven by command templates with ``{in}``/``{out}``
placeholders; nothing is encoded in-process. ``simulate_codec`` is the
stand-in used by the synthetic training tasks where no encoder exists.
"""

from __future__ import annotations

import json
import logging
import os
import shlex
import shutil
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import audio_io
from .errors import (
    AlignmentError,
    ArtifactError,
    ConfigError,
    EncoderError,
    IncompleteBankError,
    ToolNotFoundError,
)

logger = logging.getLogger(__name__)

VARIANT_NAMES = ("wav", "mp3-128", "mp3-320", "aac-128", "opus-128", "opus-192")
TRAINING_VARIANTS = ("wav", "mp3-128", "aac-128", "opus-128")
ENCODER_DIR_ENV = "ARTIFACT_ENCODER_DIR"

_FFMPEG_DECODE = "ffmpeg -nostdin -loglevel error -y -i {in} -acodec pcm_s16le {out}"


@dataclass(frozen=True)
class CodecVariant:
    name: str
    encode: str = ""
    decode: str = ""
    ext: str = "wav"

    def __post_init__(self):
        if self.name not in VARIANT_NAMES:
            raise ConfigError(f"unknown codec variant {self.name!r}; expected one of {', '.join(VARIANT_NAMES)}")


DEFAULT_VARIANTS = {
    "wav": CodecVariant("wav"),
    "mp3-128": CodecVariant("mp3-128", "ffmpeg -nostdin -loglevel error -y -i {in} -c:a libmp3lame -b:a 128k {out}", _FFMPEG_DECODE, "mp3"),
    "mp3-320": CodecVariant("mp3-320", "ffmpeg -nostdin -loglevel error -y -i {in} -c:a libmp3lame -b:a 320k {out}", _FFMPEG_DECODE, "mp3"),
    "aac-128": CodecVariant("aac-128", "ffmpeg -nostdin -loglevel error -y -i {in} -c:a aac -b:a 128k {out}", _FFMPEG_DECODE, "m4a"),
    "opus-128": CodecVariant("opus-128", "ffmpeg -nostdin -loglevel error -y -i {in} -c:a libopus -b:a 128k {out}", _FFMPEG_DECODE, "opus"),
    "opus-192": CodecVariant("opus-192", "ffmpeg -nostdin -loglevel error -y -i {in} -c:a libopus -b:a 192k {out}", _FFMPEG_DECODE, "opus"),
}


def get_variant(name: str, templates: dict | None = None) -> CodecVariant:
    if name not in VARIANT_NAMES:
        raise ConfigError(f"unknown codec variant {name!r}; expected one of {', '.join(VARIANT_NAMES)}")
    if templates and name in templates:
        return templates[name]
    return DEFAULT_VARIANTS[name]


def load_templates(path) -> dict[str, CodecVariant]:
    """JSON file: ``{variant: {"encode": ..., "decode": ..., "ext": ...}}``."""
    raw = json.loads(Path(path).read_text())
    return {name: CodecVariant(name, spec.get("encode", ""), spec.get("decode", ""), spec.get("ext", "wav")) for name, spec in raw.items()}


def _resolve_tool(tool: str) -> str:
    prefix = os.environ.get(ENCODER_DIR_ENV)
    if prefix:
        cand = Path(prefix) / tool
        if cand.is_file() and os.access(cand, os.X_OK):
            return str(cand)
    found = shutil.which(tool)
    if found is None:
        where = f" (also looked in ${ENCODER_DIR_ENV}={prefix})" if prefix else ""
        raise ToolNotFoundError(f"external tool {tool!r} not found on PATH{where}")
    return found


def run_template(template: str, src, dst) -> None:
    argv = [tok.replace("{in}", str(src)).replace("{out}", str(dst)) for tok in shlex.split(template)]
    if not argv:
        raise ConfigError("empty command template")
    try:
        argv[0] = _resolve_tool(argv[0])
    except ToolNotFoundError as exc:
        raise ToolNotFoundError(f"{exc}; expected command: {template}") from None
    proc = subprocess.run(argv, capture_output=True, text=True)
    if proc.returncode != 0:
        raise EncoderError(
            f"{Path(argv[0]).name} exited with {proc.returncode}: {proc.stderr.strip()[-500:]}",
            returncode=proc.returncode,
            stderr=proc.stderr,
        )


def encode_variant(track, variant: CodecVariant | str, workdir, templates: dict | None = None, track_id: str | None = None) -> audio_io.Waveform:
    """Round-trip ``track`` through ``variant`` and return the normalized decode.

    Files land in ``{workdir}/{variant}/{track_id}.{ext}`` and
    ``{workdir}/{variant}/{track_id}.wav``.
    """
    if isinstance(variant, str):
        variant = get_variant(variant, templates)
    track = Path(track)
    track_id = track_id or track.stem
    if variant.name == "wav" and not variant.encode:
        return audio_io.normalize(audio_io.decode_wav(track))
    out_dir = Path(workdir) / variant.name
    out_dir.mkdir(parents=True, exist_ok=True)
    wav_out = out_dir / f"{track_id}.wav"
    if variant.decode:
        encoded = out_dir / f"{track_id}.{variant.ext}"
        run_template(variant.encode, track, encoded)
        run_template(variant.decode, encoded, wav_out)
    else:
        run_template(variant.encode, track, wav_out)
    if not wav_out.is_file():
        raise EncoderError(f"{variant.name}: encoder reported success but wrote no {wav_out.name}")
    return audio_io.normalize(audio_io.decode_wav(wav_out))


# -- simulated codecs for synthetic training -------------------------------

_SIM_PROFILES = {
    # name: (low-pass cutoff Hz, stop-band gain, quantizer bits)
    "mp3-128": (16000.0, 0.05, 7),
    "mp3-320": (19500.0, 0.05, 10),
    "aac-128": (11000.0, 0.02, 10),
    "opus-128": (20000.0, 0.05, 9),
    "opus-192": (20000.0, 0.05, 11),
}


def simulate_codec(x: np.ndarray, variant: str, sample_rate: int = 44100, seed: int = 0) -> np.ndarray:
    """Cheap lossy-codec stand-in: TPDF-dithered requantization then high-band attenuation."""
    if variant not in VARIANT_NAMES:
        raise ConfigError(f"unknown codec variant {variant!r}")
    if variant == "wav":
        return np.array(x, dtype=np.float64)
    cutoff, gain, bits = _SIM_PROFILES[variant]
    rng = np.random.default_rng(seed)
    step = 2.0 ** (1 - bits)
    dither = (rng.uniform(-0.5, 0.5, len(x)) + rng.uniform(-0.5, 0.5, len(x))) * step
    q = np.round((x + dither) / step) * step
    spec = np.fft.rfft(q)
    f = np.fft.rfftfreq(len(q), 1.0 / sample_rate)
    spec[f > cutoff] *= gain
    return np.clip(np.fft.irfft(spec, n=len(q)), -1.0, 1.0)


def simulated_bank(examples, variants=TRAINING_VARIANTS, sample_rate: int = 44100, identity: bool = False) -> dict:
    """``{track_id: {variant: samples}}``; ``identity`` makes every variant a copy of the source."""
    bank = {}
    for i, ex in enumerate(examples):
        bank[ex.track_id] = {
            v: np.array(ex.samples) if identity else simulate_codec(ex.samples, v, sample_rate, seed=i)
            for v in variants
        }
    return bank


def require_variants(bank: dict, track_id: str, variants=TRAINING_VARIANTS) -> dict:
    entry = bank.get(track_id)
    if entry is None:
        raise IncompleteBankError(track_id, variants[0])
    for v in variants:
        if v not in entry:
            raise IncompleteBankError(track_id, v)
    return entry


# -- drift metric and sweep -------------------------------------------------

def cross_codec_delta(probabilities: dict, class_label: str | None = None) -> float:
    """Spread of mean P(AI) across codecs: ``max_c mean - min_c mean``.

    ``probabilities`` maps codec -> list of track probabilities (same order
    for every codec) or codec -> ``{track_id: prob}``. ``class_label`` is
    informational; callers pass one class's tracks at a time.
    """
    if not probabilities:
        raise ConfigError("no codecs given")
    values = list(probabilities.values())
    if isinstance(values[0], dict):
        keys = set(values[0])
        for codec, v in probabilities.items():
            if set(v) != keys:
                raise AlignmentError(f"codec {codec!r} covers a different track set ({class_label or 'all'})")
        means = [np.mean([v[k] for k in sorted(keys)]) for v in values]
    else:
        n = len(values[0])
        for codec, v in probabilities.items():
            if len(v) != n:
                raise AlignmentError(f"codec {codec!r} has {len(v)} tracks, expected {n} ({class_label or 'all'})")
        means = [np.mean(v) for v in values]
    if any(np.isnan(m) for m in means):
        raise AlignmentError("empty track set")
    return float(max(means) - min(means))


@dataclass
class SweepRow:
    variant: str
    n_ok: int
    n_failed: int
    tpr: float | None
    fpr: float | None
    delta_tpr_pp: float | None
    mean_prob_ai: float | None
    mean_prob_real: float | None
    degenerate: bool = False


@dataclass
class CodecSweepReport:
    rows: list[SweepRow] = field(default_factory=list)
    delta_real: float = 0.0
    delta_ai: float = 0.0
    predictions: dict = field(default_factory=dict)  # variant -> list[PredictionRecord]
    failures: list = field(default_factory=list)  # (variant, track_id, message)

    def table(self) -> list[dict]:
        return [r.__dict__.copy() for r in self.rows]

    def format_table(self) -> str:
        lines = [f"{'Codec':<10s} {'AI TPR':>8s} {'Real FPR':>9s} {'dTPR vs WAV':>12s} {'failed':>7s}"]
        pct = lambda v: "   n/a" if v is None else f"{100 * v:6.2f}%"
        for r in self.rows:
            d = "---" if r.variant == "wav" or r.delta_tpr_pp is None else f"{r.delta_tpr_pp:+.1f} pp"
            lines.append(f"{r.variant:<10s} {pct(r.tpr):>8s} {pct(r.fpr):>9s} {d:>12s} {r.n_failed:>7d}")
        return "\n".join(lines)


def _rate(hits, n):
    return hits / n if n else None


def codec_sweep(scorer, manifest, variants, workdir, templates: dict | None = None, tau: float = 0.5, workers: int = 1) -> CodecSweepReport:
    """Score every manifest track under every codec variant.

    ``scorer`` maps a normalized :class:`~artifact.audio_io.Waveform` to a
    list of segment probabilities. Encoding runs in a pool of ``workers``;
    scoring is sequential in manifest order so the report is stable.
    Per-track failures become ``decode_error`` records instead of aborting.
    """
    from .bench import PredictionRecord, median_verdict

    variants = [get_variant(v, templates) if isinstance(v, str) else v for v in variants]
    jobs = [(v, e) for v in variants for e in manifest]

    def work(job):
        v, e = job
        try:
            return encode_variant(e.path, v, workdir, templates, track_id=e.id), None
        except (ArtifactError, OSError) as exc:
            return None, f"{type(exc).__name__}: {exc}"

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(work, jobs))

    report = CodecSweepReport()
    probs = {}
    for (v, e), (wave, err) in zip(jobs, results):
        preds = report.predictions.setdefault(v.name, [])
        if err is None:
            try:
                seg = scorer(wave)
            except ArtifactError as exc:
                err = f"{type(exc).__name__}: {exc}"
        if err is not None:
            report.failures.append((v.name, e.id, err))
            preds.append(PredictionRecord(id=e.id, segment_probs=[], status="decode_error"))
            continue
        song, verdict = median_verdict(seg, tau)
        preds.append(PredictionRecord(id=e.id, segment_probs=list(seg), song_prob=song, verdict=verdict, status="ok"))
        probs.setdefault(v.name, {})[e.id] = song

    labels = {e.id: e.label for e in manifest}
    wav_tpr = None
    for v in variants:
        ok = [p for p in report.predictions[v.name] if p.status == "ok"]
        ai = [p for p in ok if labels[p.id] == "ai"]
        real = [p for p in ok if labels[p.id] == "real"]
        tpr = _rate(sum(p.verdict == "ai" for p in ai), len(ai))
        fpr = _rate(sum(p.verdict == "ai" for p in real), len(real))
        songs = [p.song_prob for p in ok]
        row = SweepRow(
            variant=v.name,
            n_ok=len(ok),
            n_failed=len(report.predictions[v.name]) - len(ok),
            tpr=tpr,
            fpr=fpr,
            delta_tpr_pp=None,
            mean_prob_ai=float(np.mean([p.song_prob for p in ai])) if ai else None,
            mean_prob_real=float(np.mean([p.song_prob for p in real])) if real else None,
            degenerate=len(songs) > 1 and len(set(songs)) == 1,
        )
        if row.degenerate:
            logger.warning("%s: every track received the same probability %.6f", v.name, songs[0])
        if v.name == "wav":
            wav_tpr = tpr
        report.rows.append(row)
    for row in report.rows:
        if wav_tpr is not None and row.tpr is not None:
            row.delta_tpr_pp = round(100.0 * (row.tpr - wav_tpr), 10)

    common = set.intersection(*(set(p) for p in probs.values())) if len(probs) == len(variants) else set()
    for cls, attr in (("real", "delta_real"), ("ai", "delta_ai")):
        ids = sorted(i for i in common if labels[i] == cls)
        if ids:
            setattr(report, attr, cross_codec_delta({v: [probs[v][i] for i in ids] for v in probs}, cls))
    return report
