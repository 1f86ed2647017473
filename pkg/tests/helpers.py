"""Stub encoders and small fixtures shared by the codec, CLI and acceptance tests."""

import os
import stat
import sys
from pathlib import Path

import numpy as np

from artifact.audio_io import write_wav
from artifact.bench import ManifestEntry, PredictionRecord, median_verdict, write_jsonl

# criterion number -> PASS/FAIL line, printed by the terminal summary hook in conftest
ACCEPTANCE_LINES: dict[int, str] = {}

COPY_SCRIPT = """#!{python}
import shutil, sys
shutil.copyfile(sys.argv[1], sys.argv[2])
"""

FAIL_SCRIPT = """#!{python}
import sys
sys.stderr.write("stub encoder refused input\\n")
sys.exit(3)
"""

# fails only for inputs whose file name contains the marker
SELECTIVE_SCRIPT = """#!{python}
import shutil, sys
if "{marker}" in sys.argv[1]:
    sys.stderr.write("unsupported stream\\n")
    sys.exit(1)
shutil.copyfile(sys.argv[1], sys.argv[2])
"""


def install_tool(directory, name, body):
    path = Path(directory) / name
    path.write_text(body.format(python=sys.executable, marker="broken"))
    path.chmod(path.stat().st_mode | stat.S_IXUSR | stat.S_IXGRP | stat.S_IXOTH)
    return path


def identity_templates(variants, tool="wavcopy"):
    """Templates that round-trip through a copying stub; encode and decode both copy."""
    from artifact.codecs import CodecVariant

    return {v: CodecVariant(v, f"{tool} {{in}} {{out}}", f"{tool} {{in}} {{out}}", "bin") for v in variants}


def write_corpus(directory, n_ai=3, n_real=3, seconds=0.4, sample_rate=44100, seed=0, broken=()):
    """Toy-style tracks on disk plus a manifest; returns the manifest path."""
    from artifact.toy import clean_clip, mix_with_artifact

    rng = np.random.default_rng(seed)
    directory = Path(directory)
    n = int(seconds * sample_rate)
    records = []
    for i in range(n_ai + n_real):
        label = "ai" if i < n_ai else "real"
        base = clean_clip(rng, n, sample_rate)
        x = mix_with_artifact(rng, base, sample_rate, 0.1)[0] if label == "ai" else base
        tid = f"{label}{i}" + ("-broken" if i in broken else "")
        write_wav(directory / f"{tid}.wav", x, sample_rate)
        records.append({"id": tid, "path": f"{tid}.wav", "label": label,
                        "generator": "toygen" if label == "ai" else "", "subset": f"{label}-set"})
    write_jsonl(directory / "manifest.jsonl", records)
    return directory / "manifest.jsonl"


def environ_with(**extra):
    env = dict(os.environ)
    env.update(extra)
    return env


def brute_auc(ai, real):
    wins = sum((a > r) + 0.5 * (a == r) for a in ai for r in real)
    return wins / (len(ai) * len(real))


def random_bench(rng, n=60, p_missing=0.1):
    manifest, preds = [], []
    for i in range(n):
        label = "ai" if rng.uniform() < 0.5 else "real"
        manifest.append(ManifestEntry(f"t{i}", f"t{i}.wav", label, subset=f"{label}-{i % 3}"))
        if rng.uniform() < p_missing:
            continue
        k = int(rng.integers(1, 6))
        probs = list(np.round(rng.uniform(size=k), 3))
        preds.append(PredictionRecord(f"t{i}", probs, *median_verdict(probs)))
    return manifest, preds


def recount_confusion(manifest, preds, tau):
    """Independent (tp, fp, tn, fn): lower median of segment probabilities, AI when >= tau."""
    labels = {e.id: e.label for e in manifest}
    tp = fp = tn = fn = 0
    for p in preds:
        s = sorted(p.segment_probs)[(len(p.segment_probs) - 1) // 2]
        hit = s >= tau
        if labels[p.id] == "ai":
            tp += hit
            fn += not hit
        else:
            fp += hit
            tn += not hit
    return tp, fp, tn, fn


def energy(m):
    return float(np.sum(m.values ** 2))


def click_train(n, period):
    x = np.zeros(n)
    x[period // 2::period] = 1.0
    return x
