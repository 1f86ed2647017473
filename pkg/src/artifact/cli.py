"""Command-line entry point.

Exit codes: 0 success, 1 the run completed but failed a check (sanity FAIL
under ``--strict``, flagged gradients, diverged or frozen-violating training),
2 the run could not proceed (bad flags, missing files or tools, malformed
inputs).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import audio_io, bandwidth, bench, codecs, training
from .errors import (
    ArtifactError,
    ConfigError,
    DivergenceError,
    FrozenViolationError,
)
from .features import DESCRIPTOR_VERSION, FeatureTensor, descriptor_103, write_feature_records
from .nn.audit import audit
from .nn.models import ArtifactUNet, CnnConfig, SegmentCNN, UNetConfig
from .nn.weights import ModelWeights, load_weights, save_weights
from .pipeline import (
    TOY_FRONTEND,
    Detector,
    FrontendConfig,
    build_cnn,
    build_unet,
    bundle_weights,
    frontend_of,
)
from .spectral import MagnitudeSpectrogram, stft
from .toy import LabeledExample, TeacherOracle, toy_labeled_set

logger = logging.getLogger("artifact")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


class UsageError(ConfigError):
    pass


def _tau(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"tau must be in [0, 1], got {v}")
    return v


def _workers(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"workers must be >= 1, got {v}")
    return v


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0, help="seed for every random choice (default: %(default)s)")
    p.add_argument("--workers", type=_workers, default=os.cpu_count() or 1,
                   help="upper bound for worker pools (default: available CPUs)")
    p.add_argument("--tau", type=_tau, default=0.5, help="decision threshold in [0, 1] (default: %(default)s)")
    p.add_argument("--quiet", action="store_true", help="machine mode: warnings and results only")
    p.add_argument("--strict", action="store_true", help="exit 1 when any check fails")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="artifact", description="Residual-based AI-music forensics toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("features", parents=[common], formatter_class=fmt, help="7-channel features per segment")
    p.add_argument("--in", dest="inputs", nargs="+", required=True, help="input WAV files")
    p.add_argument("--out", required=True, help="output feature-record file")
    p.add_argument("--weights", help="weight bundle with a UNet; omit with --residual-input")
    p.add_argument("--residual-input", action="store_true", help="treat inputs as residual audio (no UNet)")
    p.add_argument("--descriptor", help="also write 103-dim track descriptors as JSON lines here")

    p = sub.add_parser("infer", parents=[common], formatter_class=fmt, help="score tracks")
    p.add_argument("--weights", required=True, help="weight bundle with UNet and CNN")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--in", dest="inputs", nargs="+", help="input WAV files")
    src.add_argument("--manifest", help="line-delimited manifest; every entry is scored")
    p.add_argument("--out", help="write predictions as JSON lines")

    p = sub.add_parser("train", parents=[common], formatter_class=fmt, help="run one training phase")
    p.add_argument("--phase", required=True, choices=["1", "2", "3", "head"],
                   help="1 distill, head classifier, 2 frozen-classifier steering, 3 codec-aware steering")
    p.add_argument("--out", required=True, help="output weight bundle")
    p.add_argument("--weights", help="starting bundle (UNet, and CNN for head)")
    p.add_argument("--cnn-weights", help="bundle holding the frozen CNN (phases 2 and 3)")
    p.add_argument("--manifest", help="labeled tracks; default is the synthetic toy set")
    p.add_argument("--templates", help="codec templates JSON (phase 3 with --manifest)")
    p.add_argument("--workdir", default="codec_work", help="scratch directory for encoded variants")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=None, help="learning rate (phase-specific default)")
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--optimizer", choices=["sgd", "momentum"], default="momentum")
    p.add_argument("--toy-size", type=int, default=48, help="synthetic labeled set size")
    p.add_argument("--curve", help="write the loss curve as JSON lines")

    p = sub.add_parser("bench", parents=[common], formatter_class=fmt, help="evaluate predictions against a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pred", required=True, help="predictions (JSON lines)")
    p.add_argument("--other", action="append", default=[], metavar="NAME=PATH",
                   help="another model's predictions for the dual accounting")
    p.add_argument("--out", default="report.json", help="report path; CSV companions share its stem")
    p.add_argument("--test-only", action="store_true", help="restrict to bench_origin=test")
    p.add_argument("--grid-step", type=float, default=0.01)
    p.add_argument("--pattern", action="append", default=None, help="regex naming hard AI subsets")

    p = sub.add_parser("roc", parents=[common], formatter_class=fmt, help="threshold sweep")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out", required=True, help="ROC CSV")
    p.add_argument("--grid-step", type=float, default=0.01)
    p.add_argument("--max-fpr", type=float, default=0.05)
    p.add_argument("--test-only", action="store_true")

    p = sub.add_parser("sanity", parents=[common], formatter_class=fmt, help="per-subset PASS/FAIL gates")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--test-only", action="store_true")
    p.add_argument("--pattern", action="append", default=None, help="regex naming hard AI subsets")

    p = sub.add_parser("codec-sweep", parents=[common], formatter_class=fmt, help="score tracks under codec round-trips")
    p.add_argument("--manifest", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--variants", nargs="+", default=list(codecs.VARIANT_NAMES), choices=codecs.VARIANT_NAMES)
    p.add_argument("--templates", help="codec templates JSON")
    p.add_argument("--workdir", default="codec_work")
    p.add_argument("--out", help="write the sweep table as JSON")
    p.add_argument("--missing-out", help="write decode failures as prediction JSON lines per variant (suffix .VARIANT.jsonl)")

    p = sub.add_parser("bandwidth", parents=[common], formatter_class=fmt, help="effective bandwidth of residuals")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--in", dest="inputs", nargs="+", help="input WAV files (group 'human')")
    src.add_argument("--manifest", help="manifest; group = generator for AI tracks, 'human' otherwise")
    p.add_argument("--weights", help="bundle with a UNet; omit with --residual-input")
    p.add_argument("--residual-input", action="store_true", help="inputs already are residual audio")
    p.add_argument("--out", help="grouped JSON report")
    p.add_argument("--csv", help="per-track CSV")

    p = sub.add_parser("ablate", parents=[common], formatter_class=fmt, help="replace feature channels by their mean")
    p.add_argument("--weights", required=True)
    p.add_argument("--channel", required=True, help="channel index 0-6, or 'all' for the full table")
    p.add_argument("--manifest", help="bench_origin=train tracks give the means, test tracks are scored")
    p.add_argument("--toy-size", type=int, default=48)
    p.add_argument("--out", help="write rows as JSON lines")

    p = sub.add_parser("gradcheck", parents=[common], formatter_class=fmt, help="finite-difference gradient audit")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--samples", type=int, default=6, help="entries checked per parameter")
    return parser


# -- helpers -------------------------------------------------------------------

def _emit(text: str) -> None:
    sys.stdout.write(text + "\n")


def _load_bundle(path) -> ModelWeights:
    if path is None:
        raise UsageError("a weight bundle is required")
    if not Path(path).is_file():
        raise UsageError(f"weights file not found: {path}")
    return load_weights(path)


def _manifest(path, test_only=False):
    if not Path(path).is_file():
        raise UsageError(f"manifest not found: {path}")
    entries = bench.load_manifest(path)
    return [e for e in entries if e.bench_origin == "test"] if test_only else entries


def _predictions(path, tau):
    if not Path(path).is_file():
        raise UsageError(f"predictions not found: {path}")
    return bench.load_predictions(path, tau)


def _score(detector: Detector, path, track_id: str, tau: float) -> bench.PredictionRecord:
    try:
        probs = detector.score_file(path, track_id)
    except OSError as exc:
        logger.warning("%s: %s", track_id, exc)
        return bench.PredictionRecord(id=track_id, status="missing")
    except ArtifactError as exc:
        logger.warning("%s: %s", track_id, exc)
        return bench.PredictionRecord(id=track_id, status="decode_error")
    song, verdict = bench.median_verdict(probs, tau)
    return bench.PredictionRecord(id=track_id, segment_probs=probs, song_prob=song, verdict=verdict)


def _prediction_json(p: bench.PredictionRecord) -> dict:
    d = {"id": p.id, "segment_probs": list(p.segment_probs), "status": p.status}
    if p.ok:
        d["song_prob"], d["verdict"] = p.song_prob, p.verdict
    return d


def _labeled_from_manifest(entries, frontend: FrontendConfig):
    out = []
    for e in entries:
        segs = audio_io.load_segments(e.path, frontend.seg_seconds, e.id, frontend.sample_rate)
        for k, s in enumerate(segs.segments):
            out.append(LabeledExample(f"{e.id}#{k}", s, int(e.label == "ai")))
    if not out:
        raise ConfigError("manifest yielded no segments")
    return out


def _codec_bank_from_manifest(entries, frontend, templates, workdir):
    bank = {}
    for e in entries:
        per_variant = {}
        for v in codecs.TRAINING_VARIANTS:
            w = codecs.encode_variant(e.path, v, workdir, templates, track_id=e.id)
            per_variant[v] = audio_io.segment(audio_io.normalize(w, frontend.sample_rate), frontend.seg_seconds, e.id).segments
        n = min(len(s) for s in per_variant.values())
        for k in range(n):
            bank[f"{e.id}#{k}"] = {v: segs[k] for v, segs in per_variant.items()}
    return bank


# -- subcommands -----------------------------------------------------------------

def cmd_features(args) -> int:
    if args.weights is None and not args.residual_input:
        raise UsageError("features needs --weights, or --residual-input for precomputed residual audio")
    if args.weights:
        w = _load_bundle(args.weights)
        frontend = frontend_of(w)
        unet = build_unet(w)
    else:
        frontend, unet = FrontendConfig(), None
    transform = frontend.channel_transform()
    tensors, descriptors = [], []
    for path in args.inputs:
        track_id = Path(path).stem
        segs = audio_io.load_segments(path, frontend.seg_seconds, track_id, frontend.sample_rate)
        seg_tensors, residuals = [], []
        for k, s in enumerate(segs.segments):
            spec = stft(s, frontend.stft, frontend.sample_rate)
            if unet is not None:
                r = unet.forward(spec.values.T[None, None])[0, 0].T
                spec = MagnitudeSpectrogram(r, spec.config, spec.sample_rate)
            ch, _ = transform.forward(spec.values)
            seg_tensors.append(FeatureTensor(ch, f"{track_id}#{k}"))
            residuals.append(spec.values)
        tensors.extend(seg_tensors)
        if args.descriptor:
            res = MagnitudeSpectrogram(np.concatenate(residuals), frontend.stft, frontend.sample_rate)
            d = descriptor_103(FeatureTensor.concatenate(seg_tensors, track_id), res, frontend.kernel_t, frontend.kernel_f)
            descriptors.append({"id": track_id, "version": d.version, "values": [float(v) for v in d.values]})
    with open(args.out, "wb") as fh:
        n = write_feature_records(fh, tensors)
    if args.descriptor:
        bench.write_jsonl(args.descriptor, descriptors)
    if not args.quiet:
        _emit(f"wrote {n} feature records to {args.out}" + (f" ({DESCRIPTOR_VERSION} descriptors)" if args.descriptor else ""))
    return EXIT_OK


def cmd_infer(args) -> int:
    detector = Detector.from_weights(_load_bundle(args.weights))
    if args.manifest:
        jobs = [(e.path, e.id) for e in _manifest(args.manifest)]
    else:
        jobs = [(p, Path(p).stem) for p in args.inputs]
    records = [_score(detector, path, tid, args.tau) for path, tid in jobs]
    for r in records:
        if r.ok:
            _emit(f"{r.id}\t{r.song_prob:.6f}\t{r.verdict}")
        else:
            _emit(f"{r.id}\t-\t{r.status}")
    if args.out:
        bench.write_jsonl(args.out, [_prediction_json(r) for r in records])
    return EXIT_OK


_DEFAULT_LR = {"1": 0.05, "head": 0.01, "2": 0.01, "3": 0.01}


def cmd_train(args) -> int:
    phase = args.phase
    if phase in ("2", "3") and not args.cnn_weights:
        raise UsageError(f"train --phase {phase} requires --cnn-weights (the frozen classifier)")
    if phase == "head" and not args.weights:
        raise UsageError("train --phase head requires --weights holding the UNet")
    lr = _DEFAULT_LR[phase] if args.lr is None else args.lr
    cfg = training.TrainConfig(learning_rate=lr, steps=args.steps, batch_size=args.batch_size, seed=args.seed,
                               phase=1 if phase == "head" else int(phase), optimizer=args.optimizer)
    start = _load_bundle(args.weights) if args.weights else None
    frontend = frontend_of(start) if start is not None and "frontend" in start.metadata else TOY_FRONTEND
    unet = build_unet(start) if start is not None and start.subset("unet.") else ArtifactUNet(UNetConfig(), seed=args.seed)
    cnn = build_cnn(start) if start is not None and start.subset("cnn.") else None
    if args.cnn_weights:
        cnn = build_cnn(_load_bundle(args.cnn_weights))

    def labeled():
        if args.manifest:
            return _labeled_from_manifest(_manifest(args.manifest), frontend)
        return toy_labeled_set(args.toy_size, args.seed, n_samples=int(round(frontend.seg_seconds * frontend.sample_rate)))

    if phase == "1":
        if args.manifest:
            raise UsageError("phase 1 distills from the synthetic teacher; --manifest is not supported")
        result = training.phase1_distill(unet, TeacherOracle(seed=args.seed), cfg, frontend)
    elif phase == "head":
        data = labeled()
        cnn = SegmentCNN(CnnConfig(), seed=args.seed)
        feats = training.feature_bank(unet, data, frontend)
        result = training.train_classifier(cnn, feats, [e.label for e in data], cfg)
    elif phase == "2":
        result = training.phase2_steer(unet, cnn, labeled(), cfg, frontend)
    else:
        data = labeled()
        if args.manifest:
            templates = codecs.load_templates(args.templates) if args.templates else None
            bank = _codec_bank_from_manifest(_manifest(args.manifest), frontend, templates, args.workdir)
            data = [e for e in data if e.track_id in bank]
        else:
            bank = codecs.simulated_bank(data, sample_rate=frontend.sample_rate)
        result = training.phase3_codec_aware(unet, cnn, data, bank, cfg, frontend=frontend)
    save_weights(bundle_weights(unet, cnn, frontend), args.out)
    if args.curve:
        training.write_curve(args.curve, result.losses, phase)
    if not args.quiet:
        _emit(f"phase {phase}: loss {result.losses[0]:.6f} -> {result.losses[-1]:.6f} over {len(result.losses)} steps")
    return EXIT_OK


def _bench_inputs(args):
    entries = _manifest(args.manifest)
    preds = _predictions(args.pred, args.tau)
    return entries, preds


def cmd_bench(args) -> int:
    entries, preds = _bench_inputs(args)
    others = {}
    for item in args.other:
        name, sep, path = item.partition("=")
        if not sep:
            raise UsageError(f"--other expects NAME=PATH, got {item!r}")
        others[name] = _predictions(path, args.tau)
    patterns = tuple(args.pattern) if args.pattern else bench.DEFAULT_HARD_PATTERNS
    report = bench.run_bench(entries, preds, args.tau, args.test_only, bench.default_grid(args.grid_step),
                             patterns, others, model_name=Path(args.pred).stem)
    bench.emit_report(report, args.out)
    m = report.overall
    if not args.quiet:
        _emit(f"F1 {m.f1:.4f}  precision {m.precision:.4f}  recall {m.recall:.4f}  FPR {m.fpr:.4f}  "
              f"AUC {'n/a' if m.auc is None else f'{m.auc:.4f}'}  missing {len(report.missing)}")
        _emit(f"sanity: {report.fail_count}/{len(report.sanity)} FAIL")
    return EXIT_FAIL if args.strict and report.fail_count else EXIT_OK


def cmd_roc(args) -> int:
    entries = _manifest(args.manifest, args.test_only)
    preds = [p for p in _predictions(args.pred, args.tau) if p.ok]
    labels = {e.id: e.label for e in entries}
    preds = [p for p in preds if p.id in labels]
    roc = bench.roc_sweep([p.song_prob for p in preds], [labels[p.id] for p in preds],
                          bench.default_grid(args.grid_step), args.max_fpr)
    bench.write_roc_csv(roc, args.out)
    if not args.quiet:
        if roc.operating_tau is None:
            _emit(f"no threshold reaches FPR <= {args.max_fpr:g}")
        else:
            _emit(f"TPR {roc.operating_tpr:.4f} at FPR {roc.operating_fpr:.4f} (tau {roc.operating_tau:g})")
    return EXIT_OK


def cmd_sanity(args) -> int:
    entries, preds = _bench_inputs(args)
    ev = bench.evaluate(entries, preds, args.tau, args.test_only)
    patterns = tuple(args.pattern) if args.pattern else bench.DEFAULT_HARD_PATTERNS
    verdicts, fails = bench.sanity_protocol(ev.subsets, patterns)
    for v in verdicts:
        rate = "n/a" if v.rate is None else f"{100 * v.rate:.2f}%"
        kind = "TPR" if v.cls == "ai" else "FPR"
        _emit(f"{v.result}  {v.subset}  {kind} {rate}  (threshold {100 * v.threshold:.0f}%)")
    _emit(f"{fails}/{len(verdicts)} FAIL")
    return EXIT_FAIL if args.strict and fails else EXIT_OK


def cmd_codec_sweep(args) -> int:
    entries = _manifest(args.manifest)
    detector = Detector.from_weights(_load_bundle(args.weights))
    templates = codecs.load_templates(args.templates) if args.templates else None
    report = codecs.codec_sweep(detector.score_waveform, entries, args.variants, args.workdir, templates,
                                args.tau, args.workers)
    _emit(report.format_table())
    _emit(f"cross-codec delta: real {report.delta_real:.4f}  ai {report.delta_ai:.4f}")
    if args.out:
        Path(args.out).write_text(json.dumps({"rows": report.table(), "delta_real": report.delta_real,
                                              "delta_ai": report.delta_ai,
                                              "failures": [list(f) for f in report.failures]},
                                             indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if args.missing_out:
        for variant, preds in report.predictions.items():
            bench.write_jsonl(f"{args.missing_out}.{variant}.jsonl", [_prediction_json(p) for p in preds])
    return EXIT_FAIL if args.strict and report.failures else EXIT_OK


def cmd_bandwidth(args) -> int:
    if args.weights is None and not args.residual_input:
        raise UsageError("bandwidth needs --weights, or --residual-input for precomputed residual audio")
    if args.manifest:
        jobs = [(e.path, e.id, (e.generator or "ai") if e.label == "ai" else bandwidth.HUMAN)
                for e in _manifest(args.manifest)]
    else:
        jobs = [(p, Path(p).stem, bandwidth.HUMAN) for p in args.inputs]
    detector = Detector.from_weights(_load_bundle(args.weights)) if args.weights else None
    results = []
    for path, tid, group in jobs:
        w = audio_io.normalize(audio_io.decode_wav(path))
        if detector is None:
            results.append(bandwidth.effective_bandwidth(w.samples, w.sample_rate, tid, group))
            continue
        segs = audio_io.segment(w, detector.frontend.seg_seconds, tid).segments
        res = [detector.residual(s) for s in segs]
        spec = MagnitudeSpectrogram(np.concatenate([r.values for r in res]), res[0].config, res[0].sample_rate)
        results.append(bandwidth.effective_bandwidth(spec, track_id=tid, group=group))
    report = bandwidth.bandwidth_report(results)
    _emit(report.format_table())
    if args.out:
        report.write_json(args.out)
    if args.csv:
        report.write_csv(args.csv)
    return EXIT_OK


def cmd_ablate(args) -> int:
    if args.channel == "all":
        channels = None
    else:
        try:
            channels = int(args.channel)
        except ValueError:
            raise UsageError(f"--channel must be 0-6 or 'all', got {args.channel!r}") from None
    w = _load_bundle(args.weights)
    unet, cnn, frontend = build_unet(w), build_cnn(w), frontend_of(w)
    if args.manifest:
        entries = _manifest(args.manifest)
        train = _labeled_from_manifest([e for e in entries if e.bench_origin == "train"], frontend)
        test = _labeled_from_manifest([e for e in entries if e.bench_origin == "test"], frontend)
    else:
        n = int(round(frontend.seg_seconds * frontend.sample_rate))
        train = toy_labeled_set(args.toy_size, args.seed, n_samples=n)
        test = toy_labeled_set(args.toy_size, args.seed + 1, n_samples=n)
    means = training.channel_mean_maps(training.feature_bank(unet, train, frontend))
    feats = training.feature_bank(unet, test, frontend)
    labels = [e.label for e in test]
    if channels is None:
        rows = training.ablation_table(cnn, feats, labels, means, args.tau)
    else:
        base = training.ablation_table(cnn, feats, labels, means, args.tau)[0]
        rows = [base, training.ablate_channel(cnn, feats, labels, channels, means, args.tau)]
    for r in rows:
        _emit(f"{r.run:<10s} F1 {r.f1:.4f}  dF1 {r.delta_f1:+.4f}")
    if args.out:
        training.write_records(args.out, rows)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    reports = audit(tolerance=args.tolerance, samples=args.samples, seed=args.seed)
    failed = False
    for name, rep in reports.items():
        if not args.quiet or not rep.passed:
            _emit(f"[{name}] max rel error {rep.worst():.3e} ({'PASS' if rep.passed else 'FAIL'})")
        failed |= not rep.passed
    return EXIT_FAIL if failed else EXIT_OK


COMMANDS = {
    "features": cmd_features, "infer": cmd_infer, "train": cmd_train, "bench": cmd_bench, "roc": cmd_roc,
    "sanity": cmd_sanity, "codec-sweep": cmd_codec_sweep, "bandwidth": cmd_bandwidth, "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (DivergenceError, FrozenViolationError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_FAIL
    except (ArtifactError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_CONFIG


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
