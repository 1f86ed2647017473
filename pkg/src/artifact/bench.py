"""Manifest-driven evaluation: verdicts, metrics, ROC, sanity gates, imputation accounting."""

from __future__ import annotations

import csv
import json
import logging
import re
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import AlignmentError, ConfigError, NoSegmentsError, UndefinedAUCError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "abr-1"
LABELS = ("ai", "real")
STATUSES = ("ok", "missing", "decode_error")
AI_TPR_MIN = Fraction(9, 10)
HARD_AI_TPR_MIN = Fraction(6, 10)
REAL_FPR_MAX = Fraction(5, 100)
DEFAULT_HARD_PATTERNS = (r"stable[\s_-]*audio",)


@dataclass
class ManifestEntry:
    id: str
    path: str
    label: str
    generator: str = ""
    source_group: str = ""
    bench_origin: str = "test"
    subset: str = ""

    def __post_init__(self):
        if self.label not in LABELS:
            raise ConfigError(f"{self.id}: label must be 'ai' or 'real', got {self.label!r}")
        if self.bench_origin not in ("train", "test"):
            raise ConfigError(f"{self.id}: bench_origin must be 'train' or 'test', got {self.bench_origin!r}")


@dataclass
class PredictionRecord:
    id: str
    segment_probs: list = field(default_factory=list)
    song_prob: float | None = None
    verdict: str | None = None
    status: str = "ok"

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ConfigError(f"{self.id}: unknown status {self.status!r}")

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def _read_jsonl(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}:{n}: invalid JSON ({exc.msg})") from None
    return out


def load_manifest(path) -> list[ManifestEntry]:
    entries = []
    seen = set()
    base = Path(path).parent
    for rec in _read_jsonl(path):
        try:
            e = ManifestEntry(**{k: rec[k] for k in rec if k in ManifestEntry.__dataclass_fields__})
        except TypeError as exc:
            raise ConfigError(f"{path}: bad manifest record {rec!r}: {exc}") from None
        if e.id in seen:
            raise ConfigError(f"{path}: duplicate id {e.id!r}")
        seen.add(e.id)
        if e.path and not Path(e.path).is_absolute():
            e.path = str(base / e.path)
        entries.append(e)
    return entries


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def median_verdict(segment_probs, tau: float = 0.5):
    """Lower median of the segment probabilities; ``ai`` iff median >= tau."""
    if len(segment_probs) == 0:
        raise NoSegmentsError("no segment probabilities")
    s = sorted(float(p) for p in segment_probs)
    med = s[(len(s) - 1) // 2]
    return med, ("ai" if med >= tau else "real")


def load_predictions(path, tau: float = 0.5) -> list[PredictionRecord]:
    out = []
    for rec in _read_jsonl(path):
        status = rec.get("status", "ok")
        probs = [float(p) for p in rec.get("segment_probs", [])]
        if status == "ok" and not probs:
            status = "missing"
        p = PredictionRecord(id=str(rec["id"]), segment_probs=probs, status=status)
        if p.ok:
            p.song_prob, p.verdict = median_verdict(probs, tau)
        out.append(p)
    return out


def prediction_dicts(records) -> list[dict]:
    return [{"id": r.id, "segment_probs": list(r.segment_probs), "status": r.status} for r in records]


@dataclass
class MetricsBlock:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    fpr: float = 0.0
    auc: float | None = None
    threshold: float = 0.5

    @classmethod
    def from_counts(cls, tp, fp, tn, fn, threshold=0.5, auc=None) -> "MetricsBlock":
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        fpr = fp / (fp + tn) if fp + tn else 0.0
        return cls(tp, fp, tn, fn, precision, recall, f1, fpr, auc, threshold)

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def fpr_exact(self) -> Fraction:
        return Fraction(self.fp, self.fp + self.tn) if self.fp + self.tn else Fraction(0)

    def tpr_exact(self) -> Fraction:
        return Fraction(self.tp, self.tp + self.fn) if self.tp + self.fn else Fraction(0)


def f1_score(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


def auc(scores_ai, scores_real) -> float:
    """Mann-Whitney AUC: P(score_ai > score_real) with ties counted as 1/2."""
    a = np.asarray(scores_ai, dtype=np.float64)
    r = np.asarray(scores_real, dtype=np.float64)
    if a.size == 0 or r.size == 0:
        raise UndefinedAUCError("AUC needs at least one score in each class")
    ranks = rankdata(np.concatenate([a, r]))
    u = ranks[:a.size].sum() - a.size * (a.size + 1) / 2.0
    return float(u / (a.size * r.size))


def _confusion(records, labels, tau):
    tp = fp = tn = fn = 0
    for r in records:
        ai = r.song_prob >= tau
        if labels[r.id] == "ai":
            tp, fn = tp + ai, fn + (not ai)
        else:
            fp, tn = fp + ai, tn + (not ai)
    return tp, fp, tn, fn


def _block(records, labels, tau):
    ai = [r.song_prob for r in records if labels[r.id] == "ai"]
    real = [r.song_prob for r in records if labels[r.id] == "real"]
    a = auc(ai, real) if ai and real else None
    return MetricsBlock.from_counts(*_confusion(records, labels, tau), threshold=tau, auc=a)


@dataclass
class SubsetMetrics:
    subset: str
    cls: str
    n_total: int
    n_ok: int
    metrics: MetricsBlock

    @property
    def rate(self) -> Fraction | None:
        if self.n_ok == 0:
            return None
        return self.metrics.tpr_exact() if self.cls == "ai" else self.metrics.fpr_exact()


@dataclass
class Evaluation:
    overall: MetricsBlock
    subsets: list[SubsetMetrics]
    missing: list[str]


def align(manifest, predictions) -> dict[str, PredictionRecord]:
    ids = {e.id for e in manifest}
    by_id = {}
    for p in predictions:
        if p.id not in ids:
            raise AlignmentError(f"prediction for unknown id {p.id!r}")
        if p.id in by_id:
            raise AlignmentError(f"duplicate prediction for id {p.id!r}")
        by_id[p.id] = p
    for e in manifest:
        by_id.setdefault(e.id, PredictionRecord(id=e.id, status="missing"))
    return by_id


def _rethreshold(p: PredictionRecord, tau: float) -> PredictionRecord:
    if p.ok and p.song_prob is None:
        p.song_prob, p.verdict = median_verdict(p.segment_probs, tau)
    return p


def evaluate(manifest, predictions, tau: float = 0.5, test_only: bool = False) -> Evaluation:
    """Confusion counts and metrics over status-ok records, overall and per subset."""
    entries = [e for e in manifest if e.bench_origin == "test"] if test_only else list(manifest)
    by_id = align(manifest, predictions)
    labels = {e.id: e.label for e in entries}
    ok = [_rethreshold(by_id[e.id], tau) for e in entries if by_id[e.id].ok]
    missing = sorted(e.id for e in entries if not by_id[e.id].ok)
    subsets = []
    for name in sorted({e.subset for e in entries if e.subset}):
        members = [e for e in entries if e.subset == name]
        classes = {e.label for e in members}
        cls = members[0].label if len(classes) == 1 else "mixed"
        sub_ok = [by_id[e.id] for e in members if by_id[e.id].ok]
        subsets.append(SubsetMetrics(name, cls, len(members), len(sub_ok), _block(sub_ok, labels, tau)))
    return Evaluation(overall=_block(ok, labels, tau), subsets=subsets, missing=missing)


# -- ROC --------------------------------------------------------------------

@dataclass
class RocPoint:
    tau: float
    fpr: float
    tpr: float
    f1: float


@dataclass
class RocResult:
    points: list[RocPoint]
    operating_tau: float | None
    operating_tpr: float | None
    operating_fpr: float | None
    max_fpr: float = 0.05

    def f1_range(self, lo: float, hi: float):
        vals = [p.f1 for p in self.points if lo <= p.tau <= hi]
        return (min(vals), max(vals)) if vals else (None, None)


def default_grid(step: float = 0.01):
    n = int(round(1.0 / step))
    return [round(i * step, 10) for i in range(n + 1)]


def roc_sweep(scores, labels, grid=None, max_fpr: float = 0.05) -> RocResult:
    """TPR/FPR/F1 at each threshold (AI iff score >= tau) plus the best TPR with FPR <= max_fpr."""
    grid = list(default_grid() if grid is None else grid)
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ConfigError("threshold grid must be sorted ascending")
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray([1 if (lab == "ai" or lab == 1 or lab is True) else 0 for lab in labels])
    n_pos, n_neg = int(y.sum()), int((1 - y).sum())
    points = []
    for tau in grid:
        pred = s >= tau
        tp = int(np.sum(pred & (y == 1)))
        fp = int(np.sum(pred & (y == 0)))
        m = MetricsBlock.from_counts(tp, fp, n_neg - fp, n_pos - tp, threshold=tau)
        points.append(RocPoint(float(tau), m.fpr, m.recall, m.f1))
    feasible = [p for p in points if p.fpr <= max_fpr]
    if feasible:
        best = max(feasible, key=lambda p: (p.tpr, -p.fpr, p.tau))
        return RocResult(points, best.tau, best.tpr, best.fpr, max_fpr)
    return RocResult(points, None, None, None, max_fpr)


# -- sanity protocol ----------------------------------------------------------

@dataclass
class SanityVerdict:
    subset: str
    cls: str
    rate: float | None
    threshold: float
    result: str


def sanity_protocol(subsets, hard_patterns=DEFAULT_HARD_PATTERNS):
    """Per-subset PASS/FAIL gates; returns ``(verdicts, fail_count)``.

    ``subsets`` holds :class:`SubsetMetrics` or ``(name, cls, rate)`` tuples.
    AI subsets pass at TPR >= 90% (>= 60% when the name matches one of
    ``hard_patterns``); real subsets pass at FPR <= 5%. A subset without a
    rate fails.
    """
    regexes = [re.compile(p, re.IGNORECASE) for p in hard_patterns]
    verdicts = []
    for s in subsets:
        if isinstance(s, SubsetMetrics):
            name, cls, rate = s.subset, s.cls, s.rate
        else:
            name, cls, rate = s
        if cls == "ai":
            thr = HARD_AI_TPR_MIN if any(r.search(name) for r in regexes) else AI_TPR_MIN
            ok = rate is not None and _as_fraction(rate) >= thr
        elif cls == "real":
            thr = REAL_FPR_MAX
            ok = rate is not None and _as_fraction(rate) <= thr
        else:
            raise ConfigError(f"subset {name!r} is not tagged ai or real (got {cls!r})")
        verdicts.append(SanityVerdict(name, cls, None if rate is None else float(rate), float(thr), "PASS" if ok else "FAIL"))
    return verdicts, sum(v.result == "FAIL" for v in verdicts)


def _as_fraction(rate) -> Fraction:
    return rate if isinstance(rate, Fraction) else Fraction(str(rate))


# -- dual imputation accounting ----------------------------------------------

@dataclass
class ImputationAccounting:
    accounting: str  # "A_exclude" | "B_impute"
    n_total: int
    metrics: MetricsBlock
    n_imputed_real: int = 0
    n_imputed_ai: int = 0


def dual_accounting(manifest, predictions_by_model: dict, tau: float = 0.5) -> dict:
    """Both accountings per model.

    A evaluates every model on the ids that are ok for *all* models. B keeps
    the full manifest as denominator and counts a model's missing real
    tracks as false positives and missing AI tracks as false negatives.
    """
    labels = {e.id: e.label for e in manifest}
    aligned = {m: align(manifest, preds) for m, preds in predictions_by_model.items()}
    common = set(labels)
    for by_id in aligned.values():
        common &= {i for i, p in by_id.items() if p.ok}
    out = {}
    for model, by_id in aligned.items():
        ok_common = [_rethreshold(by_id[i], tau) for i in sorted(common)]
        a = ImputationAccounting("A_exclude", len(ok_common), _block(ok_common, labels, tau))
        ok_all = [_rethreshold(p, tau) for i, p in sorted(by_id.items()) if p.ok]
        tp, fp, tn, fn = _confusion(ok_all, labels, tau)
        miss_real = sum(1 for i, p in by_id.items() if not p.ok and labels[i] == "real")
        miss_ai = sum(1 for i, p in by_id.items() if not p.ok and labels[i] == "ai")
        ai_scores = [p.song_prob for p in ok_all if labels[p.id] == "ai"]
        real_scores = [p.song_prob for p in ok_all if labels[p.id] == "real"]
        b_auc = auc(ai_scores, real_scores) if ai_scores and real_scores else None
        b = ImputationAccounting(
            "B_impute", len(labels),
            MetricsBlock.from_counts(tp, fp + miss_real, tn, fn + miss_ai, threshold=tau, auc=b_auc),
            n_imputed_real=miss_real, n_imputed_ai=miss_ai,
        )
        out[model] = (a, b)
    return out


# -- report -------------------------------------------------------------------

@dataclass
class BenchReport:
    config: dict
    overall: MetricsBlock
    subsets: list[SubsetMetrics]
    sanity: list[SanityVerdict]
    fail_count: int
    roc: RocResult | None
    accountings: dict
    missing: list[str]
    schema: str = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema": self.schema,
            "config": self.config,
            "overall": asdict(self.overall),
            "subsets": [
                {"subset": s.subset, "class": s.cls, "n_total": s.n_total, "n_ok": s.n_ok, "metrics": asdict(s.metrics)}
                for s in self.subsets
            ],
            "sanity": {
                "verdicts": [asdict(v) for v in self.sanity],
                "fail_count": self.fail_count,
                "total": len(self.sanity),
            },
            "roc": None if self.roc is None else {
                "points": [asdict(p) for p in self.roc.points],
                "operating_point": {
                    "max_fpr": self.roc.max_fpr, "tau": self.roc.operating_tau,
                    "tpr": self.roc.operating_tpr, "fpr": self.roc.operating_fpr,
                },
            },
            "accountings": {
                model: {
                    acc.accounting: {
                        "n_total": acc.n_total, "n_imputed_real": acc.n_imputed_real,
                        "n_imputed_ai": acc.n_imputed_ai, "metrics": asdict(acc.metrics),
                    }
                    for acc in pair
                }
                for model, pair in sorted(self.accountings.items())
            },
            "ai_side_imputation_is_extension": True,
            "missing": list(self.missing),
        }


def run_bench(manifest, predictions, tau: float = 0.5, test_only: bool = False, grid=None,
              hard_patterns=DEFAULT_HARD_PATTERNS, other_models: dict | None = None, model_name: str = "model",
              config: dict | None = None) -> BenchReport:
    ev = evaluate(manifest, predictions, tau, test_only)
    verdicts, fails = sanity_protocol(ev.subsets, hard_patterns)
    entries = [e for e in manifest if e.bench_origin == "test"] if test_only else list(manifest)
    by_id = align(manifest, predictions)
    ok = [by_id[e.id] for e in entries if by_id[e.id].ok]
    labels = {e.id: e.label for e in entries}
    roc = roc_sweep([p.song_prob for p in ok], [labels[p.id] for p in ok], grid) if ok else None
    models = {model_name: predictions}
    models.update(other_models or {})
    accountings = dual_accounting(entries, {m: [p for p in preds if p.id in labels] for m, preds in models.items()}, tau)
    cfg = {"tau": tau, "test_only": test_only, "hard_patterns": list(hard_patterns)}
    cfg.update(config or {})
    return BenchReport(cfg, ev.overall, ev.subsets, verdicts, fails, roc, accountings, ev.missing)


def emit_report(report: BenchReport, path) -> list[Path]:
    """Write the JSON report plus ``.roc.csv`` and ``.subsets.csv`` companions."""
    path = Path(path)
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written = [path]
    stem = path.with_suffix("")
    if report.roc is not None:
        roc_path = stem.with_name(stem.name + ".roc.csv")
        write_roc_csv(report.roc, roc_path)
        written.append(roc_path)
    sub_path = stem.with_name(stem.name + ".subsets.csv")
    sanity = {v.subset: v for v in report.sanity}
    with open(sub_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subset", "class", "n_total", "n_ok", "tp", "fp", "tn", "fn", "rate", "threshold", "result"])
        for s in report.subsets:
            v = sanity.get(s.subset)
            m = s.metrics
            w.writerow([s.subset, s.cls, s.n_total, s.n_ok, m.tp, m.fp, m.tn, m.fn,
                        "" if v is None or v.rate is None else repr(v.rate),
                        "" if v is None else repr(v.threshold), "" if v is None else v.result])
    written.append(sub_path)
    return written


def write_roc_csv(roc: RocResult, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tau", "fpr", "tpr", "f1"])
        for p in roc.points:
            w.writerow([repr(p.tau), repr(p.fpr), repr(p.tpr), repr(p.f1)])


def parse_report(path) -> dict:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if data.get("schema") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported report schema {data.get('schema')!r}")
    return data
