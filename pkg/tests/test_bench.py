import csv
import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from artifact.bench import (
    ManifestEntry,
    MetricsBlock,
    PredictionRecord,
    align,
    auc,
    default_grid,
    dual_accounting,
    emit_report,
    evaluate,
    f1_score,
    load_manifest,
    load_predictions,
    median_verdict,
    parse_report,
    roc_sweep,
    run_bench,
    sanity_protocol,
    write_jsonl,
)
from artifact.errors import AlignmentError, ConfigError, NoSegmentsError, UndefinedAUCError

from helpers import brute_auc, random_bench, recount_confusion


class TestVerdict:
    def test_lower_median_even(self):
        assert median_verdict([0.9, 0.1, 0.4, 0.6]) == (0.4, "real")

    def test_odd(self):
        assert median_verdict([0.2, 0.7, 0.5]) == (0.5, "ai")

    def test_tie_at_tau_is_ai(self):
        assert median_verdict([0.5], tau=0.5)[1] == "ai"

    def test_empty(self):
        with pytest.raises(NoSegmentsError):
            median_verdict([])

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=20), st.floats(0, 1))
    def test_median_is_a_segment_value(self, probs, tau):
        med, verdict = median_verdict(probs, tau)
        assert med in probs
        assert verdict == ("ai" if med >= tau else "real")


class TestMetrics:
    def test_f1_golden(self):
        assert f1_score(0.9905, 0.9755) == pytest.approx(0.9829, abs=1e-4)

    def test_zero_denominators(self):
        m = MetricsBlock.from_counts(0, 0, 0, 0)
        assert (m.precision, m.recall, m.f1, m.fpr) == (0.0, 0.0, 0.0, 0.0)

    def test_from_counts(self):
        m = MetricsBlock.from_counts(8, 2, 18, 2)
        assert (m.precision, m.recall, m.fpr) == (0.8, 0.8, 0.1)
        assert m.fpr_exact() == Fraction(1, 10) and m.n == 30

    @pytest.mark.parametrize("seed", range(20))
    def test_confusion_recomputation(self, seed):
        rng = np.random.default_rng(seed)
        manifest, preds = random_bench(rng)
        tau = float(rng.uniform(0.2, 0.8))
        ev = evaluate(manifest, preds, tau)
        m = ev.overall
        assert (m.tp, m.fp, m.tn, m.fn) == recount_confusion(manifest, preds, tau)
        assert len(ev.missing) == len(manifest) - len(preds)


class TestAuc:
    @pytest.mark.parametrize("seed", range(100))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        ai = np.round(rng.uniform(size=rng.integers(1, 15)), 1)
        real = np.round(rng.uniform(size=rng.integers(1, 15)), 1)
        assert auc(ai, real) == pytest.approx(brute_auc(ai, real), abs=1e-12)

    def test_invariant_under_monotone_transform(self, rng):
        ai, real = rng.uniform(size=30), rng.uniform(size=25)
        base = auc(ai, real)
        for f in (np.sqrt, np.exp, lambda v: 3 * v - 7, lambda v: v ** 5):
            assert auc(f(ai), f(real)) == pytest.approx(base, abs=1e-12)

    def test_empty_class(self):
        with pytest.raises(UndefinedAUCError):
            auc([0.2], [])

    def test_perfect_and_inverted(self):
        assert auc([0.9, 0.8], [0.1, 0.2]) == 1.0
        assert auc([0.1], [0.9]) == 0.0


class TestRoc:
    def test_monotone_in_tau(self, rng):
        scores = rng.uniform(size=200)
        labels = ["ai" if s + rng.normal(0, 0.3) > 0.5 else "real" for s in scores]
        roc = roc_sweep(scores, labels, default_grid(0.01))
        tprs = [p.tpr for p in roc.points]
        fprs = [p.fpr for p in roc.points]
        assert all(b <= a for a, b in zip(tprs, tprs[1:]))
        assert all(b <= a for a, b in zip(fprs, fprs[1:]))
        assert roc.points[0].tpr == 1.0 and roc.points[0].fpr == 1.0

    def test_operating_point(self):
        roc = roc_sweep([0.9, 0.8, 0.3, 0.1], ["ai", "ai", "real", "real"], [0.0, 0.5, 1.0], max_fpr=0.05)
        assert (roc.operating_tau, roc.operating_tpr, roc.operating_fpr) == (0.5, 1.0, 0.0)

    def test_infeasible(self):
        roc = roc_sweep([0.9, 0.9], ["ai", "real"], [0.0, 0.5], max_fpr=0.05)
        assert roc.operating_tau is None

    def test_unsorted_grid(self):
        with pytest.raises(ConfigError):
            roc_sweep([0.5], ["ai"], [0.5, 0.1])

    def test_grid(self):
        g = default_grid(0.01)
        assert len(g) == 101 and g[0] == 0.0 and g[-1] == 1.0 and g[50] == 0.5

    def test_f1_range(self):
        roc = roc_sweep([0.9, 0.6, 0.4, 0.1], ["ai", "ai", "real", "real"], default_grid(0.1))
        lo, hi = roc.f1_range(0.3, 0.7)
        assert hi == 1.0 and lo <= hi


class TestSanity:
    FIXTURE = [
        ("Suno v4", "ai", Fraction(9, 10)),
        ("Udio", "ai", Fraction(899, 1000)),
        ("Stable Audio", "ai", Fraction(6, 10)),
        ("stable_audio_2", "ai", Fraction(599, 1000)),
        ("FMA", "real", Fraction(5, 100)),
        ("MTG", "real", Fraction(51, 1000)),
        ("Empty AI", "ai", None),
    ]

    def test_fixture_vector(self):
        verdicts, fails = sanity_protocol(self.FIXTURE)
        assert [v.result for v in verdicts] == ["PASS", "FAIL", "PASS", "FAIL", "PASS", "FAIL", "FAIL"]
        assert fails == 4

    def test_float_rates_at_boundary(self):
        verdicts, _ = sanity_protocol([("a", "ai", 0.9), ("r", "real", 0.05)])
        assert [v.result for v in verdicts] == ["PASS", "PASS"]

    def test_untagged(self):
        with pytest.raises(ConfigError):
            sanity_protocol([("x", "mixed", 0.5)])


class TestDualAccounting:
    def test_missing_reals_shift_fpr_exactly(self):
        n_real, n_missing = 10510, 11
        manifest = [ManifestEntry(f"r{i}", "", "real") for i in range(n_real)]
        manifest += [ManifestEntry(f"a{i}", "", "ai") for i in range(100)]
        preds = [PredictionRecord(f"r{i}", [0.1]) for i in range(n_missing, n_real)]
        preds += [PredictionRecord(f"a{i}", [0.9]) for i in range(100)]
        a, b = dual_accounting(manifest, {"m": preds})["m"]
        shift = b.metrics.fpr_exact() - a.metrics.fpr_exact()
        assert shift == Fraction(11, 10510)
        assert round(100 * float(shift), 3) == 0.105
        assert b.n_imputed_real == 11 and b.n_total == n_real + 100 and a.n_total == n_real + 100 - 11

    def test_imputed_share_independent_of_other_errors(self):
        # with false positives among observed tracks, B's FPR still carries exactly n_missing / n_real
        manifest = [ManifestEntry(f"r{i}", "", "real") for i in range(50)] + [ManifestEntry("a", "", "ai")]
        preds = [PredictionRecord(f"r{i}", [0.9 if i < 7 else 0.1]) for i in range(3, 50)] + [PredictionRecord("a", [0.8])]
        _, b = dual_accounting(manifest, {"m": preds})["m"]
        assert b.metrics.fpr_exact() == Fraction(4, 50) + Fraction(3, 50)

    def test_intersection_across_models(self):
        manifest = [ManifestEntry(i, "", "real") for i in "xyz"]
        m1 = [PredictionRecord("x", [0.1]), PredictionRecord("y", [0.1])]
        m2 = [PredictionRecord("y", [0.1]), PredictionRecord("z", [0.1])]
        out = dual_accounting(manifest, {"m1": m1, "m2": m2})
        assert out["m1"][0].n_total == out["m2"][0].n_total == 1

    def test_missing_ai_counts_as_fn(self):
        manifest = [ManifestEntry("a", "", "ai"), ManifestEntry("b", "", "ai")]
        _, b = dual_accounting(manifest, {"m": [PredictionRecord("a", [0.9])]})["m"]
        assert (b.metrics.tp, b.metrics.fn, b.n_imputed_ai) == (1, 1, 1)


class TestIo:
    def test_manifest_relative_paths(self, tmp_path):
        write_jsonl(tmp_path / "m.jsonl", [{"id": "a", "path": "x.wav", "label": "ai"}])
        (e,) = load_manifest(tmp_path / "m.jsonl")
        assert e.path == str(tmp_path / "x.wav")

    def test_manifest_duplicate(self, tmp_path):
        write_jsonl(tmp_path / "m.jsonl", [{"id": "a", "path": "", "label": "ai"}] * 2)
        with pytest.raises(ConfigError, match="duplicate"):
            load_manifest(tmp_path / "m.jsonl")

    def test_manifest_bad_label(self, tmp_path):
        write_jsonl(tmp_path / "m.jsonl", [{"id": "a", "path": "", "label": "fake"}])
        with pytest.raises(ConfigError):
            load_manifest(tmp_path / "m.jsonl")

    def test_invalid_json_names_line(self, tmp_path):
        (tmp_path / "m.jsonl").write_text('{"id": "a", "path": "", "label": "ai"}\n{oops\n')
        with pytest.raises(ConfigError, match=":2:"):
            load_manifest(tmp_path / "m.jsonl")

    def test_predictions_without_probs_are_missing(self, tmp_path):
        write_jsonl(tmp_path / "p.jsonl", [{"id": "a", "segment_probs": []}, {"id": "b", "segment_probs": [0.7, 0.2]}])
        a, b = load_predictions(tmp_path / "p.jsonl")
        assert a.status == "missing" and (b.song_prob, b.verdict) == (0.2, "real")

    def test_align_unknown_and_duplicate(self):
        manifest = [ManifestEntry("a", "", "ai")]
        with pytest.raises(AlignmentError):
            align(manifest, [PredictionRecord("zzz", [0.5])])
        with pytest.raises(AlignmentError):
            align(manifest, [PredictionRecord("a", [0.5]), PredictionRecord("a", [0.5])])


class TestReport:
    def test_emit_and_parse(self, tmp_path):
        manifest, preds = random_bench(np.random.default_rng(3))
        report = run_bench(manifest, preds, grid=default_grid(0.1))
        written = emit_report(report, tmp_path / "r.json")
        assert [p.name for p in written] == ["r.json", "r.roc.csv", "r.subsets.csv"]
        data = parse_report(tmp_path / "r.json")
        assert data["ai_side_imputation_is_extension"] is True
        assert set(data["accountings"]["model"]) == {"A_exclude", "B_impute"}
        rows = list(csv.DictReader(open(tmp_path / "r.subsets.csv")))
        assert len(rows) == 6 and {r["result"] for r in rows} <= {"PASS", "FAIL"}
        assert len(list(csv.DictReader(open(tmp_path / "r.roc.csv")))) == 11

    def test_report_is_deterministic(self, tmp_path):
        manifest, preds = random_bench(np.random.default_rng(4))
        emit_report(run_bench(manifest, preds), tmp_path / "1.json")
        emit_report(run_bench(manifest, preds), tmp_path / "2.json")
        assert (tmp_path / "1.json").read_bytes() == (tmp_path / "2.json").read_bytes()

    def test_schema_checked(self, tmp_path):
        (tmp_path / "r.json").write_text(json.dumps({"schema": "other"}))
        with pytest.raises(ConfigError):
            parse_report(tmp_path / "r.json")

    def test_test_only_filters(self):
        manifest = [ManifestEntry("a", "", "ai", bench_origin="train"), ManifestEntry("b", "", "ai")]
        ev = evaluate(manifest, [PredictionRecord("a", [0.9]), PredictionRecord("b", [0.1])], test_only=True)
        assert (ev.overall.tp, ev.overall.fn) == (0, 1)
