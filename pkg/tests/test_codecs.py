import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from artifact import codecs
from artifact.bench import ManifestEntry, load_manifest
from artifact.codecs import (
    ENCODER_DIR_ENV,
    TRAINING_VARIANTS,
    CodecVariant,
    codec_sweep,
    cross_codec_delta,
    encode_variant,
    get_variant,
    load_templates,
    require_variants,
    simulate_codec,
    simulated_bank,
)
from artifact.errors import (
    AlignmentError,
    ConfigError,
    EncoderError,
    IncompleteBankError,
    ToolNotFoundError,
)
from artifact.toy import toy_labeled_set

from helpers import COPY_SCRIPT, FAIL_SCRIPT, SELECTIVE_SCRIPT, identity_templates, install_tool, write_corpus


def rms_scorer(w):
    """Deterministic stand-in detector: louder segments look more synthetic."""
    x = w.samples
    return [float(np.sqrt(np.mean(x[i:i + 4410] ** 2)) * 4) for i in range(0, len(x) - 4409, 4410)]


@pytest.fixture
def tools(tmp_path, monkeypatch):
    d = tmp_path / "bin"
    d.mkdir()
    install_tool(d, "wavcopy", COPY_SCRIPT)
    install_tool(d, "alwaysfail", FAIL_SCRIPT)
    install_tool(d, "picky", SELECTIVE_SCRIPT)
    monkeypatch.setenv(ENCODER_DIR_ENV, str(d))
    return d


class TestDelta:
    def test_identical_lists(self):
        assert cross_codec_delta({"wav": [0.2, 0.9], "mp3-128": [0.2, 0.9]}) == 0.0

    def test_single_codec(self):
        assert cross_codec_delta({"wav": [0.3]}) == 0.0

    def test_spread_of_means(self):
        d = cross_codec_delta({"wav": [0.1, 0.3], "mp3-128": [0.9, 0.9], "aac-128": [0.5, 0.5]})
        assert d == pytest.approx(0.7)

    @given(st.lists(st.lists(st.floats(0, 1), min_size=3, max_size=3), min_size=1, max_size=5), st.randoms())
    def test_order_invariant(self, lists, rnd):
        probs = {f"c{i}": v for i, v in enumerate(lists)}
        keys = list(probs)
        rnd.shuffle(keys)
        assert cross_codec_delta({k: probs[k] for k in keys}) == cross_codec_delta(probs)

    def test_mismatched_track_sets(self):
        with pytest.raises(AlignmentError):
            cross_codec_delta({"wav": [0.1, 0.2], "mp3-128": [0.1]})
        with pytest.raises(AlignmentError):
            cross_codec_delta({"wav": {"a": 0.1}, "mp3-128": {"b": 0.1}})

    def test_empty(self):
        with pytest.raises(ConfigError):
            cross_codec_delta({})


class TestVariants:
    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            get_variant("flac")
        with pytest.raises(ConfigError):
            CodecVariant("vorbis")

    def test_templates_file(self, tmp_path):
        (tmp_path / "t.json").write_text('{"mp3-128": {"encode": "enc {in} {out}", "decode": "dec {in} {out}", "ext": "mp3"}}')
        t = load_templates(tmp_path / "t.json")
        assert get_variant("mp3-128", t).encode == "enc {in} {out}"
        assert get_variant("aac-128", t) is codecs.DEFAULT_VARIANTS["aac-128"]

    def test_wav_passthrough_is_identity(self, tmp_path):
        mp = write_corpus(tmp_path, 1, 0)
        e = load_manifest(mp)[0]
        from artifact.audio_io import decode_wav, normalize
        w = encode_variant(e.path, "wav", tmp_path / "work")
        assert w.samples.tobytes() == normalize(decode_wav(e.path)).samples.tobytes()


class TestExternal:
    def test_copy_round_trip(self, tmp_path, tools):
        mp = write_corpus(tmp_path, 1, 0)
        e = load_manifest(mp)[0]
        w = encode_variant(e.path, "mp3-128", tmp_path / "work", identity_templates(["mp3-128"]), e.id)
        ref = encode_variant(e.path, "wav", tmp_path / "work")
        assert w.samples.tobytes() == ref.samples.tobytes()
        assert (tmp_path / "work" / "mp3-128" / f"{e.id}.bin").is_file()

    def test_missing_tool_names_expected_command(self, tmp_path, tools):
        mp = write_corpus(tmp_path, 1, 0)
        e = load_manifest(mp)[0]
        t = {"mp3-128": CodecVariant("mp3-128", "no-such-encoder-xyz {in} {out}", "", "wav")}
        with pytest.raises(ToolNotFoundError, match="no-such-encoder-xyz"):
            encode_variant(e.path, "mp3-128", tmp_path / "work", t, e.id)

    def test_nonzero_exit(self, tmp_path, tools):
        mp = write_corpus(tmp_path, 1, 0)
        e = load_manifest(mp)[0]
        t = {"aac-128": CodecVariant("aac-128", "alwaysfail {in} {out}", "", "wav")}
        with pytest.raises(EncoderError) as exc:
            encode_variant(e.path, "aac-128", tmp_path / "work", t, e.id)
        assert exc.value.returncode == 3 and "refused" in exc.value.stderr


class TestSweep:
    def test_identity_sweep_has_zero_delta_tpr(self, tmp_path, tools):
        mp = write_corpus(tmp_path, 3, 3)
        variants = ["wav", "mp3-128", "aac-128", "opus-128"]
        rep = codec_sweep(rms_scorer, load_manifest(mp), variants, tmp_path / "work",
                          identity_templates(variants[1:]), workers=2)
        assert [r.variant for r in rep.rows] == variants
        assert all(r.delta_tpr_pp == 0.0 for r in rep.rows)
        assert rep.delta_real == 0.0 and rep.delta_ai == 0.0 and not rep.failures
        assert "dTPR vs WAV" in rep.format_table()

    def test_failures_become_decode_errors(self, tmp_path, tools):
        mp = write_corpus(tmp_path, 2, 2, broken={3})
        t = {"mp3-128": CodecVariant("mp3-128", "picky {in} {out}", "", "wav")}
        rep = codec_sweep(rms_scorer, load_manifest(mp), ["wav", "mp3-128"], tmp_path / "work", t)
        assert [(v, tid) for v, tid, _ in rep.failures] == [("mp3-128", "real3-broken")]
        statuses = {p.id: p.status for p in rep.predictions["mp3-128"]}
        assert statuses["real3-broken"] == "decode_error"
        row = rep.rows[1]
        assert (row.n_ok, row.n_failed) == (3, 1)

    def test_degenerate_model_flagged(self, tmp_path, tools):
        mp = write_corpus(tmp_path, 2, 2)
        rep = codec_sweep(lambda w: [0.5], load_manifest(mp), ["wav"], tmp_path / "work")
        assert rep.rows[0].degenerate


class TestSimulated:
    def test_wav_is_copy(self, rng):
        x = rng.uniform(-0.5, 0.5, 1000)
        np.testing.assert_array_equal(simulate_codec(x, "wav"), x)

    def test_attenuates_high_band(self, rng):
        x = rng.standard_normal(8192) * 0.1
        y = simulate_codec(x, "aac-128", seed=0)
        f = np.fft.rfftfreq(8192, 1 / 44100)
        hi = f > 12000
        assert np.sum(np.abs(np.fft.rfft(y))[hi] ** 2) < 0.01 * np.sum(np.abs(np.fft.rfft(x))[hi] ** 2)

    def test_deterministic(self, rng):
        x = rng.uniform(-0.5, 0.5, 1000)
        assert simulate_codec(x, "mp3-128", seed=4).tobytes() == simulate_codec(x, "mp3-128", seed=4).tobytes()

    def test_bank(self):
        ex = toy_labeled_set(2, seed=0, n_samples=2048)
        bank = simulated_bank(ex)
        assert set(bank) == {e.track_id for e in ex}
        assert set(bank[ex[0].track_id]) == set(TRAINING_VARIANTS)
        ident = simulated_bank(ex, identity=True)
        assert all(np.array_equal(v, ex[0].samples) for v in ident[ex[0].track_id].values())

    def test_require_variants(self):
        bank = {"t": {"wav": np.zeros(2)}}
        with pytest.raises(IncompleteBankError) as exc:
            require_variants(bank, "t")
        assert exc.value.track_id == "t" and exc.value.codec == "mp3-128"
        with pytest.raises(IncompleteBankError):
            require_variants(bank, "missing")
