import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from artifact.errors import CorruptionError, FormatError
from artifact.nn import ModelWeights, load_weights, save_weights
from artifact.nn.weights import MAGIC, from_bytes, to_bytes
from artifact.pipeline import TOY_FRONTEND, build_cnn, build_unet, bundle_weights, frontend_of
from artifact.nn import ArtifactUNet, CnnConfig, SegmentCNN, UNetConfig


def sample_weights(rng):
    return ModelWeights({"a.w": rng.standard_normal((3, 2)), "b": rng.standard_normal(4), "s": np.array(1.5)},
                        {"note": "x"})


class TestAnw1:
    def test_save_load_save_identical(self, tmp_path, rng):
        p1, p2 = tmp_path / "1.anw", tmp_path / "2.anw"
        save_weights(sample_weights(rng), p1)
        save_weights(load_weights(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_load_values_are_float32_exact(self, tmp_path, rng):
        w = sample_weights(rng)
        save_weights(w, tmp_path / "w.anw")
        back = load_weights(tmp_path / "w.anw")
        for k in w.params:
            np.testing.assert_array_equal(back.params[k], w.params[k].astype(np.float32))
        assert back.metadata == {"note": "x"}

    def test_empty_map(self):
        w = from_bytes(to_bytes(ModelWeights()))
        assert w.params == {} and w.metadata == {}

    def test_header_layout(self, rng):
        raw = to_bytes(ModelWeights({"x": np.zeros((2, 3))}))
        assert raw[:4] == MAGIC
        version, meta_len = struct.unpack("<II", raw[4:12])
        assert version == 1
        pos = 12 + meta_len
        count, name_len = struct.unpack("<II", raw[pos:pos + 8])
        assert count == 1 and raw[pos + 8:pos + 8 + name_len] == b"x"
        rank, d0, d1 = struct.unpack("<III", raw[pos + 9:pos + 21])
        assert (rank, d0, d1) == (2, 2, 3)
        assert len(raw) == pos + 21 + 4 * 6

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            from_bytes(b"ANW2" + bytes(12))

    def test_bad_version(self):
        raw = bytearray(to_bytes(ModelWeights()))
        raw[4:8] = struct.pack("<I", 9)
        with pytest.raises(FormatError):
            from_bytes(bytes(raw))

    def test_tampered_dim(self):
        raw = bytearray(to_bytes(ModelWeights({"x": np.zeros((2, 3))})))
        meta_len = struct.unpack("<I", raw[8:12])[0]
        dim_pos = 12 + meta_len + 4 + 4 + 1 + 4
        raw[dim_pos:dim_pos + 4] = struct.pack("<I", 5)
        with pytest.raises(CorruptionError):
            from_bytes(bytes(raw))

    def test_truncated_payload(self, rng):
        raw = to_bytes(sample_weights(rng))
        with pytest.raises(CorruptionError):
            from_bytes(raw[:-2])

    def test_trailing_bytes(self, rng):
        with pytest.raises(CorruptionError):
            from_bytes(to_bytes(sample_weights(rng)) + b"\0")

    @given(st.dictionaries(st.text(min_size=1, max_size=8),
                           arrays(np.float32, array_shapes(max_dims=3, max_side=4),
                                  elements=st.floats(-1e6, 1e6, width=32)),
                           max_size=4))
    def test_round_trip_property(self, params):
        w = ModelWeights({k: v.astype(np.float64) for k, v in params.items()})
        raw = to_bytes(w)
        assert to_bytes(from_bytes(raw)) == raw


class TestBundle:
    def test_bundle_rebuilds_networks(self, tmp_path):
        unet = ArtifactUNet(UNetConfig(depth=2, base_channels=3), seed=1)
        cnn = SegmentCNN(CnnConfig(widths=(2, 3, 4), hidden=5), seed=2)
        save_weights(bundle_weights(unet, cnn, TOY_FRONTEND), tmp_path / "b.anw")
        w = load_weights(tmp_path / "b.anw")
        assert frontend_of(w) == TOY_FRONTEND
        u2, c2 = build_unet(w), build_cnn(w)
        assert u2.cfg.base_channels == 3 and c2.cfg.hidden == 5
        x = np.random.default_rng(0).standard_normal((1, 7, 16, 16))
        np.testing.assert_allclose(c2.forward(x), cnn.forward(x), rtol=1e-5, atol=1e-6)
