import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from artifact.errors import ConfigError, ShapeError, TooShortError
from artifact.spectral import (
    StftConfig,
    hann,
    istft,
    istft_backward,
    log_mel,
    log_mel_backward,
    mel_filterbank,
    mel_project,
    multires_stft_loss,
    stft,
    stft_complex,
    stft_complex_backward,
)

from conftest import sine

CFG = StftConfig(256, 64)


class TestStft:
    def test_shape(self, rng):
        m = stft(rng.standard_normal(2048), CFG)
        assert m.values.shape == (1 + 2048 // 64, 129)
        assert np.all(m.values >= 0)

    def test_peak_bin(self):
        m = stft(sine(1000.0, 8192), StftConfig(2048, 512))
        k = int(np.argmax(m.values.mean(axis=0)))
        assert abs(m.bin_frequencies()[k] - 1000.0) <= 44100 / 2048

    def test_periodic_hann(self):
        assert hann(8).tolist()[0] == 0.0
        assert np.sum(hann(512)) == pytest.approx(256.0)

    def test_too_short(self):
        with pytest.raises(TooShortError):
            stft_complex(np.zeros(100), CFG)

    @pytest.mark.parametrize("n_fft,hop", [(100, 25), (256, 0), (256, 512)])
    def test_bad_config(self, n_fft, hop):
        with pytest.raises(ConfigError):
            StftConfig(n_fft, hop)

    def test_reconstruction(self, rng):
        x = rng.standard_normal(3000)
        y = istft(stft_complex(x, CFG), CFG, len(x))
        np.testing.assert_allclose(y, x, atol=1e-10)

    def test_stft_adjoint(self, rng):
        # <S x, Y> == <x, S* Y> with the real inner product on complex cells
        x = rng.standard_normal(1500)
        S = stft_complex(x, CFG)
        Y = rng.standard_normal(S.shape) + 1j * rng.standard_normal(S.shape)
        lhs = np.sum(S.real * Y.real + S.imag * Y.imag)
        # the backward treats each rfft cell as one complex parameter
        rhs = np.dot(x, stft_complex_backward(Y, CFG, len(x)))
        assert lhs == pytest.approx(rhs, rel=1e-10)

    def test_istft_adjoint(self, rng):
        n_frames, length = 20, 1000
        Z = rng.standard_normal((n_frames, 129)) + 1j * rng.standard_normal((n_frames, 129))
        Z[:, 0] = Z[:, 0].real
        Z[:, -1] = Z[:, -1].real
        g = rng.standard_normal(length)
        G = istft_backward(g, CFG, n_frames)
        h = 1e-6
        for idx in [(3, 0), (5, 17), (10, 128), (0, 64)]:
            for unit in (1.0, 1j):
                if unit == 1j and idx[1] in (0, 128):
                    continue
                Zp, Zm = Z.copy(), Z.copy()
                Zp[idx] += h * unit
                Zm[idx] -= h * unit
                num = (g @ istft(Zp, CFG, length) - g @ istft(Zm, CFG, length)) / (2 * h)
                ana = G[idx].real if unit == 1.0 else G[idx].imag
                assert ana == pytest.approx(num, rel=1e-6, abs=1e-9)


class TestMel:
    def test_filterbank_shape_and_peak(self):
        fb = mel_filterbank(44100, 2048, 128)
        assert fb.shape == (128, 1025)
        assert np.all(fb >= 0) and fb.max() <= 1.0
        assert np.all(fb.sum(axis=1) > 0)

    def test_too_many_mels(self):
        with pytest.raises(ConfigError):
            mel_filterbank(44100, 64, 128)

    def test_log_floor(self):
        m = mel_project(stft(np.zeros(4096), CFG), n_mels=16)
        np.testing.assert_allclose(m.values, np.log(1e-6))

    def test_backward(self, rng):
        fb = mel_filterbank(44100, 256, 16)
        mag = np.abs(rng.standard_normal((5, 129)))
        G = rng.standard_normal((5, 16))
        out, lin = log_mel(mag, fb)
        g = log_mel_backward(G, lin, fb)
        h = 1e-7
        for idx in [(0, 3), (2, 60), (4, 128)]:
            p, m = mag.copy(), mag.copy()
            p[idx] += h
            m[idx] -= h
            num = (np.sum(G * log_mel(p, fb)[0]) - np.sum(G * log_mel(m, fb)[0])) / (2 * h)
            assert g[idx] == pytest.approx(num, rel=1e-5, abs=1e-8)


class TestMultiresLoss:
    def test_zero_for_identical(self, rng):
        x = rng.standard_normal(4096)
        assert multires_stft_loss(x, x) == 0.0

    def test_symmetric(self, rng):
        a, b = rng.standard_normal(4096), rng.standard_normal(4096)
        assert multires_stft_loss(a, b) == pytest.approx(multires_stft_loss(b, a), rel=1e-12)

    def test_positive(self, rng):
        a = rng.standard_normal(4096)
        assert multires_stft_loss(a, 0.5 * a) > 0

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            multires_stft_loss(np.zeros(4096), np.zeros(4097))

    def test_gradient(self, rng):
        a, b = rng.standard_normal(2048), rng.standard_normal(2048)
        _, g = multires_stft_loss(a, b, return_grad=True)
        h = 1e-6
        for i in rng.choice(2048, 6, replace=False):
            p, m = a.copy(), a.copy()
            p[i] += h
            m[i] -= h
            num = (multires_stft_loss(p, b) - multires_stft_loss(m, b)) / (2 * h)
            assert g[i] == pytest.approx(num, rel=1e-4, abs=1e-8)

    @given(st.floats(0.1, 10.0))
    def test_identical_inputs_zero_at_any_scale(self, c):
        x = np.sin(np.arange(2048) * 0.1) * c
        assert multires_stft_loss(x, x) == 0.0
