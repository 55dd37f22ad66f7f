import numpy as np
import pytest

from speechswin import dsp
from speechswin.dsp import AudioClip, DSPConfig


def tone(freq, seconds=0.5, sr=16000, amp=0.5):
    t = np.arange(int(seconds * sr)) / sr
    return amp * np.sin(2 * np.pi * freq * t)


def naive_dft_power(frame, n_fft):
    """O(n^2) DFT of a zero-padded frame, non-negative bins only."""
    x = np.zeros(n_fft)
    x[: len(frame)] = frame
    n = np.arange(n_fft)
    out = []
    for k in range(n_fft // 2 + 1):
        c = np.sum(x * np.cos(2 * np.pi * k * n / n_fft))
        s = np.sum(x * np.sin(2 * np.pi * k * n / n_fft))
        out.append(c * c + s * s)
    return np.array(out)


class TestPreEmphasis:
    def test_constant_signal(self):
        out = dsp.pre_emphasis(AudioClip([1.0, 1.0, 1.0]), 0.97).samples
        np.testing.assert_allclose(out, [1.0, 0.03, 0.03], atol=1e-15)

    def test_alpha_zero_is_identity(self, rng):
        x = rng.uniform(-1, 1, 100)
        np.testing.assert_array_equal(dsp.pre_emphasis(AudioClip(x), 0.0).samples, x)

    def test_tilts_white_noise_upward(self, rng):
        x = rng.standard_normal(16000) * 0.1

        def high_ratio(sig):
            p = np.abs(np.fft.rfft(sig)) ** 2
            return p[len(p) // 2 :].sum() / p.sum()

        y = dsp.pre_emphasis(AudioClip(x)).samples
        assert high_ratio(y) > high_ratio(x)


class TestStft:
    def test_sine_peak_bin(self):
        power = dsp.stft_power(AudioClip(tone(1000.0)))
        assert power.shape[1] == 257
        expected = round(1000 * 512 / 16000)
        assert expected == 32
        assert np.all(power.argmax(axis=1) == expected)

    def test_zero_clip(self):
        power = dsp.stft_power(AudioClip(np.zeros(1600)))
        assert not power.any()

    def test_frame_count(self):
        # 2 s at 16 kHz, 320-sample window, 160-sample hop.
        assert dsp.stft_power(AudioClip(np.zeros(32000))).shape[0] == 1 + (32000 - 320) // 160 == 199

    def test_parseval_per_frame(self, rng):
        x = rng.uniform(-1, 1, 4000)
        power = dsp.stft_power(AudioClip(x))
        win = dsp.hamming(320)
        for i in range(power.shape[0]):
            energy = np.sum((x[i * 160 : i * 160 + 320] * win) ** 2)
            p = power[i]
            total = (p[0] + 2 * p[1:-1].sum() + p[-1]) / 512
            assert abs(total - energy) / energy < 1e-3

    def test_matches_naive_dft(self, rng):
        x = rng.uniform(-1, 1, 640)
        power = dsp.stft_power(AudioClip(x))
        ref = naive_dft_power(x[160:480] * dsp.hamming(320), 512)
        np.testing.assert_allclose(power[1], ref, rtol=1e-9, atol=1e-9)

    def test_periodic_hamming(self):
        w = dsp.hamming(320)
        assert w[0] == pytest.approx(0.08)
        assert w[160] == pytest.approx(1.0)

    def test_too_short(self):
        with pytest.raises(dsp.TooShortError):
            dsp.stft_power(AudioClip(np.zeros(319)))

    def test_one_hop_shift(self, rng):
        x = rng.uniform(-1, 1, 8000)
        a = dsp.stft_power(AudioClip(x))
        b = dsp.stft_power(AudioClip(x[160:]))
        assert np.array_equal(a[1:], b[: a.shape[0] - 1])


class TestMelFilterbank:
    def test_htk_formula(self):
        assert dsp.hz_to_mel(700.0) == pytest.approx(2595 * np.log10(2))
        assert dsp.hz_to_mel(700.0) == pytest.approx(781.17, abs=0.01)
        assert dsp.mel_to_hz(dsp.hz_to_mel(1234.5)) == pytest.approx(1234.5)

    def test_shape_and_peaks(self):
        fb = dsp.mel_filterbank()
        assert fb.weights.shape == (32, 257)
        assert np.all(fb.weights >= 0)
        for m in range(32):
            assert fb.weights[m, fb.center_bins[m]] == 1.0
            support = np.flatnonzero(fb.weights[m])
            assert np.array_equal(support, np.arange(support[0], support[-1] + 1))

    def test_centers_increase(self):
        fb = dsp.mel_filterbank()
        assert np.all(np.diff(fb.center_hz) > 0)
        assert np.all(np.diff(fb.center_bins) > 0)

    def test_no_coverage_gaps(self):
        fb = dsp.mel_filterbank()
        total = fb.weights.sum(axis=0)
        for k in range(fb.center_bins[0], fb.center_bins[-1] + 1):
            assert total[k] > 0, k

    def test_invalid_range(self):
        with pytest.raises(ValueError):
            dsp.mel_filterbank(fmax=9000)
        with pytest.raises(ValueError):
            dsp.mel_filterbank(n_mels=0)


class TestLogMel:
    def test_floor(self):
        fb = dsp.mel_filterbank()
        out = dsp.log_mel(np.zeros((3, 257)), fb)
        np.testing.assert_array_equal(out, np.log(1e-10))

    def test_scaling_by_e_adds_one(self, rng):
        fb = dsp.mel_filterbank()
        p = rng.uniform(0.1, 1.0, (4, 257))
        np.testing.assert_allclose(dsp.log_mel(p * np.e, fb), dsp.log_mel(p, fb) + 1.0, atol=1e-12)

    def test_sine_lands_in_nearest_band(self):
        fb = dsp.mel_filterbank()
        for freq in (300.0, 1000.0, 2500.0):
            lm = dsp.log_mel(dsp.stft_power(AudioClip(tone(freq))), fb)
            nearest = np.argmin(np.abs(fb.center_hz - freq))
            assert np.all(lm.argmax(axis=1) == nearest), freq

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dsp.log_mel(np.zeros((2, 100)), dsp.mel_filterbank())


class TestSegment:
    @pytest.mark.parametrize("T,count", [(256, 2), (200, 2), (150, 1), (63, 0), (64, 1)])
    def test_counts(self, T, count):
        assert len(dsp.segment(np.ones((T, 32)))) == count

    def test_padding_and_layout(self):
        frames = np.arange(200 * 32, dtype=float).reshape(200, 32) + 1
        segs = dsp.segment(frames)
        assert segs[0].shape == (32, 128)
        np.testing.assert_array_equal(segs[0], frames[:128].T)
        np.testing.assert_array_equal(segs[1][:, :72], frames[128:].T)
        assert not segs[1][:, 72:].any()


class TestPipeline:
    def test_output_shape(self):
        segs = dsp.extract_segments(AudioClip(tone(440.0, 2.0)))
        assert segs.shape == (2, 1, 32, 128)
        assert segs.dtype == np.float32
        assert np.all(np.isfinite(segs))

    def test_deterministic(self, rng):
        x = rng.uniform(-0.5, 0.5, 24000)
        a = dsp.extract_segments(AudioClip(x))
        b = dsp.extract_segments(AudioClip(x.copy()))
        assert a.tobytes() == b.tobytes()

    def test_one_hop_shift_log_mel(self, rng):
        x = rng.uniform(-0.5, 0.5, 8000)
        a = dsp.log_mel_frames(AudioClip(x))
        b = dsp.log_mel_frames(AudioClip(x[160:]))
        # Pre-emphasis differs only at the first sample of the shifted clip.
        assert np.array_equal(a[2:], b[1 : a.shape[0] - 1])

    def test_config_digest_tracks_settings(self):
        assert DSPConfig().digest() == DSPConfig().digest()
        assert DSPConfig().digest() != DSPConfig(n_mels=40).digest()
        assert len(DSPConfig().digest()) == 32

    def test_rejects_wrong_rate(self):
        with pytest.raises(ValueError):
            dsp.log_mel_frames(AudioClip(np.zeros(8000), 8000))
