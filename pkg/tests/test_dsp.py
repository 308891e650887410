import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prednet_music import dsp
from prednet_music.dsp import (
    AudioClip,
    DspConfig,
    MelSpectrogram,
    db_to_pixel,
    extract_frames,
    hz_to_mel,
    load_audio,
    mel_band_of_frequency,
    mel_filterbank,
    mel_spectrogram,
)
from prednet_music.errors import AudioFormatError, DataError

SR = 44100


def _wav_bytes(samples_bytes: bytes, rate=SR, channels=1, bits=16, fmt=1) -> bytes:
    block = channels * bits // 8
    fmt_chunk = struct.pack("<HHIIHH", fmt, channels, rate, rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt_chunk
    body += b"data" + struct.pack("<I", len(samples_bytes)) + samples_bytes
    return b"RIFF" + struct.pack("<I", len(body)) + body


def _tone(f, n=131072, amp=0.5):
    t = np.arange(n) / SR
    return AudioClip(amp * np.sin(2 * np.pi * f * t))


class TestLoadAudio:
    def test_silence(self, tmp_path):
        p = tmp_path / "silence.wav"
        p.write_bytes(_wav_bytes(b"\x00\x00" * SR))
        clip = load_audio(p)
        assert len(clip.samples) == SR
        assert np.all(clip.samples == 0)

    def test_full_scale_square_wave_scaling(self, tmp_path):
        ints = np.array([32767, -32767] * 50, dtype="<i2")
        p = tmp_path / "square.wav"
        p.write_bytes(_wav_bytes(ints.tobytes()))
        clip = load_audio(p)
        expected = np.array([32767, -32767] * 50) / 32768.0
        np.testing.assert_array_equal(clip.samples, expected)

    def test_24_bit(self, tmp_path):
        vals = [2**23 - 1, -(2**23), 0, 4096]
        raw = b"".join(int(v).to_bytes(3, "little", signed=True) for v in vals)
        p = tmp_path / "a24.wav"
        p.write_bytes(_wav_bytes(raw, bits=24))
        np.testing.assert_allclose(load_audio(p).samples, np.array(vals) / 2**23)

    def test_float32(self, tmp_path):
        vals = np.array([0.25, -0.5, 1.0], dtype="<f4")
        p = tmp_path / "f32.wav"
        p.write_bytes(_wav_bytes(vals.tobytes(), bits=32, fmt=3))
        np.testing.assert_array_equal(load_audio(p).samples, vals.astype(np.float64))

    def test_stereo_downmix(self, tmp_path):
        inter = np.array([1000, 3000, -2000, 2000], dtype="<i2")
        p = tmp_path / "st.wav"
        p.write_bytes(_wav_bytes(inter.tobytes(), channels=2))
        np.testing.assert_allclose(load_audio(p, downmix=True).samples, [2000 / 32768, 0.0])
        with pytest.raises(AudioFormatError):
            load_audio(p, downmix=False)

    def test_unsupported_sample_rate(self, tmp_path):
        p = tmp_path / "low.wav"
        p.write_bytes(_wav_bytes(b"\x00\x00" * 100, rate=22050))
        with pytest.raises(AudioFormatError, match="unsupported sample rate"):
            load_audio(p)

    def test_malformed_header(self, tmp_path):
        p = tmp_path / "bad.wav"
        p.write_bytes(b"RIFF\x00\x00garbage")
        with pytest.raises(AudioFormatError):
            load_audio(p)

    def test_write_roundtrip(self, tmp_path):
        clip = _tone(440, n=2000)
        dsp.write_wav(tmp_path / "t.wav", clip)
        back = load_audio(tmp_path / "t.wav")
        np.testing.assert_allclose(back.samples, clip.samples, atol=0.5 / 32768)


class TestMelScale:
    def test_formula(self):
        assert hz_to_mel(0) == 0
        assert hz_to_mel(1000) == pytest.approx(2595 * np.log10(1 + 1000 / 700))
        assert hz_to_mel(1000) == pytest.approx(999.99, abs=0.01)

    def test_band_of_boundary_frequencies(self):
        assert mel_band_of_frequency(0.0) == 0
        assert mel_band_of_frequency(22050.0) == 127
        with pytest.raises(DataError):
            mel_band_of_frequency(-1.0)
        with pytest.raises(DataError):
            mel_band_of_frequency(30000.0)

    def test_band_is_nearest_center(self):
        centers = dsp.mel_centers()
        assert np.all(np.diff(centers) > 0)
        for f in [100.0, 440.0, 2000.0, 15000.0]:
            assert mel_band_of_frequency(f) == int(np.argmin(np.abs(centers - f)))

    def test_filterbank_shape_nonnegative_unimodal(self):
        fb = mel_filterbank()
        assert fb.shape == (128, 1025)
        assert np.all(fb >= 0)
        for row in fb:
            assert row.max() > 0
            nz = row[np.argmax(row > 0) : len(row) - np.argmax(row[::-1] > 0)]
            peak = int(np.argmax(nz))
            assert np.all(np.diff(nz[: peak + 1]) >= 0)
            assert np.all(np.diff(nz[peak:]) <= 0)


class TestMelSpectrogram:
    def test_db_endpoints(self):
        assert db_to_pixel(-80.0) == 0.0
        assert db_to_pixel(0.0) == 255.0
        assert db_to_pixel(-40.0) == 127.5
        assert db_to_pixel(-120.0) == 0.0

    def test_column_count(self):
        spec = mel_spectrogram(AudioClip(np.zeros(131072)))
        assert spec.pixels.shape == (128, 257)
        spec = mel_spectrogram(_tone(300, n=44100))
        assert spec.n_columns == 44100 // 512 + 1

    def test_column_duration(self):
        assert DspConfig().column_duration == pytest.approx(512 / 44100)

    def test_440_argmax_band(self):
        spec = mel_spectrogram(_tone(440.0))
        # oracle: the filter with the largest response at exactly 440 Hz
        edges = dsp.mel_to_hz(np.linspace(0, hz_to_mel(22050), 130))
        response = np.maximum(0, np.minimum((440 - edges[:-2]) / (edges[1:-1] - edges[:-2]), (edges[2:] - 440) / (edges[2:] - edges[1:-1])))
        expected = int(np.argmax(response))
        interior = spec.pixels[:, 2:-2]
        assert np.all(interior.argmax(axis=0) == expected)
        assert mel_band_of_frequency(440.0) == expected

    def test_silence_maps_to_floor(self):
        spec = mel_spectrogram(AudioClip(np.zeros(4096)))
        assert np.all(spec.pixels == 0)
        assert np.all(np.isfinite(spec.pixels))

    def test_too_short(self):
        with pytest.raises(DataError):
            mel_spectrogram(AudioClip(np.zeros(1000)))

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.01, 1.0))
    def test_quantization_range(self, seed, amp):
        x = amp * np.random.default_rng(seed).uniform(-1, 1, 4096)
        spec = mel_spectrogram(AudioClip(x))
        assert spec.pixels.min() >= 0 and spec.pixels.max() == 255.0

    def test_deterministic(self):
        x = np.random.default_rng(1).uniform(-1, 1, 8192)
        a = mel_spectrogram(AudioClip(x)).pixels
        b = mel_spectrogram(AudioClip(x.copy())).pixels
        assert a.tobytes() == b.tobytes()


class TestFrames:
    def _spec(self, cols):
        return MelSpectrogram(np.arange(128 * cols, dtype=np.float32).reshape(128, cols) % 255)

    def test_counts(self):
        assert len(extract_frames(self._spec(257), 44)) == 5
        assert len(extract_frames(self._spec(257), 1)) == 214
        assert len(extract_frames(self._spec(44), 7)) == 1

    def test_frame_positions(self):
        spec = self._spec(100)
        fs = extract_frames(spec, 3)
        assert fs.frames.shape[1:] == (128, 44)
        for k in range(len(fs)):
            np.testing.assert_array_equal(fs.frames[k], spec.pixels[:, 3 * k : 3 * k + 44])
        assert 3 * (len(fs) - 1) + 44 <= 100

    def test_reassembly(self):
        spec = self._spec(257)
        fs = extract_frames(spec, 44)
        np.testing.assert_array_equal(np.concatenate(list(fs.frames), axis=1), spec.pixels[:, : 44 * 5])

    def test_too_narrow(self):
        with pytest.raises(DataError):
            extract_frames(self._spec(43), 1)


class TestMelsCache:
    def test_roundtrip_bit_exact(self, tmp_path):
        spec = mel_spectrogram(_tone(523.25, n=20000))
        dsp.save_mels(tmp_path / "a.mels", spec)
        back = dsp.load_mels(tmp_path / "a.mels")
        assert back.pixels.tobytes() == spec.pixels.tobytes()
        assert back.column_duration == spec.column_duration

    def test_layout(self, tmp_path):
        spec = MelSpectrogram(np.array([[1.5, 2.0], [3.0, 255.0]], dtype=np.float32), column_duration=0.25)
        dsp.save_mels(tmp_path / "b.mels", spec)
        raw = (tmp_path / "b.mels").read_bytes()
        assert raw[:4] == b"MELS"
        assert struct.unpack_from("<HIId", raw, 4) == (1, 2, 2, 0.25)
        assert np.frombuffer(raw[22:], "<f4").tolist() == [1.5, 2.0, 3.0, 255.0]

    def test_corrupt(self, tmp_path):
        p = tmp_path / "c.mels"
        p.write_bytes(b"NOPE" + b"\x00" * 30)
        with pytest.raises(DataError):
            dsp.load_mels(p)
        spec = MelSpectrogram(np.zeros((2, 2), np.float32))
        dsp.save_mels(p, spec)
        p.write_bytes(p.read_bytes()[:-3])
        with pytest.raises(DataError):
            dsp.load_mels(p)
