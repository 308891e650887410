"""Audio ingestion, quantized mel spectrograms and frame extraction."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .errors import AudioFormatError, DataError, UsageError

SAMPLE_RATE = 44100
FRAME_ROWS = 128
FRAME_COLS = 44

MELS_MAGIC = b"MELS"
MELS_VERSION = 1
_MELS_HEADER = struct.Struct("<4sHIId")


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise AudioFormatError("audio clip must be mono")
        if self.sample_rate != SAMPLE_RATE:
            raise AudioFormatError(f"unsupported sample rate {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise AudioFormatError("audio clip contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class DspConfig:
    fft_size: int = 2048
    hop: int = 512
    n_mels: int = FRAME_ROWS
    f_min: float = 0.0
    f_max: float = SAMPLE_RATE / 2
    floor_db: float = -80.0
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.hop < 1 or self.hop > self.fft_size:
            raise UsageError("hop must lie in [1, fft_size]")
        if self.f_max != self.sample_rate / 2:
            raise UsageError("f_max must equal the Nyquist frequency")
        if not 0 <= self.f_min < self.f_max:
            raise UsageError("f_min must lie in [0, f_max)")
        if self.floor_db >= 0:
            raise UsageError("floor_db must be negative")

    @property
    def column_duration(self) -> float:
        return self.hop / self.sample_rate


@dataclass
class MelSpectrogram:
    pixels: np.ndarray
    clip_id: str = ""
    column_duration: float = DspConfig().column_duration

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 2:
            raise DataError("spectrogram must be a 2-D pixel matrix")

    @property
    def n_columns(self) -> int:
        return self.pixels.shape[1]


@dataclass
class FrameSequence:
    frames: np.ndarray  # (n, 128, 44)
    hop_columns: int
    source_columns: int
    clip_id: str = ""

    def __len__(self) -> int:
        return len(self.frames)

    def start_column(self, k: int) -> int:
        return k * self.hop_columns


# --------------------------------------------------------------------------
# WAV I/O


def load_audio(path, downmix: bool = True) -> AudioClip:
    """Read a PCM (16/24/32-bit int) or 32-bit float WAV file into [-1, 1]."""
    try:
        rate, data = wavfile.read(os.fspath(path))
    except (ValueError, EOFError, struct.error) as exc:
        raise AudioFormatError(f"malformed WAV file {path}: {exc}") from exc
    if rate != SAMPLE_RATE:
        raise AudioFormatError(
            f"unsupported sample rate {rate} in {path}; resample the corpus to {SAMPLE_RATE} Hz"
        )
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        # scipy left-justifies 24-bit data into int32
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise AudioFormatError(f"unsupported sample format {data.dtype} in {path}")
    if samples.ndim == 2:
        if samples.shape[1] == 1:
            samples = samples[:, 0]
        elif downmix:
            samples = samples.mean(axis=1)
        else:
            raise AudioFormatError(f"{path} has {samples.shape[1]} channels and downmix is off")
    return AudioClip(samples, rate)


def write_wav(path, clip: AudioClip) -> None:
    """Write a clip as 16-bit PCM (the inverse of the loader's /32768 scaling), clipping at full scale."""
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    wavfile.write(os.fspath(path), clip.sample_rate, pcm)


# --------------------------------------------------------------------------
# mel scale and filterbank


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def _mel_edges(cfg: DspConfig) -> np.ndarray:
    mels = np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2)
    return mel_to_hz(mels)


def mel_centers(cfg: DspConfig = DspConfig()) -> np.ndarray:
    return _mel_edges(cfg)[1:-1]


def mel_filterbank(cfg: DspConfig = DspConfig()) -> np.ndarray:
    """Triangular HTK filters of shape (n_mels, fft_size // 2 + 1), peak height 1."""
    edges = _mel_edges(cfg)
    freqs = np.arange(cfg.fft_size // 2 + 1) * cfg.sample_rate / cfg.fft_size
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_band_of_frequency(f: float, cfg: DspConfig = DspConfig()) -> int:
    """Index of the mel filter whose center frequency is nearest to ``f``."""
    if not cfg.f_min <= f <= cfg.f_max:
        raise DataError(f"frequency {f} Hz outside [{cfg.f_min}, {cfg.f_max}]")
    return int(np.argmin(np.abs(mel_centers(cfg) - f)))


# --------------------------------------------------------------------------
# spectrogram


def db_to_pixel(db, floor_db: float = -80.0):
    db = np.clip(np.asarray(db, dtype=np.float64), floor_db, 0.0)
    return (db - floor_db) / (0.0 - floor_db) * 255.0


def power_spectrogram(samples: np.ndarray, cfg: DspConfig) -> np.ndarray:
    """Centered, reflect-padded Hann STFT power, shape (fft_size // 2 + 1, T)."""
    pad = cfg.fft_size // 2
    padded = np.pad(samples, pad, mode="reflect")
    windows = np.lib.stride_tricks.sliding_window_view(padded, cfg.fft_size)[:: cfg.hop]
    hann = np.hanning(cfg.fft_size + 1)[:-1]  # periodic
    spectrum = np.fft.rfft(windows * hann, axis=1)
    return (spectrum.real**2 + spectrum.imag**2).T


def mel_spectrogram(clip: AudioClip, cfg: DspConfig = DspConfig(), clip_id: str = "") -> MelSpectrogram:
    if len(clip.samples) < cfg.fft_size:
        raise DataError(
            f"clip of {len(clip.samples)} samples is shorter than one FFT window ({cfg.fft_size})"
        )
    mel = mel_filterbank(cfg) @ power_spectrogram(clip.samples, cfg)
    peak = mel.max()
    if peak <= 0.0:
        pixels = np.zeros_like(mel)
    else:
        ratio = np.maximum(mel, np.finfo(np.float64).tiny) / peak
        pixels = db_to_pixel(10.0 * np.log10(ratio), cfg.floor_db)
    return MelSpectrogram(pixels.astype(np.float32), clip_id, cfg.column_duration)


def extract_frames(spec: MelSpectrogram, hop_columns: int, width: int = FRAME_COLS) -> FrameSequence:
    n_cols = spec.n_columns
    if hop_columns < 1:
        raise UsageError("hop_columns must be >= 1")
    if n_cols < width:
        raise DataError(f"spectrogram {spec.clip_id!r} has {n_cols} columns, fewer than one frame ({width})")
    n_frames = (n_cols - width) // hop_columns + 1
    view = np.lib.stride_tricks.sliding_window_view(spec.pixels, width, axis=1)
    frames = np.ascontiguousarray(view[:, : n_frames * hop_columns : hop_columns].transpose(1, 0, 2))
    return FrameSequence(frames, hop_columns, n_cols, spec.clip_id)


# --------------------------------------------------------------------------
# MELS cache files


def save_mels(path, spec: MelSpectrogram) -> None:
    rows, cols = spec.pixels.shape
    header = _MELS_HEADER.pack(MELS_MAGIC, MELS_VERSION, rows, cols, float(spec.column_duration))
    payload = np.ascontiguousarray(spec.pixels, dtype="<f4").tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(header + payload)
    os.replace(tmp, path)


def load_mels(path) -> MelSpectrogram:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _MELS_HEADER.size:
        raise DataError(f"{path}: truncated MELS header")
    magic, version, rows, cols, col_dur = _MELS_HEADER.unpack_from(raw)
    if magic != MELS_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != MELS_VERSION:
        raise DataError(f"{path}: unsupported MELS version {version}")
    expected = _MELS_HEADER.size + rows * cols * 4
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes, found {len(raw)}")
    pixels = np.frombuffer(raw, dtype="<f4", offset=_MELS_HEADER.size).reshape(rows, cols)
    return MelSpectrogram(pixels.astype(np.float32), path.stem, col_dur)


def load_spectrogram(path, cfg: DspConfig = DspConfig()) -> MelSpectrogram:
    """Load a MELS cache file directly, or compute the spectrogram of a WAV file."""
    path = Path(path)
    if path.suffix.lower() == ".mels":
        return load_mels(path)
    return mel_spectrogram(load_audio(path), cfg, clip_id=path.stem)
