"""Time-frequency frontend: window extraction, magnitude STFT, normalization.

Audio comes in as normalized real amplitudes; the classifier consumes
log-compressed, standardized magnitude spectrograms.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

SAMPLE_RATE = 48_000

_BIN_MAGIC = b"SPG1"


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 1024
    hop: int = 512
    window: str = "hann"

    def __post_init__(self):
        if self.n_fft < 2 or (self.n_fft & (self.n_fft - 1)) != 0:
            raise ConfigError(f"n_fft must be a power of two, got {self.n_fft}")
        if not 0 < self.hop <= self.n_fft:
            raise ConfigError(f"hop must be in (0, n_fft], got {self.hop}")
        if self.window not in ("hann", "rectangular"):
            raise ConfigError(f"unknown window {self.window!r}")

    @property
    def f_bins(self) -> int:
        return self.n_fft // 2 + 1


@dataclass
class Spectrogram:
    """Per-frame magnitude spectra, time along axis 0, frequency along axis 1."""

    mags: np.ndarray
    config: StftConfig

    @property
    def t_frames(self) -> int:
        return self.mags.shape[0]

    @property
    def f_bins(self) -> int:
        return self.mags.shape[1]


def window_function(config: StftConfig) -> np.ndarray:
    """Analysis window (periodic hann, or all-ones)."""
    n = config.n_fft
    if config.window == "rectangular":
        return np.ones(n)
    k = np.arange(n)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * k / n)


def extract_window(audio, channel: int, center_time: float, length: float = 5.0) -> np.ndarray:
    """Cut a fixed-length segment centered at center_time, zero-padded at edges.

    `audio` is a MultichannelAudio (duck-typed: .samples (C, N) and .sr).
    """
    if not 0 <= channel < audio.samples.shape[0]:
        raise IndexError(f"channel {channel} out of range ({audio.samples.shape[0]} channels)")
    n = int(np.ceil(length * audio.sr))
    start = int(round(center_time * audio.sr)) - n // 2
    return extract_padded(audio.samples[channel], start, n)


def extract_padded(signal: np.ndarray, start: int, n: int) -> np.ndarray:
    """signal[start : start+n] with zero padding outside the recording."""
    out = np.zeros(n, dtype=signal.dtype)
    lo = max(start, 0)
    hi = min(start + n, len(signal))
    if hi > lo:
        out[lo - start : hi - start] = signal[lo:hi]
    return out


def stft_magnitude(segment: np.ndarray, config: StftConfig | None = None) -> Spectrogram:
    """Magnitude STFT; frame t covers samples [t*hop, t*hop + n_fft)."""
    config = config or StftConfig()
    segment = np.asarray(segment, dtype=np.float64)
    if segment.ndim != 1:
        raise ConfigError(f"expected 1-D segment, got shape {segment.shape}")
    if len(segment) < config.n_fft:
        raise ConfigError(
            f"segment of {len(segment)} samples shorter than n_fft={config.n_fft}"
        )
    frames = np.lib.stride_tricks.sliding_window_view(segment, config.n_fft)[:: config.hop]
    mags = np.abs(np.fft.rfft(frames * window_function(config), axis=1))
    return Spectrogram(mags=mags, config=config)


def normalize(spec: Spectrogram) -> Spectrogram:
    """log(1+x) compression, then standardize to zero mean / unit variance.

    A constant input (zero variance after compression) maps to all zeros.
    """
    y = np.log1p(spec.mags)
    std = y.std()
    if std < 1e-12:
        return Spectrogram(mags=np.zeros_like(y), config=spec.config)
    return Spectrogram(mags=(y - y.mean()) / std, config=spec.config)


def save_spectrogram_bin(path, spec: Spectrogram) -> None:
    """Binary export: magic, T, F (uint32 LE), then row-major float32."""
    with open(path, "wb") as f:
        f.write(_BIN_MAGIC)
        f.write(struct.pack("<II", spec.t_frames, spec.f_bins))
        f.write(np.ascontiguousarray(spec.mags, dtype="<f4").tobytes())


def load_spectrogram_bin(path, config: StftConfig | None = None) -> Spectrogram:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _BIN_MAGIC:
            raise ConfigError(f"bad spectrogram magic {magic!r}")
        t, fb = struct.unpack("<II", f.read(8))
        mags = np.frombuffer(f.read(t * fb * 4), dtype="<f4").reshape(t, fb)
    return Spectrogram(mags=mags.astype(np.float64), config=config or StftConfig())


def save_spectrogram_pgm(path, spec: Spectrogram) -> None:
    """Grayscale PGM (binary P5) for eyeballing, frequency on the vertical axis."""
    img = spec.mags.T[::-1]  # low frequencies at the bottom
    lo, hi = img.min(), img.max()
    if hi > lo:
        scaled = np.round((img - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.zeros_like(img)
    h, w = scaled.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(scaled.astype(np.uint8).tobytes())
