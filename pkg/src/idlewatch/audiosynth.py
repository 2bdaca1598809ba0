"""Multichannel scene audio: engine harmonics, background noise, cutouts.

Each microphone channel observes the sum of every running engine,
attenuated by 1/distance, plus structured ambient noise. Wireless
cutouts overwrite short stretches with a fixed alternating artifact
pattern, mimicking flaky outdoor transmitters. All streams are
counter-keyed so a vehicle's contribution is identical whether it is
rendered alone or inside a full scene.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

from .dsp import SAMPLE_RATE
from .errors import ConfigError
from .rng import generator, subseed
from .scenesim import COMBUSTION, EngineSoundParams, ScenarioSpec

__all__ = [
    "EngineSoundParams", "NoiseEvent", "NoiseSpec", "CutoutModel", "MultichannelAudio",
    "synth_engine", "mix_scene", "apply_cutout", "cutout_intervals",
    "write_wav", "read_wav",
]

# closest approach used by the 1/d amplitude law, meters
D_MIN = 0.5

# attenuation is linearly interpolated from this grid spacing (10 ms)
_GAIN_GRID = 480

EVENT_KINDS = ("speech_burst", "gust", "transient")


@dataclass(frozen=True)
class NoiseEvent:
    kind: str
    start: float
    duration: float
    level: float

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ConfigError(f"unknown noise event kind {self.kind!r}")
        if self.start < 0 or self.duration <= 0 or self.level < 0:
            raise ConfigError(f"bad noise event ({self.kind}, {self.start}, {self.duration})")


@dataclass(frozen=True)
class NoiseSpec:
    ambient_level: float = 0.01
    ambient_spectrum: str = "pink"
    events: tuple[NoiseEvent, ...] = ()

    def __post_init__(self):
        if self.ambient_level < 0:
            raise ConfigError("ambient_level must be >= 0")
        if self.ambient_spectrum not in ("white", "pink"):
            raise ConfigError(f"unknown ambient spectrum {self.ambient_spectrum!r}")


@dataclass(frozen=True)
class CutoutModel:
    rate: float = 1.0  # expected cutouts per minute per channel
    duration_range: tuple[float, float] = (0.2, 0.8)
    artifact_values: tuple[float, ...] = (0.25, -0.25)

    def __post_init__(self):
        if self.rate < 0:
            raise ConfigError("cutout rate must be >= 0")
        lo, hi = self.duration_range
        if not 0 < lo <= hi:
            raise ConfigError(f"bad cutout duration range {self.duration_range}")
        if not self.artifact_values:
            raise ConfigError("need at least one artifact value")


@dataclass
class MultichannelAudio:
    samples: np.ndarray  # (n_channels, n_samples)
    sr: int = SAMPLE_RATE

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return self.samples.shape[1] / self.sr


def synth_engine(params: EngineSoundParams, duration: float, seed: int) -> np.ndarray:
    """Harmonic stack with slow amplitude modulation; RMS matches params.amplitude."""
    if params.f0 * params.n_harmonics >= SAMPLE_RATE / 2:
        raise ConfigError(
            f"harmonics reach {params.f0 * params.n_harmonics:.0f} Hz, above Nyquist")
    n = int(math.ceil(duration * SAMPLE_RATE))
    if params.amplitude == 0.0:
        return np.zeros(n)
    rng = generator(seed, "engine-phases")
    phases = rng.uniform(0.0, 2.0 * np.pi, params.n_harmonics + 1)
    t = np.arange(n) / SAMPLE_RATE
    k = np.arange(1, params.n_harmonics + 1)
    gains = 10.0 ** (-params.harmonic_rolloff * np.log2(k) / 20.0)
    sig = np.zeros(n)
    for kk, gain, phase in zip(k, gains, phases):
        sig += gain * np.sin(2.0 * np.pi * kk * params.f0 * t + phase)
    if params.am_depth > 0:
        sig *= 1.0 + params.am_depth * np.sin(2.0 * np.pi * params.am_rate * t + phases[-1])
    # analytic RMS of the stack times the AM factor
    rms = math.sqrt(float(np.sum(gains**2)) / 2.0) * math.sqrt(1.0 + params.am_depth**2 / 2.0)
    return sig * (params.amplitude / rms)


def _engine_gate(track, n: int, sr: int) -> np.ndarray:
    """Per-sample engine state; switches are right-continuous at their timestamp."""
    gate = np.zeros(n)
    state = False
    prev = 0
    for ev_t, ev_on in track.engine_timeline:
        idx = min(int(math.ceil(ev_t * sr - 1e-9)), n)
        if state:
            gate[prev:idx] = 1.0
        prev, state = idx, ev_on
    if state:
        gate[prev:] = 1.0
    return gate


def _render_noise_channel(noise: NoiseSpec, n: int, duration: float, seed: int,
                          channel: int) -> np.ndarray:
    out = np.zeros(n)
    if noise.ambient_level > 0:
        rng = generator(seed, "ambient", channel)
        white = rng.standard_normal(n)
        if noise.ambient_spectrum == "pink":
            spectrum = np.fft.rfft(white)
            freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
            spectrum /= np.sqrt(np.maximum(freqs, 1.0))
            white = np.fft.irfft(spectrum, n)
        out += white * (noise.ambient_level / np.sqrt(np.mean(white**2)))
    for i, ev in enumerate(noise.events):
        if ev.start + ev.duration > duration + 1e-9:
            raise ConfigError(f"noise event {i} ({ev.kind}) extends past the scenario end")
        if ev.level == 0:
            continue
        rng = generator(seed, "event", i, channel)
        m = int(math.ceil(ev.duration * SAMPLE_RATE))
        burst = rng.standard_normal(m)
        if ev.kind in ("speech_burst", "gust"):
            lo, hi = (300.0, 3000.0) if ev.kind == "speech_burst" else (0.0, 200.0)
            spectrum = np.fft.rfft(burst)
            freqs = np.fft.rfftfreq(m, 1.0 / SAMPLE_RATE)
            spectrum[(freqs < lo) | (freqs > hi)] = 0.0
            burst = np.fft.irfft(spectrum, m)
            env = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(m) / m)  # smooth onset/decay
        else:  # transient: decaying broadband click
            env = np.exp(-np.arange(m) / (m / 6.0))
        burst *= env
        rms = np.sqrt(np.mean(burst**2))
        if rms > 0:
            burst *= ev.level / rms
        i0 = int(round(ev.start * SAMPLE_RATE))
        i1 = min(i0 + m, n)
        out[i0:i1] += burst[: i1 - i0]
    return out


def cutout_intervals(duration: float, cutout: CutoutModel, rng) -> list[tuple[float, float]]:
    """Poisson-placed (start, length) cutout intervals for one channel."""
    count = int(rng.poisson(cutout.rate * duration / 60.0))
    starts = rng.uniform(0.0, duration, count)
    lengths = rng.uniform(cutout.duration_range[0], cutout.duration_range[1], count)
    return sorted(zip(starts.tolist(), lengths.tolist()))


def apply_cutout(signal: np.ndarray, cutout: CutoutModel, seed: int,
                 sr: int = SAMPLE_RATE) -> np.ndarray:
    """Overwrite Poisson-placed intervals with the alternating artifact pattern."""
    out = np.array(signal, copy=True)
    rng = generator(seed, "cutout")
    values = np.asarray(cutout.artifact_values, dtype=out.dtype)
    for start, length in cutout_intervals(len(signal) / sr, cutout, rng):
        i0 = int(start * sr)
        i1 = min(int((start + length) * sr), len(out))
        if i1 > i0:
            out[i0:i1] = values[np.arange(i1 - i0) % len(values)]
    return out


def mix_scene(spec: ScenarioSpec, noise: NoiseSpec | None = None,
              cutout: CutoutModel | None = None, seed: int | None = None,
              limiter: bool = True) -> MultichannelAudio:
    """Render every microphone channel of a scene.

    Per channel: the sum over vehicles of gate(t) * attenuation(d) * engine,
    plus the noise field, then cutouts, then a [-1, 1] clamp. Contributions
    are accumulated in float32 in vehicle order, noise last, so a scene's
    mix is bit-equal to the sum of its solo renders (pre-cutout/limiter).
    """
    if seed is None:
        seed = spec.seed
    n = int(math.ceil(spec.duration * SAMPLE_RATE))
    n_ch = len(spec.mics)
    acc = np.zeros((n_ch, n), dtype=np.float32)
    sample_idx = np.arange(n, dtype=np.float64)
    grid = np.arange(0, n, _GAIN_GRID, dtype=np.float64)
    grid_times = grid / SAMPLE_RATE
    for v in spec.vehicles:
        if v.powertrain != COMBUSTION or v.engine_params is None:
            continue
        gate = _engine_gate(v, n, SAMPLE_RATE)
        if not gate.any():
            continue
        sig = synth_engine(v.engine_params, spec.duration, subseed(seed, "engine", v.vehicle_id))
        sig *= gate
        del gate
        positions = v.positions_at(grid_times)
        for c, mic in enumerate(spec.mics):
            delta = positions - np.asarray(mic.pos)
            dist = np.hypot(delta[:, 0], delta[:, 1])
            gain = 1.0 / np.maximum(dist, D_MIN)
            if mic.directivity == "cardioid":
                facing = np.asarray(mic.facing) / math.hypot(*mic.facing)
                cos_theta = (delta @ facing) / np.maximum(dist, 1e-9)
                gain *= (1.0 + cos_theta) / 2.0
            full = np.interp(sample_idx, grid, gain)
            full *= sig
            acc[c] += full.astype(np.float32)
            del full
        del sig
    if noise is not None:
        for c in range(n_ch):
            acc[c] += _render_noise_channel(noise, n, spec.duration, seed, c).astype(np.float32)
    if cutout is not None:
        for c in range(n_ch):
            acc[c] = apply_cutout(acc[c], cutout, subseed(seed, "cutout-ch", c))
    if limiter:
        np.clip(acc, -1.0, 1.0, out=acc)
    return MultichannelAudio(samples=acc, sr=SAMPLE_RATE)


def write_wav(path, samples: np.ndarray, sr: int = SAMPLE_RATE) -> None:
    """Mono PCM 16-bit little-endian."""
    clipped = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    wavfile.write(path, sr, np.round(clipped * 32767.0).astype("<i2"))


def read_wav(path) -> tuple[np.ndarray, int]:
    sr, data = wavfile.read(path)
    if data.dtype != np.int16:
        raise ConfigError(f"{path}: expected 16-bit PCM, got {data.dtype}")
    return data.astype(np.float64) / 32767.0, int(sr)
