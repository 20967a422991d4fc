"""Waveform ingestion and mel-filterbank features on a fixed 10 ms frame clock.

The frame clock is the load-bearing convention of the whole system: a
waveform of duration ``d`` seconds yields exactly ``floor(d / 0.010)``
feature frames, so 3.2 s maps to 320 frames and 12.8 s to 1280 frames,
and frame counts are additive under hop-aligned concatenation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

# Absorbs float representation error in duration/hop divisions (3.2/0.01
# is not exactly representable); never large enough to add a frame.
_GRID_EPS = 1e-9


@dataclass(frozen=True)
class FeatureConfig:
    """Mel front-end configuration.

    The 10 ms hop is fixed by the frame arithmetic above; the remaining
    knobs (window, bin count, band edges) are conventional.
    """

    sample_rate: int = 16000
    n_mels: int = 64
    frame_hop_s: float = 0.010
    frame_window_s: float = 0.025
    fmin_hz: float = 20.0
    fmax_hz: float = 7600.0
    normalize: bool = True

    @property
    def hop_length(self) -> int:
        return int(round(self.frame_hop_s * self.sample_rate))

    @property
    def win_length(self) -> int:
        return int(round(self.frame_window_s * self.sample_rate))

    @property
    def n_fft(self) -> int:
        return 1 << (self.win_length - 1).bit_length()


@dataclass(frozen=True)
class Waveform:
    """Mono waveform at a fixed 16 kHz sample rate."""

    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.ndim != 1:
            raise ValueError(f"waveform must be mono 1-D, got shape {samples.shape}")
        if samples.size < 1:
            raise ValueError("waveform must contain at least one sample")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError(f"invalid sample rate {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class MelFeatureSequence:
    """Time-ordered mel feature frames, shape (T_frames, n_mels)."""

    frames: np.ndarray
    frame_hop_s: float = 0.010
    frame_window_s: float = 0.025

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise ValueError(f"expected (T, n_mels) with T >= 1, got {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ValueError("feature frames contain non-finite values")
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]


def frames_for_duration(duration_s: float, frame_hop_s: float = 0.010) -> int:
    """Number of complete frames in `duration_s` seconds: floor(d / hop)."""
    if duration_s < 0:
        raise ValueError(f"duration must be non-negative, got {duration_s}")
    return int(math.floor(duration_s / frame_hop_s + _GRID_EPS))


def _hz_to_mel(freq_hz):
    return 2595.0 * np.log10(1.0 + np.asarray(freq_hz, dtype=np.float64) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int,
                   fmin_hz: float, fmax_hz: float) -> np.ndarray:
    """Triangular mel filterbank, shape (n_mels, n_fft // 2 + 1)."""
    if not 0 <= fmin_hz < fmax_hz <= sample_rate / 2:
        raise ValueError(f"invalid band edges [{fmin_hz}, {fmax_hz}] at {sample_rate} Hz")
    n_bins = n_fft // 2 + 1
    bin_hz = np.arange(n_bins) * sample_rate / n_fft
    corners = _mel_to_hz(np.linspace(_hz_to_mel(fmin_hz), _hz_to_mel(fmax_hz), n_mels + 2))
    bank = np.zeros((n_mels, n_bins), dtype=np.float64)
    for m in range(n_mels):
        left, center, right = corners[m], corners[m + 1], corners[m + 2]
        up = (bin_hz - left) / max(center - left, 1e-12)
        down = (right - bin_hz) / max(right - center, 1e-12)
        bank[m] = np.clip(np.minimum(up, down), 0.0, None)
    return bank.astype(np.float32)


class MelExtractor:
    """Frame-synchronous log-mel extractor.

    Frame ``i`` covers samples ``[i * hop, i * hop + win)``; the tail is
    zero-padded so the frame count is exactly ``len(samples) // hop``.
    """

    def __init__(self, config: FeatureConfig | None = None):
        self.config = config or FeatureConfig()
        cfg = self.config
        self._window = np.hamming(cfg.win_length).astype(np.float32)
        self._bank = mel_filterbank(cfg.n_mels, cfg.n_fft, cfg.sample_rate,
                                    cfg.fmin_hz, cfg.fmax_hz)

    def __call__(self, waveform: Waveform) -> MelFeatureSequence:
        cfg = self.config
        if waveform.sample_rate != cfg.sample_rate:
            raise ValueError(
                f"waveform rate {waveform.sample_rate} != configured {cfg.sample_rate}; "
                "resample on ingestion (see load_wav)")
        samples = waveform.samples
        if samples.size < cfg.win_length:
            raise ValueError(
                f"waveform of {samples.size} samples is shorter than one "
                f"{cfg.win_length}-sample analysis window")
        n_frames = samples.size // cfg.hop_length
        pad = (n_frames - 1) * cfg.hop_length + cfg.win_length - samples.size
        if pad > 0:
            samples = np.concatenate([samples, np.zeros(pad, dtype=np.float32)])
        idx = (np.arange(n_frames)[:, None] * cfg.hop_length + np.arange(cfg.win_length)[None, :])
        frames = samples[idx] * self._window
        spec = np.fft.rfft(frames, n=cfg.n_fft, axis=1)
        power = (spec.real ** 2 + spec.imag ** 2)
        mel = power @ self._bank.T
        logmel = np.log(np.maximum(mel, 1e-10)).astype(np.float32)
        if cfg.normalize:
            logmel = _mvn(logmel)
        return MelFeatureSequence(logmel, cfg.frame_hop_s, cfg.frame_window_s)


def _mvn(frames: np.ndarray) -> np.ndarray:
    """Per-bin mean/variance normalization over the utterance."""
    mean = frames.mean(axis=0, keepdims=True)
    std = frames.std(axis=0, keepdims=True)
    return ((frames - mean) / np.maximum(std, 1e-5)).astype(np.float32)


def extract_mel(waveform: Waveform, config: FeatureConfig | None = None) -> MelFeatureSequence:
    """One-shot mel extraction; build a MelExtractor for repeated use."""
    return MelExtractor(config)(waveform)


def load_wav(path, target_rate: int = 16000) -> Waveform:
    """Read a mono PCM WAV (16-bit or float), resampling to `target_rate`."""
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.ndim} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float32) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float32)
    else:
        raise ValueError(f"{path}: unsupported WAV sample format {data.dtype}")
    if rate != target_rate:
        g = math.gcd(rate, target_rate)
        samples = resample_poly(samples, target_rate // g, rate // g).astype(np.float32)
    return Waveform(samples, target_rate)


def save_wav(path, waveform: Waveform) -> None:
    """Write a waveform as 16-bit PCM WAV."""
    scaled = np.round(np.clip(waveform.samples, -1.0, 1.0) * 32768.0)
    wavfile.write(path, waveform.sample_rate,
                  np.clip(scaled, -32768, 32767).astype(np.int16))
