"""On-the-fly synthesis of multi-speaker training mixtures.

A mixture is built by concatenating cropped single-speaker utterances
(1-4 speakers, drawn with probabilities 0.10/0.30/0.30/0.30), corrupting
the waveform with two augmentation passes (additive noise or room
reverberation), extracting normalized mel features, masking 2-5 random
frequency bands, and shuffling contiguous 0.5-3 s feature blocks together
with their frame labels. Labels are global speaker ids carried per frame.

The batched path synthesizes one long mixture (default 12.8 s = 1280
frames) and slices it into four 320-frame training samples with no frame
discarded; the naive path builds one sample from whole utterances and
throws the excess away, which is what makes it slow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .corpus import SpeakerCorpus
from .features import (FeatureConfig, MelExtractor, Waveform,
                       frames_for_duration)

SPEAKER_COUNT_PROBS = (0.10, 0.30, 0.30, 0.30)


@dataclass(frozen=True)
class SynthesisConfig:
    mixture_dur_s: float = 12.8
    samples_per_mixture: int = 4
    sample_frames: int = 320
    speaker_count_probs: tuple[float, ...] = SPEAKER_COUNT_PROBS
    block_dur_range_s: tuple[float, float] = (0.5, 3.0)
    specaug_drops_range: tuple[int, int] = (2, 5)
    specaug_width_range: tuple[int, int] = (1, 8)
    aug_pass_prob: float = 0.5
    aug_n_passes: int = 2
    snr_db_range: tuple[float, float] = (0.0, 20.0)
    augment_enabled: bool = True
    specaug_enabled: bool = True
    shuffle_enabled: bool = True
    noise_dir: str | None = None
    rir_dir: str | None = None

    def __post_init__(self):
        probs = tuple(float(p) for p in self.speaker_count_probs)
        if len(probs) != 4 or abs(sum(probs) - 1.0) > 1e-9 or min(probs) < 0:
            raise ValueError(f"speaker_count_probs must be 4 non-negative values summing to 1, got {probs}")
        object.__setattr__(self, "speaker_count_probs", probs)


def sample_speaker_count(rng: np.random.Generator,
                         probs: tuple[float, ...] = SPEAKER_COUNT_PROBS) -> int:
    """Draw the number of speakers (1-4) for one mixture."""
    return int(rng.choice(len(probs), p=probs)) + 1


@dataclass(frozen=True)
class Section:
    """One contiguous stretch of a mixture sourced from a single utterance."""

    speaker_id: int
    utterance_index: int
    offset_samples: int
    n_samples: int


@dataclass(frozen=True)
class MixturePlan:
    sections: tuple[Section, ...]
    sample_rate: int

    def __post_init__(self):
        if not self.sections:
            raise ValueError("mixture plan has no sections")
        if not 1 <= len(self.speaker_ids) <= 4:
            raise ValueError(f"plans cover 1-4 distinct speakers, got {len(self.speaker_ids)}")

    @property
    def speaker_ids(self) -> tuple[int, ...]:
        seen: dict[int, None] = {}
        for sec in self.sections:
            seen.setdefault(sec.speaker_id, None)
        return tuple(seen)

    @property
    def total_samples(self) -> int:
        return sum(sec.n_samples for sec in self.sections)


def plan_mixture(corpus: SpeakerCorpus, rng: np.random.Generator,
                 target_dur_s: float,
                 probs: tuple[float, ...] = SPEAKER_COUNT_PROBS,
                 hop_s: float = 0.010) -> MixturePlan:
    """Plan an exact-duration mixture with hop-aligned per-speaker shares.

    The target duration is split evenly (in whole frames) across the drawn
    speakers; each share is filled by cropping randomly chosen utterances
    of that speaker, so no source material is wasted.
    """
    k = min(sample_speaker_count(rng, probs), corpus.n_speakers)
    speakers = rng.choice(corpus.n_speakers, size=k, replace=False)
    hop = int(round(hop_s * corpus.sample_rate))
    total_frames = frames_for_duration(target_dur_s, hop_s)
    share_frames = [total_frames // k + (1 if i < total_frames % k else 0) for i in range(k)]
    sections: list[Section] = []
    for spk, frames in zip(speakers, share_frames):
        need = frames * hop
        utts = corpus.utterances[int(spk)]
        order = rng.permutation(len(utts))
        i = 0
        while need > 0:
            utt_idx = int(order[i % len(order)])
            utt_len = utts[utt_idx].samples.size
            take = min(utt_len, need)
            offset = int(rng.integers(0, utt_len - take + 1))
            sections.append(Section(int(spk), utt_idx, offset, take))
            need -= take
            i += 1
    return MixturePlan(tuple(sections), corpus.sample_rate)


def plan_natural_mixture(corpus: SpeakerCorpus, rng: np.random.Generator,
                         min_dur_s: float,
                         probs: tuple[float, ...] = SPEAKER_COUNT_PROBS) -> MixturePlan:
    """Plan a mixture from whole utterances, one per drawn speaker.

    The result is at least `min_dur_s` long and usually much longer; the
    caller crops what it needs and discards the rest.
    """
    k = min(sample_speaker_count(rng, probs), corpus.n_speakers)
    speakers = [int(s) for s in rng.choice(corpus.n_speakers, size=k, replace=False)]
    sections: list[Section] = []
    total = 0
    for spk in speakers:
        utt_idx = int(rng.integers(len(corpus.utterances[spk])))
        n = corpus.utterances[spk][utt_idx].samples.size
        sections.append(Section(spk, utt_idx, 0, n))
        total += n
    min_samples = int(math.ceil(min_dur_s * corpus.sample_rate))
    while total < min_samples:
        spk = int(rng.choice(speakers))
        utt_idx = int(rng.integers(len(corpus.utterances[spk])))
        n = corpus.utterances[spk][utt_idx].samples.size
        sections.append(Section(spk, utt_idx, 0, n))
        total += n
    return MixturePlan(tuple(sections), corpus.sample_rate)


def build_mixture(plan: MixturePlan, corpus: SpeakerCorpus) -> tuple[Waveform, np.ndarray]:
    """Realize a plan: concatenated waveform plus per-sample speaker labels."""
    pieces = []
    labels = []
    for sec in plan.sections:
        if not 0 <= sec.speaker_id < corpus.n_speakers:
            raise ValueError(f"plan references unknown speaker {sec.speaker_id}")
        utts = corpus.utterances[sec.speaker_id]
        if sec.utterance_index >= len(utts):
            raise ValueError(
                f"speaker {sec.speaker_id} has no usable utterance {sec.utterance_index}")
        samples = utts[sec.utterance_index].samples
        piece = samples[sec.offset_samples: sec.offset_samples + sec.n_samples]
        if piece.size != sec.n_samples:
            raise ValueError(f"section exceeds utterance bounds: {sec}")
        pieces.append(piece)
        labels.append(np.full(sec.n_samples, sec.speaker_id, dtype=np.int32))
    return (Waveform(np.concatenate(pieces), plan.sample_rate),
            np.concatenate(labels))


def frame_labels(sample_labels: np.ndarray, hop_length: int) -> np.ndarray:
    """Reduce per-sample speaker labels to per-frame labels by majority vote.

    Frame ``i`` spans samples ``[i * hop, (i + 1) * hop)``; ties break
    toward the smaller speaker id. Exact when section boundaries are
    hop-aligned, which the exact-share planner guarantees.
    """
    n_frames = sample_labels.size // hop_length
    spans = sample_labels[: n_frames * hop_length].reshape(n_frames, hop_length)
    values = np.unique(spans)
    counts = np.stack([(spans == v).sum(axis=1) for v in values], axis=1)
    return values[np.argmax(counts, axis=1)].astype(np.int32)


# ---------------------------------------------------------------------------
# Waveform augmentation: two passes of additive noise or room reverberation.
# ---------------------------------------------------------------------------

class AugmentationPipeline:
    """Applies `n_passes` independent corruption passes to a waveform.

    Each pass fires with probability `pass_prob` and then picks additive
    noise (at an SNR drawn from `snr_db_range`) or convolution with a room
    impulse response, 50/50. Without asset directories, a small bank of
    procedural noises and exponentially decaying impulse responses is used.
    """

    def __init__(self, config: SynthesisConfig, sample_rate: int = 16000,
                 asset_seed: int = 1234):
        self.config = config
        self.sample_rate = sample_rate
        if config.noise_dir is not None:
            self.noises = _load_asset_dir(config.noise_dir, sample_rate)
        else:
            self.noises = _default_noises(sample_rate, asset_seed)
        if config.rir_dir is not None:
            self.rirs = _load_asset_dir(config.rir_dir, sample_rate)
        else:
            self.rirs = _default_rirs(sample_rate, asset_seed + 1)

    def apply(self, waveform: Waveform, rng: np.random.Generator) -> Waveform:
        samples = waveform.samples
        for _ in range(self.config.aug_n_passes):
            if rng.random() >= self.config.aug_pass_prob:
                continue
            if rng.random() < 0.5:
                samples = self._add_noise(samples, rng)
            else:
                samples = self._reverberate(samples, rng)
        return Waveform(samples, waveform.sample_rate)

    def _add_noise(self, samples: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        clip = self.noises[int(rng.integers(len(self.noises)))]
        if clip.size < samples.size:
            clip = np.tile(clip, int(np.ceil(samples.size / clip.size)))
        start = int(rng.integers(0, clip.size - samples.size + 1))
        noise = clip[start: start + samples.size]
        snr_db = rng.uniform(*self.config.snr_db_range)
        sig_pow = np.mean(samples.astype(np.float64) ** 2) + 1e-12
        noise_pow = np.mean(noise.astype(np.float64) ** 2) + 1e-12
        scale = np.sqrt(sig_pow / (noise_pow * 10.0 ** (snr_db / 10.0)))
        return (samples + scale * noise).astype(np.float32)

    def _reverberate(self, samples: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        rir = self.rirs[int(rng.integers(len(self.rirs)))]
        wet = fftconvolve(samples.astype(np.float64), rir.astype(np.float64))[: samples.size]
        in_rms = np.sqrt(np.mean(samples.astype(np.float64) ** 2) + 1e-12)
        wet_rms = np.sqrt(np.mean(wet ** 2) + 1e-12)
        return (wet * (in_rms / wet_rms)).astype(np.float32)


def _load_asset_dir(directory: str, sample_rate: int) -> list[np.ndarray]:
    from .features import load_wav

    path = Path(directory)
    if not path.is_dir():
        raise FileNotFoundError(f"augmentation asset directory not found: {directory}")
    clips = [load_wav(p, target_rate=sample_rate).samples for p in sorted(path.glob("*.wav"))]
    if not clips:
        raise FileNotFoundError(f"no .wav assets in {directory}")
    return clips


def _default_noises(sample_rate: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    n = 4 * sample_rate
    clips = [rng.normal(0, 1, n)]
    for slope in (1.0, 2.0):  # pink and brown
        spec = np.fft.rfft(rng.normal(0, 1, n))
        freqs = np.maximum(np.fft.rfftfreq(n, 1 / sample_rate), 1.0)
        clips.append(np.fft.irfft(spec / freqs ** (slope / 2.0), n))
    am = 0.5 + 0.5 * np.sin(2 * np.pi * 3.0 * np.arange(n) / sample_rate)
    clips.append(clips[1] * am)
    return [(c / np.sqrt(np.mean(c ** 2))).astype(np.float32) for c in clips]


def _default_rirs(sample_rate: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    rirs = []
    for t60 in (0.08, 0.15, 0.25, 0.40):
        n = int(0.5 * t60 * sample_rate) + int(0.1 * sample_rate)
        t = np.arange(n) / sample_rate
        tail = rng.normal(0, 1, n) * np.exp(-6.9 * t / t60)
        tail[0] = 3.0  # direct path dominates
        rirs.append((tail / np.sqrt(np.sum(tail ** 2))).astype(np.float32))
    return rirs


# ---------------------------------------------------------------------------
# Feature-domain augmentation and block-wise shuffling.
# ---------------------------------------------------------------------------

def spec_augment(frames: np.ndarray, rng: np.random.Generator,
                 drops_range: tuple[int, int] = (2, 5),
                 width_range: tuple[int, int] = (1, 8)) -> np.ndarray:
    """Zero out randomly placed frequency bands of (T, n_mels) features.

    The number of masked bands is uniform on ``{drops_range[0], ...,
    drops_range[1]}`` and each band's width uniform on `width_range`.
    Time frames are never masked.
    """
    n_mels = frames.shape[1]
    lo, hi = drops_range
    n_drops = int(rng.integers(lo, hi + 1))
    if n_drops == 0:
        return frames.copy()
    if n_mels < 6:
        raise ValueError(f"frequency masking needs >= 6 mel bins, got {n_mels}")
    out = frames.copy()
    for _ in range(n_drops):
        width = min(int(rng.integers(width_range[0], width_range[1] + 1)), n_mels - 1)
        start = int(rng.integers(0, n_mels - width + 1))
        out[:, start: start + width] = 0.0
    return out


def make_block_partition(n_frames: int, rng: np.random.Generator,
                         block_frames_range: tuple[int, int] = (50, 300)) -> list[tuple[int, int]]:
    """Tile `[0, n_frames)` with contiguous blocks of drawn lengths.

    Every block length is drawn uniformly from `block_frames_range`; a
    final remainder shorter than the minimum is emitted as its own block
    rather than rejecting the partition. Inputs shorter than twice the
    minimum stay whole.
    """
    min_len, max_len = block_frames_range
    if n_frames < 1:
        raise ValueError("cannot partition an empty sample")
    blocks: list[tuple[int, int]] = []
    pos = 0
    while pos < n_frames:
        if n_frames - pos < 2 * min_len:
            blocks.append((pos, n_frames))
            break
        length = min(int(rng.integers(min_len, max_len + 1)), n_frames - pos)
        blocks.append((pos, pos + length))
        pos += length
    return blocks


def apply_block_permutation(blocks: list[tuple[int, int]], perm: np.ndarray,
                            *arrays: np.ndarray) -> tuple[np.ndarray, ...]:
    """Reorder the given arrays' leading axis block-wise under one permutation."""
    order = [blocks[int(p)] for p in perm]
    return tuple(np.concatenate([a[s:e] for s, e in order], axis=0) for a in arrays)


def block_shuffle(frames: np.ndarray, labels: np.ndarray, rng: np.random.Generator,
                  block_dur_range_s: tuple[float, float] = (0.5, 3.0),
                  frame_hop_s: float = 0.010) -> tuple[np.ndarray, np.ndarray]:
    """Shuffle contiguous feature blocks, moving labels with their frames."""
    if frames.shape[0] != labels.shape[0]:
        raise ValueError("features and labels must cover the same frames")
    lo = frames_for_duration(block_dur_range_s[0], frame_hop_s)
    hi = frames_for_duration(block_dur_range_s[1], frame_hop_s)
    blocks = make_block_partition(frames.shape[0], rng, (lo, hi))
    perm = rng.permutation(len(blocks))
    return apply_block_permutation(blocks, perm, frames, labels)


# ---------------------------------------------------------------------------
# The synthesizer: deterministic per-index mixture generation.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MixtureSample:
    """One training sample: features (T, n_mels) and per-frame global labels (T,)."""

    features: np.ndarray
    labels: np.ndarray
    speaker_ids: tuple[int, ...]
    mixture_index: int
    part: int = 0

    def __post_init__(self):
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("labels must cover every feature frame")
        present = set(int(v) for v in np.unique(self.labels))
        if not present <= set(self.speaker_ids):
            raise ValueError(f"labels {present} outside plan speakers {self.speaker_ids}")


class MixtureSynthesizer:
    """Deterministic on-the-fly mixture source.

    Randomness for mixture ``i`` comes from a private stream derived from
    ``(seed, worker, i)``, so any sample can be regenerated independently
    and concurrent workers never share state.
    """

    def __init__(self, corpus: SpeakerCorpus, config: SynthesisConfig | None = None,
                 feature_config: FeatureConfig | None = None,
                 seed: int = 0, worker: int = 0):
        self.corpus = corpus
        self.config = config or SynthesisConfig()
        self.feature_config = feature_config or FeatureConfig()
        self.seed = seed
        self.worker = worker
        cfg = self.config
        mixture_frames = frames_for_duration(cfg.mixture_dur_s, self.feature_config.frame_hop_s)
        if mixture_frames != cfg.samples_per_mixture * cfg.sample_frames:
            raise ValueError(
                f"mixture of {mixture_frames} frames does not split into "
                f"{cfg.samples_per_mixture} x {cfg.sample_frames}")
        self.extractor = MelExtractor(self.feature_config)
        self.augmenter = AugmentationPipeline(cfg, self.corpus.sample_rate)

    def rng_for(self, index: int) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence(entropy=self.seed, spawn_key=(self.worker, index)))

    def _prepare(self, plan: MixturePlan, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        cfg = self.config
        wave, sample_labels = build_mixture(plan, self.corpus)
        if cfg.augment_enabled:
            wave = self.augmenter.apply(wave, rng)
        feats = self.extractor(wave).frames
        labels = frame_labels(sample_labels, self.feature_config.hop_length)[: feats.shape[0]]
        if cfg.specaug_enabled:
            feats = spec_augment(feats, rng, cfg.specaug_drops_range, cfg.specaug_width_range)
        if cfg.shuffle_enabled:
            feats, labels = block_shuffle(feats, labels, rng, cfg.block_dur_range_s,
                                          self.feature_config.frame_hop_s)
        return feats, labels

    def mixture(self, index: int) -> list[MixtureSample]:
        """Batched path: one long mixture sliced into `samples_per_mixture` samples."""
        cfg = self.config
        rng = self.rng_for(index)
        plan = plan_mixture(self.corpus, rng, cfg.mixture_dur_s,
                            cfg.speaker_count_probs, self.feature_config.frame_hop_s)
        feats, labels = self._prepare(plan, rng)
        samples = []
        for part in range(cfg.samples_per_mixture):
            sl = slice(part * cfg.sample_frames, (part + 1) * cfg.sample_frames)
            samples.append(MixtureSample(feats[sl], labels[sl], plan.speaker_ids, index, part))
        return samples

    def single(self, index: int) -> MixtureSample:
        """Naive path: build from whole utterances, keep one sample, discard the rest."""
        cfg = self.config
        rng = self.rng_for(index)
        sample_dur_s = cfg.sample_frames * self.feature_config.frame_hop_s
        plan = plan_natural_mixture(self.corpus, rng, sample_dur_s, cfg.speaker_count_probs)
        feats, labels = self._prepare(plan, rng)
        return MixtureSample(feats[: cfg.sample_frames], labels[: cfg.sample_frames],
                             plan.speaker_ids, index)

    def batch(self, batch_index: int, batch_size: int) -> list[MixtureSample]:
        """Deterministic batch `batch_index`, independent of generation history."""
        per = self.config.samples_per_mixture
        n_mix = (batch_size + per - 1) // per
        start = batch_index * n_mix
        out: list[MixtureSample] = []
        for i in range(n_mix):
            out.extend(self.mixture(start + i))
        return out[:batch_size]
