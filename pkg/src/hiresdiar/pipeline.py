"""Sliding-window diarization: extract, refine, cluster, assemble intervals.

Voiced segments (oracle endpoints) are scanned with 3.2 s windows shifted
by 0.8 s; every window emits one embedding per 80 ms slot, and slots seen
by several windows average their raw embeddings before length
normalization. An optional refinement stage reduces dimensionality with a
per-session linear auto-encoder (equivalently PCA) and smooths each slot
with similarity-weighted attention over the whole session. Slots are then
clustered and merged into labeled intervals.

A conventional coarse extractor (one pooled embedding per 0.5 s stride
from 1.5 s windows) is provided for resolution comparisons.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
import torch

from .clustering import (
    DEFAULT_EIG_THRESHOLD,
    DEFAULT_MAX_SPEAKERS,
    DEFAULT_TOP_P,
    cluster_embeddings,
)
from .features import FeatureConfig, MelExtractor, Waveform, frames_for_duration
from .model import COMPRESSION, HeeModel, PooledSpeakerModel
from .scoring import RttmRecord, merge_intervals


@dataclass(frozen=True)
class VoicedSegment:
    start_s: float
    end_s: float

    def __post_init__(self):
        if not self.end_s > self.start_s:
            raise ValueError(f"segment end {self.end_s} must exceed start {self.start_s}")

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


def segments_from_reference(records: list[RttmRecord]) -> list[VoicedSegment]:
    """Oracle endpoints: the union of all reference speech in one session."""
    merged = merge_intervals([(r.onset_s, r.end_s) for r in records if r.duration_s > 0])
    return [VoicedSegment(s, e) for s, e in merged]


def _check_segments(segments: list[VoicedSegment], duration_s: float) -> list[VoicedSegment]:
    ordered = sorted(segments, key=lambda s: s.start_s)
    for a, b in zip(ordered, ordered[1:]):
        if b.start_s < a.end_s - 1e-9:
            raise ValueError(f"segments overlap: [{a.start_s}, {a.end_s}) and "
                             f"[{b.start_s}, {b.end_s})")
    if ordered and ordered[-1].end_s > duration_s + 1e-6:
        raise ValueError(f"segment end {ordered[-1].end_s} beyond audio "
                         f"duration {duration_s:.3f}")
    return ordered


@dataclass(frozen=True)
class EmbeddingTimeline:
    """Finalized per-slot embeddings with their absolute times and coverage."""

    starts: np.ndarray      # (n,) slot start, seconds
    ends: np.ndarray        # (n,) slot end, seconds
    embeddings: np.ndarray  # (n, d) unit-norm rows
    coverage: np.ndarray    # (n,) number of windows that contributed

    def __post_init__(self):
        n = len(self.starts)
        if not (len(self.ends) == n and self.embeddings.shape[0] == n
                and len(self.coverage) == n):
            raise ValueError("timeline field lengths disagree")

    @property
    def n_slots(self) -> int:
        return len(self.starts)


class TimelineAccumulator:
    """Collects raw window embeddings per slot; finalizes to mean + unit norm."""

    def __init__(self):
        self._starts: list[float] = []
        self._ends: list[float] = []
        self._sums: list[np.ndarray] = []
        self._counts: list[int] = []
        self._dim = 0

    def add_slots(self, starts: list[float], ends: list[float], dim: int) -> int:
        base = len(self._starts)
        self._starts.extend(starts)
        self._ends.extend(ends)
        self._sums.extend(np.zeros(dim) for _ in starts)
        self._counts.extend(0 for _ in starts)
        self._dim = dim
        return base

    def accumulate(self, slot_index: int, embedding: np.ndarray) -> None:
        self._sums[slot_index] += embedding
        self._counts[slot_index] += 1

    def finalize(self) -> EmbeddingTimeline:
        if not self._starts:
            return EmbeddingTimeline(np.zeros(0), np.zeros(0),
                                     np.zeros((0, self._dim)), np.zeros(0, dtype=int))
        counts = np.asarray(self._counts)
        if np.any(counts == 0):
            raise RuntimeError("internal error: uncovered timeline slot")
        mean = np.stack(self._sums) / counts[:, None]
        norms = np.linalg.norm(mean, axis=1)
        if np.any(norms < 1e-12):
            raise ValueError("zero-norm averaged embedding in timeline")
        return EmbeddingTimeline(
            starts=np.asarray(self._starts),
            ends=np.asarray(self._ends),
            embeddings=(mean / norms[:, None]).astype(np.float64),
            coverage=counts,
        )


def _window_plan(n_frames: int, window_frames: int, shift_frames: int) -> list[tuple[int, int]]:
    """Slot-aligned (start, length) window placements covering all full slots.

    Windows step by the shift while they fit; if complete slots remain past
    the last full window, one more full window is placed flush with the
    final complete slot. Segments shorter than one window become a single
    all-frames window (the caller pads it and drops the padded slots).
    """
    n_slots = n_frames // COMPRESSION
    if n_frames < window_frames:
        return [(0, n_frames)] if n_slots else []
    starts = list(range(0, n_frames - window_frames + 1, shift_frames))
    covered = (starts[-1] + window_frames) // COMPRESSION
    if covered < n_slots:
        starts.append(n_slots * COMPRESSION - window_frames)
    return [(s, window_frames) for s in starts]


def slide_extract(
    waveform: Waveform,
    segments: list[VoicedSegment],
    model: HeeModel,
    feature_config: FeatureConfig | None = None,
    window_s: float = 3.2,
    shift_s: float = 0.8,
    forward_batch: int = 16,
) -> EmbeddingTimeline:
    """Per-slot embeddings over the voiced parts of one session.

    Each 3.2 s window yields 40 embeddings at 80 ms resolution; overlapping
    windows average their raw embeddings per slot before normalization.
    Segments shorter than the window become a single window padded to a
    multiple of 8 frames with the padded slots discarded; segments shorter
    than one slot are skipped with a warning.
    """
    feature_config = feature_config or FeatureConfig()
    hop_s = feature_config.frame_hop_s
    window_frames = frames_for_duration(window_s, hop_s)
    shift_frames = frames_for_duration(shift_s, hop_s)
    if window_frames % COMPRESSION or window_frames == 0:
        raise ValueError(f"window of {window_frames} frames is not a multiple of {COMPRESSION}")
    if shift_frames % COMPRESSION or shift_frames == 0:
        raise ValueError(f"shift of {shift_frames} frames is not a positive multiple "
                         f"of {COMPRESSION}")
    segments = _check_segments(segments, waveform.duration_s)
    extractor = MelExtractor(feature_config)
    slot_s = COMPRESSION * hop_s
    rate = waveform.sample_rate

    model.eval()
    acc = TimelineAccumulator()
    jobs: list[tuple[np.ndarray, int, int]] = []  # (window frames, slot base, keep)
    for seg in segments:
        lo = int(round(seg.start_s * rate))
        hi = min(int(round(seg.end_s * rate)), len(waveform.samples))
        mel = extractor(Waveform(waveform.samples[lo:hi], rate)).frames
        n_slots = mel.shape[0] // COMPRESSION
        if n_slots == 0:
            warnings.warn(f"segment [{seg.start_s:.3f}, {seg.end_s:.3f}) shorter than "
                          f"one {slot_s * 1000:.0f} ms slot; skipped")
            continue
        base = acc.add_slots(
            [seg.start_s + i * slot_s for i in range(n_slots)],
            [seg.start_s + (i + 1) * slot_s for i in range(n_slots)],
            dim=model.config.d_model)
        for start, length in _window_plan(mel.shape[0], window_frames, shift_frames):
            chunk = mel[start:start + length]
            pad = -len(chunk) % COMPRESSION
            keep = len(chunk) // COMPRESSION
            if pad:
                chunk = np.pad(chunk, ((0, pad), (0, 0)))
            jobs.append((chunk, base + start // COMPRESSION, keep))

    with torch.no_grad():
        by_length: dict[int, list[tuple[np.ndarray, int, int]]] = {}
        for job in jobs:
            by_length.setdefault(job[0].shape[0], []).append(job)
        for same in by_length.values():
            for i in range(0, len(same), forward_batch):
                batch = same[i:i + forward_batch]
                out = model(torch.from_numpy(np.stack([j[0] for j in batch]))).numpy()
                for (_, slot_base, keep), window_emb in zip(batch, out):
                    for k in range(keep):
                        acc.accumulate(slot_base + k, window_emb[k].astype(np.float64))
    return acc.finalize()


def refine_embeddings(
    timeline: EmbeddingTimeline,
    dim: int = 32,
    attention_scale: float = 30.0,
) -> EmbeddingTimeline:
    """Reduce dimension per session, then smooth slots by similarity attention.

    The reduction is the optimal linear auto-encoder (PCA to ``dim``);
    attention re-expresses every slot as a softmax-weighted mixture of the
    session's reduced embeddings. If the session has fewer slots than the
    reduced dimension the stage bypasses itself with a warning.
    """
    x = timeline.embeddings
    n, d = x.shape
    dim = min(dim, d)
    if n < max(2, dim):
        warnings.warn(f"refinement bypassed: {n} slots < reduced dimension {dim}")
        return timeline
    centered = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    reduced = centered @ vt[:dim].T
    norms = np.maximum(np.linalg.norm(reduced, axis=1, keepdims=True), 1e-12)
    unit = reduced / norms
    logits = attention_scale * (unit @ unit.T)
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=1, keepdims=True)
    mixed = weights @ reduced
    out_norms = np.maximum(np.linalg.norm(mixed, axis=1, keepdims=True), 1e-12)
    return replace(timeline, embeddings=mixed / out_norms)


def assemble_hypothesis(labels: np.ndarray, timeline: EmbeddingTimeline
                        ) -> list[tuple[float, float, int]]:
    """Merge consecutive same-label slots into (start, end, label) intervals.

    Slots merge only when time-adjacent, so intervals never bridge the gap
    between voiced segments and never overlap.
    """
    labels = np.asarray(labels)
    if len(labels) != timeline.n_slots:
        raise ValueError(f"{len(labels)} labels for {timeline.n_slots} slots")
    intervals: list[tuple[float, float, int]] = []
    for i in range(timeline.n_slots):
        start, end, lab = float(timeline.starts[i]), float(timeline.ends[i]), int(labels[i])
        if intervals and intervals[-1][2] == lab and abs(intervals[-1][1] - start) < 1e-9:
            intervals[-1] = (intervals[-1][0], end, lab)
        else:
            intervals.append((start, end, lab))
    return intervals


@dataclass(frozen=True)
class PipelineConfig:
    window_s: float = 3.2
    shift_s: float = 0.8
    refine_enabled: bool = True
    refine_dim: int = 32
    refine_attention_scale: float = 30.0
    top_p: float = DEFAULT_TOP_P
    eig_threshold: float = DEFAULT_EIG_THRESHOLD
    max_speakers: int = DEFAULT_MAX_SPEAKERS
    seed: int = 0


@dataclass(frozen=True)
class DiarizationResult:
    intervals: list[tuple[float, float, int]]
    n_speakers: int
    labels: np.ndarray
    timeline: EmbeddingTimeline

    def to_rttm(self, session: str, prefix: str = "spk") -> list[RttmRecord]:
        return [RttmRecord(session, s, e - s, f"{prefix}{lab}")
                for s, e, lab in self.intervals]


def _cluster_and_assemble(timeline: EmbeddingTimeline, config: PipelineConfig,
                          num_speakers: int | None) -> DiarizationResult:
    if timeline.n_slots == 0:
        return DiarizationResult([], 0, np.zeros(0, dtype=np.int64), timeline)
    labels, k = cluster_embeddings(
        timeline.embeddings, n_speakers=num_speakers, top_p=config.top_p,
        eig_threshold=config.eig_threshold, max_speakers=config.max_speakers,
        seed=config.seed)
    return DiarizationResult(assemble_hypothesis(labels, timeline), k, labels, timeline)


class Diarizer:
    """High-resolution diarization: slide, refine, cluster, assemble."""

    def __init__(self, model: HeeModel, feature_config: FeatureConfig | None = None,
                 config: PipelineConfig | None = None):
        self.model = model
        self.feature_config = feature_config or FeatureConfig()
        self.config = config or PipelineConfig()

    def diarize(self, waveform: Waveform, segments: list[VoicedSegment],
                num_speakers: int | None = None) -> DiarizationResult:
        timeline = slide_extract(waveform, segments, self.model, self.feature_config,
                                 self.config.window_s, self.config.shift_s)
        if self.config.refine_enabled:
            timeline = refine_embeddings(timeline, self.config.refine_dim,
                                         self.config.refine_attention_scale)
        return _cluster_and_assemble(timeline, self.config, num_speakers)


def conventional_extract(
    waveform: Waveform,
    segments: list[VoicedSegment],
    model: PooledSpeakerModel,
    feature_config: FeatureConfig | None = None,
    window_s: float = 1.5,
    shift_s: float = 0.5,
) -> EmbeddingTimeline:
    """Coarse baseline: one pooled utterance embedding per 0.5 s stride.

    Each stride region takes the embedding of the 1.5 s window that starts
    with it (shifted left near segment ends so the window stays inside the
    segment). Resolution is limited by the stride.
    """
    feature_config = feature_config or FeatureConfig()
    hop_s = feature_config.frame_hop_s
    segments = _check_segments(segments, waveform.duration_s)
    extractor = MelExtractor(feature_config)
    rate = waveform.sample_rate

    model.eval()
    acc = TimelineAccumulator()
    with torch.no_grad():
        for seg in segments:
            lo = int(round(seg.start_s * rate))
            hi = min(int(round(seg.end_s * rate)), len(waveform.samples))
            mel = extractor(Waveform(waveform.samples[lo:hi], rate)).frames
            total = mel.shape[0]
            if total < COMPRESSION:
                warnings.warn(f"segment [{seg.start_s:.3f}, {seg.end_s:.3f}) shorter "
                              "than one slot; skipped")
                continue
            shift_frames = max(frames_for_duration(shift_s, hop_s), 1)
            window_frames = max(frames_for_duration(window_s, hop_s), shift_frames)
            n_regions = max(1, total // shift_frames)
            for i in range(n_regions):
                r_lo = i * shift_frames
                r_hi = total if i == n_regions - 1 else (i + 1) * shift_frames
                w_lo = max(0, min(r_lo, total - window_frames))
                chunk = mel[w_lo:min(w_lo + window_frames, total)]
                pad = -len(chunk) % COMPRESSION
                if pad:
                    chunk = np.pad(chunk, ((0, pad), (0, 0)))
                emb = model.embed_utterance(torch.from_numpy(chunk[None]))[0].numpy()
                base = acc.add_slots([seg.start_s + r_lo * hop_s],
                                     [seg.start_s + r_hi * hop_s],
                                     dim=emb.shape[0])
                acc.accumulate(base, emb.astype(np.float64))
    return acc.finalize()


class ConventionalDiarizer:
    """Baseline diarizer built on the pooled single-embedding extractor."""

    def __init__(self, model: PooledSpeakerModel, feature_config: FeatureConfig | None = None,
                 config: PipelineConfig | None = None,
                 window_s: float = 1.5, shift_s: float = 0.5):
        self.model = model
        self.feature_config = feature_config or FeatureConfig()
        self.config = config or PipelineConfig(refine_enabled=False)
        self.window_s = window_s
        self.shift_s = shift_s

    def diarize(self, waveform: Waveform, segments: list[VoicedSegment],
                num_speakers: int | None = None) -> DiarizationResult:
        timeline = conventional_extract(waveform, segments, self.model,
                                        self.feature_config, self.window_s, self.shift_s)
        return _cluster_and_assemble(timeline, self.config, num_speakers)
