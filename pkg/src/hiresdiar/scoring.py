"""Diarization error rate with exact interval arithmetic.

DER decomposes into missed speech, false alarm, and speaker confusion over
the total reference speech time, with no forgiveness collar and overlap
regions fully scored. The primary scorer works on exact interval
boundaries; ``compute_der_framewise`` re-derives the same quantities by
10 ms frame sampling with exhaustive speaker mapping and exists as an
independent cross-check.
"""

from __future__ import annotations

import itertools
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass(frozen=True)
class RttmRecord:
    session: str
    onset_s: float
    duration_s: float
    speaker: str

    def __post_init__(self):
        if self.duration_s < 0:
            raise ValueError(f"negative duration {self.duration_s} for {self.session}")
        if self.onset_s < 0:
            raise ValueError(f"negative onset {self.onset_s} for {self.session}")

    @property
    def end_s(self) -> float:
        return self.onset_s + self.duration_s


def parse_rttm(source) -> list[RttmRecord]:
    """Parse RTTM from a path or iterable of lines; keeps SPEAKER rows only."""
    if isinstance(source, (str, Path)):
        lines = Path(source).read_text().splitlines()
    else:
        lines = list(source)
    records = []
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith(("#", ";;")):
            continue
        fields = line.split()
        if fields[0] != "SPEAKER":
            continue
        if len(fields) < 8:
            raise ValueError(f"RTTM line {lineno}: expected >= 8 fields, got {len(fields)}")
        try:
            onset, duration = float(fields[3]), float(fields[4])
        except ValueError as exc:
            raise ValueError(f"RTTM line {lineno}: bad time field: {exc}") from exc
        try:
            records.append(RttmRecord(fields[1], onset, duration, fields[7]))
        except ValueError as exc:
            raise ValueError(f"RTTM line {lineno}: {exc}") from exc
    return records


def write_rttm(records: list[RttmRecord], path) -> None:
    with Path(path).open("w") as fh:
        for r in records:
            fh.write(f"SPEAKER {r.session} 1 {r.onset_s:.3f} {r.duration_s:.3f} "
                     f"<NA> <NA> {r.speaker} <NA> <NA>\n")


@dataclass(frozen=True)
class DERResult:
    """Error components in seconds; rates are relative to reference speech."""

    total_s: float
    miss_s: float
    falarm_s: float
    confusion_s: float
    per_session: dict = field(default_factory=dict)

    def _rate(self, seconds: float) -> float:
        if self.total_s == 0:
            raise ZeroDivisionError("no reference speech to score against")
        return seconds / self.total_s

    @property
    def miss_rate(self) -> float:
        return self._rate(self.miss_s)

    @property
    def falarm_rate(self) -> float:
        return self._rate(self.falarm_s)

    @property
    def confusion_rate(self) -> float:
        return self._rate(self.confusion_s)

    @property
    def der(self) -> float:
        return self._rate(self.miss_s + self.falarm_s + self.confusion_s)


def merge_intervals(intervals) -> list[tuple[float, float]]:
    """Union of half-open intervals, as a sorted disjoint list."""
    pending = sorted((s, e) for s, e in intervals if e > s)
    merged: list[list[float]] = []
    for s, e in pending:
        if merged and s <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], e)
        else:
            merged.append([s, e])
    return [(s, e) for s, e in merged]


def _clip_to_uem(intervals, uem) -> list[tuple[float, float]]:
    out = []
    for s, e in intervals:
        for us, ue in uem:
            lo, hi = max(s, us), min(e, ue)
            if hi > lo:
                out.append((lo, hi))
    return merge_intervals(out)


def _speaker_intervals(records, uem=None) -> dict[str, list[tuple[float, float]]]:
    by_speaker = defaultdict(list)
    for r in records:
        if r.duration_s > 0:
            by_speaker[r.speaker].append((r.onset_s, r.end_s))
    merged = {spk: merge_intervals(ivs) for spk, ivs in by_speaker.items()}
    if uem is not None:
        merged = {spk: _clip_to_uem(ivs, uem) for spk, ivs in merged.items()}
    return {spk: ivs for spk, ivs in merged.items() if ivs}


def _session_components(ref_records, hyp_records, uem=None):
    """Exact (total, miss, falarm, confusion) seconds for one session."""
    ref = _speaker_intervals(ref_records, uem)
    hyp = _speaker_intervals(hyp_records, uem)
    ref_ids = sorted(ref)
    hyp_ids = sorted(hyp)

    bounds = sorted({t for ivs in (*ref.values(), *hyp.values()) for iv in ivs for t in iv})
    overlap = np.zeros((len(ref_ids), len(hyp_ids)))
    total = miss = falarm = conf_budget = 0.0
    for lo, hi in zip(bounds, bounds[1:]):
        d = hi - lo
        if d <= 0:
            continue
        active_ref = [i for i, spk in enumerate(ref_ids)
                      if any(s <= lo and hi <= e for s, e in ref[spk])]
        active_hyp = [j for j, spk in enumerate(hyp_ids)
                      if any(s <= lo and hi <= e for s, e in hyp[spk])]
        nr, nh = len(active_ref), len(active_hyp)
        total += d * nr
        miss += d * max(0, nr - nh)
        falarm += d * max(0, nh - nr)
        conf_budget += d * min(nr, nh)
        for i in active_ref:
            overlap[i, active_hyp] += d

    if overlap.size:
        rows, cols = linear_sum_assignment(-overlap)
        correct = float(overlap[rows, cols].sum())
    else:
        correct = 0.0
    return total, miss, falarm, conf_budget - correct


def _group_by_session(records) -> dict[str, list[RttmRecord]]:
    grouped = defaultdict(list)
    for r in records:
        grouped[r.session].append(r)
    return grouped


def compute_der(reference, hypothesis, uem: dict | None = None) -> DERResult:
    """Score hypothesis RTTM records against reference records.

    The speaker mapping is optimized per session. Sessions present only in
    the reference are scored as fully missed; hypothesis sessions absent
    from the reference are an error.
    """
    ref_by_session = _group_by_session(reference)
    hyp_by_session = _group_by_session(hypothesis)
    if not ref_by_session:
        raise ValueError("reference contains no speech to score against")
    unknown = sorted(set(hyp_by_session) - set(ref_by_session))
    if unknown:
        raise ValueError(f"hypothesis sessions missing from reference: {unknown}")

    per_session = {}
    totals = np.zeros(4)
    for session in sorted(ref_by_session):
        parts = _session_components(
            ref_by_session[session], hyp_by_session.get(session, []),
            None if uem is None else uem.get(session))
        per_session[session] = DERResult(*parts)
        totals += parts
    if totals[0] == 0:
        raise ValueError("reference contains no speech to score against")
    return DERResult(*map(float, totals), per_session=per_session)


def compute_der_framewise(reference, hypothesis, frame_s: float = 0.01,
                          max_speakers: int = 8) -> DERResult:
    """Frame-sampled DER with exhaustive speaker mapping (cross-check scorer).

    Activity is sampled on a fixed frame grid and the optimal speaker
    mapping is found by trying every injective assignment, so the session
    speaker count is capped at ``max_speakers``.
    """
    ref_by_session = _group_by_session(reference)
    hyp_by_session = _group_by_session(hypothesis)
    if not ref_by_session:
        raise ValueError("reference contains no speech to score against")
    unknown = sorted(set(hyp_by_session) - set(ref_by_session))
    if unknown:
        raise ValueError(f"hypothesis sessions missing from reference: {unknown}")

    per_session = {}
    totals = np.zeros(4)
    for session in sorted(ref_by_session):
        ref = _speaker_intervals(ref_by_session[session])
        hyp = _speaker_intervals(hyp_by_session.get(session, []))
        if len(ref) > max_speakers or len(hyp) > max_speakers:
            raise ValueError(
                f"session {session} has too many speakers for exhaustive mapping "
                f"(> {max_speakers})")
        end = max((e for ivs in (*ref.values(), *hyp.values()) for _, e in ivs),
                  default=0.0)
        n_frames = int(np.ceil(end / frame_s - 1e-9))
        ref_ids, hyp_ids = sorted(ref), sorted(hyp)

        def active(ivs, n=n_frames):
            mask = np.zeros(n, dtype=bool)
            for s, e in ivs:
                lo = int(np.floor(s / frame_s + 1e-9))
                hi = int(np.ceil(e / frame_s - 1e-9))
                mask[lo:hi] = True
            return mask

        ref_act = np.array([active(ref[s]) for s in ref_ids]).reshape(len(ref_ids), -1)
        hyp_act = np.array([active(hyp[s]) for s in hyp_ids]).reshape(len(hyp_ids), -1)
        nr = ref_act.sum(axis=0) if len(ref_ids) else np.zeros(n_frames, dtype=int)
        nh = hyp_act.sum(axis=0) if len(hyp_ids) else np.zeros(n_frames, dtype=int)
        total = frame_s * float(nr.sum())
        miss = frame_s * float(np.maximum(nr - nh, 0).sum())
        falarm = frame_s * float(np.maximum(nh - nr, 0).sum())

        pair_frames = (ref_act[:, None, :] & hyp_act[None, :, :]).sum(axis=2) \
            if len(ref_ids) and len(hyp_ids) else np.zeros((len(ref_ids), len(hyp_ids)))
        best = 0.0
        if len(ref_ids) <= len(hyp_ids):
            for perm in itertools.permutations(range(len(hyp_ids)), len(ref_ids)):
                best = max(best, float(pair_frames[range(len(ref_ids)), perm].sum()))
        else:
            for perm in itertools.permutations(range(len(ref_ids)), len(hyp_ids)):
                best = max(best, float(pair_frames[perm, range(len(hyp_ids))].sum()))
        confusion = frame_s * (float(np.minimum(nr, nh).sum()) - best)

        parts = (total, miss, falarm, confusion)
        per_session[session] = DERResult(*parts)
        totals += parts
    if totals[0] == 0:
        raise ValueError("reference contains no speech to score against")
    return DERResult(*map(float, totals), per_session=per_session)


def dataset_stats(records: list[RttmRecord]) -> dict:
    """Corpus-level summary of an RTTM annotation set."""
    if not records:
        raise ValueError("no records to summarize")
    by_session = _group_by_session(records)
    speakers_per_session = [len({r.speaker for r in recs}) for recs in by_session.values()]
    total_audio = sum(max(r.end_s for r in recs) for recs in by_session.values())
    total_speech = sum(
        e - s
        for recs in by_session.values()
        for ivs in _speaker_intervals(recs).values()
        for s, e in ivs)
    turns = [r for r in records if r.duration_s > 0]
    return {
        "n_sessions": len(by_session),
        "total_hours": round(total_audio / 3600.0, 6),
        "mean_speakers_per_session": round(float(np.mean(speakers_per_session)), 6),
        "n_speakers": len({r.speaker for r in records}),
        "n_turns": len(turns),
        "total_audio_s": round(total_audio, 3),
        "total_speech_s": round(total_speech, 3),
        "mean_turn_s": round(float(np.mean([r.duration_s for r in turns])), 3) if turns else 0.0,
    }
