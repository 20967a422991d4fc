"""Speaker corpora: manifest-backed utterance collections and synthetic voices.

A corpus maps dense integer speaker ids to single-speaker utterances of at
least three seconds. Real data comes in through a tab-separated manifest of
``speaker_id<TAB>wav_path`` lines; desk-scale training and tests use the
synthetic voices below, which are harmonic sources with speaker-specific
pitch and formant structure plus per-utterance channel variation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import Waveform, load_wav

MIN_UTTERANCE_S = 3.0


@dataclass
class SpeakerCorpus:
    """Utterances grouped by dense integer speaker id."""

    utterances: list[list[Waveform]]
    speaker_names: list[str]
    sample_rate: int = 16000

    def __post_init__(self):
        if len(self.utterances) != len(self.speaker_names):
            raise ValueError("speaker_names and utterances must align")
        for spk, utts in enumerate(self.utterances):
            if not utts:
                raise ValueError(f"speaker {spk} ({self.speaker_names[spk]}) has no utterances")
            for i, utt in enumerate(utts):
                if utt.sample_rate != self.sample_rate:
                    raise ValueError(f"speaker {spk} utterance {i}: wrong sample rate")
                if utt.duration_s < MIN_UTTERANCE_S - 1e-9:
                    raise ValueError(
                        f"speaker {spk} utterance {i}: {utt.duration_s:.2f} s is below "
                        f"the {MIN_UTTERANCE_S} s minimum")

    @property
    def n_speakers(self) -> int:
        return len(self.utterances)

    def split_utterances(self, n_heldout: int = 1) -> tuple["SpeakerCorpus", "SpeakerCorpus"]:
        """Split the last `n_heldout` utterances of every speaker into a held-out corpus."""
        for spk, utts in enumerate(self.utterances):
            if len(utts) <= n_heldout:
                raise ValueError(f"speaker {spk} has too few utterances to hold out {n_heldout}")
        train = [utts[:-n_heldout] for utts in self.utterances]
        held = [utts[-n_heldout:] for utts in self.utterances]
        return (SpeakerCorpus(train, list(self.speaker_names), self.sample_rate),
                SpeakerCorpus(held, list(self.speaker_names), self.sample_rate))

    @classmethod
    def from_manifest(cls, manifest_path, sample_rate: int = 16000) -> "SpeakerCorpus":
        """Load a `speaker_id<TAB>wav_path` manifest; ids densified in first-seen order."""
        manifest_path = Path(manifest_path)
        if not manifest_path.exists():
            raise FileNotFoundError(f"corpus manifest not found: {manifest_path}")
        names: list[str] = []
        index: dict[str, int] = {}
        utts: list[list[Waveform]] = []
        for lineno, raw in enumerate(manifest_path.read_text().splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{manifest_path}:{lineno}: expected 'speaker<TAB>wav_path'")
            name, wav_path = parts
            if name not in index:
                index[name] = len(names)
                names.append(name)
                utts.append([])
            try:
                utts[index[name]].append(load_wav(wav_path, target_rate=sample_rate))
            except (OSError, ValueError) as exc:
                raise ValueError(f"{manifest_path}:{lineno}: cannot load "
                                 f"{wav_path}: {exc}") from exc
        if not names:
            raise ValueError(f"{manifest_path}: empty manifest")
        return cls(utts, names, sample_rate)


@dataclass(frozen=True)
class SyntheticVoice:
    """Parametric voice: harmonic source shaped by a formant envelope.

    Speaker identity lives in the pitch base and formant positions;
    per-utterance randomness (pitch drift, vibrato, channel tilt, gain,
    breath noise) supplies intra-speaker variation so frames of one
    speaker are not trivially identical.
    """

    name: str
    f0_hz: float
    formants_hz: tuple[float, float, float]
    formant_bw_hz: tuple[float, float, float]
    tilt_db_per_oct: float
    sample_rate: int = 16000

    def render(self, rng: np.random.Generator, duration_s: float) -> Waveform:
        sr = self.sample_rate
        n = int(round(duration_s * sr))
        t = np.arange(n) / sr

        # Pitch contour: slow random walk (about +-2 semitones) plus vibrato.
        drift = np.interp(np.linspace(0, 1, n),
                          np.linspace(0, 1, 9),
                          rng.normal(0.0, 0.10, size=9))
        vib_rate = rng.uniform(4.5, 6.5)
        vib = 0.02 * np.sin(2 * np.pi * vib_rate * t + rng.uniform(0, 2 * np.pi))
        f0 = self.f0_hz * np.exp2(drift + vib)
        phase = 2 * np.pi * np.cumsum(f0) / sr

        tilt = self.tilt_db_per_oct + rng.normal(0.0, 1.0)
        n_harm = max(3, int(5000.0 / self.f0_hz))
        sig = np.zeros(n, dtype=np.float64)
        for h in range(1, n_harm + 1):
            fh = h * self.f0_hz
            if fh > 0.45 * sr:
                break
            gain = self._envelope(fh) * 10.0 ** (tilt * np.log2(fh / self.f0_hz) / 20.0)
            sig += gain * np.sin(h * phase + rng.uniform(0, 2 * np.pi))

        # Syllabic energy modulation keeps the signal speech-like but voiced.
        syl = 0.65 + 0.35 * np.sin(2 * np.pi * rng.uniform(2.5, 5.0) * t + rng.uniform(0, 2 * np.pi))
        sig *= syl
        sig += rng.normal(0.0, 0.02 * np.sqrt(np.mean(sig ** 2) + 1e-12), size=n)

        sig *= rng.uniform(0.5, 1.0) / np.sqrt(np.mean(sig ** 2) + 1e-12) * 0.1
        return Waveform(sig.astype(np.float32), sr)

    def _envelope(self, freq_hz: float) -> float:
        g = 0.05
        for fc, bw in zip(self.formants_hz, self.formant_bw_hz):
            g += np.exp(-0.5 * ((freq_hz - fc) / bw) ** 2)
        return float(g)


def make_voices(n_speakers: int, seed: int = 0, sample_rate: int = 16000) -> list[SyntheticVoice]:
    """Build `n_speakers` distinct synthetic voices."""
    rng = np.random.default_rng(seed)
    f0s = np.geomspace(95.0, 260.0, n_speakers) * np.exp2(rng.uniform(-0.04, 0.04, n_speakers))
    voices = []
    for i in range(n_speakers):
        f1 = rng.uniform(320, 880)
        f2 = rng.uniform(1000, 2200)
        f3 = rng.uniform(2350, 3300)
        voices.append(SyntheticVoice(
            name=f"S{i}",
            f0_hz=float(f0s[i]),
            formants_hz=(float(f1), float(f2), float(f3)),
            formant_bw_hz=(float(rng.uniform(70, 130)),
                           float(rng.uniform(110, 190)),
                           float(rng.uniform(160, 260))),
            tilt_db_per_oct=float(rng.uniform(-7.0, -3.0)),
            sample_rate=sample_rate,
        ))
    return voices


def synthetic_corpus(n_speakers: int = 8, utterances_per_speaker: int = 20,
                     duration_range_s: tuple[float, float] = (3.2, 5.0),
                     seed: int = 0, sample_rate: int = 16000,
                     ) -> tuple[SpeakerCorpus, list[SyntheticVoice]]:
    """Render a small multi-speaker corpus; returns (corpus, voices)."""
    voices = make_voices(n_speakers, seed=seed, sample_rate=sample_rate)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))
    utts = []
    for voice in voices:
        utts.append([voice.render(rng, rng.uniform(*duration_range_s))
                     for _ in range(utterances_per_speaker)])
    corpus = SpeakerCorpus(utts, [v.name for v in voices], sample_rate)
    return corpus, voices


def synthetic_session(voices: list[SyntheticVoice], rng: np.random.Generator,
                      n_speakers: int, total_dur_s: float,
                      turn_dur_range_s: tuple[float, float] = (0.5, 2.0),
                      noise_rms: float = 0.0,
                      ) -> tuple[Waveform, list[tuple[float, float, str]]]:
    """Render a continuous multi-speaker session with rapid speaker turns.

    Each participant is rendered as one continuous stream per session, so
    per-utterance channel effects (tilt, gain, pitch drift) stay fixed for
    a speaker across their turns — as they do for a real speaker on one
    microphone — and turns are cut from that stream in order. Returns the
    session waveform and reference intervals ``(start_s, end_s,
    speaker_name)``; consecutive turns always change speaker, and turn
    boundaries lie on the 10 ms grid.
    """
    if n_speakers > len(voices):
        raise ValueError("not enough voices for requested speaker count")
    sr = voices[0].sample_rate
    chosen = [int(s) for s in rng.choice(len(voices), size=n_speakers, replace=False)]
    stream_dur_s = total_dur_s + turn_dur_range_s[1] + 0.5
    streams = {spk: voices[spk].render(rng, stream_dur_s).samples for spk in chosen}
    cursor = {spk: 0 for spk in chosen}
    pieces: list[np.ndarray] = []
    reference: list[tuple[float, float, str]] = []
    pos = 0
    prev = -1
    while pos < int(total_dur_s * sr):
        spk = int(rng.choice(chosen))
        while n_speakers > 1 and spk == prev:
            spk = int(rng.choice(chosen))
        turn_s = round(rng.uniform(*turn_dur_range_s), 2)
        piece = streams[spk][cursor[spk]: cursor[spk] + int(round(turn_s * sr))]
        cursor[spk] += piece.size
        reference.append((pos / sr, (pos + piece.size) / sr, voices[spk].name))
        pieces.append(piece)
        pos += piece.size
        prev = spk
    samples = np.concatenate(pieces)
    if noise_rms > 0:
        samples = samples + rng.normal(0.0, noise_rms, size=samples.size).astype(np.float32)
    return Waveform(samples.astype(np.float32), sr), reference
