"""Mixture synthesis invariants: planning, labels, augmentation, shuffling."""

import numpy as np
import pytest

from hiresdiar import (
    MixtureSynthesizer,
    SynthesisConfig,
    block_shuffle,
    build_mixture,
    frame_labels,
    plan_mixture,
    sample_speaker_count,
    spec_augment,
)
from hiresdiar.synthesis import (
    AugmentationPipeline,
    apply_block_permutation,
    make_block_partition,
    plan_natural_mixture,
)


class TestSpeakerCountSampling:
    def test_range(self, rng):
        counts = {sample_speaker_count(rng) for _ in range(500)}
        assert counts == {1, 2, 3, 4}

    def test_distribution_close_to_weights(self):
        rng = np.random.default_rng(7)
        draws = np.array([sample_speaker_count(rng) for _ in range(20_000)])
        hist = np.bincount(draws, minlength=5)[1:5] / draws.size
        np.testing.assert_allclose(hist, (0.10, 0.30, 0.30, 0.30), atol=0.02)

    def test_custom_probs(self, rng):
        draws = {sample_speaker_count(rng, (1.0, 0.0, 0.0, 0.0)) for _ in range(50)}
        assert draws == {1}


class TestMixturePlanning:
    def test_exact_duration_and_speaker_limit(self, tiny_corpus, rng):
        for _ in range(20):
            plan = plan_mixture(tiny_corpus, rng, target_dur_s=12.8)
            assert plan.total_samples == int(12.8 * 16000)
            assert 1 <= len(plan.speaker_ids) <= 4

    def test_shares_split_evenly_in_frames(self, tiny_corpus):
        rng = np.random.default_rng(3)
        plan = plan_mixture(tiny_corpus, rng, target_dur_s=12.8)
        per_speaker = {}
        for sec in plan.sections:
            per_speaker[sec.speaker_id] = per_speaker.get(sec.speaker_id, 0) + sec.n_samples
        shares = sorted(per_speaker.values())
        assert sum(shares) == int(12.8 * 16000)
        # Every share is hop-aligned and within one frame of the others.
        assert all(s % 160 == 0 for s in shares)
        assert shares[-1] - shares[0] <= 160

    def test_natural_plan_reaches_minimum(self, tiny_corpus, rng):
        for _ in range(10):
            plan = plan_natural_mixture(tiny_corpus, rng, min_dur_s=12.8)
            assert plan.total_samples >= int(12.8 * 16000)


class TestBuildMixture:
    def test_waveform_and_labels_align(self, tiny_corpus, rng):
        plan = plan_mixture(tiny_corpus, rng, target_dur_s=6.4)
        wav, labels = build_mixture(plan, tiny_corpus)
        assert wav.samples.size == labels.size == plan.total_samples
        assert set(np.unique(labels)) <= set(plan.speaker_ids)

    def test_sections_carry_their_speaker(self, tiny_corpus, rng):
        plan = plan_mixture(tiny_corpus, rng, target_dur_s=6.4)
        _, labels = build_mixture(plan, tiny_corpus)
        pos = 0
        for sec in plan.sections:
            assert np.all(labels[pos:pos + sec.n_samples] == sec.speaker_id)
            pos += sec.n_samples


class TestFrameLabels:
    def test_majority_with_tie_to_smaller_id(self):
        # One 160-sample frame: 70 samples of speaker 2, 90 of speaker 0.
        samples = np.array([2] * 70 + [0] * 90, dtype=np.int32)
        assert frame_labels(samples, hop_length=160).tolist() == [0]
        # Exact tie 80/80 resolves to the smaller id.
        tie = np.array([3] * 80 + [1] * 80, dtype=np.int32)
        assert frame_labels(tie, hop_length=160).tolist() == [1]

    def test_matches_bincount_oracle(self, rng):
        samples = rng.integers(0, 4, size=160 * 50).astype(np.int32)
        got = frame_labels(samples, hop_length=160)
        expected = []
        for i in range(50):
            span = samples[i * 160:(i + 1) * 160]
            counts = np.bincount(span, minlength=4)
            expected.append(int(np.flatnonzero(counts == counts.max())[0]))
        assert got.tolist() == expected


class TestSpecAugment:
    def test_masks_between_2_and_5_bands(self):
        rng = np.random.default_rng(0)
        frames = np.ones((20, 64), dtype=np.float32)
        out = spec_augment(frames, rng)
        zero_cols = np.flatnonzero((out == 0).all(axis=0))
        assert 1 <= zero_cols.size <= 5 * 8
        assert out.shape == frames.shape
        # Unmasked columns are untouched.
        kept = np.setdiff1d(np.arange(64), zero_cols)
        np.testing.assert_array_equal(out[:, kept], frames[:, kept])

    def test_zero_drops_is_identity_copy(self, rng):
        frames = rng.normal(size=(10, 32)).astype(np.float32)
        out = spec_augment(frames, np.random.default_rng(1), drops_range=(0, 0))
        np.testing.assert_array_equal(out, frames)
        assert out is not frames

    def test_narrow_feature_rejected(self, rng):
        with pytest.raises(ValueError, match="mel bins"):
            spec_augment(np.ones((4, 4), dtype=np.float32), rng)

    def test_band_widths_bounded(self):
        rng = np.random.default_rng(5)
        frames = np.ones((8, 128), dtype=np.float32)
        out = spec_augment(frames, rng, drops_range=(1, 1), width_range=(3, 3))
        zero_cols = np.flatnonzero((out == 0).all(axis=0))
        assert zero_cols.size == 3
        assert np.all(np.diff(zero_cols) == 1), "a single band is contiguous"


class TestBlockShuffle:
    def test_partition_tiles_exactly(self, rng):
        for n in (320, 1280, 57, 99):
            blocks = make_block_partition(n, rng, (50, 300))
            assert blocks[0][0] == 0 and blocks[-1][1] == n
            for (a, b), (c, _) in zip(blocks, blocks[1:]):
                assert b == c
            for s, e in blocks[:-1]:
                assert 50 <= e - s <= 300

    def test_short_input_stays_whole(self, rng):
        assert make_block_partition(99, rng, (50, 300)) == [(0, 99)]

    def test_multiset_preserved_exactly(self, rng):
        frames = rng.normal(size=(320, 8)).astype(np.float32)
        labels = rng.integers(0, 4, size=320).astype(np.int32)
        shuffled_f, shuffled_l = block_shuffle(frames, labels, rng)
        assert shuffled_f.shape == frames.shape
        original = np.concatenate([frames, labels[:, None].astype(np.float32)], axis=1)
        shuffled = np.concatenate([shuffled_f, shuffled_l[:, None].astype(np.float32)], axis=1)
        order_a = np.lexsort(original.T)
        order_b = np.lexsort(shuffled.T)
        np.testing.assert_array_equal(original[order_a], shuffled[order_b])

    def test_labels_move_with_frames(self, rng):
        # Tag each frame with its label so displacement is observable.
        labels = np.repeat(np.arange(4, dtype=np.int32), 80)
        frames = labels[:, None].astype(np.float32) * np.ones((320, 3), dtype=np.float32)
        shuffled_f, shuffled_l = block_shuffle(frames, labels, rng)
        np.testing.assert_array_equal(shuffled_f[:, 0].astype(np.int32), shuffled_l)

    def test_permutation_helper_roundtrip(self, rng):
        frames = rng.normal(size=(12, 2))
        blocks = [(0, 4), (4, 8), (8, 12)]
        out, = apply_block_permutation(blocks, np.array([2, 0, 1]), frames)
        np.testing.assert_array_equal(out, np.concatenate([frames[8:12], frames[0:4], frames[4:8]]))


class TestAugmentationPipeline:
    def test_always_on_changes_signal(self, tiny_corpus):
        cfg = SynthesisConfig(aug_pass_prob=1.0)
        pipe = AugmentationPipeline(cfg, sample_rate=16000)
        wav = tiny_corpus.utterances[0][0]
        out = pipe.apply(wav, np.random.default_rng(0))
        assert out.samples.shape == wav.samples.shape
        assert not np.allclose(out.samples, wav.samples)

    def test_never_on_is_identity(self, tiny_corpus):
        cfg = SynthesisConfig(aug_pass_prob=0.0)
        pipe = AugmentationPipeline(cfg, sample_rate=16000)
        wav = tiny_corpus.utterances[0][0]
        out = pipe.apply(wav, np.random.default_rng(0))
        np.testing.assert_array_equal(out.samples, wav.samples)

    def test_deterministic_under_seed(self, tiny_corpus):
        cfg = SynthesisConfig(aug_pass_prob=1.0)
        pipe = AugmentationPipeline(cfg, sample_rate=16000)
        wav = tiny_corpus.utterances[0][0]
        a = pipe.apply(wav, np.random.default_rng(9)).samples
        b = pipe.apply(wav, np.random.default_rng(9)).samples
        np.testing.assert_array_equal(a, b)

    def test_missing_asset_dir_rejected(self, tmp_path):
        cfg = SynthesisConfig(noise_dir=str(tmp_path / "missing"))
        with pytest.raises((FileNotFoundError, ValueError)):
            AugmentationPipeline(cfg, sample_rate=16000)


class TestMixtureSynthesizer:
    def test_efficient_path_yields_four_full_samples(self, tiny_corpus):
        synth = MixtureSynthesizer(tiny_corpus, seed=4)
        parts = synth.mixture(0)
        assert len(parts) == 4
        assert [p.part for p in parts] == [0, 1, 2, 3]
        for p in parts:
            assert p.features.shape == (320, 64)
            assert p.labels.shape == (320,)
            assert set(np.unique(p.labels)) <= set(p.speaker_ids)

    def test_deterministic_by_index(self, tiny_corpus):
        a = MixtureSynthesizer(tiny_corpus, seed=4).mixture(3)
        b = MixtureSynthesizer(tiny_corpus, seed=4).mixture(3)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.features, y.features)
            np.testing.assert_array_equal(x.labels, y.labels)

    def test_batch_independent_of_history(self, tiny_corpus):
        synth = MixtureSynthesizer(tiny_corpus, seed=4)
        fresh = MixtureSynthesizer(tiny_corpus, seed=4)
        synth.batch(0, 8)  # consume earlier batches first
        direct = synth.batch(2, 8)
        cold = fresh.batch(2, 8)
        for x, y in zip(direct, cold):
            np.testing.assert_array_equal(x.features, y.features)

    def test_single_naive_path(self, tiny_corpus):
        sample = MixtureSynthesizer(tiny_corpus, seed=4).single(0)
        assert sample.features.shape == (320, 64)
        assert sample.labels.shape == (320,)

    def test_seed_changes_output(self, tiny_corpus):
        a = MixtureSynthesizer(tiny_corpus, seed=1).mixture(0)[0]
        b = MixtureSynthesizer(tiny_corpus, seed=2).mixture(0)[0]
        assert not np.array_equal(a.features, b.features)
