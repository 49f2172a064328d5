import json

import numpy as np
import pytest

from waverestore.audio import SAMPLE_RATE, read_wav
from waverestore.cleaner import read_pairs_manifest
from waverestore.degrade import NoiseBank
from waverestore.metrics import read_eval_manifest
from waverestore.synth import (
    UtteranceSpec,
    build_clean_corpus,
    build_noise_bank,
    build_paired_corpus,
    harmonic_frame_pattern,
    read_path_list,
    synthesize_utterance,
)


def test_pattern_repeats_at_fundamental_period():
    for f0 in (100.0, 250.0):
        pattern = harmonic_frame_pattern(f0, "a")
        period = int(SAMPLE_RATE / f0)
        assert len(pattern) == 640
        assert np.allclose(pattern[:period], pattern[period : 2 * period], atol=1e-12)
    with pytest.raises(ValueError, match="f0"):
        harmonic_frame_pattern(123.0, "a")


def test_pattern_is_deterministic():
    a = harmonic_frame_pattern(125.0, "i")
    b = harmonic_frame_pattern(125.0, "i")
    assert np.array_equal(a, b)
    assert abs(np.max(np.abs(a)) - 1.0) < 1e-12


def test_utterance_spec_validation():
    with pytest.raises(ValueError, match="40 ms"):
        UtteranceSpec(duration_seconds=3.01)
    with pytest.raises(ValueError):
        UtteranceSpec(syllable_frames=1)
    assert UtteranceSpec(duration_seconds=3.0).num_frames == 75


def test_utterance_shape_and_level():
    wave = synthesize_utterance(seed=5)
    assert len(wave) == 3 * SAMPLE_RATE
    assert wave.samples.dtype == np.float32
    peak = np.max(np.abs(wave.samples))
    assert 0.2 <= peak <= 0.51
    assert np.array_equal(wave.samples, synthesize_utterance(seed=5).samples)
    assert not np.array_equal(wave.samples, synthesize_utterance(seed=6).samples)


def test_utterance_has_silence_gaps():
    # Two-frame gaps between syllables are 1280 exactly-zero samples each.
    wave = synthesize_utterance(seed=1, spec=UtteranceSpec(gap_frames=2))
    assert int((wave.samples == 0).sum()) >= 1280


def test_high_band_energy_share():
    fracs = []
    for seed in range(6):
        x = synthesize_utterance(seed).samples.astype(np.float64)
        spectrum = np.abs(np.fft.rfft(x)) ** 2
        freqs = np.fft.rfftfreq(len(x), 1 / SAMPLE_RATE)
        fracs.append(spectrum[freqs > 3400].sum() / spectrum.sum())
    assert 0.12 <= float(np.mean(fracs)) <= 0.35


def test_clean_corpus_and_path_list(tmp_path):
    manifest = build_clean_corpus(tmp_path / "clean", count=4, seed=10)
    paths = read_path_list(manifest)
    assert len(paths) == 4
    for p in paths:
        wave = read_wav(p)
        assert len(wave) == 3 * SAMPLE_RATE
    again = build_clean_corpus(tmp_path / "clean2", count=4, seed=10)
    a = read_path_list(manifest)[2].read_bytes()
    b = read_path_list(again)[2].read_bytes()
    assert a == b


def test_noise_bank_contents(tmp_path):
    manifest = build_noise_bank(tmp_path / "noise", seed=3)
    bank = NoiseBank.from_manifest(manifest)
    assert bank.ids == ["noise_babble", "noise_band", "noise_hum", "noise_white"]
    for noise_id in bank.ids:
        samples = bank.load(noise_id).samples
        assert len(samples) == 4 * SAMPLE_RATE
        assert 0.4 <= np.max(np.abs(samples)) <= 0.51


def test_paired_corpus_manifests(tmp_path):
    clean = build_clean_corpus(tmp_path / "clean", count=6, seed=20)
    noise = build_noise_bank(tmp_path / "noise", seed=21)
    outs = build_paired_corpus(clean, noise, tmp_path / "paired", seed=22)

    pairs = read_pairs_manifest(outs["pairs"])
    assert len(pairs) == 6
    for noisy, target in pairs:
        assert noisy.exists() and target.exists()
        assert len(read_wav(noisy)) == len(read_wav(target)) == 3 * SAMPLE_RATE

    items = read_eval_manifest(outs["eval"])
    assert len(items) == 6
    recipes = [json.loads(line) for line in outs["recipes"].read_text().splitlines()]
    assert [r["utt_id"] for r in recipes] == [f"utt_{i:05d}" for i in range(6)]

    outs2 = build_paired_corpus(clean, noise, tmp_path / "paired2", seed=22)
    name = pairs[0][0].name
    assert (tmp_path / "paired" / "noisy" / name).read_bytes() == (
        tmp_path / "paired2" / "noisy" / name
    ).read_bytes()
