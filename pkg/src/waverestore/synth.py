"""Synthetic voiced corpus and noise bank.

Utterances are built from harmonic patterns whose fundamental period divides
the 640-sample feature frame, so every frame holds a phase-locked copy of the
same cycle and the waveform is recoverable from frame-rate features. Formant
envelopes keep a deliberate share of energy above the telephone band, which
the lowpass codec then removes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.signal

from waverestore.audio import SAMPLE_RATE, Waveform, read_wav, write_wav
from waverestore.degrade import NoiseBank, degrade, sample_recipe
from waverestore.encoder import SAMPLES_PER_FRAME

# Whole harmonic cycles per frame: every fundamental divides 25 Hz evenly.
F0_CHOICES = (100.0, 125.0, 200.0, 250.0)
MAX_HARMONIC_HZ = 7800.0

# (center_hz, bandwidth_hz, gain) resonances plus a high shelf above 4 kHz.
VOWELS = {
    "a": ([(730, 90, 1.0), (1090, 110, 0.7), (2440, 170, 0.35)], 0.60),
    "e": ([(530, 80, 1.0), (1840, 140, 0.6), (2480, 180, 0.35)], 0.68),
    "i": ([(270, 60, 1.0), (2290, 150, 0.55), (3010, 200, 0.4)], 0.82),
    "u": ([(300, 65, 1.0), (870, 110, 0.65), (2240, 180, 0.3)], 0.52),
}


def _vowel_gain(freqs: np.ndarray, vowel: str) -> np.ndarray:
    resonances, shelf = VOWELS[vowel]
    gain = np.zeros_like(freqs)
    for center, bandwidth, peak in resonances:
        gain += peak * np.exp(-((freqs - center) ** 2) / (2.0 * bandwidth**2 * 4.0))
    gain += shelf / (1.0 + np.exp(-(freqs - 4000.0) / 400.0))
    return gain + 0.05


def harmonic_frame_pattern(f0: float, vowel: str) -> np.ndarray:
    """One 640-sample frame of the voiced pattern for (f0, vowel).

    Harmonic phases follow a fixed quadratic schedule, so the pattern is a
    deterministic function of its two arguments.
    """
    if f0 not in F0_CHOICES:
        raise ValueError(f"f0 must be one of {F0_CHOICES}")
    harmonics = np.arange(1, int(MAX_HARMONIC_HZ / f0) + 1)
    freqs = harmonics * f0
    amps = _vowel_gain(freqs, vowel) / harmonics**0.5
    phases = -np.pi * harmonics * (harmonics + 1) / len(harmonics)
    tau = np.arange(SAMPLES_PER_FRAME) / SAMPLE_RATE
    pattern = (amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * tau + phases[:, None])).sum(0)
    return pattern / np.max(np.abs(pattern))


@dataclass(frozen=True)
class UtteranceSpec:
    duration_seconds: float = 3.0
    syllable_frames: int = 8
    gap_frames: int = 2

    def __post_init__(self):
        frames = self.duration_seconds * SAMPLE_RATE / SAMPLES_PER_FRAME
        if abs(frames - round(frames)) > 1e-9:
            raise ValueError("duration must be a whole number of 40 ms frames")
        if self.syllable_frames < 2 or self.gap_frames < 0:
            raise ValueError("need syllable_frames >= 2 and gap_frames >= 0")

    @property
    def num_frames(self) -> int:
        return int(round(self.duration_seconds * SAMPLE_RATE / SAMPLES_PER_FRAME))


def synthesize_utterance(seed: int, spec: UtteranceSpec = UtteranceSpec()) -> Waveform:
    """Deterministic voiced utterance: syllables of one f0, varying vowels."""
    rng = np.random.default_rng(seed)
    f0 = float(rng.choice(F0_CHOICES))
    peak = float(rng.uniform(0.25, 0.5))
    vowel_names = sorted(VOWELS)

    signal = np.zeros(spec.num_frames * SAMPLES_PER_FRAME)
    frame = 0
    while frame < spec.num_frames:
        length = min(spec.syllable_frames, spec.num_frames - frame)
        if length >= 2:
            vowel = vowel_names[int(rng.integers(0, len(vowel_names)))]
            pattern = np.tile(harmonic_frame_pattern(f0, vowel), length)
            n = length * SAMPLES_PER_FRAME
            envelope = np.sin(np.pi * np.arange(n) / n) ** 2
            lo = frame * SAMPLES_PER_FRAME
            signal[lo : lo + n] = pattern * envelope
        frame += length + spec.gap_frames
    return Waveform((peak * signal / max(np.max(np.abs(signal)), 1e-9)).astype(np.float32))


def build_clean_corpus(out_dir, count: int, seed: int, spec: UtteranceSpec = UtteranceSpec()) -> Path:
    """Write ``utt_*.wav`` files and a manifest of one relative path per line."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(count):
        name = f"utt_{i:05d}.wav"
        write_wav(out_dir / name, synthesize_utterance(seed + i, spec))
        names.append(name)
    manifest = out_dir / "clean.txt"
    manifest.write_text("\n".join(names) + "\n")
    return manifest


def read_path_list(manifest) -> list[Path]:
    manifest = Path(manifest)
    paths = []
    for line in manifest.read_text().splitlines():
        if line.strip():
            p = Path(line)
            paths.append(p if p.is_absolute() else manifest.parent / p)
    if not paths:
        raise ValueError(f"{manifest}: no entries")
    return paths


def _babble(rng: np.random.Generator, n: int) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE
    out = np.zeros(n)
    for _ in range(6):
        f0 = rng.uniform(90.0, 280.0)
        harmonics = np.arange(1, int(3000 / f0) + 1)
        amps = rng.uniform(0.2, 1.0, size=len(harmonics)) / harmonics
        phases = rng.uniform(0, 2 * np.pi, size=len(harmonics))
        voice = (amps[:, None] * np.sin(2 * np.pi * (harmonics * f0)[:, None] * t + phases[:, None])).sum(0)
        rate = rng.uniform(2.0, 5.0)
        out += voice * (0.5 + 0.5 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))
    return out


def build_noise_bank(out_dir, seed: int, duration_seconds: float = 4.0) -> Path:
    """White, hum, babble and band-limited noises plus their manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n = int(duration_seconds * SAMPLE_RATE)
    t = np.arange(n) / SAMPLE_RATE

    sources = {"noise_white": rng.standard_normal(n)}
    hum = sum(g * np.sin(2 * np.pi * f * t) for f, g in [(50, 1.0), (100, 0.5), (150, 0.35), (250, 0.2)])
    sources["noise_hum"] = hum + 0.05 * rng.standard_normal(n)
    sources["noise_babble"] = _babble(rng, n)
    sos = scipy.signal.butter(4, [300, 2500], btype="bandpass", fs=SAMPLE_RATE, output="sos")
    sources["noise_band"] = scipy.signal.sosfiltfilt(sos, rng.standard_normal(n))

    lines = []
    for name, samples in sources.items():
        scaled = 0.5 * samples / np.max(np.abs(samples))
        write_wav(out_dir / f"{name}.wav", Waveform(scaled.astype(np.float32)))
        lines.append(f"{name}.wav\t{duration_seconds}")
    manifest = out_dir / "noise_bank.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def build_paired_corpus(clean_manifest, noise_manifest, out_dir, seed: int) -> dict[str, Path]:
    """Degrade every clean utterance with a sampled recipe.

    Writes aligned targets and degraded files, a training pair manifest
    (``noisy<TAB>clean``), an evaluation manifest (``utt_id<TAB>clean<TAB>
    noisy``) and one recipe JSON line per utterance.
    """
    out_dir = Path(out_dir)
    (out_dir / "noisy").mkdir(parents=True, exist_ok=True)
    (out_dir / "target").mkdir(parents=True, exist_ok=True)
    clean_paths = read_path_list(clean_manifest)
    bank = NoiseBank.from_manifest(noise_manifest)
    rng = np.random.default_rng(seed)

    pair_lines, eval_lines, recipe_lines = [], [], []
    for path in clean_paths:
        recipe = sample_recipe(rng, bank)
        noisy, target = degrade(read_wav(path), recipe, bank)
        utt_id = path.stem
        write_wav(out_dir / "noisy" / f"{utt_id}.wav", noisy)
        write_wav(out_dir / "target" / f"{utt_id}.wav", target)
        pair_lines.append(f"noisy/{utt_id}.wav\ttarget/{utt_id}.wav")
        eval_lines.append(f"{utt_id}\ttarget/{utt_id}.wav\tnoisy/{utt_id}.wav")
        recipe_lines.append(json.dumps({"utt_id": utt_id} | json.loads(recipe.to_json()), sort_keys=True))

    outputs = {
        "pairs": out_dir / "pairs.tsv",
        "eval": out_dir / "eval.tsv",
        "recipes": out_dir / "recipes.jsonl",
    }
    outputs["pairs"].write_text("\n".join(pair_lines) + "\n")
    outputs["eval"].write_text("\n".join(eval_lines) + "\n")
    outputs["recipes"].write_text("\n".join(recipe_lines) + "\n")
    return outputs
