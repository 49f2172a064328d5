"""Degradation simulator: room reverberation, additive noise at exact SNR, codecs.

Paired training data is manufactured by composing, in order: reverberation
(image-source room impulse response), noise mixing at a sampled SNR, and an
optional codec. The clean target stays dry and uncoded, aligned to the
degraded signal by direct-path delay compensation.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.signal

from waverestore.audio import SAMPLE_RATE, Waveform, power, read_wav

SPEED_OF_SOUND = 343.0

# Windowed-sinc interpolation kernel support for fractional-delay rendering:
# 81 taps, i.e. 40 on each side of the (rounded) arrival sample.
SINC_HALF_WIDTH = 40

MAX_REFLECTION_ORDER = 10


@dataclass(frozen=True)
class RoomSpec:
    """Rectangular room with uniform wall absorption.

    ``dims``, ``source`` and ``mic`` are xyz in meters with the origin in a
    corner. ``max_order`` caps the image enumeration; above
    ``MAX_REFLECTION_ORDER`` the image count grows combinatorially, so larger
    values are rejected.
    """

    dims: tuple[float, float, float]
    source: tuple[float, float, float]
    mic: tuple[float, float, float]
    absorption: float
    max_order: int = 4

    def __post_init__(self):
        dims = np.asarray(self.dims, dtype=np.float64)
        src = np.asarray(self.source, dtype=np.float64)
        mic = np.asarray(self.mic, dtype=np.float64)
        if dims.shape != (3,) or src.shape != (3,) or mic.shape != (3,):
            raise ValueError("dims, source and mic must be xyz triples")
        if np.any(dims <= 0):
            raise ValueError("room dimensions must be positive")
        for name, pos in (("source", src), ("mic", mic)):
            if np.any(pos <= 0) or np.any(pos >= dims):
                raise ValueError(f"{name} position {tuple(pos)} outside room {tuple(dims)}")
        if not 0.0 < self.absorption <= 1.0:
            raise ValueError("absorption must be in (0, 1]")
        if not 0 <= self.max_order <= MAX_REFLECTION_ORDER:
            raise ValueError(f"max_order must be in [0, {MAX_REFLECTION_ORDER}]")
        if np.allclose(src, mic):
            raise ValueError("source and mic positions coincide")


def image_arrivals(room: RoomSpec) -> tuple[np.ndarray, np.ndarray]:
    """Enumerate image sources; returns (delays_seconds, amplitudes).

    Along each axis the images of a source at s in [0, L] sit at
    (1 - 2q) * s + 2 m L with q in {0, 1}; that image's ray reflects |m - q|
    times off the near wall and |m| times off the far wall. Each image
    contributes amplitude r**order / (4 pi d) with r = sqrt(1 - absorption),
    delayed by d / c. Arrivals are sorted by delay.
    """
    dims = np.asarray(room.dims)
    src = np.asarray(room.source)
    mic = np.asarray(room.mic)
    refl = np.sqrt(1.0 - room.absorption)

    m_max = (room.max_order + 1) // 2
    ms = np.arange(-m_max, m_max + 1)
    axes = []  # per axis: arrays of (coordinate, reflection count)
    for i in range(3):
        coords, counts = [], []
        for q in (0, 1):
            for m in ms:
                order = abs(m - q) + abs(m)
                if order > room.max_order:
                    continue
                coords.append((1 - 2 * q) * src[i] + 2 * m * dims[i])
                counts.append(order)
        axes.append((np.asarray(coords), np.asarray(counts)))

    (cx, ox), (cy, oy), (cz, oz) = axes
    order = ox[:, None, None] + oy[None, :, None] + oz[None, None, :]
    keep = order <= room.max_order
    dx = cx[:, None, None] - mic[0]
    dy = cy[None, :, None] - mic[1]
    dz = cz[None, None, :] - mic[2]
    dist = np.sqrt(dx**2 + dy**2 + dz**2)
    dist = np.broadcast_to(dist, order.shape)[keep]
    order = order[keep]

    amps = refl**order / (4.0 * np.pi * dist)
    if refl == 0.0:
        amps = np.where(order == 0, 1.0 / (4.0 * np.pi * dist), 0.0)
        nonzero = amps > 0
        amps, dist = amps[nonzero], dist[nonzero]
    delays = dist / SPEED_OF_SOUND
    idx = np.argsort(delays, kind="stable")
    return delays[idx], amps[idx]


def generate_rir(room: RoomSpec, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Render the image arrivals to a discrete impulse response.

    Each arrival is placed at its fractional delay with an 81-tap Hann-windowed
    sinc kernel. Index ``SINC_HALF_WIDTH`` of the result corresponds to time
    zero (the kernel pre-rings, so the array carries that much lead-in).
    """
    delays, amps = image_arrivals(room)
    positions = delays * sample_rate
    length = int(np.ceil(positions.max())) + 2 * SINC_HALF_WIDTH + 2
    rir = np.zeros(length)
    offsets = np.arange(-SINC_HALF_WIDTH, SINC_HALF_WIDTH + 1)
    for pos, amp in zip(positions, amps):
        center = int(round(pos))
        t = center + offsets - pos
        kernel = 0.5 * (1.0 + np.cos(2.0 * np.pi * t / (2 * SINC_HALF_WIDTH + 1))) * np.sinc(t)
        kernel[np.abs(t) > SINC_HALF_WIDTH + 0.5] = 0.0
        rir[SINC_HALF_WIDTH + center + offsets] += amp * kernel
    return rir


def apply_reverb(wave: Waveform, room: RoomSpec) -> Waveform:
    """Convolve with the room response, delay-compensated and direct-path normalized.

    The output is cropped so the direct-path arrival lands at lag zero relative
    to the input, and scaled so the direct component has unit gain; the
    reverberant tail keeps its physical level relative to the direct path.
    """
    rir = generate_rir(room)
    direct_dist = float(np.linalg.norm(np.asarray(room.source) - np.asarray(room.mic)))
    direct_amp = 1.0 / (4.0 * np.pi * direct_dist)
    direct_idx = SINC_HALF_WIDTH + int(round(direct_dist / SPEED_OF_SOUND * wave.sample_rate))
    wet = scipy.signal.fftconvolve(wave.samples.astype(np.float64), rir / direct_amp)
    out = wet[direct_idx : direct_idx + len(wave)]
    return Waveform(out.astype(np.float32))


@dataclass(frozen=True)
class MixResult:
    noisy: Waveform
    noise_gain: float
    peak_gain: float


def mix_at_snr(
    speech: Waveform, noise: Waveform, snr_db: float, peak_limit: float | None = 0.99
) -> MixResult:
    """Mix noise into speech at an exact SNR.

    The noise gain is sqrt(P_speech / (P_noise * 10**(snr_db / 10))), which
    makes the realized SNR match ``snr_db`` identically. If the mixture peak
    exceeds ``peak_limit`` the whole mixture is scaled down; the same
    ``peak_gain`` must then be applied to any stored clean target (scaling
    both signals leaves the SNR untouched).
    """
    if len(speech) != len(noise):
        raise ValueError(f"length mismatch: speech {len(speech)} vs noise {len(noise)}")
    p_speech = power(speech)
    p_noise = power(noise)
    if p_speech == 0.0:
        raise ValueError("speech signal is silent")
    if p_noise == 0.0:
        raise ValueError("noise signal is silent")
    gain = float(np.sqrt(p_speech / (p_noise * 10.0 ** (snr_db / 10.0))))
    mixed = speech.samples.astype(np.float64) + gain * noise.samples.astype(np.float64)
    peak_gain = 1.0
    peak = float(np.max(np.abs(mixed)))
    if peak_limit is not None and peak > peak_limit:
        peak_gain = peak_limit / peak
        mixed = mixed * peak_gain
    return MixResult(noisy=Waveform(mixed.astype(np.float32)), noise_gain=gain, peak_gain=peak_gain)


class CodecKind(str, enum.Enum):
    MULAW8 = "mulaw8"
    RESAMPLE_LOWPASS = "resample_lowpass"


_MU = 255.0
# 3.4 kHz lowpass for the telephony-style codec; odd length keeps the group
# delay an integer so it can be compensated exactly.
_LOWPASS_TAPS = scipy.signal.firwin(255, 3400.0, fs=SAMPLE_RATE)


def _mulaw_round_trip(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, -1.0, 1.0)
    compressed = np.sign(x) * np.log1p(_MU * np.abs(x)) / np.log1p(_MU)
    levels = np.round((compressed + 1.0) / 2.0 * 255.0)
    compressed_q = levels / 255.0 * 2.0 - 1.0
    return np.sign(compressed_q) * ((1.0 + _MU) ** np.abs(compressed_q) - 1.0) / _MU


def _lowpass_telephone_round_trip(x: np.ndarray) -> np.ndarray:
    delay = (len(_LOWPASS_TAPS) - 1) // 2
    lp = scipy.signal.fftconvolve(x, _LOWPASS_TAPS)[delay : delay + len(x)]
    down = lp[::2]
    up = np.zeros(len(down) * 2)
    up[::2] = down
    out = scipy.signal.fftconvolve(up, 2.0 * _LOWPASS_TAPS)[delay : delay + len(x)]
    if len(out) < len(x):
        out = np.pad(out, (0, len(x) - len(out)))
    return out


def apply_codec(wave: Waveform, kind: CodecKind) -> Waveform:
    """Run a lossy codec round trip; output keeps length and sample rate."""
    kind = CodecKind(kind)
    x = wave.samples.astype(np.float64)
    if kind is CodecKind.MULAW8:
        out = _mulaw_round_trip(x)
    else:
        out = _lowpass_telephone_round_trip(x)
    return Waveform(out.astype(np.float32))


class NoiseBank:
    """Noise source collection backed by a manifest of ``path<TAB>duration`` lines."""

    def __init__(self, entries: dict[str, Path]):
        if not entries:
            raise ValueError("noise bank is empty")
        self.entries = entries

    @classmethod
    def from_manifest(cls, manifest_path) -> "NoiseBank":
        manifest_path = Path(manifest_path)
        entries: dict[str, Path] = {}
        for lineno, line in enumerate(manifest_path.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{manifest_path}:{lineno}: expected 'path<TAB>duration_seconds'")
            path, duration = parts
            try:
                if float(duration) <= 0:
                    raise ValueError
            except ValueError:
                raise ValueError(f"{manifest_path}:{lineno}: bad duration {duration!r}") from None
            resolved = Path(path)
            if not resolved.is_absolute():
                resolved = manifest_path.parent / resolved
            if not resolved.exists():
                raise FileNotFoundError(f"{manifest_path}:{lineno}: missing noise file {resolved}")
            entries[resolved.stem] = resolved
        return cls(entries)

    @property
    def ids(self) -> list[str]:
        return sorted(self.entries)

    def load(self, noise_id: str) -> Waveform:
        if noise_id not in self.entries:
            raise KeyError(f"unknown noise id {noise_id!r}")
        return read_wav(self.entries[noise_id])

    def matched_noise(self, noise_id: str, num_samples: int, rng: np.random.Generator) -> Waveform:
        """Noise cropped (random offset) or tiled to exactly ``num_samples``."""
        noise = self.load(noise_id).samples
        if len(noise) < num_samples:
            reps = int(np.ceil(num_samples / len(noise)))
            noise = np.tile(noise, reps)
        offset = int(rng.integers(0, len(noise) - num_samples + 1))
        return Waveform(noise[offset : offset + num_samples])


@dataclass(frozen=True)
class DegradationRecipe:
    """Everything needed to reproduce one degraded example deterministically."""

    snr_db: float
    noise_id: str
    room: RoomSpec | None = None
    codec: CodecKind | None = None
    seed: int = 0

    def to_json(self) -> str:
        d = {
            "snr_db": self.snr_db,
            "noise_id": self.noise_id,
            "codec": self.codec.value if self.codec else None,
            "seed": self.seed,
            "room": None,
        }
        if self.room is not None:
            d["room"] = {
                "dims": list(self.room.dims),
                "source": list(self.room.source),
                "mic": list(self.room.mic),
                "absorption": self.room.absorption,
                "max_order": self.room.max_order,
            }
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DegradationRecipe":
        d = json.loads(text)
        room = None
        if d.get("room"):
            r = d["room"]
            room = RoomSpec(
                dims=tuple(r["dims"]),
                source=tuple(r["source"]),
                mic=tuple(r["mic"]),
                absorption=r["absorption"],
                max_order=r["max_order"],
            )
        return cls(
            snr_db=d["snr_db"],
            noise_id=d["noise_id"],
            room=room,
            codec=CodecKind(d["codec"]) if d.get("codec") else None,
            seed=d.get("seed", 0),
        )


SNR_RANGE_DB = (5.0, 30.0)
ROOM_DIM_RANGE = (3.0, 10.0)
ABSORPTION_RANGE = (0.1, 0.6)
WALL_MARGIN = 0.5


def _sample_position(rng: np.random.Generator, dims: np.ndarray) -> np.ndarray:
    return rng.uniform(WALL_MARGIN, dims - WALL_MARGIN)


def sample_recipe(
    rng: np.random.Generator, noise_bank: NoiseBank, max_order: int = 4
) -> DegradationRecipe:
    """Draw one degradation recipe.

    The four (reverb?, codec?) patterns are uniform; SNR is uniform over
    [5, 30] dB; rooms are 3-10 m boxes with absorption in [0.1, 0.6] and both
    endpoints at least 0.5 m from every wall.
    """
    pattern = int(rng.integers(0, 4))
    with_reverb = bool(pattern & 1)
    with_codec = bool(pattern & 2)
    snr_db = float(rng.uniform(*SNR_RANGE_DB))
    noise_id = str(rng.choice(noise_bank.ids))

    room = None
    if with_reverb:
        dims = rng.uniform(ROOM_DIM_RANGE[0], ROOM_DIM_RANGE[1], size=3)
        source = _sample_position(rng, dims)
        mic = _sample_position(rng, dims)
        while np.linalg.norm(source - mic) < 0.3:
            mic = _sample_position(rng, dims)
        room = RoomSpec(
            dims=tuple(dims),
            source=tuple(source),
            mic=tuple(mic),
            absorption=float(rng.uniform(*ABSORPTION_RANGE)),
            max_order=max_order,
        )

    codec = None
    if with_codec:
        codec = CodecKind.MULAW8 if rng.integers(0, 2) == 0 else CodecKind.RESAMPLE_LOWPASS
    return DegradationRecipe(
        snr_db=snr_db,
        noise_id=noise_id,
        room=room,
        codec=codec,
        seed=int(rng.integers(0, 2**31 - 1)),
    )


def degrade(clean: Waveform, recipe: DegradationRecipe, noise_bank: NoiseBank):
    """Apply a recipe: reverb, then noise at the recipe SNR, then the codec.

    Returns (noisy, clean_target). The target is the dry, uncoded input,
    already aligned to the degraded signal (reverb is direct-path delay
    compensated) and carrying the same peak-normalization gain.
    """
    rng = np.random.default_rng(recipe.seed)
    speech = apply_reverb(clean, recipe.room) if recipe.room is not None else clean
    noise = noise_bank.matched_noise(recipe.noise_id, len(speech), rng)
    mix = mix_at_snr(speech, noise, recipe.snr_db)
    noisy = mix.noisy
    if recipe.codec is not None:
        noisy = apply_codec(noisy, recipe.codec)
    target = Waveform((clean.samples.astype(np.float64) * mix.peak_gain).astype(np.float32))
    return noisy, target
