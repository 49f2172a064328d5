"""Fixed-rate mono audio primitives: waveforms, STFT, chunking, WAV I/O.

Everything in this package runs at a single sample rate (16 kHz). Inputs at
other rates are rejected rather than resampled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.io.wavfile
import scipy.signal

SAMPLE_RATE = 16000

# PCM16 normalization constant. Reader divides by it, writer multiplies.
_PCM_SCALE = 32768.0


@dataclass(frozen=True)
class Waveform:
    """Mono float32 samples at 16 kHz, nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.ndim != 1:
            raise ValueError(f"waveform must be mono 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"sample rate must be {SAMPLE_RATE}, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_seconds(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    """Analysis/synthesis transform settings.

    The (window, hop) pair must satisfy the nonzero overlap-add condition so
    that ``istft(stft(x))`` reproduces ``x``; configs that do not are rejected
    here rather than at first use. Full end-to-end reconstruction additionally
    wants hop <= fft_size // 2 when centering.
    """

    fft_size: int = 512
    hop: int = 128
    window: str = "hann"

    def __post_init__(self):
        if self.fft_size <= 0 or self.hop <= 0:
            raise ValueError("fft_size and hop must be positive")
        if self.hop > self.fft_size:
            raise ValueError(f"hop {self.hop} exceeds fft_size {self.fft_size}")
        win = self.window_values()
        if not scipy.signal.check_NOLA(win, self.fft_size, self.fft_size - self.hop):
            raise ValueError(f"window {self.window!r} with hop {self.hop} cannot be inverted")

    def window_values(self) -> np.ndarray:
        try:
            return scipy.signal.get_window(self.window, self.fft_size, fftbins=True).astype(np.float64)
        except ValueError as exc:
            raise ValueError(f"unknown window {self.window!r}") from exc

    @property
    def num_bins(self) -> int:
        return self.fft_size // 2 + 1


@dataclass(frozen=True)
class Spectrogram:
    """Complex STFT bins of shape (num_frames, fft_size // 2 + 1)."""

    bins: np.ndarray
    config: StftConfig
    num_samples: int
    centered: bool = True

    def __post_init__(self):
        bins = np.asarray(self.bins)
        if bins.ndim != 2 or bins.shape[1] != self.config.num_bins:
            raise ValueError(
                f"bins shape {bins.shape} inconsistent with fft_size {self.config.fft_size}"
            )
        object.__setattr__(self, "bins", bins)

    @property
    def num_frames(self) -> int:
        return self.bins.shape[0]


def stft(wave: Waveform, config: StftConfig = StftConfig(), center: bool = True) -> Spectrogram:
    """Short-time Fourier transform.

    With ``center=True`` the signal is zero-padded by fft_size // 2 on both
    sides first. Frame count is 1 + floor((padded_len - fft_size) / hop).
    """
    x = wave.samples.astype(np.float64)
    pad = config.fft_size // 2 if center else 0
    x = np.pad(x, (pad, pad))
    if len(x) < config.fft_size:
        x = np.pad(x, (0, config.fft_size - len(x)))
    n_frames = 1 + (len(x) - config.fft_size) // config.hop
    window = config.window_values()
    frames = np.lib.stride_tricks.sliding_window_view(x, config.fft_size)[:: config.hop][:n_frames]
    bins = np.fft.rfft(frames * window, axis=1)
    return Spectrogram(bins=bins, config=config, num_samples=len(wave), centered=center)


def istft(spec: Spectrogram) -> Waveform:
    """Least-squares overlap-add inverse of :func:`stft`.

    Output length equals the length of the analyzed waveform.
    """
    config = spec.config
    window = config.window_values()
    frames = np.fft.irfft(spec.bins, n=config.fft_size, axis=1)
    padded_len = (spec.num_frames - 1) * config.hop + config.fft_size
    out = np.zeros(padded_len)
    denom = np.zeros(padded_len)
    for m in range(spec.num_frames):
        start = m * config.hop
        out[start : start + config.fft_size] += frames[m] * window
        denom[start : start + config.fft_size] += window**2
    nonzero = denom > 1e-11
    out[nonzero] /= denom[nonzero]
    pad = config.fft_size // 2 if spec.centered else 0
    out = out[pad : pad + spec.num_samples]
    if len(out) < spec.num_samples:
        out = np.pad(out, (0, spec.num_samples - len(out)))
    return Waveform(out.astype(np.float32))


def power(samples: np.ndarray | Waveform) -> float:
    """Mean squared sample value."""
    if isinstance(samples, Waveform):
        samples = samples.samples
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise ValueError("cannot compute power of an empty signal")
    return float(np.mean(samples**2))


@dataclass(frozen=True)
class ChunkPlan:
    """Bookkeeping needed to reassemble chunks into the original signal."""

    orig_len: int
    chunk_len: int
    stride: int
    num_chunks: int

    @property
    def overlap(self) -> int:
        return self.chunk_len - self.stride


def chunk(wave: Waveform, chunk_seconds: float = 30.0, overlap_seconds: float = 1.0):
    """Split into fixed-length overlapping chunks covering the whole signal.

    Every chunk has identical length (the last is zero-padded), which keeps
    batched processing shape-uniform. Returns (chunks, plan).
    """
    if chunk_seconds <= overlap_seconds or overlap_seconds < 0:
        raise ValueError("need chunk_seconds > overlap_seconds >= 0")
    chunk_len = int(round(chunk_seconds * wave.sample_rate))
    overlap = int(round(overlap_seconds * wave.sample_rate))
    stride = chunk_len - overlap
    n = len(wave)
    num_chunks = 1 if n <= chunk_len else 1 + math.ceil((n - chunk_len) / stride)
    padded = np.pad(wave.samples, (0, (num_chunks - 1) * stride + chunk_len - n))
    chunks = [padded[i * stride : i * stride + chunk_len].copy() for i in range(num_chunks)]
    return chunks, ChunkPlan(orig_len=n, chunk_len=chunk_len, stride=stride, num_chunks=num_chunks)


def rejoin(chunks: list[np.ndarray], plan: ChunkPlan) -> Waveform:
    """Reassemble chunks with a linear crossfade over each overlap region."""
    if len(chunks) != plan.num_chunks:
        raise ValueError(f"expected {plan.num_chunks} chunks, got {len(chunks)}")
    overlap = plan.overlap
    total = (plan.num_chunks - 1) * plan.stride + plan.chunk_len
    out = np.zeros(total)
    # Ramp weights for incoming chunks; the outgoing chunk gets (1 - ramp), so
    # corresponding weights sum to 1 and identity processing survives rejoin.
    ramp = np.arange(1, overlap + 1, dtype=np.float64) / (overlap + 1)
    for i, c in enumerate(chunks):
        c = np.asarray(c, dtype=np.float64)
        if len(c) != plan.chunk_len:
            raise ValueError(f"chunk {i} has length {len(c)}, expected {plan.chunk_len}")
        start = i * plan.stride
        w = np.ones(plan.chunk_len)
        if i > 0 and overlap > 0:
            w[:overlap] = ramp
        if i < plan.num_chunks - 1 and overlap > 0:
            w[plan.chunk_len - overlap :] = 1.0 - ramp
        out[start : start + plan.chunk_len] += c * w
    return Waveform(out[: plan.orig_len].astype(np.float32))


def read_wav(path) -> Waveform:
    """Read a mono 16 kHz WAV file (16-bit PCM or 32-bit float)."""
    rate, data = scipy.io.wavfile.read(path)
    if rate != SAMPLE_RATE:
        raise ValueError(f"{path}: sample rate {rate} not supported; expected {SAMPLE_RATE}")
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got shape {data.shape}")
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / _PCM_SCALE
    elif data.dtype == np.float32:
        samples = data
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples)


def write_wav(path, wave: Waveform, fmt: str = "float32") -> None:
    """Write a mono WAV file; ``fmt`` is "float32" or "pcm16".

    PCM writing inverts the reader's normalization exactly, so a PCM16
    read/write round trip is byte-stable.
    """
    if fmt == "pcm16":
        scaled = np.round(wave.samples.astype(np.float64) * _PCM_SCALE)
        data = np.clip(scaled, -32768, 32767).astype(np.int16)
    elif fmt == "float32":
        data = wave.samples.astype(np.float32)
    else:
        raise ValueError(f"unknown wav format {fmt!r}")
    scipy.io.wavfile.write(path, wave.sample_rate, data)
