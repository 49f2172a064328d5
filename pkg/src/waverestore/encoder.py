"""Frozen conformer speech encoder and its self-supervised pretraining.

The encoder maps 16 kHz waveforms to per-layer feature sequences at 25 Hz
(128-bin log-mel at a 10 ms hop, 4x convolutional subsampling, then a stack of
conformer blocks). Pretraining is masked prediction of ids from a frozen
random-projection quantizer; afterwards the encoder is frozen and only its
features are consumed downstream. A randomly initialized frozen encoder is
also a valid (flagged) stand-in, which keeps small runs cheap.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from waverestore.audio import SAMPLE_RATE, Waveform, read_wav
from waverestore.checkpoint import save_checkpoint

MEL_HOP = 160  # 10 ms
MEL_WIN = 400  # 25 ms
MEL_NFFT = 1024
SUBSAMPLE = 4
SAMPLES_PER_FRAME = MEL_HOP * SUBSAMPLE  # 640 -> 25 feature frames per second


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 6
    model_dim: int = 256
    num_heads: int = 4
    ffn_expansion: int = 4
    conv_kernel: int = 7
    mel_bins: int = 128
    tap_layer: int = 4  # 1-based; defaults to ceil(2/3 * num_layers) for 6 layers

    def __post_init__(self):
        if not 1 <= self.tap_layer <= self.num_layers:
            raise ValueError(f"tap_layer {self.tap_layer} outside [1, {self.num_layers}]")
        if self.model_dim % self.num_heads:
            raise ValueError("model_dim must be divisible by num_heads")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")

    @property
    def frame_rate(self) -> int:
        return SAMPLE_RATE // SAMPLES_PER_FRAME


def frame_count(num_samples: int) -> int:
    """Feature frames for a raw length: round(duration * 25), halves up."""
    frames = int(math.floor(num_samples / SAMPLES_PER_FRAME + 0.5))
    if frames < 1:
        raise ValueError(f"input too short for one feature frame: {num_samples} samples")
    return frames


def _fit_length(samples: np.ndarray) -> np.ndarray:
    target = frame_count(len(samples)) * SAMPLES_PER_FRAME
    if len(samples) < target:
        return np.pad(samples, (0, target - len(samples)))
    return samples[:target]


def mel_filterbank(mel_bins: int, n_fft: int = MEL_NFFT, fmin: float = 20.0, fmax: float = 7600.0) -> np.ndarray:
    """Triangular mel filters (rows = mel bins). Raises if any row is empty."""

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)

    fft_freqs = np.linspace(0, SAMPLE_RATE / 2, n_fft // 2 + 1)
    mel_points = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), mel_bins + 2)
    hz_points = mel_to_hz(mel_points)
    bank = np.zeros((mel_bins, len(fft_freqs)))
    for i in range(mel_bins):
        lo, center, hi = hz_points[i : i + 3]
        rising = (fft_freqs - lo) / (center - lo)
        falling = (hi - fft_freqs) / (hi - center)
        bank[i] = np.clip(np.minimum(rising, falling), 0.0, None)
    if np.any(bank.sum(axis=1) == 0):
        raise ValueError("mel filterbank has empty rows; increase n_fft or reduce mel_bins")
    return bank


class _FeedForward(nn.Module):
    def __init__(self, dim: int, expansion: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.net = nn.Sequential(nn.Linear(dim, expansion * dim), nn.SiLU(), nn.Linear(expansion * dim, dim))

    def forward(self, x):
        return self.net(self.norm(x))


class _ConvModule(nn.Module):
    def __init__(self, dim: int, kernel: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.pointwise_in = nn.Conv1d(dim, 2 * dim, 1)
        self.depthwise = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=dim)
        self.mid_norm = nn.LayerNorm(dim)
        self.pointwise_out = nn.Conv1d(dim, dim, 1)

    def forward(self, x):
        y = self.norm(x).transpose(1, 2)
        y = nn.functional.glu(self.pointwise_in(y), dim=1)
        y = self.depthwise(y)
        y = self.mid_norm(y.transpose(1, 2)).transpose(1, 2)
        y = self.pointwise_out(nn.functional.silu(y))
        return y.transpose(1, 2)


class ConformerBlock(nn.Module):
    """Macaron feed-forward pair around self-attention and a conv module."""

    def __init__(self, dim: int, heads: int, expansion: int, kernel: int):
        super().__init__()
        self.ffn1 = _FeedForward(dim, expansion)
        self.attn_norm = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.conv = _ConvModule(dim, kernel)
        self.ffn2 = _FeedForward(dim, expansion)
        self.out_norm = nn.LayerNorm(dim)

    def forward(self, x):
        x = x + 0.5 * self.ffn1(x)
        h = self.attn_norm(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        x = x + self.conv(x)
        x = x + 0.5 * self.ffn2(x)
        return self.out_norm(x)


def _sinusoidal_encoding(length: int, dim: int, device) -> torch.Tensor:
    position = torch.arange(length, device=device, dtype=torch.float32).unsqueeze(1)
    div = torch.exp(torch.arange(0, dim, 2, device=device, dtype=torch.float32) * (-math.log(10000.0) / dim))
    enc = torch.zeros(length, dim, device=device)
    enc[:, 0::2] = torch.sin(position * div)
    enc[:, 1::2] = torch.cos(position * div)
    return enc


class ConformerEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        bank = torch.from_numpy(mel_filterbank(config.mel_bins)).float()
        self.register_buffer("mel_bank", bank)
        self.register_buffer("mel_window", torch.hann_window(MEL_WIN, periodic=True))
        self.subsample = nn.Sequential(
            nn.Conv1d(config.mel_bins, config.model_dim, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv1d(config.model_dim, config.model_dim, 3, stride=2, padding=1),
            nn.GELU(),
        )
        self.blocks = nn.ModuleList(
            ConformerBlock(config.model_dim, config.num_heads, config.ffn_expansion, config.conv_kernel)
            for _ in range(config.num_layers)
        )

    def log_mel(self, waves: torch.Tensor) -> torch.Tensor:
        """(B, L) -> (B, L / 160, mel_bins); L must be a multiple of 640."""
        if waves.shape[-1] % SAMPLES_PER_FRAME:
            raise ValueError(f"length {waves.shape[-1]} not a multiple of {SAMPLES_PER_FRAME}")
        pad = (MEL_WIN - MEL_HOP) // 2
        x = nn.functional.pad(waves, (pad, pad), mode="reflect")
        frames = x.unfold(-1, MEL_WIN, MEL_HOP) * self.mel_window
        spec = torch.fft.rfft(frames, n=MEL_NFFT).abs() ** 2
        mel = spec @ self.mel_bank.T
        return torch.log(mel.clamp(min=1e-10))

    def frontend(self, waves: torch.Tensor) -> torch.Tensor:
        """(B, L) -> (B, L / 640, model_dim): normalized log-mel, subsampled.

        The subsampled signal is scaled by sqrt(model_dim) before the
        positional encoding is added, so content dominates position at the
        stack entry.
        """
        mel = self.log_mel(waves)
        mean = mel.mean(dim=1, keepdim=True)
        std = mel.std(dim=1, keepdim=True).clamp(min=1e-5)
        mel = (mel - mean) / std
        frames = self.subsample(mel.transpose(1, 2)).transpose(1, 2)
        frames = frames * math.sqrt(self.config.model_dim)
        return frames + _sinusoidal_encoding(frames.shape[1], frames.shape[2], frames.device)

    def encode_frames(self, frames: torch.Tensor) -> list[torch.Tensor]:
        """Run the conformer stack; returns every layer's output (B, T, D)."""
        outputs = []
        x = frames
        for block in self.blocks:
            x = block(x)
            outputs.append(x)
        return outputs

    def forward(self, waves: torch.Tensor) -> list[torch.Tensor]:
        return self.encode_frames(self.frontend(waves))

    def tap(self, waves: torch.Tensor) -> torch.Tensor:
        """Features at the configured tap layer, (B, T, D)."""
        x = self.frontend(waves)
        for block in self.blocks[: self.config.tap_layer]:
            x = block(x)
        return x

    @torch.no_grad()
    def features(self, wave: Waveform, layer: int | None = None) -> np.ndarray:
        """Tap-layer features for one waveform as a (T, D) array.

        T follows the frame-count law round(duration * 25); the waveform is
        padded or trimmed by less than half a frame to fit it.
        """
        samples = _fit_length(wave.samples)
        batch = torch.from_numpy(samples).unsqueeze(0)
        outputs = self.forward(batch)
        index = (layer if layer is not None else self.config.tap_layer) - 1
        return outputs[index].squeeze(0).numpy()


def build_encoder(config: EncoderConfig, seed: int) -> ConformerEncoder:
    """Deterministically initialized encoder (same seed, same parameters)."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        encoder = ConformerEncoder(config)
    return encoder


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad = False
    return module.eval()


class RandomQuantizer(nn.Module):
    """Frozen random projection plus L2-normalized random codebook.

    Targets are nearest-codebook-row ids (Euclidean distance, ties resolved to
    the lowest index) of the L2-normalized projected input frames.
    """

    def __init__(self, input_dim: int, code_dim: int = 16, vocab: int = 128, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        projection = rng.standard_normal((input_dim, code_dim)) / math.sqrt(input_dim)
        codebook = rng.standard_normal((vocab, code_dim))
        codebook /= np.linalg.norm(codebook, axis=1, keepdims=True)
        self.register_buffer("projection", torch.from_numpy(projection).float())
        self.register_buffer("codebook", torch.from_numpy(codebook).float())
        self.vocab = vocab

    @torch.no_grad()
    def targets(self, frames: torch.Tensor) -> torch.Tensor:
        """(..., input_dim) -> (...) long ids."""
        z = frames @ self.projection
        z = z / z.norm(dim=-1, keepdim=True).clamp(min=1e-12)
        dist = torch.cdist(z.reshape(-1, z.shape[-1]), self.codebook)
        ids = np.argmin(dist.numpy(), axis=1)  # numpy argmin: first minimum wins
        return torch.from_numpy(ids).reshape(z.shape[:-1])


def stacked_mel(encoder: ConformerEncoder, waves: torch.Tensor) -> torch.Tensor:
    """Per-utterance-normalized mel frames stacked 4-per-feature-frame.

    Output (B, T, 4 * mel_bins) aligns one quantizer input with each encoder
    frame.
    """
    mel = encoder.log_mel(waves)
    mean = mel.mean(dim=1, keepdim=True)
    std = mel.std(dim=1, keepdim=True).clamp(min=1e-5)
    mel = (mel - mean) / std
    b, t_mel, bins = mel.shape
    return mel.reshape(b, t_mel // SUBSAMPLE, SUBSAMPLE * bins)


MASK_PROB = 0.065
MASK_SPAN = 4  # shorter than one syllable, so context reveals masked content


def sample_mask(num_frames: int, rng: np.random.Generator, prob: float = MASK_PROB, span: int = MASK_SPAN) -> np.ndarray:
    """Contiguous-span mask: each frame starts a span with ``prob``."""
    starts = rng.random(num_frames) < prob
    if not starts.any():
        starts[int(rng.integers(0, num_frames))] = True
    mask = np.zeros(num_frames, dtype=bool)
    for start in np.flatnonzero(starts):
        mask[start : start + span] = True
    return mask


@dataclass
class PretrainResult:
    checkpoint: Path
    loss_curve: Path
    final_loss: float
    final_accuracy: float
    steps: int


def pretrain_encoder(
    config: EncoderConfig,
    manifest: list[Path],
    out_dir,
    steps: int,
    batch_size: int = 8,
    crop_seconds: float = 2.0,
    lr: float = 3e-4,
    vocab: int = 128,
    code_dim: int = 16,
    seed: int = 0,
) -> PretrainResult:
    """Masked-prediction pretraining against the frozen random quantizer.

    Masked frontend frames are replaced with Gaussian noise; a zero-initialized
    softmax head predicts quantizer ids at masked positions only, so the
    step-0 loss is exactly ln(vocab). Writes ``encoder.pt`` (frozen weights)
    and ``pretrain_loss.csv``. Fully seeded: same inputs, same final hash.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(seed)
    encoder = build_encoder(config, seed)
    quantizer = RandomQuantizer(SUBSAMPLE * config.mel_bins, code_dim=code_dim, vocab=vocab, seed=seed + 1)
    head = nn.Linear(config.model_dim, vocab)
    nn.init.zeros_(head.weight)
    nn.init.zeros_(head.bias)
    params = list(encoder.parameters()) + list(head.parameters())
    optimizer = torch.optim.Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    crop = int(crop_seconds * SAMPLE_RATE) // SAMPLES_PER_FRAME * SAMPLES_PER_FRAME

    clips = [read_wav(p).samples for p in manifest]
    if not clips:
        raise ValueError("empty pretraining manifest")

    curve_path = out_dir / "pretrain_loss.csv"
    start_time = time.monotonic()
    final_loss = final_acc = float("nan")
    with open(curve_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "seconds", "loss", "masked_accuracy"])
        for step in range(steps):
            batch = np.stack([_random_crop(clips, crop, rng) for _ in range(batch_size)])
            waves = torch.from_numpy(batch)
            with torch.no_grad():
                targets = quantizer.targets(stacked_mel(encoder, waves))
            frames = encoder.frontend(waves)
            mask = np.stack([sample_mask(frames.shape[1], rng) for _ in range(batch_size)])
            mask_t = torch.from_numpy(mask)
            noise = torch.from_numpy(
                rng.normal(0.0, 0.1, size=frames.shape).astype(np.float32)
            )
            frames = torch.where(mask_t.unsqueeze(-1), noise, frames)
            logits = head(encoder.encode_frames(frames)[-1])
            loss = nn.functional.cross_entropy(logits[mask_t], targets[mask_t])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            with torch.no_grad():
                acc = (logits[mask_t].argmax(dim=-1) == targets[mask_t]).float().mean()
            writer.writerow(
                [step, f"{time.monotonic() - start_time:.3f}", float(loss.detach()), float(acc)]
            )

    # Masked accuracy from one training batch is too noisy to report; score a
    # fresh multi-batch evaluation pass instead.
    encoder.eval()
    with torch.no_grad():
        hits = total = 0
        loss_sum = 0.0
        for _ in range(10):
            batch = np.stack([_random_crop(clips, crop, rng) for _ in range(batch_size)])
            waves = torch.from_numpy(batch)
            targets = quantizer.targets(stacked_mel(encoder, waves))
            frames = encoder.frontend(waves)
            mask = np.stack([sample_mask(frames.shape[1], rng) for _ in range(batch_size)])
            mask_t = torch.from_numpy(mask)
            noise = torch.from_numpy(rng.normal(0.0, 0.1, size=frames.shape).astype(np.float32))
            frames = torch.where(mask_t.unsqueeze(-1), noise, frames)
            logits = head(encoder.encode_frames(frames)[-1])
            loss_sum += float(nn.functional.cross_entropy(logits[mask_t], targets[mask_t]))
            hits += int((logits[mask_t].argmax(dim=-1) == targets[mask_t]).sum())
            total += int(mask_t.sum())
    final_loss = loss_sum / 10.0
    final_acc = hits / total

    freeze(encoder)
    ckpt = out_dir / "encoder.pt"
    save_checkpoint(
        ckpt,
        encoder,
        kind="encoder",
        config=config,
        seed=seed,
        extra={"pretrained": True, "steps": steps, "vocab": vocab, "code_dim": code_dim},
    )
    return PretrainResult(ckpt, curve_path, final_loss, final_acc, steps)


def _random_crop(clips: list[np.ndarray], crop: int, rng: np.random.Generator) -> np.ndarray:
    clip = clips[int(rng.integers(0, len(clips)))]
    if len(clip) <= crop:
        return np.pad(clip, (0, crop - len(clip)))
    offset = int(rng.integers(0, len(clip) - crop + 1))
    return clip[offset : offset + crop]


def save_random_encoder(config: EncoderConfig, out_dir, seed: int) -> Path:
    """Frozen randomly initialized encoder checkpoint (flagged as such)."""
    out_dir = Path(out_dir)
    encoder = freeze(build_encoder(config, seed))
    ckpt = out_dir / "encoder.pt"
    save_checkpoint(ckpt, encoder, kind="encoder", config=config, seed=seed, extra={"pretrained": False})
    return ckpt


def load_encoder(path) -> ConformerEncoder:
    """Rebuild a frozen encoder from a checkpoint and its sidecar."""
    from waverestore.checkpoint import load_checkpoint, load_sidecar

    meta = load_sidecar(path)
    config = EncoderConfig(**{k: v for k, v in meta["config"].items()})
    encoder = ConformerEncoder(config)
    load_checkpoint(path, encoder, expected_kind="encoder")
    return freeze(encoder)
