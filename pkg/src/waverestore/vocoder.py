"""Iterative refinement vocoder: cleaned features to waveform.

A fixed number of refinement steps turn seeded noise into speech. Each step
subtracts a learned correction from the current estimate and rescales it to a
target power predicted from the conditioning features. The correction network
is an upsampling stack modulated by features of the current estimate; the
MEMORY_EFFICIENT variant replaces transposed-convolution upsampling with
sample repetition, drops the full-rate modulator, and collapses each
modulator's three affine pairs into one additive term.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from waverestore.audio import SAMPLE_RATE, read_wav
from waverestore.checkpoint import load_checkpoint, load_sidecar, save_checkpoint
from waverestore.encoder import SAMPLES_PER_FRAME, ConformerBlock

FRAME_RATE = SAMPLE_RATE // SAMPLES_PER_FRAME  # conditioning frames per second
_POWER_FLOOR = 1e-12


class VocoderVariant(str, enum.Enum):
    VANILLA = "vanilla"
    MEMORY_EFFICIENT = "memory_efficient"


@dataclass(frozen=True)
class VocoderConfig:
    cond_dim: int = 256
    prenet_dim: int = 128
    prenet_layers: int = 2
    prenet_heads: int = 4
    repeat_factor: int = 4
    up_factors: tuple[int, ...] = (5, 4, 2, 2, 2)
    up_dims: tuple[int, ...] = (64, 48, 32, 24, 16)
    down_dims: tuple[int, ...] = (16, 24, 32, 64)
    iterations: int = 5
    variant: VocoderVariant = VocoderVariant.VANILLA

    def __post_init__(self):
        object.__setattr__(self, "variant", VocoderVariant(self.variant))
        object.__setattr__(self, "up_factors", tuple(int(f) for f in self.up_factors))
        object.__setattr__(self, "up_dims", tuple(int(d) for d in self.up_dims))
        object.__setattr__(self, "down_dims", tuple(int(d) for d in self.down_dims))
        if self.repeat_factor < 1 or any(f < 2 for f in self.up_factors):
            raise ValueError("repeat_factor must be >= 1 and upsampling factors >= 2")
        if self.repeat_factor * math.prod(self.up_factors) != SAMPLES_PER_FRAME:
            raise ValueError(
                f"repeat_factor * prod(up_factors) must be {SAMPLES_PER_FRAME}, got "
                f"{self.repeat_factor} * {math.prod(self.up_factors)}"
            )
        if len(self.up_dims) != len(self.up_factors):
            raise ValueError("up_dims must match up_factors")
        if len(self.down_dims) != len(self.up_factors) - 1:
            raise ValueError("down_dims must have len(up_factors) - 1 entries")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if min(self.cond_dim, self.prenet_dim, *self.up_dims, *self.down_dims) < 1:
            raise ValueError("dimensions must be positive")
        if self.prenet_dim % self.prenet_heads != 0:
            raise ValueError("prenet_dim must divide evenly over prenet_heads")

    @property
    def down_factors(self) -> tuple[int, ...]:
        # The estimate path mirrors the conditioning path: its feature rates
        # must land on each upsampling stage's output rate.
        return tuple(reversed(self.up_factors[1:]))

    @property
    def film_count(self) -> int:
        n = len(self.up_factors)
        return n if self.variant is VocoderVariant.VANILLA else n - 1


def config_from_dict(raw: dict) -> VocoderConfig:
    raw = dict(raw)
    for key in ("up_factors", "up_dims", "down_dims"):
        raw[key] = tuple(raw[key])
    return VocoderConfig(**raw)


def repeat_upsample(x: torch.Tensor, factor: int) -> torch.Tensor:
    """(B, T, C) -> (B, T * factor, C); out[:, i] = x[:, i // factor]."""
    return torch.repeat_interleave(x, factor, dim=1)


class Film(nn.Module):
    """Modulation head: estimate-path features -> three (scale, shift) pairs."""

    def __init__(self, feat_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv1d(feat_ch, 6 * out_ch, 3, padding=1)
        self.out_ch = out_ch

    def forward(self, feats: torch.Tensor) -> list[tuple[torch.Tensor, torch.Tensor]]:
        p = self.conv(nn.functional.leaky_relu(feats, 0.2))
        chunks = p.split(self.out_ch, dim=1)
        return [(chunks[0], chunks[1]), (chunks[2], chunks[3]), (chunks[4], chunks[5])]


class AdditiveFilm(nn.Module):
    """Single additive modulation tensor; 1x channels instead of 6x."""

    def __init__(self, feat_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv1d(feat_ch, out_ch, 3, padding=1)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        return self.conv(nn.functional.leaky_relu(feats, 0.2))


class UBlock(nn.Module):
    """Upsampling stage of the conditioning path."""

    def __init__(self, in_ch: int, out_ch: int, factor: int, variant: VocoderVariant):
        super().__init__()
        self.factor = factor
        self.variant = variant
        if variant is VocoderVariant.VANILLA:
            self.upsample = nn.ConvTranspose1d(
                in_ch, in_ch, 2 * factor, stride=factor,
                padding=(factor + 1) // 2, output_padding=factor % 2,
            )
        else:
            self.upsample = nn.Upsample(scale_factor=factor, mode="nearest")
        self.res = nn.Conv1d(in_ch, out_ch, 1)
        self.conv1 = nn.Conv1d(in_ch, out_ch, 3, padding=1)
        self.conv2 = nn.Conv1d(out_ch, out_ch, 3, padding=2, dilation=2)
        self.conv3 = nn.Conv1d(out_ch, out_ch, 3, padding=4, dilation=4)
        self.conv4 = nn.Conv1d(out_ch, out_ch, 3, padding=8, dilation=8)

    def _up(self, x: torch.Tensor) -> torch.Tensor:
        return self.upsample(x)

    def forward(self, x: torch.Tensor, mod) -> torch.Tensor:
        lrelu = nn.functional.leaky_relu
        up = self._up(x)
        res = self.res(up)
        h = self.conv1(lrelu(up, 0.2))
        if self.variant is VocoderVariant.VANILLA:
            scale, shift = mod[0]
            h = scale * h + shift
        elif mod is not None:
            h = h + mod
        h = self.conv2(lrelu(h, 0.2))
        x1 = res + h
        h2 = x1
        if self.variant is VocoderVariant.VANILLA:
            scale, shift = mod[1]
            h2 = scale * h2 + shift
        h2 = self.conv3(lrelu(h2, 0.2))
        if self.variant is VocoderVariant.VANILLA:
            scale, shift = mod[2]
            h2 = scale * h2 + shift
        h2 = self.conv4(lrelu(h2, 0.2))
        return x1 + h2


class DBlock(nn.Module):
    """Downsampling stage of the estimate path."""

    def __init__(self, in_ch: int, out_ch: int, factor: int):
        super().__init__()
        self.pool = nn.AvgPool1d(factor)
        self.res = nn.Conv1d(in_ch, out_ch, 1)
        self.conv1 = nn.Conv1d(in_ch, out_ch, 3, padding=1)
        self.conv2 = nn.Conv1d(out_ch, out_ch, 3, padding=2, dilation=2)
        self.conv3 = nn.Conv1d(out_ch, out_ch, 3, padding=4, dilation=4)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        lrelu = nn.functional.leaky_relu
        y = self.pool(x)
        h = self.conv1(lrelu(y, 0.2))
        h = self.conv2(lrelu(h, 0.2))
        h = self.conv3(lrelu(h, 0.2))
        return h + self.res(y)


class RefinementNet(nn.Module):
    """One correction pass: (estimate, conditioning at 100 Hz) -> correction."""

    def __init__(self, config: VocoderConfig):
        super().__init__()
        self.config = config
        init_ch = config.down_dims[0]
        self.init_conv = nn.Conv1d(1, init_ch, 5, padding=2)
        down_in = [init_ch, *config.down_dims[:-1]]
        self.dblocks = nn.ModuleList(
            DBlock(i, o, f) for i, o, f in zip(down_in, config.down_dims, config.down_factors)
        )

        self.pre_conv = nn.Conv1d(config.prenet_dim, config.up_dims[0], 3, padding=1)
        up_in = [config.up_dims[0], *config.up_dims[:-1]]
        self.ublocks = nn.ModuleList(
            UBlock(i, o, f, config.variant)
            for i, o, f in zip(up_in, config.up_dims, config.up_factors)
        )

        # Modulator i feeds upsampling stage i; stream i is the estimate-path
        # feature at that stage's output rate (deepest block first, the raw
        # full-rate convolution last). MEMORY_EFFICIENT drops the full-rate
        # modulator and uses additive modulation.
        stream_ch = [*reversed(config.down_dims), init_ch]
        if config.variant is VocoderVariant.VANILLA:
            self.films = nn.ModuleList(
                Film(c, o) for c, o in zip(stream_ch, config.up_dims)
            )
        else:
            self.films = nn.ModuleList(
                AdditiveFilm(c, o) for c, o in zip(stream_ch[:-1], config.up_dims[:-1])
            )
        self.out_conv = nn.Conv1d(config.up_dims[-1], 1, 3, padding=1)

    def forward(self, estimate: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        """estimate (B, L), cond (B, L / 160, prenet_dim) -> correction (B, L)."""
        streams = []
        d = self.init_conv(estimate.unsqueeze(1))
        full_rate = d
        for dblock in self.dblocks:
            d = dblock(d)
            streams.append(d)
        streams = [*reversed(streams), full_rate]

        x = self.pre_conv(cond.transpose(1, 2))
        for i, ublock in enumerate(self.ublocks):
            mod = self.films[i](streams[i]) if i < len(self.films) else None
            x = ublock(x, mod)
        return self.out_conv(x).squeeze(1)


class Vocoder(nn.Module):
    """Prenet + gain estimator + fixed-point refinement loop."""

    def __init__(self, config: VocoderConfig):
        super().__init__()
        self.config = config
        self.cond_proj = nn.Linear(config.cond_dim, config.prenet_dim)
        self.prenet = nn.ModuleList(
            ConformerBlock(config.prenet_dim, config.prenet_heads, 2, 7)
            for _ in range(config.prenet_layers)
        )
        self.gain_head = nn.Linear(config.prenet_dim, 1)
        self.net = RefinementNet(config)

    def prepare(self, features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, T, cond_dim) -> conditioning at 100 Hz and target power (B,)."""
        c = self.cond_proj(features)
        for block in self.prenet:
            c = block(c)
        log_power = self.gain_head(c).mean(dim=(1, 2))
        cond = repeat_upsample(c, self.config.repeat_factor)
        return cond, torch.exp(log_power)

    def _rescale(self, z: torch.Tensor, target_power: torch.Tensor) -> torch.Tensor:
        power = (z**2).mean(dim=1).clamp(min=_POWER_FLOOR)
        return z * torch.sqrt(target_power / power).unsqueeze(1)

    def refine(self, features: torch.Tensor, noise: torch.Tensor) -> list[torch.Tensor]:
        """All refinement iterates, last entry is the output waveform.

        Every returned estimate is rescaled to the predicted target power.
        ``noise`` must have shape (B, T * 640) for features (B, T, cond_dim).
        """
        batch, frames, _ = features.shape
        expected = frames * SAMPLES_PER_FRAME
        if noise.shape != (batch, expected):
            raise ValueError(f"noise shape {tuple(noise.shape)}, expected ({batch}, {expected})")
        cond, target_power = self.prepare(features)
        y = self._rescale(noise, target_power)
        iterates = []
        for step in range(self.config.iterations):
            correction = self.net(y, cond)
            y = self._rescale(y - correction, target_power)
            if not torch.isfinite(y).all():
                raise RuntimeError(f"non-finite samples after refinement step {step}")
            iterates.append(y)
        return iterates

    @torch.no_grad()
    def synthesize(self, features: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        return self.refine(features, noise)[-1]


def deterministic_noise(key: str, batch: int, length: int) -> torch.Tensor:
    """Reproducible unit Gaussian noise; the stream depends only on ``key``."""
    digest = hashlib.sha256(key.encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return torch.from_numpy(rng.standard_normal((batch, length)).astype(np.float32))


def build_vocoder(config: VocoderConfig, seed: int) -> Vocoder:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return Vocoder(config)


def count_film_modules(vocoder: Vocoder) -> int:
    return len(vocoder.net.films)


class MultiResStftLoss(nn.Module):
    """Sum of log-magnitude L1 and spectral convergence over three windows."""

    def __init__(self, fft_sizes=(512, 1024, 2048), hop_sizes=(128, 256, 512)):
        super().__init__()
        self.fft_sizes = tuple(fft_sizes)
        self.hop_sizes = tuple(hop_sizes)
        for n in self.fft_sizes:
            self.register_buffer(f"window_{n}", torch.hann_window(n), persistent=False)

    def _magnitude(self, wave: torch.Tensor, n_fft: int, hop: int) -> torch.Tensor:
        # The floor sits far below voiced magnitudes but above synthesis noise
        # floors, so silent bins stop dominating the log term.
        window = getattr(self, f"window_{n_fft}").to(wave.dtype)
        spec = torch.stft(wave, n_fft, hop, window=window, return_complex=True, center=True)
        return spec.abs().clamp(min=1e-2)

    def forward(self, pred: torch.Tensor, target: torch.Tensor) -> dict[str, torch.Tensor]:
        log_l1 = pred.new_zeros(())
        sc = pred.new_zeros(())
        for n_fft, hop in zip(self.fft_sizes, self.hop_sizes):
            p = self._magnitude(pred, n_fft, hop)
            t = self._magnitude(target, n_fft, hop)
            log_l1 = log_l1 + (torch.log(p) - torch.log(t)).abs().mean()
            sc = sc + torch.linalg.vector_norm(t - p) / torch.linalg.vector_norm(t).clamp(min=1e-12)
        scale = 1.0 / len(self.fft_sizes)
        log_l1, sc = log_l1 * scale, sc * scale
        return {"log_l1": log_l1, "sc": sc, "total": log_l1 + sc}


class ScaleDiscriminator(nn.Module):
    def __init__(self):
        super().__init__()
        self.convs = nn.ModuleList(
            [
                nn.Conv1d(1, 64, 15, stride=1, padding=7),
                nn.Conv1d(64, 128, 41, stride=4, padding=20, groups=4),
                nn.Conv1d(128, 256, 41, stride=4, padding=20, groups=8),
                nn.Conv1d(256, 256, 5, stride=1, padding=2),
            ]
        )
        self.logit = nn.Conv1d(256, 1, 3, padding=1)

    def forward(self, wave: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        feats = []
        h = wave.unsqueeze(1)
        for conv in self.convs:
            h = nn.functional.leaky_relu(conv(h), 0.2)
            feats.append(h)
        return self.logit(h), feats


class MultiScaleDiscriminator(nn.Module):
    """Three waveform discriminators at 1x, 2x and 4x average pooling."""

    def __init__(self):
        super().__init__()
        self.bands = nn.ModuleList(ScaleDiscriminator() for _ in range(3))
        self.pool = nn.AvgPool1d(4, stride=2, padding=1, count_include_pad=False)

    def forward(self, wave: torch.Tensor) -> list[tuple[torch.Tensor, list[torch.Tensor]]]:
        outputs = []
        h = wave
        for i, band in enumerate(self.bands):
            if i > 0:
                h = self.pool(h.unsqueeze(1)).squeeze(1)
            outputs.append(band(h))
        return outputs


FEATURE_MATCH_WEIGHT = 2.0


def discriminator_loss(disc: MultiScaleDiscriminator, real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    loss = real.new_zeros(())
    for (logit_r, _), (logit_f, _) in zip(disc(real), disc(fake.detach())):
        loss = loss + torch.relu(1.0 - logit_r).mean() + torch.relu(1.0 + logit_f).mean()
    return loss / len(disc.bands)


def generator_adversarial_loss(
    disc: MultiScaleDiscriminator, real: torch.Tensor, fake: torch.Tensor
) -> dict[str, torch.Tensor]:
    adv = fake.new_zeros(())
    matched = fake.new_zeros(())
    count = 0
    for (logit_f, feats_f), (_, feats_r) in zip(disc(fake), disc(real)):
        adv = adv - logit_f.mean()
        for ff, fr in zip(feats_f, feats_r):
            matched = matched + (ff - fr.detach()).abs().mean()
            count += 1
    adv = adv / len(disc.bands)
    matched = matched / count
    return {"adv": adv, "fm": matched, "total": adv + FEATURE_MATCH_WEIGHT * matched}


def estimate_activation_memory(
    config: VocoderConfig, batch_size: int, chunk_seconds: float
) -> dict:
    """Closed-form activation footprint of one refinement call.

    Counts every module output produced while correcting one batch of
    estimates (the retained-activation regime of training). Matches the sum
    of forward-hook output sizes exactly.
    """
    frames = int(round(chunk_seconds * FRAME_RATE))
    length = frames * SAMPLES_PER_FRAME
    vanilla = config.variant is VocoderVariant.VANILLA

    count = 0
    # Estimate path: full-rate conv, then pool (in_ch) + four convs per stage.
    rate = length
    in_ch = config.down_dims[0]
    count += in_ch * rate  # init_conv
    for out_ch, factor in zip(config.down_dims, config.down_factors):
        rate //= factor
        count += (in_ch + 4 * out_ch) * rate  # pool, res, conv1..3
        in_ch = out_ch
    # Modulators.
    rate = frames * config.repeat_factor
    for i, (out_ch, factor) in enumerate(zip(config.up_dims, config.up_factors)):
        rate *= factor
        if vanilla:
            count += 6 * out_ch * rate
        elif i < len(config.up_factors) - 1:
            count += out_ch * rate
    # Conditioning path: pre_conv, then per stage upsample + res + conv1..4.
    rate = frames * config.repeat_factor
    count += config.up_dims[0] * rate
    in_ch = config.up_dims[0]
    for out_ch, factor in zip(config.up_dims, config.up_factors):
        rate *= factor
        count += in_ch * rate  # upsample output (transposed conv or repeat)
        count += 5 * out_ch * rate
        in_ch = out_ch
    count += length  # out_conv

    elements = batch_size * count
    return {
        "variant": config.variant.value,
        "batch_size": batch_size,
        "chunk_seconds": chunk_seconds,
        "peak_elements": elements,
        "peak_bytes_fp16": 2 * elements,
        "peak_bytes_fp32": 4 * elements,
    }


def _feature_fn_from_encoder(encoder):
    def fn(path: Path) -> torch.Tensor:
        return torch.from_numpy(encoder.features(read_wav(path)))

    return fn


@dataclass
class VocoderTrainResult:
    checkpoint: Path
    loss_curve: Path
    final_loss: float
    steps: int
    median_step_seconds: float = 0.0


class _CropSampler:
    """Frame-aligned random crops over cached (features, waveform) pairs."""

    def __init__(self, items: list[tuple[torch.Tensor, torch.Tensor]], crop_frames: int, rng):
        self.items = items
        self.crop_frames = crop_frames
        self.rng = rng
        for feats, wave in items:
            if len(feats) < crop_frames:
                raise ValueError(f"need >= {crop_frames} feature frames, got {len(feats)}")
            assert len(wave) == len(feats) * SAMPLES_PER_FRAME

    def batch(self, batch_size: int) -> tuple[torch.Tensor, torch.Tensor]:
        feats, waves = [], []
        for _ in range(batch_size):
            feat, wave = self.items[int(self.rng.integers(0, len(self.items)))]
            start = int(self.rng.integers(0, len(feat) - self.crop_frames + 1))
            feats.append(feat[start : start + self.crop_frames])
            lo = start * SAMPLES_PER_FRAME
            waves.append(wave[lo : lo + self.crop_frames * SAMPLES_PER_FRAME])
        return torch.stack(feats), torch.stack(waves)


def _load_training_items(manifest_rows, feature_fn) -> list[tuple[torch.Tensor, torch.Tensor]]:
    items = []
    for cond_path, target_path in manifest_rows:
        feats = feature_fn(cond_path)
        wave = torch.from_numpy(read_wav(target_path).samples)
        usable = min(len(feats), len(wave) // SAMPLES_PER_FRAME)
        items.append((feats[:usable], wave[: usable * SAMPLES_PER_FRAME]))
    return items


def _gain_loss(vocoder: Vocoder, feats: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Log-power regression for the gain head against the target crop.

    The rescale step pins every iterate's power to the head's estimate, so a
    biased head caps how well magnitudes can fit; direct supervision keeps it
    honest instead of relying on gradient leaking through the rescale.
    """
    _, target_power = vocoder.prepare(feats)
    true_power = (target**2).mean(dim=1).clamp(min=_POWER_FLOOR)
    return (target_power.clamp(min=_POWER_FLOOR).log() - true_power.log()).abs().mean()


def pretrain_vocoder(
    feature_fn,
    clean_paths,
    out_dir,
    config: VocoderConfig = VocoderConfig(),
    steps: int = 2000,
    batch_size: int = 4,
    lr: float = 2e-4,
    crop_frames: int = 16,
    seed: int = 0,
) -> VocoderTrainResult:
    """Spectrogram-loss pretraining on clean speech (features -> waveform).

    ``feature_fn`` maps a wav path to conditioning features (T, cond_dim);
    all refinement iterates are pulled toward the clean target.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    vocoder = build_vocoder(config, seed)
    items = _load_training_items([(p, p) for p in map(Path, clean_paths)], feature_fn)
    sampler = _CropSampler(items, crop_frames, rng)
    stft_loss = MultiResStftLoss()
    optimizer = torch.optim.Adam(vocoder.parameters(), lr=lr)

    curve_path = out_dir / "vocoder_pretrain_loss.csv"
    totals: list[float] = []
    step_seconds: list[float] = []
    start = time.monotonic()
    with open(curve_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "seconds", "log_l1", "sc", "gain", "total"])
        for step in range(steps):
            feats, target = sampler.batch(batch_size)
            noise = torch.from_numpy(
                rng.standard_normal(target.shape).astype(np.float32)
            )
            tick = time.monotonic()
            iterates = vocoder.refine(feats, noise)
            gain = _gain_loss(vocoder, feats, target)
            log_l1 = feats.new_zeros(())
            sc = feats.new_zeros(())
            for estimate in iterates:
                part = stft_loss(estimate, target)
                log_l1 = log_l1 + part["log_l1"] / len(iterates)
                sc = sc + part["sc"] / len(iterates)
            total = log_l1 + sc + gain
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            step_seconds.append(time.monotonic() - tick)
            totals.append(float(total.detach()))
            writer.writerow(
                [step, f"{time.monotonic() - start:.4f}", f"{float(log_l1.detach()):.6f}",
                 f"{float(sc.detach()):.6f}", f"{float(gain.detach()):.6f}", f"{totals[-1]:.6f}"]
            )

    ckpt = out_dir / "vocoder_pretrain.pt"
    tail = max(1, steps // 10)
    final_loss = float(np.mean(totals[-tail:]))
    save_checkpoint(
        ckpt, vocoder, kind="vocoder", config=config, seed=seed,
        extra={"stage": "pretrain", "steps": steps, "final_loss": final_loss},
    )
    return VocoderTrainResult(
        checkpoint=ckpt, loss_curve=curve_path, final_loss=final_loss, steps=steps,
        median_step_seconds=float(np.median(step_seconds)),
    )


def finetune_vocoder(
    feature_fn,
    pairs,
    out_dir,
    from_checkpoint,
    steps: int = 2000,
    batch_size: int = 4,
    lr: float = 2e-4,
    disc_lr: float = 2e-4,
    stft_weight: float = 45.0,
    crop_frames: int = 16,
    seed: int = 0,
) -> VocoderTrainResult:
    """Adversarial finetuning on (noisy, clean) pairs.

    Conditioning comes from ``feature_fn`` applied to the degraded file, the
    waveform target is the clean file. Spectrogram losses cover every
    iterate; the adversarial and feature-matching terms grade only the final
    output. ``stft_weight`` keeps the spectral term dominant so the
    adversarial game refines detail instead of steering the whole fit.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)

    meta = load_sidecar(from_checkpoint)
    config = config_from_dict(meta["config"])
    vocoder = Vocoder(config)
    load_checkpoint(from_checkpoint, vocoder, expected_kind="vocoder")
    disc = MultiScaleDiscriminator()

    items = _load_training_items([(Path(n), Path(c)) for n, c in pairs], feature_fn)
    sampler = _CropSampler(items, crop_frames, rng)
    stft_loss = MultiResStftLoss()
    gen_opt = torch.optim.Adam(vocoder.parameters(), lr=lr, betas=(0.8, 0.99))
    disc_opt = torch.optim.Adam(disc.parameters(), lr=disc_lr, betas=(0.8, 0.99))

    curve_path = out_dir / "vocoder_finetune_loss.csv"
    totals: list[float] = []
    step_seconds: list[float] = []
    start = time.monotonic()
    with open(curve_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "seconds", "stft", "gain", "adv", "fm", "disc", "total"])
        for step in range(steps):
            feats, target = sampler.batch(batch_size)
            noise = torch.from_numpy(rng.standard_normal(target.shape).astype(np.float32))
            tick = time.monotonic()
            iterates = vocoder.refine(feats, noise)
            final = iterates[-1]

            d_loss = discriminator_loss(disc, target, final)
            disc_opt.zero_grad()
            d_loss.backward()
            disc_opt.step()

            gain = _gain_loss(vocoder, feats, target)
            stft_total = feats.new_zeros(())
            for estimate in iterates:
                stft_total = stft_total + stft_loss(estimate, target)["total"] / len(iterates)
            gan = generator_adversarial_loss(disc, target, final)
            total = stft_weight * (stft_total + gain) + gan["total"]
            gen_opt.zero_grad()
            total.backward()
            gen_opt.step()
            step_seconds.append(time.monotonic() - tick)

            totals.append(float(total.detach()))
            writer.writerow(
                [step, f"{time.monotonic() - start:.4f}", f"{float(stft_total.detach()):.6f}",
                 f"{float(gain.detach()):.6f}", f"{float(gan['adv'].detach()):.6f}",
                 f"{float(gan['fm'].detach()):.6f}", f"{float(d_loss.detach()):.6f}", f"{totals[-1]:.6f}"]
            )

    ckpt = out_dir / "vocoder_finetune.pt"
    tail = max(1, steps // 10)
    final_loss = float(np.mean(totals[-tail:]))
    save_checkpoint(
        ckpt, vocoder, kind="vocoder", config=config, seed=seed,
        extra={"stage": "finetune", "steps": steps, "final_loss": final_loss,
               "from_checkpoint": str(from_checkpoint)},
    )
    return VocoderTrainResult(
        checkpoint=ckpt, loss_curve=curve_path, final_loss=final_loss, steps=steps,
        median_step_seconds=float(np.median(step_seconds)),
    )


def load_vocoder(path) -> Vocoder:
    meta = load_sidecar(path)
    if meta.get("kind") != "vocoder":
        raise ValueError(f"{path}: not a vocoder checkpoint")
    vocoder = Vocoder(config_from_dict(meta["config"]))
    load_checkpoint(path, vocoder, expected_kind="vocoder")
    vocoder.eval()
    for p in vocoder.parameters():
        p.requires_grad = False
    return vocoder
