"""Feature cleaner: lightweight adapters over a frozen encoder.

Degraded-speech features are mapped onto clean-speech features by small
per-layer feed-forward adapters added to the frozen conformer stack. Two
baselines train the same objective: finetuning the whole encoder, and a
post-hoc conformer operating on frozen tap features. The adapters' output
projections start at zero, so an untrained adapter stack is an exact identity
over the frozen encoder.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import enum
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from waverestore.audio import SAMPLE_RATE, read_wav
from waverestore.checkpoint import load_checkpoint, load_sidecar, param_hash, save_checkpoint
from waverestore.encoder import (
    SAMPLES_PER_FRAME,
    ConformerBlock,
    ConformerEncoder,
    EncoderConfig,
    freeze,
)


class Wiring(str, enum.Enum):
    PARALLEL = "parallel"  # x_{l+1} = block_l(x_l) + adapter_l(x_l)
    SEQUENTIAL = "sequential"  # x_{l+1} = h_l + adapter_l(h_l), h_l = block_l(x_l)


class CleanerMode(str, enum.Enum):
    ADAPTER = "adapter"
    FULL_FINETUNE = "full"
    CONFORMER_CLEANER = "conformer"


@dataclass(frozen=True)
class AdapterConfig:
    hidden_dim: int = 64
    wiring: Wiring = Wiring.PARALLEL

    def __post_init__(self):
        if self.hidden_dim <= 0:
            raise ValueError("hidden_dim must be positive")
        object.__setattr__(self, "wiring", Wiring(self.wiring))


class Adapter(nn.Module):
    """Bottleneck feed-forward branch; zero-initialized output projection."""

    def __init__(self, io_dim: int, hidden_dim: int):
        super().__init__()
        self.down = nn.Linear(io_dim, hidden_dim)
        self.up = nn.Linear(hidden_dim, io_dim)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, x):
        return self.up(nn.functional.gelu(self.down(x)))


class AdapterStack(nn.Module):
    def __init__(self, num_layers: int, io_dim: int, config: AdapterConfig):
        super().__init__()
        self.config = config
        self.adapters = nn.ModuleList(Adapter(io_dim, config.hidden_dim) for _ in range(num_layers))

    def __len__(self) -> int:
        return len(self.adapters)


def adapter_param_count(num_layers: int, io_dim: int, hidden_dim: int) -> int:
    """Closed-form parameter count: L * (2 * io * hidden + hidden + io)."""
    return num_layers * (2 * io_dim * hidden_dim + hidden_dim + io_dim)


def forward_with_adapters(
    encoder: ConformerEncoder, adapters: AdapterStack, waves: torch.Tensor
) -> torch.Tensor:
    """Adapted tap features (B, T, D) for a batch of equal-length waveforms."""
    if len(adapters) != encoder.config.num_layers:
        raise ValueError(
            f"{len(adapters)} adapters for {encoder.config.num_layers} encoder layers"
        )
    x = encoder.frontend(waves)
    parallel = adapters.config.wiring is Wiring.PARALLEL
    for layer, (block, adapter) in enumerate(zip(encoder.blocks, adapters.adapters), start=1):
        if parallel:
            x = block(x) + adapter(x)
        else:
            h = block(x)
            x = h + adapter(h)
        if layer == encoder.config.tap_layer:
            return x
    raise AssertionError("tap layer not reached")  # unreachable; config validated


class ConformerCleaner(nn.Module):
    """Post-hoc cleaner baseline: a small conformer over frozen tap features."""

    def __init__(self, io_dim: int, num_layers: int = 4, num_heads: int = 4, ffn_expansion: int = 4, conv_kernel: int = 7):
        super().__init__()
        self.blocks = nn.ModuleList(
            ConformerBlock(io_dim, num_heads, ffn_expansion, conv_kernel) for _ in range(num_layers)
        )

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        x = feats
        for block in self.blocks:
            x = block(x)
        return x


def feature_loss(pred: torch.Tensor, target: torch.Tensor) -> dict[str, torch.Tensor]:
    """L1 + L2 + spectral convergence between feature tensors.

    l1 is the mean absolute difference, l2 the mean squared difference, and
    sc the Frobenius norm of the difference over the Frobenius norm of the
    target. Returns each term and their (unweighted) sum under ``total``.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    diff = pred - target
    l1 = diff.abs().mean()
    l2 = (diff**2).mean()
    sc = torch.linalg.vector_norm(diff) / torch.linalg.vector_norm(target).clamp(min=1e-12)
    return {"l1": l1, "l2": l2, "sc": sc, "total": l1 + l2 + sc}


def count_parameters(module: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


def trainable_param_fraction(encoder: ConformerEncoder, trainee: nn.Module) -> float:
    """Trainable parameters over (frozen encoder + trainable parameters)."""
    trainable = sum(p.numel() for p in trainee.parameters() if p.requires_grad)
    frozen = count_parameters(encoder)
    return trainable / (frozen + trainable)


def read_pairs_manifest(path) -> list[tuple[Path, Path]]:
    """Parse ``noisy_path<TAB>clean_path`` lines."""
    path = Path(path)
    pairs = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'noisy<TAB>clean'")
        noisy, clean = (Path(p) if Path(p).is_absolute() else path.parent / p for p in parts)
        pairs.append((noisy, clean))
    if not pairs:
        raise ValueError(f"{path}: no pairs")
    return pairs


class TapFeatureCache:
    """Lazy cache of frozen-encoder tap features keyed by file path."""

    def __init__(self, encoder: ConformerEncoder):
        self.encoder = encoder
        self._store: dict[Path, torch.Tensor] = {}

    @torch.no_grad()
    def get(self, path: Path) -> torch.Tensor:
        if path not in self._store:
            feats = self.encoder.features(read_wav(path))
            self._store[path] = torch.from_numpy(feats)
        return self._store[path]

    def warm(self, paths) -> None:
        for path in paths:
            self.get(Path(path))


@dataclass
class CleanerResult:
    checkpoint: Path
    loss_curve: Path
    mode: CleanerMode
    final_loss: float
    median_step_seconds: float
    steps: int


def _load_waves(paths: list[Path]) -> dict[Path, np.ndarray]:
    waves = {}
    for path in paths:
        samples = read_wav(path).samples
        usable = len(samples) // SAMPLES_PER_FRAME * SAMPLES_PER_FRAME
        waves[path] = samples[:usable]
    return waves


def train_cleaner(
    encoder: ConformerEncoder,
    pairs_manifest,
    out_dir,
    mode: CleanerMode = CleanerMode.ADAPTER,
    adapter_config: AdapterConfig = AdapterConfig(),
    steps: int = 2000,
    batch_size: int = 16,
    lr: float = 1e-3,
    seed: int = 0,
    target_cache: TapFeatureCache | None = None,
) -> CleanerResult:
    """Train one cleaner mode to match frozen clean-speech tap features.

    Targets are the frozen encoder's tap features of the clean file; the
    trainee sees the noisy file. The frozen encoder itself is never updated
    (FULL_FINETUNE trains a copy). Writes ``cleaner_<mode>.pt`` and
    ``cleaner_<mode>_loss.csv`` with per-step wall-clock timing.
    """
    mode = CleanerMode(mode)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    encoder_hash_before = param_hash(encoder)

    pairs = read_pairs_manifest(pairs_manifest)
    noisy_waves = _load_waves([n for n, _ in pairs])
    cache = target_cache or TapFeatureCache(encoder)

    adapters = AdapterStack(encoder.config.num_layers, encoder.config.model_dim, adapter_config)
    if mode is CleanerMode.ADAPTER:
        trainee: nn.Module = adapters
    elif mode is CleanerMode.FULL_FINETUNE:
        tuned = copy.deepcopy(encoder).train()
        for p in tuned.parameters():
            p.requires_grad = True
        trainee = tuned
    else:
        trainee = ConformerCleaner(encoder.config.model_dim)
    optimizer = torch.optim.Adam((p for p in trainee.parameters() if p.requires_grad), lr=lr)

    curve_path = out_dir / f"cleaner_{mode.value}_loss.csv"
    step_seconds: list[float] = []
    totals: list[float] = []
    start_time = time.monotonic()
    with open(curve_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "seconds", "l1", "l2", "sc", "total"])
        for step in range(steps):
            picks = [pairs[int(rng.integers(0, len(pairs)))] for _ in range(batch_size)]
            t_min = min(len(cache.get(c)) for _, c in picks)
            n_min = t_min * SAMPLES_PER_FRAME
            targets = torch.stack([cache.get(c)[:t_min] for _, c in picks])
            waves = torch.from_numpy(np.stack([noisy_waves[n][:n_min] for n, _ in picks]))

            step_start = time.monotonic()
            if mode is CleanerMode.ADAPTER:
                pred = forward_with_adapters(encoder, adapters, waves)
            elif mode is CleanerMode.FULL_FINETUNE:
                pred = trainee.tap(waves)
            else:
                with torch.no_grad():
                    base = encoder.tap(waves)
                pred = trainee(base)
            losses = feature_loss(pred, targets)
            optimizer.zero_grad()
            losses["total"].backward()
            optimizer.step()
            step_seconds.append(time.monotonic() - step_start)

            totals.append(float(losses["total"].detach()))
            writer.writerow(
                [step, f"{time.monotonic() - start_time:.4f}"]
                + [f"{float(losses[k].detach()):.6f}" for k in ("l1", "l2", "sc")]
                + [f"{totals[-1]:.6f}"]
            )

    if param_hash(encoder) != encoder_hash_before:
        raise RuntimeError("frozen encoder parameters changed during cleaner training")

    ckpt = out_dir / f"cleaner_{mode.value}.pt"
    tail = max(1, steps // 10)
    final_loss = float(np.mean(totals[-tail:]))
    save_checkpoint(
        ckpt,
        trainee,
        kind="cleaner",
        config={
            "mode": mode.value,
            "hidden_dim": adapter_config.hidden_dim,
            "wiring": adapter_config.wiring.value,
            "encoder": dataclasses.asdict(encoder.config),
        },
        seed=seed,
        extra={
            "encoder_hash": encoder_hash_before,
            "final_loss": final_loss,
            "steps": steps,
            "trainable_fraction": trainable_param_fraction(encoder, trainee),
        },
    )
    return CleanerResult(
        checkpoint=ckpt,
        loss_curve=curve_path,
        mode=mode,
        final_loss=final_loss,
        median_step_seconds=float(np.median(step_seconds)),
        steps=steps,
    )


class FeatureCleaner(nn.Module):
    """Inference-time wrapper: waveform batch -> cleaned tap features."""

    def __init__(self, encoder: ConformerEncoder, mode: CleanerMode, trainee: nn.Module):
        super().__init__()
        self.encoder = encoder
        self.mode = mode
        self.trainee = trainee

    @torch.no_grad()
    def tap_features(self, waves: torch.Tensor) -> torch.Tensor:
        if self.mode is CleanerMode.ADAPTER:
            return forward_with_adapters(self.encoder, self.trainee, waves)
        if self.mode is CleanerMode.FULL_FINETUNE:
            return self.trainee.tap(waves)
        return self.trainee(self.encoder.tap(waves))


def load_cleaner(path, encoder: ConformerEncoder) -> FeatureCleaner:
    meta = load_sidecar(path)
    if meta.get("kind") != "cleaner":
        raise ValueError(f"{path}: not a cleaner checkpoint")
    mode = CleanerMode(meta["config"]["mode"])
    if mode is CleanerMode.ADAPTER:
        config = AdapterConfig(hidden_dim=meta["config"]["hidden_dim"], wiring=meta["config"]["wiring"])
        trainee: nn.Module = AdapterStack(encoder.config.num_layers, encoder.config.model_dim, config)
    elif mode is CleanerMode.FULL_FINETUNE:
        trainee = ConformerEncoder(encoder.config)
    else:
        trainee = ConformerCleaner(encoder.config.model_dim)
    load_checkpoint(path, trainee, expected_kind="cleaner")
    freeze(trainee)
    return FeatureCleaner(encoder, mode, trainee)
