"""Staged training runs, batched restoration and the inference benchmark.

A run is described by one YAML file. Each stage writes a verified checkpoint
under its own subdirectory; rerunning the pipeline loads whatever checkpoints
already exist and only trains the missing stages.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import yaml

from waverestore.audio import SAMPLE_RATE, chunk, read_wav, rejoin, write_wav
from waverestore.cleaner import (
    AdapterConfig,
    CleanerMode,
    FeatureCleaner,
    load_cleaner,
    read_pairs_manifest,
    train_cleaner,
)
from waverestore.encoder import (
    SAMPLES_PER_FRAME,
    ConformerEncoder,
    EncoderConfig,
    load_encoder,
    pretrain_encoder,
    save_random_encoder,
)
from waverestore.reference import REFERENCE_BENCHMARK
from waverestore.synth import read_path_list
from waverestore.vocoder import (
    Vocoder,
    VocoderConfig,
    deterministic_noise,
    estimate_activation_memory,
    finetune_vocoder,
    load_vocoder,
    pretrain_vocoder,
)


@dataclass(frozen=True)
class DataPaths:
    clean_manifest: str = ""
    noise_manifest: str = ""
    pairs_manifest: str = ""
    eval_manifest: str = ""


@dataclass(frozen=True)
class EncoderStage:
    pretrain: bool = False
    steps: int = 500
    batch_size: int = 8
    crop_seconds: float = 2.0
    lr: float = 3e-4
    vocab: int = 128
    code_dim: int = 16


@dataclass(frozen=True)
class CleanerStage:
    mode: str = "adapter"
    hidden_dim: int = 64
    wiring: str = "parallel"
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3


@dataclass(frozen=True)
class VocoderStage:
    pretrain_steps: int = 2000
    finetune_steps: int = 2000
    batch_size: int = 4
    pretrain_lr: float = 2e-4
    finetune_lr: float = 2e-4
    disc_lr: float = 2e-4
    stft_weight: float = 45.0
    crop_frames: int = 16


@dataclass(frozen=True)
class RestoreStage:
    chunk_seconds: float = 30.0
    overlap_seconds: float = 1.0
    batch_size: int = 2


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    data: DataPaths = DataPaths()
    encoder: EncoderStage = EncoderStage()
    encoder_model: EncoderConfig = EncoderConfig()
    cleaner: CleanerStage = CleanerStage()
    vocoder: VocoderStage = VocoderStage()
    vocoder_model: VocoderConfig = VocoderConfig()
    restore: RestoreStage = RestoreStage()

    def resolved_dict(self) -> dict:
        # json round trip turns enums into strings and tuples into lists.
        return json.loads(json.dumps(dataclasses.asdict(self)))


_SECTION_TYPES = {
    "data": DataPaths,
    "encoder": EncoderStage,
    "encoder_model": EncoderConfig,
    "cleaner": CleanerStage,
    "vocoder": VocoderStage,
    "vocoder_model": VocoderConfig,
    "restore": RestoreStage,
}


def _build_section(cls, raw: dict, where: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"{where}: unknown keys {sorted(unknown)}")
    coerced = {
        k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()
    }
    return cls(**coerced)


def load_config(path) -> PipelineConfig:
    raw = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: config must be a mapping")
    kwargs = {}
    for key, value in raw.items():
        if key == "seed":
            kwargs["seed"] = int(value)
        elif key in _SECTION_TYPES:
            kwargs[key] = _build_section(_SECTION_TYPES[key], value or {}, f"{path}:{key}")
        else:
            raise ValueError(f"{path}: unknown section {key!r}")
    return PipelineConfig(**kwargs)


def _resolve(manifest: str, config_dir: Path) -> Path:
    p = Path(manifest)
    return p if p.is_absolute() else config_dir / p


@dataclass
class PipelineResult:
    out_dir: Path
    encoder_checkpoint: Path
    cleaner_checkpoint: Path
    vocoder_pretrain_checkpoint: Path
    vocoder_checkpoint: Path
    stage_seconds: dict[str, float]
    resumed: list[str]


def _clean_feature_fn(encoder: ConformerEncoder):
    def fn(path) -> torch.Tensor:
        return torch.from_numpy(encoder.features(read_wav(path)))

    return fn


def _cleaned_feature_fn(cleaner: FeatureCleaner):
    def fn(path) -> torch.Tensor:
        samples = read_wav(path).samples
        usable = len(samples) // SAMPLES_PER_FRAME * SAMPLES_PER_FRAME
        waves = torch.from_numpy(samples[:usable]).unsqueeze(0)
        return cleaner.tap_features(waves).squeeze(0)

    return fn


def ensure_encoder(config: PipelineConfig, out_dir, clean_manifest) -> tuple[Path, bool]:
    """Checkpoint path and whether an existing one was reused."""
    ckpt = Path(out_dir) / "encoder" / "encoder.pt"
    if ckpt.exists():
        return ckpt, True
    if config.encoder.pretrain:
        pretrain_encoder(
            config.encoder_model,
            read_path_list(clean_manifest),
            ckpt.parent,
            steps=config.encoder.steps,
            batch_size=config.encoder.batch_size,
            crop_seconds=config.encoder.crop_seconds,
            lr=config.encoder.lr,
            vocab=config.encoder.vocab,
            code_dim=config.encoder.code_dim,
            seed=config.seed,
        )
    else:
        save_random_encoder(config.encoder_model, ckpt.parent, seed=config.seed)
    return ckpt, False


def ensure_cleaner(
    config: PipelineConfig, out_dir, encoder: ConformerEncoder, pairs_manifest
) -> tuple[Path, bool]:
    mode = CleanerMode(config.cleaner.mode)
    ckpt = Path(out_dir) / "cleaner" / f"cleaner_{mode.value}.pt"
    if ckpt.exists():
        return ckpt, True
    train_cleaner(
        encoder,
        pairs_manifest,
        ckpt.parent,
        mode=mode,
        adapter_config=AdapterConfig(
            hidden_dim=config.cleaner.hidden_dim, wiring=config.cleaner.wiring
        ),
        steps=config.cleaner.steps,
        batch_size=config.cleaner.batch_size,
        lr=config.cleaner.lr,
        seed=config.seed,
    )
    return ckpt, False


def ensure_vocoder_pretrain(
    config: PipelineConfig, out_dir, encoder: ConformerEncoder, clean_manifest
) -> tuple[Path, bool]:
    ckpt = Path(out_dir) / "vocoder" / "vocoder_pretrain.pt"
    if ckpt.exists():
        return ckpt, True
    pretrain_vocoder(
        _clean_feature_fn(encoder),
        read_path_list(clean_manifest),
        ckpt.parent,
        config=config.vocoder_model,
        steps=config.vocoder.pretrain_steps,
        batch_size=config.vocoder.batch_size,
        lr=config.vocoder.pretrain_lr,
        crop_frames=config.vocoder.crop_frames,
        seed=config.seed,
    )
    return ckpt, False


def ensure_vocoder_finetune(
    config: PipelineConfig, out_dir, cleaner: FeatureCleaner, pairs_manifest, pretrain_ckpt
) -> tuple[Path, bool]:
    ckpt = Path(out_dir) / "vocoder" / "vocoder_finetune.pt"
    if ckpt.exists():
        return ckpt, True
    finetune_vocoder(
        _cleaned_feature_fn(cleaner),
        read_pairs_manifest(pairs_manifest),
        ckpt.parent,
        from_checkpoint=pretrain_ckpt,
        steps=config.vocoder.finetune_steps,
        batch_size=config.vocoder.batch_size,
        lr=config.vocoder.finetune_lr,
        disc_lr=config.vocoder.disc_lr,
        stft_weight=config.vocoder.stft_weight,
        crop_frames=config.vocoder.crop_frames,
        seed=config.seed,
    )
    return ckpt, False


def run_pipeline(config: PipelineConfig, out_dir, config_dir: Path | None = None) -> PipelineResult:
    """Train every missing stage and leave four verified checkpoints behind."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_dir = Path(config_dir) if config_dir is not None else Path.cwd()
    (out_dir / "resolved_config.yaml").write_text(
        yaml.safe_dump(config.resolved_dict(), sort_keys=False)
    )
    clean_manifest = _resolve(config.data.clean_manifest, config_dir)
    pairs_manifest = _resolve(config.data.pairs_manifest, config_dir)

    stage_seconds: dict[str, float] = {}
    resumed: list[str] = []

    tick = time.monotonic()
    encoder_ckpt, reused = ensure_encoder(config, out_dir, clean_manifest)
    if reused:
        resumed.append("encoder")
    encoder = load_encoder(encoder_ckpt)
    stage_seconds["encoder"] = time.monotonic() - tick

    tick = time.monotonic()
    cleaner_ckpt, reused = ensure_cleaner(config, out_dir, encoder, pairs_manifest)
    if reused:
        resumed.append("cleaner")
    cleaner = load_cleaner(cleaner_ckpt, encoder)
    stage_seconds["cleaner"] = time.monotonic() - tick

    tick = time.monotonic()
    pretrain_ckpt, reused = ensure_vocoder_pretrain(config, out_dir, encoder, clean_manifest)
    if reused:
        resumed.append("vocoder_pretrain")
    stage_seconds["vocoder_pretrain"] = time.monotonic() - tick

    tick = time.monotonic()
    finetune_ckpt, reused = ensure_vocoder_finetune(
        config, out_dir, cleaner, pairs_manifest, pretrain_ckpt
    )
    if reused:
        resumed.append("vocoder_finetune")
    stage_seconds["vocoder_finetune"] = time.monotonic() - tick

    plot_training_curves(out_dir)
    summary = {
        "stage_seconds": stage_seconds,
        "resumed": resumed,
        "checkpoints": {
            "encoder": str(encoder_ckpt),
            "cleaner": str(cleaner_ckpt),
            "vocoder_pretrain": str(pretrain_ckpt),
            "vocoder_finetune": str(finetune_ckpt),
        },
    }
    (out_dir / "pipeline_summary.json").write_text(json.dumps(summary, indent=2))
    return PipelineResult(
        out_dir=out_dir,
        encoder_checkpoint=encoder_ckpt,
        cleaner_checkpoint=cleaner_ckpt,
        vocoder_pretrain_checkpoint=pretrain_ckpt,
        vocoder_checkpoint=finetune_ckpt,
        stage_seconds=stage_seconds,
        resumed=resumed,
    )


def plot_training_curves(out_dir) -> Path | None:
    """Loss curves for every stage that left a CSV behind."""
    import csv as csv_mod

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    curves = [
        ("encoder/pretrain_loss.csv", "encoder pretrain", "loss"),
        ("cleaner/cleaner_adapter_loss.csv", "cleaner (adapter)", "total"),
        ("cleaner/cleaner_full_loss.csv", "cleaner (full)", "total"),
        ("cleaner/cleaner_conformer_loss.csv", "cleaner (conformer)", "total"),
        ("vocoder/vocoder_pretrain_loss.csv", "vocoder pretrain", "total"),
        ("vocoder/vocoder_finetune_loss.csv", "vocoder finetune", "total"),
    ]
    present = []
    for rel, label, column in curves:
        path = out_dir / rel
        if path.exists():
            with open(path) as f:
                rows = list(csv_mod.DictReader(f))
            if rows:
                present.append((label, [float(r["step"]) for r in rows], [float(r[column]) for r in rows]))
    if not present:
        return None
    fig, axes = plt.subplots(1, len(present), figsize=(4 * len(present), 3), squeeze=False)
    for ax, (label, steps, losses) in zip(axes[0], present):
        ax.plot(steps, losses)
        ax.set_title(label)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
    fig.tight_layout()
    target = out_dir / "training_curves.png"
    fig.savefig(target, dpi=100)
    plt.close(fig)
    return target


@dataclass
class RestoreReport:
    restored: dict[str, Path]
    failures: list[tuple[str, str]]
    num_files: int
    num_chunks: int
    wall_seconds: float


def restore_files(
    cleaner: FeatureCleaner,
    vocoder: Vocoder,
    inputs: list[Path],
    out_dir,
    chunk_seconds: float = 30.0,
    overlap_seconds: float = 1.0,
    batch_size: int = 2,
    shard_index: int = 0,
    num_shards: int = 1,
    seed: int = 0,
) -> RestoreReport:
    """Restore this shard's files; unreadable inputs are skipped, not fatal.

    Files are split into equal-length overlapping chunks, chunks from all
    files are batched together, and each chunk's starting noise depends only
    on (seed, file stem, chunk index), so outputs are independent of batch
    size and sharding. Shard ``k`` of ``N`` takes inputs with index % N == k.
    """
    if not 0 <= shard_index < num_shards:
        raise ValueError(f"shard_index {shard_index} out of range for {num_shards} shards")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    chunk_len = int(round(chunk_seconds * SAMPLE_RATE))
    stride = chunk_len - int(round(overlap_seconds * SAMPLE_RATE))
    if chunk_len % SAMPLES_PER_FRAME or stride % SAMPLES_PER_FRAME:
        raise ValueError("chunk and stride must be whole numbers of 40 ms frames")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    start = time.monotonic()
    mine = [p for i, p in enumerate(inputs) if i % num_shards == shard_index]

    failures: list[tuple[str, str]] = []
    pending: dict[str, tuple] = {}  # stem -> (plan, outputs list, source path)
    tasks: list[tuple[str, int, np.ndarray]] = []
    for path in mine:
        path = Path(path)
        try:
            wave = read_wav(path)
            pieces, plan = chunk(wave, chunk_seconds, overlap_seconds)
        except Exception as err:  # noqa: BLE001 - skip-not-fail per file
            failures.append((path.stem, str(err)))
            continue
        pending[path.stem] = (plan, [None] * len(pieces), path)
        for idx, piece in enumerate(pieces):
            tasks.append((path.stem, idx, piece))

    num_chunks = 0
    for lo in range(0, len(tasks), batch_size):
        batch = tasks[lo : lo + batch_size]
        stems = {stem for stem, _, _ in batch}
        try:
            waves = torch.from_numpy(np.stack([piece for _, _, piece in batch]))
            feats = cleaner.tap_features(waves)
            noise = torch.cat(
                [deterministic_noise(f"{seed}:{stem}:{idx}", 1, chunk_len) for stem, idx, _ in batch]
            )
            restored = vocoder.synthesize(feats, noise)
        except Exception as err:  # noqa: BLE001 - drop the whole batch, keep going
            for stem in stems:
                if stem in pending:
                    del pending[stem]
                    failures.append((stem, str(err)))
            continue
        num_chunks += len(batch)
        for row, (stem, idx, _) in enumerate(batch):
            if stem in pending:
                pending[stem][1][idx] = restored[row].numpy()

    report = RestoreReport({}, failures, num_files=len(mine), num_chunks=num_chunks, wall_seconds=0.0)
    for stem, (plan, outputs, _) in pending.items():
        if any(o is None for o in outputs):
            continue
        target = out_dir / f"{stem}.wav"
        write_wav(target, rejoin(outputs, plan))
        report.restored[stem] = target
    report.wall_seconds = time.monotonic() - start
    if failures:
        (out_dir / "failures.json").write_text(
            json.dumps([{"utt_id": stem, "error": err} for stem, err in failures], indent=2)
        )
    return report


def run_benchmark(
    vocoder: Vocoder,
    batch_sizes=(1, 2, 4, 8),
    chunk_seconds: float = 4.0,
    reps: int = 5,
    memory_budget_mb: float | None = None,
    seed: int = 0,
) -> dict:
    """Median wall-clock RTF and analytic memory per batch size.

    ``rtf`` is wall seconds per second of produced audio, so throughput
    batching shows up as a decreasing value. Configurations whose analytic
    fp32 activation footprint exceeds the budget are marked ``oom`` and not
    timed. Reference measurements ship alongside for comparison.
    """
    frames = int(round(chunk_seconds * SAMPLE_RATE / SAMPLES_PER_FRAME))
    if frames < 1:
        raise ValueError("chunk_seconds too small")
    config = vocoder.config
    entries = []
    for batch in batch_sizes:
        memory = estimate_activation_memory(config, batch, chunk_seconds)
        entry = {
            "batch_size": batch,
            "peak_elements": memory["peak_elements"],
            "peak_bytes_fp16": memory["peak_bytes_fp16"],
            "peak_bytes_fp32": memory["peak_bytes_fp32"],
            "oom": bool(
                memory_budget_mb is not None
                and memory["peak_bytes_fp32"] > memory_budget_mb * 2**20
            ),
        }
        if not entry["oom"]:
            feats = torch.from_numpy(
                np.random.default_rng(seed).standard_normal((batch, frames, config.cond_dim)).astype(np.float32)
            )
            noise = deterministic_noise(f"bench:{batch}", batch, frames * SAMPLES_PER_FRAME)
            with torch.no_grad():
                vocoder.synthesize(feats, noise)  # warmup
                times = []
                for _ in range(reps):
                    tick = time.monotonic()
                    vocoder.synthesize(feats, noise)
                    times.append(time.monotonic() - tick)
            median = float(np.median(times))
            entry["median_seconds"] = median
            entry["rtf"] = median / (batch * chunk_seconds)
        entries.append(entry)
    return {
        "variant": config.variant.value,
        "chunk_seconds": chunk_seconds,
        "reps": reps,
        "entries": entries,
        "reference": REFERENCE_BENCHMARK,
    }


def load_runtime(encoder_ckpt, cleaner_ckpt, vocoder_ckpt) -> tuple[FeatureCleaner, Vocoder]:
    """Load the frozen inference stack from its three checkpoints."""
    encoder = load_encoder(encoder_ckpt)
    cleaner = load_cleaner(cleaner_ckpt, encoder)
    vocoder = load_vocoder(vocoder_ckpt)
    if vocoder.config.cond_dim != encoder.config.model_dim:
        raise ValueError(
            f"vocoder expects {vocoder.config.cond_dim}-dim features, encoder "
            f"produces {encoder.config.model_dim}"
        )
    return cleaner, vocoder
