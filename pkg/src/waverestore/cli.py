"""Command line entry points for the restoration toolkit."""

from __future__ import annotations

import dataclasses
import json
import sys
from pathlib import Path

import click
import torch

from waverestore.pipeline import (
    ensure_cleaner,
    ensure_encoder,
    ensure_vocoder_finetune,
    ensure_vocoder_pretrain,
    load_config,
    load_runtime,
    plot_training_curves,
    restore_files,
    run_benchmark,
    run_pipeline,
)


@click.group()
def main():
    """Universal speech restoration: train, restore, benchmark, evaluate."""
    torch.set_num_threads(1)


def _load(config_path) -> tuple:
    config = load_config(config_path)
    return config, Path(config_path).parent


def _resolve(manifest: str, base: Path) -> Path:
    p = Path(manifest)
    return p if p.is_absolute() else base / p


@main.command("synth-data")
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--count", default=64, show_default=True)
@click.option("--duration", default=3.0, show_default=True, help="Utterance length in seconds.")
@click.option("--seed", default=0, show_default=True)
def synth_data(out, count, duration, seed):
    """Generate a voiced corpus, a noise bank and degraded pairs."""
    from waverestore.synth import UtteranceSpec, build_clean_corpus, build_noise_bank, build_paired_corpus

    spec = UtteranceSpec(duration_seconds=duration)
    clean = build_clean_corpus(out / "clean", count=count, seed=seed, spec=spec)
    noise = build_noise_bank(out / "noise", seed=seed + 1)
    outputs = build_paired_corpus(clean, noise, out / "paired", seed=seed + 2)
    click.echo(f"clean manifest: {clean}")
    click.echo(f"noise manifest: {noise}")
    for name, path in outputs.items():
        click.echo(f"{name} manifest: {path}")


@main.command("degrade")
@click.option("--clean-manifest", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--noise-manifest", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--seed", default=0, show_default=True)
def degrade_cmd(clean_manifest, noise_manifest, out, seed):
    """Degrade a clean corpus with sampled recipes."""
    from waverestore.synth import build_paired_corpus

    outputs = build_paired_corpus(clean_manifest, noise_manifest, out, seed=seed)
    for name, path in outputs.items():
        click.echo(f"{name} manifest: {path}")


@main.command("pretrain-encoder")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(path_type=Path))
def pretrain_encoder_cmd(config_path, out):
    """Run (or reuse) the encoder stage of a pipeline config."""
    config, base = _load(config_path)
    ckpt, reused = ensure_encoder(config, out, _resolve(config.data.clean_manifest, base))
    click.echo(("reused " if reused else "wrote ") + str(ckpt))


@main.command("train-cleaner")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--mode", type=click.Choice(["adapter", "full", "conformer"]), default=None,
              help="Override the configured cleaner mode.")
def train_cleaner_cmd(config_path, out, mode):
    """Train the feature cleaner against frozen clean-speech features."""
    from waverestore.encoder import load_encoder

    config, base = _load(config_path)
    if mode is not None:
        config = dataclasses.replace(config, cleaner=dataclasses.replace(config.cleaner, mode=mode))
    enc_ckpt, _ = ensure_encoder(config, out, _resolve(config.data.clean_manifest, base))
    encoder = load_encoder(enc_ckpt)
    ckpt, reused = ensure_cleaner(config, out, encoder, _resolve(config.data.pairs_manifest, base))
    click.echo(("reused " if reused else "wrote ") + str(ckpt))


@main.command("pretrain-vocoder")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(path_type=Path))
def pretrain_vocoder_cmd(config_path, out):
    """Spectrogram-loss vocoder pretraining on clean speech."""
    from waverestore.encoder import load_encoder

    config, base = _load(config_path)
    enc_ckpt, _ = ensure_encoder(config, out, _resolve(config.data.clean_manifest, base))
    encoder = load_encoder(enc_ckpt)
    ckpt, reused = ensure_vocoder_pretrain(
        config, out, encoder, _resolve(config.data.clean_manifest, base)
    )
    click.echo(("reused " if reused else "wrote ") + str(ckpt))


@main.command("finetune-vocoder")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(path_type=Path))
def finetune_vocoder_cmd(config_path, out):
    """Adversarial vocoder finetuning on cleaned degraded features."""
    from waverestore.cleaner import load_cleaner
    from waverestore.encoder import load_encoder

    config, base = _load(config_path)
    clean_manifest = _resolve(config.data.clean_manifest, base)
    pairs_manifest = _resolve(config.data.pairs_manifest, base)
    enc_ckpt, _ = ensure_encoder(config, out, clean_manifest)
    encoder = load_encoder(enc_ckpt)
    cleaner_ckpt, _ = ensure_cleaner(config, out, encoder, pairs_manifest)
    cleaner = load_cleaner(cleaner_ckpt, encoder)
    pre_ckpt, _ = ensure_vocoder_pretrain(config, out, encoder, clean_manifest)
    ckpt, reused = ensure_vocoder_finetune(config, out, cleaner, pairs_manifest, pre_ckpt)
    click.echo(("reused " if reused else "wrote ") + str(ckpt))


@main.command("run-pipeline")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(path_type=Path))
def run_pipeline_cmd(config_path, out):
    """Run every training stage, reusing existing checkpoints."""
    config, base = _load(config_path)
    result = run_pipeline(config, out, config_dir=base)
    for stage, seconds in result.stage_seconds.items():
        status = "(resumed)" if stage in result.resumed else ""
        click.echo(f"{stage}: {seconds:.1f}s {status}")
    click.echo(f"checkpoints under {result.out_dir}")


@main.command("restore")
@click.option("--run", "run_dir", type=click.Path(exists=True, path_type=Path),
              help="Pipeline output directory holding the three checkpoints.")
@click.option("--encoder", "encoder_ckpt", type=click.Path(exists=True))
@click.option("--cleaner", "cleaner_ckpt", type=click.Path(exists=True))
@click.option("--vocoder", "vocoder_ckpt", type=click.Path(exists=True))
@click.option("--inputs", required=True, type=click.Path(exists=True, path_type=Path),
              help="Manifest listing wav files, one per line.")
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--chunk-seconds", default=30.0, show_default=True)
@click.option("--overlap-seconds", default=1.0, show_default=True)
@click.option("--batch", default=2, show_default=True)
@click.option("--shard-index", default=0, show_default=True)
@click.option("--num-shards", default=1, show_default=True)
@click.option("--seed", default=0, show_default=True)
def restore_cmd(run_dir, encoder_ckpt, cleaner_ckpt, vocoder_ckpt, inputs, out,
                chunk_seconds, overlap_seconds, batch, shard_index, num_shards, seed):
    """Restore degraded recordings; exits 2 if any file was skipped."""
    from waverestore.synth import read_path_list

    if run_dir is not None:
        encoder_ckpt = run_dir / "encoder" / "encoder.pt"
        cleaner_candidates = sorted((run_dir / "cleaner").glob("cleaner_*.pt"))
        if not cleaner_candidates:
            raise click.ClickException(f"no cleaner checkpoint under {run_dir}")
        cleaner_ckpt = cleaner_candidates[0]
        vocoder_ckpt = run_dir / "vocoder" / "vocoder_finetune.pt"
    if not (encoder_ckpt and cleaner_ckpt and vocoder_ckpt):
        raise click.ClickException("pass --run or all of --encoder/--cleaner/--vocoder")
    cleaner, vocoder = load_runtime(encoder_ckpt, cleaner_ckpt, vocoder_ckpt)
    report = restore_files(
        cleaner,
        vocoder,
        read_path_list(inputs),
        out,
        chunk_seconds=chunk_seconds,
        overlap_seconds=overlap_seconds,
        batch_size=batch,
        shard_index=shard_index,
        num_shards=num_shards,
        seed=seed,
    )
    click.echo(
        f"restored {len(report.restored)}/{report.num_files} files "
        f"({report.num_chunks} chunks) in {report.wall_seconds:.1f}s"
    )
    for stem, error in report.failures:
        click.echo(f"skipped {stem}: {error}", err=True)
    if report.failures:
        sys.exit(2)


@main.command("benchmark")
@click.option("--vocoder", "vocoder_ckpt", type=click.Path(exists=True),
              help="Time this checkpoint; otherwise a fresh model is used.")
@click.option("--variant", type=click.Choice(["vanilla", "mem"]), default="mem", show_default=True)
@click.option("--batch-sizes", default="1,2,4,8", show_default=True)
@click.option("--chunk-seconds", default=4.0, show_default=True)
@click.option("--memory-budget-mb", default=None, type=float)
@click.option("--out", type=click.Path(path_type=Path), help="Write the report as JSON.")
@click.option("--seed", default=0, show_default=True)
def benchmark_cmd(vocoder_ckpt, variant, batch_sizes, chunk_seconds, memory_budget_mb, out, seed):
    """Median RTF and analytic activation memory per batch size."""
    from waverestore.vocoder import VocoderConfig, VocoderVariant, build_vocoder, load_vocoder

    if vocoder_ckpt is not None:
        vocoder = load_vocoder(vocoder_ckpt)
    else:
        chosen = VocoderVariant.VANILLA if variant == "vanilla" else VocoderVariant.MEMORY_EFFICIENT
        vocoder = build_vocoder(VocoderConfig(variant=chosen), seed=seed)
    sizes = tuple(int(s) for s in batch_sizes.split(","))
    report = run_benchmark(
        vocoder, batch_sizes=sizes, chunk_seconds=chunk_seconds,
        memory_budget_mb=memory_budget_mb, seed=seed,
    )
    for entry in report["entries"]:
        if entry["oom"]:
            click.echo(f"batch {entry['batch_size']}: over memory budget")
        else:
            click.echo(
                f"batch {entry['batch_size']}: rtf {entry['rtf']:.4f} "
                f"({entry['peak_bytes_fp32'] / 2**20:.1f} MB fp32 activations)"
            )
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(report, indent=2))
        click.echo(f"report: {out}")


@main.command("eval")
@click.option("--manifest", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--restored-dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--encoder", "encoder_ckpt", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(path_type=Path))
def eval_cmd(manifest, restored_dir, encoder_ckpt, out):
    """Score noisy vs restored audio against clean references."""
    from waverestore.encoder import load_encoder
    from waverestore.metrics import evaluate_set, write_metric_rows

    encoder = load_encoder(encoder_ckpt)
    report = evaluate_set(manifest, restored_dir, encoder.features)
    out.mkdir(parents=True, exist_ok=True)
    write_metric_rows(out / "metrics.csv", report.rows)
    (out / "summary.json").write_text(json.dumps(report.summary, indent=2))
    for key in ("si_snr_margin_mean", "si_snr_margin_ci95", "feat_sc_rel_reduction"):
        click.echo(f"{key}: {report.summary[key]}")
    for utt_id, error in report.failures:
        click.echo(f"failed {utt_id}: {error}", err=True)


if __name__ == "__main__":
    main()
