import json

import numpy as np
import pytest
import torch
import yaml
from click.testing import CliRunner

from waverestore.audio import SAMPLE_RATE, read_wav
from waverestore.cli import main as cli_main
from waverestore.pipeline import (
    PipelineConfig,
    load_config,
    load_runtime,
    restore_files,
    run_benchmark,
    run_pipeline,
)
from waverestore.synth import build_clean_corpus, build_noise_bank, build_paired_corpus
from waverestore.vocoder import VocoderConfig, build_vocoder

torch.set_num_threads(1)

ENCODER_MODEL = {
    "num_layers": 2, "model_dim": 64, "num_heads": 2,
    "ffn_expansion": 2, "conv_kernel": 7, "tap_layer": 2,
}
VOCODER_MODEL = {
    "cond_dim": 64, "prenet_dim": 32, "prenet_layers": 1, "prenet_heads": 2,
    "up_dims": [12, 10, 8, 8, 8], "down_dims": [8, 8, 8, 12], "iterations": 2,
}


def _write_config(path, data_dir):
    config = {
        "seed": 0,
        "data": {
            "clean_manifest": str(data_dir / "clean" / "clean.txt"),
            "noise_manifest": str(data_dir / "noise" / "noise_bank.tsv"),
            "pairs_manifest": str(data_dir / "paired" / "pairs.tsv"),
            "eval_manifest": str(data_dir / "paired" / "eval.tsv"),
        },
        "encoder_model": ENCODER_MODEL,
        "vocoder_model": VOCODER_MODEL,
        "cleaner": {"steps": 6, "batch_size": 2, "hidden_dim": 8},
        "vocoder": {"pretrain_steps": 4, "finetune_steps": 3, "batch_size": 2, "crop_frames": 4},
    }
    path.write_text(yaml.safe_dump(config))
    return path


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    clean = build_clean_corpus(root / "clean", count=4, seed=50)
    noise = build_noise_bank(root / "noise", seed=51)
    build_paired_corpus(clean, noise, root / "paired", seed=52)
    return root


@pytest.fixture(scope="module")
def trained_run(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    config_path = _write_config(corpus / "config.yaml", corpus)
    result = run_pipeline(load_config(config_path), out, config_dir=corpus)
    return result


def test_load_config_defaults_and_errors(tmp_path):
    empty = tmp_path / "empty.yaml"
    empty.write_text("")
    config = load_config(empty)
    assert config == PipelineConfig()

    bad = tmp_path / "bad.yaml"
    bad.write_text("cleaner:\n  stepz: 3\n")
    with pytest.raises(ValueError, match="stepz"):
        load_config(bad)
    bad.write_text("unknown_section: {}\n")
    with pytest.raises(ValueError, match="unknown_section"):
        load_config(bad)

    full = tmp_path / "full.yaml"
    full.write_text(yaml.safe_dump({"vocoder_model": VOCODER_MODEL}))
    config = load_config(full)
    assert config.vocoder_model.up_dims == (12, 10, 8, 8, 8)
    assert yaml.safe_load(yaml.safe_dump(config.resolved_dict()))["vocoder_model"]["iterations"] == 2


def test_pipeline_trains_all_stages(trained_run):
    result = trained_run
    assert result.resumed == []
    for ckpt in (
        result.encoder_checkpoint,
        result.cleaner_checkpoint,
        result.vocoder_pretrain_checkpoint,
        result.vocoder_checkpoint,
    ):
        assert ckpt.exists() and ckpt.with_name(ckpt.name + ".json").exists()
    assert (result.out_dir / "resolved_config.yaml").exists()
    assert (result.out_dir / "training_curves.png").exists()
    summary = json.loads((result.out_dir / "pipeline_summary.json").read_text())
    assert set(summary["stage_seconds"]) == {"encoder", "cleaner", "vocoder_pretrain", "vocoder_finetune"}


def test_pipeline_resumes_from_checkpoints(corpus, trained_run):
    config_path = corpus / "config.yaml"
    again = run_pipeline(load_config(config_path), trained_run.out_dir, config_dir=corpus)
    assert sorted(again.resumed) == ["cleaner", "encoder", "vocoder_finetune", "vocoder_pretrain"]


@pytest.fixture(scope="module")
def runtime(trained_run):
    return load_runtime(
        trained_run.encoder_checkpoint,
        trained_run.cleaner_checkpoint,
        trained_run.vocoder_checkpoint,
    )


def test_restore_outputs_exact_durations(runtime, corpus, tmp_path):
    cleaner, vocoder = runtime
    inputs = [corpus / "paired" / "noisy" / f"utt_{i:05d}.wav" for i in range(3)]
    report = restore_files(
        cleaner, vocoder, inputs, tmp_path, chunk_seconds=1.0, overlap_seconds=0.2, batch_size=2
    )
    assert not report.failures
    assert len(report.restored) == 3
    for path in inputs:
        restored = read_wav(report.restored[path.stem])
        assert len(restored) == len(read_wav(path))
    assert report.num_chunks > 3  # every 3 s file splits into multiple chunks


def test_restore_is_batch_invariant(runtime, corpus, tmp_path):
    cleaner, vocoder = runtime
    inputs = [corpus / "paired" / "noisy" / f"utt_{i:05d}.wav" for i in range(3)]
    a = restore_files(cleaner, vocoder, inputs, tmp_path / "b1",
                      chunk_seconds=1.0, overlap_seconds=0.2, batch_size=1)
    b = restore_files(cleaner, vocoder, inputs, tmp_path / "b3",
                      chunk_seconds=1.0, overlap_seconds=0.2, batch_size=3)
    for stem in a.restored:
        x = read_wav(a.restored[stem]).samples
        y = read_wav(b.restored[stem]).samples
        assert np.max(np.abs(x - y)) < 1e-5


def test_restore_shards_partition_inputs(runtime, corpus, tmp_path):
    cleaner, vocoder = runtime
    inputs = [corpus / "paired" / "noisy" / f"utt_{i:05d}.wav" for i in range(4)]
    stems = []
    for shard in range(3):
        report = restore_files(
            cleaner, vocoder, inputs, tmp_path / f"s{shard}", chunk_seconds=1.0,
            overlap_seconds=0.2, shard_index=shard, num_shards=3,
        )
        stems.extend(report.restored)
    assert sorted(stems) == [f"utt_{i:05d}" for i in range(4)]
    with pytest.raises(ValueError, match="shard_index"):
        restore_files(cleaner, vocoder, inputs, tmp_path, shard_index=3, num_shards=3)


def test_restore_skips_unreadable_files(runtime, corpus, tmp_path):
    cleaner, vocoder = runtime
    bad = tmp_path / "broken.wav"
    bad.write_bytes(b"not a wav file")
    inputs = [corpus / "paired" / "noisy" / "utt_00000.wav", bad]
    report = restore_files(cleaner, vocoder, inputs, tmp_path / "out",
                           chunk_seconds=1.0, overlap_seconds=0.2)
    assert len(report.restored) == 1
    assert [stem for stem, _ in report.failures] == ["broken"]
    failures = json.loads((tmp_path / "out" / "failures.json").read_text())
    assert failures[0]["utt_id"] == "broken"


def test_restore_rejects_unaligned_chunking(runtime, corpus, tmp_path):
    cleaner, vocoder = runtime
    with pytest.raises(ValueError, match="40 ms"):
        restore_files(cleaner, vocoder, [], tmp_path, chunk_seconds=1.01, overlap_seconds=0.2)


def test_benchmark_reports_rtf_and_memory():
    config = VocoderConfig(
        cond_dim=8, prenet_dim=8, prenet_layers=1, prenet_heads=2,
        up_dims=(8, 8, 8, 8, 8), down_dims=(8, 8, 8, 8), iterations=1,
    )
    vocoder = build_vocoder(config, seed=0)
    report = run_benchmark(vocoder, batch_sizes=(1, 2), chunk_seconds=0.2, reps=2)
    assert report["variant"] == "vanilla"
    assert "reference" in report
    assert [e["batch_size"] for e in report["entries"]] == [1, 2]
    for entry in report["entries"]:
        assert not entry["oom"]
        assert entry["rtf"] > 0
        assert entry["peak_bytes_fp16"] == 2 * entry["peak_elements"]

    tight = run_benchmark(vocoder, batch_sizes=(1,), chunk_seconds=0.2, reps=1,
                          memory_budget_mb=0.001)
    assert tight["entries"][0]["oom"] and "rtf" not in tight["entries"][0]


def test_load_runtime_checks_dims(trained_run, tmp_path):
    from waverestore.checkpoint import save_checkpoint
    from waverestore.vocoder import Vocoder

    wrong = Vocoder(VocoderConfig(cond_dim=32, prenet_dim=16, prenet_layers=1, prenet_heads=2,
                                  up_dims=(8, 8, 8, 8, 8), down_dims=(8, 8, 8, 8)))
    ckpt = tmp_path / "wrong.pt"
    save_checkpoint(ckpt, wrong, kind="vocoder", config=wrong.config, seed=0)
    with pytest.raises(ValueError, match="features"):
        load_runtime(trained_run.encoder_checkpoint, trained_run.cleaner_checkpoint, ckpt)


def test_cli_full_cycle(tmp_path):
    runner = CliRunner()
    data = tmp_path / "data"
    result = runner.invoke(cli_main, ["synth-data", "--out", str(data), "--count", "3", "--seed", "7"])
    assert result.exit_code == 0, result.output
    assert (data / "paired" / "pairs.tsv").exists()

    config_path = _write_config(tmp_path / "config.yaml", data)
    run_dir = tmp_path / "run"
    result = runner.invoke(cli_main, ["run-pipeline", "--config", str(config_path), "--out", str(run_dir)])
    assert result.exit_code == 0, result.output
    assert (run_dir / "vocoder" / "vocoder_finetune.pt").exists()

    inputs = tmp_path / "inputs.txt"
    noisy = sorted((data / "paired" / "noisy").glob("*.wav"))
    inputs.write_text("\n".join(str(p) for p in noisy) + "\n")
    restored = tmp_path / "restored"
    result = runner.invoke(cli_main, [
        "restore", "--run", str(run_dir), "--inputs", str(inputs), "--out", str(restored),
        "--chunk-seconds", "1.0", "--overlap-seconds", "0.2", "--batch", "2",
    ])
    assert result.exit_code == 0, result.output
    assert len(list(restored.glob("*.wav"))) == 3

    eval_out = tmp_path / "eval"
    result = runner.invoke(cli_main, [
        "eval", "--manifest", str(data / "paired" / "eval.tsv"),
        "--restored-dir", str(restored),
        "--encoder", str(run_dir / "encoder" / "encoder.pt"),
        "--out", str(eval_out),
    ])
    assert result.exit_code == 0, result.output
    summary = json.loads((eval_out / "summary.json").read_text())
    assert "si_snr_margin_mean" in summary
    assert (eval_out / "metrics.csv").exists()

    report_path = tmp_path / "bench.json"
    result = runner.invoke(cli_main, [
        "benchmark", "--vocoder", str(run_dir / "vocoder" / "vocoder_finetune.pt"),
        "--batch-sizes", "1,2", "--chunk-seconds", "0.2", "--out", str(report_path),
    ])
    assert result.exit_code == 0, result.output
    assert json.loads(report_path.read_text())["entries"][0]["rtf"] > 0


def test_cli_restore_partial_failure_exit_code(tmp_path, corpus, trained_run):
    runner = CliRunner()
    bad = tmp_path / "broken.wav"
    bad.write_bytes(b"junk")
    inputs = tmp_path / "inputs.txt"
    inputs.write_text(f"{corpus / 'paired' / 'noisy' / 'utt_00000.wav'}\n{bad}\n")
    result = runner.invoke(cli_main, [
        "restore", "--run", str(trained_run.out_dir), "--inputs", str(inputs),
        "--out", str(tmp_path / "out"), "--chunk-seconds", "1.0", "--overlap-seconds", "0.2",
    ])
    assert result.exit_code == 2
    assert "skipped broken" in result.output
