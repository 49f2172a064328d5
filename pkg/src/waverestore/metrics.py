"""Proxy restoration metrics and paired evaluation over a test manifest.

Reported per file and condition: scale-invariant SNR against the clean
reference, log-spectral distance, and feature-domain spectral convergence
under a caller-supplied feature extractor. Set-level summaries carry 95%
bootstrap confidence intervals.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from waverestore.audio import StftConfig, Waveform, read_wav, stft

SI_SNR_CAP_DB = 60.0
_EPS = 1e-8


def si_snr(reference: Waveform, estimate: Waveform) -> float:
    """Scale-invariant SNR in dB, capped at +60.

    The estimate is projected onto the reference; the ratio of projected
    power to residual power is insensitive to any rescaling of the estimate.
    """
    if len(reference) != len(estimate):
        raise ValueError(f"length mismatch: {len(reference)} vs {len(estimate)}")
    ref = reference.samples.astype(np.float64)
    est = estimate.samples.astype(np.float64)
    ref_energy = float(np.dot(ref, ref))
    if ref_energy == 0.0:
        raise ValueError("reference signal is silent")
    target = (np.dot(est, ref) / ref_energy) * ref
    residual = est - target
    target_power = float(np.dot(target, target))
    residual_power = float(np.dot(residual, residual))
    if residual_power == 0.0 or target_power / residual_power > 10.0 ** (SI_SNR_CAP_DB / 10.0):
        return SI_SNR_CAP_DB
    return 10.0 * np.log10(target_power / residual_power)


def log_spectral_distance(
    reference: Waveform, estimate: Waveform, config: StftConfig = StftConfig()
) -> float:
    """RMS over frames of the per-frame RMS log-magnitude ratio, in dB.

    Magnitudes are floored at a small epsilon, so silent bins cannot blow up
    the ratio. Symmetric in its arguments.
    """
    ref_mag = np.maximum(np.abs(stft(reference, config).bins), _EPS)
    est_mag = np.maximum(np.abs(stft(estimate, config).bins), _EPS)
    ratio_db = 20.0 * np.log10(ref_mag / est_mag)
    per_frame = np.sqrt(np.mean(ratio_db**2, axis=1))
    return float(np.sqrt(np.mean(per_frame**2)))


def spectral_convergence(target: np.ndarray, estimate: np.ndarray) -> float:
    """Frobenius-norm relative error ||target - estimate|| / ||target||."""
    target = np.asarray(target, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    denom = np.linalg.norm(target)
    if denom == 0.0:
        raise ValueError("target is all zeros")
    return float(np.linalg.norm(target - estimate) / denom)


def bootstrap_ci(
    values: np.ndarray, num_resamples: int = 1000, seed: int = 0, alpha: float = 0.05
) -> tuple[float, float]:
    """Percentile bootstrap CI for the mean of ``values``."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot bootstrap an empty sample")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, values.size, size=(num_resamples, values.size))
    means = values[idx].mean(axis=1)
    return float(np.quantile(means, alpha / 2)), float(np.quantile(means, 1 - alpha / 2))


@dataclass(frozen=True)
class MetricRow:
    utt_id: str
    condition: str  # "noisy" or "restored"
    si_snr_db: float
    lsd_db: float
    feat_sc: float

    def __post_init__(self):
        if self.condition not in ("noisy", "restored"):
            raise ValueError(f"unknown condition {self.condition!r}")
        for name in ("si_snr_db", "lsd_db", "feat_sc"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} is not finite for {self.utt_id}")


@dataclass
class EvalReport:
    rows: list[MetricRow]
    summary: dict
    failures: list[tuple[str, str]]  # (utt_id, reason), excluded from summary


def read_eval_manifest(path) -> list[tuple[str, Path, Path]]:
    """Parse ``utt_id<TAB>clean_path<TAB>noisy_path`` lines."""
    path = Path(path)
    items = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'utt_id<TAB>clean<TAB>noisy'")
        utt_id, clean, noisy = parts
        clean_p, noisy_p = Path(clean), Path(noisy)
        if not clean_p.is_absolute():
            clean_p = path.parent / clean_p
        if not noisy_p.is_absolute():
            noisy_p = path.parent / noisy_p
        items.append((utt_id, clean_p, noisy_p))
    return items


def evaluate_set(
    manifest_path,
    restored_dir,
    feature_fn: Callable[[Waveform], np.ndarray],
    bootstrap_resamples: int = 1000,
    bootstrap_seed: int = 0,
) -> EvalReport:
    """Score noisy and restored conditions for every manifest item.

    Restored files are looked up as ``<restored_dir>/<utt_id>.wav``. Items
    with missing or unreadable files are reported in ``failures`` and left out
    of the summary. The summary includes per-condition means with bootstrap
    CIs plus the paired restored-minus-noisy SI-SNR margin.
    """
    restored_dir = Path(restored_dir)
    rows: list[MetricRow] = []
    failures: list[tuple[str, str]] = []
    paired: dict[str, dict[str, MetricRow]] = {}

    for utt_id, clean_path, noisy_path in read_eval_manifest(manifest_path):
        try:
            clean = read_wav(clean_path)
            noisy = read_wav(noisy_path)
            restored = read_wav(restored_dir / f"{utt_id}.wav")
        except (OSError, ValueError) as exc:
            failures.append((utt_id, str(exc)))
            continue
        clean_feats = feature_fn(clean)
        pair = {}
        for condition, wave in (("noisy", noisy), ("restored", restored)):
            if len(wave) != len(clean):
                failures.append((utt_id, f"{condition} length {len(wave)} != clean {len(clean)}"))
                pair = {}
                break
            row = MetricRow(
                utt_id=utt_id,
                condition=condition,
                si_snr_db=si_snr(clean, wave),
                lsd_db=log_spectral_distance(clean, wave),
                feat_sc=spectral_convergence(clean_feats, feature_fn(wave)),
            )
            pair[condition] = row
        if pair:
            rows.extend([pair["noisy"], pair["restored"]])
            paired[utt_id] = pair

    summary: dict = {"num_items": len(paired), "num_failures": len(failures)}
    if paired:
        for condition in ("noisy", "restored"):
            for metric in ("si_snr_db", "lsd_db", "feat_sc"):
                vals = np.array([getattr(p[condition], metric) for p in paired.values()])
                lo, hi = bootstrap_ci(vals, bootstrap_resamples, bootstrap_seed)
                summary[f"{condition}_{metric}_mean"] = float(vals.mean())
                summary[f"{condition}_{metric}_ci95"] = [lo, hi]
        margins = np.array(
            [p["restored"].si_snr_db - p["noisy"].si_snr_db for p in paired.values()]
        )
        lo, hi = bootstrap_ci(margins, bootstrap_resamples, bootstrap_seed)
        summary["si_snr_margin_mean"] = float(margins.mean())
        summary["si_snr_margin_ci95"] = [lo, hi]
        noisy_sc = summary["noisy_feat_sc_mean"]
        restored_sc = summary["restored_feat_sc_mean"]
        summary["feat_sc_rel_reduction"] = float((noisy_sc - restored_sc) / noisy_sc)
    return EvalReport(rows=rows, summary=summary, failures=failures)


def write_metric_rows(path, rows: list[MetricRow]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["utt_id", "condition", "si_snr_db", "lsd_db", "feat_sc"])
        for row in rows:
            writer.writerow([row.utt_id, row.condition, row.si_snr_db, row.lsd_db, row.feat_sc])
