import math

import numpy as np
import pytest
import scipy.signal

from waverestore.audio import SAMPLE_RATE, Waveform, power, write_wav
from waverestore.degrade import (
    SINC_HALF_WIDTH,
    SPEED_OF_SOUND,
    CodecKind,
    DegradationRecipe,
    NoiseBank,
    RoomSpec,
    apply_codec,
    apply_reverb,
    degrade,
    generate_rir,
    image_arrivals,
    mix_at_snr,
    sample_recipe,
)


def mirror_oracle(room: RoomSpec):
    """Brute-force image enumeration: breadth-first reflection of the source
    across all six wall planes, deduplicated by position. Returns arrivals as
    (delay_seconds, amplitude) sorted by (delay, amplitude)."""
    dims = np.asarray(room.dims)
    mic = np.asarray(room.mic)
    refl = math.sqrt(1.0 - room.absorption)

    def reflect(pos, wall):
        axis, side = wall
        out = list(pos)
        out[axis] = -pos[axis] if side == 0 else 2 * dims[axis] - pos[axis]
        return tuple(out)

    walls = [(axis, side) for axis in range(3) for side in (0, 1)]
    seen = {tuple(np.round(room.source, 9)): 0}
    frontier = [tuple(room.source)]
    for depth in range(1, room.max_order + 1):
        nxt = []
        for pos in frontier:
            for wall in walls:
                img = reflect(pos, wall)
                key = tuple(np.round(img, 9))
                if key not in seen:
                    seen[key] = depth
                    nxt.append(img)
        frontier = nxt

    arrivals = []
    for key, depth in seen.items():
        d = float(np.linalg.norm(np.asarray(key) - mic))
        amp = refl**depth / (4 * math.pi * d)
        if amp > 0:
            arrivals.append((d / SPEED_OF_SOUND, amp))
    return sorted(arrivals)


def test_image_arrivals_match_mirror_oracle():
    rng = np.random.default_rng(42)
    for _ in range(8):
        dims = rng.uniform(3, 10, size=3)
        src = rng.uniform(0.5, dims - 0.5)
        mic = rng.uniform(0.5, dims - 0.5)
        room = RoomSpec(
            dims=tuple(dims),
            source=tuple(src),
            mic=tuple(mic),
            absorption=float(rng.uniform(0.1, 0.6)),
            max_order=int(rng.integers(1, 3)),
        )
        expected = mirror_oracle(room)
        delays, amps = image_arrivals(room)
        got = sorted(zip(delays.tolist(), amps.tolist()))
        assert len(got) == len(expected)
        for (d_got, a_got), (d_exp, a_exp) in zip(got, expected):
            assert abs(d_got - d_exp) < 1e-9
            assert abs(a_got - a_exp) / a_exp < 1e-6


def test_first_order_box_has_seven_arrivals():
    room = RoomSpec(dims=(5, 4, 3), source=(1, 1, 1), mic=(3.5, 2.5, 1.5), absorption=0.5, max_order=1)
    delays, amps = image_arrivals(room)
    assert len(delays) == 7  # direct + one reflection per wall
    assert np.all(np.diff(delays) >= 0)


def test_full_absorption_leaves_direct_path_only():
    room = RoomSpec(dims=(5, 4, 3), source=(1, 1, 1), mic=(3.5, 2.5, 1.5), absorption=1.0, max_order=4)
    delays, amps = image_arrivals(room)
    d = np.linalg.norm(np.array(room.source) - np.array(room.mic))
    assert len(delays) == 1
    assert abs(delays[0] - d / SPEED_OF_SOUND) < 1e-12
    assert abs(amps[0] - 1 / (4 * np.pi * d)) / amps[0] < 1e-12


def test_rir_peak_at_rounded_direct_delay():
    room = RoomSpec(dims=(6, 5, 4), source=(1, 2, 1.5), mic=(4, 3, 2), absorption=1.0, max_order=0)
    rir = generate_rir(room)
    d = np.linalg.norm(np.array(room.source) - np.array(room.mic))
    expected_idx = SINC_HALF_WIDTH + int(round(d / SPEED_OF_SOUND * SAMPLE_RATE))
    assert int(np.argmax(np.abs(rir))) == expected_idx


def test_max_order_guard():
    with pytest.raises(ValueError):
        RoomSpec(dims=(5, 4, 3), source=(1, 1, 1), mic=(2, 2, 2), absorption=0.3, max_order=11)


def test_room_position_validation():
    with pytest.raises(ValueError):
        RoomSpec(dims=(5, 4, 3), source=(6, 1, 1), mic=(2, 2, 2), absorption=0.3)
    with pytest.raises(ValueError):
        RoomSpec(dims=(5, 4, 3), source=(1, 1, 1), mic=(1, 1, 1), absorption=0.3)
    with pytest.raises(ValueError):
        RoomSpec(dims=(5, 4, 3), source=(1, 1, 1), mic=(2, 2, 2), absorption=0.0)


def measure_t60(rir: np.ndarray, fit_range_db=(-1.0, -5.0)) -> float:
    """Early-decay T60: straight-line fit to the Schroeder curve between the
    fit-range crossings, extrapolated to -60 dB. The early region is used
    because a finite reflection order truncates the late tail."""
    energy = rir**2
    edc = np.cumsum(energy[::-1])[::-1]
    db = 10 * np.log10(edc / edc[0] + 1e-30)
    lo = int(np.argmax(db <= fit_range_db[0]))
    hi = int(np.argmax(db <= fit_range_db[1]))
    t = np.arange(lo, hi) / SAMPLE_RATE
    slope = np.polyfit(t, db[lo:hi], 1)[0]
    return -60.0 / slope


def test_sabine_t60_sanity():
    room = RoomSpec(dims=(6, 5, 4), source=(1.5, 2.2, 1.7), mic=(4.1, 3.3, 2.1), absorption=0.3, max_order=6)
    volume = 6 * 5 * 4
    surface = 2 * (6 * 5 + 6 * 4 + 5 * 4)
    sabine = 0.161 * volume / (surface * room.absorption)
    measured = measure_t60(generate_rir(room))
    assert abs(measured - sabine) / sabine < 0.30


def test_mix_gain_known_value():
    # P_speech = 1, P_noise = 4, SNR 10 dB -> gain sqrt(1 / 40).
    speech = Waveform(np.full(1000, 1.0, dtype=np.float32))
    noise = Waveform(np.full(1000, 2.0, dtype=np.float32))
    result = mix_at_snr(speech, noise, 10.0, peak_limit=None)
    assert abs(result.noise_gain - np.sqrt(1.0 / 40.0)) < 1e-12


def test_mix_snr_exact_over_random_draws():
    rng = np.random.default_rng(123)
    for _ in range(100):
        n = int(rng.integers(2000, 8000))
        speech = Waveform((rng.standard_normal(n) * rng.uniform(0.05, 0.3)).astype(np.float32))
        noise = Waveform((rng.standard_normal(n) * rng.uniform(0.05, 0.5)).astype(np.float32))
        snr = float(rng.uniform(-10, 40))
        result = mix_at_snr(speech, noise, snr)
        measured = 10 * np.log10(power(speech) / (result.noise_gain**2 * power(noise)))
        assert abs(measured - snr) < 1e-4


def test_mix_peak_normalization_preserves_snr():
    rng = np.random.default_rng(4)
    speech = Waveform((rng.standard_normal(4000) * 0.9).astype(np.float32))
    noise = Waveform((rng.standard_normal(4000) * 0.9).astype(np.float32))
    result = mix_at_snr(speech, noise, 0.0, peak_limit=0.99)
    assert result.peak_gain < 1.0
    assert np.max(np.abs(result.noisy.samples)) <= 0.99 + 1e-6


def test_mix_rejects_silent_inputs():
    silent = Waveform(np.zeros(100, dtype=np.float32))
    loud = Waveform(np.ones(100, dtype=np.float32))
    with pytest.raises(ValueError):
        mix_at_snr(silent, loud, 10.0)
    with pytest.raises(ValueError):
        mix_at_snr(loud, silent, 10.0)
    with pytest.raises(ValueError):
        mix_at_snr(loud, Waveform(np.ones(50, dtype=np.float32)), 10.0)


def mulaw_scalar_oracle(x: float) -> float:
    """Independent scalar companding law: 8-bit mu-law encode/decode."""
    mu = 255.0
    x = max(-1.0, min(1.0, x))
    y = math.copysign(math.log1p(mu * abs(x)) / math.log1p(mu), x)
    q = round((y + 1.0) / 2.0 * 255.0)
    y_hat = q / 255.0 * 2.0 - 1.0
    return math.copysign(((1.0 + mu) ** abs(y_hat) - 1.0) / mu, y_hat)


def test_mulaw_matches_scalar_oracle():
    rng = np.random.default_rng(17)
    values = np.concatenate([rng.uniform(-1, 1, 500), [-1.0, 0.0, 1.0, 1e-5, -1e-5]])
    wave = Waveform(values.astype(np.float32))
    out = apply_codec(wave, CodecKind.MULAW8)
    expected = np.array([mulaw_scalar_oracle(float(v)) for v in wave.samples])
    assert np.max(np.abs(out.samples - expected)) < 1e-6


def test_mulaw_round_trip_error_bounded():
    rng = np.random.default_rng(18)
    x = rng.uniform(-1, 1, 4000).astype(np.float32)
    out = apply_codec(Waveform(x), CodecKind.MULAW8)
    # Worst case sits in the top segment: decode slope (1+mu) ln(1+mu) / mu
    # times the half quantization step 1/255 in the companded domain.
    mu = 255.0
    bound = (1 + mu) * math.log1p(mu) / mu / 255.0
    assert np.max(np.abs(out.samples - x)) < bound + 1e-6


def test_resample_codec_passband_and_stopband():
    t = np.arange(SAMPLE_RATE) / SAMPLE_RATE
    tone_1k = Waveform((0.5 * np.sin(2 * np.pi * 1000 * t)).astype(np.float32))
    tone_5k = Waveform((0.5 * np.sin(2 * np.pi * 5000 * t)).astype(np.float32))
    out_1k = apply_codec(tone_1k, CodecKind.RESAMPLE_LOWPASS)
    out_5k = apply_codec(tone_5k, CodecKind.RESAMPLE_LOWPASS)
    interior = slice(1000, -1000)
    gain_1k = 10 * np.log10(power(out_1k.samples[interior]) / power(tone_1k.samples[interior]))
    gain_5k = 10 * np.log10(power(out_5k.samples[interior]) / power(tone_5k.samples[interior]))
    assert abs(gain_1k) < 1.0
    assert gain_5k < -40.0
    assert len(out_1k) == len(tone_1k)


def _speechlike(duration_s: float, seed: int) -> Waveform:
    rng = np.random.default_rng(seed)
    t = np.arange(int(duration_s * SAMPLE_RATE)) / SAMPLE_RATE
    x = np.zeros_like(t)
    for h in range(1, 12):
        x += np.sin(2 * np.pi * 125 * h * t + rng.uniform(0, 2 * np.pi)) / h
    envelope = 0.2 + 0.8 * (0.5 - 0.5 * np.cos(2 * np.pi * 3 * t))
    x = x * envelope
    return Waveform((0.4 * x / np.max(np.abs(x))).astype(np.float32))


@pytest.fixture
def noise_bank(tmp_path):
    rng = np.random.default_rng(99)
    lines = []
    for i in range(3):
        noise = Waveform((rng.standard_normal(2 * SAMPLE_RATE) * 0.2).astype(np.float32))
        path = tmp_path / f"noise{i}.wav"
        write_wav(path, noise)
        lines.append(f"{path.name}\t{noise.duration_seconds}")
    manifest = tmp_path / "noise.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return NoiseBank.from_manifest(manifest)


def test_noise_bank_manifest_errors(tmp_path):
    bad = tmp_path / "bad.tsv"
    bad.write_text("only_one_column\n")
    with pytest.raises(ValueError, match=":1"):
        NoiseBank.from_manifest(bad)
    bad.write_text("x.wav\tnot_a_number\n")
    with pytest.raises(ValueError, match=":1"):
        NoiseBank.from_manifest(bad)
    bad.write_text("missing.wav\t1.0\n")
    with pytest.raises(FileNotFoundError):
        NoiseBank.from_manifest(bad)


def test_sample_recipe_ranges_and_patterns(noise_bank):
    rng = np.random.default_rng(7)
    patterns = set()
    for _ in range(100):
        recipe = sample_recipe(rng, noise_bank)
        patterns.add((recipe.room is not None, recipe.codec is not None))
        assert 5.0 <= recipe.snr_db <= 30.0
        assert recipe.noise_id in noise_bank.ids
        if recipe.room is not None:
            dims = np.asarray(recipe.room.dims)
            assert np.all((dims >= 3.0) & (dims <= 10.0))
            assert 0.1 <= recipe.room.absorption <= 0.6
            for pos in (recipe.room.source, recipe.room.mic):
                pos = np.asarray(pos)
                assert np.all(pos >= 0.5 - 1e-9) and np.all(pos <= dims - 0.5 + 1e-9)
    assert patterns == {(False, False), (False, True), (True, False), (True, True)}


def test_sample_recipe_deterministic(noise_bank):
    r1 = sample_recipe(np.random.default_rng(55), noise_bank)
    r2 = sample_recipe(np.random.default_rng(55), noise_bank)
    assert r1 == r2


def test_recipe_json_round_trip(noise_bank):
    recipe = sample_recipe(np.random.default_rng(13), noise_bank)
    assert DegradationRecipe.from_json(recipe.to_json()) == recipe


def test_degrade_deterministic(noise_bank):
    clean = _speechlike(1.5, seed=1)
    recipe = sample_recipe(np.random.default_rng(21), noise_bank)
    n1, t1 = degrade(clean, recipe, noise_bank)
    n2, t2 = degrade(clean, recipe, noise_bank)
    assert np.array_equal(n1.samples, n2.samples)
    assert np.array_equal(t1.samples, t2.samples)
    assert len(n1) == len(clean) and len(t1) == len(clean)


def test_degrade_without_reverb_is_exact_mix(noise_bank):
    clean = _speechlike(1.0, seed=2)
    recipe = DegradationRecipe(snr_db=12.0, noise_id=noise_bank.ids[0], seed=77)
    noisy, target = degrade(clean, recipe, noise_bank)
    rng = np.random.default_rng(recipe.seed)
    noise = noise_bank.matched_noise(recipe.noise_id, len(clean), rng)
    expected = mix_at_snr(clean, noise, recipe.snr_db)
    assert np.array_equal(noisy.samples, expected.noisy.samples)
    assert np.allclose(target.samples, clean.samples * expected.peak_gain)


def test_degrade_reverb_aligned_to_target(noise_bank):
    clean = _speechlike(1.5, seed=3)
    room = RoomSpec(dims=(6, 5, 4), source=(1.5, 2.0, 1.5), mic=(4.0, 3.0, 2.0), absorption=0.4, max_order=4)
    recipe = DegradationRecipe(snr_db=30.0, noise_id=noise_bank.ids[0], room=room, seed=5)
    noisy, target = degrade(clean, recipe, noise_bank)
    corr = scipy.signal.correlate(noisy.samples.astype(np.float64), target.samples.astype(np.float64), mode="full")
    max_lag = 200
    center = len(target) - 1
    window = corr[center - max_lag : center + max_lag + 1]
    assert abs(int(np.argmax(window)) - max_lag) <= 1


def test_reverb_direct_path_unit_gain():
    clean = _speechlike(1.0, seed=4)
    # Source/mic distance chosen so the direct delay is a whole number of
    # samples (100 / 16000 s); the fractional-delay kernel is then an exact
    # delta and full absorption must reproduce the input.
    d = SPEED_OF_SOUND * 100 / SAMPLE_RATE
    room = RoomSpec(dims=(8, 6, 4), source=(2, 2, 2), mic=(2 + d, 2, 2), absorption=1.0, max_order=4)
    wet = apply_reverb(clean, room)
    assert np.max(np.abs(wet.samples - clean.samples)) < 1e-6
