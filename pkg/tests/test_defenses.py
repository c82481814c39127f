import numpy as np
import pytest

from mdnf.asr import forward, greedy_decode, predict_probs, transcribe
from mdnf.audio import AudioBuffer
from mdnf.defenses import (DefenseConfig, PerturbationPair, RS_SIGMA_FLOOR, ShapingCurve, apply_defense,
                           estimate_shaping_curve, flood_noise, mdnf_defense, mel_resynth_defense, rs_noisy_copy,
                           rs_sigma, smoothed_probs)
from mdnf.dsp import DspConfig, MelSpectrogram, mel_spectrogram
from mdnf.harness import wer


def _mel(dsp, frames=4, value=-3.0):
    return MelSpectrogram(np.full((frames, dsp.n_mels), value), dsp)


# ---------------------------------------------------------------- shaping curve

def test_curve_normalisation():
    c = ShapingCurve.from_raw([1.0, 3.0, 0.0, 4.0])
    assert abs(c.weights.mean() - 1) < 1e-9 and c.weights.tolist() == [0.5, 1.5, 0.0, 2.0]
    with pytest.raises(ValueError):
        ShapingCurve.from_raw(np.zeros(4))
    with pytest.raises(ValueError):
        ShapingCurve(np.array([1.0, -1.0, 2.0]))
    with pytest.raises(ValueError):
        ShapingCurve(np.array([1.0, np.inf]))


def test_curve_csv_roundtrip(tmp_path):
    c = ShapingCurve.from_raw(np.random.default_rng(0).uniform(0, 1, 64))
    c.save_csv(tmp_path / "c.csv")
    assert np.array_equal(ShapingCurve.load_csv(tmp_path / "c.csv").weights, c.weights)


# ---------------------------------------------------------------- flood noise

def test_flood_sigma_zero(dsp):
    mel = mel_spectrogram(np.random.default_rng(1).uniform(-0.3, 0.3, 4000), dsp)
    assert np.array_equal(flood_noise(mel, 0.0, seed=5).values, mel.values)
    with pytest.raises(ValueError):
        flood_noise(mel, -0.1)


@pytest.mark.parametrize("shaped", [False, True])
def test_flood_statistics(dsp, shaped):
    n = 20000
    curve = ShapingCurve.from_raw(np.linspace(3, 0.2, dsp.n_mels)) if shaped else None
    c = curve.weights if shaped else np.ones(dsp.n_mels)
    sigma = 0.5
    mel = _mel(dsp, n)
    noise = flood_noise(mel, sigma, curve, seed=3).values - mel.values
    var = noise.var(axis=0)
    assert np.max(np.abs(var / (sigma ** 2 * c) - 1)) < 0.05
    assert np.all(np.abs(noise.mean(axis=0)) <= 3 * sigma * np.sqrt(c / n))


def test_flood_degenerate_curve():
    dsp = DspConfig(n_mels=2)
    curve = ShapingCurve.from_raw([2.0, 0.0])
    assert curve.weights.tolist() == [2.0, 0.0]
    mel = MelSpectrogram(np.full((20000, 2), -3.0), dsp)
    noise = flood_noise(mel, 0.5, curve, seed=2).values - mel.values
    assert abs(noise[:, 0].var() / (2 * 0.25) - 1) < 0.05
    assert np.all(noise[:, 1] == 0)


def test_flood_checks(dsp):
    mel = _mel(dsp)
    with pytest.raises(ValueError):
        flood_noise(mel, 0.5, ShapingCurve.from_raw(np.ones(10)))
    with pytest.raises(ValueError):
        flood_noise(mel, 0.5, domain="phase")
    a = flood_noise(mel, 0.5, seed=3)
    assert np.array_equal(a.values, flood_noise(mel, 0.5, seed=3).values)
    assert not np.array_equal(a.values, flood_noise(mel, 0.5, seed=4).values)


def test_flood_respects_floor(dsp):
    mel = MelSpectrogram(np.full((50, dsp.n_mels), np.log(dsp.log_floor)), dsp)
    for domain in ("log", "linear"):
        out = flood_noise(mel, 2.0, seed=0, domain=domain).values
        assert np.all(out >= np.log(dsp.log_floor)) and np.all(np.isfinite(out))


# ---------------------------------------------------------------- re-synthesis defenses

def test_mdnf_sigma_zero_is_resynth(dsp, small_corpus):
    x = small_corpus[0].audio
    a = mdnf_defense(x, dsp, DefenseConfig("mdnf", mdnf_sigma=0.0))
    b = mel_resynth_defense(x, dsp)
    assert np.array_equal(a.samples, b.samples)
    assert len(a) == len(x) and np.all(np.abs(b.samples) <= 1)


def test_mdnf_deterministic(dsp, small_corpus):
    x = small_corpus[1].audio
    cfg = DefenseConfig("mdnf", mdnf_sigma=0.5)
    a = mdnf_defense(x, dsp, cfg, seed=9)
    assert np.array_equal(a.samples, mdnf_defense(x, dsp, cfg, seed=9).samples)
    assert not np.array_equal(a.samples, mdnf_defense(x, dsp, cfg, seed=10).samples)


def test_defense_config_validation():
    for kw in (dict(kind="vocoder"), dict(rs_passes=0), dict(mdnf_sigma=-1.0), dict(noise_domain="db")):
        with pytest.raises(ValueError):
            DefenseConfig(**kw)
    assert DefenseConfig("mdnf").label == "mdnf-unshaped"
    assert DefenseConfig("mdnf", curve=ShapingCurve.from_raw(np.ones(64))).label == "mdnf"


# ---------------------------------------------------------------- randomized smoothing

def test_rs_sigma():
    x = np.full(100, 0.1)
    assert rs_sigma(x, 20.0) == pytest.approx(0.01)
    assert rs_sigma(np.zeros(100), 15.0) == RS_SIGMA_FLOOR
    noisy = rs_noisy_copy(np.zeros(1000), DefenseConfig("randomized_smoothing"), 0)
    assert np.std(noisy) == pytest.approx(RS_SIGMA_FLOOR, rel=0.1)


def test_rs_deterministic_and_single_pass(dsp, random_model, small_corpus):
    x = small_corpus[2].audio.samples
    cfg = DefenseConfig("randomized_smoothing", rs_passes=5)
    assert np.array_equal(smoothed_probs(random_model, x, cfg, dsp, 4), smoothed_probs(random_model, x, cfg, dsp, 4))
    one = DefenseConfig("randomized_smoothing", rs_passes=1)
    copy = rs_noisy_copy(x, one, np.random.default_rng(4))
    assert np.array_equal(smoothed_probs(random_model, x, one, dsp, 4), predict_probs(random_model, copy, dsp))
    assert apply_defense(x, one, random_model, dsp, seed=4) == greedy_decode(predict_probs(random_model, copy, dsp))


def test_rs_variance_scaling(dsp, random_model, small_corpus):
    x = small_corpus[3].audio.samples[:8000]
    var = {}
    for passes in (1, 5, 25):
        cfg = DefenseConfig("randomized_smoothing", rs_passes=passes)
        draws = np.stack([smoothed_probs(random_model, x, cfg, dsp, s) for s in range(40)])
        var[passes] = draws.var(axis=0).mean()
    for passes in (5, 25):
        ratio = var[1] / var[passes] / passes
        assert 0.5 <= ratio <= 2.0, (passes, ratio)


# ---------------------------------------------------------------- curve estimation

def test_estimator_zero_pairs(small_corpus):
    dsp = DspConfig()
    u = small_corpus[0].audio
    with pytest.raises(ValueError):
        estimate_shaping_curve([PerturbationPair(u, u)], dsp)
    with pytest.raises(ValueError):
        estimate_shaping_curve([], dsp)


def test_estimator_one_hot(dsp, monkeypatch):
    import mdnf.defenses as d

    benign = AudioBuffer(np.zeros(4000))
    adv = AudioBuffer(np.full(4000, 0.1))

    def fake_mel(audio, cfg):
        vals = np.zeros((dsp.n_frames(4000), cfg.n_mels))
        if audio is adv:
            vals[:, 3] = -0.7
        return MelSpectrogram(vals, cfg)

    monkeypatch.setattr(d, "mel_spectrogram", fake_mel)
    curve = estimate_shaping_curve([PerturbationPair(benign, adv)], dsp)
    expect = np.zeros(dsp.n_mels)
    expect[3] = dsp.n_mels
    assert np.allclose(curve.weights, expect, rtol=1e-12)


def test_estimator_deterministic(dsp, small_corpus):
    rng = np.random.default_rng(0)
    pairs = [PerturbationPair(u.audio, AudioBuffer(np.clip(u.audio.samples + rng.normal(0, 0.01, len(u.audio)), -1, 1)))
             for u in small_corpus[:4]]
    assert np.array_equal(estimate_shaping_curve(pairs, dsp).weights, estimate_shaping_curve(pairs, dsp).weights)
    with pytest.raises(ValueError):
        PerturbationPair(small_corpus[0].audio, small_corpus[1].audio)


# ---------------------------------------------------------------- dispatch

def test_apply_defense_equivalences(dsp, random_model, small_corpus):
    x = small_corpus[4].audio
    assert apply_defense(x, DefenseConfig("none"), random_model, dsp) == transcribe(random_model, x, dsp)
    resynth = apply_defense(x, DefenseConfig("mel_resynth"), random_model, dsp)
    assert apply_defense(x, DefenseConfig("mdnf", mdnf_sigma=0.0), random_model, dsp) == resynth
    cfg = DefenseConfig("mdnf", mdnf_sigma=0.6)
    assert apply_defense(x, cfg, random_model, dsp, seed=1) == apply_defense(x, cfg, random_model, dsp, seed=1)
    y = mdnf_defense(x, dsp, cfg, seed=1).samples
    assert apply_defense(x, cfg, random_model, dsp, seed=1) == greedy_decode(forward(random_model,
                                                                                     mel_spectrogram(y, dsp)))


# ---------------------------------------------------------------- trained model (slow)

@pytest.mark.slow
def test_none_defense_recovers_transcript(trained):
    u = next(u for u in trained.splits["test"] if transcribe(trained.clean, u.audio, trained.dsp) == u.transcript)
    assert apply_defense(u.audio, DefenseConfig("none"), trained.clean, trained.dsp) == u.transcript


@pytest.mark.slow
def test_mdnf_benign_cost_at_half_sigma(trained):
    test = trained.splits["test"][:100]
    cfg = DefenseConfig("mdnf", mdnf_sigma=0.5, curve=trained.curve)
    base = np.mean([wer(u.transcript, transcribe(trained.clean, u.audio, trained.dsp)) for u in test])
    defended = np.mean([wer(u.transcript, apply_defense(u.audio, cfg, trained.defended, trained.dsp, seed=3 + i))
                        for i, u in enumerate(test)])
    print(f"benign WER {base:.2f} -> {defended:.2f}")
    assert defended - base <= 10.0


@pytest.mark.slow
def test_resynth_near_idempotent(trained):
    test = trained.splits["test"][:100]
    changed = 0
    for u in test:
        once = mel_resynth_defense(u.audio, trained.dsp)
        twice = mel_resynth_defense(once, trained.dsp)
        changed += transcribe(trained.defended, once, trained.dsp) != transcribe(trained.defended, twice, trained.dsp)
    assert changed <= 10
