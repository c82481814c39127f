"""Randomized smoothing, mel re-synthesis and mel-domain noise flooding."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from mdnf.asr import ModelParams, TokenAlphabet, forward, greedy_decode, log_softmax, predict_probs
from mdnf.attacks import DefenseTransform
from mdnf.audio import AudioBuffer
from mdnf.dsp import DspConfig, MelSpectrogram, fit_length, mel_spectrogram, mel_to_audio

KINDS = ("none", "randomized_smoothing", "mel_resynth", "mdnf")
RS_SIGMA_FLOOR = 1e-4

# Frozen after tuning on the dev split with harness.tune_sigma (see README, "Calibration").
DEFAULT_MDNF_SIGMA = 0.5


@dataclass(frozen=True)
class ShapingCurve:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("shaping curve must be a non-empty vector")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("shaping weights must be finite and non-negative")
        if abs(w.mean() - 1.0) > 1e-9:
            raise ValueError(f"shaping weights must average 1, got {w.mean():.12g}")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_raw(cls, raw) -> "ShapingCurve":
        raw = np.asarray(raw, dtype=np.float64)
        total = raw.mean() if raw.size else 0.0
        if not total > 0:
            raise ValueError("cannot normalise an all-zero shaping curve")
        return cls(raw / total)

    def __len__(self):
        return self.weights.size

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_index", "weight"])
            for i, w in enumerate(self.weights):
                writer.writerow([i, repr(float(w))])

    @classmethod
    def load_csv(cls, path) -> "ShapingCurve":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(np.array([float(r["weight"]) for r in rows]))


@dataclass(frozen=True)
class DefenseConfig:
    kind: str = "none"
    rs_snr_db: float = 15.0
    rs_passes: int = 5
    mdnf_sigma: float = DEFAULT_MDNF_SIGMA
    curve: Optional[ShapingCurve] = None
    noise_domain: str = "log"
    seed: int = 3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"defense kind must be one of {KINDS}")
        if self.rs_passes < 1:
            raise ValueError("rs_passes must be >= 1")
        if self.mdnf_sigma < 0:
            raise ValueError("mdnf_sigma must be >= 0")
        if self.noise_domain not in ("log", "linear"):
            raise ValueError("noise_domain must be 'log' or 'linear'")

    @property
    def label(self) -> str:
        if self.kind == "mdnf":
            return "mdnf" if self.curve is not None else "mdnf-unshaped"
        return self.kind

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "rs_snr_db": self.rs_snr_db,
            "rs_passes": self.rs_passes,
            "mdnf_sigma": self.mdnf_sigma,
            "curve": None if self.curve is None else [float(w) for w in self.curve.weights],
            "noise_domain": self.noise_domain,
            "seed": self.seed,
        }


@dataclass
class PerturbationPair:
    benign: AudioBuffer
    adversarial: AudioBuffer

    def __post_init__(self):
        if len(self.benign) != len(self.adversarial):
            raise ValueError("pair lengths differ")
        if self.benign.sample_rate != self.adversarial.sample_rate:
            raise ValueError("pair sample rates differ")


def _samples(audio) -> np.ndarray:
    return audio.samples if isinstance(audio, AudioBuffer) else np.asarray(audio, dtype=np.float64)


# --------------------------------------------------------------------------- noise flooding

def flood_noise(mel: MelSpectrogram, sigma: float, curve: Optional[ShapingCurve] = None,
                seed=0, domain: str = "log") -> MelSpectrogram:
    """Add white Gaussian noise with per-bin variance sigma**2 * curve[m] to a mel spectrogram.

    ``domain="linear"`` adds the noise to the exponentiated energies instead
    of the log values; either way the log floor is re-applied.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    values = mel.values
    n_mels = values.shape[1]
    if curve is not None and len(curve) != n_mels:
        raise ValueError(f"curve has {len(curve)} bins, mel has {n_mels}")
    if sigma == 0:
        return MelSpectrogram(values.copy(), mel.config)
    scale = sigma * (np.ones(n_mels) if curve is None else np.sqrt(curve.weights))
    noise = np.random.default_rng(seed).standard_normal(values.shape) * scale
    floor = mel.config.log_floor
    if domain == "log":
        out = np.maximum(values + noise, np.log(floor))
    elif domain == "linear":
        out = np.log(np.maximum(np.exp(values) + noise, floor))
    else:
        raise ValueError(f"unknown noise domain {domain!r}")
    return MelSpectrogram(out, mel.config)


def mel_resynth_defense(audio, dsp: DspConfig) -> AudioBuffer:
    x = _samples(audio)
    out = mel_to_audio(mel_spectrogram(x, dsp), dsp).samples
    return AudioBuffer(fit_length(out, x.size), dsp.sample_rate)


def mdnf_defense(audio, dsp: DspConfig, config: DefenseConfig, seed=None) -> AudioBuffer:
    """Re-synthesise audio from a noise-flooded mel spectrogram."""
    x = _samples(audio)
    seed = config.seed if seed is None else seed
    mel = flood_noise(mel_spectrogram(x, dsp), config.mdnf_sigma, config.curve, seed, config.noise_domain)
    out = mel_to_audio(mel, dsp).samples
    return AudioBuffer(fit_length(out, x.size), dsp.sample_rate)


# --------------------------------------------------------------------------- randomized smoothing

def rs_sigma(samples: np.ndarray, snr: float) -> float:
    rms = float(np.sqrt(np.mean(samples ** 2))) if samples.size else 0.0
    return max(rms * 10.0 ** (-snr / 20.0), RS_SIGMA_FLOOR)


def rs_noisy_copy(samples: np.ndarray, config: DefenseConfig, rng) -> np.ndarray:
    rng = np.random.default_rng(rng)
    noisy = samples + rs_sigma(samples, config.rs_snr_db) * rng.standard_normal(samples.size)
    return np.clip(noisy, -1.0, 1.0)


def smoothed_probs(model: ModelParams, audio, config: DefenseConfig, dsp: DspConfig, seed=None) -> np.ndarray:
    """Frame posteriors averaged over ``rs_passes`` noisy copies of the input."""
    x = _samples(audio)
    rng = np.random.default_rng(config.seed if seed is None else seed)
    total = None
    for _ in range(config.rs_passes):
        p = predict_probs(model, rs_noisy_copy(x, config, rng), dsp)
        total = p if total is None else total + p
    return total / config.rs_passes


def randomized_smoothing_decode(model: ModelParams, audio, config: DefenseConfig, dsp: DspConfig,
                                alphabet: TokenAlphabet | None = None, seed=None) -> list[int]:
    return greedy_decode(smoothed_probs(model, audio, config, dsp, seed), alphabet)


# --------------------------------------------------------------------------- curve estimation

def estimate_shaping_curve(pairs: Sequence[PerturbationPair], dsp: DspConfig) -> ShapingCurve:
    """Mean absolute log-mel difference between adversarial and benign, per mel bin."""
    if not pairs:
        raise ValueError("need at least one benign/adversarial pair")
    raw = np.zeros(dsp.n_mels)
    for pair in pairs:
        if len(pair.benign) != len(pair.adversarial):
            raise ValueError("pair lengths differ")
        diff = mel_spectrogram(pair.adversarial, dsp).values - mel_spectrogram(pair.benign, dsp).values
        raw += np.abs(diff).mean(axis=0)
    return ShapingCurve.from_raw(raw / len(pairs))


# --------------------------------------------------------------------------- dispatch

def preprocess(samples: np.ndarray, config: DefenseConfig, dsp: DspConfig, seed=None) -> np.ndarray:
    """Waveform pre-processing step of a defense (identity for none / smoothing)."""
    if config.kind == "mel_resynth":
        return mel_resynth_defense(samples, dsp).samples
    if config.kind == "mdnf":
        return mdnf_defense(samples, dsp, config, seed).samples
    return samples


def attack_transform(config: DefenseConfig, dsp: DspConfig, straight_through: str = "mel"):
    """Forward transform seen by an adaptive attacker, or None for the undefended pipeline.

    Smoothing noise is additive, so its gradient is exact at the noisy copy;
    the re-synthesis defenses use ``straight_through`` (see DefenseTransform).
    """
    if config.kind == "none":
        return None
    if config.kind == "randomized_smoothing":
        return DefenseTransform(lambda x, seed: rs_noisy_copy(x, config, seed), "waveform")
    return DefenseTransform(lambda x, seed: preprocess(x, config, dsp, seed), straight_through)


def apply_defense(audio, config: DefenseConfig, model: ModelParams, dsp: DspConfig,
                  alphabet: TokenAlphabet | None = None, seed=None) -> list[int]:
    """Run ``audio`` through the defended pipeline and return the transcript.

    ``model`` should be the recognizer paired with the defense: the clean
    model for ``none`` and smoothing, the re-synthesis-trained one otherwise.
    """
    x = _samples(audio)
    if config.kind == "randomized_smoothing":
        return randomized_smoothing_decode(model, x, config, dsp, alphabet, seed)
    x = preprocess(x, config, dsp, seed)
    return greedy_decode(forward(model, mel_spectrogram(x, dsp)), alphabet)
