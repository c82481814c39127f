"""Log-mel analysis, its reverse-mode gradient, and mel-to-audio re-synthesis.

Frames are Hann-windowed (periodic), zero-padded to ``fft_size`` and reduced
to power spectra; a peak-normalised triangular filterbank maps power to mel
energies, which are floored and logged. Re-synthesis inverts the filterbank
with a ridge-regularised minimum-norm pseudo-inverse and recovers phase with
Griffin-Lim using the least-squares overlap-add inverse.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from mdnf.audio import SAMPLE_RATE, AudioBuffer


@dataclass(frozen=True)
class DspConfig:
    sample_rate: int = SAMPLE_RATE
    frame_len: int = 400
    hop: int = 160
    fft_size: int = 512
    n_mels: int = 64
    f_min: float = 0.0
    f_max: float | None = None
    log_floor: float = 1e-10
    griffin_lim_iters: int = 32

    def __post_init__(self):
        n = self.fft_size
        if n <= 0 or n & (n - 1):
            raise ValueError(f"fft_size must be a power of two, got {n}")
        if n < self.frame_len:
            raise ValueError("fft_size must be >= frame_len")
        if not 0 < self.hop <= self.frame_len:
            raise ValueError("hop must be in (0, frame_len]")
        if not 0 <= self.f_min < self.fmax <= self.sample_rate / 2:
            raise ValueError("need 0 <= f_min < f_max <= sample_rate/2")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")

    @property
    def fmax(self) -> float:
        return self.sample_rate / 2 if self.f_max is None else float(self.f_max)

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        return (n_samples - self.frame_len) // self.hop + 1

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class MelFilterbank:
    weights: np.ndarray  # n_mels x n_bins
    bin_centers_hz: np.ndarray


@dataclass
class MelSpectrogram:
    values: np.ndarray  # n_frames x n_mels, log energies
    config: DspConfig

    @property
    def shape(self):
        return self.values.shape


# --------------------------------------------------------------------------- mel scale

def hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise ValueError("frequency must be non-negative")
    return 2595.0 * np.log10(1.0 + f / 700.0)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    if np.any(m < 0):
        raise ValueError("mel value must be non-negative")
    return 700.0 * (10.0 ** (m / 2595.0) - 1.0)


def mel_scale_convert(value, direction: str = "hz->mel"):
    if direction in ("hz->mel", "hz2mel"):
        return hz_to_mel(value)
    if direction in ("mel->hz", "mel2hz"):
        return mel_to_hz(value)
    raise ValueError(f"unknown direction {direction!r}")


# --------------------------------------------------------------------------- filterbank

def mel_anchor_hz(config: DspConfig) -> np.ndarray:
    mels = np.linspace(hz_to_mel(config.f_min), hz_to_mel(config.fmax), config.n_mels + 2)
    hz = mel_to_hz(mels)
    hz[0], hz[-1] = config.f_min, config.fmax  # exact edges despite round-off
    return hz


@lru_cache(maxsize=16)
def build_mel_filterbank(config: DspConfig) -> MelFilterbank:
    anchors = mel_anchor_hz(config)
    freqs = np.arange(config.n_bins) * config.sample_rate / config.fft_size
    lo, mid, hi = anchors[:-2, None], anchors[1:-1, None], anchors[2:, None]
    rise = (freqs[None, :] - lo) / (mid - lo)
    fall = (hi - freqs[None, :]) / (hi - mid)
    weights = np.clip(np.minimum(rise, fall), 0.0, 1.0)
    empty = np.flatnonzero(weights.max(axis=1) <= 0)
    if empty.size:
        raise ValueError(
            f"n_mels={config.n_mels} too large for fft_size={config.fft_size}: "
            f"filters {empty.tolist()} cover no FFT bin"
        )
    weights.setflags(write=False)
    centers = anchors[1:-1].copy()
    centers.setflags(write=False)
    return MelFilterbank(weights, centers)


@lru_cache(maxsize=16)
def _filterbank_pinv(config: DspConfig, ridge: float = 1e-8) -> np.ndarray:
    # minimum-norm inverse F^T (F F^T + ridge I)^-1 ; shape n_bins x n_mels
    fb = build_mel_filterbank(config).weights
    gram = fb @ fb.T
    inv = fb.T @ np.linalg.inv(gram + ridge * np.eye(gram.shape[0]))
    inv.setflags(write=False)
    return inv


@lru_cache(maxsize=16)
def hann_window(frame_len: int) -> np.ndarray:
    w = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(frame_len) / frame_len)
    w.setflags(write=False)
    return w


# --------------------------------------------------------------------------- analysis

def _samples(audio) -> np.ndarray:
    return audio.samples if isinstance(audio, AudioBuffer) else np.asarray(audio, dtype=np.float64)


def frame_signal(x: np.ndarray, config: DspConfig) -> np.ndarray:
    if x.size < config.frame_len:
        raise ValueError(f"audio of {x.size} samples is shorter than one frame ({config.frame_len})")
    n = config.n_frames(x.size)
    return sliding_window_view(x, config.frame_len)[:: config.hop][:n]


def stft(x: np.ndarray, config: DspConfig) -> np.ndarray:
    frames = frame_signal(x, config) * hann_window(config.frame_len)
    return np.fft.rfft(frames, n=config.fft_size, axis=1)


def mel_energies(x: np.ndarray, config: DspConfig) -> np.ndarray:
    spec = stft(x, config)
    power = spec.real ** 2 + spec.imag ** 2
    return power @ build_mel_filterbank(config).weights.T


def mel_spectrogram(audio, config: DspConfig) -> MelSpectrogram:
    energy = mel_energies(_samples(audio), config)
    return MelSpectrogram(np.log(np.maximum(energy, config.log_floor)), config)


@lru_cache(maxsize=64)
def _ola_index(n_frames: int, width: int, hop: int) -> np.ndarray:
    idx = (np.arange(n_frames)[:, None] * hop + np.arange(width)[None, :]).ravel()
    idx.setflags(write=False)
    return idx


def overlap_add(frames: np.ndarray, n_samples: int, config: DspConfig) -> np.ndarray:
    n_frames, width = frames.shape
    idx = _ola_index(n_frames, width, config.hop)
    return np.bincount(idx, weights=frames.ravel(), minlength=n_samples)


@lru_cache(maxsize=64)
def _window_sum(n_frames: int, config: DspConfig) -> np.ndarray:
    n_samples = (n_frames - 1) * config.hop + config.frame_len
    w = hann_window(config.frame_len)
    den = overlap_add(np.broadcast_to(w * w, (n_frames, config.frame_len)), n_samples, config)
    den.setflags(write=False)
    return den


def analysis_adjoint_grad(audio, grad_wrt_logmel: np.ndarray, config: DspConfig) -> np.ndarray:
    """Pull a gradient on the log-mel matrix back to the waveform samples."""
    x = _samples(audio)
    g = np.asarray(grad_wrt_logmel, dtype=np.float64)
    n_frames = config.n_frames(x.size) if x.size >= config.frame_len else 0
    if g.shape != (n_frames, config.n_mels):
        raise ValueError(f"gradient shape {g.shape} does not match mel shape {(n_frames, config.n_mels)}")
    fb = build_mel_filterbank(config).weights
    spec = stft(x, config)
    energy = (spec.real ** 2 + spec.imag ** 2) @ fb.T
    live = energy > config.log_floor
    g_energy = np.where(live, g / np.where(live, energy, 1.0), 0.0)
    g_power = g_energy @ fb
    # d(Re^2 + Im^2) = 2 Re dRe + 2 Im dIm, then the adjoint of the real DFT
    g_spec = 2.0 * g_power * spec
    n = config.fft_size
    g_spec[:, 1 : n // 2] *= 0.5
    g_frames = n * np.fft.irfft(g_spec, n=n, axis=1)[:, : config.frame_len]
    g_frames *= hann_window(config.frame_len)
    return overlap_add(g_frames, x.size, config)


# --------------------------------------------------------------------------- synthesis

def _bin_weights(config: DspConfig) -> np.ndarray:
    # Parseval weights for the one-sided spectrum
    w = np.full(config.n_bins, 2.0)
    w[0] = 1.0
    w[-1] = 1.0
    return w


def griffin_lim_objective(x: np.ndarray, magnitude: np.ndarray, config: DspConfig) -> float:
    """Parseval-weighted distance between ``magnitude`` and |STFT(x)|."""
    spec = stft(x, config)
    d = np.abs(spec) - magnitude
    return float(np.sqrt(np.sum(_bin_weights(config) * d * d)))


OLA_RIDGE = 1e-3


def istft_ls(spec: np.ndarray, config: DspConfig) -> np.ndarray:
    """Least-squares inverse STFT (window-sum normalised overlap-add).

    The window sum gets a small ridge so the first and last few samples,
    where the squared Hann window is nearly zero, are not blown up.
    """
    n_frames = spec.shape[0]
    n_samples = (n_frames - 1) * config.hop + config.frame_len
    w = hann_window(config.frame_len)
    frames = np.fft.irfft(spec, n=config.fft_size, axis=1)[:, : config.frame_len] * w
    num = overlap_add(frames, n_samples, config)
    return num / (_window_sum(n_frames, config) + OLA_RIDGE)


def griffin_lim(magnitude: np.ndarray, config: DspConfig, iters: int | None = None,
                seed: int = 0, track: bool = False) -> tuple[np.ndarray, list[float]]:
    """Phase recovery for a one-sided STFT magnitude.

    Returns the signal and, when ``track`` is set, the objective evaluated at
    every iterate (one entry per iteration).
    """
    iters = config.griffin_lim_iters if iters is None else iters
    rng = np.random.default_rng(seed)
    x = istft_ls(magnitude * np.exp(2j * np.pi * rng.random(magnitude.shape)), config)
    weights = _bin_weights(config) if track else None
    trajectory = []
    for i in range(max(iters, 1)):
        spec = stft(x, config)
        mag = np.abs(spec)
        if track:
            d = mag - magnitude
            trajectory.append(float(np.sqrt(np.sum(weights * d * d))))
        if i == iters - 1 or iters <= 0:
            break
        # keep the analysed phase, impose the target magnitude
        np.maximum(mag, 1e-300, out=mag)
        np.divide(magnitude, mag, out=mag)
        spec *= mag
        x = istft_ls(spec, config)
    return x, trajectory


def mel_to_magnitude(mel: MelSpectrogram, config: DspConfig) -> np.ndarray:
    energy = np.exp(mel.values)
    power = energy @ _filterbank_pinv(config).T
    return np.sqrt(np.maximum(power, 0.0))


def mel_to_audio(mel: MelSpectrogram, config: DspConfig | None = None,
                 return_trajectory: bool = False):
    config = mel.config if config is None else config
    if mel.values.ndim != 2 or mel.values.shape[1] != config.n_mels or mel.values.shape[0] < 1:
        raise ValueError(f"mel shape {mel.values.shape} incompatible with n_mels={config.n_mels}")
    x, traj = griffin_lim(mel_to_magnitude(mel, config), config, track=return_trajectory)
    audio = AudioBuffer(np.clip(x, -1.0, 1.0), config.sample_rate)
    return (audio, traj) if return_trajectory else audio


def fit_length(x: np.ndarray, n: int) -> np.ndarray:
    if x.size >= n:
        return x[:n]
    return np.concatenate([x, np.zeros(n - x.size)])


def resynthesize(audio, config: DspConfig) -> np.ndarray:
    """mel_to_audio(mel_spectrogram(x)) trimmed or zero-padded to the input length."""
    x = _samples(audio)
    return fit_length(mel_to_audio(mel_spectrogram(x, config), config).samples, x.size)


def mel_roundtrip(audio, config: DspConfig):
    """Re-synthesise ``audio`` and measure the damage.

    Returns ``(deviation, trajectory, resynth)``: mean absolute log-mel
    difference between input and output, the Griffin-Lim objective per
    iterate, and the length-matched output samples.
    """
    x = _samples(audio)
    mel = mel_spectrogram(x, config)
    out, traj = mel_to_audio(mel, config, return_trajectory=True)
    y = fit_length(out.samples, x.size)
    deviation = float(np.mean(np.abs(mel_spectrogram(y, config).values - mel.values)))
    return deviation, traj, y


# --------------------------------------------------------------------------- serialization

_MAGIC = b"MELS"


def save_mel_csv(mel: MelSpectrogram, path) -> None:
    np.savetxt(path, mel.values, delimiter=",", fmt="%.17g")


def load_mel_csv(path, config: DspConfig) -> MelSpectrogram:
    values = np.loadtxt(path, delimiter=",", ndmin=2)
    return MelSpectrogram(values, config)


def save_mel_binary(mel: MelSpectrogram, path) -> None:
    n_frames, n_mels = mel.values.shape
    header = _MAGIC + struct.pack("<II", n_frames, n_mels) + bytes.fromhex(mel.config.digest())
    Path(path).write_bytes(header + mel.values.astype("<f8").tobytes())


def load_mel_binary(path, config: DspConfig) -> MelSpectrogram:
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: not a mel binary file")
    n_frames, n_mels = struct.unpack("<II", blob[4:12])
    digest = blob[12:44].hex()
    if digest != config.digest():
        raise ValueError(f"{path}: written with a different DSP configuration")
    values = np.frombuffer(blob[44:], dtype="<f8").reshape(n_frames, n_mels).copy()
    return MelSpectrogram(values, config)
