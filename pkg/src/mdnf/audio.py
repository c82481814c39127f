"""Audio buffers, PCM16 WAV I/O, the synthetic formant-word corpus and SNR."""

from __future__ import annotations

import json
import os
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:
    from mdnf.dsp import DspConfig

SAMPLE_RATE = 16000
PCM_SCALE = 32768.0


class WavError(Exception):
    """Base class for WAV decoding failures."""


class WavMissingError(WavError, FileNotFoundError):
    pass


class WavNotMonoError(WavError):
    pass


class WavNotPcm16Error(WavError):
    pass


class WavTruncatedError(WavError):
    pass


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("AudioBuffer holds mono audio only")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)
        if self.samples.size and not np.all(np.isfinite(self.samples)):
            raise ValueError("samples must be finite")
        if self.samples.size and np.max(np.abs(self.samples)) > 1.0:
            raise ValueError("samples must lie in [-1, 1]")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class Utterance:
    audio: AudioBuffer
    transcript: list[int]
    frame_labels: np.ndarray
    uid: str = ""

    def __post_init__(self):
        self.transcript = [int(t) for t in self.transcript]
        self.frame_labels = np.asarray(self.frame_labels, dtype=np.int64)


@dataclass(frozen=True)
class CorpusConfig:
    vocabulary_size: int = 10
    words_per_utterance: tuple[int, int] = (2, 4)
    utterance_count: int = 700
    seed: int = 0
    noise_floor_db: float = -40.0

    def __post_init__(self):
        lo, hi = self.words_per_utterance
        if self.vocabulary_size < 2:
            raise ValueError("vocabulary_size must be >= 2")
        if self.utterance_count < 1:
            raise ValueError("utterance_count must be >= 1")
        if lo < 1 or hi < lo:
            raise ValueError(f"bad words_per_utterance range {self.words_per_utterance}")
        object.__setattr__(self, "words_per_utterance", (int(lo), int(hi)))


# --------------------------------------------------------------------------- WAV

def read_wav(path) -> AudioBuffer:
    path = Path(path)
    if not path.is_file():
        raise WavMissingError(f"no such WAV file: {path}")
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            if channels != 1:
                raise WavNotMonoError(f"{path}: expected mono, found {channels} channels")
            if width != 2:
                raise WavNotPcm16Error(f"{path}: expected 16-bit PCM, found {8 * width}-bit")
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        msg = str(exc)
        if "unknown format" in msg:
            raise WavNotPcm16Error(f"{path}: {msg}") from exc
        raise WavTruncatedError(f"{path}: {msg}") from exc
    except EOFError as exc:
        raise WavTruncatedError(f"{path}: truncated header") from exc
    pcm = np.frombuffer(raw[: len(raw) // 2 * 2], dtype="<i2")
    return AudioBuffer(pcm.astype(np.float64) / PCM_SCALE, rate)


def quantize_pcm16(samples: np.ndarray) -> np.ndarray:
    clipped = np.clip(samples, -1.0, 1.0 - 1.0 / PCM_SCALE)
    return np.round(clipped * PCM_SCALE).astype("<i2")


def write_wav(path, audio: AudioBuffer) -> None:
    path = Path(path)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(audio.sample_rate)
        fh.writeframes(quantize_pcm16(audio.samples).tobytes())


# --------------------------------------------------------------------------- SNR

def snr_db(reference: AudioBuffer, perturbed: AudioBuffer) -> float:
    """10*log10(signal energy / perturbation energy); ``inf`` for zero perturbation."""
    ref = reference.samples if isinstance(reference, AudioBuffer) else np.asarray(reference, float)
    per = perturbed.samples if isinstance(perturbed, AudioBuffer) else np.asarray(perturbed, float)
    if ref.shape != per.shape:
        raise ValueError(f"length mismatch: {ref.size} vs {per.size}")
    if isinstance(reference, AudioBuffer) and isinstance(perturbed, AudioBuffer):
        if reference.sample_rate != perturbed.sample_rate:
            raise ValueError("sample rate mismatch")
    signal = float(np.dot(ref, ref))
    if signal == 0.0:
        raise ValueError("reference has zero energy")
    diff = per - ref
    noise = float(np.dot(diff, diff))
    if noise == 0.0:
        return float("inf")
    return 10.0 * np.log10(signal / noise)


def add_wgn(samples: np.ndarray, snr: float, rng: np.random.Generator, floor: float = 1e-4) -> np.ndarray:
    """White Gaussian noise scaled from the buffer RMS to hit ``snr`` dB on average."""
    rms = float(np.sqrt(np.mean(samples ** 2))) if samples.size else 0.0
    sigma = max(rms * 10.0 ** (-snr / 20.0), floor)
    return samples + sigma * rng.standard_normal(samples.size)


# --------------------------------------------------------------------------- corpus

@dataclass(frozen=True)
class _Word:
    segments: tuple[tuple[float, float], ...]  # (f1, f2) Hz per segment
    seg_len: int  # samples per segment


def _vocabulary(config: CorpusConfig, rng: np.random.Generator, sample_rate: int) -> list[_Word]:
    words = []
    for _ in range(config.vocabulary_size):
        n_seg = int(rng.integers(2, 4))
        segs = tuple(
            (float(rng.uniform(250.0, 1000.0)), float(rng.uniform(1100.0, 3800.0)))
            for _ in range(n_seg)
        )
        seg_len = int(rng.uniform(0.06, 0.10) * sample_rate)
        words.append(_Word(segs, seg_len))
    return words


def _render_word(word: _Word, sample_rate: int, gain: float) -> np.ndarray:
    ramp = int(0.005 * sample_rate)
    pieces = []
    for f1, f2 in word.segments:
        t = np.arange(word.seg_len) / sample_rate
        seg = 0.6 * np.sin(2 * np.pi * f1 * t) + 0.4 * np.sin(2 * np.pi * f2 * t)
        env = np.ones(word.seg_len)
        r = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[:ramp] = r
        env[-ramp:] = r[::-1]
        pieces.append(seg * env)
    out = np.concatenate(pieces)
    # slower word-level attack/decay on top of the per-segment ramps
    edge = int(0.015 * sample_rate)
    r = 0.5 - 0.5 * np.cos(np.pi * np.arange(edge) / edge)
    out[:edge] *= r
    out[-edge:] *= r[::-1]
    return gain * out


def frame_labels_from_alignment(n_samples: int, spans, silence: int, frame_len: int, hop: int) -> np.ndarray:
    """Label each analysis frame by the word whose span contains the frame centre."""
    n_frames = (n_samples - frame_len) // hop + 1
    centres = np.arange(n_frames) * hop + frame_len // 2
    labels = np.full(n_frames, silence, dtype=np.int64)
    for token, start, stop in spans:
        labels[(centres >= start) & (centres < stop)] = token
    return labels


def collapse_labels(labels, silence: int) -> list[int]:
    out = []
    prev = None
    for lab in labels:
        lab = int(lab)
        if lab != prev and lab != silence:
            out.append(lab)
        prev = lab
    return out


def synth_corpus(config: CorpusConfig, dsp: "DspConfig") -> list[Utterance]:
    """Deterministic corpus of formant-tone 'words' with exact frame alignments."""
    sr = dsp.sample_rate
    rng = np.random.default_rng(config.seed)
    vocab = _vocabulary(config, rng, sr)
    silence = config.vocabulary_size
    noise_sigma = 10.0 ** (config.noise_floor_db / 20.0)
    min_gap = 3 * dsp.hop + dsp.frame_len // 2
    lo, hi = config.words_per_utterance

    corpus = []
    for idx in range(config.utterance_count):
        n_words = int(rng.integers(lo, hi + 1))
        tokens = [int(t) for t in rng.integers(0, config.vocabulary_size, size=n_words)]
        gain = float(rng.uniform(0.25, 0.5))
        lead = int(rng.uniform(0.06, 0.12) * sr)
        chunks = [np.zeros(lead)]
        pos = lead
        spans = []
        for k, tok in enumerate(tokens):
            w = _render_word(vocab[tok], sr, gain)
            spans.append((tok, pos, pos + w.size))
            chunks.append(w)
            pos += w.size
            gap = int(rng.uniform(0.05, 0.12) * sr) if k < n_words - 1 else int(rng.uniform(0.06, 0.12) * sr)
            gap = max(gap, min_gap)
            chunks.append(np.zeros(gap))
            pos += gap
        clean = np.concatenate(chunks)
        if clean.size < dsp.frame_len:
            raise ValueError(f"utterance {idx} shorter than one analysis frame")
        noisy = clean + noise_sigma * rng.standard_normal(clean.size)
        noisy = np.clip(noisy, -1.0, 1.0)
        labels = frame_labels_from_alignment(clean.size, spans, silence, dsp.frame_len, dsp.hop)
        corpus.append(Utterance(AudioBuffer(noisy, sr), tokens, labels, uid=f"utt{idx:05d}"))
    return corpus


# --------------------------------------------------------------------------- manifest

def write_corpus(corpus: Sequence[Utterance], out_dir) -> Path:
    """Write one WAV per utterance plus ``manifest.json``; returns the manifest path."""
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for utt in corpus:
        wav_path = wav_dir / f"{utt.uid}.wav"
        write_wav(wav_path, utt.audio)
        entries.append({
            "wav_path": os.path.relpath(wav_path, out_dir),
            "transcript": list(utt.transcript),
            "frame_labels": [int(v) for v in utt.frame_labels],
        })
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps(entries, indent=1) + "\n")
    return manifest


def read_corpus(manifest_path) -> list[Utterance]:
    manifest_path = Path(manifest_path)
    entries = json.loads(manifest_path.read_text())
    corpus = []
    for e in entries:
        wav_path = Path(e["wav_path"])
        if not wav_path.is_absolute():
            wav_path = manifest_path.parent / wav_path
        corpus.append(Utterance(read_wav(wav_path), e["transcript"], e["frame_labels"], uid=wav_path.stem))
    return corpus
