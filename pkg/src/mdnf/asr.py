"""Frame-wise two-layer recognizer over log-mel context windows.

Everything here is plain numpy with hand-written reverse mode so that the
attacks can pull exact gradients back to the waveform.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from mdnf.audio import AudioBuffer, Utterance, add_wgn
from mdnf.dsp import DspConfig, MelSpectrogram, analysis_adjoint_grad, mel_spectrogram, resynthesize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TokenAlphabet:
    size: int  # number of word tokens V; silence is index V

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("alphabet needs at least one word token")

    @property
    def silence(self) -> int:
        return self.size

    @property
    def n_classes(self) -> int:
        return self.size + 1


@dataclass
class ModelParams:
    context: int
    w1: np.ndarray  # ((2c+1)*n_mels, H)
    b1: np.ndarray  # (H,)
    w2: np.ndarray  # (H, V+1)
    b2: np.ndarray  # (V+1,)
    feat_mean: np.ndarray = None  # (n_mels,), fixed input standardisation
    feat_std: np.ndarray = None

    def __post_init__(self):
        n_in = self.w1.shape[0]
        if n_in % (2 * self.context + 1):
            raise ValueError("w1 rows must be a multiple of the context width")
        n_mels = n_in // (2 * self.context + 1)
        if self.feat_mean is None:
            self.feat_mean = np.zeros(n_mels)
        if self.feat_std is None:
            self.feat_std = np.ones(n_mels)
        if self.b1.shape != (self.w1.shape[1],) or self.w2.shape[0] != self.w1.shape[1]:
            raise ValueError("layer-1 / layer-2 dimensions disagree")
        if self.b2.shape != (self.w2.shape[1],):
            raise ValueError("layer-2 bias has the wrong size")
        if self.feat_mean.shape != (n_mels,) or self.feat_std.shape != (n_mels,):
            raise ValueError("feature standardisation vectors have the wrong size")

    @property
    def n_mels(self) -> int:
        return self.w1.shape[0] // (2 * self.context + 1)

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def n_classes(self) -> int:
        return self.w2.shape[1]

    @property
    def alphabet(self) -> TokenAlphabet:
        return TokenAlphabet(self.n_classes - 1)

    def trainable(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def copy(self) -> "ModelParams":
        return ModelParams(self.context, self.w1.copy(), self.b1.copy(), self.w2.copy(),
                           self.b2.copy(), self.feat_mean.copy(), self.feat_std.copy())


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 10
    batch_size: int = 8
    seed: int = 1
    mixture_fraction: float = 0.7
    noise_snr_db: float = 20.0
    momentum: float = 0.9
    context: int = 2
    hidden: int = 128
    noise_first: bool = False  # add the WGN before re-synthesis rather than after

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.mixture_fraction <= 1.0:
            raise ValueError("mixture_fraction must be in [0, 1]")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size >= 1 and epochs >= 0 required")


def init_params(n_mels: int, n_classes: int, context: int, hidden: int, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    n_in = (2 * context + 1) * n_mels
    u = lambda *shape: rng.uniform(-0.05, 0.05, size=shape)
    return ModelParams(context, u(n_in, hidden), u(hidden), u(hidden, n_classes), u(n_classes))


# --------------------------------------------------------------------------- forward / backward

def _values(mel) -> np.ndarray:
    return mel.values if isinstance(mel, MelSpectrogram) else np.asarray(mel, dtype=np.float64)


def stack_context(z: np.ndarray, context: int) -> np.ndarray:
    """(T, M) -> (T, (2c+1)M), rows ordered by frame offset -c..c, zero beyond the edges."""
    n_frames, n_mels = z.shape
    padded = np.zeros((n_frames + 2 * context, n_mels))
    padded[context : context + n_frames] = z
    return np.concatenate([padded[j : j + n_frames] for j in range(2 * context + 1)], axis=1)


def unstack_context(g: np.ndarray, context: int, n_mels: int) -> np.ndarray:
    n_frames = g.shape[0]
    padded = np.zeros((n_frames + 2 * context, n_mels))
    for j in range(2 * context + 1):
        padded[j : j + n_frames] += g[:, j * n_mels : (j + 1) * n_mels]
    return padded[context : context + n_frames]


def _features(model: ModelParams, values: np.ndarray) -> np.ndarray:
    if values.ndim != 2 or values.shape[1] != model.n_mels:
        raise ValueError(f"mel width {values.shape[-1]} does not match model input ({model.n_mels})")
    return stack_context((values - model.feat_mean) / model.feat_std, model.context)


def forward(model: ModelParams, mel) -> np.ndarray:
    x = _features(model, _values(mel))
    h = np.maximum(x @ model.w1 + model.b1, 0.0)
    return h @ model.w2 + model.b2


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_labels(labels, n_frames: int, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n_frames,):
        raise ValueError(f"{labels.size} labels for {n_frames} frames")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError("label index outside the alphabet")
    return labels


def _loss_backward(model: ModelParams, x: np.ndarray, labels: np.ndarray):
    pre = x @ model.w1 + model.b1
    h = np.maximum(pre, 0.0)
    logits = h @ model.w2 + model.b2
    logp = log_softmax(logits)
    n = labels.size
    loss = -float(np.mean(logp[np.arange(n), labels]))
    d_logits = np.exp(logp)
    d_logits[np.arange(n), labels] -= 1.0
    d_logits /= n
    grads = {"w2": h.T @ d_logits, "b2": d_logits.sum(axis=0)}
    d_pre = (d_logits @ model.w2.T) * (pre > 0)
    grads["w1"] = x.T @ d_pre
    grads["b1"] = d_pre.sum(axis=0)
    d_x = d_pre @ model.w1.T
    return loss, d_x, grads, logits


def loss_and_grads(model: ModelParams, mel, labels):
    """Mean frame cross-entropy and its gradients.

    Returns ``(loss, grad_wrt_mel, grad_wrt_params)``; the parameter
    gradients are keyed like :meth:`ModelParams.trainable`.
    """
    values = _values(mel)
    labels = _check_labels(labels, values.shape[0], model.n_classes)
    x = _features(model, values)
    loss, d_x, grads, _ = _loss_backward(model, x, labels)
    d_mel = unstack_context(d_x, model.context, model.n_mels) / model.feat_std
    return loss, d_mel, grads


def waveform_loss_grad(model: ModelParams, samples: np.ndarray, labels, dsp: DspConfig):
    """(loss, waveform gradient, logits) through the full audio -> loss pipeline."""
    mel = mel_spectrogram(samples, dsp)
    labels = _check_labels(labels, mel.values.shape[0], model.n_classes)
    x = _features(model, mel.values)
    loss, d_x, _, logits = _loss_backward(model, x, labels)
    d_mel = unstack_context(d_x, model.context, model.n_mels) / model.feat_std
    return loss, analysis_adjoint_grad(samples, d_mel, dsp), logits


def grad_wrt_waveform(model: ModelParams, audio, labels, dsp: DspConfig) -> np.ndarray:
    samples = audio.samples if isinstance(audio, AudioBuffer) else np.asarray(audio, dtype=np.float64)
    return waveform_loss_grad(model, samples, labels, dsp)[1]


def predict_probs(model: ModelParams, audio, dsp: DspConfig) -> np.ndarray:
    logits = forward(model, mel_spectrogram(audio, dsp))
    return np.exp(log_softmax(logits))


def greedy_decode(logits: np.ndarray, alphabet: TokenAlphabet | None = None) -> list[int]:
    logits = np.asarray(logits)
    silence = logits.shape[1] - 1 if alphabet is None else alphabet.silence
    if alphabet is not None and logits.shape[1] != alphabet.n_classes:
        raise ValueError(f"logit width {logits.shape[1]} != {alphabet.n_classes}")
    best = np.argmax(logits, axis=1)  # first maximum wins ties
    keep = np.ones(best.size, dtype=bool)
    keep[1:] = best[1:] != best[:-1]
    return [int(t) for t in best[keep] if t != silence]


def transcribe(model: ModelParams, audio, dsp: DspConfig) -> list[int]:
    return greedy_decode(forward(model, mel_spectrogram(audio, dsp)))


# --------------------------------------------------------------------------- training

def _feature_stats(values: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    allv = np.concatenate(values, axis=0)
    return allv.mean(axis=0), np.maximum(allv.std(axis=0), 1e-3)


def train(dataset: Sequence[Utterance], config: TrainConfig, dsp: DspConfig,
          n_classes: int | None = None, on_epoch=None) -> ModelParams:
    """Minibatch SGD (with momentum) on frame cross-entropy.

    Each epoch, every utterance is re-synthesised through the mel domain with
    probability ``mixture_fraction`` and white noise at ``noise_snr_db`` is
    added to all of them before feature extraction.
    """
    if not dataset:
        raise ValueError("empty training set")
    if n_classes is None:
        n_classes = 1 + max(int(u.frame_labels.max()) for u in dataset)
    rng = np.random.default_rng(config.seed)
    model = init_params(dsp.n_mels, n_classes, config.context, config.hidden, int(rng.integers(2**32)))
    model.feat_mean, model.feat_std = _feature_stats(
        [mel_spectrogram(u.audio, dsp).values for u in dataset])
    if config.epochs == 0:
        return model

    resynth_cache: dict[int, np.ndarray] = {}
    velocity = {k: np.zeros_like(v) for k, v in model.trainable().items()}
    order = np.arange(len(dataset))
    for epoch in range(config.epochs):
        rng.shuffle(order)
        use_resynth = rng.random(len(dataset)) < config.mixture_fraction
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            xs, ys = [], []
            for i in order[start : start + config.batch_size]:
                utt = dataset[i]
                samples = utt.audio.samples
                if config.noise_first:
                    samples = add_wgn(samples, config.noise_snr_db, rng)
                    if use_resynth[i]:
                        samples = resynthesize(np.clip(samples, -1.0, 1.0), dsp)
                else:
                    if use_resynth[i]:
                        if i not in resynth_cache:
                            resynth_cache[i] = resynthesize(samples, dsp)
                        samples = resynth_cache[i]
                    samples = add_wgn(samples, config.noise_snr_db, rng)
                xs.append(_features(model, mel_spectrogram(samples, dsp).values))
                ys.append(utt.frame_labels)
            loss, _, grads, _ = _loss_backward(model, np.concatenate(xs), np.concatenate(ys))
            total += loss
            for k, p in model.trainable().items():
                velocity[k] *= config.momentum
                velocity[k] -= config.learning_rate * grads[k]
                p += velocity[k]
        n_batches = -(-len(order) // config.batch_size)
        log.info("epoch %d  mean loss %.4f", epoch + 1, total / n_batches)
        if on_epoch is not None:
            on_epoch(epoch, total / n_batches)
    return model


# --------------------------------------------------------------------------- checkpoints

_CKPT_MAGIC = b"MDNFASR1"


def save_model(model: ModelParams, path, sidecar: dict | None = None) -> None:
    """Binary checkpoint (dims header + little-endian float64 arrays) and a JSON sidecar."""
    path = Path(path)
    n_in, hidden = model.w1.shape
    header = _CKPT_MAGIC + struct.pack("<IIIII", model.context, model.n_mels, hidden, model.n_classes, n_in)
    body = b"".join(a.astype("<f8").tobytes() for a in
                    (model.w1, model.b1, model.w2, model.b2, model.feat_mean, model.feat_std))
    path.write_bytes(header + body)
    if sidecar is not None:
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_model(path) -> ModelParams:
    blob = Path(path).read_bytes()
    if blob[:8] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    context, n_mels, hidden, n_classes, n_in = struct.unpack("<IIIII", blob[8:28])
    flat = np.frombuffer(blob[28:], dtype="<f8")
    sizes = [n_in * hidden, hidden, hidden * n_classes, n_classes, n_mels, n_mels]
    if flat.size != sum(sizes):
        raise ValueError(f"{path}: truncated checkpoint")
    parts = np.split(flat.copy(), np.cumsum(sizes)[:-1])
    return ModelParams(context, parts[0].reshape(n_in, hidden), parts[1],
                       parts[2].reshape(hidden, n_classes), parts[3], parts[4], parts[5])


def train_config_dict(config: TrainConfig) -> dict:
    return asdict(config)
