"""White-box waveform attacks on the toy recognizer.

All attacks keep the cumulative perturbation ``delta`` explicitly, project it
after every step and clip ``x + delta`` to the legal sample range.  A
``defense`` argument, when given, is a stochastic pre-processor
``transform(samples, seed) -> samples`` (optionally wrapped in
:class:`DefenseTransform`); gradients through it use the straight-through
rule and are averaged over ``eot_passes`` draws.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from mdnf.asr import ModelParams, forward, greedy_decode, loss_and_grads, transcribe, waveform_loss_grad
from mdnf.audio import AudioBuffer, Utterance, snr_db
from mdnf.dsp import DspConfig, analysis_adjoint_grad, mel_spectrogram

Transform = Callable[[np.ndarray, object], np.ndarray]


@dataclass(frozen=True)
class DefenseTransform:
    """A stochastic pre-processor plus the rule for differentiating through it.

    ``straight_through="waveform"`` treats the whole pre-processor as the
    identity on samples: the recognizer gradient is taken at the processed
    audio and used as the gradient at the input. ``"mel"`` treats only the
    re-synthesis (mel -> audio -> mel) as the identity: the log-mel gradient at
    the processed audio is pulled back through the analysis of the input, which
    avoids the phase mismatch between a Griffin-Lim output and its input.
    """
    forward: Transform
    straight_through: str = "waveform"

    def __post_init__(self):
        if self.straight_through not in ("waveform", "mel"):
            raise ValueError("straight_through must be 'waveform' or 'mel'")

    def __call__(self, samples, seed):
        return self.forward(samples, seed)

NORMS = ("l2", "linf")
METHODS = ("fgsm", "pgd", "cw")


@dataclass(frozen=True)
class AttackConfig:
    norm: str = "l2"
    epsilon: Optional[float] = None
    epsilon_step: Optional[float] = None
    max_iter: int = 100
    snr_bound_db: Optional[float] = None
    targeted: bool = False
    target_transcript: Optional[tuple[int, ...]] = None
    eot_passes: int = 1
    seed: int = 2
    method: str = "pgd"
    step_rule: str = "normalized"  # l2 ascent direction: normalized gradient or sign
    early_stop: bool = True  # targeted attacks stop once the target decodes

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        has_eps = self.epsilon is not None and self.epsilon > 0
        has_snr = self.snr_bound_db is not None
        if has_eps == has_snr:
            raise ValueError("exactly one of epsilon (> 0) or snr_bound_db must be set")
        if self.max_iter < 1 or self.eot_passes < 1:
            raise ValueError("max_iter and eot_passes must be >= 1")
        if self.step_rule not in ("normalized", "sign"):
            raise ValueError("step_rule must be 'normalized' or 'sign'")
        if self.target_transcript is not None:
            object.__setattr__(self, "target_transcript", tuple(int(t) for t in self.target_transcript))

    @property
    def budget_label(self) -> str:
        if self.snr_bound_db is not None:
            return f"{self.snr_bound_db:g}dB"
        return f"{self.norm}/{self.epsilon:g}"

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["target_transcript"] is not None:
            d["target_transcript"] = list(d["target_transcript"])
        return d


@dataclass
class AttackResult:
    adversarial: AudioBuffer
    achieved_snr_db: float
    iterations_used: int
    final_loss: float
    success: bool
    decoded: list[int] = field(default_factory=list)
    loss_trace: list[float] = field(default_factory=list)

    def delta(self, benign) -> np.ndarray:
        ref = benign.samples if isinstance(benign, AudioBuffer) else np.asarray(benign)
        return self.adversarial.samples - ref

    def record(self) -> dict:
        return {
            "achieved_snr_db": self.achieved_snr_db,
            "success": self.success,
            "iterations_used": self.iterations_used,
            "final_loss": self.final_loss,
        }


# --------------------------------------------------------------------------- projection

def project_ball(delta, norm: str, epsilon: float) -> np.ndarray:
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    delta = np.asarray(delta, dtype=np.float64)
    if norm == "linf":
        return np.clip(delta, -epsilon, epsilon)
    if norm == "l2":
        size = float(np.linalg.norm(delta))
        return delta * (epsilon / size) if size > epsilon else delta.copy()
    raise ValueError(f"unknown norm {norm!r}")


def project_snr(delta: np.ndarray, reference: np.ndarray, snr_bound_db: float) -> np.ndarray:
    """Shrink ``delta`` so that snr(reference, reference + delta) >= bound."""
    radius = float(np.linalg.norm(reference)) * 10.0 ** (-snr_bound_db / 20.0)
    size = float(np.linalg.norm(delta))
    return delta * (radius / size) if size > radius else delta


def _direction(grad: np.ndarray, norm: str, step_rule: str) -> np.ndarray:
    if norm == "linf" or step_rule == "sign":
        return np.sign(grad)
    size = float(np.linalg.norm(grad))
    return grad / size if size > 0 else np.zeros_like(grad)


# --------------------------------------------------------------------------- gradients

def eot_gradient(model: ModelParams, audio, labels, defense: Optional[Transform], passes: int,
                 seed, dsp: DspConfig, return_loss: bool = False):
    """Mean straight-through gradient over ``passes`` draws of the defense's noise.

    Pass ``i`` uses ``SeedSequence(seed).spawn(passes)[i]`` as its randomness.
    """
    if passes < 1:
        raise ValueError("passes must be >= 1")
    x = audio.samples if isinstance(audio, AudioBuffer) else np.asarray(audio, dtype=np.float64)
    seeds = np.random.SeedSequence(seed).spawn(passes)
    via_mel = getattr(defense, "straight_through", "waveform") == "mel"
    grads, losses = [], []
    for s in seeds:
        xt = x if defense is None else defense(x, s)
        if via_mel:
            loss, d_mel, _ = loss_and_grads(model, mel_spectrogram(xt, dsp), labels)
            g = analysis_adjoint_grad(x, d_mel, dsp)
        else:
            loss, g, _ = waveform_loss_grad(model, xt, labels, dsp)
        grads.append(g)
        losses.append(loss)
    grad = np.mean(grads, axis=0)
    return (grad, float(np.mean(losses))) if return_loss else grad


def _loss_grad(model, x, labels, dsp, defense, passes, seed):
    """Loss and gradient at ``x`` plus the undefended decode used for success checks."""
    if defense is None:
        loss, grad, logits = waveform_loss_grad(model, x, labels, dsp)
        return loss, grad, logits
    grad, loss = eot_gradient(model, x, labels, defense, passes, seed, dsp, return_loss=True)
    return loss, grad, None


def _decode(model, x, dsp, defense, seed):
    xt = x if defense is None else defense(x, seed)
    return greedy_decode(forward(model, mel_spectrogram(xt, dsp)))


def _result(model, benign: np.ndarray, adv: np.ndarray, labels, dsp, iters, loss, success,
            trace, decoded=None) -> AttackResult:
    if decoded is None:
        decoded = transcribe(model, adv, dsp)
    return AttackResult(AudioBuffer(adv, dsp.sample_rate), snr_db(benign, adv), iters,
                        float(loss), bool(success), list(decoded), trace)


def _samples(utterance) -> np.ndarray:
    return utterance.audio.samples


# --------------------------------------------------------------------------- untargeted

def fgsm(model: ModelParams, utterance: Utterance, epsilon: float, dsp: DspConfig) -> AttackResult:
    x = _samples(utterance)
    loss0, grad, _ = waveform_loss_grad(model, x, utterance.frame_labels, dsp)
    delta = epsilon * np.sign(grad)
    adv = np.clip(x + delta, -1.0, 1.0)
    loss = waveform_loss_grad(model, adv, utterance.frame_labels, dsp)[0]
    decoded = transcribe(model, adv, dsp)
    return _result(model, x, adv, utterance.frame_labels, dsp, 1, loss,
                   decoded != utterance.transcript, [loss0, loss], decoded)


def pgd(model: ModelParams, utterance: Utterance, config: AttackConfig, dsp: DspConfig,
        defense: Optional[Transform] = None) -> AttackResult:
    """Untargeted PGD: ascend the loss on the benign labels inside the epsilon ball."""
    if config.targeted or config.epsilon is None:
        raise ValueError("pgd needs an untargeted config with an epsilon budget")
    x = _samples(utterance)
    labels = utterance.frame_labels
    step = config.epsilon / 10.0 if config.epsilon_step is None else config.epsilon_step
    delta = np.zeros_like(x)
    adv = x
    trace = []
    for k in range(config.max_iter):
        loss, grad, _ = _loss_grad(model, adv, labels, dsp, defense, config.eot_passes, [config.seed, k])
        trace.append(loss)
        delta = project_ball(delta + step * _direction(grad, config.norm, config.step_rule),
                             config.norm, config.epsilon)
        adv = np.clip(x + delta, -1.0, 1.0)
        delta = adv - x
    loss = waveform_loss_grad(model, adv, labels, dsp)[0]
    trace.append(loss)
    decoded = transcribe(model, adv, dsp)
    return _result(model, x, adv, labels, dsp, config.max_iter, loss,
                   decoded != utterance.transcript, trace, decoded)


# --------------------------------------------------------------------------- targeted

def target_frame_labels(target: Sequence[int], n_frames: int, silence: int) -> np.ndarray:
    """Stretch ``target`` uniformly over ``n_frames`` with one silence frame between words."""
    target = list(target)
    k = len(target)
    if k == 0:
        return np.full(n_frames, silence, dtype=np.int64)
    avail = n_frames - (k - 1)
    if avail < k:
        raise ValueError(f"target of {k} words does not fit in {n_frames} frames")
    sizes = [len(c) for c in np.array_split(np.arange(avail), k)]
    labels = []
    for i, (tok, size) in enumerate(zip(target, sizes)):
        if i:
            labels.append(silence)
        labels.extend([tok] * size)
    return np.asarray(labels, dtype=np.int64)


def _target_labels(model, utterance, config, dsp):
    if config.target_transcript is None:
        raise ValueError("targeted attack needs a target_transcript")
    n_frames = dsp.n_frames(len(utterance.audio))
    return target_frame_labels(config.target_transcript, n_frames, model.n_classes - 1)


def pgd_targeted(model: ModelParams, utterance: Utterance, config: AttackConfig, dsp: DspConfig,
                 defense: Optional[Transform] = None) -> AttackResult:
    """SNR-bounded targeted PGD: descend the loss toward the target frame labels."""
    if config.snr_bound_db is None:
        raise ValueError("pgd_targeted needs snr_bound_db")
    x = _samples(utterance)
    labels = _target_labels(model, utterance, config, dsp)
    target = list(config.target_transcript)
    step = 1e-3 if config.epsilon_step is None else config.epsilon_step
    delta = np.zeros_like(x)
    adv = x
    trace = []
    used = 0
    for k in range(config.max_iter):
        loss, grad, logits = _loss_grad(model, adv, labels, dsp, defense, config.eot_passes, [config.seed, k])
        trace.append(loss)
        if config.early_stop and logits is not None and greedy_decode(logits) == target:
            break
        used += 1
        delta = project_snr(delta - step * _direction(grad, config.norm, config.step_rule), x, config.snr_bound_db)
        adv = np.clip(x + delta, -1.0, 1.0)
        delta = adv - x
    loss, _, logits = waveform_loss_grad(model, adv, labels, dsp)
    if used == config.max_iter:
        trace.append(loss)
    decoded = greedy_decode(logits)
    return _result(model, x, adv, labels, dsp, used, loss, decoded == target, trace, decoded)


def cw_attack(model: ModelParams, utterance: Utterance, config: AttackConfig, dsp: DspConfig,
              defense: Optional[Transform] = None, shrink: float = 0.8) -> AttackResult:
    """Targeted descent in a shrinking l-inf box.

    Each success records the perturbation and tightens the bound to
    ``shrink * max|delta|``; the smallest successful perturbation is returned.
    """
    if config.epsilon is None:
        raise ValueError("cw_attack needs an initial bound in epsilon")
    x = _samples(utterance)
    labels = _target_labels(model, utterance, config, dsp)
    target = list(config.target_transcript)
    lr = 1e-4 if config.epsilon_step is None else config.epsilon_step
    tau = config.epsilon
    delta = np.zeros_like(x)
    adv = x
    best = None
    trace = []
    for k in range(config.max_iter):
        loss, grad, logits = _loss_grad(model, adv, labels, dsp, defense, config.eot_passes, [config.seed, k])
        trace.append(loss)
        if logits is None:
            decoded = _decode(model, adv, dsp, defense, [config.seed, k])
        else:
            decoded = greedy_decode(logits)
        if decoded == target:
            size = float(np.max(np.abs(delta))) if delta.size else 0.0
            if best is None or size < best[0]:
                best = (size, adv.copy(), loss, k)
            if size == 0.0:
                break
            tau = shrink * size
        delta = np.clip(delta - lr * np.sign(grad), -tau, tau)
        adv = np.clip(x + delta, -1.0, 1.0)
        delta = adv - x
    if best is not None:
        _, adv, loss, k = best
        return _result(model, x, adv, labels, dsp, len(trace), loss, True, trace, target)
    loss, _, logits = waveform_loss_grad(model, adv, labels, dsp)
    decoded = greedy_decode(logits)
    return _result(model, x, adv, labels, dsp, config.max_iter, loss, decoded == target, trace, decoded)


def run_attack(model: ModelParams, utterance: Utterance, config: AttackConfig, dsp: DspConfig,
               defense: Optional[Transform] = None) -> AttackResult:
    if config.method == "fgsm":
        return fgsm(model, utterance, config.epsilon, dsp)
    if config.method == "cw":
        return cw_attack(model, utterance, config, dsp, defense)
    if config.targeted or config.snr_bound_db is not None:
        return pgd_targeted(model, utterance, config, dsp, defense)
    return pgd(model, utterance, config, dsp, defense)
