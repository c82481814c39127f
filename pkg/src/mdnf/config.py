"""JSON run configuration: defaults, dotted overrides and builders for the typed configs.

One top-level ``seed`` drives everything; module seeds are derived by fixed
offsets (corpus +0, training +1, attacks +2, defenses +3) unless a section
sets its own ``seed`` explicitly.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Optional

from mdnf.asr import TrainConfig
from mdnf.attacks import AttackConfig
from mdnf.audio import CorpusConfig, SAMPLE_RATE
from mdnf.defenses import DEFAULT_MDNF_SIGMA, DefenseConfig, ShapingCurve
from mdnf.dsp import DspConfig
from mdnf.harness import ScenarioConfig

SCHEMA_VERSION = 1
SEED_OFFSETS = {"corpus": 0, "train": 1, "attack": 2, "defense": 3}


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "corpus": {
        "vocabulary_size": 10,
        "words_per_utterance": [2, 4],
        "utterance_count": 700,
        "noise_floor_db": -40.0,
        "seed": None,
    },
    "split": {"train": 500, "dev": 100},
    "dsp": {
        "sample_rate": SAMPLE_RATE,
        "frame_len": 400,
        "hop": 160,
        "fft_size": 512,
        "n_mels": 64,
        "f_min": 0.0,
        "f_max": None,
        "log_floor": 1e-10,
        "griffin_lim_iters": 32,
    },
    "train": {
        "learning_rate": 0.05,
        "epochs": 10,
        "batch_size": 8,
        "mixture_fraction": 0.7,
        "noise_snr_db": 20.0,
        "momentum": 0.9,
        "context": 2,
        "hidden": 128,
        "seed": None,
    },
    "attack": {
        "method": "pgd",
        "norm": "l2",
        "epsilon": 1.5,
        "epsilon_step": None,
        "max_iter": 100,
        "snr_bound_db": None,
        "targeted": False,
        "target_transcript": None,
        "eot_passes": 1,
        "step_rule": "normalized",
        "seed": None,
    },
    "defense": {
        "kind": "mdnf",
        "rs_snr_db": 15.0,
        "rs_passes": 5,
        "mdnf_sigma": DEFAULT_MDNF_SIGMA,
        "shaped": True,
        "noise_domain": "log",
        "seed": None,
    },
    "curve": {"pairs": 100, "split": "dev"},
    "evaluate": {
        "sample_count": 100,
        "max_iter": 100,
        "setting": "transfer",
        "straight_through": "mel",
        "matrix": None,
    },
    "paths": {
        "manifest": "corpus/manifest.json",
        "clean_model": "models/clean.ckpt",
        "defended_model": "models/defended.ckpt",
        "curve": "curve.csv",
    },
}

# one-line help for every key, shown in ``mdnf --help``
KEY_HELP = {
    "schema_version": "config schema version (must be 1)",
    "seed": "top-level seed; module seeds are seed + fixed offset",
    "corpus.vocabulary_size": "number of distinct words",
    "corpus.words_per_utterance": "inclusive [min, max] words per utterance",
    "corpus.utterance_count": "utterances to synthesise",
    "corpus.noise_floor_db": "background noise level relative to full scale",
    "corpus.seed": "override for seed + 0",
    "split.train": "leading utterances used for training",
    "split.dev": "next utterances used for tuning and curve estimation (rest is test)",
    "dsp.sample_rate": "Hz",
    "dsp.frame_len": "analysis frame length in samples",
    "dsp.hop": "frame hop in samples",
    "dsp.fft_size": "FFT size (power of two >= frame_len)",
    "dsp.n_mels": "mel filters",
    "dsp.f_min": "lowest filter edge in Hz",
    "dsp.f_max": "highest filter edge in Hz (null = Nyquist)",
    "dsp.log_floor": "energy floor before the log",
    "dsp.griffin_lim_iters": "phase-reconstruction iterations",
    "train.learning_rate": "SGD step size",
    "train.epochs": "passes over the training split",
    "train.batch_size": "utterances per minibatch",
    "train.mixture_fraction": "share of re-synthesised utterances for the defended model",
    "train.noise_snr_db": "white-noise augmentation SNR",
    "train.momentum": "SGD momentum",
    "train.context": "context radius in frames",
    "train.hidden": "hidden units",
    "train.seed": "override for seed + 1",
    "attack.method": "pgd | fgsm | cw",
    "attack.norm": "l2 | linf",
    "attack.epsilon": "perturbation budget (null when snr_bound_db is set)",
    "attack.epsilon_step": "step size (null = method default)",
    "attack.max_iter": "iterations",
    "attack.snr_bound_db": "minimum SNR for bounded targeted attacks",
    "attack.targeted": "descend toward a target transcript",
    "attack.target_transcript": "token list (null = every word shifted by one)",
    "attack.eot_passes": "gradient samples per step through a stochastic defense",
    "attack.step_rule": "normalized | sign (l2 ascent direction)",
    "attack.seed": "override for seed + 2",
    "defense.kind": "none | randomized_smoothing | mel_resynth | mdnf",
    "defense.rs_snr_db": "smoothing noise SNR",
    "defense.rs_passes": "smoothing forward passes",
    "defense.mdnf_sigma": "log-mel flooding noise std",
    "defense.shaped": "use the estimated shaping curve (paths.curve)",
    "defense.noise_domain": "log | linear",
    "defense.seed": "override for seed + 3",
    "curve.pairs": "benign/adversarial pairs for curve estimation",
    "curve.split": "split the pairs are drawn from",
    "evaluate.sample_count": "utterances per scenario",
    "evaluate.max_iter": "PGD iterations in the default matrix",
    "evaluate.setting": "transfer | adaptive",
    "evaluate.straight_through": "mel | waveform (adaptive re-synthesis gradient rule)",
    "evaluate.matrix": "JSON scenario file (null = built-in default matrix)",
    "paths.manifest": "corpus manifest, relative to the output directory",
    "paths.clean_model": "checkpoint of the clean-trained recognizer",
    "paths.defended_model": "checkpoint of the mixture-trained recognizer",
    "paths.curve": "shaping-curve CSV",
}


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _merge(base: dict, new: dict, where: str = "") -> None:
    for k, v in new.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where}{k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where}{k!r} must be an object")
            _merge(base[k], v, f"{where}{k}.")
        else:
            base[k] = v


def parse_override(text: str) -> tuple[str, object]:
    """``a.b=value``; the value is parsed as JSON when possible, else kept as a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply_override(cfg: dict, key: str, value) -> None:
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node or isinstance(node[parts[-1]], dict):
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def load_config(path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            user = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        version = user.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"{path}: unsupported schema_version {version}")
        _merge(cfg, user)
    for item in overrides:
        apply_override(cfg, *parse_override(item))
    return cfg


def module_seed(cfg: dict, section: str) -> int:
    explicit = cfg[section].get("seed")
    return int(explicit) if explicit is not None else int(cfg["seed"]) + SEED_OFFSETS[section]


def _build(factory, **kw):
    try:
        return factory(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{factory.__name__}: {exc}") from exc


def dsp_config(cfg: dict) -> DspConfig:
    return _build(DspConfig, **cfg["dsp"])


def corpus_config(cfg: dict) -> CorpusConfig:
    c = dict(cfg["corpus"])
    c["words_per_utterance"] = tuple(c["words_per_utterance"])
    c["seed"] = module_seed(cfg, "corpus")
    return _build(CorpusConfig, **c)


def train_config(cfg: dict, mixture_fraction: Optional[float] = None) -> TrainConfig:
    c = dict(cfg["train"])
    c["seed"] = module_seed(cfg, "train")
    if mixture_fraction is not None:
        c["mixture_fraction"] = mixture_fraction
    return _build(TrainConfig, **c)


def attack_config(cfg: dict, section: Optional[dict] = None) -> AttackConfig:
    c = dict(cfg["attack"] if section is None else section)
    c["seed"] = module_seed(cfg, "attack") if c.get("seed") is None else int(c["seed"])
    if c.get("snr_bound_db") is not None:
        c["epsilon"] = None
    return _build(AttackConfig, **c)


def defense_config(cfg: dict, curve: Optional[ShapingCurve] = None, section: Optional[dict] = None) -> DefenseConfig:
    c = dict(cfg["defense"] if section is None else section)
    shaped = c.pop("shaped", True)
    c.pop("curve", None)
    c["seed"] = module_seed(cfg, "defense") if c.get("seed") is None else int(c["seed"])
    return _build(DefenseConfig, curve=curve if shaped else None, **c)


def scenario_from_dict(cfg: dict, d: dict, curve: Optional[ShapingCurve]) -> ScenarioConfig:
    """One entry of a scenario-matrix file.

    ``attack`` and ``defense`` are partial sections merged over the run
    config's own attack/defense sections; ``attack: null`` means benign.
    """
    known = {"name", "attack", "defense", "split", "sample_count", "setting", "straight_through"}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"unknown scenario keys {sorted(extra)}")
    defense_sec = dict(cfg["defense"])
    _merge(defense_sec, d.get("defense") or {}, "defense.")
    attack = None
    if d.get("attack") is not None:
        attack_sec = dict(cfg["attack"])
        _merge(attack_sec, d["attack"], "attack.")
        attack = attack_config(cfg, attack_sec)
    defense = defense_config(cfg, curve, defense_sec)
    ev = cfg["evaluate"]
    return _build(ScenarioConfig,
                  name=d.get("name") or f"{defense.label}:{'benign' if attack is None else attack.budget_label}",
                  defense=defense, attack=attack, split=d.get("split", "test"),
                  sample_count=int(d.get("sample_count", ev["sample_count"])),
                  setting=d.get("setting", ev["setting"]),
                  straight_through=d.get("straight_through", ev["straight_through"]))


def load_matrix(cfg: dict, path, curve: Optional[ShapingCurve]) -> list[ScenarioConfig]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"scenario matrix not found: {path}")
    try:
        entries = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(entries, list) or not entries:
        raise ConfigError(f"{path}: expected a non-empty JSON array of scenarios")
    return [scenario_from_dict(cfg, e, curve) for e in entries]


def describe_keys() -> str:
    flat = _flatten(DEFAULTS)
    width = max(len(k) for k in flat)
    return "\n".join(f"  {k:<{width}}  {KEY_HELP.get(k, '')} (default: {json.dumps(v)})" for k, v in flat.items())
