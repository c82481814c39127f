"""WER scoring and the attack x defense evaluation matrix."""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from mdnf.asr import ModelParams, transcribe
from mdnf.attacks import AttackConfig, AttackResult, run_attack
from mdnf.audio import Utterance
from mdnf.defenses import (DefenseConfig, ShapingCurve, apply_defense, attack_transform,
                           DEFAULT_MDNF_SIGMA)
from mdnf.dsp import DspConfig

SETTINGS = ("transfer", "adaptive")
SPLITS = ("train", "dev", "test")


# --------------------------------------------------------------------------- metrics

def edit_distance(reference: Sequence, hypothesis: Sequence) -> int:
    """Levenshtein distance with unit substitution, insertion and deletion costs."""
    prev = list(range(len(hypothesis) + 1))
    for i, r in enumerate(reference, 1):
        cur = [i]
        for j, h in enumerate(hypothesis, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h)))
        prev = cur
    return prev[-1]


def wer(reference: Sequence, hypothesis: Sequence) -> float:
    if len(reference) == 0:
        raise ValueError("WER needs a non-empty reference")
    return 100.0 * edit_distance(reference, hypothesis) / len(reference)


def target_wer(target: Sequence, hypothesis: Sequence) -> float:
    """WER against the attacker's target; high values mean the attack failed."""
    if len(target) == 0:
        raise ValueError("target WER needs a non-empty target")
    return wer(target, hypothesis)


# --------------------------------------------------------------------------- data model

@dataclass(frozen=True)
class ModelSet:
    """Recognizers used by the pipelines: ``clean`` for none/smoothing, ``defended`` for re-synthesis."""
    clean: ModelParams
    defended: ModelParams

    def for_defense(self, kind: str) -> ModelParams:
        return self.defended if kind in ("mel_resynth", "mdnf") else self.clean


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    attack: Optional[AttackConfig] = None
    split: str = "test"
    sample_count: int = 500
    setting: str = "transfer"
    straight_through: str = "mel"

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}")
        if self.setting not in SETTINGS:
            raise ValueError(f"setting must be one of {SETTINGS}")
        if self.straight_through not in ("mel", "waveform"):
            raise ValueError("straight_through must be 'mel' or 'waveform'")

    @property
    def attack_label(self) -> str:
        if self.attack is None:
            return "benign"
        if self.attack.method == "cw":
            return f"cw/{self.attack.epsilon:g}"
        return self.attack.budget_label

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "defense": self.defense.to_dict(),
            "attack": None if self.attack is None else self.attack.to_dict(),
            "split": self.split,
            "sample_count": self.sample_count,
            "setting": self.setting,
            "straight_through": self.straight_through,
        }


@dataclass
class UtteranceRecord:
    index: int
    uid: str
    reference: list[int]
    decoded: list[int]
    wer: float
    target: Optional[list[int]] = None
    target_wer: Optional[float] = None
    achieved_snr_db: Optional[float] = None
    delta_l2: float = 0.0
    delta_linf: float = 0.0
    attack_success: Optional[bool] = None
    iterations_used: int = 0
    max_abs_sample: float = 0.0

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        if d["achieved_snr_db"] is not None and not np.isfinite(d["achieved_snr_db"]):
            d["achieved_snr_db"] = "inf"
        return d


@dataclass
class EvalReport:
    scenario: ScenarioConfig
    records: list[UtteranceRecord]
    wall_seconds: float = 0.0

    @property
    def mean_wer(self) -> float:
        return float(np.mean([r.wer for r in self.records]))

    @property
    def mean_target_wer(self) -> Optional[float]:
        vals = [r.target_wer for r in self.records if r.target_wer is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def success_rate(self) -> Optional[float]:
        vals = [r.attack_success for r in self.records if r.attack_success is not None]
        return float(np.mean(vals)) if vals else None

    def aggregate_row(self) -> dict:
        s = self.scenario
        return {
            "scenario": s.name,
            "defense": s.defense.label,
            "attack": "benign" if s.attack is None else s.attack.method,
            "budget": s.attack_label,
            "setting": s.setting,
            "n": len(self.records),
            "mean_wer": self.mean_wer,
            "mean_target_wer": self.mean_target_wer,
            "success_rate": self.success_rate,
        }

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario.to_dict(),
            "aggregate": self.aggregate_row(),
            "wall_seconds": self.wall_seconds,
            "records": [r.to_dict() for r in self.records],
        }


class ScenarioError(RuntimeError):
    def __init__(self, scenario: str, index: int, cause: Exception):
        super().__init__(f"scenario {scenario!r} failed on utterance {index}: {cause!r}")
        self.scenario = scenario
        self.index = index


# --------------------------------------------------------------------------- execution

def split_corpus(corpus: Sequence[Utterance], train: int = 500, dev: int = 100) -> dict[str, list[Utterance]]:
    corpus = list(corpus)
    return {"train": corpus[:train], "dev": corpus[train : train + dev], "test": corpus[train + dev :]}


def derived_target(transcript: Sequence[int], vocabulary: int) -> tuple[int, ...]:
    """Default target for targeted attacks: every word shifted to the next vocabulary entry."""
    return tuple((int(t) + 1) % vocabulary for t in transcript)


def utterance_attack_config(attack: AttackConfig, utt: Utterance, index: int, vocabulary: int) -> AttackConfig:
    cfg = replace(attack, seed=attack.seed + index)
    if (attack.targeted or attack.method == "cw") and attack.target_transcript is None:
        cfg = replace(cfg, targeted=True, target_transcript=derived_target(utt.transcript, vocabulary))
    return cfg


def generate_attack(scenario: ScenarioConfig, models: ModelSet, utt: Utterance, index: int,
                    dsp: DspConfig) -> tuple[AttackConfig, AttackResult]:
    """Craft the adversarial example for one utterance under the scenario's attacker setting."""
    vocab = models.clean.n_classes - 1
    cfg = utterance_attack_config(scenario.attack, utt, index, vocab)
    if scenario.setting == "transfer":
        return cfg, run_attack(models.clean, utt, cfg, dsp)
    defense = replace(scenario.defense, seed=scenario.defense.seed + 7919 * (index + 1))
    model = models.for_defense(defense.kind)
    return cfg, run_attack(model, utt, cfg, dsp, attack_transform(defense, dsp, scenario.straight_through))


def _attack_key(scenario: ScenarioConfig):
    if scenario.attack is None or scenario.setting != "transfer":
        return None
    return (scenario.attack, scenario.split)


def evaluate_utterance(scenario: ScenarioConfig, models: ModelSet, utt: Utterance, index: int,
                       dsp: DspConfig, attack: Optional[tuple[AttackConfig, AttackResult]] = None) -> UtteranceRecord:
    x = utt.audio.samples
    cfg = result = None
    if scenario.attack is not None:
        cfg, result = attack if attack is not None else generate_attack(scenario, models, utt, index, dsp)
        audio = result.adversarial
    else:
        audio = utt.audio
    defense = replace(scenario.defense, seed=scenario.defense.seed + index)
    decoded = apply_defense(audio, defense, models.for_defense(defense.kind), dsp)
    rec = UtteranceRecord(index, utt.uid, list(utt.transcript), decoded, wer(utt.transcript, decoded))
    delta = audio.samples - x
    rec.delta_l2 = float(np.linalg.norm(delta))
    rec.delta_linf = float(np.max(np.abs(delta))) if delta.size else 0.0
    rec.max_abs_sample = float(np.max(np.abs(audio.samples)))
    if result is not None:
        rec.achieved_snr_db = result.achieved_snr_db
        rec.attack_success = result.success
        rec.iterations_used = result.iterations_used
        if cfg.target_transcript is not None:
            rec.target = list(cfg.target_transcript)
            rec.target_wer = target_wer(rec.target, decoded)
    return rec


def _evaluate_task(args):
    scenario, models, utt, index, dsp, attack = args
    try:
        return evaluate_utterance(scenario, models, utt, index, dsp, attack)
    except Exception as exc:  # surfaced with the failing index
        raise ScenarioError(scenario.name, index, exc) from exc


def _attack_task(args):
    scenario, models, utt, index, dsp = args
    try:
        return generate_attack(scenario, models, utt, index, dsp)
    except Exception as exc:
        raise ScenarioError(scenario.name, index, exc) from exc


def _map(fn, tasks, workers: int):
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * workers))))


def run_scenario(scenario: ScenarioConfig, models: ModelSet, corpus: Sequence[Utterance], dsp: DspConfig,
                 workers: int = 1, attack_cache: Optional[dict] = None) -> EvalReport:
    """Attack (unless benign), defend, decode and score ``sample_count`` utterances.

    ``corpus`` is the already-selected split. In the transfer setting the
    adversarial examples do not depend on the defense, so they are shared
    through ``attack_cache`` across scenarios with the same attack.
    """
    utts = list(corpus)[: scenario.sample_count]
    if not utts:
        raise ValueError(f"scenario {scenario.name!r}: no utterances in split {scenario.split!r}")
    start = time.perf_counter()
    attacks = [None] * len(utts)
    key = _attack_key(scenario)
    if key is not None:
        cached = attack_cache.get(key) if attack_cache is not None else None
        if cached is None or len(cached) < len(utts):
            cached = _map(_attack_task, [(scenario, models, u, i, dsp) for i, u in enumerate(utts)], workers)
            if attack_cache is not None:
                attack_cache[key] = cached
        attacks = cached[: len(utts)]
    tasks = [(scenario, models, u, i, dsp, attacks[i]) for i, u in enumerate(utts)]
    records = _map(_evaluate_task, tasks, workers)
    return EvalReport(scenario, records, time.perf_counter() - start)


def run_matrix(scenarios: Sequence[ScenarioConfig], models: ModelSet, splits: dict, dsp: DspConfig,
               workers: int = 1, progress=None) -> list[EvalReport]:
    cache: dict = {}
    reports = []
    for sc in scenarios:
        rep = run_scenario(sc, models, splits[sc.split], dsp, workers, cache)
        reports.append(rep)
        if progress is not None:
            progress(rep)
    return reports


# --------------------------------------------------------------------------- default matrix

UNTARGETED_BUDGETS = (("l2", 1.5), ("l2", 1.0), ("l2", 0.5), ("linf", 0.01), ("linf", 0.005))
TARGETED_SNRS = (20.0, 30.0, 40.0)


def default_attacks(max_iter: int = 100, seed: int = 2) -> list[AttackConfig]:
    attacks = [AttackConfig(norm=n, epsilon=e, max_iter=max_iter, seed=seed) for n, e in UNTARGETED_BUDGETS]
    attacks += [AttackConfig(norm="linf", snr_bound_db=s, targeted=True, max_iter=max_iter, seed=seed)
                for s in TARGETED_SNRS]
    attacks.append(AttackConfig(norm="linf", method="cw", epsilon=0.01, epsilon_step=1e-4, max_iter=400,
                                targeted=True, seed=seed))
    return attacks


def default_defenses(curve: Optional[ShapingCurve], sigma: float = DEFAULT_MDNF_SIGMA,
                     seed: int = 3) -> list[DefenseConfig]:
    return [
        DefenseConfig("none", seed=seed),
        DefenseConfig("randomized_smoothing", seed=seed),
        DefenseConfig("mel_resynth", seed=seed),
        DefenseConfig("mdnf", mdnf_sigma=sigma, curve=curve, seed=seed),
    ]


def default_matrix(curve: Optional[ShapingCurve], sample_count: int = 500, max_iter: int = 100,
                   sigma: float = DEFAULT_MDNF_SIGMA, setting: str = "transfer",
                   include_benign: bool = True, straight_through: str = "mel",
                   seed: int = 2, defense_seed: int = 3) -> list[ScenarioConfig]:
    """Benign + 5 untargeted + 3 SNR-bounded targeted + 1 CW scenario for each default defense."""
    scenarios = []
    for d in default_defenses(curve, sigma, defense_seed):
        if include_benign:
            scenarios.append(ScenarioConfig(f"{d.label}:benign", d, None, "test", sample_count, setting,
                                            straight_through))
        for a in default_attacks(max_iter, seed):
            sc = ScenarioConfig("", d, a, "test", sample_count, setting, straight_through)
            scenarios.append(replace(sc, name=f"{d.label}:{sc.attack_label}"))
    return scenarios


SIGMA_GRID = tuple(round(0.1 * k, 1) for k in range(11))


def tune_sigma(models: ModelSet, dev: Sequence[Utterance], dsp: DspConfig, curve: Optional[ShapingCurve],
               grid: Sequence[float] = SIGMA_GRID, max_cost: float = 5.0, seed: int = 3) -> tuple[float, dict]:
    """Largest flooding sigma whose benign dev WER stays within ``max_cost`` points of the undefended one.

    Returns ``(sigma, {sigma: benign WER})``; the sweep stops at the first
    sigma over budget since the cost grows with sigma.
    """
    base = run_scenario(ScenarioConfig("tune:none", DefenseConfig("none", seed=seed), None, "dev", len(dev)),
                        models, dev, dsp).mean_wer
    best, table = 0.0, {}
    for s in sorted(grid):
        d = DefenseConfig("mdnf", mdnf_sigma=s, curve=curve, seed=seed)
        table[s] = run_scenario(ScenarioConfig(f"tune:{s}", d, None, "dev", len(dev)), models, dev, dsp).mean_wer
        if table[s] - base > max_cost:
            break
        best = s
    return best, table


# --------------------------------------------------------------------------- reports

CSV_COLUMNS = ("scenario", "defense", "attack", "budget", "setting", "n",
               "mean_wer", "mean_target_wer", "success_rate")


def emit_report(reports, fmt: str, path) -> None:
    """Write an aggregate CSV table or the full JSON (config + per-utterance records)."""
    if isinstance(reports, EvalReport):
        reports = [reports]
    path = Path(path)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for rep in reports:
                row = rep.aggregate_row()
                writer.writerow(["" if row[c] is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                                 for c in CSV_COLUMNS])
    elif fmt == "json":
        path.write_text(json.dumps([r.to_dict() for r in reports], indent=1) + "\n")
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def read_report_csv(path) -> list[dict]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            for c in ("mean_wer", "mean_target_wer", "success_rate"):
                row[c] = float(row[c]) if row[c] else None
            row["n"] = int(row["n"])
            out.append(row)
    return out


def emit_curve_plotdata(curve: ShapingCurve, path) -> None:
    curve.save_csv(path)


def format_table(reports: Sequence[EvalReport]) -> str:
    lines = [f"{'defense':<22}{'attack':<14}{'WER%':>8}{'tWER%':>8}{'succ':>7}"]
    for rep in reports:
        row = rep.aggregate_row()
        twer = "" if row["mean_target_wer"] is None else f"{row['mean_target_wer']:.1f}"
        succ = "" if row["success_rate"] is None else f"{row['success_rate']:.2f}"
        lines.append(f"{row['defense']:<22}{row['budget']:<14}{row['mean_wer']:>8.1f}{twer:>8}{succ:>7}")
    return "\n".join(lines)
