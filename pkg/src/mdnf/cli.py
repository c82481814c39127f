"""Command-line entry point: ``mdnf <subcommand> [--config FILE] [key=value ...]``.

Exit codes: 0 success, 2 config error, 3 I/O error, 4 degenerate curve
estimation, 5 scenario failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from mdnf import __version__
from mdnf.asr import load_model, save_model, train, train_config_dict, transcribe
from mdnf.attacks import run_attack
from mdnf.audio import WavError, read_corpus, read_wav, synth_corpus, write_corpus, write_wav
from mdnf.config import (ConfigError, attack_config, corpus_config, defense_config, describe_keys,
                         dsp_config, load_config, load_matrix, module_seed, train_config)
from mdnf.defenses import DefenseConfig, PerturbationPair, ShapingCurve, apply_defense, attack_transform, \
    estimate_shaping_curve
from mdnf.dsp import mel_roundtrip, mel_spectrogram
from mdnf.harness import (ModelSet, ScenarioError, default_matrix, emit_curve_plotdata, emit_report,
                          format_table, run_matrix, split_corpus, utterance_attack_config, wer)

log = logging.getLogger("mdnf")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DEGENERATE, EXIT_SCENARIO = 0, 2, 3, 4, 5


class DegenerateCurve(RuntimeError):
    pass


# --------------------------------------------------------------------------- helpers

def _out(args, rel) -> Path:
    p = Path(rel)
    return p if p.is_absolute() else Path(args.output_dir) / p


def _corpus(args, cfg):
    manifest = _out(args, cfg["paths"]["manifest"])
    if not manifest.is_file():
        raise FileNotFoundError(f"corpus manifest not found: {manifest} (run synth-data first)")
    corpus = read_corpus(manifest)
    return split_corpus(corpus, cfg["split"]["train"], cfg["split"]["dev"])


def _model(args, cfg, key):
    path = _out(args, cfg["paths"][key])
    if not path.is_file():
        raise FileNotFoundError(f"model checkpoint not found: {path} (run train first)")
    try:
        return load_model(path)
    except ValueError as exc:
        raise OSError(str(exc)) from exc


def _curve(args, cfg, required: bool):
    path = _out(args, cfg["paths"]["curve"])
    if path.is_file():
        return ShapingCurve.load_csv(path)
    if required:
        raise FileNotFoundError(f"shaping curve not found: {path} (run estimate-curve or set defense.shaped=false)")
    return None


def _vocab(splits) -> int:
    return 1 + max(max(u.transcript) for s in splits.values() for u in s if u.transcript)


# --------------------------------------------------------------------------- subcommands

def cmd_synth_data(args, cfg) -> int:
    dsp = dsp_config(cfg)
    corpus = synth_corpus(corpus_config(cfg), dsp)
    manifest = _out(args, cfg["paths"]["manifest"])
    write_corpus(corpus, manifest.parent)
    if manifest.name != "manifest.json":
        (manifest.parent / "manifest.json").replace(manifest)
    print(f"wrote {len(corpus)} utterances to {manifest}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    dsp = dsp_config(cfg)
    splits = _corpus(args, cfg)
    n_classes = 1 + _vocab(splits)
    which = ("clean", "defended") if args.which == "both" else (args.which,)
    for role in which:
        tc = train_config(cfg, 0.0 if role == "clean" else None)
        model = train(splits["train"], tc, dsp, n_classes=n_classes)
        path = _out(args, cfg["paths"][f"{role}_model"])
        path.parent.mkdir(parents=True, exist_ok=True)
        kind = "none" if role == "clean" else "mel_resynth"
        dev = splits["dev"]
        held_out = float(np.mean([wer(u.transcript, apply_defense(u.audio, DefenseConfig(kind), model, dsp))
                                  for u in dev])) if dev else float("nan")
        save_model(model, path, {
            "schema_version": cfg["schema_version"],
            "role": role,
            "train_config": train_config_dict(tc),
            "corpus_seed": module_seed(cfg, "corpus"),
            "dsp_digest": dsp.digest(),
            "dev_benign_wer": held_out,
        })
        print(f"{role}: wrote {path}; benign WER on {len(dev)} held-out utterances ({kind}): {held_out:.2f}%")
    return EXIT_OK


def cmd_estimate_curve(args, cfg) -> int:
    from mdnf.plotting import plot_shaping_curve

    dsp = dsp_config(cfg)
    splits = _corpus(args, cfg)
    model = _model(args, cfg, "clean_model")
    base = attack_config(cfg)
    utts = splits[cfg["curve"]["split"]][: int(cfg["curve"]["pairs"])]
    if not utts:
        raise ConfigError("curve.pairs must select at least one utterance")
    pairs = []
    for i, u in enumerate(utts):
        res = run_attack(model, u, utterance_attack_config(base, u, i, _vocab(splits)), dsp)
        pairs.append(PerturbationPair(u.audio, res.adversarial))
    try:
        curve = estimate_shaping_curve(pairs, dsp)
    except ValueError as exc:
        raise DegenerateCurve(f"no attack changed the mel spectrogram: {exc}") from exc
    path = _out(args, cfg["paths"]["curve"])
    path.parent.mkdir(parents=True, exist_ok=True)
    emit_curve_plotdata(curve, path)
    fig = plot_shaping_curve(curve, path.with_suffix(".png"), dsp)
    w = curve.weights
    print(f"curve from {len(pairs)} pairs ({base.budget_label}): min {w.min():.3f} max {w.max():.3f} "
          f"argmax bin {int(np.argmax(w))}; wrote {path} and {fig}")
    return EXIT_OK


def cmd_attack(args, cfg) -> int:
    dsp = dsp_config(cfg)
    splits = _corpus(args, cfg)
    utts = splits[args.split]
    if not 0 <= args.index < len(utts):
        raise ConfigError(f"--index {args.index} outside split {args.split!r} ({len(utts)} utterances)")
    u = utts[args.index]
    acfg = utterance_attack_config(attack_config(cfg), u, args.index, _vocab(splits))
    if args.adaptive:
        dcfg = defense_config(cfg, _curve(args, cfg, cfg["defense"]["shaped"] and cfg["defense"]["kind"] == "mdnf"))
        model = _model(args, cfg, "defended_model" if dcfg.kind in ("mel_resynth", "mdnf") else "clean_model")
        res = run_attack(model, u, acfg, dsp, attack_transform(dcfg, dsp, cfg["evaluate"]["straight_through"]))
    else:
        model = _model(args, cfg, "clean_model")
        res = run_attack(model, u, acfg, dsp)
    out_dir = _out(args, "attacks")
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{u.uid}_{acfg.method}"
    write_wav(out_dir / f"{stem}.wav", res.adversarial)
    record = dict(res.record(), attack=acfg.to_dict(), uid=u.uid, reference=list(u.transcript),
                  decoded=res.decoded, adaptive=bool(args.adaptive))
    if not np.isfinite(record["achieved_snr_db"]):
        record["achieved_snr_db"] = "inf"
    (out_dir / f"{stem}.json").write_text(json.dumps(record, indent=1) + "\n")
    print(f"{u.uid}: {acfg.budget_label} success={res.success} snr={res.achieved_snr_db:.2f} dB "
          f"decoded={res.decoded} reference={list(u.transcript)}; wrote {out_dir / stem}.wav")
    return EXIT_OK


def cmd_evaluate(args, cfg) -> int:
    from mdnf.plotting import plot_wer_matrix

    dsp = dsp_config(cfg)
    splits = _corpus(args, cfg)
    models = ModelSet(_model(args, cfg, "clean_model"), _model(args, cfg, "defended_model"))
    ev = cfg["evaluate"]
    if ev["matrix"]:
        curve = _curve(args, cfg, required=False)
        scenarios = load_matrix(cfg, ev["matrix"], curve)
    else:
        curve = _curve(args, cfg, required=cfg["defense"]["shaped"])
        scenarios = default_matrix(curve, int(ev["sample_count"]), int(ev["max_iter"]),
                                   float(cfg["defense"]["mdnf_sigma"]), ev["setting"],
                                   straight_through=ev["straight_through"], seed=module_seed(cfg, "attack"),
                                   defense_seed=module_seed(cfg, "defense"))

    def progress(rep):
        log.info("%s: WER %.1f%% (%d utterances, %.1fs)", rep.scenario.name, rep.mean_wer,
                 len(rep.records), rep.wall_seconds)

    reports = run_matrix(scenarios, models, splits, dsp, workers=args.workers, progress=progress)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    emit_report(reports, "csv", out / "report.csv")
    emit_report(reports, "json", out / "report.json")
    fig = plot_wer_matrix([r.aggregate_row() for r in reports], out / "wer.png")
    print(format_table(reports))
    print(f"wrote {out / 'report.csv'}, {out / 'report.json'} and {fig}")
    return EXIT_OK


def cmd_roundtrip(args, cfg) -> int:
    from mdnf.plotting import plot_gl_trajectory, plot_mel_pair

    dsp = dsp_config(cfg)
    audio = read_wav(args.wav)
    if audio.sample_rate != dsp.sample_rate:
        raise ConfigError(f"{args.wav}: sample rate {audio.sample_rate} != dsp.sample_rate {dsp.sample_rate}")
    deviation, traj, resynth = mel_roundtrip(audio, dsp)
    print(f"log-mel mean absolute deviation: {deviation:.6g}")
    print("Griffin-Lim objective: " + " ".join(f"{v:.6g}" for v in traj))
    for key in ("clean_model", "defended_model"):
        path = _out(args, cfg["paths"][key])
        if path.is_file():
            model = load_model(path)
            print(f"{key}: before {transcribe(model, audio, dsp)} after {transcribe(model, resynth, dsp)}")
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.wav).stem
    plot_gl_trajectory(traj, out / f"{stem}_gl.png")
    plot_mel_pair(mel_spectrogram(audio, dsp).values, mel_spectrogram(resynth, dsp).values,
                  out / f"{stem}_mel.png")
    return EXIT_OK


COMMANDS = {
    "synth-data": (cmd_synth_data, "synthesise the word corpus and its manifest"),
    "train": (cmd_train, "train the clean and mixture-trained recognizers"),
    "estimate-curve": (cmd_estimate_curve, "estimate the noise-shaping curve from attack pairs"),
    "attack": (cmd_attack, "attack one utterance and write the adversarial WAV + JSON record"),
    "evaluate": (cmd_evaluate, "run the attack x defense matrix and write CSV/JSON/PNG reports"),
    "roundtrip": (cmd_roundtrip, "inspect mel re-synthesis of one WAV"),
}


def build_parser() -> argparse.ArgumentParser:
    epilog = "config keys (set in the JSON file or as key=value overrides):\n" + describe_keys()
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (schema_version 1)")
    common.add_argument("--output-dir", default="run", help="run directory (default: ./run)")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                        help="worker processes for evaluation (default: all processors)")
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("overrides", nargs="*", metavar="key=value", help="dotted config overrides")

    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="mdnf", description=__doc__, epilog=epilog, formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}
    for name, (_, help_text) in COMMANDS.items():
        subs[name] = sub.add_parser(name, parents=[common], help=help_text, description=help_text,
                                    epilog=epilog, formatter_class=fmt)
    subs["train"].add_argument("--which", choices=("both", "clean", "defended"), default="both")
    subs["attack"].add_argument("--index", type=int, default=0, help="utterance index within the split")
    subs["attack"].add_argument("--split", choices=("train", "dev", "test"), default="test")
    subs["attack"].add_argument("--adaptive", action="store_true",
                                help="attack through the configured defense instead of the clean model")
    subs["roundtrip"].add_argument("--wav", required=True, help="input WAV file")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    fn = COMMANDS[args.command][0]
    try:
        cfg = load_config(args.config, args.overrides)
        dsp_config(cfg)  # validate early
        return fn(args, cfg)
    except ConfigError as exc:
        print(f"mdnf: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DegenerateCurve as exc:
        print(f"mdnf: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except ScenarioError as exc:
        print(f"mdnf: {exc}", file=sys.stderr)
        return EXIT_SCENARIO
    except (OSError, WavError) as exc:
        print(f"mdnf: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
