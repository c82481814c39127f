import json
import subprocess
import sys

import numpy as np
import pytest

from mdnf.asr import init_params, load_model, transcribe
from mdnf.audio import AudioBuffer, read_corpus, read_wav, write_wav
from mdnf.cli import main
from mdnf.defenses import ShapingCurve
from mdnf.dsp import DspConfig, mel_roundtrip

TINY = ["corpus.utterance_count=14", "split.train=8", "split.dev=3", "train.epochs=1",
        "curve.pairs=2", "attack.max_iter=3", "evaluate.sample_count=2", "evaluate.max_iter=2"]


def run(out, command, *overrides, flags=()):
    return main([command, "--output-dir", str(out), "--workers", "1", *flags, *TINY, *overrides])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run(out, "synth-data") == 0
    assert run(out, "train") == 0
    assert run(out, "estimate-curve") == 0
    return out


def test_synth_data_files(pipeline):
    manifest = pipeline / "corpus" / "manifest.json"
    entries = json.loads(manifest.read_text())
    assert len(entries) == 14 and len(list((pipeline / "corpus" / "wav").glob("*.wav"))) == 14
    assert len(read_corpus(manifest)) == 14


def test_synth_data_reproducible(tmp_path):
    args = ["corpus.utterance_count=10"]
    assert main(["synth-data", "--output-dir", str(tmp_path / "a"), *args]) == 0
    assert main(["synth-data", "--output-dir", str(tmp_path / "b"), *args]) == 0
    a, b = (tmp_path / d / "corpus" / "manifest.json" for d in "ab")
    assert len(json.loads(a.read_text())) == 10
    assert a.read_bytes() == b.read_bytes()
    for wav in (tmp_path / "a" / "corpus" / "wav").glob("*.wav"):
        assert wav.read_bytes() == (tmp_path / "b" / "corpus" / "wav" / wav.name).read_bytes()


def test_missing_config_exit_2(tmp_path, capsys):
    assert main(["synth-data", "--config", str(tmp_path / "absent.json"), "--output-dir", str(tmp_path)]) == 2
    assert "absent.json" in capsys.readouterr().err


def test_bad_override_exit_2(tmp_path):
    assert main(["synth-data", "--output-dir", str(tmp_path), "corpus.colour=red"]) == 2
    assert main(["synth-data", "--output-dir", str(tmp_path), "dsp.fft_size=100"]) == 2


def test_missing_inputs_exit_3(tmp_path):
    assert main(["train", "--output-dir", str(tmp_path)]) == 3
    assert main(["roundtrip", "--output-dir", str(tmp_path), "--wav", str(tmp_path / "no.wav")]) == 3


def test_train_outputs(pipeline):
    side = json.loads((pipeline / "models" / "defended.json").read_text())
    assert side["role"] == "defended" and side["train_config"]["mixture_fraction"] == 0.7
    assert side["dsp_digest"] == DspConfig().digest() and side["corpus_seed"] == 0
    clean = json.loads((pipeline / "models" / "clean.json").read_text())
    assert clean["train_config"]["mixture_fraction"] == 0.0
    assert np.isfinite(clean["dev_benign_wer"])


def test_train_zero_epochs_is_init(pipeline, tmp_path):
    import shutil
    shutil.copytree(pipeline / "corpus", tmp_path / "corpus")
    assert run(tmp_path, "train", "train.epochs=0", flags=("--which", "clean")) == 0
    m = load_model(tmp_path / "models" / "clean.ckpt")
    seed = int(np.random.default_rng(1).integers(2**32))
    ref = init_params(64, m.n_classes, 2, 128, seed)
    for k, p in ref.trainable().items():
        assert np.array_equal(m.trainable()[k], p)


def test_train_deterministic(pipeline, tmp_path):
    import shutil
    shutil.copytree(pipeline / "corpus", tmp_path / "corpus")
    assert run(tmp_path, "train", flags=("--which", "clean")) == 0
    assert (tmp_path / "models" / "clean.ckpt").read_bytes() == (pipeline / "models" / "clean.ckpt").read_bytes()


def test_curve_output(pipeline):
    curve = ShapingCurve.load_csv(pipeline / "curve.csv")
    assert len(curve) == 64 and abs(curve.weights.mean() - 1) < 1e-9
    assert (pipeline / "curve.png").stat().st_size > 0


def test_degenerate_curve_exit_4(pipeline, tmp_path):
    import shutil
    for d in ("corpus", "models"):
        shutil.copytree(pipeline / d, tmp_path / d)
    corpus = read_corpus(pipeline / "corpus" / "manifest.json")
    model = load_model(pipeline / "models" / "clean.ckpt")
    decoded = transcribe(model, corpus[8].audio, DspConfig())  # first dev utterance
    args = ["curve.pairs=1", "attack.snr_bound_db=20", "attack.targeted=true",
            f"attack.target_transcript={json.dumps(decoded)}"]
    assert run(tmp_path, "estimate-curve", *args) == 4


def test_attack_outputs(pipeline):
    assert run(pipeline, "attack", flags=("--index", "1")) == 0
    rec = json.loads(next((pipeline / "attacks").glob("*_pgd.json")).read_text())
    assert {"achieved_snr_db", "success", "iterations_used", "final_loss"} <= set(rec)
    wav = next((pipeline / "attacks").glob("*_pgd.wav"))
    corpus = read_corpus(pipeline / "corpus" / "manifest.json")
    delta = read_wav(wav).samples - corpus[12].audio.samples
    assert np.linalg.norm(delta) <= 1.5 + 2 * np.sqrt(delta.size) / 32768  # budget plus PCM rounding
    assert run(pipeline, "attack", "attack.eot_passes=2", flags=("--index", "0", "--adaptive")) == 0
    assert run(pipeline, "attack", flags=("--index", "99")) == 2


def test_evaluate_single_benign(pipeline, tmp_path, capsys):
    m = tmp_path / "m.json"
    m.write_text(json.dumps([{"name": "b", "attack": None, "defense": {"kind": "none"}}]))
    out = tmp_path / "ev"
    import shutil
    for d in ("corpus", "models"):
        shutil.copytree(pipeline / d, out / d)
    assert run(out, "evaluate", f"evaluate.matrix={m}") == 0
    table = capsys.readouterr().out.split("wrote")[0].strip().splitlines()
    assert len(table) == 2  # header + one row
    first = (out / "report.csv").read_bytes()
    assert len(first.splitlines()) == 2
    assert run(out, "evaluate", f"evaluate.matrix={m}") == 0
    assert (out / "report.csv").read_bytes() == first
    assert (out / "wer.png").stat().st_size > 0
    assert json.loads((out / "report.json").read_text())[0]["scenario"]["name"] == "b"


def test_evaluate_scenario_failure_exit_5(pipeline, tmp_path):
    m = tmp_path / "m.json"
    m.write_text(json.dumps([{"attack": {"snr_bound_db": 20, "epsilon": None, "targeted": True,
                                         "target_transcript": [1] * 500}, "defense": {"kind": "none"}}]))
    assert run(pipeline, "evaluate", f"evaluate.matrix={m}") == 5


def test_roundtrip_silent(pipeline, tmp_path, capsys):
    wav = tmp_path / "silence.wav"
    write_wav(wav, AudioBuffer(np.zeros(8000)))
    assert main(["roundtrip", "--output-dir", str(pipeline), "--wav", str(wav)]) == 0
    out = capsys.readouterr().out
    dev = float(out.split("deviation:")[1].split()[0])
    # the re-synthesised floor is a few-microvolt signal, so its log-mel stays within a hair of the floor
    assert 0 <= dev < 0.01 * abs(np.log(DspConfig().log_floor))
    traj = [float(v) for v in out.split("objective:")[1].splitlines()[0].split()]
    assert all(b <= a * (1 + 1e-8) for a, b in zip(traj, traj[1:]))
    assert (pipeline / "silence_gl.png").exists() and (pipeline / "silence_mel.png").exists()


def test_roundtrip_matches_library(pipeline, tmp_path, capsys):
    corpus = read_corpus(pipeline / "corpus" / "manifest.json")
    wav = tmp_path / "u.wav"
    write_wav(wav, corpus[0].audio)
    assert main(["roundtrip", "--output-dir", str(tmp_path), "--wav", str(wav)]) == 0
    out = capsys.readouterr().out
    dev = float(out.split("deviation:")[1].split()[0])
    expect = mel_roundtrip(read_wav(wav), DspConfig())[0]
    assert dev == float(f"{expect:.6g}")


def test_corrupt_checkpoint_exit_3(pipeline, tmp_path):
    import shutil
    for d in ("corpus", "models"):
        shutil.copytree(pipeline / d, tmp_path / d)
    ck = tmp_path / "models" / "clean.ckpt"
    ck.write_bytes(ck.read_bytes()[:100])
    assert run(tmp_path, "attack") == 3


def test_help_lists_keys():
    out = subprocess.run([sys.executable, "-m", "mdnf.cli", "evaluate", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for key in ("attack.epsilon", "defense.mdnf_sigma", "evaluate.matrix", "schema_version"):
        assert key in out.stdout
