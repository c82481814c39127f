import json

import numpy as np
import pytest

from mdnf.config import (DEFAULTS, KEY_HELP, ConfigError, _flatten, attack_config, corpus_config, defense_config,
                         describe_keys, dsp_config, load_config, load_matrix, module_seed, parse_override,
                         train_config)
from mdnf.defenses import DEFAULT_MDNF_SIGMA, ShapingCurve


def test_defaults_build():
    cfg = load_config()
    assert dsp_config(cfg).n_mels == 64
    assert corpus_config(cfg).seed == 0
    tc = train_config(cfg)
    assert tc.seed == 1 and tc.mixture_fraction == 0.7 and tc.context == 2
    assert train_config(cfg, 0.0).mixture_fraction == 0.0
    a = attack_config(cfg)
    assert (a.norm, a.epsilon, a.seed) == ("l2", 1.5, 2)
    d = defense_config(cfg)
    assert d.kind == "mdnf" and d.mdnf_sigma == DEFAULT_MDNF_SIGMA and d.seed == 3 and d.curve is None


def test_every_key_documented():
    assert set(_flatten(DEFAULTS)) == set(KEY_HELP)
    text = describe_keys()
    assert all(k in text for k in KEY_HELP)


def test_overrides():
    assert parse_override("attack.epsilon=0.5") == ("attack.epsilon", 0.5)
    assert parse_override("defense.kind=none") == ("defense.kind", "none")
    assert parse_override("attack.target_transcript=[1,2]") == ("attack.target_transcript", [1, 2])
    cfg = load_config(None, ["seed=10", "train.seed=4", "attack.snr_bound_db=20", "attack.targeted=true"])
    assert module_seed(cfg, "corpus") == 10 and module_seed(cfg, "train") == 4 and module_seed(cfg, "defense") == 13
    a = attack_config(cfg)
    assert a.epsilon is None and a.snr_bound_db == 20 and a.seed == 12
    for bad in ("nokey", "attack.nope=1", "attack=1", "missing.key=1"):
        with pytest.raises(ConfigError):
            load_config(None, [bad])


def test_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="nope.json"):
        load_config(tmp_path / "nope.json")
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text(json.dumps({"schema_version": 2}))
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text(json.dumps({"dsp": {"bogus": 1}}))
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text(json.dumps({"dsp": 5}))
    with pytest.raises(ConfigError):
        load_config(p)


def test_file_merge(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"schema_version": 1, "dsp": {"n_mels": 32}, "defense": {"kind": "none"}}))
    cfg = load_config(p, ["dsp.hop=200"])
    assert cfg["dsp"]["n_mels"] == 32 and cfg["dsp"]["hop"] == 200 and cfg["dsp"]["frame_len"] == 400
    assert DEFAULTS["dsp"]["n_mels"] == 64  # defaults untouched


def test_invalid_values_become_config_errors():
    with pytest.raises(ConfigError):
        dsp_config(load_config(None, ["dsp.fft_size=500"]))
    with pytest.raises(ConfigError):
        attack_config(load_config(None, ["attack.norm=l1"]))
    with pytest.raises(ConfigError):
        defense_config(load_config(None, ["defense.kind=gan"]))
    with pytest.raises(ConfigError):
        train_config(load_config(None, ["train.learning_rate=0"]))


def test_matrix_file(tmp_path):
    cfg = load_config()
    curve = ShapingCurve.from_raw(np.ones(64))
    p = tmp_path / "m.json"
    p.write_text(json.dumps([
        {"name": "b", "attack": None, "defense": {"kind": "none"}, "sample_count": 3},
        {"attack": {"norm": "linf", "epsilon": 0.01}, "defense": {"kind": "mdnf", "mdnf_sigma": 0.3}},
    ]))
    scs = load_matrix(cfg, p, curve)
    assert scs[0].name == "b" and scs[0].attack is None and scs[0].sample_count == 3
    assert scs[1].name == "mdnf:linf/0.01" and scs[1].defense.mdnf_sigma == 0.3 and scs[1].defense.curve is curve
    assert scs[1].attack.seed == 2 and scs[1].sample_count == 100
    p.write_text(json.dumps([{"attack": None, "colour": 1}]))
    with pytest.raises(ConfigError):
        load_matrix(cfg, p, curve)
    p.write_text("[]")
    with pytest.raises(ConfigError):
        load_matrix(cfg, p, curve)
    with pytest.raises(ConfigError):
        load_matrix(cfg, tmp_path / "none.json", curve)
