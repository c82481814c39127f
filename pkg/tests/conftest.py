import numpy as np
import pytest

from mdnf.asr import TrainConfig, init_params, train
from mdnf.attacks import AttackConfig, pgd
from mdnf.audio import CorpusConfig, synth_corpus
from mdnf.defenses import PerturbationPair, estimate_shaping_curve
from mdnf.dsp import DspConfig
from mdnf.harness import ModelSet, split_corpus


class Trained:
    """Default-size corpus, both recognizers and the estimated shaping curve."""

    def __init__(self):
        self.dsp = DspConfig()
        self.corpus = synth_corpus(CorpusConfig(), self.dsp)
        self.splits = split_corpus(self.corpus)
        self.clean = train(self.splits["train"], TrainConfig(mixture_fraction=0.0), self.dsp, n_classes=11)
        self.defended = train(self.splits["train"], TrainConfig(), self.dsp, n_classes=11)
        self.models = ModelSet(self.clean, self.defended)
        pairs = []
        for i, u in enumerate(self.splits["dev"]):
            res = pgd(self.clean, u, AttackConfig(norm="l2", epsilon=1.5, seed=2 + i), self.dsp)
            pairs.append(PerturbationPair(u.audio, res.adversarial))
        self.pairs = pairs
        self.curve = estimate_shaping_curve(pairs, self.dsp)


@pytest.fixture(scope="session")
def dsp():
    return DspConfig()


@pytest.fixture(scope="session")
def small_corpus(dsp):
    return synth_corpus(CorpusConfig(utterance_count=12, seed=5), dsp)


@pytest.fixture(scope="session")
def random_model(dsp):
    """Untrained but non-degenerate recognizer for gradient and attack plumbing tests."""
    m = init_params(dsp.n_mels, 11, 2, 16, seed=7)
    rng = np.random.default_rng(8)
    m.w1 *= 10
    m.w2 *= 10
    m.feat_mean = rng.normal(-5, 1, dsp.n_mels)
    m.feat_std = rng.uniform(1, 3, dsp.n_mels)
    return m


@pytest.fixture(scope="session")
def trained():
    return Trained()


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
