import numpy as np
import pytest
from scipy.special import log_softmax

from mhrnnt.datagen import CorpusSpec
from mhrnnt.model import ModelConfig, init_model


def random_lattice(rng, T, L, V, scale=2.0):
    """Log-softmax lattice (T, L+1, V+1) and a random target of length L."""
    acts = rng.normal(scale=scale, size=(T, L + 1, V + 1))
    target = rng.integers(1, V + 1, size=L)
    return log_softmax(acts, axis=-1), target


def tiny_config(**kw):
    base = dict(vocab_size=4, feat_dim=3, enc_hidden=5, pred_hidden=4, embed_dim=3, joint_dim=6, dropout_rate=0.0, seed=0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return init_model(tiny_config())


@pytest.fixture
def small_spec():
    return CorpusSpec(utterance_count=12, vocab_size=5, feat_dim=4, min_len=2, max_len=4, seed=3)


CRITERIA = {}


@pytest.fixture
def criterion():
    """Record one acceptance line; the terminal summary prints them all."""

    def record(number, ok, detail):
        CRITERIA[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
