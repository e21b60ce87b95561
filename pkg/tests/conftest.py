import numpy as np
import pytest
import torch

from dqdata2vec.backbone import ModelConfig
from dqdata2vec.model import DQData2vec, QuantizerConfig
from dqdata2vec.synthdata import CorpusSpec, generate_corpus

torch.set_num_threads(1)

# Criterion results collected by test_acceptance.py, printed after the run.
ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def tiny_model_config(**overrides):
    """A backbone small enough for finite differences (a few thousand parameters)."""
    cfg = dict(feature_dim=3, conv_layers=[(4, 2, 2)], num_layers=2, model_dim=4, inner_dim=8, heads=1,
               top_k=2, y_l_layers=[1], y_p_layers=[2], pos_conv_kernel=3, pos_conv_groups=2,
               mask_prob=0.5, mask_span=2)
    cfg.update(overrides)
    return ModelConfig(**cfg)


@pytest.fixture
def tiny_spec():
    return CorpusSpec(num_languages=2, num_phonemes=3, hours_per_language=[0.06, 0.04], utterances_per_hour=100,
                      frames_per_utterance=(12, 20), feature_dim=3, phoneme_span=(2, 4), seed=3)


@pytest.fixture
def tiny_corpus(tiny_spec):
    return generate_corpus(tiny_spec)


@pytest.fixture
def small_spec():
    return CorpusSpec(num_languages=2, num_phonemes=4, hours_per_language=[0.2, 0.1], utterances_per_hour=100,
                      frames_per_utterance=(24, 40), feature_dim=8, phoneme_span=(3, 6), seed=1)


@pytest.fixture
def small_model_config():
    return ModelConfig(feature_dim=8, conv_layers=[(16, 2, 2), (16, 2, 2)], num_layers=4, model_dim=16,
                       inner_dim=32, heads=2, top_k=2, y_l_layers=[1, 2], y_p_layers=[3],
                       pos_conv_kernel=3, pos_conv_groups=2)


@pytest.fixture
def tiny_model(tiny_spec):
    return DQData2vec(tiny_model_config(), QuantizerConfig(), tiny_spec.num_languages, tiny_spec.num_phonemes,
                      "deep", seed=0).double()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
