"""Shared fixtures: a small synthetic speaker corpus and untrained models."""

import numpy as np
import pytest
import torch

from hiresdiar import HeeModel, ModelConfig, synthetic_corpus


@pytest.fixture(scope="session")
def corpus_and_voices():
    return synthetic_corpus(n_speakers=4, utterances_per_speaker=3, seed=11)


@pytest.fixture(scope="session")
def tiny_corpus(corpus_and_voices):
    return corpus_and_voices[0]


@pytest.fixture(scope="session")
def voices(corpus_and_voices):
    return corpus_and_voices[1]


@pytest.fixture(scope="session")
def small_model_config():
    return ModelConfig(n_mels=64, d_model=32, n_enhancer_blocks=2, n_heads=4)


@pytest.fixture(scope="session")
def small_model(small_model_config):
    torch.manual_seed(0)
    model = HeeModel(small_model_config)
    model.eval()
    return model


@pytest.fixture()
def rng():
    return np.random.default_rng(42)
