import numpy as np
import pytest

from transact.config import ModelConfig
from transact.toy import TOY_CONFIG, init_random_model, markov_corpus, train_toy_model


@pytest.fixture(scope="session")
def tiny_cfg() -> ModelConfig:
    return ModelConfig(
        n_layers=2, hidden_dim=64, n_heads=4, head_dim=16,
        mlp_dim=128, vocab_size=64, max_seq_len=256,
    )


@pytest.fixture(scope="session")
def tiny_model(tiny_cfg):
    return init_random_model(tiny_cfg, seed=0)


@pytest.fixture(scope="session")
def toy_corpus():
    return markov_corpus(TOY_CONFIG.vocab_size, 60_000, seed=0)


@pytest.fixture(scope="session")
def trained_model(toy_corpus):
    # One training run shared by the whole session (~1 min).
    return train_toy_model(TOY_CONFIG, toy_corpus[:50_000], steps=300, seed=0)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
