import numpy as np
import pytest

from data import build_vocab, collate, make_synthetic
from transformer import ModelConfig, init_model_params


@pytest.fixture
def tiny_config():
    """N=1, d_model=8, 2 головы, V=12, dropout выключен"""
    return ModelConfig(
        src_vocab_size=12,
        tgt_vocab_size=12,
        d_model=8,
        d_ffn=16,
        n_heads=2,
        n_layers=1,
        dropout=0.0,
    )


@pytest.fixture
def make_params(tiny_config):
    def factory(variant="model2", seed=0, **overrides):
        config = tiny_config
        if overrides:
            config = ModelConfig(**{**tiny_config.to_dict(), **overrides})
        return init_model_params(config, variant, seed)

    return factory


@pytest.fixture
def copy_pairs():
    return make_synthetic("copy", 40, (2, 6), 8, seed=3)


@pytest.fixture
def copy_vocab(copy_pairs):
    return build_vocab([p.source for p in copy_pairs])


@pytest.fixture
def tiny_batch(copy_pairs, copy_vocab):
    """Батч из 4 пар разной длины для словаря из 12 токенов"""
    return collate(copy_pairs[:4], copy_vocab, copy_vocab)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
