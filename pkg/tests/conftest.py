"""Shared models. Trained ones are built once per session."""

import pytest
import torch

from sdsat.data import code_corpus, markov_corpus, periodic_corpus
from sdsat.model import ModelConfig, init_model
from sdsat.tokenizer import ByteTokenizer
from sdsat.training import Corpus, TrainConfig, train

torch.set_num_threads(1)

TOKENIZER = ByteTokenizer(n_adaptive=4)


def byte_config(seed: int, **kw) -> ModelConfig:
    base = dict(vocab_size=TOKENIZER.vocab_size, n_adaptive=4, n_layers=2, n_heads=4,
                d_model=64, max_seq=128, seed=seed)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def tokenizer():
    return TOKENIZER


@pytest.fixture(scope="session")
def periodic_docs():
    return periodic_corpus()


@pytest.fixture(scope="session")
def periodic_model(periodic_docs):
    """Near-deterministic task: every document repeats one short word."""
    model = init_model(byte_config(seed=7))
    corpus = Corpus(texts=periodic_docs, tokenizer=TOKENIZER)
    train(model, corpus, TrainConfig(steps=400, batch_size=16, seq_len=100, L=5, seed=1))
    return model


@pytest.fixture(scope="session")
def code_docs():
    return code_corpus()


@pytest.fixture(scope="session")
def code_model(code_docs):
    """Templated code snippets: predictable syntax, random names and constants."""
    model = init_model(byte_config(seed=3))
    corpus = Corpus(texts=code_docs, tokenizer=TOKENIZER, fim_rate=0.5)
    train(model, corpus, TrainConfig(steps=800, batch_size=16, seq_len=112, L=5, seed=2))
    return model


@pytest.fixture(scope="session")
def markov8_model():
    """Eight-id vocabulary (seven standard ids plus one adaptive id)."""
    cfg = ModelConfig(vocab_size=8, n_adaptive=1, n_layers=2, n_heads=2, d_model=32,
                      max_seq=32, seed=5)
    model = init_model(cfg)
    corpus = Corpus(sequences=markov_corpus(7, n_seqs=300, length=24, seed=4))
    train(model, corpus, TrainConfig(steps=300, batch_size=16, seq_len=24, L=3, seed=3))
    return model


@pytest.fixture(scope="session")
def untrained_model():
    return init_model(byte_config(seed=1))
