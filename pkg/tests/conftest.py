import itertools

import numpy as np
import pytest

from gumbelcf.models import TableLm, Vocabulary


def make_vocab(size: int) -> Vocabulary:
    symbols = tuple(f"s{i}" for i in range(size - 1)) + ("<eos>",)
    return Vocabulary(symbols, size - 1)


def all_contexts(vocab_size: int, order: int):
    for length in range(order):
        yield from itertools.product(range(vocab_size), repeat=length)


def random_table_lm(rng, vocab_size=3, order=2, scale=1.0, backoff=False) -> TableLm:
    """Complete random table LM (every context has a row, so FSMs compile)."""
    vocab = make_vocab(vocab_size)
    rows = {ctx: rng.normal(size=vocab_size) * scale for ctx in all_contexts(vocab_size, order)}
    return TableLm(vocab, order, rows, backoff=backoff)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_lm(rng):
    return random_table_lm(rng, vocab_size=3, order=2)
