import numpy as np
import pytest

from hvt.models import InterpolatedModel, SoftmaxModel, TableModel, random_table_model


@pytest.fixture
def order0():
    return TableModel(3, None, 0, [0.5, 0.3, 0.2])


@pytest.fixture
def softmax8():
    return SoftmaxModel(8, None, 42, embed_dim=4, temperature=1.0, order=2)


@pytest.fixture
def model_pair():
    p = SoftmaxModel(6, 5, 11, embed_dim=4, temperature=0.8)
    return p, InterpolatedModel(SoftmaxModel(6, 5, 11, embed_dim=4, temperature=0.8), 0.3)


def random_pair(seed, vocab=4, order=1, eos=None):
    """Independent random table models sharing a vocabulary."""
    rng = np.random.default_rng(seed)
    p = random_table_model(vocab, int(rng.integers(1 << 30)), order=order, eos=eos)
    q = random_table_model(vocab, int(rng.integers(1 << 30)), order=order, eos=eos)
    return p, q
