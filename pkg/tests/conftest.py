import numpy as np
import pytest

from collabrep.dataset import LabeledDataset, SynthSpec, split, synth_gaussian


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def benchmark_data():
    """The separable synthetic benchmark (5 classes, d=50, 20 per class)."""
    return synth_gaussian(SynthSpec(5, 50, 20, 8.0, seed=0))


@pytest.fixture(scope="session")
def benchmark_split(benchmark_data):
    return split(benchmark_data, 10, seed=0)


def random_dataset(rng, d=6, sizes=(4, 3, 5)):
    labels = np.concatenate([np.full(k, i + 1) for i, k in enumerate(sizes)])
    rng.shuffle(labels)
    return LabeledDataset(rng.standard_normal((d, labels.size)), labels)
