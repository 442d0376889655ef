import numpy as np
import pytest

from feainf.synthdata import generate
from feainf.training import run_training

from .helpers import TINY_ENCODER, TINY_SYNTH, TINY_TRAIN


@pytest.fixture(scope="session")
def tiny_data():
    return generate(TINY_SYNTH)


@pytest.fixture(scope="session")
def tiny_trained(tiny_data):
    train, test = tiny_data
    model, history = run_training(train.images, train.labels, TINY_TRAIN, test.images, test.labels,
                                  encoder_config=TINY_ENCODER)
    return model, history


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def default_run():
    """Default synthetic data and the default 30-epoch model (about a minute on one core)."""
    import time

    from feainf.synthdata import SynthConfig
    from feainf.training import TrainConfig

    train, test = generate(SynthConfig())
    start = time.perf_counter()
    model, history = run_training(train.images, train.labels, TrainConfig(), test.images, test.labels)
    return {"train": train, "test": test, "model": model, "history": history,
            "seconds": time.perf_counter() - start}
