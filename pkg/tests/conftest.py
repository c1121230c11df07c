import numpy as np
import pytest

from supermix.classifier import Schedule, build_classifier, train_classifier
from supermix.data import SynthSpec, synth_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_data():
    """16x16 four-class shapes, small enough for second-scale training."""
    return synth_dataset(SynthSpec(height=16, width=16, n_train=240, n_test=120, seed=3))


@pytest.fixture(scope="session")
def small_teacher(small_data):
    train, _ = small_data
    model = build_classifier("mlp", train.image_shape, train.n_classes, rng=np.random.default_rng(0),
                             hidden=(32,))
    model, _ = train_classifier(model, train, Schedule(lr=0.02, epochs=25, milestones=(20,)),
                                np.random.default_rng(0))
    return model


def random_images(rng, k, h, w, c=3):
    return rng.uniform(0.0, 1.0, size=(k, h, w, c))
