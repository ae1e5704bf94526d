import numpy as np
import pytest

from safelab import demos, env, seeding
from safelab.models import ModelConfig, train_offline


SMALL_MODELS = ModelConfig(dyn_members=3, dyn_hidden=(32, 32), value_members=2,
                           value_hidden=(32, 32), classifier_hidden=(32, 32),
                           dyn_epochs=10, value_epochs=10, safe_epochs=10,
                           classifier_epochs=10, online_steps=20)


@pytest.fixture(scope="session")
def spb():
    return env.spb_config()


@pytest.fixture(scope="session")
def spb_demos(spb):
    return demos.generate_demos(spb, 20, 20, seed=0)


@pytest.fixture(scope="session")
def small_bundle(spb_demos):
    bundle, _ = train_offline(spb_demos, SMALL_MODELS, seeding.rng(0, "test-offline"))
    return bundle


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
