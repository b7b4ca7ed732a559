import numpy as np
import pytest

from imgsteer.corpus import generate_behavior_corpus
from imgsteer.model import ModelConfig, build_model, plant_behavior, random_direction
from imgsteer.preprocess import CLIP_LIKE, PreprocessSpec

SMALL_PRE = PreprocessSpec(32, 32)


def small_config(seed=0, **kw):
    base = dict(name=f"small{seed}", seed=seed, patch_size=8, lm_layers=3, hidden_dim=32,
                visual_token_count=4, preprocess=SMALL_PRE)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def small_model():
    return build_model(small_config(0))


@pytest.fixture(scope="session")
def planted_small():
    m = build_model(small_config(1))
    return plant_behavior(m, 1, random_direction(32, 5), coupling=4.0, write_scale=0.05)


@pytest.fixture(scope="session")
def refusal_split():
    return generate_behavior_corpus("refusal", seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


@pytest.fixture(scope="session")
def clip_model():
    return build_model(ModelConfig(name="clipish", seed=3, patch_size=14, preprocess=CLIP_LIKE))
