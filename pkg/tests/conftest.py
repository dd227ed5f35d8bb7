import numpy as np
import pytest

from sml_ctr.data import SyntheticSpec, encode_records, split_811, synthesize
from sml_ctr.network import ModelConfig, SkipLogitModel
from sml_ctr.numerics import RngState


@pytest.fixture
def rng() -> RngState:
    return RngState(1234)


@pytest.fixture(scope="session")
def small_spec() -> SyntheticSpec:
    return SyntheticSpec(
        field_count=4,
        vocab_size=30,
        continuous_count=2,
        truth_dim=3,
        interaction_count=3,
        linear_scale=1.5,
        interaction_scale=1.0,
        bias=-0.5,
        sample_count=3000,
        seed=7,
    )


@pytest.fixture(scope="session")
def small_dataset(small_spec):
    return synthesize(small_spec)


@pytest.fixture(scope="session")
def small_splits(small_spec, small_dataset):
    batch = encode_records(small_dataset.records, small_spec.schema())
    return split_811(batch, seed=0)


def tiny_config(skip: str = "meta_tanh", **overrides) -> ModelConfig:
    base = dict(
        embedding_dim=3,
        vocab_sizes=[5, 7],
        continuous_count=2,
        tower_widths=[8, 8, 8],
        skip=skip,
        seed=3,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny_batch():
    g = np.random.default_rng(11)
    categorical = np.stack([g.integers(0, 5, 16), g.integers(0, 7, 16)], axis=1)
    continuous = g.normal(size=(16, 2))
    labels = (g.random(16) < 0.5).astype(np.float64)
    labels[:2] = [0.0, 1.0]
    return categorical, continuous, labels


@pytest.fixture
def small_model_config(small_spec) -> ModelConfig:
    schema = small_spec.schema()
    return ModelConfig(
        embedding_dim=4,
        vocab_sizes=schema.buckets,
        continuous_count=schema.continuous_count,
        tower_widths=[16, 16],
        seed=0,
    )


@pytest.fixture
def small_model(small_model_config) -> SkipLogitModel:
    return SkipLogitModel.initialize(small_model_config)
