import numpy as np
import pytest

from streams.backbone import BackboneConfig, TwoStreamBackbone
from utils.attributes import AttributeSchema
from utils.dataset import ReIDDataset
from utils.synthetic import SyntheticSpec, generate_synthetic

TINY_SHAPE = (3, 32, 16)
TINY_STAGES = ((8, 2), (8, 2))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_schema():
    return AttributeSchema((("gender", 2), ("upper_color", 3), ("bag", 1)))


@pytest.fixture
def tiny_spec():
    return SyntheticSpec(id_count=6, images_per_id_per_platform=2, image_size=TINY_SHAPE[1:],
                         noise_level=0.02, seed=3)


@pytest.fixture
def tiny_synthetic(tiny_spec):
    return generate_synthetic(tiny_spec, AttributeSchema.default())


@pytest.fixture
def tiny_dataset(tiny_synthetic):
    return ReIDDataset.from_arrays(tiny_synthetic.manifest, tiny_synthetic.schema, tiny_synthetic.images)


@pytest.fixture
def tiny_backbone():
    return TwoStreamBackbone(BackboneConfig(stages=TINY_STAGES, input_shape=TINY_SHAPE, id_count=6, seed=5))
