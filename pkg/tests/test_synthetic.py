import hashlib
from pathlib import Path

import numpy as np
import pytest

from utils.attributes import AttributeSchema
from utils.dataset import load_image, load_manifest, split_protocol
from utils.errors import InvalidParam
from utils.synthetic import (AerialTransform, SyntheticSpec, band_rows, generate_synthetic, image_seeds,
                             render_person, splitmix64, synthesize_image, write_synthetic)


def tree_digest(directory: Path) -> str:
    digest = hashlib.sha256()
    for path in sorted(directory.rglob("*")):
        if path.is_file():
            digest.update(str(path.relative_to(directory)).encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


def test_splitmix64_reference_value():
    # first output of splitmix64 seeded with 0
    _, value = splitmix64(0)
    assert value == 0xE220A8397B1DCDAF


def test_image_seeds_are_a_chain():
    assert image_seeds(7, 3)[:2] == image_seeds(7, 2)
    assert len(set(image_seeds(7, 50))) == 50


def test_dataset_shape(tiny_synthetic, tiny_spec):
    records = tiny_synthetic.manifest.records
    assert len(records) == tiny_spec.id_count * 2 * tiny_spec.images_per_id_per_platform
    assert records["person_id"].nunique() == 6
    assert set(records["platform"]) == {"aerial", "ground"}
    assert records["image_id"].iloc[0] == "0000_a00"
    image = tiny_synthetic.images["0000_g01"]
    assert image.shape == (3, 32, 16)
    assert image.min() >= 0.0 and image.max() <= 1.0


def test_identities_have_distinct_attributes(tiny_synthetic):
    raws = list(tiny_synthetic.manifest.attribute_table.values())
    assert len(set(raws)) == len(raws)


def test_seed_determinism(tiny_spec):
    schema = AttributeSchema.default()
    a = generate_synthetic(tiny_spec, schema, threads=1)
    b = generate_synthetic(tiny_spec, schema, threads=3)
    assert a.manifest.attribute_table == b.manifest.attribute_table
    for image_id, image in a.images.items():
        assert image.tobytes() == b.images[image_id].tobytes()


def test_noiseless_same_seed_is_identical():
    spec = SyntheticSpec(noise_level=0.0)
    values = {"upper_color": 3, "lower_color": 5}
    first = synthesize_image(values, "ground", spec, 1234)
    second = synthesize_image(values, "ground", spec, 1234)
    assert first.tobytes() == second.tobytes()


def test_torso_colour_only_changes_torso_band():
    size = (64, 32)
    base = {name: 1 for name in ("gender", "age_group", "hair_color", "lower_color", "shoe_color")}
    a = render_person({**base, "upper_color": 0}, size, 99)
    b = render_person({**base, "upper_color": 5}, size, 99)
    changed_rows = np.flatnonzero(np.any(a != b, axis=(0, 2)))
    torso = band_rows(64, "torso")
    assert len(changed_rows) > 0
    assert changed_rows.min() >= torso.start and changed_rows.max() < torso.stop


@pytest.mark.parametrize("noise", [0.05, 0.1])
def test_torso_colour_is_recoverable_by_nearest_centroid(noise):
    schema = AttributeSchema.default()
    spec = SyntheticSpec(id_count=96, images_per_id_per_platform=2, noise_level=noise, seed=11)
    dataset = generate_synthetic(spec, schema)
    column = schema.names.index("upper_color")
    torso = band_rows(spec.image_size[0], "torso")
    mid = spec.image_size[1] // 2
    ground = dataset.manifest.records[dataset.manifest.records["platform"] == "ground"]
    features = np.stack([dataset.images[i][:, torso, mid - 3:mid + 3].mean(axis=(1, 2)) for i in ground["image_id"]])
    labels = np.array([dataset.manifest.attribute_table[pid][column] for pid in ground["person_id"]])
    train = ground["frame_index"].to_numpy() == 0
    classes = np.unique(labels[train])
    centroids = np.stack([features[train & (labels == c)].mean(axis=0) for c in classes])
    nearest = np.argmin(((features[~train][:, None, :] - centroids[None]) ** 2).sum(axis=-1), axis=1)
    assert np.mean(classes[nearest] == labels[~train]) > 0.9


def test_aerial_view_differs_from_ground():
    spec = SyntheticSpec(noise_level=0.0)
    ground = synthesize_image({"upper_color": 2}, "ground", spec, 5)
    aerial = synthesize_image({"upper_color": 2}, "aerial", spec, 5)
    assert ground.shape == aerial.shape
    assert not np.allclose(ground, aerial)


@pytest.mark.parametrize("kwargs", [
    {"id_count": 1},
    {"image_size": (16, 16)},
    {"noise_level": 1.5},
    {"image_format": "jpg"},
    {"cameras_per_platform": 0},
])
def test_invalid_spec(kwargs):
    with pytest.raises(InvalidParam):
        SyntheticSpec(**kwargs)


def test_invalid_aerial_transform():
    with pytest.raises(InvalidParam):
        AerialTransform(downscale=0.0)


def test_custom_schema_renders(small_schema):
    spec = SyntheticSpec(id_count=3, images_per_id_per_platform=1, image_size=(32, 16), seed=1)
    dataset = generate_synthetic(spec, small_schema)
    assert len(dataset.images) == 6
    assert all(len(raw) == 3 for raw in dataset.manifest.attribute_table.values())


@pytest.mark.parametrize("image_format", ["png", "atrt"])
def test_written_dataset_loads(tmp_path, image_format):
    spec = SyntheticSpec(id_count=4, images_per_id_per_platform=2, image_size=(32, 16), seed=2,
                         image_format=image_format, cameras_per_platform=2)
    dataset = generate_synthetic(spec, AttributeSchema.default())
    manifest_path = write_synthetic(dataset, tmp_path)
    manifest = load_manifest(manifest_path)
    assert len(manifest) == 16
    assert set(manifest.records["camera_id"]) == {"A0", "A1", "G0", "G1"}
    assert manifest.exclusions == ()
    image = load_image(manifest.image_path("0001_g01"))
    tolerance = 0.0 if image_format == "atrt" else 0.5 / 255 + 1e-12
    np.testing.assert_allclose(image, dataset.images["0001_g01"], atol=tolerance)
    split_protocol(manifest, 0.5, seed=0)


def test_written_tree_is_reproducible(tmp_path):
    spec = SyntheticSpec(id_count=3, images_per_id_per_platform=1, image_size=(32, 16), seed=7)
    for name in ("a", "b"):
        write_synthetic(generate_synthetic(spec, AttributeSchema.default()), tmp_path / name)
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
