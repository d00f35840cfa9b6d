import numpy as np
import pandas as pd
import pytest

from streams.adh import AttentionMaps, AttributeDecomposeHead, adh_forward, attribute_feature_maps, export_attention
from streams.backbone import FeatureMap
from utils.errors import ConfigError, InvalidParam, ShapeMismatch
from utils.tensor import ActivationParams, Tensor, grad_check
from utils.tensor_io import load_tensor

ACTIVATION = ActivationParams(K=0.5, T=1.0)


def test_output_shape_for_88_attributes(rng):
    head = AttributeDecomposeHead(64, 88, ACTIVATION, seed=0, init="random")
    maps = head.forward(FeatureMap(Tensor(rng.normal(size=(64, 8, 4)))))
    assert maps.values.shape == (88, 8, 4)
    assert np.all(maps.values.data > 0)


def test_zero_weights_give_k(rng):
    head = AttributeDecomposeHead(16, 5, ACTIVATION, init="random")
    for p in head.params.values():
        p.data[...] = 0.0
    maps = head.forward(FeatureMap(Tensor(rng.normal(size=(16, 4, 2)))))
    np.testing.assert_allclose(maps.values.data, 0.5)


@pytest.mark.parametrize("activation", [ActivationParams(K=0.5, T=1.0), ActivationParams(K=0.01, T=2.0)])
def test_uniform_share_init(rng, activation):
    head = AttributeDecomposeHead(16, 10, activation, init="uniform_share")
    maps = head.forward(FeatureMap(Tensor(rng.normal(size=(16, 4, 2)))))
    np.testing.assert_allclose(maps.values.data, 0.1, rtol=1e-12)


def test_deterministic(rng):
    x = FeatureMap(Tensor(rng.normal(size=(16, 4, 2))))
    a = AttributeDecomposeHead(16, 6, ACTIVATION, seed=4, init="random").forward(x)
    b = AttributeDecomposeHead(16, 6, ACTIVATION, seed=4, init="random").forward(x)
    assert a.values.data.tobytes() == b.values.data.tobytes()


def test_batched_call_matches_single(rng):
    head = AttributeDecomposeHead(16, 6, ACTIVATION, seed=2, init="random")
    batch = rng.normal(size=(3, 16, 4, 2))
    out = head(batch).data
    np.testing.assert_allclose(out[1], head.forward(FeatureMap(Tensor(batch[1]))).values.data, atol=1e-12)


def test_channels_must_divide_by_eight():
    with pytest.raises(ConfigError):
        AttributeDecomposeHead(12, 4, ACTIVATION)


def test_channel_mismatch(rng):
    head = AttributeDecomposeHead(16, 4, ACTIVATION)
    with pytest.raises(ShapeMismatch):
        head.forward(FeatureMap(Tensor(rng.normal(size=(8, 4, 2)))))


def test_adh_forward_matches_batched_call(rng):
    head = AttributeDecomposeHead(16, 6, ACTIVATION, seed=2, init="random")
    fmap = FeatureMap(Tensor(rng.normal(size=(16, 4, 2))), "0003_a01")
    maps = adh_forward(fmap, head)
    assert maps.count == 6
    np.testing.assert_allclose(maps.values.data, head(fmap.values.data.reshape(1, 16, 4, 2)).data[0], atol=1e-12)


@pytest.mark.parametrize("name", ["adh.conv1.weight", "adh.conv1.bias", "adh.conv2.weight", "adh.conv2.bias"])
def test_parameter_gradients_through_delta(rng, name):
    head = AttributeDecomposeHead(16, 3, ActivationParams(K=0.5, T=1.5), seed=6, init="random")
    head.params["adh.conv1.bias"].data[...] = rng.normal(scale=0.1, size=2)
    x = rng.normal(size=(2, 16, 3, 2))
    weights = rng.normal(size=(2, 3, 3, 2))
    original = head.params[name]

    def objective(t):
        head.params[name] = t
        return (head(x) * weights).sum()

    try:
        assert grad_check(objective, original.data, step=1e-7) <= 1e-4
    finally:
        head.params[name] = original


class TestAttributeFeatureMaps:
    def test_mask_multiplies_every_channel(self):
        fmap = FeatureMap(Tensor(np.ones((2, 2, 2))))
        maps = AttentionMaps(Tensor(np.array([[[2.0, 1e-9], [1e-9, 2.0]]])))
        (masked,) = attribute_feature_maps(fmap, maps)
        for channel in masked.data:
            np.testing.assert_allclose(channel, [[2.0, 0.0], [0.0, 2.0]], atol=1e-8)

    def test_ones_mask_is_identity(self, rng):
        fmap = FeatureMap(Tensor(rng.normal(size=(3, 2, 2))))
        maps = AttentionMaps(Tensor(np.ones((2, 2, 2))))
        for masked in attribute_feature_maps(fmap, maps):
            np.testing.assert_array_equal(masked.data, fmap.values.data)

    def test_spatial_mismatch(self, rng):
        fmap = FeatureMap(Tensor(rng.normal(size=(3, 2, 2))))
        with pytest.raises(ShapeMismatch):
            attribute_feature_maps(fmap, AttentionMaps(Tensor(np.ones((2, 3, 2)))))

    @pytest.mark.parametrize("seed", range(5))
    def test_linear_in_the_feature_map(self, seed):
        rng = np.random.default_rng(seed)
        F, G = rng.normal(size=(2, 3, 4, 2))
        a, b = rng.normal(size=2)
        maps = AttentionMaps(Tensor(rng.uniform(0.05, 2.0, size=(4, 4, 2))))
        combined = attribute_feature_maps(FeatureMap(Tensor(a * F + b * G)), maps)
        parts = zip(attribute_feature_maps(FeatureMap(Tensor(F)), maps),
                    attribute_feature_maps(FeatureMap(Tensor(G)), maps))
        for mixed, (f, g) in zip(combined, parts):
            np.testing.assert_allclose(mixed.data, a * f.data + b * g.data, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_constant_map_follows_attention_order(self, seed):
        rng = np.random.default_rng(seed)
        fmap = FeatureMap(Tensor(np.full((3, 4, 2), rng.uniform(0.5, 2.0))))
        maps = AttentionMaps(Tensor(rng.uniform(0.05, 2.0, size=(2, 4, 2))))
        for k, masked in enumerate(attribute_feature_maps(fmap, maps)):
            order = np.argsort(maps.values.data[k], axis=None, kind="stable")
            for channel in masked.data:
                np.testing.assert_array_equal(np.argsort(channel, axis=None, kind="stable"), order)


def test_attention_must_be_positive():
    with pytest.raises(InvalidParam):
        AttentionMaps(Tensor(np.zeros((1, 2, 2))))


def test_underflowing_logits_stay_positive(rng):
    head = AttributeDecomposeHead(16, 4, ACTIVATION, seed=1, init="random")
    head.params["adh.conv2.bias"].data[...] = -1e4
    maps = adh_forward(FeatureMap(Tensor(rng.normal(size=(16, 4, 2)))), head)
    assert np.all(maps.values.data > 0)
    assert maps.values.data.max() < 1e-300


def test_export_attention(tmp_path, rng):
    maps = AttentionMaps(Tensor(rng.uniform(0.1, 1.0, size=(3, 4, 2))))
    summary = export_attention(tmp_path, "0001_a00", maps, ["a:0", "a:1", "b"])
    np.testing.assert_array_equal(load_tensor(tmp_path / "aam_0001_a00.atrt"), maps.values.data)
    frame = pd.read_csv(summary)
    assert list(frame.columns) == ["k", "attribute_name", "mean_activation"]
    assert frame["attribute_name"].tolist() == ["a:0", "a:1", "b"]
    np.testing.assert_allclose(frame["mean_activation"], maps.values.data.mean(axis=(1, 2)), rtol=1e-9)
