import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Union

import numpy as np
import pandas as pd

from streams.backbone import FeatureMap
from utils.errors import ConfigError, InvalidParam, ShapeMismatch
from utils.tensor import ActivationParams, Tensor, as_tensor, conv2d, delta_activation
from utils.tensor_io import save_tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttentionMaps:
    """M×h×w attribute-guided attention maps, strictly positive"""
    values: Tensor

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ShapeMismatch(f"attention maps must be M×h×w, got {self.values.shape}")
        if not np.all(self.values.data > 0):
            raise InvalidParam("attention maps must be strictly positive")

    @property
    def count(self) -> int:
        return self.values.shape[0]


def _inverse_delta(target: float, params: ActivationParams) -> float:
    if target <= params.K:
        return math.log(target / params.K)
    return (target / params.K) ** (1.0 / params.T) - 1.0


class AttributeDecomposeHead:
    """conv3×3 (C -> C/8) -> ReLU -> conv1×1 (C/8 -> M) -> delta.

    `init="uniform_share"` zeroes the 1×1 weights and sets its bias so every
    map starts at 1/M; `init="random"` uses the seeded uniform fan-in init.
    """

    def __init__(self, channels: int, attribute_count: int, activation: ActivationParams,
                 seed: int = 0, init: str = "uniform_share"):
        if channels % 8 != 0:
            raise ConfigError(f"ADH needs C divisible by 8, got C={channels}")
        if init not in ("uniform_share", "random"):
            raise ConfigError(f"unknown ADH init {init!r}")
        self.channels = channels
        self.attribute_count = attribute_count
        self.activation = activation
        hidden = channels // 8
        rng = np.random.default_rng([seed, 3])
        bound1 = math.sqrt(1.0 / (channels * 9))
        bound2 = math.sqrt(1.0 / hidden)
        self.params: Dict[str, Tensor] = {
            "adh.conv1.weight": Tensor(rng.uniform(-bound1, bound1, (hidden, channels, 3, 3)), requires_grad=True),
            "adh.conv1.bias": Tensor(np.zeros(hidden), requires_grad=True),
        }
        if init == "uniform_share":
            weight = np.zeros((attribute_count, hidden, 1, 1))
            bias = np.full(attribute_count, _inverse_delta(1.0 / attribute_count, activation))
        else:
            weight = rng.uniform(-bound2, bound2, (attribute_count, hidden, 1, 1))
            bias = np.zeros(attribute_count)
        self.params["adh.conv2.weight"] = Tensor(weight, requires_grad=True)
        self.params["adh.conv2.bias"] = Tensor(bias, requires_grad=True)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        for name, value in state.items():
            if name not in self.params or self.params[name].shape != tuple(value.shape):
                raise ShapeMismatch(f"ADH checkpoint entry {name} {np.shape(value)} does not fit the head")
            self.params[name].data[...] = value

    def __call__(self, feature_maps) -> Tensor:
        """Batched N×C×h×w (or single C×h×w) -> N×M×h×w attention maps"""
        x = as_tensor(feature_maps)
        if x.shape[-3] != self.channels:
            raise ShapeMismatch(f"ADH built for {self.channels} channels, got {x.shape}")
        hidden = conv2d(x, self.params["adh.conv1.weight"], self.params["adh.conv1.bias"], stride=1, padding=1)
        logits = conv2d(hidden.relu(), self.params["adh.conv2.weight"], self.params["adh.conv2.bias"])
        return delta_activation(logits, self.activation)

    def forward(self, feature_map: FeatureMap) -> AttentionMaps:
        return AttentionMaps(self(feature_map.values))


def adh_forward(feature_map: FeatureMap, head: AttributeDecomposeHead) -> AttentionMaps:
    return head.forward(feature_map)


def attribute_feature_maps(feature_map: FeatureMap, attention: AttentionMaps) -> List[Tensor]:
    """F^k = F ⊗ A^k, one C×h×w map per attribute"""
    values = feature_map.values
    if values.ndim != 3 or values.shape[1:] != attention.values.shape[1:]:
        raise ShapeMismatch(f"feature map {values.shape} and attention {attention.values.shape} disagree spatially")
    return [values * attention.values[k] for k in range(attention.count)]


def attribute_features(feature_maps: Tensor, attention: Tensor) -> Tensor:
    """Batched form of attribute_feature_maps: N×C×h×w, N×M×h×w -> N×M×C×h×w"""
    n, c, h, w = feature_maps.shape
    if attention.ndim != 4 or attention.shape[0] != n or attention.shape[2:] != (h, w):
        raise ShapeMismatch(f"feature maps {feature_maps.shape} vs attention {attention.shape}")
    m = attention.shape[1]
    return feature_maps.reshape(n, 1, c, h, w) * attention.reshape(n, m, 1, h, w)


def export_attention(directory: Union[str, Path], image_id: str, attention: AttentionMaps,
                     dimension_names: Sequence[str]) -> Path:
    """Write the M×h×w block as ATRT plus a k,attribute_name,mean_activation summary"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_tensor(directory / f"aam_{image_id}.atrt", attention.values.data)
    means = attention.values.data.mean(axis=(1, 2))
    summary = pd.DataFrame({"k": np.arange(attention.count), "attribute_name": list(dimension_names),
                            "mean_activation": means})
    path = directory / f"aam_summary_{image_id}.csv"
    summary.to_csv(path, index=False, float_format="%.10g")
    return path
