import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from utils.errors import ConfigError, ShapeMismatch
from utils.tensor import Tensor, conv2d, gem_pool, linear, no_grad

logger = logging.getLogger(__name__)

KERNEL = 3
PADDING = 1


@dataclass(frozen=True)
class BackboneConfig:
    """Plain conv stages shared in part between the two streams"""
    stages: Tuple[Tuple[int, int], ...] = ((16, 2), (32, 2), (64, 2))
    input_shape: Tuple[int, int, int] = (3, 64, 32)
    shared_stage_count: Optional[int] = None
    id_count: int = 10
    seed: int = 0
    stream2_init: str = "fresh"

    def __post_init__(self):
        stages = tuple((int(c), int(s)) for c, s in self.stages)
        object.__setattr__(self, "stages", stages)
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if len(stages) < 2:
            raise ConfigError("the backbone needs at least two stages (one shared, one per stream)")
        if any(c < 1 or s < 1 for c, s in stages):
            raise ConfigError(f"invalid stage list {stages}")
        shared = self.shared_stage_count
        if shared is None:
            shared = math.ceil(len(stages) / 2)
            if shared >= len(stages):
                shared = len(stages) - 1
        object.__setattr__(self, "shared_stage_count", int(shared))
        if not 1 <= self.shared_stage_count < len(stages):
            raise ConfigError(f"shared stages must lie in [1, {len(stages) - 1}], got {self.shared_stage_count}")
        if stages[-1][0] % 8 != 0:
            raise ConfigError(f"final channel count {stages[-1][0]} must be divisible by 8")
        if len(self.input_shape) != 3 or self.input_shape[0] != 3:
            raise ConfigError(f"input shape must be (3, H, W), got {self.input_shape}")
        if self.id_count < 1:
            raise ConfigError("id_count must be positive")
        if self.stream2_init not in ("fresh", "copy"):
            raise ConfigError(f"stream2_init must be 'fresh' or 'copy', got {self.stream2_init}")

    @property
    def channels(self) -> int:
        return self.stages[-1][0]

    def output_shape(self) -> Tuple[int, int, int]:
        _, h, w = self.input_shape
        for _, stride in self.stages:
            h = (h + 2 * PADDING - KERNEL) // stride + 1
            w = (w + 2 * PADDING - KERNEL) // stride + 1
        return self.channels, h, w

    def to_dict(self) -> dict:
        return {
            "stages": [list(s) for s in self.stages],
            "input_shape": list(self.input_shape),
            "shared_stage_count": self.shared_stage_count,
            "id_count": self.id_count,
            "seed": self.seed,
            "stream2_init": self.stream2_init,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BackboneConfig":
        return cls(
            stages=tuple(tuple(s) for s in data["stages"]),
            input_shape=tuple(data["input_shape"]),
            shared_stage_count=data.get("shared_stage_count"),
            id_count=int(data["id_count"]),
            seed=int(data.get("seed", 0)),
            stream2_init=data.get("stream2_init", "fresh"),
        )


@dataclass(frozen=True)
class FeatureMap:
    values: Tensor
    source_image_id: str = ""

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape


def _uniform_init(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class TwoStreamBackbone:
    """Stream 1 (re-ID) and Stream 2 (explainable) feature extractors.

    Stages below `shared_stage_count` exist once and are read by both
    streams; the remaining stages are duplicated per stream. Stream 1 also
    carries the identity classifier used during its training.
    """

    def __init__(self, config: BackboneConfig):
        self.config = config
        self.params: Dict[str, Tensor] = {}
        rng = np.random.default_rng([config.seed, 1])
        in_channels = config.input_shape[0]
        for i, (out_channels, _) in enumerate(config.stages):
            self._add_stage("s1", i, in_channels, out_channels, rng)
            in_channels = out_channels
        self.params["s1.classifier.weight"] = Tensor(
            _uniform_init(rng, (config.id_count, config.channels), config.channels), requires_grad=True)
        self.params["s1.classifier.bias"] = Tensor(np.zeros(config.id_count), requires_grad=True)
        self.reset_stream2()

    def _add_stage(self, stream: str, index: int, in_channels: int, out_channels: int, rng):
        prefix = f"{stream}.stage{index}"
        self.params[f"{prefix}.weight"] = Tensor(
            _uniform_init(rng, (out_channels, in_channels, KERNEL, KERNEL), in_channels * KERNEL * KERNEL),
            requires_grad=True)
        self.params[f"{prefix}.gain"] = Tensor(np.ones(out_channels), requires_grad=True)
        self.params[f"{prefix}.bias"] = Tensor(np.zeros(out_channels), requires_grad=True)

    def reset_stream2(self):
        """(Re)create Stream 2's unshared stages, fresh-seeded or copied from Stream 1"""
        config = self.config
        for name in [n for n in self.params if n.startswith("s2.")]:
            del self.params[name]
        rng = np.random.default_rng([config.seed, 2])
        for i in range(config.shared_stage_count, len(config.stages)):
            in_channels = config.stages[i - 1][0]
            if config.stream2_init == "copy":
                for part in ("weight", "gain", "bias"):
                    self.params[f"s2.stage{i}.{part}"] = Tensor(self.params[f"s1.stage{i}.{part}"].data,
                                                               requires_grad=True)
            else:
                self._add_stage("s2", i, in_channels, config.stages[i][0], rng)

    # --- parameter groups ---
    def shared_parameters(self) -> Dict[str, Tensor]:
        shared = self.config.shared_stage_count
        return {n: p for n, p in self.params.items()
                if n.startswith("s1.stage") and int(n.split(".")[1][5:]) < shared}

    def stream1_parameters(self) -> Dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if n.startswith("s1.")}

    def stream2_parameters(self) -> Dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if n.startswith("s2.")}

    def state_dict(self, prefix: str = "") -> Dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items() if n.startswith(prefix)}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        for name, value in state.items():
            if name not in self.params:
                raise ShapeMismatch(f"unexpected parameter {name} in checkpoint")
            if self.params[name].shape != tuple(value.shape):
                raise ShapeMismatch(f"{name}: checkpoint shape {value.shape}, model {self.params[name].shape}")
            self.params[name].data[...] = value

    # --- forward passes ---
    def _stage(self, x: Tensor, stream: str, index: int) -> Tensor:
        prefix = f"{stream}.stage{index}"
        stride = self.config.stages[index][1]
        out = conv2d(x, self.params[f"{prefix}.weight"], stride=stride, padding=PADDING)
        gain = self.params[f"{prefix}.gain"].reshape(1, -1, 1, 1)
        bias = self.params[f"{prefix}.bias"].reshape(1, -1, 1, 1)
        return (out * gain + bias).relu()

    def _check_batch(self, images) -> Tensor:
        images = images if isinstance(images, Tensor) else Tensor(images)
        if images.ndim != 4 or images.shape[1:] != self.config.input_shape:
            raise ShapeMismatch(f"expected N×{self.config.input_shape} images, got {images.shape}")
        return images

    def shared_trunk(self, images) -> Tensor:
        x = self._check_batch(images)
        for i in range(self.config.shared_stage_count):
            x = self._stage(x, "s1", i)
        return x

    def reid_tail(self, trunk: Tensor) -> Tensor:
        x = trunk
        for i in range(self.config.shared_stage_count, len(self.config.stages)):
            x = self._stage(x, "s1", i)
        return x

    def explainable_tail(self, trunk: Tensor) -> Tensor:
        x = trunk
        for i in range(self.config.shared_stage_count, len(self.config.stages)):
            x = self._stage(x, "s2", i)
        return x

    def reid_batch(self, images) -> Tensor:
        return self.reid_tail(self.shared_trunk(images))

    def explainable_batch(self, images) -> Tensor:
        return self.explainable_tail(self.shared_trunk(images))

    def _single(self, image) -> Tensor:
        image = image if isinstance(image, Tensor) else Tensor(image)
        if image.shape != self.config.input_shape:
            raise ShapeMismatch(f"expected image of shape {self.config.input_shape}, got {image.shape}")
        return image.reshape((1,) + image.shape)

    def forward_reid(self, image, image_id: str = "") -> FeatureMap:
        """Stream 1's last feature map for one 3×H×W image"""
        out = self.reid_batch(self._single(image))
        return FeatureMap(out.reshape(out.shape[1:]), image_id)

    def forward_explainable(self, image, image_id: str = "") -> FeatureMap:
        """Stream 2's feature map: shared stages from Stream 1, own stages after"""
        out = self.explainable_batch(self._single(image))
        return FeatureMap(out.reshape(out.shape[1:]), image_id)

    def embed(self, feature_maps: Tensor, p: float, eps: float = 1e-6) -> Tensor:
        return gem_pool(feature_maps, p=p, eps=eps)

    def classify(self, embeddings: Tensor) -> Tensor:
        return linear(embeddings, self.params["s1.classifier.weight"], self.params["s1.classifier.bias"])

    def embed_images(self, images: np.ndarray, p: float, eps: float = 1e-6, batch_size: int = 64) -> np.ndarray:
        """Stream-1 GeM embeddings for N×3×H×W images, no tape recorded"""
        chunks: List[np.ndarray] = []
        with no_grad():
            for start in range(0, len(images), batch_size):
                feature_maps = self.reid_batch(images[start:start + batch_size])
                chunks.append(self.embed(feature_maps, p, eps).data)
        if not chunks:
            return np.zeros((0, self.config.channels))
        return np.concatenate(chunks)
