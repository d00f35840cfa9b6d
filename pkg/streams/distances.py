import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from streams.adh import AttentionMaps, AttributeDecomposeHead, attribute_features
from streams.backbone import FeatureMap, TwoStreamBackbone
from utils.attributes import PairwiseAttributeVector
from utils.errors import ShapeMismatch
from utils.tensor import Tensor, as_tensor, gem_pool, l2_norm, no_grad

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DistanceDecomposition:
    """Stream-1 distance d, per-attribute distances d_k and d_hat = sum(d_k)"""
    d: float
    d_k: np.ndarray
    d_hat: float
    exclusive_indices: np.ndarray
    common_indices: np.ndarray

    @property
    def shares(self) -> np.ndarray:
        if self.d_hat <= 0:
            return np.zeros_like(self.d_k)
        return self.d_k / self.d_hat

    @property
    def relative_gap(self) -> float:
        return abs(self.d - self.d_hat) / max(self.d, 1e-9)

    @property
    def exclusive_count(self) -> int:
        return len(self.exclusive_indices)

    @property
    def exclusive_share(self) -> float:
        return float(self.shares[self.exclusive_indices].sum())

    @property
    def degenerate(self) -> bool:
        """No exclusive or no common attribute, or nothing to share"""
        return self.exclusive_count in (0, len(self.d_k)) or self.d_hat <= 0


def pairwise_distance(f_i, f_j) -> float:
    """Euclidean distance between two embeddings"""
    a = np.asarray(f_i.data if isinstance(f_i, Tensor) else f_i, dtype=np.float64).reshape(-1)
    b = np.asarray(f_j.data if isinstance(f_j, Tensor) else f_j, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ShapeMismatch(f"embeddings of length {a.size} and {b.size}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def attribute_descriptors(feature_maps: Tensor, attention: Tensor, p: float, eps: float = 1e-6) -> Tensor:
    """GeM-pooled attribute-guided vectors f^k: N×C×h×w, N×M×h×w -> N×M×C"""
    return gem_pool(attribute_features(as_tensor(feature_maps), as_tensor(attention)), p=p, eps=eps)


def pair_attribute_distances(descriptors: Tensor, left: np.ndarray, right: np.ndarray) -> Tensor:
    """d_k for each (left[i], right[i]) pair: P×M"""
    return l2_norm(descriptors[np.asarray(left)] - descriptors[np.asarray(right)], axis=-1)


def attribute_distance_tensor(F_i: Tensor, F_j: Tensor, A_i: Tensor, A_j: Tensor,
                              p: float, eps: float = 1e-6) -> Tensor:
    """Differentiable length-M vector of attribute-guided distances for one pair"""
    F_i, F_j, A_i, A_j = (as_tensor(t) for t in (F_i, F_j, A_i, A_j))
    if F_i.shape != F_j.shape or A_i.shape != A_j.shape or F_i.shape[1:] != A_i.shape[1:]:
        raise ShapeMismatch(f"inconsistent shapes F {F_i.shape}/{F_j.shape}, A {A_i.shape}/{A_j.shape}")
    desc_i = attribute_descriptors(F_i.reshape((1,) + F_i.shape), A_i.reshape((1,) + A_i.shape), p, eps)
    desc_j = attribute_descriptors(F_j.reshape((1,) + F_j.shape), A_j.reshape((1,) + A_j.shape), p, eps)
    return l2_norm(desc_i - desc_j, axis=-1).reshape(-1)


def attribute_distances(F_i: FeatureMap, F_j: FeatureMap, A_i: AttentionMaps, A_j: AttentionMaps,
                        p: float = 3.0, eps: float = 1e-6, pair: Optional[PairwiseAttributeVector] = None,
                        stream1_p: Optional[float] = None) -> DistanceDecomposition:
    """Decompose a pair: d from GeM(F), d_k from GeM(F ⊗ A^k), d_hat = sum(d_k).

    F_i, F_j are Stream-1 maps; the attention comes from Stream 2.
    """
    with no_grad():
        d_k = attribute_distance_tensor(F_i.values, F_j.values, A_i.values, A_j.values, p, eps).data
        p1 = p if stream1_p is None else stream1_p
        d = pairwise_distance(gem_pool(F_i.values, p1, eps), gem_pool(F_j.values, p1, eps))
    if pair is not None:
        if pair.size != len(d_k):
            raise ShapeMismatch(f"pairwise attributes have {pair.size} bits, attention has {len(d_k)} maps")
        exclusive, common = pair.exclusive_indices, pair.common_indices
    else:
        exclusive, common = np.array([], dtype=np.int64), np.arange(len(d_k))
    return DistanceDecomposition(d, d_k, float(d_k.sum()), exclusive, common)


def explanation_bank(backbone: TwoStreamBackbone, head: AttributeDecomposeHead, images: np.ndarray,
                     batch_size: int = 64) -> Tuple[np.ndarray, np.ndarray]:
    """Stream-1 maps and Stream-2 attention for N×3×H×W images, no tape recorded"""
    reid_maps, attention = [], []
    with no_grad():
        for start in range(0, len(images), batch_size):
            trunk = backbone.shared_trunk(images[start:start + batch_size])
            reid_maps.append(backbone.reid_tail(trunk).data)
            attention.append(head(backbone.explainable_tail(trunk)).data)
    if not reid_maps:
        raise ShapeMismatch("no images to explain")
    return np.concatenate(reid_maps), np.concatenate(attention)


def decompose_pairs(reid_maps: np.ndarray, attention: np.ndarray, bits: np.ndarray, left, right,
                    p: float = 3.0, eps: float = 1e-6, stream1_p: Optional[float] = None,
                    batch_size: int = 16) -> List[DistanceDecomposition]:
    """Decompositions for many (left[i], right[i]) pairs over one bank of images.

    reid_maps is N×C×h×w (Stream 1), attention N×M×h×w, bits N×M.
    """
    reid_maps, attention = np.asarray(reid_maps, dtype=np.float64), np.asarray(attention, dtype=np.float64)
    bits = np.asarray(bits)
    if len(reid_maps) != len(attention) or len(bits) != len(attention) or bits.shape[1] != attention.shape[1]:
        raise ShapeMismatch(f"maps {reid_maps.shape}, attention {attention.shape}, bits {bits.shape}")
    left, right = np.asarray(left, dtype=np.int64), np.asarray(right, dtype=np.int64)
    p1 = p if stream1_p is None else stream1_p
    with no_grad():
        descriptors = np.concatenate([
            attribute_descriptors(reid_maps[s:s + batch_size], attention[s:s + batch_size], p, eps).data
            for s in range(0, len(reid_maps), batch_size)])
        embeddings = gem_pool(reid_maps, p1, eps).data
    d_k = np.sqrt(np.sum((descriptors[left] - descriptors[right]) ** 2, axis=-1))
    d = np.sqrt(np.sum((embeddings[left] - embeddings[right]) ** 2, axis=-1))
    xor = np.bitwise_xor(bits[left], bits[right]).astype(bool)
    return [DistanceDecomposition(float(d[i]), d_k[i], float(d_k[i].sum()),
                                  np.flatnonzero(xor[i]), np.flatnonzero(~xor[i]))
            for i in range(len(left))]


def decomposition_frame(decompositions: Sequence[DistanceDecomposition]) -> pd.DataFrame:
    """One row per pair: d, d_hat, relative_gap, M_E, exclusive and proportional share"""
    return pd.DataFrame({
        "d": [x.d for x in decompositions],
        "d_hat": [x.d_hat for x in decompositions],
        "relative_gap": [x.relative_gap for x in decompositions],
        "M_E": [x.exclusive_count for x in decompositions],
        "exclusive_share": [x.exclusive_share for x in decompositions],
        "proportional_share": [x.exclusive_count / len(x.d_k) for x in decompositions],
        "degenerate": [int(x.degenerate) for x in decompositions],
    })


def explanation_summary(frame: pd.DataFrame) -> Dict[str, float]:
    """Mean relative gap over all pairs; how often exclusive attributes take more
    than their proportional share over the informative ones"""
    informative = frame[frame["degenerate"] == 0]
    dominant = informative["exclusive_share"] > informative["proportional_share"]
    return {
        "pairs": len(frame),
        "mean_relative_gap": float(frame["relative_gap"].mean()) if len(frame) else 0.0,
        "informative_pairs": len(informative),
        "exclusive_dominant_fraction": float(dominant.mean()) if len(informative) else 0.0,
    }


def export_decomposition(path: Union[str, Path], decomposition: DistanceDecomposition,
                         dimension_names: Sequence[str]) -> None:
    """CSV of k, attribute_name, d_k, share, exclusive"""
    exclusive = np.zeros(len(decomposition.d_k), dtype=bool)
    exclusive[decomposition.exclusive_indices] = True
    frame = pd.DataFrame({
        "k": np.arange(len(decomposition.d_k)),
        "attribute_name": list(dimension_names),
        "d_k": decomposition.d_k,
        "share": decomposition.shares,
        "exclusive": exclusive.astype(int),
    })
    frame.to_csv(path, index=False, float_format="%.10g")
