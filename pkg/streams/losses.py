"""Training objectives for both streams.

Stream 2 minimises L = L_d + alpha * L_p1 + beta * L_p2 per pair:
  L_d  = |d - sum_k d_k|
  L_p1 = hinge on the summed exclusive / common shares of d_hat
  L_p2 = per-attribute hinges with bounds scaled by e^{-lambda} / e^{lambda}
Shares are d_k / d_hat with d_hat = sum_k d_k. Pairs whose XOR vector is all
zeros or all ones carry no prior loss.
"""
import logging
import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from streams.distances import DistanceDecomposition
from utils.attributes import PairwiseAttributeVector
from utils.errors import BatchTooSmall, DegeneratePair, InvalidParam, ShapeMismatch
from utils.tensor import Tensor, as_tensor, cross_entropy, l2_norm, no_grad

logger = logging.getLogger(__name__)

LAMBDA_VARIANTS = ("as_printed", "grouped")


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 1.0
    v: float = 0.5
    margin: float = 0.3
    lambda_variant: str = "as_printed"

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and self.alpha >= 0):
            raise InvalidParam(f"alpha must be finite and >= 0, got {self.alpha}")
        if not (math.isfinite(self.beta) and self.beta >= 0):
            raise InvalidParam(f"beta must be finite and >= 0, got {self.beta}")
        if not 0.0 < self.v < 1.0:
            raise InvalidParam(f"v must lie strictly inside (0, 1), got {self.v}")
        if self.lambda_variant not in LAMBDA_VARIANTS:
            raise InvalidParam(f"lambda_variant must be one of {LAMBDA_VARIANTS}")


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    l_d: float
    l_p1: float
    l_p2: float
    lambda_value: float
    degenerate: bool = False
    pair_count: int = 1
    degenerate_count: int = 0

    @property
    def degenerate_fraction(self) -> float:
        return self.degenerate_count / self.pair_count if self.pair_count else 0.0


def metric_distillation(d: float, d_k: Sequence[float]) -> float:
    return abs(float(d) - float(np.sum(d_k)))


def lambda_weight(M: int, M_E: int, v: float, variant: str = "as_printed") -> float:
    if M_E <= 0 or M_E >= M:
        raise DegeneratePair(f"lambda undefined for M_E={M_E} of M={M}")
    ratio = (M_E / M) ** v
    denominator = M_E * (1.0 - ratio)
    if variant == "as_printed":
        numerator = M - M_E * ratio
    elif variant == "grouped":
        numerator = (M - M_E) * ratio
    else:
        raise InvalidParam(f"unknown lambda variant {variant!r}")
    return 0.5 * math.log(numerator / denominator)


def _lambda_per_pair(M: int, counts: np.ndarray, active: np.ndarray, v: float, variant: str) -> np.ndarray:
    return np.array([lambda_weight(M, int(m_e), v, variant) if ok else 0.0
                     for m_e, ok in zip(counts, active)])


def prior_terms(d_k: Tensor, bits: np.ndarray, v: float,
                variant: str = "as_printed") -> Tuple[Tensor, Tensor, np.ndarray, np.ndarray]:
    """Per-pair L_p1, L_p2 for P×M distances and P×M XOR bits.

    Returns (p1, p2, active mask, lambda per pair). Inactive pairs (degenerate
    or d_hat == 0) contribute exactly zero.
    """
    bits = np.asarray(bits, dtype=np.float64)
    if d_k.ndim != 2 or bits.shape != d_k.shape:
        raise ShapeMismatch(f"distances {d_k.shape} vs attribute bits {bits.shape}")
    M = bits.shape[1]
    counts = bits.sum(axis=1)
    d_hat = d_k.sum(axis=1, keepdims=True)
    zero_hat = d_hat.data[:, 0] <= 0
    active = (counts > 0) & (counts < M) & ~zero_hat
    shares = d_k / (d_hat + zero_hat[:, None].astype(np.float64))
    common = 1.0 - bits
    ratio = (counts / M) ** v
    lam = _lambda_per_pair(M, counts, active, v, variant)
    mask = active.astype(np.float64)

    exclusive_share = (shares * bits).sum(axis=1)
    common_share = (shares * common).sum(axis=1)
    p1 = (ratio - exclusive_share).relu() + (common_share - 1.0 + ratio).relu()

    lower = np.exp(-lam) * ratio / np.maximum(counts, 1.0)
    upper = np.exp(lam) * (1.0 - ratio) / np.maximum(M - counts, 1.0)
    p2 = ((lower[:, None] - shares).relu() * bits).sum(axis=1) \
        + ((shares - upper[:, None]).relu() * common).sum(axis=1)
    return p1 * mask, p2 * mask, active, lam


def batch_objective(d: np.ndarray, d_k: Tensor, bits: np.ndarray,
                    config: LossConfig) -> Tuple[Tensor, LossBreakdown]:
    """Mean distillation-plus-prior objective over P pairs, with its breakdown"""
    d = np.asarray(d, dtype=np.float64).reshape(-1)
    if d_k.ndim != 2 or d_k.shape[0] != len(d):
        raise ShapeMismatch(f"{len(d)} pair distances vs attribute distances {d_k.shape}")
    pair_count = len(d)
    counts = np.asarray(bits).sum(axis=1)
    degenerate = int(np.sum((counts == 0) | (counts == np.asarray(bits).shape[1])))
    l_d = (d - d_k.sum(axis=1)).abs().mean()
    p1, p2, active, lam = prior_terms(d_k, bits, config.v, config.lambda_variant)
    l_p1, l_p2 = p1.mean(), p2.mean()
    objective = l_d + config.alpha * l_p1 + config.beta * l_p2
    breakdown = LossBreakdown(
        total=float(objective.data),
        l_d=float(l_d.data),
        l_p1=float(l_p1.data),
        l_p2=float(l_p2.data),
        lambda_value=float(lam[active].mean()) if active.any() else 0.0,
        degenerate=degenerate == pair_count,
        pair_count=pair_count,
        degenerate_count=degenerate,
    )
    return objective, breakdown


def pair_objective(d: float, d_k, pairwise_attrs: PairwiseAttributeVector, config: LossConfig) -> Tensor:
    """Differentiable total loss of a single pair w.r.t. its d_k"""
    d_k = as_tensor(d_k)
    objective, _ = batch_objective(np.array([d]), d_k.reshape(1, -1), pairwise_attrs.bits[None, :], config)
    return objective


def total_loss(d: float, d_k: Sequence[float], pairwise_attrs: PairwiseAttributeVector,
               config: LossConfig) -> LossBreakdown:
    if len(d_k) != pairwise_attrs.size:
        raise ShapeMismatch(f"{len(d_k)} attribute distances vs {pairwise_attrs.size} attribute bits")
    with no_grad():
        _, breakdown = batch_objective(np.array([d]), Tensor(np.asarray(d_k)).reshape(1, -1),
                                       pairwise_attrs.bits[None, :], config)
    return breakdown


def _decomposition_bits(decomp: DistanceDecomposition, M: int, M_E: int) -> np.ndarray:
    if len(decomp.d_k) != M:
        raise ShapeMismatch(f"decomposition has {len(decomp.d_k)} attributes, M={M}")
    if M_E <= 0 or M_E >= M:
        raise DegeneratePair(f"no exclusive/common split for M_E={M_E} of M={M}")
    if len(decomp.exclusive_indices) != M_E:
        raise ShapeMismatch(f"{len(decomp.exclusive_indices)} exclusive indices but M_E={M_E}")
    bits = np.zeros((1, M))
    bits[0, decomp.exclusive_indices] = 1.0
    return bits


def prior_loss_p1(decomp: DistanceDecomposition, M: int, M_E: int, v: float) -> float:
    bits = _decomposition_bits(decomp, M, M_E)
    with no_grad():
        p1, _, _, _ = prior_terms(Tensor(decomp.d_k).reshape(1, -1), bits, v)
    return float(p1.data[0])


def prior_loss_p2(decomp: DistanceDecomposition, M: int, M_E: int, v: float,
                  variant: str = "as_printed") -> float:
    bits = _decomposition_bits(decomp, M, M_E)
    with no_grad():
        _, p2, _, _ = prior_terms(Tensor(decomp.d_k).reshape(1, -1), bits, v, variant)
    return float(p2.data[0])


def _check_triplet_batch(labels: np.ndarray):
    _, counts = np.unique(labels, return_counts=True)
    if np.sum(counts >= 2) < 2:
        raise BatchTooSmall(f"batch needs >= 2 identities with >= 2 images each, got counts {counts.tolist()}")


def batch_hard_triplet(embeddings: Tensor, labels, margin: float) -> Tensor:
    """Hardest positive / hardest negative per anchor, hinge-averaged"""
    labels = np.asarray(labels)
    if embeddings.ndim != 2 or embeddings.shape[0] != len(labels):
        raise ShapeMismatch(f"embeddings {embeddings.shape} vs {len(labels)} labels")
    _check_triplet_batch(labels)
    n = len(labels)
    diff = embeddings.reshape(n, 1, -1) - embeddings.reshape(1, n, -1)
    dist = l2_norm(diff, axis=-1)
    same = labels[:, None] == labels[None, :]
    positive = same & ~np.eye(n, dtype=bool)
    negative = ~same
    anchors = np.flatnonzero(positive.any(axis=1) & negative.any(axis=1))
    hardest_pos = np.argmax(np.where(positive, dist.data, -np.inf), axis=1)[anchors]
    hardest_neg = np.argmin(np.where(negative, dist.data, np.inf), axis=1)[anchors]
    return (dist[anchors, hardest_pos] - dist[anchors, hardest_neg] + margin).relu().mean()


def stream1_loss_parts(embeddings: Tensor, identities, logits: Tensor, margin: float) -> Tuple[Tensor, Tensor]:
    return cross_entropy(logits, identities), batch_hard_triplet(embeddings, identities, margin)


def stream1_loss(embeddings: Tensor, identities, logits: Tensor, margin: float) -> Tensor:
    """Identity cross-entropy plus batch-hard triplet"""
    ce, triplet = stream1_loss_parts(embeddings, identities, logits, margin)
    return ce + triplet
