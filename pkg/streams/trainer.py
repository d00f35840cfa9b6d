"""Two-phase training: Stream 1 (re-ID) first, then Stream 2 against a frozen Stream 1.

Telemetry is appended one row per epoch to telemetry_<phase>.csv in the
output directory; checkpoints go to <out>/<phase>/.
"""
import hashlib
import logging
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import pandas as pd

from streams.adh import AttributeDecomposeHead
from streams.backbone import TwoStreamBackbone
from streams.distances import attribute_descriptors, pair_attribute_distances
from streams.losses import LossConfig, batch_objective, stream1_loss_parts
from streams.optimizers import build_optimizer
from utils.dataset import ReIDDataset
from utils.errors import BatchTooSmall, ConfigError, NonFinite, NonFiniteLoss, ReIDError
from utils.tensor import Tensor, l2_norm, no_grad
from utils.tensor_io import save_checkpoint

logger = logging.getLogger(__name__)

PHASES = ("stream1", "stream2")
STREAM1_COLUMNS = ["epoch", "L_stream1", "L_ce", "L_triplet"]
STREAM2_COLUMNS = ["epoch", "L_total", "L_d", "L_p1", "L_p2", "degenerate_pair_fraction"]


@dataclass(frozen=True)
class TrainConfig:
    """One training phase.

    A learning rate of 0 is accepted and leaves every weight untouched.
    """
    phase: str = "stream1"
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    momentum: float = 0.0
    epochs: int = 30
    batch_size: int = 16
    instances_per_id: int = 4
    ids_per_batch: int = 4
    seed: int = 7
    freeze_shared: bool = True
    gem_p: float = 3.0
    stream1_gem_p: Optional[float] = None
    eps: float = 1e-6

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if not np.isfinite(self.learning_rate) or self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.phase == "stream1":
            if self.batch_size < 4:
                raise ConfigError(f"stream1 batch_size must be >= 4 for triplet mining, got {self.batch_size}")
            if self.instances_per_id < 2 or self.batch_size // self.instances_per_id < 2:
                raise ConfigError(f"batch of {self.batch_size} with {self.instances_per_id} instances per id "
                                  f"cannot hold 2 identities with 2 images each")
        if self.phase == "stream2" and self.ids_per_batch < 2:
            raise ConfigError(f"stream2 needs >= 2 identities per batch, got {self.ids_per_batch}")

    @property
    def reid_p(self) -> float:
        return self.gem_p if self.stream1_gem_p is None else self.stream1_gem_p

    @property
    def pairs_per_batch(self) -> int:
        images = 2 * self.ids_per_batch
        return images * (images - 1) // 2


@dataclass
class TrainingResult:
    history: pd.DataFrame
    checkpoint: Optional[Path] = None
    stream1_digest: str = ""


@dataclass(frozen=True)
class PairBatch:
    """Images of one Stream-2 batch and the pairs formed from them"""
    indices: np.ndarray
    left: np.ndarray
    right: np.ndarray
    same_identity: np.ndarray


def parameter_digest(params: Dict[str, Tensor]) -> str:
    digest = hashlib.sha256()
    for name in sorted(params):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(params[name].data).tobytes())
    return digest.hexdigest()


class PKSampler:
    """P identities × K instances per batch, reshuffled each epoch"""

    def __init__(self, labels: np.ndarray, ids_per_batch: int, instances_per_id: int, seed: int):
        self.labels = np.asarray(labels)
        self.ids_per_batch = ids_per_batch
        self.instances_per_id = instances_per_id
        self.rng = np.random.default_rng([seed, 11])
        self.by_identity = {int(l): np.flatnonzero(self.labels == l) for l in np.unique(self.labels)}
        usable = [l for l, idx in self.by_identity.items() if len(idx) >= 2]
        if len(usable) < 2:
            raise BatchTooSmall(f"only {len(usable)} identities have >= 2 images; triplet mining needs 2")

    def epoch(self) -> List[np.ndarray]:
        identities = np.array(sorted(self.by_identity))
        order = self.rng.permutation(identities)
        batches = []
        for start in range(0, len(order), self.ids_per_batch):
            group = order[start:start + self.ids_per_batch]
            if len(group) < 2:
                continue
            batch = []
            for label in group:
                pool = self.by_identity[int(label)]
                replace = len(pool) < self.instances_per_id
                batch.extend(self.rng.choice(pool, size=self.instances_per_id, replace=replace))
            batches.append(np.array(batch))
        return batches


class PairSampler:
    """P identities per batch, one aerial and one ground image each when both
    exist, and every pair among the chosen images"""

    def __init__(self, labels: np.ndarray, platforms: np.ndarray, ids_per_batch: int, seed: int):
        self.labels = np.asarray(labels)
        self.platforms = np.asarray(platforms)
        self.ids_per_batch = ids_per_batch
        self.rng = np.random.default_rng([seed, 12])
        self.identities = np.unique(self.labels)
        if len(self.identities) < 2:
            raise BatchTooSmall("pair sampling needs at least 2 identities")

    def _pick(self, label) -> List[int]:
        chosen = []
        for platform in ("aerial", "ground"):
            pool = np.flatnonzero((self.labels == label) & (self.platforms == platform))
            if len(pool):
                chosen.append(int(self.rng.choice(pool)))
        if len(chosen) == 1:
            pool = np.setdiff1d(np.flatnonzero(self.labels == label), chosen)
            if len(pool):
                chosen.append(int(self.rng.choice(pool)))
        return chosen

    def epoch(self) -> List[PairBatch]:
        order = self.rng.permutation(self.identities)
        batches = []
        for start in range(0, len(order), self.ids_per_batch):
            group = order[start:start + self.ids_per_batch]
            if len(group) < 2:
                continue
            indices = np.array([i for label in group for i in self._pick(label)])
            pairs = np.array(list(combinations(range(len(indices)), 2)))
            left, right = pairs[:, 0], pairs[:, 1]
            same = self.labels[indices[left]] == self.labels[indices[right]]
            batches.append(PairBatch(indices, left, right, same))
        return batches


def _append_row(path: Path, columns: List[str], row: Dict[str, float], first: bool):
    frame = pd.DataFrame([row], columns=columns)
    frame.to_csv(path, mode="w" if first else "a", header=first, index=False, float_format="%.10g")


def _abort(out_dir: Optional[Path], phase: str, state: Dict[str, np.ndarray], config: dict, reason: str):
    if out_dir is not None:
        save_checkpoint(out_dir / f"{phase}_last_good", state, config)
    logger.error(f"{phase}: {reason}; last good weights kept")
    raise NonFiniteLoss(f"{phase}: {reason}")


def stream1_checkpoint_config(backbone: TwoStreamBackbone, config: TrainConfig,
                              identities: List[str]) -> dict:
    return {
        "phase": "stream1",
        "backbone": backbone.config.to_dict(),
        "pooling": {"gem_p": config.gem_p, "stream1_gem_p": config.stream1_gem_p, "eps": config.eps},
        "identities": list(identities),
    }


def train_stream1(dataset: ReIDDataset, backbone: TwoStreamBackbone, config: TrainConfig,
                  out_dir: Optional[Union[str, Path]] = None, margin: float = 0.3) -> TrainingResult:
    """Identity cross-entropy + batch-hard triplet on Stream 1 and its classifier"""
    labels = dataset.labels
    if labels.max(initial=-1) >= backbone.config.id_count:
        raise ConfigError(f"classifier has {backbone.config.id_count} outputs, dataset has label {labels.max()}")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    identities = sorted(dataset.records["person_id"].unique())
    ckpt_config = stream1_checkpoint_config(backbone, config, identities)
    params = backbone.stream1_parameters()
    optimizer = build_optimizer(config.optimizer, params, config.learning_rate, config.momentum)
    sampler = PKSampler(labels, config.batch_size // config.instances_per_id, config.instances_per_id, config.seed)

    rows = []
    for epoch in range(1, config.epochs + 1):
        totals = np.zeros(3)
        batches = sampler.epoch()
        last_good = backbone.state_dict("s1.")
        for batch in batches:
            optimizer.zero_grad()
            try:
                feature_maps = backbone.reid_batch(dataset.images[batch])
                embeddings = backbone.embed(feature_maps, config.reid_p, config.eps)
                ce, triplet = stream1_loss_parts(embeddings, labels[batch], backbone.classify(embeddings), margin)
                loss = ce + triplet
                loss.backward()
                optimizer.step()
            except (NonFinite, NonFiniteLoss) as e:
                _abort(out_dir, "stream1", last_good, ckpt_config, f"epoch {epoch}: {e}")
            if not all(np.all(np.isfinite(p.data)) for p in params.values()):
                _abort(out_dir, "stream1", last_good, ckpt_config, f"epoch {epoch}: weights became non-finite")
            last_good = backbone.state_dict("s1.")
            totals += [float(loss.data), float(ce.data), float(triplet.data)]
        means = totals / max(1, len(batches))
        row = dict(zip(STREAM1_COLUMNS, [epoch, *means]))
        rows.append(row)
        if out_dir is not None:
            _append_row(out_dir / "telemetry_stream1.csv", STREAM1_COLUMNS, row, first=epoch == 1)
        logger.info(f"stream1 epoch {epoch}/{config.epochs}: loss {means[0]:.4f} "
                    f"(ce {means[1]:.4f}, triplet {means[2]:.4f})")

    checkpoint = None
    if out_dir is not None:
        checkpoint = save_checkpoint(out_dir / "stream1", backbone.state_dict("s1."), ckpt_config)
    return TrainingResult(pd.DataFrame(rows, columns=STREAM1_COLUMNS), checkpoint,
                          parameter_digest(backbone.stream1_parameters()))

def stream2_checkpoint_config(backbone: TwoStreamBackbone, head: AttributeDecomposeHead,
                              config: TrainConfig, loss_config: LossConfig, adh_init: str) -> dict:
    return {
        "phase": "stream2",
        "backbone": backbone.config.to_dict(),
        "activation": {"k": head.activation.K, "t": head.activation.T},
        "adh": {"init": adh_init, "attribute_count": head.attribute_count},
        "pooling": {"gem_p": config.gem_p, "stream1_gem_p": config.stream1_gem_p, "eps": config.eps},
        "loss": {"alpha": loss_config.alpha, "beta": loss_config.beta, "v": loss_config.v,
                 "lambda_variant": loss_config.lambda_variant},
        "freeze_shared": config.freeze_shared,
    }


def stream2_state(backbone: TwoStreamBackbone, head: AttributeDecomposeHead, freeze_shared: bool) -> Dict[str, np.ndarray]:
    state = backbone.state_dict("s2.")
    state.update(head.state_dict())
    if not freeze_shared:
        state.update({n: p.data.copy() for n, p in backbone.shared_parameters().items()})
    return state


def stream2_batch_objective(backbone: TwoStreamBackbone, head: AttributeDecomposeHead, dataset: ReIDDataset,
                            batch: PairBatch, config: TrainConfig, loss_config: LossConfig):
    """L_total for one pair batch: Stream-2 attention masks the Stream-1 maps"""
    images = dataset.images[batch.indices]
    if config.freeze_shared:
        with no_grad():
            trunk = backbone.shared_trunk(images)
            reid_maps = backbone.reid_tail(trunk)
    else:
        trunk = backbone.shared_trunk(images)
        reid_maps = backbone.reid_tail(trunk)
    with no_grad():
        embeddings = backbone.embed(reid_maps, config.reid_p, config.eps)
        d = l2_norm(embeddings[batch.left] - embeddings[batch.right], axis=-1).data
    attention = head(backbone.explainable_tail(trunk))
    descriptors = attribute_descriptors(reid_maps, attention, config.gem_p, config.eps)
    d_k = pair_attribute_distances(descriptors, batch.left, batch.right)
    bits = dataset.attributes[batch.indices]
    xor = np.bitwise_xor(bits[batch.left], bits[batch.right])
    return batch_objective(d, d_k, xor, loss_config)


def train_stream2(dataset: ReIDDataset, backbone: TwoStreamBackbone, head: AttributeDecomposeHead,
                  config: TrainConfig, loss_config: LossConfig, out_dir: Optional[Union[str, Path]] = None,
                  adh_init: str = "uniform_share") -> TrainingResult:
    """Fit Stream 2's own stages and the ADH to the frozen Stream-1 distances.

    Only s2.* and adh.* move (plus the shared stages when freeze_shared is
    off); the Stream-1 digest is checked before returning.
    """
    if dataset.attributes.shape[1] != head.attribute_count:
        raise ConfigError(f"ADH predicts {head.attribute_count} maps, dataset has "
                          f"{dataset.attributes.shape[1]} attribute bits")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_config = stream2_checkpoint_config(backbone, head, config, loss_config, adh_init)
    digest_before = parameter_digest(backbone.stream1_parameters())

    params = dict(backbone.stream2_parameters())
    params.update(head.params)
    if not config.freeze_shared:
        logger.warning("stream2: shared stages are trainable; Stream-1 outputs will change")
        params.update(backbone.shared_parameters())
    optimizer = build_optimizer(config.optimizer, params, config.learning_rate, config.momentum)
    sampler = PairSampler(dataset.labels, dataset.platforms, config.ids_per_batch, config.seed)

    rows = []
    for epoch in range(1, config.epochs + 1):
        sums = np.zeros(4)
        pairs = degenerate = 0
        last_good = stream2_state(backbone, head, config.freeze_shared)
        for batch in sampler.epoch():
            optimizer.zero_grad()
            try:
                objective, breakdown = stream2_batch_objective(backbone, head, dataset, batch, config, loss_config)
                objective.backward()
                optimizer.step()
            except (NonFinite, NonFiniteLoss) as e:
                _abort(out_dir, "stream2", last_good, ckpt_config, f"epoch {epoch}: {e}")
            if not all(np.all(np.isfinite(p.data)) for p in params.values()):
                _abort(out_dir, "stream2", last_good, ckpt_config, f"epoch {epoch}: weights became non-finite")
            last_good = stream2_state(backbone, head, config.freeze_shared)
            # pair-weighted mean over the epoch; prior columns carry their balance factors
            n = breakdown.pair_count
            sums += n * np.array([breakdown.total, breakdown.l_d, loss_config.alpha * breakdown.l_p1,
                                  loss_config.beta * breakdown.l_p2])
            pairs += n
            degenerate += breakdown.degenerate_count
        means = sums / max(1, pairs)
        row = dict(zip(STREAM2_COLUMNS, [epoch, *means, degenerate / max(1, pairs)]))
        rows.append(row)
        if out_dir is not None:
            _append_row(out_dir / "telemetry_stream2.csv", STREAM2_COLUMNS, row, first=epoch == 1)
        if degenerate:
            logger.debug(f"stream2 epoch {epoch}: {degenerate} degenerate pairs skipped by the prior losses")
        logger.info(f"stream2 epoch {epoch}/{config.epochs}: L {means[0]:.4f} (L_d {means[1]:.4f}, "
                    f"L_p1 {means[2]:.4f}, L_p2 {means[3]:.4f})")

    digest_after = parameter_digest(backbone.stream1_parameters())
    if config.freeze_shared and digest_after != digest_before:
        raise ReIDError("Stream-1 parameters changed while frozen")
    checkpoint = None
    if out_dir is not None:
        checkpoint = save_checkpoint(out_dir / "stream2", stream2_state(backbone, head, config.freeze_shared),
                                     ckpt_config)
    return TrainingResult(pd.DataFrame(rows, columns=STREAM2_COLUMNS), checkpoint, digest_after)
