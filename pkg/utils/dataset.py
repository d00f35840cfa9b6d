"""Image manifests, attribute lookup, image IO and the identity split.

Manifest CSV: image_path,person_id,platform,camera_id,frame_index. Image
paths are relative to the manifest's directory; the image id is the file
stem and must be unique.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from PIL import Image

from utils.attributes import AttributeSchema, load_attribute_table
from utils.errors import (MissingArtifact, MissingAttributes, ParseError, ShapeMismatch, TooFewIdentities,
                          UnknownImage)
from utils.tensor_io import load_tensor, save_tensor

logger = logging.getLogger(__name__)

PLATFORMS = ("aerial", "ground")
MANIFEST_COLUMNS = ["image_path", "person_id", "platform", "camera_id", "frame_index"]

PathLike = Union[str, Path]


@dataclass(frozen=True, eq=False)
class DatasetManifest:
    """Validated records plus person_id -> raw attribute indices.

    `records` holds the manifest columns plus `image_id` (file stem) and
    `label` (dense identity index in sorted person_id order).
    """
    records: pd.DataFrame
    attribute_table: Dict[str, Tuple[int, ...]]
    root: Path = Path(".")
    exclusions: Tuple[str, ...] = ()

    @property
    def person_ids(self) -> List[str]:
        return sorted(self.records["person_id"].unique())

    def __len__(self) -> int:
        return len(self.records)

    def record(self, image_id: str) -> pd.Series:
        rows = self.records[self.records["image_id"] == image_id]
        if rows.empty:
            raise UnknownImage(f"image {image_id!r} is not in the manifest")
        return rows.iloc[0]

    def image_path(self, image_id: str) -> Path:
        return self.root / self.record(image_id)["image_path"]


def build_records(frame: pd.DataFrame) -> pd.DataFrame:
    frame = frame[MANIFEST_COLUMNS].copy()
    frame["image_id"] = [Path(p).stem for p in frame["image_path"]]
    ids = sorted(frame["person_id"].unique())
    labels = {pid: i for i, pid in enumerate(ids)}
    frame["label"] = frame["person_id"].map(labels).astype(np.int64)
    return frame.reset_index(drop=True)


def _validate_rows(frame: pd.DataFrame):
    # data rows start on line 2
    camera_platform: Dict[str, str] = {}
    seen: Dict[str, int] = {}
    for i, row in enumerate(frame.itertuples(index=False)):
        line = i + 2
        if any(pd.isna(v) or str(v).strip() == "" for v in row):
            raise ParseError("empty field", line=line)
        if row.platform not in PLATFORMS:
            raise ParseError(f"platform must be one of {PLATFORMS}, got {row.platform!r}", line=line)
        try:
            int(row.frame_index)
        except ValueError:
            raise ParseError(f"frame_index {row.frame_index!r} is not an integer", line=line)
        known = camera_platform.setdefault(row.camera_id, row.platform)
        if known != row.platform:
            raise ParseError(f"camera {row.camera_id} appears on both {known} and {row.platform}", line=line)
        stem = Path(row.image_path).stem
        if stem in seen:
            raise ParseError(f"image id {stem} already used on line {seen[stem]}", line=line)
        seen[stem] = line


def read_exclusions(path: PathLike) -> Tuple[str, ...]:
    """One person_id per line; blank lines and '#' comments skipped"""
    with open(path) as fh:
        ids = [line.split("#", 1)[0].strip() for line in fh]
    return tuple(i for i in ids if i)


def load_manifest(path: PathLike, attribute_path: Optional[PathLike] = None,
                  schema: Optional[AttributeSchema] = None,
                  exclusions_path: Optional[PathLike] = None) -> DatasetManifest:
    """Parse and validate a manifest and its attribute table.

    The attribute table defaults to attributes.csv next to the manifest;
    the schema to schema.txt there, else the bundled default.
    """
    path = Path(path)
    root = path.parent
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise ParseError(f"{path} is empty", line=1)
    except pd.errors.ParserError as e:
        raise ParseError(f"{path}: {e}")
    if list(frame.columns) != MANIFEST_COLUMNS:
        raise ParseError(f"header {list(frame.columns)} != {MANIFEST_COLUMNS}", line=1)
    if frame.empty:
        raise ParseError(f"{path} has no records", line=2)
    _validate_rows(frame)
    frame["frame_index"] = frame["frame_index"].astype(np.int64)

    if schema is None:
        schema_file = root / "schema.txt"
        schema = AttributeSchema.from_file(schema_file) if schema_file.exists() else AttributeSchema.default()
    attribute_path = Path(attribute_path or root / "attributes.csv")
    if not attribute_path.exists():
        raise MissingArtifact("attribute table", attribute_path)
    table = load_attribute_table(attribute_path, schema)
    missing = set(frame["person_id"]) - set(table)
    if missing:
        raise MissingAttributes(missing)

    exclusions: Tuple[str, ...] = ()
    if exclusions_path is not None:
        exclusions = read_exclusions(exclusions_path)
    elif (root / "exclusions.txt").exists():
        exclusions = read_exclusions(root / "exclusions.txt")

    records = build_records(frame)
    logger.info(f"Loaded manifest {path}: {len(records)} images, {records['person_id'].nunique()} identities")
    return DatasetManifest(records, table, root, exclusions)


def write_manifest(path: PathLike, records: pd.DataFrame) -> None:
    records[MANIFEST_COLUMNS].to_csv(path, index=False)


def load_image(path: PathLike) -> np.ndarray:
    """3×H×W float64 in [0, 1] from PNG (any Pillow format) or ATRT"""
    path = Path(path)
    if path.suffix == ".atrt":
        array = load_tensor(path)
        if array.ndim != 3 or array.shape[0] != 3:
            raise ShapeMismatch(f"{path}: expected a 3×H×W tensor, got {array.shape}")
        return array
    if not path.exists():
        raise UnknownImage(f"image file not found: {path}")
    with Image.open(path) as img:
        pixels = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return pixels.transpose(2, 0, 1)


def save_image(path: PathLike, array: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".atrt":
        save_tensor(path, array)
        return
    pixels = np.clip(np.rint(np.asarray(array).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(pixels).save(path)


@dataclass(frozen=True, eq=False)
class ReIDDataset:
    """Images stacked N×3×H×W with per-image attribute bits, rows aligned with `records`"""
    records: pd.DataFrame
    images: np.ndarray
    attributes: np.ndarray
    schema: AttributeSchema

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return self.records["label"].to_numpy()

    @property
    def platforms(self) -> np.ndarray:
        return self.records["platform"].to_numpy()

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def index_of(self, image_id: str) -> int:
        hits = np.flatnonzero(self.records["image_id"].to_numpy() == image_id)
        if len(hits) == 0:
            raise UnknownImage(f"image {image_id!r} is not in this dataset")
        return int(hits[0])

    def subset(self, rows: pd.DataFrame) -> "ReIDDataset":
        """Rows of `rows` (matched by image_id), in that order"""
        index = [self.index_of(i) for i in rows["image_id"]]
        return ReIDDataset(self.records.iloc[index].reset_index(drop=True), self.images[index],
                           self.attributes[index], self.schema)

    def relabel(self) -> "ReIDDataset":
        """Dense labels 0..n-1 over the identities present"""
        records = build_records(self.records)
        return ReIDDataset(records, self.images, self.attributes, self.schema)

    @classmethod
    def from_arrays(cls, manifest: DatasetManifest, schema: AttributeSchema,
                    images: Mapping[str, np.ndarray]) -> "ReIDDataset":
        records = manifest.records
        stacked = np.stack([np.asarray(images[i], dtype=np.float64) for i in records["image_id"]])
        bits = np.stack([schema.encode(manifest.attribute_table[p]).bits for p in records["person_id"]])
        return cls(records, stacked, bits, schema)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, schema: AttributeSchema) -> "ReIDDataset":
        images = {row.image_id: load_image(manifest.root / row.image_path)
                  for row in manifest.records.itertuples(index=False)}
        shapes = {a.shape for a in images.values()}
        if len(shapes) != 1:
            raise ShapeMismatch(f"images differ in size: {sorted(shapes)}")
        return cls.from_arrays(manifest, schema, images)


@dataclass(frozen=True, eq=False)
class SplitResult:
    train_ids: List[str]
    test_ids: List[str]
    query: pd.DataFrame
    gallery: pd.DataFrame
    excluded: List[str] = field(default_factory=list)


def train_identity_count(total: int, train_fraction: float) -> int:
    # the small offset keeps exact products like 4 * 0.5 from rounding up
    return math.ceil(total * train_fraction - 1e-9)


def split_protocol(manifest: DatasetManifest, train_fraction: float = 0.5, seed: int = 0,
                   queries_per_platform: int = 2,
                   exclusions: Optional[Sequence[str]] = None) -> SplitResult:
    """Identity-disjoint train/test split, then query/gallery within test.

    Excluded identities leave the pool; ceil(all identities * fraction) of the
    rest go to training. Per test identity and platform, up to
    `queries_per_platform` images become queries while at least one image per
    platform stays in the gallery. Identities seen on one platform only stay
    gallery-only.
    """
    if not 0.0 < train_fraction < 1.0:
        raise TooFewIdentities(f"train_fraction must lie in (0, 1), got {train_fraction}")
    excluded = sorted(set(manifest.exclusions if exclusions is None else exclusions))
    all_ids = manifest.person_ids
    eligible = [p for p in all_ids if p not in set(excluded)]
    if len(eligible) < 2:
        raise TooFewIdentities(f"need at least 2 identities after exclusions, have {len(eligible)}")
    n_train = min(max(train_identity_count(len(all_ids), train_fraction), 1), len(eligible) - 1)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(eligible))
    train_ids = sorted(eligible[i] for i in order[:n_train])
    test_ids = sorted(eligible[i] for i in order[n_train:])

    records = manifest.records
    test_rows = records[records["person_id"].isin(test_ids)]
    query_index: List[int] = []
    one_platform: List[str] = []
    for pid in test_ids:
        rows = test_rows[test_rows["person_id"] == pid]
        if rows["platform"].nunique() < len(PLATFORMS):
            one_platform.append(pid)
            continue
        for platform in PLATFORMS:
            candidates = rows[rows["platform"] == platform].sort_values(["camera_id", "frame_index", "image_id"])
            take = min(queries_per_platform, len(candidates) - 1)
            if take <= 0:
                continue
            picked = rng.choice(len(candidates), size=take, replace=False)
            query_index.extend(candidates.index[np.sort(picked)])
    if one_platform:
        logger.warning(f"{len(one_platform)} test identities appear on one platform only and stay "
                       f"gallery-only: {', '.join(one_platform)}")
    query = test_rows.loc[sorted(query_index)].reset_index(drop=True)
    gallery = test_rows.drop(index=query_index).reset_index(drop=True)
    logger.info(f"Split: {len(train_ids)} train / {len(test_ids)} test identities "
                f"({len(excluded)} excluded), {len(query)} queries, {len(gallery)} gallery images")
    return SplitResult(train_ids, test_ids, query, gallery, excluded)
