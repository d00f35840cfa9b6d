"""Procedural person images whose pixels are driven by the attribute labels.

A figure is painted into four horizontal bands (head, torso, legs, feet);
each attribute controls colour or shape inside one band only. Aerial views
are the ground rendering downscaled, squashed towards the bottom of the
frame and brightened. Per-image randomness (a one-pixel horizontal shift,
an illumination gain and the additive noise) comes from a splitmix64 chain
seeded with the master seed, so a dataset is a pure function of its spec.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Tuple, Union

import numpy as np
import pandas as pd
from PIL import Image

from utils.attributes import AttributeSchema, write_attribute_table, write_schema
from utils.dataset import PLATFORMS, DatasetManifest, build_records, save_image, write_manifest
from utils.errors import InvalidParam

logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1

PALETTE = np.array([
    [0.85, 0.10, 0.10],  # red
    [0.10, 0.70, 0.20],  # green
    [0.10, 0.20, 0.85],  # blue
    [0.95, 0.85, 0.10],  # yellow
    [0.10, 0.80, 0.85],  # cyan
    [0.80, 0.10, 0.75],  # magenta
    [0.95, 0.50, 0.05],  # orange
    [0.40, 0.05, 0.55],  # purple
    [0.95, 0.95, 0.95],  # white
    [0.05, 0.05, 0.05],  # black
    [0.50, 0.28, 0.08],  # brown
    [0.95, 0.60, 0.72],  # pink
])
BACKGROUND = np.array([0.55, 0.60, 0.55])
SKIN = np.array([0.87, 0.68, 0.55])

BANDS = {"head": (0.0, 0.2), "torso": (0.2, 0.55), "legs": (0.55, 0.88), "feet": (0.88, 1.0)}
KNOWN_ATTRIBUTES = frozenset({
    "gender", "age_group", "height", "build", "hair_color", "hair_length", "upper_color", "upper_type",
    "lower_color", "lower_type", "shoe_color", "shoe_type", "bag", "headwear", "accessory",
})


@dataclass(frozen=True)
class AerialTransform:
    downscale: float = 0.5
    squash: float = 0.8
    brightness: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.downscale <= 1.0:
            raise InvalidParam(f"aerial downscale must lie in (0, 1], got {self.downscale}")
        if not 0.0 < self.squash <= 1.0:
            raise InvalidParam(f"aerial squash must lie in (0, 1], got {self.squash}")
        if not -1.0 <= self.brightness <= 1.0:
            raise InvalidParam(f"aerial brightness shift must lie in [-1, 1], got {self.brightness}")


@dataclass(frozen=True)
class SyntheticSpec:
    id_count: int = 20
    images_per_id_per_platform: int = 8
    image_size: Tuple[int, int] = (64, 32)
    noise_level: float = 0.05
    aerial_transform: AerialTransform = field(default_factory=AerialTransform)
    seed: int = 7
    cameras_per_platform: int = 1
    image_format: str = "png"

    def __post_init__(self):
        if self.id_count < 2:
            raise InvalidParam(f"synthetic data needs at least 2 identities, got {self.id_count}")
        if self.images_per_id_per_platform < 1:
            raise InvalidParam("images_per_id_per_platform must be >= 1")
        height, width = self.image_size
        if height < 32 or width < 16:
            raise InvalidParam(f"image size must be at least (32, 16), got {self.image_size}")
        if not 0.0 <= self.noise_level < 1.0:
            raise InvalidParam(f"noise_level must lie in [0, 1), got {self.noise_level}")
        if self.cameras_per_platform < 1:
            raise InvalidParam("cameras_per_platform must be >= 1")
        if self.image_format not in ("png", "atrt"):
            raise InvalidParam(f"image_format must be png or atrt, got {self.image_format}")
        if not 0 <= self.seed <= MASK64:
            raise InvalidParam(f"seed must fit in 64 bits, got {self.seed}")


@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    manifest: DatasetManifest
    images: Dict[str, np.ndarray]
    schema: AttributeSchema
    spec: SyntheticSpec


def splitmix64(state: int) -> Tuple[int, int]:
    """One splitmix64 step: (next state, output)"""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def image_seeds(master_seed: int, count: int) -> List[int]:
    state, seeds = master_seed & MASK64, []
    for _ in range(count):
        state, value = splitmix64(state)
        seeds.append(value)
    return seeds


def band_rows(height: int, band: str) -> slice:
    lo, hi = BANDS[band]
    return slice(int(round(lo * height)), int(round(hi * height)))


def _colour(index: int) -> np.ndarray:
    return PALETTE[int(index) % len(PALETTE)]


def render_person(values: Mapping[str, int], size: Tuple[int, int], image_seed: int) -> np.ndarray:
    """Noise-free ground-view rendering, 3×H×W in [0, 1].

    `values` maps attribute names to raw category indices; names outside the
    built-in set are drawn as marker columns in the torso band's left margin.
    """
    height, width = size
    rng = np.random.default_rng(image_seed)
    shift = int(rng.integers(-1, 2))
    gain = float(rng.uniform(0.95, 1.05))

    def get(name: str, default: int = 0) -> int:
        return int(values.get(name, default))

    canvas = np.empty((height, width, 3))
    canvas[:] = BACKGROUND
    body_width = int(round(width * (0.45, 0.6, 0.75)[get("build", 1) % 3]))
    x0 = max(0, int(round(width / 2 - body_width / 2)) + shift)
    x1 = min(width, x0 + body_width)

    head = band_rows(height, "head")
    head_len = head.stop - head.start
    face_width = int(round(width * (0.3, 0.4)[get("gender") % 2]))
    f0 = max(0, (x0 + x1) // 2 - face_width // 2)
    f1 = min(width, f0 + face_width)
    canvas[head, f0:f1] = SKIN * (1.0 - 0.08 * get("age_group"))
    hair_rows = max(1, int(round(head_len * (get("hair_length") + 1) / 5)))
    canvas[head.start:head.start + hair_rows, f0:f1] = _colour(get("hair_color") + 9)
    if get("headwear"):
        hat_rows = max(1, head_len // 5)
        canvas[head.start:head.start + hat_rows, max(0, f0 - 1):min(width, f1 + 1)] = _colour(get("headwear") + 7)

    torso = band_rows(height, "torso")
    torso_len = torso.stop - torso.start
    canvas[torso, x0:x1] = _colour(get("upper_color"))
    stripe = get("upper_type")
    if stripe:
        rows = [r for r in range(torso.start, torso.stop) if (r - torso.start) % (stripe + 1) == 0]
        canvas[rows, x0:x1] *= 0.9
    if get("bag"):
        for r in range(torso.start, torso.stop):
            c = x0 + (r - torso.start) * max(1, x1 - x0 - 1) // max(1, torso_len - 1)
            canvas[r, min(c, x1 - 1)] = _colour(get("bag") + 5)
    if get("accessory"):
        canvas[torso.start + 1:torso.start + 3, x0:x0 + 2] = _colour(get("accessory") + 2)
    unknown = [name for name in values if name not in KNOWN_ATTRIBUTES]
    for j, name in enumerate(unknown):
        if x0 > 0 and get(name):
            canvas[torso, j % x0] = _colour(get(name))

    legs = band_rows(height, "legs")
    leg_rows = int(round((legs.stop - legs.start) * (0.8 + 0.1 * (get("height", 1) % 3))))
    leg_end = min(legs.stop, legs.start + leg_rows)
    canvas[legs.start:leg_end, x0:x1] = _colour(get("lower_color"))
    lower_type = get("lower_type")
    gap = lower_type % 3
    if gap:
        mid = (x0 + x1) // 2
        canvas[legs.start:leg_end, mid - gap // 2:mid - gap // 2 + gap] = BACKGROUND
    if lower_type >= 3:
        canvas[leg_end - leg_rows // 3:leg_end, x0:x1] = SKIN

    feet = band_rows(height, "feet")
    inset = get("shoe_type") // 2
    canvas[feet, min(x0 + inset, x1 - 1):max(x1 - inset, x0 + 1)] = _colour(get("shoe_color") + 4)

    return np.clip(canvas * gain, 0.0, 1.0).transpose(2, 0, 1)


def aerial_view(image: np.ndarray, transform: AerialTransform) -> np.ndarray:
    """Downscale, squash to the bottom of the frame, shift brightness"""
    _, height, width = image.shape
    small = (max(1, int(round(width * transform.downscale))), max(1, int(round(height * transform.downscale))))
    target_height = max(1, int(round(height * transform.squash)))
    out = np.empty_like(image)
    out[:] = BACKGROUND[:, None, None]
    for ch in range(3):
        plane = Image.fromarray(image[ch].astype(np.float32))
        plane = plane.resize(small, Image.Resampling.BILINEAR).resize((width, target_height),
                                                                      Image.Resampling.BILINEAR)
        out[ch, height - target_height:, :] = np.asarray(plane, dtype=np.float64)
    return np.clip(out + transform.brightness, 0.0, 1.0)


def synthesize_image(values: Mapping[str, int], platform: str, spec: SyntheticSpec, image_seed: int) -> np.ndarray:
    image = render_person(values, spec.image_size, image_seed)
    if platform == "aerial":
        image = aerial_view(image, spec.aerial_transform)
    if spec.noise_level > 0:
        rng = np.random.default_rng([image_seed, 1])
        image = np.clip(image + spec.noise_level * rng.standard_normal(image.shape), 0.0, 1.0)
    return image


def draw_identities(spec: SyntheticSpec, schema: AttributeSchema) -> Dict[str, Tuple[int, ...]]:
    """Distinct random raw attribute tuples, one per identity"""
    rng = np.random.default_rng(spec.seed)
    limits = [2 if card == 1 else card for _, card in schema.attributes]
    table: Dict[str, Tuple[int, ...]] = {}
    seen = set()
    for i in range(spec.id_count):
        raw = tuple(int(rng.integers(0, n)) for n in limits)
        for _ in range(100):
            if raw not in seen:
                break
            raw = tuple(int(rng.integers(0, n)) for n in limits)
        seen.add(raw)
        table[f"{i:04d}"] = raw
    return table


def generate_synthetic(spec: SyntheticSpec, schema: AttributeSchema, threads: int = 1) -> SyntheticDataset:
    table = draw_identities(spec, schema)
    jobs = []
    for pid, raw in table.items():
        values = dict(zip(schema.names, raw))
        for platform in PLATFORMS:
            for j in range(spec.images_per_id_per_platform):
                jobs.append((pid, platform, j, values))
    seeds = image_seeds(spec.seed, len(jobs))

    def make(job_index: int) -> np.ndarray:
        _, platform, _, values = jobs[job_index]
        return synthesize_image(values, platform, spec, seeds[job_index])

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        rendered = list(pool.map(make, range(len(jobs))))

    rows, images = [], {}
    for (pid, platform, j, _), image in zip(jobs, rendered):
        image_id = f"{pid}_{platform[0]}{j:02d}"
        camera = f"{platform[0].upper()}{j % spec.cameras_per_platform}"
        rows.append([f"images/{image_id}.{spec.image_format}", pid, platform, camera, j])
        images[image_id] = image
    frame = pd.DataFrame(rows, columns=["image_path", "person_id", "platform", "camera_id", "frame_index"])
    manifest = DatasetManifest(build_records(frame), table)
    logger.info(f"Generated {len(images)} synthetic images for {spec.id_count} identities (seed {spec.seed})")
    return SyntheticDataset(manifest, images, schema, spec)


def write_synthetic(dataset: SyntheticDataset, directory: Union[str, Path]) -> Path:
    """images/, manifest.csv, attributes.csv, schema.txt and an empty exclusions.txt"""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    for row in dataset.manifest.records.itertuples(index=False):
        save_image(directory / row.image_path, dataset.images[row.image_id])
    write_manifest(directory / "manifest.csv", dataset.manifest.records)
    write_attribute_table(directory / "attributes.csv", dataset.manifest.attribute_table, dataset.schema)
    write_schema(directory / "schema.txt", dataset.schema)
    (directory / "exclusions.txt").write_text("")
    logger.info(f"Wrote synthetic dataset to {directory}")
    return directory / "manifest.csv"
