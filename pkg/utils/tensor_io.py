"""ATRT tensor files and checkpoint directories.

ATRT layout: b"ATRT", version u8, rank u8, one little-endian u32 per dim,
then the row-major little-endian float64 payload.
"""
import logging
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import yaml

from utils.errors import MissingArtifact, ParseError

logger = logging.getLogger(__name__)

MAGIC = b"ATRT"
VERSION = 1
MANIFEST_NAME = "manifest.yaml"

PathLike = Union[str, Path]


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.ascontiguousarray(array, dtype="<f8")
    if array.ndim > 255:
        raise ParseError(f"rank {array.ndim} does not fit the ATRT header")
    header = MAGIC + bytes([VERSION, array.ndim])
    return header + np.asarray(array.shape, dtype="<u4").tobytes() + array.tobytes()


def decode_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < 6 or blob[:4] != MAGIC:
        raise ParseError("not an ATRT tensor (bad magic)")
    version, rank = blob[4], blob[5]
    if version != VERSION:
        raise ParseError(f"unsupported ATRT version {version}")
    shape_end = 6 + 4 * rank
    if len(blob) < shape_end:
        raise ParseError("truncated ATRT shape header")
    shape = tuple(int(d) for d in np.frombuffer(blob[6:shape_end], dtype="<u4"))
    expected = 8 * int(np.prod(shape, dtype=np.int64))
    payload = blob[shape_end:]
    if len(payload) != expected:
        raise ParseError(f"ATRT payload has {len(payload)} bytes, shape {shape} needs {expected}")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def save_tensor(path: PathLike, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(array))


def load_tensor(path: PathLike) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact("tensor file", path)
    return decode_tensor(path.read_bytes())


def save_checkpoint(directory: PathLike, params: Dict[str, np.ndarray], config: Optional[dict] = None) -> Path:
    """Write one .atrt per parameter plus a manifest naming shapes and config"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, value in params.items():
        filename = f"{name}.atrt"
        save_tensor(directory / filename, value)
        entries.append({"name": name, "shape": [int(d) for d in np.shape(value)], "file": filename})
    manifest = {"format": "atrt-checkpoint", "version": VERSION, "config": config or {}, "parameters": entries}
    with open(directory / MANIFEST_NAME, "w") as fh:
        yaml.safe_dump(manifest, fh, sort_keys=False)
    logger.info(f"Saved checkpoint with {len(entries)} parameters to {directory}")
    return directory


def load_checkpoint(directory: PathLike) -> Tuple[Dict[str, np.ndarray], dict]:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise MissingArtifact("checkpoint manifest", manifest_path)
    with open(manifest_path) as fh:
        manifest = yaml.safe_load(fh) or {}
    params = {}
    for entry in manifest.get("parameters", []):
        value = load_tensor(directory / entry["file"])
        if list(value.shape) != list(entry["shape"]):
            raise ParseError(f"parameter {entry['name']} has shape {value.shape}, manifest says {entry['shape']}")
        params[entry["name"]] = value
    return params, manifest.get("config", {})
