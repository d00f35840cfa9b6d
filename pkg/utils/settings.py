import copy
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

import yaml

from utils.errors import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = Path(__file__).resolve().parent.parent / "config.yaml"


def _merge(base: Dict[str, Any], overlay: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in overlay.items():
        dotted = f"{prefix}{key}"
        if key not in merged:
            raise ConfigError(f"unknown config key: {dotted}")
        if isinstance(merged[key], dict) and isinstance(value, dict):
            merged[key] = _merge(merged[key], value, prefix=f"{dotted}.")
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def read_yaml(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a mapping at the top level")
    return data


def load_settings(overlay_path: Optional[Union[str, Path]] = None,
                  overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Defaults from config.yaml, then an optional YAML overlay, then flag overrides.

    `overrides` maps dotted keys ("loss.alpha") to values; None values are
    ignored so unset CLI flags keep the file value.
    """
    settings = read_yaml(DEFAULT_CONFIG_PATH)
    if overlay_path is not None:
        settings = _merge(settings, read_yaml(overlay_path))
        logger.info(f"Applied config overlay {overlay_path}")
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        nested: Dict[str, Any] = value
        for part in reversed(dotted.split(".")):
            nested = {part: nested}
        settings = _merge(settings, nested)
    return settings


def write_config_echo(settings: Dict[str, Any], directory: Union[str, Path]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "config_echo.yaml"
    with open(path, "w") as fh:
        yaml.safe_dump(settings, fh, sort_keys=True)
    return path
