"""
Run Configuration
Config type for every command, the flat `key = value` config-file format and
override precedence: command line > config file > preset defaults
"""

import logging
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, Optional, Tuple, Union

from dotenv import load_dotenv

from dream_config import get_consistency_settings, get_run_defaults
from errors import MissingInputError, ValidationError
from flowlab import ConsistencyThresholds
from pipeline import DreamSettings, EffectPreset, resolve_preset

logger = logging.getLogger(__name__)

PRESET_OVERRIDES = ("alpha", "beta", "gamma", "delta", "offsets", "init_policy", "k_base", "k_over")
CONSISTENCY_KEYS = tuple(get_consistency_settings())
PATH_KEYS = ("network", "weights", "input", "output", "frames", "flows", "out")

# spellings accepted in config files and on the command line
ALIASES = {"class": "class_index", "j": "offsets", "lr": "learning_rate", "threshold": "shot_threshold"}


def _parse_bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_offsets(text: str) -> Tuple[int, ...]:
    parts = [part for part in text.replace("{", "").replace("}", "").replace(",", " ").split() if part]
    return tuple(int(part) for part in parts)


@dataclass
class Config:
    """Effective settings of one command; None means "use the preset or dream_config default" """

    preset: str = get_run_defaults()["preset"]
    class_index: int = 0
    seed: int = get_run_defaults()["seed"]

    # preset overrides
    alpha: Optional[float] = None
    beta: Optional[float] = None
    gamma: Optional[float] = None
    delta: Optional[float] = None
    offsets: Optional[Tuple[int, ...]] = None
    init_policy: Optional[str] = None
    k_base: Optional[int] = None
    k_over: Optional[int] = None

    # optimizer and scheduling
    learning_rate: Optional[float] = None
    n_origins: Optional[int] = None
    n_steps: Optional[int] = None
    tile_workers: Optional[int] = None

    # objective
    objective: Optional[str] = None
    layer: Optional[int] = None
    feature_map: Optional[int] = None
    masked_trail: Optional[bool] = None

    # consistency
    shot_threshold: Optional[float] = None
    disagreement_scale: Optional[float] = None
    disagreement_offset: Optional[float] = None
    motion_scale: Optional[float] = None
    motion_offset: Optional[float] = None

    record_timing: Optional[bool] = None

    # paths
    network: Optional[str] = None
    weights: Optional[str] = None
    input: Optional[str] = None
    output: Optional[str] = None
    frames: Optional[str] = None
    flows: Optional[str] = None
    out: Optional[str] = None

    def effective_preset(self) -> EffectPreset:
        overrides = {key: getattr(self, key) for key in PRESET_OVERRIDES if getattr(self, key) is not None}
        return resolve_preset(self.preset).with_overrides(**overrides)

    def dream_settings(self) -> DreamSettings:
        keys = ("objective", "layer", "feature_map", "masked_trail", "tile_workers", "n_origins", "n_steps",
                "learning_rate", "shot_threshold", "record_timing")
        overrides: Dict[str, Any] = {key: getattr(self, key) for key in keys if getattr(self, key) is not None}
        consistency = {key: getattr(self, key) for key in CONSISTENCY_KEYS if getattr(self, key) is not None}
        return DreamSettings.defaults(
            class_index=self.class_index,
            seed=self.seed,
            thresholds=ConsistencyThresholds.from_settings(consistency),
            **overrides,
        )

    def validate(self) -> "Config":
        """Run every override through the preset and settings constructors"""
        self.effective_preset()
        self.dream_settings()
        return self

    def require_paths(self, names: Iterable[str]) -> Dict[str, Path]:
        """Resolve path keys before a run starts; unset keys are a validation error, absent files missing input"""
        unset = [name for name in names if getattr(self, name) is None]
        if unset:
            raise ValidationError(f"Missing required setting(s): {', '.join('--' + n for n in unset)}")
        resolved = {name: Path(getattr(self, name)).expanduser().resolve() for name in names}
        absent = [str(path) for name, path in resolved.items() if name not in ("output", "out") and not path.exists()]
        if absent:
            raise MissingInputError(f"Input not found: {', '.join(absent)}", absent)
        return resolved

    def to_dict(self) -> Dict[str, Any]:
        """Effective values echoed into manifests: preset constants after overrides plus run settings"""
        data = {key: value for key, value in asdict(self).items() if key not in PRESET_OVERRIDES}
        preset = self.effective_preset().to_dict()
        preset.pop("name")
        data.update(preset)
        settings = self.dream_settings()
        for key in ("objective", "layer", "feature_map", "masked_trail", "tile_workers", "n_origins", "n_steps",
                    "learning_rate", "shot_threshold", "record_timing"):
            data[key] = getattr(settings, key)
        data.update(asdict(settings.thresholds))
        # paths are machine specific and would break byte-stable manifests
        for key in PATH_KEYS:
            data.pop(key, None)
        return data


INT_KEYS = ("class_index", "seed", "k_base", "k_over", "n_origins", "n_steps", "tile_workers", "layer", "feature_map")
FLOAT_KEYS = ("alpha", "beta", "gamma", "delta", "learning_rate", "shot_threshold") + CONSISTENCY_KEYS
BOOL_KEYS = ("masked_trail", "record_timing")


def _field_parsers() -> Dict[str, Callable[[str], Any]]:
    parsers: Dict[str, Callable[[str], Any]] = {item.name: str for item in fields(Config)}
    parsers.update({key: int for key in INT_KEYS})
    parsers.update({key: float for key in FLOAT_KEYS})
    parsers.update({key: _parse_bool for key in BOOL_KEYS})
    parsers["offsets"] = parse_offsets
    return parsers


def normalize_key(key: str) -> str:
    key = key.strip().lower().replace("-", "_")
    return ALIASES.get(key, key)


def parse_value(key: str, text: str) -> Any:
    """Typed value of one config key"""
    name = normalize_key(key)
    parsers = _field_parsers()
    if name not in parsers:
        raise ValidationError(f"Unknown config key: {key}")
    try:
        return parsers[name](text.strip())
    except ValueError as e:
        raise ValidationError(f"Invalid value for {key}: {text.strip()!r} ({e})") from e


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, Any]:
    """Parse `key = value` lines; `#` starts a comment, blank lines are ignored"""
    values: Dict[str, Any] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{source}:{number}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        values[normalize_key(key)] = parse_value(key, value)
    return values


def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"Config file not found: {path}", [str(path)])
    logger.info(f"Loading config file {path}")
    return parse_config_text(path.read_text(), str(path))


def build_config(cli_values: Optional[Dict[str, Any]] = None, config_path: Optional[Union[str, Path]] = None) -> Config:
    """
    Merge config sources. Values left at None on the command line fall back to
    the config file (explicit path, else LUCID_CONFIG), then to the preset table
    and dream_config defaults.
    """
    load_dotenv()
    if config_path is None:
        config_path = os.getenv("LUCID_CONFIG") or None

    merged: Dict[str, Any] = {}
    if config_path:
        merged.update(load_config_file(config_path))
    for key, value in (cli_values or {}).items():
        if value is not None:
            merged[normalize_key(key)] = value

    known = {item.name for item in fields(Config)}
    unknown = sorted(set(merged) - known)
    if unknown:
        raise ValidationError(f"Unknown config key(s): {', '.join(unknown)}")
    if "offsets" in merged and merged["offsets"] is not None:
        merged["offsets"] = tuple(int(j) for j in merged["offsets"])
    return Config(**merged).validate()
