"""
Flat ``dotted.key = value`` experiment files.

Sections: data.*, split.*, model.fm.*, model.sm.*, adaptation.*, experiment.*
and grid.<entry>.<adaptation key>. Lines starting with '#' are comments,
lists are comma separated and ``none`` stands for an absent value.
"""

import logging
from enum import Enum
from pathlib import Path
from typing import Any, Optional

from pydantic import BaseModel, ValidationError
from rapidfuzz import fuzz

from fused_sfda.classes.exceptions import ConfigError
from fused_sfda.classes.helper_classes import (
    AdaptationConfig,
    DataSpec,
    ExperimentSection,
    ExperimentSpec,
    FMEncoderConfig,
    SMEncoderConfig,
    SplitSpec,
)
from fused_sfda.utils.file_utils import write_text

SECTIONS: dict[str, type[BaseModel]] = {
    "data": DataSpec,
    "split": SplitSpec,
    "model.fm": FMEncoderConfig,
    "model.sm": SMEncoderConfig,
    "adaptation": AdaptationConfig,
    "experiment": ExperimentSection,
}

RESOLVED_CONFIG_NAME = "config.resolved.cfg"


def known_keys() -> list[str]:
    return [
        f"{section}.{name}"
        for section, model in SECTIONS.items()
        for name in model.model_fields
    ]


def suggest_key(key: str, candidates: list[str], threshold: int = 60) -> Optional[str]:
    """
    The closest known key by fuzzy ratio, or None when nothing reaches the
    threshold.
    """
    best_score = 0.0
    best_match = None
    for candidate in candidates:
        score = fuzz.ratio(key, candidate)
        if score > best_score:
            best_match = candidate
            best_score = score
    if best_score >= threshold:
        return best_match
    return None


def _config_error(e: ValidationError, prefix: str = "") -> ConfigError:
    first = e.errors()[0]
    loc = ".".join(str(part) for part in first["loc"])
    key_path = ".".join(part for part in (prefix, loc) if part) or "config"
    return ConfigError(key_path, first["msg"])


def _insert(nested: dict[str, Any], section: str, name: str, value: str) -> None:
    node = nested
    for part in section.split("."):
        node = node.setdefault(part, {})
    node[name] = value


def _typed_grid(
    adaptation: dict[str, Any], grid: dict[str, dict[str, Any]]
) -> dict[str, dict[str, Any]]:
    """Validates every grid entry against the base adaptation settings."""
    try:
        base = AdaptationConfig.model_validate(adaptation)
    except ValidationError as e:
        raise _config_error(e, "adaptation") from e
    typed: dict[str, dict[str, Any]] = {}
    for entry, overrides in grid.items():
        try:
            resolved = base.with_overrides(overrides).model_dump(mode="json")
        except ValidationError as e:
            raise _config_error(e, f"grid.{entry}") from e
        typed[entry] = {key: resolved[key] for key in overrides}
    return typed


def parse_config_text(text: str) -> ExperimentSpec:
    """
    Parses experiment text strictly. Absent keys take their defaults.

    Raises:
        ConfigError: On a malformed line, a repeated or unknown key, a type
            mismatch or an out-of-range value; always names the key path.
    """
    nested: dict[str, Any] = {}
    grid: dict[str, dict[str, Any]] = {}
    seen: set[str] = set()
    keys = known_keys()
    adaptation_fields = list(AdaptationConfig.model_fields)

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", "expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in seen:
            raise ConfigError(key, "given more than once")
        seen.add(key)

        if key.startswith("grid."):
            parts = key.split(".")
            if len(parts) != 3:
                raise ConfigError(key, "grid keys look like grid.<entry>.<adaptation key>")
            _, entry, name = parts
            if not entry.isidentifier():
                raise ConfigError(key, f"grid entry name '{entry}' is not an identifier")
            if name not in adaptation_fields:
                suggestion = suggest_key(name, adaptation_fields)
                raise ConfigError(
                    key,
                    "unknown key",
                    f"grid.{entry}.{suggestion}" if suggestion else None,
                )
            grid.setdefault(entry, {})[name] = value
            continue

        section, _, name = key.rpartition(".")
        model = SECTIONS.get(section)
        if model is None or name not in model.model_fields:
            raise ConfigError(key, "unknown key", suggest_key(key, keys))
        _insert(nested, section, name, value)

    nested["grid"] = _typed_grid(nested.get("adaptation", {}), grid)
    try:
        return ExperimentSpec.model_validate(nested)
    except ValidationError as e:
        raise _config_error(e) from e


def parse_config(path: Path) -> ExperimentSpec:
    spec = parse_config_text(Path(path).read_text(encoding="utf-8"))
    logging.info(f"Parsed experiment '{spec.experiment.name}' from {path}")
    return spec


def format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ", ".join(format_value(v) for v in value)
    return str(value)


def echo_config(spec: ExperimentSpec) -> str:
    """Every key with its resolved value, in the same flat format parse reads."""
    lines = ["# Resolved experiment configuration"]
    for section in SECTIONS:
        node: Any = spec
        for part in section.split("."):
            node = getattr(node, part)
        lines.append("")
        for name in type(node).model_fields:
            lines.append(f"{section}.{name} = {format_value(getattr(node, name))}")
    if spec.grid:
        lines.append("")
    for entry, overrides in spec.grid.items():
        for name, value in overrides.items():
            lines.append(f"grid.{entry}.{name} = {format_value(value)}")
    return "\n".join(lines) + "\n"


def write_resolved_config(spec: ExperimentSpec, out_dir: Path) -> Path:
    return write_text(echo_config(spec), Path(out_dir) / RESOLVED_CONFIG_NAME)
