"""Access to the bundled synthetic networks and fire schedules."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

from .errors import ConfigError

_BUILTIN = {
    "toy4": "toy4.json",
    "toy8": "toy8.json",
    "oracle6": "oracle6.json",
    "synth54": "synth54.json",
    "toy4_fire": "toy4_fire.json",
    "toy8_fire": "toy8_fire.json",
    "oracle6_fire": "oracle6_fire.json",
    "synth54_fire": "synth54_fire.json",
}


def dataset_path(name: str) -> Path:
    """Path of a bundled dataset, or the path itself if it points to a file."""
    p = Path(name)
    if p.exists():
        return p
    if name in _BUILTIN:
        with resources.as_file(resources.files("pspsplan") / "data" / _BUILTIN[name]) as fp:
            return Path(fp)
    raise ConfigError(f"unknown dataset '{name}' (not a file, not a builtin)")


def builtin_names() -> list[str]:
    return sorted(_BUILTIN)
