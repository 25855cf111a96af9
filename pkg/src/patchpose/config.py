"""Pipeline configuration: a flat `key = value` text format.

Blank lines and `#` comments are allowed. Every key is optional and falls
back to its default; unknown keys, duplicate keys, and unparseable values
are errors rather than silent surprises.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

ESTIMATOR_MODES = ("single", "kabsch")


@dataclass(frozen=True)
class PipelineConfig:
    subdivisions: int = 2
    similarity_threshold: float = 0.5
    ransac_delta_px: float = 14.0
    top_k: int = 5
    pad_ratio: float = 0.0
    estimator_mode: str = "single"

    def __post_init__(self):
        if not 0 <= self.subdivisions <= 4:
            raise ValueError(f"subdivisions must be in [0, 4], got {self.subdivisions}")
        if not -1.0 <= self.similarity_threshold <= 1.0:
            raise ValueError(
                f"similarity_threshold must be in [-1, 1], got {self.similarity_threshold}"
            )
        if not (self.ransac_delta_px > 0 and math.isfinite(self.ransac_delta_px)):
            raise ValueError(
                f"ransac_delta_px must be positive, got {self.ransac_delta_px}"
            )
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        if not (self.pad_ratio >= 0 and math.isfinite(self.pad_ratio)):
            raise ValueError(f"pad_ratio must be >= 0, got {self.pad_ratio}")
        if self.estimator_mode not in ESTIMATOR_MODES:
            raise ValueError(
                f"estimator_mode must be one of {ESTIMATOR_MODES}, "
                f"got {self.estimator_mode!r}"
            )


_FIELD_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _convert(key: str, text: str, line_no: int):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        return text
    except ValueError:
        raise ValueError(f"line {line_no}: cannot parse {key} value {text!r}")


def parse_config(text: str) -> PipelineConfig:
    values: dict[str, object] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"line {line_no}: expected `key = value`, got {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _FIELD_TYPES:
            raise ValueError(f"line {line_no}: unknown key {key!r}")
        if key in values:
            raise ValueError(f"line {line_no}: duplicate key {key!r}")
        values[key] = _convert(key, value, line_no)
    return PipelineConfig(**values)


def load_config(path) -> PipelineConfig:
    return parse_config(Path(path).read_text())
