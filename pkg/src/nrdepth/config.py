"""Flat ``key = value`` pipeline configuration with typed validation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .camera import DEFAULT_FOCAL
from .errors import InputError
from .io import parse_key_values
from .masks import MIN_REFERENCES, PIXEL_BASELINE, REFERENCE_OFFSETS, TARGET_GAP, TUPLE_BASELINE
from .photometric import ALPHA, GAMMA_REG, GAMMA_SMOOTH, SSIM_C, SSIM_WINDOW, LossWeights
from .raster import VISIBILITY_TOLERANCE
from .refine import OptimizerConfig


@dataclass
class PipelineConfig:
    manifest: str = ""
    out_dir: str = ""
    focal_x: float | None = None
    focal_y: float | None = None
    principal_x: float | None = None
    principal_y: float | None = None
    medium_focal: float = DEFAULT_FOCAL
    pixel_baseline: float = PIXEL_BASELINE
    tuple_baseline: float = TUPLE_BASELINE
    visibility_tolerance: float = VISIBILITY_TOLERANCE
    alpha: float = ALPHA
    gamma_smooth: float = GAMMA_SMOOTH
    gamma_reg: float = GAMMA_REG
    ssim_window: int = SSIM_WINDOW
    ssim_c: float = SSIM_C
    step: float = 1e-2
    iterations: int = 300
    tolerance: float = 1e-6
    patience: int = 20
    resolution: int = 256
    gap: int = TARGET_GAP
    offsets: tuple = REFERENCE_OFFSETS
    min_references: int = MIN_REFERENCES
    seed: int = 0
    icp_trim: float = 0.0
    icp_iterations: int = 100
    workers: int = 1
    figures: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        checks = [
            (self.medium_focal > 0, "medium_focal must be positive"),
            (self.pixel_baseline >= 0, "pixel_baseline must be >= 0"),
            (self.tuple_baseline >= 0, "tuple_baseline must be >= 0"),
            (self.visibility_tolerance >= 0, "visibility_tolerance must be >= 0"),
            (0.0 <= self.alpha <= 1.0, "alpha must lie in [0, 1]"),
            (self.gamma_smooth >= 0 and self.gamma_reg >= 0, "loss weights must be >= 0"),
            (self.ssim_window >= 1 and self.ssim_window % 2 == 1, "ssim_window must be an odd positive integer"),
            (self.ssim_c > 0, "ssim_c must be positive"),
            (self.step > 0, "step must be positive"),
            (self.iterations >= 0, "iterations must be >= 0"),
            (self.tolerance >= 0, "tolerance must be >= 0"),
            (self.patience >= 1, "patience must be >= 1"),
            (self.resolution >= 8, "resolution must be >= 8"),
            (self.gap >= 1, "gap must be >= 1"),
            (len(self.offsets) > 0 and 0 not in self.offsets, "offsets must be non-empty and exclude 0"),
            (self.min_references >= 1, "min_references must be >= 1"),
            (0.0 <= self.icp_trim < 1.0, "icp_trim must lie in [0, 1)"),
            (self.icp_iterations >= 1, "icp_iterations must be >= 1"),
            (self.workers >= 1, "workers must be >= 1"),
        ]
        for name in ("focal_x", "focal_y"):
            v = getattr(self, name)
            checks.append((v is None or v > 0, f"{name} must be positive"))
        for ok, msg in checks:
            if not ok:
                raise InputError(f"invalid config: {msg}")

    # ----------------------------------------------------------------- views

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.gamma_smooth, self.gamma_reg, self.ssim_window, self.ssim_c)

    @property
    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(step=self.step, iterations=self.iterations, tolerance=self.tolerance,
                               patience=self.patience, seed=self.seed)

    # ----------------------------------------------------------------- text form

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}\n")
        return "".join(lines)

    @classmethod
    def from_text(cls, text: str, source: str = "<config>", base: "PipelineConfig | None" = None):
        return (base or cls()).updated(
            {k: v for k, v, _ in parse_key_values(text, source)}, source)

    @classmethod
    def load(cls, path, base: "PipelineConfig | None" = None):
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise InputError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text, str(path), base)

    def updated(self, values: dict, source: str = "<overrides>") -> "PipelineConfig":
        kinds = {f.name: f.type for f in fields(self)}
        parsed = {}
        for key, raw in values.items():
            if key not in kinds:
                raise InputError(f"{source}: unknown config key {key!r}")
            parsed[key] = _parse(key, kinds[key], raw)
        return dataclasses.replace(self, **parsed)


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def _parse(key, kind, raw):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if kind == "str":
            return text
        if kind == "bool":
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if kind == "tuple":
            return tuple(int(t) for t in text.split(",") if t.strip())
        if kind == "int":
            return int(text)
        if kind == "float | None":
            return None if text.lower() in ("", "none") else float(text)
        if kind == "float":
            return float(text)
    except ValueError as exc:
        raise InputError(f"config key {key!r}: {exc}") from exc
    raise InputError(f"config key {key!r} has unsupported type {kind}")
