"""Flat ``section.key=value`` configuration.

Every key maps onto a field of one of the section dataclasses below; unknown
keys are rejected so typos fail fast.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ConfigError
from ..grid import DEFAULT_DIMS, DEFAULT_NUM_CLASSES, DEFAULT_VOXEL_SIZE
from ..losses import LossConfig
from ..stgf import StgfConfig


@dataclass(frozen=True)
class GridSection:
    dims: tuple = DEFAULT_DIMS
    voxel_size: float = DEFAULT_VOXEL_SIZE
    num_classes: int = DEFAULT_NUM_CLASSES


@dataclass(frozen=True)
class Stage1Section:
    factor: int = 2
    feature_dim: int = 16
    threshold: float = 0.5


@dataclass(frozen=True)
class StgfSection(StgfConfig):
    locnet_scale: float = 0.01

    def core(self) -> StgfConfig:
        return StgfConfig(**{f.name: getattr(self, f.name) for f in dataclasses.fields(StgfConfig)})


@dataclass(frozen=True)
class GavSection:
    c0: float = 6.0
    s: float = 2.0
    delta: str = "auto"  # "auto" = half a voxel per axis in normalized units
    n_points: int = 6
    iso: float = 0.5

    def delta_value(self):
        if self.delta == "auto":
            return None
        try:
            value = float(self.delta)
        except ValueError:
            raise ConfigError(f"gav.delta must be 'auto' or a number, got {self.delta!r}") from None
        if value < 0:
            raise ConfigError(f"gav.delta must be non-negative, got {value}")
        return value


@dataclass(frozen=True)
class AttnSection:
    d_k: int = 8
    n_points: int = 4
    query_source: str = "position"
    offset_scale: float = 0.05


@dataclass(frozen=True)
class LossSection(LossConfig):
    pass


@dataclass(frozen=True)
class PipelineSection:
    stgf_output: str = "replace"
    gav_source: str = "stage1"


@dataclass(frozen=True)
class OptimSection:
    # recorded for completeness; the desk-scale harness uses plain gradient descent
    lr: float = 1e-4
    weight_decay: float = 1e-4


@dataclass(frozen=True)
class PipelineConfig:
    grid: GridSection = field(default_factory=GridSection)
    stage1: Stage1Section = field(default_factory=Stage1Section)
    stgf: StgfSection = field(default_factory=StgfSection)
    gav: GavSection = field(default_factory=GavSection)
    attn: AttnSection = field(default_factory=AttnSection)
    loss: LossSection = field(default_factory=LossSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    optim: OptimSection = field(default_factory=OptimSection)
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def low_dims(self) -> tuple:
        return tuple(n // self.stage1.factor for n in self.grid.dims)

    @property
    def low_voxel_size(self) -> float:
        return self.grid.voxel_size * self.stage1.factor

    def validate(self):
        dims = self.grid.dims
        if len(dims) != 3 or any(n < 1 for n in dims):
            raise ConfigError(f"grid.dims must be three positive integers, got {dims}")
        if self.grid.voxel_size <= 0:
            raise ConfigError("grid.voxel_size must be positive")
        if not 2 <= self.grid.num_classes <= 255:
            raise ConfigError("grid.num_classes must be in [2, 255]")
        f = self.stage1.factor
        if f < 1 or any(n % f for n in dims):
            raise ConfigError(f"stage1.factor {f} must divide grid.dims {dims}")
        if self.stage1.feature_dim < 1:
            raise ConfigError("stage1.feature_dim must be >= 1")
        if not 0 < self.stage1.threshold < 1:
            raise ConfigError("stage1.threshold must be in (0, 1)")
        if self.stgf.k < 0 or self.stgf.gcn_layers < 1 or self.stgf.sigma < 0:
            raise ConfigError("stgf.k >= 0, stgf.gcn_layers >= 1 and stgf.sigma >= 0 are required")
        if self.gav.s <= 0 or not 1 <= self.gav.n_points <= 15:
            raise ConfigError("gav.s must be positive and gav.n_points in [1, 15]")
        self.gav.delta_value()
        if self.attn.d_k < 1 or self.attn.n_points < 1:
            raise ConfigError("attn.d_k and attn.n_points must be >= 1")
        if self.attn.query_source not in ("position", "content"):
            raise ConfigError("attn.query_source must be 'position' or 'content'")
        if self.loss.spatial_pairing not in ("edges", "consecutive"):
            raise ConfigError("loss.spatial_pairing must be 'edges' or 'consecutive'")
        if self.pipeline.stgf_output not in ("replace", "add"):
            raise ConfigError("pipeline.stgf_output must be 'replace' or 'add'")
        if self.pipeline.gav_source not in ("stage1", "stgf"):
            raise ConfigError("pipeline.gav_source must be 'stage1' or 'stgf'")

    def replace(self, **overrides) -> "PipelineConfig":
        """Apply flat ``section.key`` overrides (``"section.key": value``)."""
        return apply_overrides(self, {k: str(v) for k, v in overrides.items()})

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for sub in dataclasses.fields(value):
                    lines.append(f"{f.name}.{sub.name}={_format(getattr(value, sub.name))}")
            else:
                lines.append(f"{f.name}={_format(value)}")
        return "\n".join(lines) + "\n"


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(","))
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def apply_overrides(config: PipelineConfig, pairs: dict) -> PipelineConfig:
    sections = {f.name: getattr(config, f.name) for f in dataclasses.fields(config)}
    top = {}
    for key, raw in pairs.items():
        if "." not in key:
            if key not in sections or dataclasses.is_dataclass(sections[key]):
                raise ConfigError(f"unknown config key {key!r}")
            top[key] = _coerce(key, raw, sections[key])
            continue
        sec, name = key.split(".", 1)
        section = sections.get(sec)
        if section is None or not dataclasses.is_dataclass(section):
            raise ConfigError(f"unknown config section in {key!r}")
        names = {f.name for f in dataclasses.fields(section)}
        if name not in names:
            raise ConfigError(f"unknown config key {key!r}")
        sections[sec] = dataclasses.replace(section, **{name: _coerce(key, raw, getattr(section, name))})
    sections.update(top)
    return PipelineConfig(**sections)


def parse_config(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value
    return apply_overrides(base or PipelineConfig(), pairs)


def load_config(path) -> PipelineConfig:
    return parse_config(Path(path).read_text())
