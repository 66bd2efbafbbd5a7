"""Configuration objects and the key=value config file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import SceneDataError

# Spatial hash multipliers, one per axis. Fixed here so that streams written by
# one build decode on another; also recorded in the bitstream header.
HASH_PRIMES = (1, 2654435761, 805459861)

# Lagrange multiplier presets; "high" is the high-rate / high-quality end.
LAMBDA_PRESETS = {"high": 0.0001, "middle": 0.0005, "low": 0.001}


@dataclass
class GridConfig:
    """Hyperparameters of one multiresolution hashed feature grid."""

    levels: int = 4
    base_resolution: int = 16
    growth_factor: int = 2
    log2_table_size: int = 14
    feature_dim: int = 4

    @property
    def table_size(self) -> int:
        return 1 << self.log2_table_size

    @property
    def resolutions(self) -> list[int]:
        return [self.base_resolution * self.growth_factor**i for i in range(self.levels)]

    @property
    def output_dim(self) -> int:
        return self.levels * self.feature_dim


@dataclass
class ModelConfig:
    """Static structure of a scene model: primitive layout, grids, entropy side-info."""

    k: int = 10
    ref_embedding_dim: int = 32
    res_embedding_dim: int = 4
    view_embedding_dim: int = 4
    hyper_dim: int = 8
    hyper_support: int = 32  # latents are coded over [-support, support]
    location_step: float = 1e-3
    context_grid: GridConfig = field(default_factory=GridConfig)
    prior_grid: GridConfig = field(default_factory=GridConfig)

    @property
    def prediction_feature_dim(self) -> int:
        return self.ref_embedding_dim + self.res_embedding_dim + self.context_grid.output_dim


@dataclass
class TrainConfig:
    """Knobs for rate-constrained training of a static scene."""

    lam: float = 0.0005
    iterations: int = 5000
    lr_locations: float = 1.6e-4
    lr_covariance: float = 5e-3
    lr_embeddings: float = 2.5e-3
    lr_networks: float = 2e-3
    lr_grids: float = 1e-2
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    prune_opacity_threshold: float = 0.005
    densify_stop_fraction: float = 0.6
    voxel_fraction: float = 0.01  # anchor init voxel size as a fraction of scene extent
    seed: int = 0
    log_interval: int = 50


@dataclass
class TemporalConfig:
    """Knobs for the streamed dynamic pipeline."""

    diff_threshold: float = 0.05
    dilation_radius: int = 2
    tau_motion: float = 0.25
    tau_static_to_dynamic: float = 2e-4
    tau_dynamic_to_static: float = 1e-3
    tau_create: float = 4e-4
    iterations_p: int = 400
    control_interval: int = 50
    lr_residues: float = 5e-3
    lr_residue_grids: float = 1e-2
    motion_grid: GridConfig = field(
        default_factory=lambda: GridConfig(levels=3, base_resolution=8, log2_table_size=8, feature_dim=2)
    )
    compensation_grid: GridConfig = field(
        default_factory=lambda: GridConfig(levels=3, base_resolution=8, log2_table_size=8, feature_dim=2)
    )

    def __post_init__(self):
        if not self.tau_create > self.tau_static_to_dynamic:
            raise ValueError("creation threshold must exceed the static-to-dynamic threshold")


def _coerce(value: str, target_type):
    if target_type is bool:
        return value.lower() in ("1", "true", "yes", "on")
    return target_type(value)


def _apply_kv(obj, key: str, value: str, prefix: str = "") -> bool:
    """Set `obj.<key>` from a string, recursing into nested dataclass fields."""
    for f in dataclasses.fields(obj):
        name = f"{prefix}{f.name}" if prefix else f.name
        current = getattr(obj, f.name)
        if dataclasses.is_dataclass(current):
            if _apply_kv(current, key, value, prefix=f"{f.name}."):
                return True
            continue
        if name == key:
            setattr(obj, f.name, _coerce(value, type(current)))
            return True
    return False


def parse_config_text(text: str, *targets) -> None:
    """Apply `key=value` lines to the given dataclass instances in order.

    Nested fields use dotted keys, e.g. ``context_grid.levels=2``. Lines
    starting with '#' and blank lines are ignored. Unknown keys are an error.
    """
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SceneDataError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not any(_apply_kv(t, key, value) for t in targets):
            raise SceneDataError(f"config line {lineno}: unknown key {key!r}")


def load_config_file(path: str | Path, *targets) -> None:
    path = Path(path)
    if not path.is_file():
        raise SceneDataError(f"config file not found: {path}")
    parse_config_text(path.read_text(), *targets)
