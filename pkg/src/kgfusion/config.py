"""Training configuration, file parsing and range validation."""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass

from .errors import DataError

ABLATIONS = ("full", "no_gsp", "random_query", "no_crr", "no_phi")
NORMALIZERS = ("all", "subgraph")

# search grid used for tuning and by the sweep command
GRID = {
    "lr": [1e-4, 5e-4, 1e-3, 5e-3, 1e-2],
    "batch_size": [4, 8, 16, 32],
    "embed_dim": [16, 32, 48, 64, 96],
    "select_k": [100, 300, 500, 800, 1000],
    "fusion_weight": [0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
    "reg_weight": [0.0, 0.001, 0.01, 0.1],
    "n_layers": [4, 5, 6, 7, 8],
}


@dataclass
class TrainConfig:
    lr: float = 5e-3
    batch_size: int = 16
    embed_dim: int = 32
    select_k: int = 100
    fusion_weight: float = 0.7
    reg_weight: float = 0.01
    n_layers: int = 6
    temperature: float = 1.0
    max_epochs: int = 100
    seed: int = 0
    ablation: str = "full"
    normalizer: str = "all"
    separate_query_cell: bool = False
    reverse_queries: bool = True
    hide_query_edges: bool = True
    init_scale: float = 0.1
    pretrain_epochs: int = 0
    eval_batch_size: int = 64
    deterministic: bool = False
    dtype: str = "float32"

    def validate(self) -> None:
        if self.ablation not in ABLATIONS:
            raise DataError(f"unknown ablation {self.ablation!r}, expected {ABLATIONS}")
        if self.normalizer not in NORMALIZERS:
            raise DataError(
                f"unknown normalizer {self.normalizer!r}, expected {NORMALIZERS}"
            )
        if not 0.0 <= self.fusion_weight <= 1.0:
            raise DataError(f"fusion_weight must lie in [0, 1], got {self.fusion_weight}")
        if self.reg_weight < 0:
            raise DataError(f"reg_weight must be >= 0, got {self.reg_weight}")
        if self.embed_dim < 1 or self.n_layers < 1 or self.select_k < 1:
            raise DataError("embed_dim, n_layers and select_k must all be >= 1")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise DataError("batch_size must be >= 1 and max_epochs >= 0")
        if self.dtype not in ("float32", "float64"):
            raise DataError(f"dtype must be float32 or float64, got {self.dtype!r}")
        for key, grid in GRID.items():
            value = getattr(self, key)
            if not (min(grid) <= value <= max(grid)):
                warnings.warn(
                    f"{key}={value} lies outside the tuned range "
                    f"[{min(grid)}, {max(grid)}]",
                    stacklevel=2,
                )


def _coerce(field: dataclasses.Field, raw: str):
    if field.type in ("bool", bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise DataError(f"config key {field.name}: cannot parse boolean from {raw!r}")
    if field.type in ("int", int):
        return int(raw)
    if field.type in ("float", float):
        return float(raw)
    return raw


def parse_config_file(path: str, base: TrainConfig | None = None) -> TrainConfig:
    """Read flat key=value lines; later lines win, '#' starts a comment."""
    cfg = dataclasses.replace(base) if base else TrainConfig()
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    try:
        lines = open(path, encoding="utf-8").read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read config file {path}: {exc}") from None
    for lineno, line in enumerate(lines, start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise DataError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in fields:
            raise DataError(f"{path}:{lineno}: unknown config key {key!r}")
        setattr(cfg, key, _coerce(fields[key], raw))
    return cfg


def config_to_text(cfg: TrainConfig) -> str:
    return "".join(
        f"{f.name}={getattr(cfg, f.name)}\n" for f in dataclasses.fields(TrainConfig)
    )
