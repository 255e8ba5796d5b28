"""Run configuration: one JSON document, every key defaulted, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from gma.errors import ConfigError

VARIANTS = ("san", "mcb_att", "gia", "gta", "gma_cat", "gma_mcb", "gma_mcb_att")
GMA_FUSION = {"gma_cat": "concat", "gma_mcb": "mcb", "gma_mcb_att": "mcb_att", "gma_pass": "passthrough"}
PAPER_K = (8, 32, 64, 128)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    grid: int = 7
    channels: int = 16
    embed_dim: int = 32
    hidden_dim: int = 32
    sketch_dim: int = 512
    granules: int = 32
    variant: str = "gma_mcb_att"
    san_iterations: int = 2
    learning_rate: float = 0.1
    epochs: int = 15
    batch_size: int = 5
    mask_p: float = 0.5
    mask_side: int = 0  # 0 selects ceil(grid / 2)
    mask_count: int = 250
    option_count: int = 20
    rounds: int = 10
    objects: int = 4
    train_dialogs: int = 500
    val_dialogs: int = 100
    test_dialogs: int = 200
    fusion_normalize: bool = True
    shared_history_attention: bool = False
    saliency: str = "rise"  # or "uniform"
    probe_epochs: int = 0  # 0 reuses epochs

    def __post_init__(self):
        positive = ["grid", "channels", "embed_dim", "hidden_dim", "sketch_dim", "granules", "san_iterations",
                    "batch_size", "mask_count", "option_count", "rounds", "objects", "train_dialogs",
                    "val_dialogs", "test_dialogs"]
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("epochs", "probe_epochs", "mask_side", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.variant not in VARIANTS and self.variant not in GMA_FUSION:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.granules > self.grid ** 2:
            raise ConfigError(f"granules={self.granules} exceeds grid cells {self.grid ** 2}")
        if not 0 < self.mask_p < 1:
            raise ConfigError("mask_p must lie in (0, 1)")
        if self.mask_side > self.grid:
            raise ConfigError("mask_side cannot exceed grid")
        if self.saliency not in ("rise", "uniform"):
            raise ConfigError(f"saliency must be 'rise' or 'uniform', got {self.saliency!r}")

    @property
    def effective_mask_side(self) -> int:
        return self.mask_side or -(-self.grid // 2)

    @property
    def effective_probe_epochs(self) -> int:
        return self.probe_epochs or self.epochs

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for key, value in data.items():
            want = known[key].type
            if want == "int" and (not isinstance(value, int) or isinstance(value, bool)):
                raise ConfigError(f"{key} must be an integer")
            if want == "float" and not isinstance(value, (int, float)):
                raise ConfigError(f"{key} must be a number")
            if want == "bool" and not isinstance(value, bool):
                raise ConfigError(f"{key} must be true or false")
            if want == "str" and not isinstance(value, str):
                raise ConfigError(f"{key} must be a string")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc


def k_axis(grid: int, values=PAPER_K) -> list[int]:
    """Granule counts capped at the number of cells, duplicates removed, order kept."""
    out: list[int] = []
    for k in values:
        k = min(int(k), grid * grid)
        if k not in out:
            out.append(k)
    return out
