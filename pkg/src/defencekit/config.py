"""Run configuration: flat `key = value` text files with `#` comments, plus
`--set key=value` overrides."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossWeights

__all__ = ["TrainConfig", "parse_config_file", "apply_overrides", "ConfigError"]


class ConfigError(ValueError):
    pass


def parse_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected `key = value`, got {line!r}")
        key, value = stripped.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def apply_overrides(values: dict[str, str], overrides) -> dict[str, str]:
    out = dict(values)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


@dataclass
class TrainConfig:
    """Hyperparameters for one training run."""

    task: str = "segmentation"          # segmentation | inpainting
    manifest: str = "data/manifest.tsv"
    out_dir: str = "runs/latest"
    seed: int = 0
    batch_size: int = 4
    epochs: int | None = None           # None -> 100 segmentation, 50 inpainting
    max_steps: int | None = None
    rate: float | None = None           # None -> per-task default
    image_size: int = 64
    width_multiplier: float = 0.125     # segmentation encoder width
    base_channels: int = 16             # generator width
    growth: int = 8
    block_layers: int = 4
    weights: LossWeights = field(default_factory=LossWeights)
    eval_every: int = 100
    checkpoint_every: int = 100
    perceptual_seed: int = 7

    SEG_RATE = 1e-3
    INPAINT_RATE = 1e-4

    def __post_init__(self):
        if self.task not in ("segmentation", "inpainting"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.rate is not None and self.rate <= 0:
            raise ConfigError("rate must be > 0")

    @property
    def effective_epochs(self) -> int:
        if self.epochs is not None:
            return self.epochs
        return 100 if self.task == "segmentation" else 50

    @property
    def base_rate(self) -> float:
        if self.rate is not None:
            return self.rate
        return self.SEG_RATE if self.task == "segmentation" else self.INPAINT_RATE

    @classmethod
    def from_values(cls, values: dict[str, str]) -> "TrainConfig":
        cfg = cls(task=values.get("task", "segmentation"))
        casts = {
            "manifest": str, "out_dir": str, "seed": int, "batch_size": int,
            "epochs": int, "max_steps": int, "rate": float, "image_size": int,
            "width_multiplier": float, "base_channels": int, "growth": int,
            "block_layers": int, "eval_every": int, "checkpoint_every": int,
            "perceptual_seed": int,
        }
        weight_keys = {
            "lambda_rec": "rec", "lambda_per": "per", "lambda_str": "struct",
            "lambda_adv_t": "adv_tex", "lambda_adv_s": "adv_struct",
        }
        weights = {}
        for key, raw in values.items():
            if key == "task":
                continue
            if key in weight_keys:
                weights[weight_keys[key]] = float(raw)
            elif key in casts:
                try:
                    setattr(cfg, key, casts[key](raw))
                except ValueError as exc:
                    raise ConfigError(f"bad value for {key}: {raw!r}") from exc
            else:
                raise ConfigError(f"unknown config key {key!r}")
        if weights:
            cfg.weights = LossWeights(**{**vars(LossWeights()), **weights})
        cfg.__post_init__()
        return cfg

    def to_text(self) -> str:
        w = self.weights
        lines = [
            f"task = {self.task}",
            f"manifest = {self.manifest}",
            f"out_dir = {self.out_dir}",
            f"seed = {self.seed}",
            f"batch_size = {self.batch_size}",
            f"epochs = {self.effective_epochs}",
            f"image_size = {self.image_size}",
            f"width_multiplier = {self.width_multiplier!r}",
            f"base_channels = {self.base_channels}",
            f"growth = {self.growth}",
            f"block_layers = {self.block_layers}",
            f"eval_every = {self.eval_every}",
            f"checkpoint_every = {self.checkpoint_every}",
            f"perceptual_seed = {self.perceptual_seed}",
            f"lambda_rec = {w.rec!r}",
            f"lambda_per = {w.per!r}",
            f"lambda_str = {w.struct!r}",
            f"lambda_adv_t = {w.adv_tex!r}",
            f"lambda_adv_s = {w.adv_struct!r}",
        ]
        if self.max_steps is not None:
            lines.append(f"max_steps = {self.max_steps}")
        if self.rate is not None:
            lines.append(f"rate = {self.rate!r}")
        return "\n".join(lines) + "\n"
