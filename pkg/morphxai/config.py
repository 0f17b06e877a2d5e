"""
MorphXAI configuration management.
Reads flat dotted-key JSON (morphxai.json), MORPHXAI_* env vars, and CLI flags.
Ships three presets: desk (default), overfit, full.
"""

import hashlib
import json
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional, Union

from .datagen import SceneConfig
from .errors import ConfigError
from .losses import LossWeights
from .matching import MatchCostWeights
from .model import ModelConfig


# ── Presets ───────────────────────────────────────────────────────────────────

PRESET_DESK = {
    "data.n_train": 64,
    "data.n_val": 16,
    "scene.image_size": [256, 256],
    "model.image_size": 256,
    "model.hidden_dim": 64,
    "model.num_queries": 30,
    "model.num_decoder_layers": 3,
    "train.batch_size": 8,
    "train.epochs": 30,
    "optim.lr": 1e-4,
}

PRESET_OVERFIT = {
    "data.n_train": 8,
    "data.n_val": 0,
    "scene.image_size": [128, 128],
    "scene.parasites_per_image": [1, 2],
    "scene.background_clutter": 0.0,
    "model.image_size": 128,
    "model.num_queries": 10,
    "train.batch_size": 8,
    "train.epochs": 2000,              # one batch per epoch: epochs == steps
    "train.max_steps": 2000,
    "train.eval_every": 250,
    "train.eval_split": "train",
    "optim.lr": 5e-4,
    "optim.weight_decay": 0.0,
}

PRESET_FULL = {
    # 640 px / d=256 / 300 queries / 6 layers / batch 12 / 50 epochs
    "data.n_train": 2000,
    "data.n_val": 500,
    "scene.image_size": [640, 640],
    "model.image_size": 640,
    "model.hidden_dim": 256,
    "model.num_queries": 300,
    "model.num_decoder_layers": 6,
    "model.num_heads": 8,
    "model.ffn_dim": 1024,
    "model.backbone_channels": [64, 128, 256, 256],
    "train.batch_size": 12,
    "train.epochs": 50,
}

PRESETS = {
    "desk": PRESET_DESK,
    "overfit": PRESET_OVERFIT,
    "full": PRESET_FULL,
}


# ── Sections ──────────────────────────────────────────────────────────────────

@dataclass
class PathsConfig:
    output_root: str = "."              # relative paths below resolve against this
    data_dir: str = "data"              # generated dataset (manifest.json, train/, val/)
    run_dir: str = "runs/default"       # checkpoints, train.log, resolved_config.json
    report_dir: str = "reports"


@dataclass
class DataConfig:
    n_train: int = 64
    n_val: int = 16
    workers: int = 1                    # generator processes
    loader_workers: int = 0             # DataLoader worker processes


@dataclass
class OptimConfig:
    lr: float = 1e-4                    # AdamW step size
    weight_decay: float = 1e-4
    warmup_fraction: float = 0.1        # linear warm-up share of total steps
    grad_clip: float = 0.1              # max grad norm (0 = off)


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 30
    max_steps: int = 0                  # 0 = epochs decide
    eval_every: int = 5                 # epochs between validations (0 = end only)
    eval_split: str = "val"
    rematch_per_layer: bool = True
    deterministic: bool = True
    progress: bool = True               # tqdm bar
    device: str = "cpu"
    max_log_lines: int = 0              # 0 = keep the whole training log


@dataclass
class EvalConfig:
    score_threshold: float = 0.05       # eval: detections kept for AP / accuracy
    report_threshold: float = 0.5       # infer: detections kept in reports
    iou_min: float = 0.5
    latency_images: int = 100
    latency_warmup: int = 10


SECTIONS = {
    "paths": PathsConfig,
    "data": DataConfig,
    "scene": SceneConfig,
    "model": ModelConfig,
    "loss": LossWeights,
    "matching": MatchCostWeights,
    "optim": OptimConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}

SCALARS = ("preset", "seed")


def _flatten(prefix: str, value: Any, out: Dict[str, Any]) -> None:
    if isinstance(value, dict):
        for key in sorted(value):
            _flatten(f"{prefix}.{key}", value[key], out)
    elif isinstance(value, tuple):
        out[prefix] = list(value)
    else:
        out[prefix] = value


def _cast_bool(v: str) -> bool:
    return v.lower() in ("1", "true", "yes")


@dataclass
class RunConfig:
    # Identity
    preset: str = "desk"
    seed: int = 0                       # training seed (scene.seed drives the data)

    paths: PathsConfig = field(default_factory=PathsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    matching: MatchCostWeights = field(default_factory=MatchCostWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_flat_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {name: getattr(self, name) for name in SCALARS}
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in fields(obj):
                _flatten(f"{section}.{f.name}", getattr(obj, f.name), out)
        return out

    def to_dict(self) -> dict:
        return self.to_flat_dict()

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        """Flat dotted keys -> RunConfig; unknown keys are dropped with a warning."""
        sections: Dict[str, Dict[str, Any]] = {name: {} for name in SECTIONS}
        top: Dict[str, Any] = {}
        unknown = []
        for key, value in data.items():
            head, _, rest = key.partition(".")
            if not rest:
                if key in SCALARS:
                    top[key] = value
                else:
                    unknown.append(key)
                continue
            if head not in SECTIONS:
                unknown.append(key)
                continue
            name, _, sub = rest.partition(".")
            valid = {f.name for f in fields(SECTIONS[head])}
            if name not in valid:
                unknown.append(key)
            elif sub:
                sections[head].setdefault(name, {})[sub] = value
            else:
                sections[head][name] = value
        if unknown:
            print(f"[MorphXAI] ignoring unknown config keys: {', '.join(sorted(unknown))}", file=sys.stderr)
        try:
            built = {name: SECTIONS[name](**values) for name, values in sections.items()}
            return cls(**top, **built)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config value: {exc}") from exc

    @classmethod
    def load(cls, config_path: Optional[str] = None, overrides: Optional[dict] = None) -> "RunConfig":
        """
        Load config with priority:
          1. CLI-provided path
          2. ./morphxai.json
          3. built-in desk preset
        Then overlay MORPHXAI_* env vars, then CLI overrides.
        """
        search_paths = []
        if config_path:
            explicit = Path(config_path).expanduser()
            if not explicit.exists():
                raise ConfigError(f"config file not found: {explicit}")
            search_paths.append(explicit)
        search_paths.append(Path("morphxai.json"))

        data = dict(PRESET_DESK)

        for p in search_paths:
            if p.exists():
                try:
                    with open(p) as f:
                        file_data = json.load(f)
                except (OSError, json.JSONDecodeError) as exc:
                    raise ConfigError(f"cannot read config {p}: {exc}") from exc
                if not isinstance(file_data, dict):
                    raise ConfigError(f"{p}: config must be a JSON object of dotted keys")
                # Apply preset first if specified
                preset_name = file_data.get("preset", "desk")
                if preset_name not in PRESETS:
                    raise ConfigError(f"{p}: unknown preset '{preset_name}' (known: {', '.join(PRESETS)})")
                data.update(PRESETS[preset_name])
                data["preset"] = preset_name
                data.update(file_data)
                break

        # Env var overrides (MORPHXAI_* prefix)
        env_map = {
            "MORPHXAI_OUTPUT_ROOT": ("paths.output_root", str),
            "MORPHXAI_SEED": ("seed", int),
            "MORPHXAI_DEVICE": ("train.device", str),
            "MORPHXAI_LAMBDA": ("loss.lambda_morph", float),
            "MORPHXAI_PROGRESS": ("train.progress", _cast_bool),
        }
        for env_key, (field_name, cast) in env_map.items():
            val = os.environ.get(env_key)
            if val is not None:
                try:
                    data[field_name] = cast(val)
                except ValueError:
                    raise ConfigError(f"{env_key}={val!r} is not a valid {field_name}") from None

        overrides = dict(overrides or {})
        if overrides.get("preset") in PRESETS:
            data.update(PRESETS[overrides["preset"]])
        data.update(overrides)
        config = cls.from_dict(data)
        config.validate()
        return config

    def validate(self) -> None:
        self.scene.validate()
        self.model.validate()
        self.loss.validate()
        self.matching.validate()
        if self.loss.alpha_layers is not None and len(self.loss.alpha_layers) != self.model.num_decoder_layers:
            raise ConfigError(
                f"loss.alpha_layers has {len(self.loss.alpha_layers)} entries, "
                f"model.num_decoder_layers is {self.model.num_decoder_layers}"
            )
        width, height = self.scene.image_size
        if width != height or width != self.model.image_size:
            raise ConfigError(
                f"scene.image_size {self.scene.image_size} must be square and equal model.image_size "
                f"{self.model.image_size}"
            )
        if self.scene.parasites_per_image[1] > self.model.num_queries:
            raise ConfigError("model.num_queries must cover scene.parasites_per_image")
        if self.train.batch_size <= 0 or self.train.epochs <= 0 or self.train.max_steps < 0:
            raise ConfigError("train.batch_size and train.epochs must be positive, train.max_steps >= 0")
        if self.train.eval_split not in ("train", "val"):
            raise ConfigError(f"train.eval_split must be 'train' or 'val', got {self.train.eval_split!r}")
        if self.optim.lr <= 0 or not 0 <= self.optim.warmup_fraction < 1:
            raise ConfigError("optim.lr > 0 and 0 <= optim.warmup_fraction < 1 required")
        if self.data.n_train < 0 or self.data.n_val < 0:
            raise ConfigError("data.n_train and data.n_val must be >= 0")
        for name in ("score_threshold", "report_threshold"):
            value = getattr(self.eval, name)
            if not 0.0 <= value <= 1.01:
                raise ConfigError(f"eval.{name} must lie in [0, 1.01], got {value}")

    # ── Paths ─────────────────────────────────────────────────────────────────

    def path(self, name: str) -> Path:
        """Resolve paths.<name> against paths.output_root."""
        p = Path(getattr(self.paths, name)).expanduser()
        return p if p.is_absolute() else Path(self.paths.output_root).expanduser() / p

    @property
    def checkpoint_dir(self) -> Path:
        return self.path("run_dir") / "checkpoints"

    @property
    def log_file(self) -> Path:
        return self.path("run_dir") / "train.log"

    # ── Persistence ───────────────────────────────────────────────────────────

    def config_hash(self) -> str:
        payload = json.dumps(self.to_flat_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()

    def save(self, path: Optional[Union[str, Path]] = None) -> Path:
        """Write the resolved flat config to JSON."""
        target = Path(path).expanduser() if path else self.path("run_dir") / "resolved_config.json"
        target.parent.mkdir(parents=True, exist_ok=True)
        with open(target, "w") as f:
            json.dump(self.to_flat_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        return target
