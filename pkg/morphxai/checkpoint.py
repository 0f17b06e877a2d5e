"""
MorphXAI checkpoints.
Versioned container of parameters, ModelConfig and the vocabulary hash, plus
optional optimizer/scheduler state for resuming.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import torch

from .errors import CheckpointError
from .model import ModelConfig, MorphologicalDetector
from .schema import AttributeVocabulary


FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model: MorphologicalDetector
    step: int = 0
    epoch: int = 0
    optimizer_state: Optional[dict] = None
    scheduler_state: Optional[dict] = None
    metrics: dict = field(default_factory=dict)


def save_checkpoint(
    path: Union[str, Path],
    model: MorphologicalDetector,
    optimizer: Optional[torch.optim.Optimizer] = None,
    scheduler=None,
    step: int = 0,
    epoch: int = 0,
    metrics: Optional[dict] = None,
) -> Path:
    target = Path(path)
    payload = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "vocabulary": model.vocab_fingerprint,
        "attributes": list(model.attribute_names),
        "state": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "scheduler": scheduler.state_dict() if scheduler is not None else None,
        "step": int(step),
        "epoch": int(epoch),
        "metrics": dict(metrics or {}),
    }
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        # atomic replace
        tmp = target.with_suffix(target.suffix + ".tmp")
        torch.save(payload, tmp)
        tmp.replace(target)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {target}: {exc}") from exc
    return target


def load_checkpoint(
    path: Union[str, Path], vocab: AttributeVocabulary, map_location: Union[str, torch.device] = "cpu"
) -> Checkpoint:
    """Rebuild the model from a checkpoint; refuses a foreign vocabulary."""
    source = Path(path)
    try:
        payload = torch.load(source, map_location=map_location, weights_only=True)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {source}") from None
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {source}: {exc}") from exc

    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint format {version!r} (expected {FORMAT_VERSION})")
    if payload.get("vocabulary") != vocab.fingerprint():
        raise CheckpointError(
            f"{source}: attribute vocabulary hash mismatch; the checkpoint was trained on a different vocabulary"
        )

    model = MorphologicalDetector(ModelConfig(**payload["model_config"]), vocab)
    try:
        model.load_state_dict(payload["state"])
    except RuntimeError as exc:
        raise CheckpointError(f"{source}: parameters do not fit the stored model config: {exc}") from exc
    return Checkpoint(
        model=model.to(map_location),
        step=payload.get("step", 0),
        epoch=payload.get("epoch", 0),
        optimizer_state=payload.get("optimizer"),
        scheduler_state=payload.get("scheduler"),
        metrics=payload.get("metrics", {}),
    )
