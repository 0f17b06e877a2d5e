"""
MorphXAI data loading.
A torch Dataset over one written split (images/ + annotations.json) and the
collate step that builds detection targets and per-attribute morphology
targets for a batch.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image
from torch.utils.data import Dataset

from .boxes import xyxy_to_cxcywh
from .datagen import load_image
from .errors import DatasetIOError
from .schema import (
    AnnotatedInstance,
    AttributeVocabulary,
    MorphologyTargets,
    build_vocabulary,
    gt_to_morphology_targets,
    read_annotation_file,
    species_index,
)


IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass
class ImageTargets:
    boxes: torch.Tensor      # (N_i, 4) normalized cx, cy, w, h
    labels: torch.Tensor     # (N_i,) species index

    def __len__(self) -> int:
        return self.labels.shape[0]

    def to(self, device) -> "ImageTargets":
        return ImageTargets(self.boxes.to(device), self.labels.to(device))


@dataclass
class Sample:
    image: torch.Tensor                  # H x W x 3 float32 in [0, 1]
    instances: List[AnnotatedInstance]
    image_id: int
    size: Tuple[int, int]                # width, height


@dataclass
class Batch:
    images: torch.Tensor                 # B x H x W x 3
    targets: List[ImageTargets]
    instances: List[List[AnnotatedInstance]]
    morphology: MorphologyTargets
    image_ids: List[int]

    def to(self, device) -> "Batch":
        return Batch(
            self.images.to(device),
            [t.to(device) for t in self.targets],
            self.instances,
            self.morphology.to(device),
            self.image_ids,
        )


def targets_from_instances(
    instances: Sequence[AnnotatedInstance], width: float, height: float, dtype=torch.float32
) -> ImageTargets:
    """Pixel corner boxes -> normalized centre boxes plus species labels."""
    if not instances:
        return ImageTargets(torch.zeros((0, 4), dtype=dtype), torch.zeros((0,), dtype=torch.long))
    corners = torch.tensor([inst.box for inst in instances], dtype=torch.float64)
    scale = torch.tensor([width, height, width, height], dtype=torch.float64)
    boxes = xyxy_to_cxcywh(corners / scale).to(dtype)
    labels = [species_index(inst.species) for inst in instances]
    return ImageTargets(boxes, torch.tensor(labels, dtype=torch.long))


class ParasiteDataset(Dataset):
    """One split directory as written by generate_dataset."""

    def __init__(self, split_dir: Union[str, Path], vocab: AttributeVocabulary = None):
        self.root = Path(split_dir)
        self.vocab = vocab or build_vocabulary()
        self.annotations = read_annotation_file(self.root / "annotations.json", self.vocab)
        self.images = sorted(self.annotations.images, key=lambda im: im.id)

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> Sample:
        record = self.images[i]
        pixels = load_image(self.root / record.file_name)
        if pixels.shape[:2] != (record.height, record.width):
            raise DatasetIOError(
                f"{self.root / record.file_name}: size {pixels.shape[1]}x{pixels.shape[0]} "
                f"does not match annotation {record.width}x{record.height}"
            )
        return Sample(
            image=torch.from_numpy(pixels),
            instances=list(self.annotations.instances_for(record.id)),
            image_id=record.id,
            size=(record.width, record.height),
        )


def collate(samples: Sequence[Sample], vocab: AttributeVocabulary) -> Batch:
    instances = [s.instances for s in samples]
    return Batch(
        images=torch.stack([s.image for s in samples]),
        targets=[targets_from_instances(s.instances, *s.size) for s in samples],
        instances=instances,
        morphology=gt_to_morphology_targets(vocab, instances),
        image_ids=[s.image_id for s in samples],
    )


def list_images(directory: Union[str, Path]) -> List[Path]:
    root = Path(directory)
    if not root.is_dir():
        raise DatasetIOError(f"image directory not found: {root}")
    return sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_for_model(path: Union[str, Path], image_size: int) -> Tuple[torch.Tensor, Tuple[int, int]]:
    """Read any RGB image, resized to the model's square input; returns (pixels, original size)."""
    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB")
            size = rgb.size
            if size != (image_size, image_size):
                rgb = rgb.resize((image_size, image_size), Image.BILINEAR)
            pixels = np.asarray(rgb, dtype=np.float32) / 255.0
    except OSError as exc:
        raise DatasetIOError(f"cannot read image {path}: {exc}") from exc
    return torch.from_numpy(pixels), size
