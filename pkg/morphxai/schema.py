"""
MorphXAI morphology schema.
Attribute vocabulary (value <-> class index maps), annotation records, the
annotation JSON format, and the conversion of records into per-attribute
supervision targets.
"""

import hashlib
import json
import operator
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterator, List, Sequence, Tuple, Union

import torch

from .errors import DatasetIOError, SchemaError, ValidationError


SPECIES = ("Leishmania", "T_cruzi", "T_brucei")

# ── Attribute table (order is the external contract) ─────────────────────────

ATTRIBUTE_VALUES = (
    ("shape_type", ("oval", "elongated", "amoeboid", "fusiform", "crescent", "other")),
    ("curvature", ("straight", "C-shaped", "S-shaped", "round")),
    ("dot_count", (0, 1, 2, "3+")),
    ("flagellum_present", (False, True)),
    ("development_stage", ("immature", "mature")),
)

ATTRIBUTE_NAMES = tuple(name for name, _ in ATTRIBUTE_VALUES)


def _value_key(value: Any) -> Tuple[str, Any]:
    # bool is an int subclass: True must never match dot_count 1
    return (type(value).__name__, value)


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    values: Tuple[Any, ...]

    @property
    def cardinality(self) -> int:
        return len(self.values)

    def index(self, value: Any) -> int:
        key = _value_key(value)
        for i, legal in enumerate(self.values):
            if _value_key(legal) == key:
                return i
        raise ValidationError(
            f"illegal value {value!r} for attribute '{self.name}' "
            f"(legal: {', '.join(repr(v) for v in self.values)})",
            attribute=self.name,
            value=value,
        )


@dataclass(frozen=True)
class AttributeVocabulary:
    attributes: Tuple[AttributeSpec, ...]

    def __iter__(self) -> Iterator[AttributeSpec]:
        return iter(self.attributes)

    def __len__(self) -> int:
        return len(self.attributes)

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(spec.name for spec in self.attributes)

    @property
    def cardinalities(self) -> Dict[str, int]:
        return {spec.name: spec.cardinality for spec in self.attributes}

    @property
    def total_classes(self) -> int:
        return sum(spec.cardinality for spec in self.attributes)

    def spec(self, name: str) -> AttributeSpec:
        for spec in self.attributes:
            if spec.name == name:
                return spec
        raise SchemaError(f"unknown attribute '{name}' (known: {', '.join(self.names)})")

    def cardinality(self, name: str) -> int:
        return self.spec(name).cardinality

    def encode(self, name: str, value: Any) -> int:
        return self.spec(name).index(value)

    def decode(self, name: str, index: Any) -> Any:
        spec = self.spec(name)
        if isinstance(index, bool):
            raise ValidationError(
                f"index for '{name}' must be an integer, got {index!r}", attribute=name, value=index
            )
        try:
            k = operator.index(index)
        except TypeError:
            raise ValidationError(
                f"index for '{name}' must be an integer, got {index!r}", attribute=name, value=index
            ) from None
        if not 0 <= k < spec.cardinality:
            raise ValidationError(
                f"index {k} out of range for '{name}' (0..{spec.cardinality - 1})",
                attribute=name,
                value=index,
            )
        return spec.values[k]

    def fingerprint(self) -> str:
        """Stable hash of names and ordered values; guards checkpoints."""
        payload = json.dumps([[spec.name, list(spec.values)] for spec in self.attributes])
        return hashlib.sha256(payload.encode()).hexdigest()


def build_vocabulary() -> AttributeVocabulary:
    return AttributeVocabulary(tuple(AttributeSpec(name, values) for name, values in ATTRIBUTE_VALUES))


def encode_attribute(vocab: AttributeVocabulary, attribute: str, value: Any) -> int:
    return vocab.encode(attribute, value)


def decode_attribute(vocab: AttributeVocabulary, attribute: str, index: int) -> Any:
    return vocab.decode(attribute, index)


def saturate_dot_count(n: int) -> Union[int, str]:
    """Map a raw chromatin dot count onto the dot_count value set."""
    if n < 0:
        raise ValidationError(f"dot count cannot be negative: {n}", attribute="dot_count", value=n)
    return "3+" if n >= 3 else int(n)


def species_index(species: str) -> int:
    try:
        return SPECIES.index(species)
    except ValueError:
        raise ValidationError(
            f"unknown species {species!r} (legal: {', '.join(SPECIES)})", attribute="species", value=species
        ) from None


# ── Records ───────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class MorphologyRecord:
    shape_type: str
    curvature: str
    dot_count: Union[int, str]      # 0, 1, 2 or "3+"
    flagellum_present: bool
    development_stage: str

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in ATTRIBUTE_NAMES}

    def validate(self, vocab: AttributeVocabulary) -> None:
        for name in vocab.names:
            vocab.encode(name, getattr(self, name))

    @classmethod
    def from_dict(cls, data: dict, vocab: AttributeVocabulary = None) -> "MorphologyRecord":
        """Strict: incomplete records are rejected, never imputed."""
        missing = [name for name in ATTRIBUTE_NAMES if name not in data]
        if missing:
            raise ValidationError(
                f"morphology record is missing {', '.join(missing)}", attribute=missing[0]
            )
        record = cls(**{name: data[name] for name in ATTRIBUTE_NAMES})
        record.validate(vocab or build_vocabulary())
        return record


@dataclass(frozen=True)
class AnnotatedInstance:
    box: Tuple[float, float, float, float]   # x_min, y_min, x_max, y_max (pixels)
    species: str
    morphology: MorphologyRecord

    def validate(self, width: float = None, height: float = None) -> None:
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValidationError(f"degenerate box {self.box}", attribute="box", value=self.box)
        if width is not None and height is not None:
            if x0 < 0 or y0 < 0 or x1 > width or y1 > height:
                raise ValidationError(
                    f"box {self.box} outside image {width}x{height}", attribute="box", value=self.box
                )
        species_index(self.species)


# ── GT2MorphologyTarget ──────────────────────────────────────────────────────

@dataclass(frozen=True)
class MorphologyTargets:
    indices: Dict[str, torch.Tensor]        # attribute -> (N_total,) long
    offsets: Tuple[Tuple[int, int], ...]    # row -> (image index, instance index)
    counts: Tuple[int, ...]                 # instances per image

    def __len__(self) -> int:
        return len(self.offsets)

    def for_image(self, i: int) -> Dict[str, torch.Tensor]:
        start = sum(self.counts[:i])
        stop = start + self.counts[i]
        return {name: t[start:stop] for name, t in self.indices.items()}

    def to(self, device) -> "MorphologyTargets":
        return MorphologyTargets(
            {name: t.to(device) for name, t in self.indices.items()}, self.offsets, self.counts
        )


def gt_to_morphology_targets(
    vocab: AttributeVocabulary, batch: Sequence[Sequence[AnnotatedInstance]]
) -> MorphologyTargets:
    rows: Dict[str, List[int]] = {name: [] for name in vocab.names}
    offsets = []
    counts = []
    for i, instances in enumerate(batch):
        counts.append(len(instances))
        for j, instance in enumerate(instances):
            for name in vocab.names:
                try:
                    rows[name].append(vocab.encode(name, getattr(instance.morphology, name)))
                except ValidationError as exc:
                    raise ValidationError(
                        f"image {i}, instance {j}: {exc}",
                        attribute=name,
                        value=exc.value,
                        image_index=i,
                        instance_index=j,
                    ) from exc
            offsets.append((i, j))
    indices = {name: torch.tensor(values, dtype=torch.long) for name, values in rows.items()}
    return MorphologyTargets(indices, tuple(offsets), tuple(counts))


# ── Annotation files ─────────────────────────────────────────────────────────

@dataclass(frozen=True)
class ImageRecord:
    id: int
    file_name: str
    width: int
    height: int


@dataclass
class AnnotationSet:
    images: List[ImageRecord]
    instances: Dict[int, List[AnnotatedInstance]]    # keyed by image id

    def instances_for(self, image_id: int) -> List[AnnotatedInstance]:
        return self.instances.get(image_id, [])

    def to_json_dict(self, vocab: AttributeVocabulary) -> dict:
        annotations = []
        for image in self.images:
            for instance in self.instances_for(image.id):
                x0, y0, x1, y1 = instance.box
                annotations.append({
                    "id": len(annotations),
                    "image_id": image.id,
                    "bbox": [float(x0), float(y0), float(x1 - x0), float(y1 - y0)],
                    "species": instance.species,
                    "morphology": instance.morphology.to_dict(),
                })
        return {
            "vocabulary": vocab.fingerprint(),
            "categories": [{"id": i, "name": name} for i, name in enumerate(SPECIES)],
            "images": [
                {"id": im.id, "file_name": im.file_name, "width": im.width, "height": im.height}
                for im in self.images
            ],
            "annotations": annotations,
        }

    @classmethod
    def from_json_dict(cls, data: dict, vocab: AttributeVocabulary) -> "AnnotationSet":
        images = [
            ImageRecord(int(im["id"]), str(im["file_name"]), int(im["width"]), int(im["height"]))
            for im in data.get("images", [])
        ]
        by_id = {im.id: im for im in images}
        instances: Dict[int, List[AnnotatedInstance]] = {im.id: [] for im in images}
        for k, ann in enumerate(data.get("annotations", [])):
            image = by_id.get(ann.get("image_id"))
            if image is None:
                raise ValidationError(f"annotation {k} refers to unknown image {ann.get('image_id')!r}")
            j = len(instances[image.id])
            try:
                x, y, w, h = (float(v) for v in ann["bbox"])
                instance = AnnotatedInstance(
                    box=(x, y, x + w, y + h),
                    species=ann["species"],
                    morphology=MorphologyRecord.from_dict(ann["morphology"], vocab),
                )
                instance.validate(image.width, image.height)
            except ValidationError as exc:
                raise ValidationError(
                    f"image {image.id}, instance {j}: {exc}",
                    attribute=exc.attribute,
                    value=exc.value,
                    image_index=image.id,
                    instance_index=j,
                ) from exc
            except (KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"image {image.id}, instance {j}: malformed annotation ({exc})") from exc
            instances[image.id].append(instance)
        return cls(images, instances)


def write_annotation_file(path: Union[str, Path], annotations: AnnotationSet, vocab: AttributeVocabulary) -> Path:
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(json.dumps(annotations.to_json_dict(vocab), indent=2) + "\n")
    except OSError as exc:
        raise DatasetIOError(f"cannot write annotations to {target}: {exc}") from exc
    return target


def read_annotation_file(path: Union[str, Path], vocab: AttributeVocabulary = None) -> AnnotationSet:
    source = Path(path)
    try:
        data = json.loads(source.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetIOError(f"cannot read annotations from {source}: {exc}") from exc
    return AnnotationSet.from_json_dict(data, vocab or build_vocabulary())
