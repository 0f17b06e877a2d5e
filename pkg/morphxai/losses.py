"""
MorphXAI training objective.

    L_total = L_det + lambda * L_morphology
    L_morphology = sum_m sum_l alpha_l * CE_m^(l)      (matched pairs only)
    L_det = sum_l [cls^(l) + l1^(l) + giou^(l)] + L_dn

Per-attribute cross-entropy is normalized by the number of matched pairs of
that layer across the batch. Species classification is a per-class sigmoid;
unmatched queries get all-negative targets.
"""

from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from .boxes import cxcywh_to_xyxy, elementwise_giou, giou
from .dataset import ImageTargets
from .errors import ConfigError, ContractError
from .matching import MatchAssignment
from .model import DenoisingQueries, ForwardOutput, LayerPredictions
from .schema import MorphologyTargets

__all__ = [
    "LossWeights",
    "LossBreakdown",
    "GroundTruth",
    "giou",
    "morphology_loss_attribute",
    "morphology_loss_total",
    "detection_loss",
    "make_denoising_queries",
    "total_loss",
]


@dataclass
class LossWeights:
    lambda_morph: float = 0.5                       # lambda
    alpha_layers: Optional[Tuple[float, ...]] = None    # alpha_l; None = 1.0 for every layer
    w_class: float = 2.0
    w_l1: float = 5.0
    w_giou: float = 2.0
    dn_enabled: bool = False
    dn_groups: int = 1                  # noised copies of each ground truth
    dn_box_noise: float = 0.4           # jitter, as a fraction of box size
    dn_label_noise: float = 0.2         # probability of flipping a species label

    def __post_init__(self):
        if self.alpha_layers is not None:
            self.alpha_layers = tuple(float(a) for a in self.alpha_layers)

    def validate(self) -> None:
        if self.lambda_morph < 0:
            raise ConfigError(f"loss.lambda_morph must be >= 0, got {self.lambda_morph}")
        if self.alpha_layers is not None and any(a < 0 for a in self.alpha_layers):
            raise ConfigError(f"loss.alpha_layers must be >= 0, got {self.alpha_layers}")
        if min(self.w_class, self.w_l1, self.w_giou) < 0:
            raise ConfigError("loss detection sub-weights must be >= 0")
        if self.dn_groups < 1 or self.dn_box_noise < 0 or not 0 <= self.dn_label_noise <= 1:
            raise ConfigError("loss.dn_groups >= 1, loss.dn_box_noise >= 0, 0 <= loss.dn_label_noise <= 1 required")

    def alphas(self, num_layers: int) -> Tuple[float, ...]:
        if self.alpha_layers is None:
            return (1.0,) * num_layers
        if len(self.alpha_layers) != num_layers:
            raise ContractError(
                f"alpha_layers has {len(self.alpha_layers)} entries for {num_layers} decoder layers"
            )
        return self.alpha_layers


class GroundTruth(NamedTuple):
    """Anything carrying .targets and .morphology works (a dataset Batch does)."""

    targets: Sequence[ImageTargets]
    morphology: MorphologyTargets


@dataclass
class MorphologyLoss:
    total: torch.Tensor                              # L_morphology
    per_attribute: Dict[str, torch.Tensor]           # L_morph,m^total
    per_layer: Dict[str, List[torch.Tensor]]         # L_morph,m^(l), unweighted


@dataclass
class DetectionLoss:
    total: torch.Tensor
    cls: torch.Tensor
    bbox_l1: torch.Tensor
    bbox_giou: torch.Tensor
    dn: torch.Tensor


@dataclass
class LossBreakdown:
    total: torch.Tensor
    det: torch.Tensor
    cls: torch.Tensor
    bbox_l1: torch.Tensor
    bbox_giou: torch.Tensor
    dn: torch.Tensor
    morphology: torch.Tensor
    morph_per_attribute: Dict[str, torch.Tensor] = field(default_factory=dict)
    morph_per_layer: Dict[str, List[torch.Tensor]] = field(default_factory=dict)
    lambda_morph: float = 0.0
    n_matched: int = 0

    def recompose(self) -> torch.Tensor:
        return self.det + self.lambda_morph * self.morphology

    def is_finite(self) -> bool:
        return bool(torch.isfinite(self.total).item())

    def to_record(self) -> Dict[str, float]:
        """Flat key -> value record for the JSON-lines training log."""
        record = {
            "loss/total": float(self.total),
            "loss/det": float(self.det),
            "loss/cls": float(self.cls),
            "loss/bbox_l1": float(self.bbox_l1),
            "loss/bbox_giou": float(self.bbox_giou),
            "loss/dn": float(self.dn),
            "loss/morphology": float(self.morphology),
            "loss/morph_weighted": float(self.lambda_morph * self.morphology),
            "lambda": float(self.lambda_morph),
            "n_matched": int(self.n_matched),
        }
        for name, value in self.morph_per_attribute.items():
            record[f"loss/morph/{name}"] = float(value)
            for l, layer_value in enumerate(self.morph_per_layer.get(name, [])):
                record[f"loss/morph/{name}/layer{l}"] = float(layer_value)
        return record


# ── helpers ──────────────────────────────────────────────────────────────────

def _batched(output: ForwardOutput) -> List[LayerPredictions]:
    if output.per_layer[0].boxes.dim() == 3:
        return output.per_layer
    return [
        LayerPredictions(l.boxes[None], l.class_logits[None], {k: v[None] for k, v in l.morph_logits.items()})
        for l in output.per_layer
    ]


def _by_layer(assignments, num_layers: int) -> List[List[MatchAssignment]]:
    """Accept [layer][image] or, for a single image, [layer]."""
    if len(assignments) != num_layers:
        raise ContractError(f"{len(assignments)} assignment sets for {num_layers} decoder layers")
    if assignments and isinstance(assignments[0], MatchAssignment):
        return [[a] for a in assignments]
    return [list(a) for a in assignments]


def _check_range(targets: torch.Tensor, num_classes: int, what: str) -> None:
    if targets.numel() and (int(targets.min()) < 0 or int(targets.max()) >= num_classes):
        raise ContractError(f"{what}: target index out of range 0..{num_classes - 1}")


def _gather_matched(logits: torch.Tensor, layer_assignments: Sequence[MatchAssignment], starts: Sequence[int]):
    """Batched (B, Q, C) logits -> (matched rows, flat ground-truth row indices)."""
    img, qry, gt = [], [], []
    for b, assignment in enumerate(layer_assignments):
        for q, j in assignment.pairs:
            img.append(b)
            qry.append(q)
            gt.append(starts[b] + j)
    device = logits.device
    rows = logits[torch.tensor(img, dtype=torch.long, device=device), torch.tensor(qry, dtype=torch.long, device=device)]
    return rows, torch.tensor(gt, dtype=torch.long, device=device)


# ── morphology ───────────────────────────────────────────────────────────────

def morphology_loss_attribute(
    layer_logits: torch.Tensor, assignment: MatchAssignment, targets: torch.Tensor
) -> torch.Tensor:
    """Mean cross-entropy over matched (q, j) pairs of one image; 0 with no match."""
    targets = torch.as_tensor(targets, dtype=torch.long, device=layer_logits.device)
    _check_range(targets, layer_logits.shape[-1], "morphology")
    if not assignment.pairs:
        return layer_logits.new_zeros(())
    rows = layer_logits[assignment.query_indices.to(layer_logits.device)]
    return F.cross_entropy(rows, targets[assignment.target_indices.to(targets.device)], reduction="mean")


def morphology_loss_total(
    output: ForwardOutput, assignments, targets: MorphologyTargets, weights: LossWeights
) -> MorphologyLoss:
    layers = _batched(output)
    alphas = weights.alphas(len(layers))
    per_layer_assignments = _by_layer(assignments, len(layers))
    starts = [sum(targets.counts[:b]) for b in range(len(targets.counts))]

    per_layer: Dict[str, List[torch.Tensor]] = {}
    per_attribute: Dict[str, torch.Tensor] = {}
    for name, attr_targets in targets.indices.items():
        per_layer[name] = []
        for layer, layer_assignments in zip(layers, per_layer_assignments):
            if name not in layer.morph_logits:
                raise ContractError(f"layer predictions lack attribute logits for '{name}'")
            logits = layer.morph_logits[name]
            attr_targets = attr_targets.to(logits.device)
            _check_range(attr_targets, logits.shape[-1], name)
            n_match = sum(len(a) for a in layer_assignments)
            if n_match == 0:
                per_layer[name].append(logits.new_zeros(()))
                continue
            rows, gt_rows = _gather_matched(logits, layer_assignments, starts)
            per_layer[name].append(F.cross_entropy(rows, attr_targets[gt_rows], reduction="sum") / n_match)
        per_attribute[name] = sum(a * v for a, v in zip(alphas, per_layer[name]))

    reference = layers[-1].boxes
    total = sum(per_attribute.values()) if per_attribute else reference.new_zeros(())
    return MorphologyLoss(total, per_attribute, per_layer)


# ── detection ────────────────────────────────────────────────────────────────

def _layer_detection_terms(layer: LayerPredictions, layer_assignments, targets: Sequence[ImageTargets], weights):
    logits = layer.class_logits
    class_target = torch.zeros_like(logits)
    pred_boxes, gt_boxes = [], []
    for b, (assignment, tgt) in enumerate(zip(layer_assignments, targets)):
        if not assignment.pairs:
            continue
        q = assignment.query_indices.to(logits.device)
        j = assignment.target_indices.to(logits.device)
        labels = tgt.labels.to(logits.device)
        _check_range(labels, logits.shape[-1], "species")
        class_target[b, q, labels[j]] = 1.0
        pred_boxes.append(layer.boxes[b, q])
        gt_boxes.append(tgt.boxes.to(layer.boxes)[j])

    n_match = sum(len(a) for a in layer_assignments)
    cls = F.binary_cross_entropy_with_logits(logits, class_target, reduction="sum") / max(n_match, 1)
    if n_match == 0:
        zero = logits.new_zeros(())
        return weights.w_class * cls, zero, zero
    pred = torch.cat(pred_boxes)
    gt = torch.cat(gt_boxes)
    l1 = (pred - gt).abs().sum() / n_match
    g = (1.0 - elementwise_giou(cxcywh_to_xyxy(pred), cxcywh_to_xyxy(gt))).sum() / n_match
    return weights.w_class * cls, weights.w_l1 * l1, weights.w_giou * g


def _denoising_term(output: ForwardOutput, targets: Sequence[ImageTargets], weights: LossWeights, zero):
    groups = [(g, t) for g, t in zip(output.denoising or [], targets) if g is not None]
    if not groups:
        return zero
    total = zero
    for (queries, predictions), tgt in groups:
        k = queries.target_index.to(zero.device)
        matched = MatchAssignment(tuple((i, int(j)) for i, j in enumerate(k.tolist())), ())
        for layer in predictions:
            cls, l1, g = _layer_detection_terms(layer, [matched], [tgt], weights)
            total = total + cls + l1 + g
    return total / len(groups)


def detection_loss(
    output: ForwardOutput, assignments, targets: Sequence[ImageTargets], weights: LossWeights
) -> DetectionLoss:
    """Class + l1 + (1 - GIoU) per layer, summed over layers, plus the optional denoising term."""
    layers = _batched(output)
    per_layer_assignments = _by_layer(assignments, len(layers))
    if len(targets) != layers[0].boxes.shape[0]:
        raise ContractError(f"{len(targets)} target sets for a batch of {layers[0].boxes.shape[0]}")
    zero = layers[-1].boxes.new_zeros(())
    cls, l1, g = zero, zero, zero
    for layer, layer_assignments in zip(layers, per_layer_assignments):
        c, b, gi = _layer_detection_terms(layer, layer_assignments, targets, weights)
        cls, l1, g = cls + c, l1 + b, g + gi
    dn = _denoising_term(output, targets, weights, zero) if weights.dn_enabled else zero
    return DetectionLoss(total=cls + l1 + g + dn, cls=cls, bbox_l1=l1, bbox_giou=g, dn=dn)


def make_denoising_queries(
    targets: ImageTargets, weights: LossWeights, num_species: int, generator: Optional[torch.Generator] = None
) -> Optional[DenoisingQueries]:
    """Jittered boxes and randomly flipped labels, dn_groups copies per ground truth."""
    n = len(targets)
    if n == 0:
        return None
    boxes = targets.boxes.repeat(weights.dn_groups, 1)
    labels = targets.labels.repeat(weights.dn_groups)
    index = torch.arange(n, dtype=torch.long).repeat(weights.dn_groups)

    def noise(shape):
        return torch.rand(shape, generator=generator, dtype=boxes.dtype) * 2.0 - 1.0

    scale = weights.dn_box_noise
    centre = boxes[:, :2] + noise((boxes.shape[0], 2)) * boxes[:, 2:] * scale / 2
    size = boxes[:, 2:] * (1.0 + noise((boxes.shape[0], 2)) * scale)
    noised = torch.cat([centre, size.clamp(min=1e-3)], dim=1).clamp(0.0, 1.0)

    flip = torch.rand(labels.shape, generator=generator) < weights.dn_label_noise
    random_labels = torch.randint(0, num_species, labels.shape, generator=generator)
    labels = torch.where(flip, random_labels, labels)
    return DenoisingQueries(boxes=noised, labels=labels, target_index=index)


# ── total ────────────────────────────────────────────────────────────────────

def total_loss(output: ForwardOutput, assignments, gt, weights: LossWeights) -> LossBreakdown:
    """gt carries .targets (per-image ImageTargets) and .morphology (MorphologyTargets)."""
    det = detection_loss(output, assignments, gt.targets, weights)
    morph = morphology_loss_total(output, assignments, gt.morphology, weights)
    layers = _by_layer(assignments, output.num_layers)
    return LossBreakdown(
        total=det.total + weights.lambda_morph * morph.total,
        det=det.total,
        cls=det.cls,
        bbox_l1=det.bbox_l1,
        bbox_giou=det.bbox_giou,
        dn=det.dn,
        morphology=morph.total,
        morph_per_attribute=morph.per_attribute,
        morph_per_layer=morph.per_layer,
        lambda_morph=weights.lambda_morph,
        n_matched=sum(len(a) for a in layers[-1]),
    )
