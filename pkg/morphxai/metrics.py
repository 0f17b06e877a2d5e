"""
MorphXAI evaluation.
COCO-style AP/AR (101-point interpolation, greedy confidence-ordered
one-to-one matching), detection-conditioned morphology accuracy, and
single-threaded latency measurement with and without the attribute heads.
"""

import time
from dataclasses import asdict, dataclass, field, replace
from itertools import cycle, islice
from typing import Any, Dict, Hashable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from .errors import ContractError
from .model import AttributeCall, Detection
from .schema import SPECIES, AnnotatedInstance, AttributeVocabulary

Box = Tuple[float, float, float, float]

COCO_IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2).tolist())
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def iou(box_a: Sequence[float], box_b: Sequence[float]) -> float:
    """Intersection over union of two corner rectangles; disjoint -> 0."""
    ax0, ay0, ax1, ay1 = (float(v) for v in box_a)
    bx0, by0, bx1, by1 = (float(v) for v in box_b)
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = max(0.0, ax1 - ax0) * max(0.0, ay1 - ay0) + max(0.0, bx1 - bx0) * max(0.0, by1 - by0) - inter
    return inter / union if union > 0 else 0.0


# ── AP / AR ──────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class ScoredBox:
    image_id: Hashable
    box: Box
    label: Hashable
    score: float


@dataclass(frozen=True)
class GroundTruthBox:
    image_id: Hashable
    box: Box
    label: Hashable


@dataclass
class APResult:
    ap_50_95: Optional[float]
    ap_50: Optional[float]
    ap_75: Optional[float]
    ar_50_95: Optional[float]
    per_class: Dict[Hashable, Optional[float]] = field(default_factory=dict)     # AP.50:.95 per label


def _ranked(detections: Sequence[ScoredBox]) -> List[ScoredBox]:
    # total order, so input order never matters
    return sorted(detections, key=lambda d: (-d.score, str(d.image_id), tuple(d.box), str(d.label)))


def _greedy_tp(ranked: Sequence[ScoredBox], gts: Sequence[GroundTruthBox], threshold: float) -> np.ndarray:
    """Each detection, best-confidence first, takes the best unmatched GT with IoU >= threshold."""
    by_image: Dict[Hashable, List[GroundTruthBox]] = {}
    for gt in gts:
        by_image.setdefault(gt.image_id, []).append(gt)
    used = {image_id: [False] * len(items) for image_id, items in by_image.items()}
    tp = np.zeros(len(ranked), dtype=bool)
    for k, det in enumerate(ranked):
        best, best_iou = -1, threshold
        for j, gt in enumerate(by_image.get(det.image_id, [])):
            if used[det.image_id][j]:
                continue
            overlap = iou(det.box, gt.box)
            if overlap >= best_iou and (best < 0 or overlap > best_iou):
                best, best_iou = j, overlap
        if best >= 0:
            used[det.image_id][best] = True
            tp[k] = True
    return tp


def interpolated_ap(tp: np.ndarray, num_gt: int) -> Tuple[float, float]:
    """(101-point interpolated AP, max recall) for a ranked TP/FP vector."""
    if num_gt == 0:
        raise ContractError("AP is undefined without ground truth")
    if tp.size == 0:
        return 0.0, 0.0
    acc_tp = np.cumsum(tp)
    acc_fp = np.cumsum(~tp)
    recall = acc_tp / num_gt
    precision = acc_tp / (acc_tp + acc_fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.array([envelope[i] if i < envelope.size else 0.0 for i in idx])
    return float(sampled.mean()), float(recall[-1])


def compute_ap(
    detections: Sequence[ScoredBox],
    ground_truths: Sequence[GroundTruthBox],
    iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS,
) -> APResult:
    """Per-class AP averaged over classes; classes without ground truth are skipped.

    Everything is None when there is no ground truth at all.
    """
    labels = sorted({gt.label for gt in ground_truths}, key=str)
    if not labels:
        return APResult(None, None, None, None, {})
    thresholds = [float(t) for t in iou_thresholds]
    ap = np.zeros((len(labels), len(thresholds)))
    ar = np.zeros((len(labels), len(thresholds)))
    for c, label in enumerate(labels):
        ranked = _ranked([d for d in detections if d.label == label])
        gts = [g for g in ground_truths if g.label == label]
        for t, threshold in enumerate(thresholds):
            ap[c, t], ar[c, t] = interpolated_ap(_greedy_tp(ranked, gts, threshold), len(gts))

    def at(threshold: float) -> Optional[float]:
        for t, value in enumerate(thresholds):
            if abs(value - threshold) < 1e-9:
                return float(ap[:, t].mean())
        return None

    return APResult(
        ap_50_95=float(ap.mean()),
        ap_50=at(0.5),
        ap_75=at(0.75),
        ar_50_95=float(ar.mean()),
        per_class={label: float(ap[c].mean()) for c, label in enumerate(labels)},
    )


# ── Detection-conditioned accuracy ───────────────────────────────────────────

@dataclass
class ConditionedAccuracy:
    accuracy: Dict[str, Optional[float]]       # None when nothing matched
    correct: Dict[str, int]
    matched: int
    confusion: Dict[str, List[List[int]]]      # rows: ground truth, columns: prediction


def _decoded(detection: Detection, name: str) -> Any:
    if name not in detection.explanation:
        raise ContractError(f"detection lacks attribute '{name}' in its explanation")
    call = detection.explanation[name]
    return call.value if isinstance(call, AttributeCall) else call


def match_detections(
    detections: Mapping[Hashable, Sequence[Detection]],
    ground_truths: Mapping[Hashable, Sequence[AnnotatedInstance]],
    iou_min: float = 0.5,
    class_aware: bool = False,
) -> List[Tuple[Detection, AnnotatedInstance]]:
    """Greedy one-to-one matching by confidence at IoU >= iou_min, per image."""
    pairs = []
    for image_id in sorted(detections, key=str):
        gts = list(ground_truths.get(image_id, []))
        used = [False] * len(gts)
        ranked = sorted(detections[image_id], key=lambda d: (-d.confidence, tuple(d.box), d.species))
        for det in ranked:
            best, best_iou = -1, iou_min
            for j, gt in enumerate(gts):
                if used[j] or (class_aware and gt.species != det.species):
                    continue
                overlap = iou(det.box, gt.box)
                if overlap >= best_iou and (best < 0 or overlap > best_iou):
                    best, best_iou = j, overlap
            if best >= 0:
                used[best] = True
                pairs.append((det, gts[best]))
    return pairs


def detection_conditioned_accuracy(
    detections: Mapping[Hashable, Sequence[Detection]],
    ground_truths: Mapping[Hashable, Sequence[AnnotatedInstance]],
    vocab: AttributeVocabulary,
    iou_min: float = 0.5,
    class_aware: bool = False,
) -> ConditionedAccuracy:
    """Attribute accuracy over localized detections only.

    Detection and ground-truth boxes must share one coordinate frame.
    """
    for dets in detections.values():
        for det in dets:
            for name in vocab.names:
                _decoded(det, name)

    pairs = match_detections(detections, ground_truths, iou_min, class_aware)
    correct = {name: 0 for name in vocab.names}
    confusion = {
        name: [[0] * vocab.cardinality(name) for _ in range(vocab.cardinality(name))] for name in vocab.names
    }
    for det, gt in pairs:
        for name in vocab.names:
            truth = vocab.encode(name, getattr(gt.morphology, name))
            guess = vocab.encode(name, _decoded(det, name))
            confusion[name][truth][guess] += 1
            if truth == guess:
                correct[name] += 1
    matched = len(pairs)
    accuracy = {name: (correct[name] / matched if matched else None) for name in vocab.names}
    return ConditionedAccuracy(accuracy, correct, matched, confusion)


# ── Latency ──────────────────────────────────────────────────────────────────

@dataclass
class LatencyResult:
    ms_per_image: float
    fps: float
    images: int
    ablated: bool


@dataclass
class LatencyComparison:
    full: LatencyResult
    ablated: LatencyResult

    @property
    def overhead_ratio(self) -> float:
        return self.full.ms_per_image / self.ablated.ms_per_image

    def to_dict(self) -> dict:
        return {
            "full": asdict(self.full),
            "ablated": asdict(self.ablated),
            "overhead_ratio": self.overhead_ratio,
        }


@torch.no_grad()
def measure_latency(
    model: torch.nn.Module,
    images: Sequence[torch.Tensor],
    ablate_morph_heads: bool = False,
    warmup: int = 10,
    min_images: int = 100,
) -> LatencyResult:
    """Mean wall-clock ms per H x W x 3 image, one image per forward, one thread.

    The stream is cycled when shorter than warmup + min_images.
    """
    if len(images) == 0:
        raise ContractError("latency needs at least one image")
    warmup = max(warmup, 10)
    timed = max(min_images, 100)
    stream = list(islice(cycle(images), warmup + timed))
    was_training = model.training
    threads = torch.get_num_threads()
    model.eval()
    torch.set_num_threads(1)
    try:
        for image in stream[:warmup]:
            model(image[None], with_morphology=not ablate_morph_heads)
        start = time.perf_counter()
        for image in stream[warmup:]:
            model(image[None], with_morphology=not ablate_morph_heads)
        elapsed = time.perf_counter() - start
    finally:
        torch.set_num_threads(threads)
        model.train(was_training)
    ms = elapsed * 1000.0 / timed
    return LatencyResult(ms_per_image=ms, fps=1000.0 / ms if ms > 0 else float("inf"), images=timed, ablated=ablate_morph_heads)


def compare_latency(model: torch.nn.Module, images: Sequence[torch.Tensor], **kwargs) -> LatencyComparison:
    ablated = measure_latency(model, images, ablate_morph_heads=True, **kwargs)
    full = measure_latency(model, images, ablate_morph_heads=False, **kwargs)
    return LatencyComparison(full=full, ablated=ablated)


# ── Summary ──────────────────────────────────────────────────────────────────

@dataclass
class EvaluationSummary:
    ap_50_95: Optional[float]
    ap_50: Optional[float]
    ap_75: Optional[float]
    ar_50_95: Optional[float]
    per_class_ap: Dict[str, Optional[float]]
    attribute_accuracy: Dict[str, Optional[float]]                  # class-agnostic matching
    attribute_accuracy_class_aware: Dict[str, Optional[float]]
    matched: int
    matched_class_aware: int
    confusion: Dict[str, List[List[int]]]
    num_images: int
    num_detections: int
    num_ground_truths: int
    latency: Optional[dict] = None

    def to_dict(self) -> dict:
        return asdict(self)


def _normalized(instance: AnnotatedInstance, size: Tuple[float, float]) -> AnnotatedInstance:
    w, h = size
    x0, y0, x1, y1 = instance.box
    return replace(instance, box=(x0 / w, y0 / h, x1 / w, y1 / h))


def evaluate_detections(
    detections: Mapping[Hashable, Sequence[Detection]],
    ground_truths: Mapping[Hashable, Sequence[AnnotatedInstance]],
    image_sizes: Mapping[Hashable, Tuple[float, float]],
    vocab: AttributeVocabulary,
    iou_min: float = 0.5,
    latency: Optional[LatencyComparison] = None,
) -> EvaluationSummary:
    """Detections (normalized boxes) against pixel-space ground truth."""
    gts = {
        image_id: [_normalized(inst, image_sizes[image_id]) for inst in instances]
        for image_id, instances in ground_truths.items()
    }
    dets = {image_id: list(detections.get(image_id, [])) for image_id in gts}

    scored = [
        ScoredBox(image_id, tuple(d.box), d.species, d.confidence) for image_id, ds in dets.items() for d in ds
    ]
    truth = [GroundTruthBox(image_id, inst.box, inst.species) for image_id, insts in gts.items() for inst in insts]
    ap = compute_ap(scored, truth)
    agnostic = detection_conditioned_accuracy(dets, gts, vocab, iou_min)
    aware = detection_conditioned_accuracy(dets, gts, vocab, iou_min, class_aware=True)

    return EvaluationSummary(
        ap_50_95=ap.ap_50_95,
        ap_50=ap.ap_50,
        ap_75=ap.ap_75,
        ar_50_95=ap.ar_50_95,
        per_class_ap={name: ap.per_class.get(name) for name in SPECIES},
        attribute_accuracy=agnostic.accuracy,
        attribute_accuracy_class_aware=aware.accuracy,
        matched=agnostic.matched,
        matched_class_aware=aware.matched,
        confusion=agnostic.confusion,
        num_images=len(gts),
        num_detections=len(scored),
        num_ground_truths=len(truth),
        latency=latency.to_dict() if latency is not None else None,
    )
