"""
MorphXAI query/ground-truth matching.
Exact minimum-cost bipartite assignment (Hungarian) per image and per decoder
layer. The cost uses detection terms only; morphology never enters it.
"""

from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .boxes import cxcywh_to_xyxy, pairwise_giou
from .dataset import ImageTargets
from .errors import ConfigError, ContractError
from .model import ForwardOutput, LayerPredictions


@dataclass(frozen=True)
class MatchCostWeights:
    w_class: float = 2.0
    w_l1: float = 5.0
    w_giou: float = 2.0

    def validate(self) -> None:
        values = (self.w_class, self.w_l1, self.w_giou)
        if any(v < 0 for v in values):
            raise ConfigError(f"matching cost weights must be >= 0, got {values}")
        if not any(v > 0 for v in values):
            raise ConfigError("matching cost weights cannot all be zero")


@dataclass(frozen=True)
class MatchAssignment:
    pairs: Tuple[Tuple[int, int], ...]      # (query q, ground truth j), ordered by q
    unmatched: Tuple[int, ...]              # query indices without a ground truth

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def query_indices(self) -> torch.Tensor:
        return torch.tensor([q for q, _ in self.pairs], dtype=torch.long)

    @property
    def target_indices(self) -> torch.Tensor:
        return torch.tensor([j for _, j in self.pairs], dtype=torch.long)

    def total_cost(self, cost) -> float:
        c = np.asarray(cost, dtype=np.float64)
        return float(sum(c[q, j] for q, j in self.pairs))


def pairwise_cost(layer: LayerPredictions, targets: ImageTargets, weights: MatchCostWeights) -> torch.Tensor:
    """Q x N_i matching cost for one image.

    -w_class * p(species_j) + w_l1 * |b_q - b_j|_1 + w_giou * (1 - GIoU(b_q, b_j)),
    boxes in normalized (cx, cy, w, h).
    """
    with torch.no_grad():
        boxes = layer.boxes.detach()
        q = boxes.shape[0]
        n = len(targets)
        if n == 0:
            return torch.zeros((q, 0), dtype=boxes.dtype, device=boxes.device)
        tgt_boxes = targets.boxes.to(boxes)
        prob = torch.sigmoid(layer.class_logits.detach())
        cost_class = -prob[:, targets.labels.to(boxes.device)]
        cost_l1 = torch.cdist(boxes, tgt_boxes, p=1)
        cost_giou = 1.0 - pairwise_giou(cxcywh_to_xyxy(boxes), cxcywh_to_xyxy(tgt_boxes))
        return weights.w_class * cost_class + weights.w_l1 * cost_l1 + weights.w_giou * cost_giou


def hungarian_assign(cost: Union[torch.Tensor, np.ndarray, Sequence[Sequence[float]]]) -> MatchAssignment:
    if isinstance(cost, torch.Tensor):
        cost = cost.detach().cpu().numpy()
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ContractError(f"cost matrix must be 2-D, got shape {c.shape}")
    q, n = c.shape
    if n > q:
        raise ContractError(f"more ground truths ({n}) than queries ({q})")
    if n == 0:
        return MatchAssignment((), tuple(range(q)))
    if not np.isfinite(c).all():
        raise ContractError("cost matrix contains non-finite entries")
    rows, cols = linear_sum_assignment(c)
    pairs = tuple(sorted((int(r), int(k)) for r, k in zip(rows, cols)))
    taken = {r for r, _ in pairs}
    return MatchAssignment(pairs, tuple(i for i in range(q) if i not in taken))


def match_all_layers(
    output: ForwardOutput, targets: ImageTargets, weights: MatchCostWeights
) -> List[MatchAssignment]:
    """Single-image output -> one independent assignment per decoder layer."""
    return [hungarian_assign(pairwise_cost(layer, targets, weights)) for layer in output.per_layer]


def match_batch(
    output: ForwardOutput,
    targets: Sequence[ImageTargets],
    weights: MatchCostWeights,
    rematch_per_layer: bool = True,
) -> List[List[MatchAssignment]]:
    """Batched output -> assignments indexed [layer][image].

    With rematch_per_layer off, every layer reuses the final layer's match.
    """
    samples = output.split()
    if len(samples) != len(targets):
        raise ContractError(f"{len(samples)} predictions but {len(targets)} target sets")
    if rematch_per_layer:
        per_image = [match_all_layers(s, t, weights) for s, t in zip(samples, targets)]
    else:
        per_image = [
            [hungarian_assign(pairwise_cost(s.final, t, weights))] * s.num_layers
            for s, t in zip(samples, targets)
        ]
    return [list(layer) for layer in zip(*per_image)]
