"""
Box helpers: format conversion, pairwise GIoU, and scalar GIoU.
Corner boxes are (x_min, y_min, x_max, y_max); centre boxes are (cx, cy, w, h).
"""

from typing import Sequence

import torch


def cxcywh_to_xyxy(boxes: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def xyxy_to_cxcywh(boxes: torch.Tensor) -> torch.Tensor:
    x0, y0, x1, y1 = boxes.unbind(-1)
    return torch.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], dim=-1)


def box_area(boxes: torch.Tensor) -> torch.Tensor:
    return (boxes[..., 2] - boxes[..., 0]).clamp(min=0) * (boxes[..., 3] - boxes[..., 1]).clamp(min=0)


def _safe_div(num: torch.Tensor, den: torch.Tensor) -> torch.Tensor:
    # zero denominators give 0 without poisoning gradients of the other branch
    ok = den > 0
    return torch.where(ok, num / torch.where(ok, den, torch.ones_like(den)), torch.zeros_like(num))


def _iou_parts(a: torch.Tensor, b: torch.Tensor):
    """a, b broadcastable (..., 4) corner boxes -> (iou, union, hull area)."""
    lt = torch.max(a[..., :2], b[..., :2])
    rb = torch.min(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a) + box_area(b) - inter
    iou = _safe_div(inter, union)

    lt = torch.min(a[..., :2], b[..., :2])
    rb = torch.max(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    hull = wh[..., 0] * wh[..., 1]
    return iou, union, hull


def elementwise_giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """GIoU of matched rows; a zero-area hull yields 0."""
    iou, union, hull = _iou_parts(a, b)
    return iou - _safe_div(hull - union, hull)


def pairwise_giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return elementwise_giou(a[:, None, :], b[None, :, :])


def giou(box_a: Sequence[float], box_b: Sequence[float]) -> float:
    """Generalized IoU of two corner rectangles, in [-1, 1].

    IoU - (hull - union) / hull. Degenerate boxes that are also coincident
    have a zero-area hull and return 0.
    """
    a = torch.tensor(box_a, dtype=torch.float64)
    b = torch.tensor(box_b, dtype=torch.float64)
    return float(elementwise_giou(a, b))
