"""Tests for box conversion and generalized IoU."""

import random

import pytest
import torch

from morphxai.boxes import cxcywh_to_xyxy, elementwise_giou, giou, pairwise_giou, xyxy_to_cxcywh
from morphxai.metrics import iou


def random_box(rng):
    x0, y0 = rng.uniform(0, 10), rng.uniform(0, 10)
    return (x0, y0, x0 + rng.uniform(0.1, 5), y0 + rng.uniform(0.1, 5))


class TestConversion:
    def test_centre_to_corners(self):
        boxes = torch.tensor([[0.5, 0.5, 0.2, 0.4]])
        assert torch.allclose(cxcywh_to_xyxy(boxes), torch.tensor([[0.4, 0.3, 0.6, 0.7]]))

    def test_inverse(self):
        boxes = torch.tensor([[0.1, 0.2, 0.5, 0.9], [0.0, 0.0, 1.0, 1.0]])
        assert torch.allclose(cxcywh_to_xyxy(xyxy_to_cxcywh(boxes)), boxes)


class TestGiou:
    def test_identical_boxes(self):
        assert giou((0, 0, 2, 2), (0, 0, 2, 2)) == pytest.approx(1.0)

    def test_partial_overlap(self):
        assert giou((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(2 / 6)
        assert giou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7 - (9 - 7) / 9)

    def test_contained_box(self):
        assert giou((0, 0, 4, 4), (1, 1, 3, 3)) == pytest.approx(0.25)

    def test_disjoint_boxes_negative(self):
        # union 2, hull 3 x 1
        assert giou((0, 0, 1, 1), (2, 0, 3, 1)) == pytest.approx(-1 / 3)

    def test_coincident_degenerate_boxes(self):
        assert giou((1, 1, 1, 1), (1, 1, 1, 1)) == 0.0

    def test_range_and_bound_by_iou(self):
        rng = random.Random(0)
        for _ in range(1000):
            a, b = random_box(rng), random_box(rng)
            g = giou(a, b)
            assert -1.0 <= g <= 1.0
            assert g <= iou(a, b) + 1e-12

    def test_symmetric(self):
        rng = random.Random(1)
        for _ in range(50):
            a, b = random_box(rng), random_box(rng)
            assert giou(a, b) == pytest.approx(giou(b, a))

    def test_pairwise_matches_scalar(self):
        rng = random.Random(2)
        a = [random_box(rng) for _ in range(4)]
        b = [random_box(rng) for _ in range(3)]
        table = pairwise_giou(torch.tensor(a, dtype=torch.float64), torch.tensor(b, dtype=torch.float64))
        assert table.shape == (4, 3)
        for i in range(4):
            for j in range(3):
                assert float(table[i, j]) == pytest.approx(giou(a[i], b[j]))

    def test_gradient_finite_for_degenerate_pair(self):
        a = torch.tensor([[1.0, 1.0, 1.0, 1.0]], requires_grad=True)
        elementwise_giou(a, torch.tensor([[1.0, 1.0, 1.0, 1.0]])).sum().backward()
        assert torch.isfinite(a.grad).all()
