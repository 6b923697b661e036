import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ullava.errors import ShapeMismatch
from ullava.losses import (
    LossConfig,
    bce_loss,
    dice_loss,
    fine_grained_loss,
    generalized_iou,
    giou_loss,
    l1_box_loss,
    mean_breakdown,
)
from ullava.types import NormalizedBox

D = torch.float64


def t(x):
    return torch.tensor(x, dtype=D)


def test_bce_examples():
    mask = np.array([[1, 0], [0, 1]], bool)
    assert bce_loss(t([[40.0, -40.0], [-40.0, 40.0]]), mask).item() < 1e-15
    assert bce_loss(torch.zeros(2, 2, dtype=D), mask).item() == pytest.approx(0.6931, abs=1e-4)
    assert bce_loss(t([[0.0]]), np.ones((1, 1), bool)).item() == pytest.approx(math.log(2), abs=1e-15)


def test_bce_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        bce_loss(torch.zeros(2, 2), np.zeros((3, 3), bool))


def test_dice_examples():
    big = 1e3
    target = np.array([[1, 0], [0, 0]], bool)
    assert dice_loss(t([[big, -big], [-big, -big]]), target).item() == pytest.approx(0, abs=1e-6)
    assert dice_loss(t([[-big, big], [big, big]]), target).item() == pytest.approx(1, abs=1e-6)
    # p = (1, 1, 0, 0), t = (1, 0, 0, 0) -> 1 - 2/3
    assert dice_loss(t([[big, big], [-big, -big]]), target).item() == pytest.approx(1 / 3, abs=1e-6)


def test_l1_examples():
    assert l1_box_loss(t([0, 0, 1, 1]), t([0, 0, 1, 1])).item() == 0
    assert l1_box_loss(t([0, 0, 1, 1]), t([0, 0, 0.5, 1])).item() == pytest.approx(0.125, abs=1e-15)


def test_giou_examples():
    assert giou_loss(t([0.1, 0.2, 0.5, 0.9]), t([0.1, 0.2, 0.5, 0.9])).item() == pytest.approx(0, abs=1e-15)
    assert giou_loss(t([0, 0, 0.2, 0.2]), t([0.8, 0.8, 1, 1])).item() == pytest.approx(1.92, abs=1e-12)
    assert giou_loss(t([0, 0, 1, 1]), t([0.25, 0.25, 0.75, 0.75])).item() == pytest.approx(0.75, abs=1e-12)
    assert giou_loss(t([0, 0, 1, 1]), NormalizedBox(0.25, 0.25, 0.75, 0.75)).item() == pytest.approx(0.75)


def test_fgl_arithmetic():
    cfg = LossConfig()
    assert (cfg.alpha1, cfg.alpha2, cfg.beta1, cfg.beta2) == (2.0, 0.5, 1.0, 1.0)
    assert 1.0 + cfg.alpha1 * 0.5 + cfg.alpha2 * 0.2 == pytest.approx(2.1)
    assert 1.0 + cfg.beta1 * 0.1 + cfg.beta2 * 0.3 == pytest.approx(1.4)


def test_no_pairs_is_identity():
    l = torch.tensor(1.2345, requires_grad=True)
    out = fine_grained_loss(l)
    assert out.l_fgl is l and out.branch == "none"
    assert out.l_pixel is None and out.l_region is None


def test_branches():
    logits = torch.zeros(1, 4, 4, dtype=D)
    mask = np.zeros((1, 4, 4), bool)
    box = (t([[0.0, 0.0, 0.5, 0.5]]), t([[0.0, 0.0, 0.5, 1.0]]))
    both = fine_grained_loss(t(1.0), (logits, mask), box)
    assert both.branch == "pixel+region"
    assert both.l_fgl.item() == pytest.approx(1.0 + both.l_pixel.item() + both.l_region.item())
    only_mask = fine_grained_loss(t(1.0), (logits, mask), box, LossConfig(combine_branches=False))
    assert only_mask.l_region is None and only_mask.branch == "pixel"


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        LossConfig(alpha1=-1)


def test_mean_breakdown_skips_missing():
    a = fine_grained_loss(t(1.0))
    b = fine_grained_loss(t(3.0), box_pair=(t([0, 0, 1, 1]), t([0, 0, 1, 1])))
    m = mean_breakdown([a, b])
    assert m["l_cgl"] == 2.0 and m["l_region"] == 0.0


boxes = st.tuples(
    st.floats(0, 0.45), st.floats(0, 0.45), st.floats(0.55, 1), st.floats(0.55, 1)
)


@settings(max_examples=200, deadline=None)
@given(boxes, boxes)
def test_giou_bounds_and_symmetry(a, b):
    g1, g2 = generalized_iou(t(a), t(b)).item(), generalized_iou(t(b), t(a)).item()
    assert -1 - 1e-12 <= g1 <= 1 + 1e-12
    assert g1 == pytest.approx(g2, abs=1e-12)
    assert generalized_iou(t(a), t(a)).item() == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mask_losses_nonnegative(seed):
    g = np.random.default_rng(seed)
    logits = t(g.normal(0, 3, (5, 6)))
    target = g.random((5, 6)) > 0.5
    assert bce_loss(logits, target).item() >= 0
    assert 0 <= dice_loss(logits, target).item() <= 1 + 1e-12
