import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ullava.data.rle import mask_to_bbox
from ullava.data.synthetic import make_corpus
from ullava.errors import NoEvidence, ShapeMismatch, ValidationError
from ullava.metrics import (
    CIoUAccumulator,
    PrecAccumulator,
    SamplePrediction,
    accumulate_ciou,
    accumulate_prec,
    box_iou,
    evaluate_split,
    fuse_rec_outputs,
)
from ullava.types import NormalizedBox


def pair_with_counts(inter, union, size=100):
    """Masks whose intersection and union have the given pixel counts."""
    p = np.zeros(size, bool)
    t = np.zeros(size, bool)
    p[:union] = True
    t[:inter] = True
    return p.reshape(10, 10), t.reshape(10, 10)


def test_ciou_is_not_mean_iou():
    acc = CIoUAccumulator()
    for i, u in [(10, 20), (30, 40)]:
        acc = accumulate_ciou(acc, *pair_with_counts(i, u))
    assert (acc.total_intersection, acc.total_union) == (40, 60)
    assert acc.finalize() == pytest.approx(0.6667, abs=1e-4)


def test_ciou_edge_cases(rng):
    t = rng.random((5, 5)) > 0.5
    assert accumulate_ciou(CIoUAccumulator(), t, t).finalize() == 1.0
    assert accumulate_ciou(CIoUAccumulator(), ~t, t).finalize() == 0.0
    assert CIoUAccumulator().finalize() == 1.0
    with pytest.raises(ShapeMismatch):
        accumulate_ciou(CIoUAccumulator(), t, t[:4])


def test_box_iou_examples():
    a = NormalizedBox(0, 0, 1, 1)
    assert box_iou(a, a) == 1
    assert box_iou(a, NormalizedBox(0.5, 0, 1, 1)) == pytest.approx(0.5)
    assert box_iou(NormalizedBox(0, 0, 0.2, 0.2), NormalizedBox(0.5, 0.5, 1, 1)) == 0


def test_prec_examples():
    a = NormalizedBox(0, 0, 1, 1)
    half = NormalizedBox(0.5, 0, 1, 1)
    assert accumulate_prec(PrecAccumulator(0.5), half, a).hits == 0  # IoU exactly 0.5 is not a hit
    acc = PrecAccumulator(0.5)
    for pred in (a, a, a, None):
        acc = accumulate_prec(acc, pred, a)
    assert acc.finalize() == 75.0
    with pytest.raises(ValidationError):
        PrecAccumulator().finalize()


def test_fusion_examples():
    m = np.zeros((8, 8), bool)
    m[2:6, 2:6] = True
    mb = mask_to_bbox(m)
    loc = NormalizedBox(0.1, 0.1, 0.5, 0.5)
    assert fuse_rec_outputs(loc, None) == loc
    assert fuse_rec_outputs(None, m) == mb
    assert fuse_rec_outputs(mb, m) == mb
    assert fuse_rec_outputs(NormalizedBox(0.9, 0.9, 1, 1), m) == mb  # disagreement: mask wins
    with pytest.raises(NoEvidence):
        fuse_rec_outputs(None, np.zeros((4, 4), bool))


boxes = st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1)).map(
    lambda v: NormalizedBox(min(v[0], v[2]), min(v[1], v[3]), max(v[0], v[2]), max(v[1], v[3]))
)


@settings(max_examples=200, deadline=None)
@given(boxes, boxes)
def test_box_iou_properties(a, b):
    v = box_iou(a, b)
    assert 0 <= v <= 1 and v == pytest.approx(box_iou(b, a))


def oracle_predictor(samples):
    def predict(s):
        return SamplePrediction(list(s.target_masks), list(s.target_boxes))

    return predict


def test_perfect_predictions():
    samples = make_corpus("res", 3, seed=1)[0] + make_corpus("rec", 3, seed=2)[0]
    res = evaluate_split(samples, oracle_predictor(samples)).to_dict()
    assert res["ciou"] == 1.0 and res["prec@0.5"] == 100.0


def test_empty_split_is_error():
    with pytest.raises(ValidationError):
        evaluate_split([], lambda s: SamplePrediction())


def test_missing_predictions_count_as_misses():
    samples = make_corpus("rec", 2, seed=2)[0] + make_corpus("res", 2, seed=3)[0]
    res = evaluate_split(samples, lambda s: SamplePrediction()).to_dict()
    assert res["prec@0.5"] == 0.0 and res["ciou"] == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 7), st.integers(0, 1000))
def test_shard_merge_exact(n_shards, seed):
    samples = make_corpus("res", 5, seed=seed % 7)[0] + make_corpus("rec", 4, seed=seed % 5)[0]
    g = np.random.default_rng(seed)
    noise = {s.id: (g.random((64, 64)) > 0.5, NormalizedBox(*sorted(g.random(2)), 1, 1)) for s in samples}

    def predict(s):
        m, b = noise[s.id]
        return SamplePrediction([m], [NormalizedBox(b.x1, 0, b.x2, 1)])

    one = evaluate_split(samples, predict, n_shards=1)
    many = evaluate_split(samples, predict, n_shards=n_shards)
    assert one.to_dict() == many.to_dict()
