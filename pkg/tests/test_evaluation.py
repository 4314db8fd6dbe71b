import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_force_miou
from plasmaseg.core import InstancePrediction
from plasmaseg.evaluation import (
    BothEmptyMasksError,
    IdMismatchError,
    format_report,
    instance_iou,
    mean_iou_score,
)


def _m(shape, *pixels):
    m = np.zeros(shape, np.uint8)
    for p in pixels:
        m[p] = 1
    return m


def test_iou_identity_and_disjoint():
    a = _m((4, 4), (0, 0), (1, 1))
    assert instance_iou(a, a) == 1.0
    assert instance_iou(a, _m((4, 4), (3, 3))) == 0.0


def test_iou_by_enumeration():
    a = _m((3, 3), (0, 0), (0, 1))
    b = _m((3, 3), (0, 1), (0, 2))
    assert instance_iou(a, b) == 1 / 3


def test_iou_empty_cases():
    z = np.zeros((3, 3), np.uint8)
    with pytest.raises(BothEmptyMasksError):
        instance_iou(z, z)
    assert instance_iou(z, _m((3, 3), (1, 1))) == 0.0


def _pred(mask, iid=0, sid="a"):
    return InstancePrediction(iid, mask, mask, np.zeros_like(mask), 1.0, sample_id=sid)


def test_miou_identity_and_empty():
    g = [_m((5, 5), (0, 0)), _m((5, 5), (4, 4), (3, 4))]
    assert mean_iou_score({"a": g}, {"a": [_pred(m) for m in g]}).score == 1.0
    assert mean_iou_score({"a": g}, {}).score == 0.0
    assert mean_iou_score({"a": g}, {"a": []}).score == 0.0


def test_miou_two_instances():
    g1 = _m((4, 4), (0, 0))
    g2 = _m((4, 4), (3, 3), (3, 2))
    p = [_m((4, 4), (0, 0)), _m((4, 4), (3, 3))]
    res = mean_iou_score({"a": [g1, g2]}, {"a": p})
    assert res.score == 0.75
    assert res.per_instance["a"] == [1.0, 0.5]
    assert res.score == brute_force_miou({"a": [g1, g2]}, {"a": p})


def test_miou_id_mismatch():
    with pytest.raises(IdMismatchError):
        mean_iou_score({"a": [_m((2, 2), (0, 0))]}, {"b": []})


def test_miou_positional_sequences():
    g = _m((3, 3), (1, 1))
    assert mean_iou_score([[g]], [[g]]).score == 1.0


def random_scene(rng, max_side=32, max_inst=5):
    h, w = rng.integers(4, max_side + 1, 2)
    def inst():
        m = np.zeros((h, w), np.uint8)
        r0, c0 = rng.integers(0, h), rng.integers(0, w)
        m[r0 : r0 + rng.integers(1, 8), c0 : c0 + rng.integers(1, 8)] = 1
        m &= (rng.random((h, w)) > 0.2).astype(np.uint8)
        m[r0, c0] = 1
        return m
    gt = [inst() for _ in range(rng.integers(1, max_inst + 1))]
    pred = [inst() for _ in range(rng.integers(0, max_inst + 1))]
    return gt, pred


def test_miou_matches_brute_force_random(rng):
    for _ in range(50):
        gts, preds = {}, {}
        for k in range(rng.integers(1, 4)):
            gts[f"i{k}"], preds[f"i{k}"] = random_scene(rng)
        assert mean_iou_score(gts, preds).score == brute_force_miou(gts, preds)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_miou_permutation_and_spurious(seed):
    rng = np.random.default_rng(seed)
    gt, pred = random_scene(rng)
    base = mean_iou_score({"x": gt}, {"x": pred}).score
    assert mean_iou_score({"x": gt}, {"x": pred[::-1]}).score == base
    extra = random_scene(rng)[0][0]
    if extra.shape == gt[0].shape:
        assert mean_iou_score({"x": gt}, {"x": pred + [extra]}).score >= base


def test_matched_variant_one_to_one():
    g1 = _m((4, 4), (0, 0), (0, 1))
    g2 = _m((4, 4), (0, 0), (1, 0))
    p = [_m((4, 4), (0, 0), (0, 1), (1, 0))]
    best = mean_iou_score({"a": [g1, g2]}, {"a": p})
    matched = mean_iou_score({"a": [g1, g2]}, {"a": p}, variant="matched")
    assert best.score == pytest.approx(2 / 3)
    assert matched.score == pytest.approx(1 / 3)
    assert matched.score <= best.score


def test_matched_never_exceeds_best(rng):
    for _ in range(30):
        gt, pred = random_scene(rng)
        b = mean_iou_score({"x": gt}, {"x": pred}).score
        m = mean_iou_score({"x": gt}, {"x": pred}, variant="matched").score
        assert m <= b + 1e-12


def test_report_names_variant():
    g = _m((3, 3), (1, 1))
    text = format_report(mean_iou_score({"a": [g]}, {"a": [g]}, variant="matched"))
    assert "metric_variant\tmatched" in text and "mean_iou\t1.000000" in text


def test_unknown_variant():
    with pytest.raises(ValueError):
        mean_iou_score({}, {}, variant="panoptic")
