import math

import numpy as np
import pytest
from vltrack import (
    BoundingBox,
    DegenerateGroundTruth,
    InvalidGeometry,
    center_distance,
    iou,
    normalized_center_distance,
)
from vltrack._geometry import (
    boxes_to_array,
    center_distance_array,
    iou_array,
    normalized_center_distance_array,
)

GRID = 128


def rasterize(box):
    mask = np.zeros((GRID, GRID), dtype=bool)
    mask[int(box.y) : int(box.y + box.h), int(box.x) : int(box.x + box.w)] = True
    return mask


def random_box(rng):
    x, y = rng.integers(0, 64, size=2)
    w, h = rng.integers(0, 65, size=2)
    return BoundingBox(int(x), int(y), int(w), int(h))


def test_box_validation():
    box = BoundingBox(1, 2, 3, 4)
    assert box.as_tuple() == (1.0, 2.0, 3.0, 4.0)
    assert isinstance(box.x, float)

    with pytest.raises(InvalidGeometry, match="extents must be non-negative"):
        BoundingBox(0, 0, -1, 1)
    with pytest.raises(InvalidGeometry, match="`y` must be finite"):
        BoundingBox(0, math.nan, 1, 1)
    with pytest.raises(InvalidGeometry, match="`x` must be a real number"):
        BoundingBox(True, 0, 1, 1)
    with pytest.raises(InvalidGeometry, match="exactly 4 values"):
        BoundingBox.from_sequence([1, 2, 3])


def test_box_accepts_numpy_scalars():
    box = BoundingBox(np.int64(1), np.float32(2.5), np.int32(3), 4)
    assert box.as_tuple() == (1.0, 2.5, 3.0, 4.0)


def test_zero_area_box_is_legal():
    box = BoundingBox(0, 0, 0, 0)
    assert box.area == 0
    assert not box.has_area()


@pytest.mark.parametrize(
    ("a", "b", "expected"),
    [
        # identical boxes
        (BoundingBox(0, 0, 10, 10), BoundingBox(0, 0, 10, 10), 1.0),
        # half-width shift: intersection 50, union 150
        (BoundingBox(0, 0, 10, 10), BoundingBox(5, 0, 10, 10), 1 / 3),
        # touching edges do not overlap
        (BoundingBox(0, 0, 10, 10), BoundingBox(10, 0, 10, 10), 0.0),
        # disjoint
        (BoundingBox(0, 0, 10, 10), BoundingBox(30, 0, 10, 10), 0.0),
        # containment
        (BoundingBox(0, 0, 10, 10), BoundingBox(0, 0, 5, 10), 0.5),
        # both degenerate
        (BoundingBox(3, 3, 0, 0), BoundingBox(3, 3, 0, 0), 0.0),
    ],
)
def test_iou_examples(a, b, expected):
    assert iou(a, b) == pytest.approx(expected, abs=1e-12)


def test_iou_matches_rasterization():
    rng = np.random.default_rng(123)
    for _ in range(10_000):
        a, b = random_box(rng), random_box(rng)
        mask_a, mask_b = rasterize(a), rasterize(b)
        union = np.count_nonzero(mask_a | mask_b)
        expected = np.count_nonzero(mask_a & mask_b) / union if union else 0.0

        value = iou(a, b)
        assert abs(value - expected) < 1e-9
        assert value == iou(b, a)

        dx, dy = rng.integers(-20, 21, size=2)
        shifted = iou(a.shifted(int(dx), int(dy)), b.shifted(int(dx), int(dy)))
        assert abs(shifted - value) < 1e-9


def test_center_distance():
    a = BoundingBox(0, 0, 10, 10)
    assert center_distance(a, BoundingBox(3, 4, 10, 10)) == 5.0
    assert center_distance(a, a) == 0.0


def test_normalized_center_distance():
    gt = BoundingBox(0, 0, 10, 20)
    pred = BoundingBox(5, 10, 10, 20)
    # offsets (5, 10) divided by (10, 20)
    assert normalized_center_distance(pred, gt) == pytest.approx(math.hypot(0.5, 0.5))

    with pytest.raises(DegenerateGroundTruth):
        normalized_center_distance(pred, BoundingBox(0, 0, 0, 10))


def test_array_versions_match_scalar_versions():
    rng = np.random.default_rng(7)
    preds = [random_box(rng) for _ in range(500)]
    gts = [
        BoundingBox(*rng.integers(0, 64, size=2).tolist(), *rng.integers(1, 65, size=2).tolist())
        for _ in range(500)
    ]
    pred_array, gt_array = boxes_to_array(preds), boxes_to_array(gts)

    assert pred_array.shape == (500, 4)
    np.testing.assert_allclose(
        iou_array(pred_array, gt_array),
        [iou(p, g) for p, g in zip(preds, gts, strict=True)],
        atol=1e-12,
    )
    np.testing.assert_allclose(
        center_distance_array(pred_array, gt_array),
        [center_distance(p, g) for p, g in zip(preds, gts, strict=True)],
        atol=1e-12,
    )
    np.testing.assert_allclose(
        normalized_center_distance_array(pred_array, gt_array),
        [normalized_center_distance(p, g) for p, g in zip(preds, gts, strict=True)],
        atol=1e-12,
    )


def test_empty_box_list():
    assert boxes_to_array([]).shape == (0, 4)
