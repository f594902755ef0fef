import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oslr.metrics import (
    DetectionBox,
    average_precision,
    bbox_from_mask,
    binarize,
    connected_components,
    detect,
    evaluate,
    global_box,
    iou,
    kshot_union,
    pix_iou,
    score_detection,
)

from .oracles import flood_fill_labels, raster_iou, scan_box, sweep_ap

boxes = st.builds(
    lambda x, y, w, h: DetectionBox(x, y, x + w, y + h),
    st.integers(0, 20),
    st.integers(0, 20),
    st.integers(0, 8),
    st.integers(0, 8),
)


def test_binarize_is_strict():
    assert not binarize(np.full((3, 3), 0.4)).any()
    assert not binarize(np.array([0.5]))[0]
    assert binarize(np.array([0.5000001]))[0]


def test_components_empty_and_blocks():
    assert connected_components(np.zeros((5, 5), bool)) == []
    mask = np.zeros((6, 6), bool)
    mask[0:2, 0:2] = mask[3:5, 3:5] = True
    comps = connected_components(mask)
    assert [len(c) for c in comps] == [4, 4]
    assert tuple(comps[0][0]) == (0, 0) and tuple(comps[1][0]) == (3, 3)


def test_diagonal_neighbours_are_separate():
    assert len(connected_components(np.eye(4, dtype=bool))) == 4


def test_components_match_flood_fill():
    rng = np.random.default_rng(0)
    for _ in range(50):
        mask = rng.random((32, 32)) < rng.uniform(0.2, 0.6)
        ours = [{tuple(p) for p in c} for c in connected_components(mask)]
        assert ours == flood_fill_labels(mask)


def test_bbox_example():
    mask = np.zeros((10, 10), bool)
    mask[2:6, 3:8] = True
    (comp,) = connected_components(mask)
    box = bbox_from_mask(comp)
    assert box.coords() == (3, 2, 7, 5)
    assert (box.width, box.height) == (5, 4)
    assert box.coords() == scan_box({tuple(p) for p in comp})


def test_bbox_single_pixel():
    assert bbox_from_mask(np.array([[4, 9]])).coords() == (9, 4, 9, 4)


def test_bbox_contains_component():
    rng = np.random.default_rng(1)
    for comp in connected_components(rng.random((20, 20)) < 0.5):
        b = bbox_from_mask(comp)
        assert np.all((comp[:, 1] >= b.x_min) & (comp[:, 1] <= b.x_max))
        assert np.all((comp[:, 0] >= b.y_min) & (comp[:, 0] <= b.y_max))


def test_bbox_rejects_empty():
    with pytest.raises(ValueError):
        bbox_from_mask(np.zeros((0, 2), int))


def test_iou_examples():
    a = DetectionBox(0, 0, 9, 9)
    assert iou(a, a) == 1.0
    assert iou(a, DetectionBox(5, 5, 14, 14)) == pytest.approx(25 / 175, abs=1e-12)
    assert iou(a, DetectionBox(10, 0, 12, 3)) == 0.0


@given(boxes, boxes)
@settings(max_examples=200)
def test_iou_properties(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0
    assert (v == 1.0) == (a.coords() == b.coords())
    assert v == pytest.approx(raster_iou(a.coords(), b.coords(), size=30), abs=1e-12)


def test_pix_iou_examples():
    m = np.zeros((4, 4), bool)
    m[1:3, 1:3] = True
    assert pix_iou(m, m) == 1.0
    assert pix_iou(m, ~m) == 0.0
    checker = (np.indices((4, 4)).sum(axis=0) % 2).astype(bool)
    assert pix_iou(checker, np.ones((4, 4), bool)) == 0.5
    assert pix_iou(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
    with pytest.raises(ValueError):
        pix_iou(m, m[:3])


def test_score_detection():
    prob = np.full((3, 3), 0.9)
    comp = np.array([[0, 0], [0, 1]])
    assert score_detection(prob, comp) == pytest.approx(0.9)
    prob[0, 1] = 0.6
    prob[0, 0] = 0.8
    assert score_detection(prob, comp) == pytest.approx(0.7)
    with pytest.raises(ValueError):
        score_detection(prob, np.zeros((0, 2), int))


@given(st.lists(st.floats(0.51, 1.0), min_size=1, max_size=9), st.data())
def test_score_monotone_in_member_pixels(values, data):
    prob = np.array(values)[None, :]
    comp = np.stack([np.zeros(len(values), int), np.arange(len(values))], axis=1)
    before = score_detection(prob, comp)
    i = data.draw(st.integers(0, len(values) - 1))
    prob[0, i] = data.draw(st.floats(prob[0, i], 1.0))
    assert score_detection(prob, comp) >= before


def test_detect_scores_and_global_mode():
    prob = np.zeros((8, 8))
    prob[0:2, 0:2] = 0.9
    prob[5:7, 4:8] = 0.7
    dets = detect(prob, image_id=3)
    assert [d.coords() for d in dets] == [(0, 0, 1, 1), (4, 5, 7, 6)]
    assert [d.score for d in dets] == pytest.approx([0.9, 0.7])
    assert all(d.image_id == 3 for d in dets)
    (single,) = detect(prob, use_global_box=True)
    assert single.coords() == (0, 0, 7, 6) and single.score == pytest.approx(0.7 + 0.2 / 3)
    assert detect(np.zeros((4, 4))) == []


def test_global_box():
    assert global_box(np.zeros((3, 3))) is None
    m = np.zeros((6, 6))
    m[1, 4] = m[3, 0] = 1
    assert global_box(m).coords() == (0, 1, 4, 3)


def det(box, score, image=0):
    return DetectionBox(*box, score=score, image_id=image)


def test_ap_perfect_and_empty():
    gts = [DetectionBox(0, 0, 4, 4, image_id=0), DetectionBox(2, 2, 6, 6, image_id=1)]
    assert average_precision([det((0, 0, 4, 4), 0.9, 0), det((2, 2, 6, 6), 0.8, 1)], gts) == 1.0
    assert average_precision([], gts) == 0.0
    assert average_precision([det((0, 0, 1, 1), 0.9)], []) == 0.0
    assert average_precision([], []) is None


def test_ap_worked_example():
    gts = [DetectionBox(0, 0, 4, 4, image_id=0), DetectionBox(0, 0, 4, 4, image_id=1)]
    dets = [det((0, 0, 4, 4), 0.9, 0), det((10, 10, 12, 12), 0.8, 0), det((0, 0, 4, 4), 0.7, 1)]
    ap = average_precision(dets, gts)
    assert ap == pytest.approx(0.5 + 0.5 * 2 / 3, abs=1e-12)
    oracle = sweep_ap([(d.score, d.image_id, d.coords()) for d in dets], [(g.image_id, g.coords()) for g in gts], 0.5)
    assert ap == pytest.approx(oracle, abs=1e-12)


def test_ap_iou_threshold_is_strict():
    gt = [DetectionBox(0, 0, 3, 3)]
    half = det((0, 0, 1, 3), 0.9)  # 8 of 16 pixels, IoU exactly 0.5
    assert iou(half, gt[0]) == 0.5
    assert average_precision([half], gt) == 0.0


def test_ap_requires_scores():
    with pytest.raises(ValueError):
        average_precision([DetectionBox(0, 0, 1, 1)], [DetectionBox(0, 0, 1, 1)])


@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 6), st.integers(0, 6)), min_size=1, max_size=10), st.integers(0, 2**31))
@settings(max_examples=60, deadline=None)
def test_ap_matches_sweep_and_ignores_monotone_rescaling(spec, seed):
    rng = np.random.default_rng(seed)
    gts = [(img, (x, y, x + 3, y + 3)) for img, x, y in spec[: max(1, len(spec) // 2)]]
    scores = rng.permutation(len(spec)) / len(spec) + 0.01
    dets = [(float(s), img, (x + 1, y, x + 4, y + 3)) for s, (img, x, y) in zip(scores, spec)]
    ours = average_precision(
        [det(b, s, i) for s, i, b in dets], [DetectionBox(*b, image_id=i) for i, b in gts]
    )
    assert ours == pytest.approx(sweep_ap(dets, gts, 0.5), abs=1e-9)
    squashed = [det(b, s**3 / 7, i) for s, i, b in dets]
    assert average_precision(squashed, [DetectionBox(*b, image_id=i) for i, b in gts]) == ours


def test_kshot_union():
    rng = np.random.default_rng(2)
    a, b, c = (rng.random((6, 6)) > 0.6 for _ in range(3))
    np.testing.assert_array_equal(kshot_union([a]), a)
    u = kshot_union([a, b, c])
    assert all(np.all(u >= m) for m in (a, b, c))
    np.testing.assert_array_equal(kshot_union([kshot_union([a, b]), c]), u)
    with pytest.raises(ValueError):
        kshot_union([])
    with pytest.raises(ValueError):
        kshot_union([a, a[:5]])


# -- aggregate report ------------------------------------------------------------


def block(rows, cols, value=1.0, size=8):
    m = np.zeros((size, size))
    m[rows[0] : rows[1] + 1, cols[0] : cols[1] + 1] = value
    return m


def hand_fixture():
    """Two classes, three 8x8 images each; expected values worked out by hand."""
    gts = [
        block((1, 3), (1, 3)),
        block((4, 5), (4, 5)),
        block((0, 1), (0, 1)),
        block((2, 5), (2, 5)),
        block((0, 3), (0, 3)),
        block((4, 7), (4, 7)),
    ]
    probs = [
        block((1, 3), (1, 3), 0.9),  # exact: TP
        block((4, 5), (4, 6), 0.8),  # box IoU 4/6: TP
        block((6, 7), (6, 7), 0.7),  # elsewhere: FP
        np.full((8, 8), 0.1),  # nothing
        block((0, 3), (0, 3), 0.95) + block((7, 7), (7, 7), 0.6),  # TP plus a stray FP pixel
        block((4, 7), (4, 5), 0.75),  # box IoU exactly 0.5: FP
    ]
    return probs, gts, [0, 0, 0, 1, 1, 1]


def test_evaluate_hand_fixture():
    report = evaluate(*hand_fixture())
    # class 0 ranks TP, TP, FP over 3 GTs; class 1 ranks TP, FP, FP
    assert report.per_class[0].ap == pytest.approx(2 / 3)
    assert report.per_class[1].ap == pytest.approx(1 / 3)
    assert report.mAP == pytest.approx(0.5)
    pix = [1, 4 / 6, 0, 0, 16 / 17, 0.5]
    assert report.mPixIoU == pytest.approx(np.mean(pix))
    assert report.per_class[1].pix_iou == pytest.approx(np.mean(pix[3:]))
    assert report.mIoU == pytest.approx((1 + 4 / 6 + 0 + 0 + 1 + 0.5) / 6)
    assert (report.tp, report.fp, report.fn) == (3, 3, 3)
    assert report.pixel_recall == pytest.approx(37 / 65)
    assert (report.per_class[1].n_gt, report.per_class[1].n_det) == (3, 3)


def test_evaluate_perfect_and_empty():
    _, gts, ids = hand_fixture()
    perfect = evaluate([g * 0.99 for g in gts], gts, ids)
    assert perfect.mAP == perfect.mPixIoU == perfect.mIoU == 1.0
    empty = evaluate([np.zeros((8, 8))] * 6, gts, ids)
    assert empty.mAP == 0.0 and empty.mPixIoU == 0.0 and empty.mIoU == 0.0


def test_evaluate_unknown_class():
    probs, gts, ids = hand_fixture()
    with pytest.raises(ValueError):
        evaluate(probs, gts, ids, known_classes=[0])


def test_report_text_and_csv():
    report = evaluate(*hand_fixture())
    text = report.to_text()
    assert "mAP@0.5     0.500000" in text
    csv_lines = report.to_csv().splitlines()
    assert csv_lines[0] == "class_id,ap,pix_iou,n_gt,n_det"
    assert csv_lines[1].startswith("0,0.666667,")
    assert len(csv_lines) == 3
