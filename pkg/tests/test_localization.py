import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adllab.localization import (
    BBox,
    Heatmap,
    MetricsReport,
    bilinear_resize,
    cam_heatmap,
    evaluate,
    extract_bbox,
    iou,
    normalize_and_upsample,
)
from adllab.model import BlockSpec, ModelConfig, Network


@st.composite
def boxes(draw, size=20):
    x0 = draw(st.integers(0, size - 1))
    y0 = draw(st.integers(0, size - 1))
    return BBox(x0, y0, draw(st.integers(x0 + 1, size)), draw(st.integers(y0 + 1, size)))


# -- CAM ------------------------------------------------------------------------

def test_cam_examples():
    f = np.random.default_rng(0).random((3, 4, 1))
    np.testing.assert_array_equal(cam_heatmap(f, np.array([1.0])).values, f[:, :, 0])
    assert not cam_heatmap(f, np.zeros(1)).values.any()
    pix = np.array([3.0, 4.0]).reshape(1, 1, 2)
    assert cam_heatmap(pix, np.array([2.0, -1.0])).values[0, 0] == 2.0


def test_cam_length_mismatch():
    with pytest.raises(ValueError):
        cam_heatmap(np.zeros((2, 2, 3)), np.zeros(2))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_cam_linear_in_weights(seed):
    r = np.random.default_rng(seed)
    f, w1, w2 = r.normal(size=(4, 5, 6)), r.normal(size=6), r.normal(size=6)
    np.testing.assert_allclose(cam_heatmap(f, w1 + w2).values, cam_heatmap(f, w1).values + cam_heatmap(f, w2).values,
                               atol=1e-12)


# -- normalize / upsample ---------------------------------------------------------

def test_normalize_only_at_target_size():
    h = normalize_and_upsample(Heatmap(np.array([[0.0, 2.0], [4.0, 1.0]])), (2, 2))
    np.testing.assert_array_equal(h.values, [[0, 0.5], [1, 0.25]])
    assert h.normalized


def test_constant_map_becomes_zero():
    assert not normalize_and_upsample(Heatmap(np.full((2, 2), 7.0)), (4, 4)).values.any()


def test_bilinear_half_pixel_checkerboard():
    # output centers at 0.25 / 0.75 of the way between the two input centers
    up = normalize_and_upsample(Heatmap(np.array([[0.0, 1.0], [1.0, 0.0]])), (4, 4)).values
    np.testing.assert_allclose(up[1:3, 1:3], [[0.375, 0.625], [0.625, 0.375]], rtol=0, atol=1e-15)
    np.testing.assert_array_equal(up[0, :2], [0.0, 0.25])  # clamped edge
    np.testing.assert_allclose(up, up[::-1, ::-1])


def test_bilinear_preserves_linear_ramps():
    ramp = np.add.outer(np.arange(4.0), 2 * np.arange(4.0))
    up = bilinear_resize(ramp, (8, 8))
    # interior samples of a linear function are exact
    inner = up[1:-1, 1:-1]
    ys = (np.arange(1, 7) + 0.5) / 2 - 0.5
    np.testing.assert_allclose(inner, np.add.outer(ys, 2 * ys), atol=1e-12)


def test_upsample_target_smaller_is_error():
    with pytest.raises(ValueError):
        normalize_and_upsample(Heatmap(np.zeros((4, 4))), (2, 2))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 3), elements=st.floats(-10, 10, width=64)))
def test_normalized_range(values):
    out = normalize_and_upsample(Heatmap(values), (9, 9)).values
    assert out.min() >= 0.0 and out.max() <= 1.0
    if np.ptp(values) > 0:
        assert out.max() == 1.0


# -- bbox extraction ----------------------------------------------------------------

def test_single_square_tight_box():
    h = np.zeros((10, 10))
    h[2:5, 6:9] = 1.0
    box, degenerate = extract_bbox(Heatmap(h), 0.2)
    assert box.as_tuple() == (6, 2, 9, 5) and not degenerate


def test_largest_component_wins():
    h = np.zeros((10, 10))
    h[0, 0:5] = 1.0          # area 5
    h[5:8, 5:8] = 0.5        # area 9
    box, _ = extract_bbox(Heatmap(h), 0.2)
    assert box.as_tuple() == (5, 5, 8, 8)


def test_equal_areas_first_in_raster_order():
    h = np.zeros((6, 6))
    h[4:6, 0:2] = 1.0
    h[0:2, 4:6] = 1.0
    assert extract_bbox(Heatmap(h), 0.5)[0].as_tuple() == (4, 0, 6, 2)


def test_all_zero_map_is_degenerate_full_box():
    box, degenerate = extract_bbox(Heatmap(np.zeros((5, 7))), 0.2)
    assert degenerate and box.as_tuple() == (0, 0, 7, 5)


def test_threshold_is_inclusive():
    h = np.zeros((1, 5))
    h[0, 1] = 0.2
    h[0, 2] = 1.0
    assert extract_bbox(Heatmap(h), 0.2)[0].as_tuple() == (1, 0, 3, 1)


@pytest.mark.parametrize("theta", [0.0, 1.0, -0.5])
def test_theta_out_of_range(theta):
    with pytest.raises(ValueError):
        extract_bbox(Heatmap(np.ones((2, 2))), theta)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 4), elements=st.floats(-5, 5, width=64)), st.floats(0.01, 1000))
def test_box_invariant_under_positive_scaling(values, scale):
    a = extract_bbox(normalize_and_upsample(Heatmap(values), (16, 16)), 0.2)
    b = extract_bbox(normalize_and_upsample(Heatmap(values * scale), (16, 16)), 0.2)
    assert a == b


# -- IoU -------------------------------------------------------------------------------

def test_iou_examples():
    a = BBox(0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(a, BBox(10, 10, 12, 12)) == 0.0
    assert iou(a, BBox(5, 0, 15, 10)) == 1 / 3


def test_bbox_validation():
    with pytest.raises(ValueError):
        BBox(3, 0, 3, 5)


@settings(max_examples=200, deadline=None)
@given(boxes(), boxes())
def test_iou_properties(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0
    assert (v == 1.0) == (a == b)


# -- evaluate ------------------------------------------------------------------------------

def _probe_net(bias=(0.0, 0.0)):
    """Two-channel identity network: channel c lights up for class c."""
    cfg = ModelConfig([BlockSpec("id", 2, 1, "none")], 2, in_channels=2, input_shift=0.0)
    params = {
        "id.w": np.eye(2).reshape(1, 1, 2, 2),
        "id.b": np.zeros(2),
        "fc.w": np.eye(2),
        "fc.b": np.array(bias, dtype=float),
    }
    return Network(cfg, params)


def _probe_data():
    images, labels, gt = [], [], []
    for i in range(6):
        c = i % 2
        img = np.zeros((12, 12, 2))
        x0, y0 = i, 2
        img[y0:y0 + 5, x0:x0 + 4, c] = 1.0
        images.append(img)
        labels.append(c)
        gt.append(BBox(x0, y0, x0 + 4, y0 + 5))
    return np.stack(images), np.array(labels), gt


def test_perfect_classifier_and_boxes():
    x, y, gt = _probe_data()
    rep = evaluate(_probe_net(), x, y, gt)
    assert (rep.top1_clas, rep.gt_known_loc, rep.top1_loc) == (1.0, 1.0, 1.0)


def test_wrong_class_right_box_splits_metrics():
    x, y, gt = _probe_data()
    keep = y == 0
    rep = evaluate(_probe_net(bias=(0.0, 100.0)), x[keep], y[keep], [g for g, k in zip(gt, keep) if k])
    assert rep.top1_clas == 0.0 and rep.gt_known_loc == 1.0 and rep.top1_loc == 0.0


def test_missing_ground_truth_names_sample():
    x, y, gt = _probe_data()
    gt[3] = None
    with pytest.raises(ValueError, match="sample 3"):
        evaluate(_probe_net(), x, y, gt)


def test_threaded_evaluation_matches(monkeypatch):
    x, y, gt = _probe_data()
    serial = evaluate(_probe_net(), x, y, gt).records_tsv()
    monkeypatch.setenv("ADLLAB_THREADS", "3")
    assert evaluate(_probe_net(), x, y, gt).records_tsv() == serial


def test_report_text_format():
    x, y, gt = _probe_data()
    text = evaluate(_probe_net(), x, y, gt).as_text()
    keys = [line.split(":")[0] for line in text.splitlines()]
    assert keys == ["n", "top1_loc", "top1_clas", "gt_known_loc", "mean_iou"]


def test_published_row_obeys_inequality():
    # drop 75 / importance 25 row
    top1_loc, top1_clas, gt_known = 49.69, 62.25, 74.78
    assert top1_loc <= min(top1_clas, gt_known)


def test_empty_report():
    rep = MetricsReport()
    assert rep.n == 0 and rep.top1_loc == 0.0
