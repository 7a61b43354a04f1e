import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cgsplat.metrics import EvalReport, Query, boundary_iou, default_band, evaluate, iou
from cgsplat.rasterizer import rasterize
from cgsplat.scene import Camera, GaussianCloud, SegmentMask
from cgsplat.segmenter import object_mask, similarity_map


def test_iou_examples():
    a = np.array([[1, 1, 0]], bool)
    b = np.array([[0, 1, 1]], bool)
    assert iou(a, b) == pytest.approx(1 / 3)
    assert iou(a, a) == 1.0
    assert iou(a, ~a) == 0.0
    z = np.zeros((3, 3), bool)
    assert iou(z, z) == 1.0
    assert iou(z, ~z) == 0.0
    with pytest.raises(ValueError):
        iou(a, z)


def band_oracle(mask, d):
    H, W = mask.shape
    inside = lambda v, u: 0 <= v < H and 0 <= u < W and mask[v, u]
    boundary = [(v, u) for v in range(H) for u in range(W) if mask[v, u]
                and not all(inside(v + dv, u + du) for dv, du in ((1, 0), (-1, 0), (0, 1), (0, -1)))]
    band = np.zeros_like(mask)
    for v in range(H):
        for u in range(W):
            if mask[v, u] and any(max(abs(v - bv), abs(u - bu)) <= d for bv, bu in boundary):
                band[v, u] = True
    return band


def test_boundary_iou_shifted_square():
    a = np.zeros((12, 12), bool)
    a[3:9, 3:9] = True
    b = np.roll(a, 1, axis=1)
    ba, bb = band_oracle(a, 1), band_oracle(b, 1)
    expected = (ba & bb).sum() / (ba | bb).sum()
    assert boundary_iou(a, b, 1) == pytest.approx(expected)
    assert boundary_iou(a, a, 1) == 1.0


def test_boundary_iou_saturates_to_iou():
    rng = np.random.default_rng(0)
    a, b = rng.random((10, 14)) < 0.5, rng.random((10, 14)) < 0.5
    assert boundary_iou(a, b, 20) == pytest.approx(iou(a, b))
    with pytest.raises(ValueError):
        boundary_iou(a, b, 0)


def test_default_band():
    assert default_band((64, 64)) == 2
    assert default_band((10, 10)) == 1


@settings(max_examples=60, deadline=None)
@given(arrays(bool, (7, 9)), arrays(bool, (7, 9)), st.integers(1, 4))
def test_metrics_symmetric_and_bounded(a, b, d):
    assert iou(a, b) == iou(b, a)
    assert boundary_iou(a, b, d) == boundary_iou(b, a, d)
    assert 0.0 <= boundary_iou(a, b, d) <= 1.0
    # matches the brute-force band count
    ba, bb = band_oracle(a, d), band_oracle(b, d)
    union = (ba | bb).sum()
    assert boundary_iou(a, b, d) == pytest.approx(1.0 if union == 0 else (ba & bb).sum() / union)


def test_report_means():
    r = EvalReport(iou=[0.8, 0.6], biou=[0.5, 0.7], object_ids=[1, 2])
    assert r.miou == pytest.approx(0.7) and r.mbiou == pytest.approx(0.6)
    assert "0.7000" in r.to_table()
    assert r.to_records().count("\n") == 3


def two_blob_scene():
    cam = Camera(fx=30, fy=30, cx=16, cy=16, width=32, height=32)
    cloud = GaussianCloud.from_activated(
        np.array([[-1.5, 0, 4], [1.5, 0, 4]]), np.full((2, 3), 0.25), np.tile([1.0, 0, 0, 0], (2, 1)),
        np.array([0.95, 0.95]), np.zeros((2, 3)), np.array([[1.0, 0, 0], [0, 1.0, 0]]))
    return cloud, cam


def test_perfect_and_failed_queries():
    cloud, cam = two_blob_scene()
    fm = rasterize(cloud, cam).features
    gt = np.zeros(cam.shape, dtype=np.int64)
    gt[object_mask(similarity_map(fm, np.array([1.0, 0, 0])))] = 1
    gt[object_mask(similarity_map(fm, np.array([0, 1.0, 0])))] = 2
    queries = [Query(1, (SegmentMask(gt), 1), cam), Query(2, (SegmentMask(gt), 2), cam)]
    r = evaluate(cloud, [cam, cam], [SegmentMask(gt)] * 2, queries)
    assert r.miou == 1.0 and r.mbiou == 1.0 and not r.failed
    assert len(r.render_ms) == 2

    # the corner pixel renders nothing: the query fails and scores 0
    bad = evaluate(cloud, [cam], [SegmentMask(gt)], [Query(1, (16, 0), cam), queries[1]])
    assert bad.failed == [0] and bad.iou == [0.0, 1.0] and bad.miou == 0.5


def test_empty_predictions_score_zero():
    cloud, cam = two_blob_scene()
    gt = np.zeros(cam.shape, dtype=np.int64)
    gt[:5, :5] = 3  # an object the features never cover
    r = evaluate(cloud, [cam], [SegmentMask(gt)], [Query(3, (8, 16), cam)], t=1.1)
    assert r.miou == 0.0


def test_query_order_independent(trained_two_object, two_object_dataset):
    ds = two_object_dataset
    cams = [v.camera for v in ds.test]
    gts = [v.gt_mask for v in ds.test]
    qs = [Query(k, (ds.test[j].gt_mask, k), ds.test[j].camera) for j in (0, 1) for k in (1, 2)]
    a = evaluate(trained_two_object.cloud, cams, gts, qs)
    b = evaluate(trained_two_object.cloud, cams, gts, qs[::-1])
    assert a.iou == b.iou[::-1] and a.biou == b.biou[::-1]
    assert a.miou == pytest.approx(b.miou)
