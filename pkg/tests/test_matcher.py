# tests/test_matcher.py
import math

import numpy as np
import pytest

from markerforge.benchmark import pck
from markerforge.errors import ConfigError, DataError
from markerforge.flow_io import write_failed_record, write_flo
from markerforge.flyingmarkers import SamplerConfig, sample_affine, synthesize_sample
from markerforge.geometry import GeometricTransform, Homography, Point2
from markerforge.imaging import FlowField, Image, pixel_grid
from markerforge.matcher import (FAILED_INSUFFICIENT_INLIERS, FAILED_INSUFFICIENT_MATCHES, EstimatorContext,
                                 Keypoint, Match, MatchOutcome, MatchSet, dense_match, detect_corners,
                                 get_estimator, match_descriptors, ransac_homography)

H_TRUE = [[1.1, 0.05, 20.0], [-0.04, 0.95, 12.0], [2e-4, -1e-4, 1.0]]
# 易仿射样本（旋转 ≤ 10°，缩放 0.9-1.1）上稠密匹配的 PCK-3 下限
DENSE_EASY_AFFINE_PCK3 = 0.8


def checkerboard(size=64, cell=8):
    ys, xs = np.mgrid[0:size, 0:size]
    return Image(((xs // cell + ys // cell) % 2).astype(np.float64))


def paste(marker, background, x, y):
    data = background.data.copy()
    data[y:y + marker.height, x:x + marker.width] = marker.data
    return Image(data)


def point_matches(src, dst):
    """由已知对应点构造匹配集（描述子距离记为0）"""
    return MatchSet([Match(Keypoint(Point2(float(a[0]), float(a[1])), 0.0),
                           Keypoint(Point2(float(b[0]), float(b[1])), 0.0), 0.0)
                     for a, b in zip(np.asarray(src), np.asarray(dst))])


def exact_matches(n=30, seed=0):
    rng = np.random.default_rng(seed)
    src = rng.uniform([0, 0], [63, 47], size=(n, 2))
    dst = Homography.from_matrix(H_TRUE).map_points(src)
    return src, dst


def test_uniform_image_has_no_corners():
    assert detect_corners(Image(np.full((40, 40, 3), 0.5))) == []


def test_checkerboard_corners_at_junctions():
    corners = detect_corners(checkerboard())
    assert len(corners) >= 9
    for kp in corners:
        jx = 7.5 + 8 * round((kp.location.x - 7.5) / 8)
        jy = 7.5 + 8 * round((kp.location.y - 7.5) / 8)
        assert abs(kp.location.x - jx) <= 1.0
        assert abs(kp.location.y - jy) <= 1.0
    responses = [kp.response for kp in corners]
    assert responses == sorted(responses, reverse=True)


def test_max_count_respected(texture):
    assert len(detect_corners(texture(0, 96, 72), max_count=5)) <= 5


def test_self_match_has_zero_distance(texture):
    img = texture(1, 96, 72)
    corners = detect_corners(img)
    matches = match_descriptors(img, corners, img, corners)
    assert len(matches) > 0
    for m in matches.matches:
        assert m.distance == pytest.approx(0.0, abs=1e-9)
        assert m.marker.location == m.reference.location


def test_match_set_rejects_duplicate_marker_points():
    src = np.array([[1.0, 1.0], [1.0, 1.0]])
    with pytest.raises(DataError):
        point_matches(src, src)


def test_ransac_recovers_exact_homography():
    src, dst = exact_matches()
    outcome = ransac_homography(point_matches(src, dst), 200, 1.0, (64, 48), (200, 150), seed=0)
    assert not outcome.failed
    assert outcome.inliers == 30
    expected = Homography.from_matrix(H_TRUE).map_points(pixel_grid(64, 48).reshape(-1, 2))
    np.testing.assert_allclose(outcome.flow.target.reshape(-1, 2), expected, atol=1e-6)


def test_ransac_ignores_outliers():
    src, dst = exact_matches()
    rng = np.random.default_rng(5)
    bad_src = rng.uniform([0, 0], [63, 47], size=(10, 2))
    bad_dst = rng.uniform([0, 0], [199, 149], size=(10, 2))
    matches = point_matches(np.vstack([src, bad_src]), np.vstack([dst, bad_dst]))
    outcome = ransac_homography(matches, 500, 1.0, (64, 48), (200, 150), seed=1)
    assert not outcome.failed
    assert outcome.inliers >= 30
    assert np.allclose(outcome.homography.matrix, Homography.from_matrix(H_TRUE).matrix, atol=1e-6)


def test_ransac_with_sixty_percent_outliers():
    h_true = Homography.from_matrix(H_TRUE)
    expected = h_true.map_points(pixel_grid(64, 48).reshape(-1, 2))
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        src = rng.uniform([0, 0], [63, 47], size=(200, 2))
        dst = h_true.map_points(src) + rng.normal(scale=0.5, size=(200, 2))
        bad_src = rng.uniform([0, 0], [63, 47], size=(300, 2))
        bad_dst = rng.uniform([0, 0], [199, 149], size=(300, 2))
        matches = point_matches(np.vstack([src, bad_src]), np.vstack([dst, bad_dst]))
        outcome = ransac_homography(matches, 2000, 3.0, (64, 48), (200, 150), seed=seed)
        assert not outcome.failed
        error = np.linalg.norm(outcome.flow.target.reshape(-1, 2) - expected, axis=1)
        assert np.mean(error < 0.5) >= 0.95

def test_ransac_is_deterministic():
    src, dst = exact_matches()
    dst = dst + np.random.default_rng(9).normal(scale=0.5, size=dst.shape)
    matches = point_matches(src, dst)
    a = ransac_homography(matches, 100, 2.0, (64, 48), (200, 150), seed=3)
    b = ransac_homography(matches, 100, 2.0, (64, 48), (200, 150), seed=3)
    np.testing.assert_array_equal(a.flow.target, b.flow.target)


def test_ransac_needs_four_matches():
    src, dst = exact_matches(3)
    outcome = ransac_homography(point_matches(src, dst), 100, 1.0, (64, 48), (200, 150))
    assert outcome.failed
    assert outcome.reason == FAILED_INSUFFICIENT_MATCHES


def test_ransac_collinear_matches_fail():
    src = np.column_stack([np.arange(10.0), np.zeros(10)])
    outcome = ransac_homography(point_matches(src, src + 3.0), 50, 1.0, (64, 48), (200, 150))
    assert outcome.failed
    assert outcome.reason == FAILED_INSUFFICIENT_INLIERS


def test_homography_estimator_on_translation(texture):
    marker = texture(2, 64, 48)
    reference = paste(marker, Image(np.zeros((120, 160, 3))), 40, 30)
    outcome = get_estimator('homography')(marker, reference, EstimatorContext(sample_id='t'))
    assert not outcome.failed
    expected = pixel_grid(64, 48) + np.array([40.0, 30.0])
    assert np.max(np.abs(outcome.flow.target - expected)) < 0.5


def test_homography_estimator_fails_on_flat_images():
    flat = Image(np.full((48, 64, 3), 0.3))
    outcome = get_estimator('homography')(flat, Image(np.full((120, 160, 3), 0.3)), EstimatorContext())
    assert outcome.failed
    assert outcome.reason == FAILED_INSUFFICIENT_MATCHES


@pytest.mark.slow
def test_dense_self_match(texture):
    img = texture(3, 48, 40)
    flow = dense_match(img, img)
    assert flow.valid.all()
    error = np.abs(flow.target - pixel_grid(48, 40))
    assert np.mean(np.all(error <= 0.5 + 1e-9, axis=2)) > 0.95


@pytest.mark.slow
def test_dense_translation(texture):
    marker = texture(4, 40, 32)
    reference = paste(marker, texture(5, 80, 64), 12, 8)
    flow = dense_match(marker, reference)
    error = np.abs(flow.target - (pixel_grid(40, 32) + np.array([12.0, 8.0])))
    good = np.all(error <= 0.5 + 1e-9, axis=2) & flow.valid
    assert good.mean() > 0.9
    # 截断窗口：边缘一圈像素同样定位正确
    ring = np.ones((32, 40), dtype=bool)
    ring[5:-5, 5:-5] = False
    assert good[ring].mean() > 0.9


@pytest.mark.slow
def test_dense_on_easy_affine_samples(texture):
    config = SamplerConfig(rotation_range=(-math.pi / 18, math.pi / 18), shear_range=(0.0, 0.0),
                           scale_range=(0.9, 1.1), canvas_size=(160, 120))
    scores = []
    for i in range(50):
        rng = np.random.default_rng(200 + i)
        t = GeometricTransform(sample_affine(rng, config, (48, 36)), (48, 36), (160, 120))
        sample = synthesize_sample(texture(300 + i, 48, 36), texture(400 + i, 160, 120), t)
        flow = dense_match(sample.marker, sample.reference)
        scores.append(pck(flow, sample.flow, 3.0))
    assert np.mean(scores) >= DENSE_EASY_AFFINE_PCK3


def test_match_outcome_requires_one_of_flow_or_reason():
    with pytest.raises(DataError):
        MatchOutcome()
    with pytest.raises(DataError):
        MatchOutcome(flow=FlowField.identity(4, 4), reason='x')


def test_unknown_estimator():
    with pytest.raises(ConfigError):
        get_estimator('sift')


def test_gt_and_identity_estimators(texture):
    marker = texture(6, 10, 8)
    ref = texture(7, 20, 16)
    assert get_estimator('gt')(marker, ref, EstimatorContext()).reason == 'no ground truth'
    gt = FlowField.identity(10, 8)
    assert get_estimator('gt')(marker, ref, EstimatorContext(gt_flow=gt)).flow is gt
    flow = get_estimator('identity')(marker, ref, EstimatorContext()).flow
    np.testing.assert_array_equal(flow.target, pixel_grid(10, 8))


def test_flow_dir_estimator(tmp_path, texture):
    marker = texture(8, 10, 8)
    ref = texture(9, 20, 16)
    estimator = get_estimator('flow-dir')
    write_flo(str(tmp_path / 'a.flo'), FlowField.identity(10, 8))
    write_failed_record(str(tmp_path / 'b.flo'), 'no convergence')

    ok = estimator(marker, ref, EstimatorContext(sample_id='a', flow_dir=str(tmp_path)))
    assert ok.flow.size == (10, 8)
    failed = estimator(marker, ref, EstimatorContext(sample_id='b', flow_dir=str(tmp_path)))
    assert failed.reason == 'no convergence'
    with pytest.raises(DataError):
        estimator(marker, ref, EstimatorContext(sample_id='c', flow_dir=str(tmp_path)))
    with pytest.raises(ConfigError):
        estimator(marker, ref, EstimatorContext(sample_id='a'))
    with pytest.raises(DataError):
        estimator(texture(8, 12, 8), ref, EstimatorContext(sample_id='a', flow_dir=str(tmp_path)))
