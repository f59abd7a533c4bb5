# tests/test_geometry.py
import math

import numpy as np
import pytest

from markerforge.errors import (DataError, DegenerateConfigurationError, DegenerateTransformError,
                                EpipoleDegenerateError, InvariantViolation)
from markerforge.geometry import (AffineTransform, CameraIntrinsics, FundamentalMatrix, GeometricTransform,
                                  Homography, Point2, RelativePose, ThinPlateSpline, apply_transform,
                                  epipolar_distance, epipolar_distances, epipolar_line,
                                  fundamental_from_pose, homography_from_four_points,
                                  homography_least_squares, sed, sed_values, tps_evaluate)

MARKER = (64, 48)
CANVAS = (320, 240)
CORNERS = np.array([[0.0, 0.0], [63.0, 0.0], [63.0, 47.0], [0.0, 47.0]])


def x_translation_fundamental():
    """纯 x 方向平移、相同内参：极线为水平线 y' = y"""
    k = CameraIntrinsics(1.0, 1.0, 0.0, 0.0)
    pose = RelativePose(np.eye(3), np.array([1.0, 0.0, 0.0]))
    return fundamental_from_pose(k, k, pose)


def random_rig(rng):
    k_a = CameraIntrinsics(rng.uniform(200, 400), rng.uniform(200, 400), rng.uniform(100, 200), rng.uniform(80, 160))
    k_b = CameraIntrinsics(rng.uniform(200, 400), rng.uniform(200, 400), rng.uniform(100, 200), rng.uniform(80, 160))
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.05, 0.3)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    r = np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * k @ k
    t = rng.normal(size=3)
    return k_a, k_b, r, t / np.linalg.norm(t)


def project(k: CameraIntrinsics, points3d):
    p = points3d @ k.matrix().T
    return p[:, :2] / p[:, 2:3]


def test_affine_identity_maps_points_to_themselves():
    t = GeometricTransform(AffineTransform.identity(), MARKER, CANVAS)
    assert apply_transform(t, Point2(3.0, 4.0)) == Point2(3.0, 4.0)


def test_affine_rotation_example():
    t = GeometricTransform(AffineTransform(math.pi / 2, 0.0, 1.0, Point2(0.0, 0.0)), MARKER, CANVAS)
    p = apply_transform(t, Point2(1.0, 0.0))
    assert p.x == pytest.approx(0.0, abs=1e-12)
    assert p.y == pytest.approx(1.0)


def test_affine_determinant_follows_shear_and_scale():
    a = AffineTransform(0.3, 0.4, 1.2, Point2(5.0, 6.0))
    det = np.linalg.det(a.linear_part())
    assert det == pytest.approx(1.2 ** 2 * math.cos(0.4))


def test_affine_round_trip():
    rng = np.random.default_rng(0)
    t = GeometricTransform(AffineTransform(0.5, -0.3, 0.9, Point2(120.0, 80.0)), MARKER, CANVAS)
    points = rng.uniform(0, 60, size=(100, 2))
    back = t.inverse_map_points(t.map_points(points))
    np.testing.assert_allclose(back, points, atol=1e-9)


def test_degenerate_shear_rejected():
    with pytest.raises(DegenerateTransformError):
        AffineTransform(0.0, math.pi / 2, 1.0, Point2(0.0, 0.0))


def test_four_point_homography_recovers_known_matrix():
    truth = Homography.from_matrix([[1.1, 0.1, 30.0], [-0.05, 0.95, 20.0], [1e-4, 2e-4, 1.0]])
    dst = truth.map_points(CORNERS)
    h = homography_from_four_points(CORNERS, dst)
    np.testing.assert_allclose(h.matrix, truth.matrix, rtol=1e-8, atol=1e-10)
    grid = np.stack(np.meshgrid(np.arange(64.0), np.arange(48.0)), axis=2).reshape(-1, 2)
    np.testing.assert_allclose(h.map_points(grid), truth.map_points(grid), atol=1e-6)


def test_homography_inverse_round_trip():
    h = Homography.from_matrix([[0.9, 0.2, 15.0], [0.1, 1.1, 5.0], [2e-4, -1e-4, 1.0]])
    t = GeometricTransform(h, MARKER, CANVAS)
    p = Point2(10.0, 20.0)
    q = apply_transform(t, p)
    back = t.inverse_map_points(np.array([[q.x, q.y]]))[0]
    np.testing.assert_allclose(back, [p.x, p.y], atol=1e-9)


def test_collinear_points_rejected():
    src = [[0, 0], [1, 1], [2, 2], [0, 5]]
    with pytest.raises(DegenerateConfigurationError):
        homography_from_four_points(src, CORNERS)


def test_least_squares_matches_exact_fit():
    rng = np.random.default_rng(1)
    truth = Homography.from_matrix([[1.0, 0.05, 12.0], [0.02, 1.05, -4.0], [1e-4, 0.0, 1.0]])
    src = rng.uniform(0, 60, size=(30, 2))
    h = homography_least_squares(src, truth.map_points(src))
    np.testing.assert_allclose(h.map_points(src), truth.map_points(src), atol=1e-6)


def test_tps_identity():
    tps = ThinPlateSpline.identity()
    q = tps_evaluate(tps, Point2(0.3, -0.2))
    assert q.x == pytest.approx(0.3)
    assert q.y == pytest.approx(-0.2)
    t = GeometricTransform(tps, MARKER, MARKER)
    p = apply_transform(t, Point2(12.0, 30.0))
    assert p.x == pytest.approx(12.0)
    assert p.y == pytest.approx(30.0)


def test_tps_jacobian_matches_finite_differences():
    rng = np.random.default_rng(2)
    params = np.array(ThinPlateSpline.identity().params()) + rng.uniform(-0.1, 0.1, size=18)
    tps = ThinPlateSpline.from_params(params)
    points = rng.uniform(-0.9, 0.9, size=(20, 2))
    h = 1e-6
    jac = tps.jacobian(points)
    for axis in range(2):
        step = np.zeros(2)
        step[axis] = h
        numeric = (tps.evaluate(points + step) - tps.evaluate(points - step)) / (2 * h)
        np.testing.assert_allclose(jac[:, :, axis], numeric, atol=1e-6)


def test_tps_has_no_closed_form_inverse():
    t = GeometricTransform(ThinPlateSpline.identity(), MARKER, CANVAS)
    with pytest.raises(DataError):
        t.inverse_map_points(np.array([[1.0, 1.0]]))


def test_transform_json_round_trip():
    t = GeometricTransform(AffineTransform(0.1, 0.2, 1.1, Point2(50.0, 60.0)), MARKER, CANVAS)
    back = GeometricTransform.from_dict(t.to_dict())
    assert back.kind == 'affine'
    np.testing.assert_array_equal(back.map_points(CORNERS), t.map_points(CORNERS))


def test_unknown_transform_kind():
    with pytest.raises(DataError):
        GeometricTransform.from_dict({'kind': 'spiral', 'params': [], 'marker_size': [2, 2],
                                      'reference_size': [2, 2]})


def test_horizontal_epipolar_lines():
    f = x_translation_fundamental()
    line = epipolar_line(f, Point2(10.0, 20.0))
    assert line.a == pytest.approx(0.0, abs=1e-12)
    assert -line.c / line.b == pytest.approx(20.0)
    assert epipolar_distance(Point2(10.0, 20.0), Point2(30.0, 23.0), f) == pytest.approx(3.0)
    assert sed(Point2(10.0, 20.0), Point2(30.0, 23.0), f) == pytest.approx(6.0)
    assert sed(Point2(10.0, 20.0), Point2(55.0, 20.0), f) == pytest.approx(0.0, abs=1e-12)


def test_sed_zero_for_exact_projections():
    rng = np.random.default_rng(3)
    for _ in range(10):
        k_a, k_b, r, t = random_rig(rng)
        f = fundamental_from_pose(k_a, k_b, RelativePose(r, t))
        points = np.column_stack([rng.uniform(-1, 1, 50), rng.uniform(-1, 1, 50), rng.uniform(4, 8, 50)])
        x = project(k_a, points)
        x_prime = project(k_b, points @ r.T + t)
        assert np.nanmax(sed_values(x, x_prime, f)) < 1e-7


def test_sed_invariant_to_scaling_f():
    rng = np.random.default_rng(4)
    k_a, k_b, r, t = random_rig(rng)
    f = fundamental_from_pose(k_a, k_b, RelativePose(r, t))
    scaled = FundamentalMatrix(f.matrix * 1e3)
    x = rng.uniform(0, 300, size=(40, 2))
    x_prime = rng.uniform(0, 300, size=(40, 2))
    np.testing.assert_allclose(sed_values(x, x_prime, scaled), sed_values(x, x_prime, f), rtol=1e-9)


def test_degenerate_epipolar_line():
    k = CameraIntrinsics(1.0, 1.0, 0.0, 0.0)
    f = fundamental_from_pose(k, k, RelativePose(np.eye(3), np.array([0.0, 0.0, 1.0])))
    with pytest.raises(EpipoleDegenerateError):
        epipolar_line(f, Point2(0.0, 0.0))
    distances = epipolar_distances(np.array([[0.0, 0.0], [1.0, 2.0]]), np.array([[3.0, 3.0], [2.0, 4.0]]), f)
    assert math.isnan(distances[0])
    assert distances[1] == pytest.approx(0.0, abs=1e-12)


def test_fundamental_must_be_rank_two():
    with pytest.raises(InvariantViolation):
        FundamentalMatrix(np.eye(3))


def test_relative_pose_from_raw_normalizes():
    pose = RelativePose.from_raw(np.eye(3).reshape(-1), [0.0, 3.0, 4.0])
    np.testing.assert_allclose(pose.translation, [0.0, 0.6, 0.8])
    with pytest.raises(DataError):
        RelativePose(np.eye(3), np.array([0.0, 3.0, 4.0]))
