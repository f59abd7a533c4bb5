# tests/test_imaging.py
import math

import numpy as np
import pytest

from markerforge.errors import DataError, EmptyRegionError
from markerforge.geometry import AffineTransform, GeometricTransform, Homography, Point2
from markerforge.imaging import (FLOW_SENTINEL, FlowField, Image, ValidRegion, bilinear_sample, composite,
                                 load_image, load_mask_png, encode_mask_png, psnr_value, save_png, ssim_map,
                                 ssim_value, warp_by_flow, warp_by_transform)


def brute_force_ssim(a, b, mask, radius=5, sigma=1.5, k1=0.01, k2=0.03):
    """逐像素的掩码归一化高斯窗SSIM"""
    h, w = a.shape
    offsets = np.arange(-radius, radius + 1)
    g = np.exp(-offsets ** 2 / (2 * sigma ** 2))
    kernel = np.outer(g, g)
    c1, c2 = k1 ** 2, k2 ** 2
    values = []
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            sw = sa = sb = saa = sbb = sab = 0.0
            for dy in offsets:
                for dx in offsets:
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w and mask[yy, xx]:
                        k = kernel[dy + radius, dx + radius]
                        sw += k
                        sa += k * a[yy, xx]
                        sb += k * b[yy, xx]
                        saa += k * a[yy, xx] ** 2
                        sbb += k * b[yy, xx] ** 2
                        sab += k * a[yy, xx] * b[yy, xx]
            ma, mb = sa / sw, sb / sw
            va, vb, cov = saa / sw - ma * ma, sbb / sw - mb * mb, sab / sw - ma * mb
            values.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(values))


def test_image_validation():
    with pytest.raises(DataError):
        Image(np.zeros((1, 5, 3)))
    with pytest.raises(DataError):
        Image(np.full((4, 4, 3), np.nan))
    assert Image(np.zeros((4, 5))).size == (5, 4)


def test_png_round_trip(tmp_path, texture):
    img = texture(0, 40, 30)
    path = str(tmp_path / 'img.png')
    save_png(path, img)
    np.testing.assert_array_equal(load_image(path).data, img.data)


def test_load_missing_image():
    with pytest.raises(DataError):
        load_image('/nonexistent/marker.png')


def test_mask_png_round_trip(tmp_path):
    mask = np.zeros((6, 8), dtype=bool)
    mask[2:5, 1:4] = True
    path = tmp_path / 'mask.png'
    path.write_bytes(encode_mask_png(ValidRegion(mask)))
    np.testing.assert_array_equal(load_mask_png(str(path)).mask, mask)


def test_bilinear_sample():
    img = Image(np.arange(12, dtype=np.float64).reshape(3, 4) / 12.0)
    assert bilinear_sample(img, Point2(1.0, 1.0))[0] == pytest.approx(5 / 12)
    assert bilinear_sample(img, Point2(1.5, 1.5))[0] == pytest.approx((5 + 6 + 9 + 10) / 48)
    assert bilinear_sample(img, Point2(3.0, 2.0))[0] == pytest.approx(11 / 12)
    assert bilinear_sample(img, Point2(3.5, 0.0)) is None


def test_flow_from_transform_marks_off_canvas_invalid():
    t = GeometricTransform(AffineTransform(0.0, 0.0, 1.0, Point2(-10.0, 0.0)), (20, 10), (30, 30))
    flow = FlowField.from_transform(t)
    assert not flow.valid[:, :10].any()
    assert flow.valid[:, 10:].all()
    loose = FlowField.from_transform(t, within_reference=False)
    assert loose.valid.all()
    assert flow.displacement()[0, 0, 0] == FLOW_SENTINEL


def test_flow_matches_transform_at_every_pixel():
    h = Homography.from_matrix([[1.05, 0.02, 12.0], [-0.03, 0.97, 7.0], [1e-4, -2e-4, 1.0]])
    t = GeometricTransform(h, (32, 24), (80, 60))
    flow = FlowField.from_transform(t)
    ys, xs = np.nonzero(flow.valid)
    expected = t.map_points(np.column_stack([xs, ys]).astype(float))
    assert np.max(np.abs(flow.target[ys, xs] - expected)) < 1e-6


def test_identity_warp_is_exact(texture):
    marker = texture(1, 24, 18)
    warped, region = warp_by_flow(marker, FlowField.identity(24, 18), (24, 18))
    assert region.count == 24 * 18
    np.testing.assert_array_equal(warped.data, marker.data)


def test_warp_by_flow_translation(texture):
    marker = texture(2, 20, 16)
    t = GeometricTransform(AffineTransform(0.0, 0.0, 1.0, Point2(7.0, 5.0)), (20, 16), (40, 30))
    warped, region = warp_by_flow(marker, FlowField.from_transform(t), (40, 30))
    assert region.count == 20 * 16
    assert region.mask[5:21, 7:27].all()
    np.testing.assert_allclose(warped.data[5:21, 7:27], marker.data, atol=1e-9)


def test_forward_and_inverse_warps_agree(texture):
    marker = texture(3, 40, 30)
    t = GeometricTransform(AffineTransform(0.2, 0.1, 1.1, Point2(30.0, 20.0)), (40, 30), (100, 80))
    forward, region_f = warp_by_flow(marker, FlowField.from_transform(t), (100, 80))
    inverse, region_i = warp_by_transform(marker, t, (100, 80))
    both = region_f.mask & region_i.mask
    assert both.sum() > 0.9 * region_i.count
    np.testing.assert_allclose(forward.data[both], inverse.data[both], atol=1e-9)


def test_torn_triangles_are_skipped(texture):
    marker = texture(4, 10, 10)
    target = FlowField.identity(10, 10).target.copy()
    target[:, 5:, 0] += 100.0
    warped, region = warp_by_flow(marker, FlowField(target, np.ones((10, 10), dtype=bool)), (200, 10),
                                  max_cell_edge=8.0)
    assert not region.mask[:, 5:100].any()


def test_composite_pastes_inside_region(texture):
    background = texture(5, 8, 6)
    foreground = Image(np.ones((6, 8, 3)))
    mask = np.zeros((6, 8), dtype=bool)
    mask[1:3, 2:5] = True
    out = composite(background, foreground, ValidRegion(mask))
    assert np.all(out.data[mask] == 1.0)
    np.testing.assert_array_equal(out.data[~mask], background.data[~mask])


def test_ssim_identical_is_one(texture):
    img = texture(6, 30, 20)
    assert ssim_value(img, img, ValidRegion.full(30, 20)) == pytest.approx(1.0)


def test_ssim_matches_brute_force():
    rng = np.random.default_rng(7)
    for _ in range(3):
        a = rng.uniform(size=(14, 16))
        b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
        mask = rng.uniform(size=a.shape) > 0.3
        fast = ssim_map(a, b, mask)[mask].mean()
        assert fast == pytest.approx(brute_force_ssim(a, b, mask), abs=1e-6)


def brute_force_psnr(a, b, mask):
    total, count = 0.0, 0
    for y in range(a.shape[0]):
        for x in range(a.shape[1]):
            if mask[y, x]:
                for c in range(a.shape[2]):
                    total += (a[y, x, c] - b[y, x, c]) ** 2
                    count += 1
    return 10.0 * math.log10(1.0 / (total / count))


@pytest.mark.slow
def test_ssim_and_psnr_match_brute_force_on_random_instances():
    rng = np.random.default_rng(17)
    for _ in range(20):
        width, height = rng.integers(8, 18, size=2)
        a = rng.uniform(size=(height, width, 3))
        b = np.clip(a + rng.normal(scale=0.05, size=a.shape), 0, 1)
        mask = rng.uniform(size=(height, width)) > 0.3
        mask[height // 2, width // 2] = True
        region = ValidRegion(mask)
        expected_ssim = np.mean([brute_force_ssim(a[:, :, c], b[:, :, c], mask) for c in range(3)])
        assert ssim_value(Image(a), Image(b), region) == pytest.approx(expected_ssim, abs=1e-6)
        assert psnr_value(Image(a), Image(b), region) == pytest.approx(brute_force_psnr(a, b, mask), rel=1e-9)


def test_psnr_known_value():
    a = Image(np.full((5, 5, 3), 0.5))
    b = Image(np.full((5, 5, 3), 0.6))
    region = ValidRegion.full(5, 5)
    assert psnr_value(a, b, region) == pytest.approx(20.0)
    assert psnr_value(a, a, region) == 99.0


def test_metrics_reject_empty_region(texture):
    img = texture(8, 6, 6)
    empty = ValidRegion(np.zeros((6, 6), dtype=bool))
    with pytest.raises(EmptyRegionError):
        ssim_value(img, img, empty)
    with pytest.raises(EmptyRegionError):
        psnr_value(img, img, empty)


def test_ssim_drops_for_misaligned_warp(texture):
    marker = texture(9, 40, 30)
    reference_t = GeometricTransform(AffineTransform(0.0, 0.0, 1.0, Point2(20.0, 15.0)), (40, 30), (80, 60))
    reference, region = warp_by_flow(marker, FlowField.from_transform(reference_t), (80, 60))
    shifted = GeometricTransform(AffineTransform(0.0, 0.0, 1.0, Point2(26.0, 15.0)), (40, 30), (80, 60))
    moved, moved_region = warp_by_flow(marker, FlowField.from_transform(shifted), (80, 60))
    assert ssim_value(reference, reference, region) > ssim_value(moved, reference, moved_region)
    assert not math.isnan(ssim_value(moved, reference, moved_region))
