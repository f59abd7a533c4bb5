# tests/test_benchmark.py
import json
import os

import numpy as np
import pytest
from lxml import etree

from markerforge.benchmark import (SVG_NS, BenchmarkEntry, BenchmarkReport, BenchmarkSample, EvalRecord,
                                   alignment_eval, epe, estimator_seed, format_table, load_benchmark,
                                   lower_median, parse_benchmark_manifest, pck, render_level_chart,
                                   run_benchmark, summarize, write_benchmark_manifest, write_report)
from markerforge.errors import DataError, EmptyRegionError
from markerforge.flyingmarkers import SamplerConfig, generate_dataset
from markerforge.imaging import FlowField, Image, save_png
from markerforge.matcher import MatchOutcome
from markerforge.utils import list_image_files


def shifted(flow, dx, dy, valid=None):
    return FlowField(flow.target + np.array([dx, dy]), flow.valid if valid is None else valid)


def always_fails(marker, reference, ctx):
    return MatchOutcome.failure('no convergence')


@pytest.fixture
def dataset(tmp_path, image_dirs):
    markers, backgrounds = image_dirs
    root = str(tmp_path / 'fm')
    generate_dataset(SamplerConfig(canvas_size=(160, 120), sample_count=6, seed=5),
                     list_image_files(markers), list_image_files(backgrounds), root)
    return root


def test_epe_constant_offset():
    gt = FlowField.identity(6, 4)
    error_map, mean = epe(shifted(gt, 3.0, 4.0), gt)
    assert mean == pytest.approx(5.0)
    np.testing.assert_allclose(error_map, 5.0)


def test_epe_only_on_common_pixels():
    gt = FlowField.identity(6, 4)
    valid = np.ones((4, 6), dtype=bool)
    valid[:, :3] = False
    error_map, _ = epe(shifted(gt, 1.0, 0.0, valid), gt)
    assert np.isnan(error_map[:, :3]).all()
    with pytest.raises(EmptyRegionError):
        epe(shifted(gt, 1.0, 0.0, np.zeros((4, 6), dtype=bool)), gt)


def test_pck_threshold_is_strict():
    gt = FlowField.identity(6, 4)
    assert pck(shifted(gt, 1.0, 0.0), gt, 1.0) == 0.0
    assert pck(shifted(gt, 1.0, 0.0), gt, 1.0001) == 1.0


def test_pck_counts_invalid_predictions_as_wrong():
    gt = FlowField.identity(4, 4)
    valid = np.ones((4, 4), dtype=bool)
    valid[:2] = False
    assert pck(shifted(gt, 0.5, 0.0, valid), gt, 1.0) == pytest.approx(0.5)
    target = gt.target.copy()
    target[2:] += 2.0
    mixed = FlowField(target, np.ones((4, 4), dtype=bool))
    assert pck(mixed, gt, 1.0) == pytest.approx(0.5)
    assert pck(mixed, gt, 3.0) == pytest.approx(1.0)


def brute_force_epe_pck(flow_pred, gt, delta):
    """逐像素循环计算 EPE 均值和 PCK"""
    errors, correct, total = [], 0, 0
    for y in range(gt.height):
        for x in range(gt.width):
            if not gt.valid[y, x]:
                continue
            total += 1
            if not flow_pred.valid[y, x]:
                continue
            dx = flow_pred.target[y, x, 0] - gt.target[y, x, 0]
            dy = flow_pred.target[y, x, 1] - gt.target[y, x, 1]
            error = np.sqrt(dx * dx + dy * dy)
            errors.append(error)
            if error < delta:
                correct += 1
    return sum(errors) / len(errors), correct / total


@pytest.mark.slow
def test_epe_and_pck_match_brute_force():
    rng = np.random.default_rng(21)
    for _ in range(20):
        width, height = rng.integers(4, 20, size=2)
        gt_valid = rng.uniform(size=(height, width)) > 0.2
        gt_valid[0, 0] = True
        gt = FlowField(rng.uniform(0, 50, size=(height, width, 2)), gt_valid)
        pred_valid = rng.uniform(size=(height, width)) > 0.2
        pred_valid[0, 0] = True
        pred = FlowField(gt.target + rng.normal(scale=3.0, size=gt.target.shape), pred_valid)
        delta = float(rng.choice([1.0, 3.0, 5.0]))
        expected_epe, expected_pck = brute_force_epe_pck(pred, gt, delta)
        assert epe(pred, gt)[1] == pytest.approx(expected_epe, rel=1e-12)
        assert pck(pred, gt, delta) == expected_pck


@pytest.mark.slow
def test_ground_truth_oracle_on_two_hundred_samples(tmp_path, image_dirs):
    markers, backgrounds = image_dirs
    root = str(tmp_path / 'fm')
    generate_dataset(SamplerConfig(canvas_size=(160, 120), sample_count=200, seed=13),
                     list_image_files(markers), list_image_files(backgrounds), root, workers=4)
    report = run_benchmark(load_benchmark(root), 'gt', workers=4)
    summary = report.subsets['synthetic']
    assert summary.total == 200
    assert summary.failed == 0
    assert summary.pck == {'1': 1.0, '3': 1.0, '5': 1.0}
    assert summary.epe_mean < 1e-6
    assert all(r.epe < 1e-6 and r.ssim >= 0.99 and r.psnr >= 40.0 for r in report.records)
    assert [p.level for p in report.levels] == [1, 2, 3]


def test_lower_median():
    assert lower_median([4.0, 1.0, 3.0, 2.0]) == 2.0
    assert lower_median([5.0, 1.0, 3.0]) == 3.0
    assert lower_median([]) is None


def test_estimator_seed_depends_on_sample():
    assert estimator_seed(0, 'a') == estimator_seed(0, 'a')
    assert estimator_seed(0, 'a') != estimator_seed(0, 'b')
    assert estimator_seed(0, 'a') != estimator_seed(1, 'a')


def test_sample_validation(texture):
    marker = texture(0, 10, 8)
    ref = texture(1, 20, 16)
    with pytest.raises(DataError):
        BenchmarkSample('a', 'lighting', 3, marker, ref)
    with pytest.raises(DataError):
        BenchmarkSample('a', 'synthetic', 1, marker, ref)
    with pytest.raises(DataError):
        BenchmarkSample('a', 'viewpoint', 5, marker, ref)
    with pytest.raises(DataError):
        BenchmarkSample('a', 'glare', 1, marker, ref)


@pytest.mark.parametrize('data', [
    {'id': 'a'},
    [{'id': 'a', 'subset': 'viewpoint', 'level': 1, 'marker': 'm.png'}],
    [{'id': 'a', 'subset': 'viewpoint', 'level': 1, 'marker': 'm.png', 'reference': 'r.png', 'extra': 1}],
    [{'id': 'a', 'subset': 'viewpoint', 'level': 0, 'marker': 'm.png', 'reference': 'r.png'}],
    [{'id': 'a', 'subset': 'viewpoint', 'level': 'high', 'marker': 'm.png', 'reference': 'r.png'}],
    [{'id': 'a', 'subset': 'lighting', 'level': 2, 'marker': 'm.png', 'reference': 'r.png'}],
    [{'id': 'a', 'subset': 'synthetic', 'level': 2, 'marker': 'm.png', 'reference': 'r.png'}],
    [{'id': 'a', 'subset': 'viewpoint', 'level': 1, 'marker': 'm.png', 'reference': 'r.png'},
     {'id': 'a', 'subset': 'viewpoint', 'level': 2, 'marker': 'm.png', 'reference': 'r.png'}],
])
def test_manifest_schema_errors(data):
    with pytest.raises(DataError):
        parse_benchmark_manifest(data, '/data')


def test_manifest_round_trip(tmp_path):
    entries = [BenchmarkEntry('v1', 'viewpoint', 2, str(tmp_path / 'm.png'), str(tmp_path / 'v' / 'r.png')),
               BenchmarkEntry('l1', 'lighting', 7, str(tmp_path / 'm.png'), str(tmp_path / 'l.png'),
                              twin=str(tmp_path / 'l_twin.png'))]
    path = str(tmp_path / 'bench.json')
    write_benchmark_manifest(path, entries)
    with open(path, encoding='utf-8') as f:
        assert json.load(f)[0]['reference'] == 'v/r.png'
    assert load_benchmark(path) == entries


def test_dataset_loads_as_synthetic_subset(dataset):
    entries = load_benchmark(dataset)
    assert [e.sample_id for e in entries] == [f"{i:06d}" for i in range(6)]
    assert all(e.subset == 'synthetic' and e.gt_flow for e in entries)
    assert all(1 <= e.level <= 3 for e in entries)
    assert load_benchmark(os.path.join(dataset, 'manifest.json')) == entries


def test_ground_truth_oracle_on_synthetic(dataset):
    report = run_benchmark(load_benchmark(dataset), 'gt')
    summary = report.subsets['synthetic']
    assert summary.failed == 0
    assert summary.pck == {'1': 1.0, '3': 1.0, '5': 1.0}
    assert summary.epe_mean == 0.0
    assert summary.ssim_mean >= 0.99
    assert summary.psnr_mean >= 40.0
    assert [p.level for p in report.levels] == [1, 2, 3]


def test_identity_is_worse_than_oracle(dataset):
    entries = load_benchmark(dataset)
    oracle = run_benchmark(entries, 'gt').subsets['synthetic']
    identity = run_benchmark(entries, 'identity').subsets['synthetic']
    assert identity.pck['5'] < oracle.pck['5']
    assert identity.ssim_mean < oracle.ssim_mean


def test_results_independent_of_workers(dataset):
    entries = load_benchmark(dataset)
    one = run_benchmark(entries, 'homography', workers=1, seed=2)
    many = run_benchmark(entries, 'homography', workers=3, seed=2)
    assert one.to_dict() == many.to_dict()


def test_all_failures(dataset):
    report = run_benchmark(load_benchmark(dataset), always_fails)
    summary = report.subsets['synthetic']
    assert report.estimator == 'always_fails'
    assert summary.failed_pct == 100.0
    assert summary.ssim_mean is None and summary.psnr_median is None
    assert summary.pck == {'1': None, '3': None, '5': None}
    assert all(r.reason == 'no convergence' for r in report.records)
    assert '100.0' in format_table([report])


def test_lighting_scored_against_twin(texture):
    marker = texture(2, 30, 20)
    dark = Image(marker.data * 0.3)
    sample = BenchmarkSample('l1', 'lighting', 8, marker, dark, twin=marker)
    record = run_benchmark([sample], 'identity').records[0]
    assert record.ssim == pytest.approx(1.0)
    assert record.psnr == 99.0
    against_reference = alignment_eval(marker, FlowField.identity(30, 20), dark)
    assert against_reference.psnr < 20.0


def test_empty_region_is_a_failure(texture):
    marker = texture(3, 10, 8)
    off_canvas = FlowField(FlowField.identity(10, 8).target + 500.0, np.ones((8, 10), dtype=bool))

    def elsewhere(m, r, ctx):
        return MatchOutcome.success(off_canvas)

    record = run_benchmark([BenchmarkSample('v', 'viewpoint', 1, marker, texture(4, 20, 16))],
                           elsewhere).records[0]
    assert not record.scored
    assert record.reason == 'empty region'


def make_report(name, ssims):
    records = [EvalRecord(f"d{i}", 'deformation', i % 5 + 1, 'scored', ssim=s, psnr=20.0 + 10 * s)
               for i, s in enumerate(ssims)]
    records.append(EvalRecord('d-failed', 'deformation', 2, 'failed', reason='no convergence'))
    return summarize(records, name, [1.0, 3.0, 5.0])


def test_summary_excludes_failures():
    report = make_report('m', [0.9, 0.8, 0.7, 0.6])
    summary = report.subsets['deformation']
    assert summary.total == 5
    assert summary.failed_pct == pytest.approx(20.0)
    assert summary.ssim_mean == pytest.approx(0.75)
    assert summary.ssim_median == 0.7
    levels = {p.level: p for p in report.levels}
    assert sorted(levels) == [1, 2, 3, 4, 5]
    assert levels[2].total == 2 and levels[2].scored == 1
    assert levels[5].ssim_mean is None


def test_report_round_trip(tmp_path):
    report = make_report('m', [0.9, 0.8])
    path = str(tmp_path / 'report.json')
    report.save(path)
    assert BenchmarkReport.load(path).to_dict() == report.to_dict()


def test_table_lists_every_method():
    text = format_table([make_report('alpha', [0.9]), make_report('beta', [0.5])])
    header = text.splitlines()[0].split()
    assert header[:4] == ['Method', 'Subset', 'N', 'Failed%']
    assert 'Level' in text
    assert 'alpha' in text and 'beta' in text


def test_level_chart_svg():
    svg = render_level_chart([make_report('alpha', [0.9, 0.8]), make_report('beta', [0.5])],
                             'deformation', 'ssim')
    root = etree.fromstring(svg)
    assert root.tag == f"{{{SVG_NS}}}svg"
    assert len(root.findall(f"{{{SVG_NS}}}polyline")) == 2


def test_write_report_files(tmp_path):
    reports = [make_report('alpha', [0.9]), make_report('beta', [0.5])]
    written = write_report(reports, str(tmp_path))
    names = sorted(os.path.basename(p) for p in written)
    assert names == ['curves_deformation_psnr.svg', 'curves_deformation_ssim.svg',
                     'report.txt', 'report_alpha.json', 'report_beta.json']
    os.makedirs(str(tmp_path / 'one'))
    single = write_report(reports[0], str(tmp_path / 'one'), report_format='json', charts=False)
    assert [os.path.basename(p) for p in single] == ['report.json']


def test_bench_from_disk_matches_in_memory(tmp_path, texture):
    marker = texture(6, 24, 16)
    save_png(str(tmp_path / 'm.png'), marker)
    save_png(str(tmp_path / 'r.png'), marker)
    entry = BenchmarkEntry('v1', 'viewpoint', 1, str(tmp_path / 'm.png'), str(tmp_path / 'r.png'))
    record = run_benchmark([entry], 'identity').records[0]
    assert record.ssim == pytest.approx(1.0)
    assert record.psnr == 99.0
